use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::MpcError;

/// Lower bound applied to the diagonal of every cost factor.
pub const FACTOR_DIAG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SliceKind {
    Plain,
    /// Packed lower-triangular factor `F` of a `dim x dim` matrix `F F'`.
    Factor { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThetaSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub kind: SliceKind,
}

/// Flat parameter vector with a named-slice layout.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaVector {
    values: Vec<f64>,
    layout: Vec<ThetaSlice>,
}

pub fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// `F F'` from a row-major packed lower triangle, diagonal floored.
pub fn factor_to_matrix(packed: &[f64], dim: usize) -> DMatrix<f64> {
    let mut f = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            f[(i, j)] = if i == j {
                packed[k].max(FACTOR_DIAG_FLOOR)
            } else {
                packed[k]
            };
            k += 1;
        }
    }
    &f * f.transpose()
}

/// Packed Cholesky factor of a symmetric positive definite matrix.
pub fn matrix_to_factor(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let l = m.clone().cholesky()?.l();
    let dim = m.nrows();
    let mut out = Vec::with_capacity(packed_len(dim));
    for i in 0..dim {
        for j in 0..=i {
            out.push(l[(i, j)]);
        }
    }
    Some(out)
}

/// Symmetric matrix from a row-major packed lower triangle (no flooring).
pub fn packed_symmetric(packed: &[f64], dim: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            m[(i, j)] = packed[k];
            m[(j, i)] = packed[k];
            k += 1;
        }
    }
    m
}

impl ThetaVector {
    pub fn new() -> Self {
        Self::default()
    }

    fn push_slice(&mut self, name: &str, values: &[f64], kind: SliceKind) -> Result<(), MpcError> {
        if self.layout.iter().any(|s| s.name == name) {
            return Err(MpcError::Theta(format!("duplicate slice '{name}'")));
        }
        self.layout.push(ThetaSlice {
            name: name.to_string(),
            start: self.values.len(),
            len: values.len(),
            kind,
        });
        self.values.extend_from_slice(values);
        Ok(())
    }

    pub fn push(&mut self, name: &str, values: &[f64]) -> Result<(), MpcError> {
        self.push_slice(name, values, SliceKind::Plain)
    }

    /// Stores the Cholesky factor of the positive definite `matrix`.
    pub fn push_factor(&mut self, name: &str, matrix: &DMatrix<f64>) -> Result<(), MpcError> {
        let packed = matrix_to_factor(matrix)
            .ok_or_else(|| MpcError::Theta(format!("'{name}' is not positive definite")))?;
        self.push_slice(name, &packed, SliceKind::Factor { dim: matrix.nrows() })
    }

    pub fn with(mut self, name: &str, values: &[f64]) -> Result<Self, MpcError> {
        self.push(name, values)?;
        Ok(self)
    }

    pub fn with_factor(mut self, name: &str, matrix: &DMatrix<f64>) -> Result<Self, MpcError> {
        self.push_factor(name, matrix)?;
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[ThetaSlice] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Result<&[f64], MpcError> {
        let s = self
            .layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| MpcError::Theta(format!("no slice '{name}'")))?;
        Ok(&self.values[s.start..s.start + s.len])
    }

    pub fn slice_info(&self, name: &str) -> Option<&ThetaSlice> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Name of the slice containing flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.layout
            .iter()
            .find(|s| i >= s.start && i < s.start + s.len)
            .map(|s| s.name.as_str())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Raises every factor diagonal to at least `FACTOR_DIAG_FLOOR`.
    pub fn apply_floor(&mut self) {
        for s in &self.layout {
            if let SliceKind::Factor { dim } = s.kind {
                let mut k = s.start;
                for i in 0..dim {
                    k += i;
                    self.values[k] = self.values[k].max(FACTOR_DIAG_FLOOR);
                    k += 1;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let mut next = 0;
        for s in &self.layout {
            if s.start != next {
                return Err(MpcError::Theta(format!("slice '{}' is not contiguous", s.name)));
            }
            if let SliceKind::Factor { dim } = s.kind {
                if s.len != packed_len(dim) {
                    return Err(MpcError::Theta(format!("factor '{}' has wrong length", s.name)));
                }
            }
            next += s.len;
        }
        if next != self.values.len() {
            return Err(MpcError::Theta("layout does not cover the vector".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(MpcError::Theta("non-finite entry".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_roundtrip_and_floor() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let mut th = ThetaVector::new().with("l", &[0.25]).unwrap().with_factor("G", &m).unwrap();
        let packed = th.slice("G").unwrap().to_vec();
        assert!((factor_to_matrix(&packed, 2) - &m).amax() < 1e-12);
        th.values_mut()[1] = -3.0;
        th.values_mut()[3] = 0.0;
        th.apply_floor();
        assert_eq!(th.slice("G").unwrap()[0], FACTOR_DIAG_FLOOR);
        assert_eq!(th.slice("G").unwrap()[2], FACTOR_DIAG_FLOOR);
        assert!(factor_to_matrix(th.slice("G").unwrap(), 2).cholesky().is_some());
        assert_eq!(th.name_of(0), Some("l"));
        assert_eq!(th.name_of(3), Some("G"));
    }

    #[test]
    fn layout_errors() {
        let th = ThetaVector::new().with("a", &[1.0]).unwrap();
        assert!(th.clone().with("a", &[2.0]).is_err());
        assert!(th.slice("b").is_err());
        assert!(ThetaVector::new()
            .with_factor("bad", &DMatrix::from_row_slice(1, 1, &[-1.0]))
            .is_err());
        let json = serde_json::to_string(&th).unwrap();
        let back: ThetaVector = serde_json::from_str(&json).unwrap();
        assert_eq!(back, th);
        back.validate().unwrap();
    }
}
