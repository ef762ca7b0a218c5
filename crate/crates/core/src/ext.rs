//! Extended-real helpers.
//!
//! Costs and values are plain `f64` where `+inf` marks a forbidden
//! state/action pair. Expectations skip zero-probability successors so that
//! `0 * inf` never produces a NaN.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use std::fmt;

/// `E[v(s+)]` under the distribution `row`, ignoring zero-probability entries.
pub fn expectation(row: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&p, &x) in row.iter().zip(v) {
        if p != 0.0 {
            acc += p * x;
        }
    }
    acc
}

/// Lowest-index minimiser of `row`. Returns `None` when every entry is `+inf`.
pub fn argmin(row: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in row.iter().enumerate() {
        if x == f64::INFINITY {
            continue;
        }
        match best {
            Some((_, b)) if x >= b => {}
            _ => best = Some((i, x)),
        }
    }
    best
}

/// Difference that treats two equal infinities as zero apart.
pub fn ext_diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// Sup-norm distance between two extended-real vectors.
pub fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ext_diff(x, y)).fold(0.0, f64::max)
}

/// `max - min` over finite entries.
pub fn span(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if lo > hi {
        0.0
    } else {
        hi - lo
    }
}

/// JSON wrapper for an extended real: a number, or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtReal(pub f64);

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            ser.serialize_str("inf")
        } else {
            ser.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        struct ExtVisitor;
        impl Visitor<'_> for ExtVisitor {
            type Value = ExtReal;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<ExtReal, E> {
                Ok(ExtReal(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ExtReal, E> {
                Ok(ExtReal(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ExtReal, E> {
                Ok(ExtReal(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<ExtReal, E> {
                if v == "inf" {
                    Ok(ExtReal(f64::INFINITY))
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        de.deserialize_any(ExtVisitor)
    }
}

/// `serde(with = ...)` adapter for `Vec<f64>` with `"inf"` entries.
pub mod ext_vec {
    use super::ExtReal;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let wrapped: Vec<ExtReal> = v.iter().map(|&x| ExtReal(x)).collect();
        wrapped.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        let wrapped = Vec::<ExtReal>::deserialize(de)?;
        Ok(wrapped.into_iter().map(|x| x.0).collect())
    }
}

/// `serde(with = ...)` adapter for `Vec<Vec<f64>>` with `"inf"` entries.
pub mod ext_table {
    use super::ExtReal;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(t: &[Vec<f64>], ser: S) -> Result<S::Ok, S::Error> {
        let wrapped: Vec<Vec<ExtReal>> = t
            .iter()
            .map(|row| row.iter().map(|&x| ExtReal(x)).collect())
            .collect();
        wrapped.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let wrapped = Vec::<Vec<ExtReal>>::deserialize(de)?;
        Ok(wrapped
            .into_iter()
            .map(|row| row.into_iter().map(|x| x.0).collect())
            .collect())
    }
}

/// `serde(with = ...)` adapter for bound vectors, where both `"inf"` and
/// `"-inf"` are allowed.
pub mod signed_ext_vec {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let wrapped: Vec<Entry> = v
            .iter()
            .map(|&x| match x {
                f64::INFINITY => Entry::Text("inf".into()),
                f64::NEG_INFINITY => Entry::Text("-inf".into()),
                x => Entry::Number(x),
            })
            .collect();
        wrapped.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Entry>::deserialize(de)?
            .into_iter()
            .map(|e| match e {
                Entry::Number(x) => Ok(x),
                Entry::Text(t) if t == "inf" => Ok(f64::INFINITY),
                Entry::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
                Entry::Text(t) => Err(D::Error::custom(format!("bad bound '{t}'"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectation_skips_zero_mass_on_infinity() {
        let v = [1.0, f64::INFINITY, 3.0];
        assert_eq!(expectation(&[0.5, 0.0, 0.5], &v), 2.0);
        assert_eq!(expectation(&[0.5, 0.5, 0.0], &v), f64::INFINITY);
    }

    #[test]
    fn argmin_prefers_lowest_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), Some((1, 1.0)));
        assert_eq!(argmin(&[f64::INFINITY, f64::INFINITY]), None);
        assert_eq!(argmin(&[f64::INFINITY, 4.0]), Some((1, 4.0)));
    }

    #[test]
    fn inf_string_roundtrip() {
        let json = serde_json::to_string(&vec![ExtReal(1.5), ExtReal(f64::INFINITY)]).unwrap();
        assert_eq!(json, "[1.5,\"inf\"]");
        let back: Vec<ExtReal> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[1].0, f64::INFINITY);
        assert!(serde_json::from_str::<ExtReal>("\"-inf\"").is_err());
    }
}
