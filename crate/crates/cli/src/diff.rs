use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("schema mismatch at {0}")]
    SchemaMismatch(String),
}

/// Numbers `x`, `y` agree when `|x - y| <= atol + rtol * max(|x|, |y|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffOptions {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for DiffOptions {
    fn default() -> Self {
        DiffOptions { atol: 1e-9, rtol: 0.0 }
    }
}

fn walk(a: &Value, b: &Value, path: &str, opts: &DiffOptions, out: &mut Vec<String>) -> Result<(), DiffError> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            if x.len() != y.len() || x.keys().any(|k| !y.contains_key(k)) {
                return Err(DiffError::SchemaMismatch(format!("{path}: key sets differ")));
            }
            for (k, v) in x {
                walk(v, &y[k], &format!("{path}.{k}"), opts, out)?;
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            if x.len() != y.len() {
                out.push(format!("{path}: length {} vs {}", x.len(), y.len()));
                return Ok(());
            }
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                walk(u, v, &format!("{path}[{i}]"), opts, out)?;
            }
        }
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            if !((x - y).abs() <= opts.atol + opts.rtol * x.abs().max(y.abs())) {
                out.push(format!("{path}: {x} vs {y}"));
            }
        }
        // Non-finite numbers serialise as null.
        (Value::Null, Value::Number(_)) | (Value::Number(_), Value::Null) => {
            out.push(format!("{path}: {a} vs {b}"));
        }
        (Value::Null, Value::Null) => {}
        (Value::Bool(x), Value::Bool(y)) if x == y => {}
        (Value::String(x), Value::String(y)) if x == y => {}
        (Value::Bool(_), Value::Bool(_)) | (Value::String(_), Value::String(_)) => {
            out.push(format!("{path}: {a} vs {b}"));
        }
        // An optional field may be null in one report only.
        (Value::Null, _) | (_, Value::Null) => out.push(format!("{path}: {a} vs {b}")),
        _ => return Err(DiffError::SchemaMismatch(format!("{path}: {a} vs {b}"))),
    }
    Ok(())
}

/// Field-by-field comparison of two reports. Returns `"no differences"` or
/// one line per differing field.
pub fn report_diff(a: &Value, b: &Value, opts: &DiffOptions) -> Result<String, DiffError> {
    let mut out = Vec::new();
    walk(a, b, "$", opts, &mut out)?;
    if out.is_empty() {
        Ok("no differences".to_string())
    } else {
        Ok(out.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn tolerance_and_flags() {
        let opts = DiffOptions::default();
        let a = json!({"gap": 1e-10, "policy_agreement": 1.0, "name": "x"});
        assert_eq!(report_diff(&a, &a, &opts).unwrap(), "no differences");
        let b = json!({"gap": 1e-10 + 1e-12, "policy_agreement": 1.0, "name": "x"});
        assert_eq!(report_diff(&a, &b, &opts).unwrap(), "no differences");
        let c = json!({"gap": 1e-10, "policy_agreement": 0.98, "name": "x"});
        let text = report_diff(&a, &c, &opts).unwrap();
        assert!(text.contains("$.policy_agreement"), "{text}");
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn schema_mismatch() {
        let opts = DiffOptions::default();
        let a = json!({"gap": 1.0});
        assert!(matches!(report_diff(&a, &json!({"other": 1.0}), &opts), Err(DiffError::SchemaMismatch(_))));
        assert!(matches!(report_diff(&a, &json!({"gap": "1"}), &opts), Err(DiffError::SchemaMismatch(_))));
        let t = report_diff(&json!([1, 2]), &json!([1, 2, 3]), &opts).unwrap();
        assert!(t.contains("length"));
        let rel = DiffOptions { atol: 0.0, rtol: 1e-6 };
        assert_eq!(report_diff(&json!(1e6), &json!(1e6 + 0.5), &rel).unwrap(), "no differences");
    }
}
