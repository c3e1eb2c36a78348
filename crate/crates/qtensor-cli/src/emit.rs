//! Deterministic JSON and CSV output with %.17g floats.

use qtensor_core::fmt_g17;
use serde::Serialize;
use serde_json::Value;

fn number(n: &serde_json::Number) -> String {
    if n.is_i64() || n.is_u64() {
        n.to_string()
    } else {
        fmt_g17(n.as_f64().expect("finite number"))
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&number(n)),
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) => {
            // Arrays of scalars stay on one line.
            if a.iter().all(|x| !x.is_array() && !x.is_object()) {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(x, indent, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (i, x) in a.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    write_value(x, indent + 1, out);
                    out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            out.push_str("{\n");
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push_str(": ");
                write_value(&m[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Pretty JSON with sorted keys; NaN and infinities become null.
pub fn to_json<T: Serialize>(report: &T) -> String {
    let v = serde_json::to_value(report).expect("report serializes");
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    out
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            for k in keys {
                flatten(&key(k), &m[k], rows);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), x, rows);
            }
        }
        Value::Null => rows.push((prefix.to_string(), String::new())),
        Value::Bool(b) => rows.push((prefix.to_string(), b.to_string())),
        Value::Number(n) => rows.push((prefix.to_string(), number(n))),
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
    }
}

/// Two-column `key,value` CSV with dotted key paths.
pub fn to_csv<T: Serialize>(report: &T) -> String {
    let v = serde_json::to_value(report).expect("report serializes");
    let mut rows = Vec::new();
    flatten("", &v, &mut rows);
    let mut out = String::from("key,value\n");
    for (k, val) in rows {
        let val = if val.contains(',') || val.contains('"') { format!("\"{}\"", val.replace('"', "\"\"")) } else { val };
        out.push_str(&format!("{k},{val}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct R {
        b: f64,
        a: Vec<f64>,
        n: Option<f64>,
        k: usize,
    }

    #[test]
    fn json_is_sorted_and_uses_g17() {
        let s = to_json(&R { b: 0.1, a: vec![1.0, 1e-20, f64::NAN], n: None, k: 3 });
        assert_eq!(s, "{\n  \"a\": [1, 9.9999999999999995e-21, null],\n  \"b\": 0.10000000000000001,\n  \"k\": 3,\n  \"n\": null\n}\n");
    }

    #[test]
    fn csv_flattens_paths() {
        let s = to_csv(&R { b: 2.5, a: vec![1.0], n: None, k: 1 });
        assert_eq!(s, "key,value\na.0,1\nb,2.5\nk,1\nn,\n");
    }
}
