//! Canonical JSON rendering.
//!
//! Object keys are emitted in sorted (byte) order, output is compact UTF-8,
//! integers stay integers and reals use the shortest decimal that round-trips.
//! The writer sorts keys itself so the result does not depend on how
//! `serde_json` was compiled (`preserve_order` may be enabled by another crate
//! in the graph).

use serde::Serialize;
use serde_json::Value;

/// Serialize any value to canonical JSON text.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let value = serde_json::to_value(value)?;
    Ok(value_to_canonical(&value))
}

/// Render an already-built [`Value`] canonically.
pub fn value_to_canonical(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => {
            // serializing a str cannot fail
            out.push_str(&serde_json::to_string(s).expect("string serialization"));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serialization"));
                out.push(':');
                write_value(&map[key], out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_compact() {
        let v = json!({"b": 1, "a": [1.5, "x"], "c": {"z": null, "y": true}});
        assert_eq!(
            value_to_canonical(&v),
            r#"{"a":[1.5,"x"],"b":1,"c":{"y":true,"z":null}}"#
        );
    }

    #[test]
    fn reals_shortest_round_trip() {
        let v = json!([0.1, 1.0, 1e-7, 0.30000000000000004]);
        let text = value_to_canonical(&v);
        assert_eq!(text, "[0.1,1.0,1e-7,0.30000000000000004]");
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, vec![0.1, 1.0, 1e-7, 0.30000000000000004]);
    }
}
