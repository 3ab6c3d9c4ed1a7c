//! Canonical JSON rendering: object keys emitted in sorted order at every
//! nesting level, numbers in serde_json's shortest round-trip form. Used
//! wherever serialized output must be byte-reproducible (checkpoint headers,
//! embedded merge metadata, search reports).

use serde_json::Value;

/// Render a JSON value with all object keys sorted.
pub fn canonical(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

/// Serialize anything serde can handle into canonical JSON.
pub fn to_canonical_string<T: serde::Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(canonical(&serde_json::to_value(value)?))
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) | Value::String(_) => {
            // serde_json's scalar formatting is already deterministic.
            out.push_str(&value.to_string());
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
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push(':');
                write_value(&map[key.as_str()], out);
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
    fn keys_sorted_recursively() {
        let v = json!({"b": {"z": 1, "a": [{"y": 2, "x": 3}]}, "a": 0});
        assert_eq!(canonical(&v), r#"{"a":0,"b":{"a":[{"x":3,"y":2}],"z":1}}"#);
    }

    #[test]
    fn stable_across_calls() {
        let v = json!({"g_enc": 2, "g_dec": 1, "specs": [0.5, 0.25]});
        assert_eq!(canonical(&v), canonical(&v));
    }
}
