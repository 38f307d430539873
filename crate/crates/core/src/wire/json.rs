//! JSON encoding of [`Value`].
//!
//! Bytes travel as `{"$bytes": "<base64>"}`. Non-finite floats have no JSON
//! representation and are refused.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{Map, Number};

use super::CodecError;
use crate::value::Value;

pub const BYTES_MARKER: &str = "$bytes";

pub(crate) fn to_json(value: &Value) -> Result<serde_json::Value, CodecError> {
    Ok(match value {
        Value::Null => serde_json::Value::Null,
        Value::Bool(b) => serde_json::Value::Bool(*b),
        Value::Int(i) => serde_json::Value::Number((*i).into()),
        Value::Float(x) => serde_json::Value::Number(Number::from_f64(*x).ok_or_else(|| {
            CodecError::UnencodableValue(format!("float {x} has no JSON representation"))
        })?),
        Value::Text(s) => serde_json::Value::String(s.clone()),
        Value::Bytes(b) => {
            let mut m = Map::new();
            m.insert(BYTES_MARKER.to_owned(), serde_json::Value::String(BASE64.encode(b)));
            serde_json::Value::Object(m)
        }
        Value::List(items) => {
            serde_json::Value::Array(items.iter().map(to_json).collect::<Result<_, _>>()?)
        }
        Value::Map(entries) => {
            if entries.len() == 1 && entries.contains_key(BYTES_MARKER) {
                return Err(CodecError::UnencodableValue(format!(
                    "single-key map {BYTES_MARKER:?} collides with the JSON bytes marker"
                )));
            }
            let mut m = Map::new();
            for (k, v) in entries {
                m.insert(k.clone(), to_json(v)?);
            }
            serde_json::Value::Object(m)
        }
    })
}

pub(crate) fn from_json(json: serde_json::Value) -> Result<Value, CodecError> {
    Ok(match json {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::Int(i)
            } else if n.is_u64() {
                return Err(CodecError::IntegerOverflow);
            } else {
                Value::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_json::Value::String(s) => Value::Text(s),
        serde_json::Value::Array(items) => {
            Value::List(items.into_iter().map(from_json).collect::<Result<_, _>>()?)
        }
        serde_json::Value::Object(m) => {
            if m.len() == 1 {
                if let Some(serde_json::Value::String(b64)) = m.get(BYTES_MARKER) {
                    let bytes = BASE64.decode(b64).map_err(|e| {
                        CodecError::MalformedFrame(format!("bad base64 in bytes marker: {e}"))
                    })?;
                    return Ok(Value::Bytes(bytes));
                }
            }
            Value::Map(
                m.into_iter()
                    .map(|(k, v)| from_json(v).map(|v| (k, v)))
                    .collect::<Result<_, _>>()?,
            )
        }
    })
}

pub(crate) fn encode_value(value: &Value) -> Result<String, CodecError> {
    let json = to_json(value)?;
    serde_json::to_string(&json).map_err(|e| CodecError::UnencodableValue(e.to_string()))
}

pub(crate) fn decode_value(bytes: &[u8]) -> Result<Value, CodecError> {
    let json: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| CodecError::MalformedFrame(e.to_string()))?;
    from_json(json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_use_marker() {
        let s = encode_value(&Value::Bytes(vec![0, 1, 2, 255])).unwrap();
        assert_eq!(s, r#"{"$bytes":"AAEC/w=="}"#);
        assert_eq!(decode_value(s.as_bytes()).unwrap(), Value::Bytes(vec![0, 1, 2, 255]));
    }

    #[test]
    fn non_finite_floats_rejected() {
        for x in [f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(matches!(encode_value(&Value::Float(x)), Err(CodecError::UnencodableValue(_))));
        }
    }

    #[test]
    fn int_float_distinction_survives() {
        let v = Value::List(vec![Value::Int(1), Value::Float(1.0), Value::Float(-0.0)]);
        let s = encode_value(&v).unwrap();
        assert_eq!(s, "[1,1.0,-0.0]");
        assert_eq!(decode_value(s.as_bytes()).unwrap(), v);
    }

    #[test]
    fn out_of_range_integer() {
        assert_eq!(decode_value(b"18446744073709551615"), Err(CodecError::IntegerOverflow));
        assert_eq!(decode_value(b"-9223372036854775808").unwrap(), Value::Int(i64::MIN));
    }

    #[test]
    fn reserved_marker_map_refused() {
        let v = Value::map([(BYTES_MARKER, Value::Text("AA==".into()))]);
        assert!(matches!(encode_value(&v), Err(CodecError::UnencodableValue(_))));
        // with a sibling key it is an ordinary map
        let v = Value::map([(BYTES_MARKER, Value::Text("AA==".into())), ("x", Value::Null)]);
        assert_eq!(decode_value(encode_value(&v).unwrap().as_bytes()).unwrap(), v);
    }
}
