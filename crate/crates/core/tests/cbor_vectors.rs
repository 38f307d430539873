//! CBOR against published RFC 8949 Appendix A examples and against the
//! reference encoder in tests/common.

mod common;

use common::{golden_envelopes, hex, ref_cbor, unhex};
use pubduct::value::Value;
use pubduct::wire::{decode, encode, value_from_cbor, value_to_cbor, Encoding};

fn l(items: Vec<Value>) -> Value {
    Value::List(items)
}

fn rfc_encode_vectors() -> Vec<(Value, &'static str)> {
    use Value::*;
    vec![
        (Int(0), "00"),
        (Int(1), "01"),
        (Int(10), "0a"),
        (Int(23), "17"),
        (Int(24), "1818"),
        (Int(25), "1819"),
        (Int(100), "1864"),
        (Int(1000), "1903e8"),
        (Int(1000000), "1a000f4240"),
        (Int(1000000000000), "1b000000e8d4a51000"),
        (Int(-1), "20"),
        (Int(-10), "29"),
        (Int(-100), "3863"),
        (Int(-1000), "3903e7"),
        (Float(1.1), "fb3ff199999999999a"),
        (Float(1.0e300), "fb7e37e43c8800759c"),
        (Float(-4.1), "fbc010666666666666"),
        (Bool(false), "f4"),
        (Bool(true), "f5"),
        (Null, "f6"),
        (Bytes(vec![]), "40"),
        (Bytes(vec![1, 2, 3, 4]), "4401020304"),
        (Text("".into()), "60"),
        (Text("a".into()), "6161"),
        (Text("IETF".into()), "6449455446"),
        (Text("\"\\".into()), "62225c"),
        (Text("\u{00fc}".into()), "62c3bc"),
        (Text("\u{6c34}".into()), "63e6b0b4"),
        (l(vec![]), "80"),
        (l(vec![Int(1), Int(2), Int(3)]), "83010203"),
        (l(vec![Int(1), l(vec![Int(2), Int(3)]), l(vec![Int(4), Int(5)])]), "8301820203820405"),
        (Value::map::<&str, _>([]), "a0"),
        (Value::map([("a", Int(1)), ("b", l(vec![Int(2), Int(3)]))]), "a26161016162820203"),
        (l(vec![Text("a".into()), Value::map([("b", Text("c".into()))])]), "826161a161626163"),
    ]
}

#[test]
fn rfc_appendix_a_encoding() {
    for (value, expected) in rfc_encode_vectors() {
        assert_eq!(hex(&value_to_cbor(&value)), expected, "{value:?}");
        assert_eq!(hex(&ref_cbor(&value)), expected, "reference encoder on {value:?}");
        assert_eq!(value_from_cbor(&unhex(expected)).unwrap(), value);
    }
}

#[test]
fn rfc_appendix_a_decode_only() {
    // shorter floats and indefinite lengths are never produced but must be read
    let cases = [
        ("f93e00", Value::Float(1.5)),
        ("f97bff", Value::Float(65504.0)),
        ("fa47c35000", Value::Float(100000.0)),
        ("f90001", Value::Float(5.960464477539063e-8)),
        ("f97c00", Value::Float(f64::INFINITY)),
        ("f9fc00", Value::Float(f64::NEG_INFINITY)),
        ("9fff", l(vec![])),
        ("9f018202039f0405ffff", l(vec![Value::Int(1), l(vec![Value::Int(2), Value::Int(3)]), l(vec![Value::Int(4), Value::Int(5)])])),
        ("5f42010243030405ff", Value::Bytes(vec![1, 2, 3, 4, 5])),
        ("7f657374726561646d696e67ff", Value::Text("streaming".into())),
        ("bf61610161629f0203ffff", Value::map([("a", Value::Int(1)), ("b", l(vec![Value::Int(2), Value::Int(3)]))])),
        ("c074323031332d30332d32315432303a30343a30305a", Value::Text("2013-03-21T20:04:00Z".into())),
    ];
    for (h, expected) in cases {
        assert_eq!(value_from_cbor(&unhex(h)).unwrap(), expected, "{h}");
    }
    match value_from_cbor(&unhex("f97e00")).unwrap() {
        Value::Float(x) => assert!(x.is_nan()),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_inputs_rejected() {
    for h in ["", "18", "1a0001", "62c3", "8301", "a16161", "ff", "0000", "1c", "5f01ff", "c2420100"] {
        assert!(value_from_cbor(&unhex(h)).is_err(), "{h:?} should not decode");
    }
}

#[test]
fn ping_frame_bytes() {
    let env = pubduct::wire::Envelope::Ping { nonce: 0 };
    assert_eq!(encode(&env, Encoding::Cbor).unwrap(), unhex("A1 62 6F 70 64 70 69 6E 67"));
}

#[test]
fn envelopes_match_reference_encoder() {
    let vectors = golden_envelopes();
    assert_eq!(vectors.len(), 10);
    for (name, env, expected_map) in vectors {
        let want = ref_cbor(&expected_map);
        let got = encode(&env, Encoding::Cbor).unwrap();
        assert_eq!(hex(&got), hex(&want), "{name}");
        assert_eq!(decode(&want, Encoding::Cbor).unwrap(), env, "{name}");

        // the JSON encoding carries the same map
        let json: serde_json::Value = serde_json::from_slice(&encode(&env, Encoding::Json).unwrap()).unwrap();
        assert_eq!(json.as_object().unwrap().len(), expected_map.as_map().unwrap().len(), "{name}");
    }
}
