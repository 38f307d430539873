//! Oracles shared by the integration tests. Nothing here calls into the
//! crate's encoders.

#![allow(dead_code)]

use pubduct::value::Value;

/// A straightforward CBOR writer following RFC 8949 section by section:
/// preferred (shortest) argument encoding, definite lengths, float64 for
/// every float, and map keys in lexicographic order of their UTF-8 bytes.
pub fn ref_cbor(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    write(v, &mut out);
    out
}

fn head(major: u8, n: u64) -> Vec<u8> {
    let m = major << 5;
    match n {
        0..=23 => vec![m + n as u8],
        24..=0xff => vec![m + 24, n as u8],
        0x100..=0xffff => {
            let mut h = vec![m + 25];
            h.extend_from_slice(&(n as u16).to_be_bytes());
            h
        }
        0x1_0000..=0xffff_ffff => {
            let mut h = vec![m + 26];
            h.extend_from_slice(&(n as u32).to_be_bytes());
            h
        }
        _ => {
            let mut h = vec![m + 27];
            h.extend_from_slice(&n.to_be_bytes());
            h
        }
    }
}

fn write(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Null => out.push(0xf6),
        Value::Bool(b) => out.push(if *b { 0xf5 } else { 0xf4 }),
        Value::Int(i) => {
            if *i < 0 {
                out.extend(head(1, !(*i as u64)));
            } else {
                out.extend(head(0, *i as u64));
            }
        }
        Value::Float(f) => {
            out.push(0xfb);
            out.extend(f.to_bits().to_be_bytes());
        }
        Value::Bytes(b) => {
            out.extend(head(2, b.len() as u64));
            out.extend(b);
        }
        Value::Text(s) => {
            out.extend(head(3, s.len() as u64));
            out.extend(s.bytes());
        }
        Value::List(items) => {
            out.extend(head(4, items.len() as u64));
            items.iter().for_each(|i| write(i, out));
        }
        Value::Map(m) => {
            let mut pairs: Vec<(&[u8], &Value)> = m.iter().map(|(k, v)| (k.as_bytes(), v)).collect();
            pairs.sort_by(|a, b| a.0.cmp(b.0));
            out.extend(head(5, pairs.len() as u64));
            for (k, v) in pairs {
                out.extend(head(3, k.len() as u64));
                out.extend(k);
                write(v, out);
            }
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn unhex(s: &str) -> Vec<u8> {
    let s: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

pub fn map(entries: &[(&str, Value)]) -> Value {
    Value::Map(entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
}

pub fn text(s: &str) -> Value {
    Value::Text(s.into())
}

/// Envelopes with hand-written expected maps. The CBOR golden bytes are
/// `ref_cbor(expected)`.
pub fn golden_envelopes() -> Vec<(&'static str, pubduct::wire::Envelope, Value)> {
    use pubduct::wire::{Encoding, Envelope, StatusLevel};
    vec![
        ("ping", Envelope::Ping { nonce: 0 }, map(&[("op", text("ping"))])),
        ("pong with nonce", Envelope::Pong { nonce: 300 }, map(&[("op", text("pong")), ("nonce", Value::Int(300))])),
        (
            "hello",
            Envelope::Hello { session_id: "abc".into(), resume: false, version: 1, encodings: None },
            map(&[("op", text("hello")), ("session_id", text("abc")), ("resume", Value::Bool(false)), ("version", Value::Int(1))]),
        ),
        (
            "hello_ack",
            Envelope::HelloAck { session_id: "abc".into(), resumed: true, encoding: Encoding::Cbor },
            map(&[("op", text("hello_ack")), ("session_id", text("abc")), ("resumed", Value::Bool(true)), ("encoding", text("cbor"))]),
        ),
        (
            "advertise",
            Envelope::Advertise { topic: "/scan".into(), type_name: "sensor/LaserScan".into() },
            map(&[("op", text("advertise")), ("topic", text("/scan")), ("type", text("sensor/LaserScan"))]),
        ),
        (
            "publish",
            Envelope::Publish { topic: "/odom".into(), msg: map(&[("x", Value::Float(1.5)), ("ok", Value::Bool(true))]), seq: -7 },
            map(&[
                ("op", text("publish")),
                ("topic", text("/odom")),
                ("msg", map(&[("x", Value::Float(1.5)), ("ok", Value::Bool(true))])),
                ("seq", Value::Int(-7)),
            ]),
        ),
        (
            "subscribe",
            Envelope::Subscribe {
                topic: "/cmd_vel".into(),
                type_name: "geometry/Twist".into(),
                throttle_rate: 100,
                queue_length: 1000,
                compression: Encoding::Json,
            },
            map(&[
                ("op", text("subscribe")),
                ("topic", text("/cmd_vel")),
                ("type", text("geometry/Twist")),
                ("throttle_rate", Value::Int(100)),
                ("queue_length", Value::Int(1000)),
                ("compression", text("json")),
            ]),
        ),
        (
            "call_service",
            Envelope::CallService { service: "/grip".into(), args: Value::Bytes(vec![0, 1, 2, 255]), id: "c1".into() },
            map(&[("op", text("call_service")), ("service", text("/grip")), ("args", Value::Bytes(vec![0, 1, 2, 255])), ("id", text("c1"))]),
        ),
        (
            "service_response",
            Envelope::ServiceResponse { id: "c1".into(), values: Value::List(vec![Value::Null, Value::Int(70000)]), result: false },
            map(&[
                ("op", text("service_response")),
                ("id", text("c1")),
                ("values", Value::List(vec![Value::Null, Value::Int(70000)])),
                ("result", Value::Bool(false)),
            ]),
        ),
        (
            "status",
            Envelope::Status { level: StatusLevel::Warning, msg: "unknown op \"x\"".into(), ref_id: Some("r9".into()) },
            map(&[("op", text("status")), ("level", text("warning")), ("msg", text("unknown op \"x\"")), ("ref_id", text("r9"))]),
        ),
    ]
}
