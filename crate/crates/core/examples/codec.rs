//! Encodes a few envelopes in both wire encodings and compares sizes. The
//! float-heavy laser scan is where CBOR pays off: every float is 9 bytes
//! instead of a decimal string.
//!
//!     cargo run --example codec

use pubduct::value::Value;
use pubduct::wire::{Codec, Encoding, Envelope};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02X}")).collect::<Vec<_>>().join(" ")
}

fn main() {
    let codec = Codec::default();

    let ping = Envelope::Ping { nonce: 0 };
    println!("ping as CBOR: {}", hex(&codec.encode(&ping, Encoding::Cbor).unwrap()));
    println!("ping as JSON: {}", String::from_utf8(codec.encode(&ping, Encoding::Json).unwrap()).unwrap());

    let ranges: Vec<Value> = (0..30_000).map(|i| Value::Float(0.5 + (i as f64 * 0.37).sin().abs() * 11.0)).collect();
    let scan = Envelope::Publish {
        topic: "/front_laser".into(),
        msg: Value::map([("ranges", Value::List(ranges)), ("frame", Value::Text("laser".into()))]),
        seq: 1,
    };
    let image = Envelope::Publish {
        topic: "/front_camera".into(),
        msg: Value::map([("format", Value::Text("jpeg".into())), ("data", Value::Bytes(vec![0xAB; 12_000]))]),
        seq: 1,
    };
    let twist = Envelope::Publish {
        topic: "/cmd_vel".into(),
        msg: Value::map([("linear", Value::Float(0.25)), ("angular", Value::Float(-0.1))]),
        seq: 42,
    };

    println!();
    println!("{:<24} {:>10} {:>10} {:>7}", "envelope", "cbor", "json", "ratio");
    for (name, env) in [("laser scan, 30000 floats", &scan), ("jpeg, 12000 bytes", &image), ("twist", &twist)] {
        let cbor = codec.encode(env, Encoding::Cbor).unwrap();
        let json = codec.encode(env, Encoding::Json).unwrap();
        assert_eq!(&codec.decode(&cbor, Encoding::Cbor).unwrap(), env);
        assert_eq!(&codec.decode(&json, Encoding::Json).unwrap(), env);
        println!("{name:<24} {:>10} {:>10} {:>7.3}", cbor.len(), json.len(), cbor.len() as f64 / json.len() as f64);
    }

    match codec.decode(b"{\"op\":\"teleport\"}", Encoding::Json) {
        Ok(_) => unreachable!(),
        Err(e) => println!("\nunknown op is a typed error: {e}"),
    }
}
