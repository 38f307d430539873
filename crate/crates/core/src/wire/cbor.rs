//! CBOR (RFC 8949) encoding of [`Value`].
//!
//! Encoding always produces the shortest head for integers and lengths,
//! definite lengths, map keys in byte-lexicographic order and floats as
//! binary64. Decoding also accepts half/single floats, indefinite lengths
//! and tagged items (tags are discarded, bignums rejected).

use std::collections::BTreeMap;

use super::CodecError;
use crate::value::Value;

const MAX_DEPTH: usize = 128;

pub(crate) fn encode_value(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.push(0xf6),
        Value::Bool(false) => out.push(0xf4),
        Value::Bool(true) => out.push(0xf5),
        Value::Int(i) if *i >= 0 => write_head(out, 0, *i as u64),
        // -1 - i never overflows for negative i
        Value::Int(i) => write_head(out, 1, (-1 - *i) as u64),
        Value::Float(x) => {
            out.push(0xfb);
            out.extend_from_slice(&x.to_bits().to_be_bytes());
        }
        Value::Bytes(b) => {
            write_head(out, 2, b.len() as u64);
            out.extend_from_slice(b);
        }
        Value::Text(s) => {
            write_head(out, 3, s.len() as u64);
            out.extend_from_slice(s.as_bytes());
        }
        Value::List(items) => {
            write_head(out, 4, items.len() as u64);
            for item in items {
                encode_value(item, out);
            }
        }
        Value::Map(entries) => {
            write_head(out, 5, entries.len() as u64);
            for (k, v) in entries {
                write_head(out, 3, k.len() as u64);
                out.extend_from_slice(k.as_bytes());
                encode_value(v, out);
            }
        }
    }
}

fn write_head(out: &mut Vec<u8>, major: u8, arg: u64) {
    let mt = major << 5;
    if arg < 24 {
        out.push(mt | arg as u8);
    } else if arg <= u8::MAX as u64 {
        out.extend_from_slice(&[mt | 24, arg as u8]);
    } else if arg <= u16::MAX as u64 {
        out.push(mt | 25);
        out.extend_from_slice(&(arg as u16).to_be_bytes());
    } else if arg <= u32::MAX as u64 {
        out.push(mt | 26);
        out.extend_from_slice(&(arg as u32).to_be_bytes());
    } else {
        out.push(mt | 27);
        out.extend_from_slice(&arg.to_be_bytes());
    }
}

/// Decodes exactly one data item spanning all of `bytes`.
pub(crate) fn decode_value(bytes: &[u8]) -> Result<Value, CodecError> {
    let mut reader = Reader { buf: bytes, pos: 0 };
    let value = reader.item(0)?;
    if reader.pos != bytes.len() {
        return Err(malformed(format!(
            "{} trailing octets after data item",
            bytes.len() - reader.pos
        )));
    }
    Ok(value)
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::MalformedFrame(msg.into())
}

enum Head {
    Arg(u64),
    Indefinite,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn byte(&mut self) -> Result<u8, CodecError> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| malformed("unexpected end of input"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if n > self.remaining() {
            return Err(malformed("unexpected end of input"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn uint(&mut self, width: usize) -> Result<u64, CodecError> {
        let s = self.take(width)?;
        Ok(s.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64))
    }

    fn head(&mut self, info: u8) -> Result<Head, CodecError> {
        match info {
            0..=23 => Ok(Head::Arg(info as u64)),
            24 => self.uint(1).map(Head::Arg),
            25 => self.uint(2).map(Head::Arg),
            26 => self.uint(4).map(Head::Arg),
            27 => self.uint(8).map(Head::Arg),
            31 => Ok(Head::Indefinite),
            _ => Err(malformed(format!("reserved additional info {info}"))),
        }
    }

    fn len(&mut self, n: u64) -> Result<usize, CodecError> {
        // every element occupies at least one octet
        if n > self.remaining() as u64 {
            return Err(malformed("declared length exceeds frame"));
        }
        Ok(n as usize)
    }

    fn is_break(&self) -> bool {
        self.buf.get(self.pos) == Some(&0xff)
    }

    fn item(&mut self, depth: usize) -> Result<Value, CodecError> {
        if depth > MAX_DEPTH {
            return Err(malformed("nesting too deep"));
        }
        let initial = self.byte()?;
        let major = initial >> 5;
        let info = initial & 0x1f;
        match major {
            0 => match self.head(info)? {
                Head::Arg(n) => i64::try_from(n)
                    .map(Value::Int)
                    .map_err(|_| CodecError::IntegerOverflow),
                Head::Indefinite => Err(malformed("indefinite integer")),
            },
            1 => match self.head(info)? {
                Head::Arg(n) => i64::try_from(n)
                    .map(|n| Value::Int(-1 - n))
                    .map_err(|_| CodecError::IntegerOverflow),
                Head::Indefinite => Err(malformed("indefinite integer")),
            },
            2 => self.string_chunks(2, info).map(Value::Bytes),
            3 => {
                let raw = self.string_chunks(3, info)?;
                String::from_utf8(raw)
                    .map(Value::Text)
                    .map_err(|_| malformed("text string is not valid UTF-8"))
            }
            4 => {
                let mut items = Vec::new();
                match self.head(info)? {
                    Head::Arg(n) => {
                        let n = self.len(n)?;
                        items.reserve(n);
                        for _ in 0..n {
                            items.push(self.item(depth + 1)?);
                        }
                    }
                    Head::Indefinite => {
                        while !self.is_break() {
                            items.push(self.item(depth + 1)?);
                        }
                        self.pos += 1;
                    }
                }
                Ok(Value::List(items))
            }
            5 => {
                let mut map = BTreeMap::new();
                match self.head(info)? {
                    Head::Arg(n) => {
                        let n = self.len(n)?;
                        for _ in 0..n {
                            self.entry(&mut map, depth)?;
                        }
                    }
                    Head::Indefinite => {
                        while !self.is_break() {
                            self.entry(&mut map, depth)?;
                        }
                        self.pos += 1;
                    }
                }
                Ok(Value::Map(map))
            }
            6 => {
                let tag = match self.head(info)? {
                    Head::Arg(t) => t,
                    Head::Indefinite => return Err(malformed("indefinite tag")),
                };
                if tag == 2 || tag == 3 {
                    return Err(CodecError::IntegerOverflow);
                }
                self.item(depth + 1)
            }
            _ => self.simple(info),
        }
    }

    fn entry(&mut self, map: &mut BTreeMap<String, Value>, depth: usize) -> Result<(), CodecError> {
        let key = match self.item(depth + 1)? {
            Value::Text(k) => k,
            other => return Err(malformed(format!("map key must be text, found {}", other.kind()))),
        };
        let value = self.item(depth + 1)?;
        if map.insert(key.clone(), value).is_some() {
            return Err(malformed(format!("duplicate map key {key:?}")));
        }
        Ok(())
    }

    fn string_chunks(&mut self, major: u8, info: u8) -> Result<Vec<u8>, CodecError> {
        match self.head(info)? {
            Head::Arg(n) => {
                let n = self.len(n)?;
                Ok(self.take(n)?.to_vec())
            }
            Head::Indefinite => {
                let mut out = Vec::new();
                loop {
                    let b = self.byte()?;
                    if b == 0xff {
                        return Ok(out);
                    }
                    if b >> 5 != major {
                        return Err(malformed("mismatched chunk in indefinite string"));
                    }
                    match self.head(b & 0x1f)? {
                        Head::Arg(n) => {
                            let n = self.len(n)?;
                            out.extend_from_slice(self.take(n)?);
                        }
                        Head::Indefinite => return Err(malformed("nested indefinite string")),
                    }
                }
            }
        }
    }

    fn simple(&mut self, info: u8) -> Result<Value, CodecError> {
        match info {
            20 => Ok(Value::Bool(false)),
            21 => Ok(Value::Bool(true)),
            22 | 23 => Ok(Value::Null),
            25 => Ok(Value::Float(f16_to_f64(self.uint(2)? as u16))),
            26 => Ok(Value::Float(f32::from_bits(self.uint(4)? as u32) as f64)),
            27 => Ok(Value::Float(f64::from_bits(self.uint(8)?))),
            31 => Err(malformed("unexpected break")),
            _ => Err(malformed(format!("unsupported simple value {info}"))),
        }
    }
}

fn f16_to_f64(h: u16) -> f64 {
    let sign = if h & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = (h >> 10) & 0x1f;
    let frac = (h & 0x3ff) as f64;
    let mag = match exp {
        0 => frac * 2f64.powi(-24),
        31 if frac == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        e => (1.0 + frac / 1024.0) * 2f64.powi(e as i32 - 15),
    };
    sign * mag
}
