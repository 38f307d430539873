//! Envelope protocol and its two encodings.
//!
//! Every envelope is a single top-level map carrying an `"op"` key. Under
//! CBOR it travels as one binary websocket frame, under JSON as one text
//! frame, so the receiver always knows how to decode a frame from its kind.

mod cbor;
mod json;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Value, ValueKind};

pub use json::BYTES_MARKER;

/// Default upper bound on a single frame, large enough for point clouds.
pub const DEFAULT_MAX_FRAME_SIZE: usize = 16 * 1024 * 1024;

/// Protocol version carried in `hello`.
pub const PROTOCOL_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {field:?} must be {expected}, found {found}")]
    TypeMismatch {
        field: &'static str,
        expected: ValueKind,
        found: ValueKind,
    },
    #[error("field {field:?} is invalid: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("integer outside the signed 64-bit range")]
    IntegerOverflow,
    #[error("unencodable value: {0}")]
    UnencodableValue(String),
    #[error("frame of {size} octets exceeds the {max} octet limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("no common encoding")]
    NoCommonEncoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Cbor,
    Json,
}

impl Encoding {
    pub fn as_str(self) -> &'static str {
        match self {
            Encoding::Cbor => "cbor",
            Encoding::Json => "json",
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cbor" => Ok(Encoding::Cbor),
            "json" => Ok(Encoding::Json),
            other => Err(format!("unknown encoding {other:?}")),
        }
    }
}

/// Picks CBOR when both sides speak it, JSON otherwise.
pub fn negotiate(client: &[Encoding], server: &[Encoding]) -> Result<Encoding, CodecError> {
    [Encoding::Cbor, Encoding::Json]
        .into_iter()
        .find(|e| client.contains(e) && server.contains(e))
        .ok_or(CodecError::NoCommonEncoding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusLevel {
    Info,
    Warning,
    Error,
}

impl StatusLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            StatusLevel::Info => "info",
            StatusLevel::Warning => "warning",
            StatusLevel::Error => "error",
        }
    }
}

impl FromStr for StatusLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "info" => Ok(StatusLevel::Info),
            "warning" => Ok(StatusLevel::Warning),
            "error" => Ok(StatusLevel::Error),
            other => Err(format!("unknown status level {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Hello,
    HelloAck,
    Advertise,
    Unadvertise,
    Publish,
    Subscribe,
    Unsubscribe,
    AdvertiseService,
    UnadvertiseService,
    CallService,
    ServiceResponse,
    Status,
    Ping,
    Pong,
}

impl Op {
    pub const ALL: [Op; 14] = [
        Op::Hello,
        Op::HelloAck,
        Op::Advertise,
        Op::Unadvertise,
        Op::Publish,
        Op::Subscribe,
        Op::Unsubscribe,
        Op::AdvertiseService,
        Op::UnadvertiseService,
        Op::CallService,
        Op::ServiceResponse,
        Op::Status,
        Op::Ping,
        Op::Pong,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Hello => "hello",
            Op::HelloAck => "hello_ack",
            Op::Advertise => "advertise",
            Op::Unadvertise => "unadvertise",
            Op::Publish => "publish",
            Op::Subscribe => "subscribe",
            Op::Unsubscribe => "unsubscribe",
            Op::AdvertiseService => "advertise_service",
            Op::UnadvertiseService => "unadvertise_service",
            Op::CallService => "call_service",
            Op::ServiceResponse => "service_response",
            Op::Status => "status",
            Op::Ping => "ping",
            Op::Pong => "pong",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        Op::ALL.into_iter().find(|op| op.as_str() == s)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Envelope {
    Hello {
        session_id: String,
        resume: bool,
        version: i64,
        /// Encodings the client can speak. Absent means only the encoding
        /// of the frame that carried the hello.
        encodings: Option<Vec<Encoding>>,
    },
    HelloAck {
        session_id: String,
        resumed: bool,
        encoding: Encoding,
    },
    Advertise {
        topic: String,
        type_name: String,
    },
    Unadvertise {
        topic: String,
    },
    Publish {
        topic: String,
        msg: Value,
        seq: i64,
    },
    Subscribe {
        topic: String,
        type_name: String,
        throttle_rate: i64,
        queue_length: i64,
        compression: Encoding,
    },
    Unsubscribe {
        topic: String,
    },
    AdvertiseService {
        service: String,
        type_name: String,
    },
    UnadvertiseService {
        service: String,
    },
    CallService {
        service: String,
        args: Value,
        id: String,
    },
    ServiceResponse {
        id: String,
        values: Value,
        result: bool,
    },
    Status {
        level: StatusLevel,
        msg: String,
        ref_id: Option<String>,
    },
    Ping {
        nonce: i64,
    },
    Pong {
        nonce: i64,
    },
}

impl Envelope {
    pub fn op(&self) -> Op {
        match self {
            Envelope::Hello { .. } => Op::Hello,
            Envelope::HelloAck { .. } => Op::HelloAck,
            Envelope::Advertise { .. } => Op::Advertise,
            Envelope::Unadvertise { .. } => Op::Unadvertise,
            Envelope::Publish { .. } => Op::Publish,
            Envelope::Subscribe { .. } => Op::Subscribe,
            Envelope::Unsubscribe { .. } => Op::Unsubscribe,
            Envelope::AdvertiseService { .. } => Op::AdvertiseService,
            Envelope::UnadvertiseService { .. } => Op::UnadvertiseService,
            Envelope::CallService { .. } => Op::CallService,
            Envelope::ServiceResponse { .. } => Op::ServiceResponse,
            Envelope::Status { .. } => Op::Status,
            Envelope::Ping { .. } => Op::Ping,
            Envelope::Pong { .. } => Op::Pong,
        }
    }

    pub fn status(level: StatusLevel, msg: impl Into<String>, ref_id: Option<String>) -> Self {
        Envelope::Status {
            level,
            msg: msg.into(),
            ref_id,
        }
    }

    /// The topic or service name this envelope concerns, if any.
    pub fn subject(&self) -> Option<&str> {
        match self {
            Envelope::Advertise { topic, .. }
            | Envelope::Unadvertise { topic }
            | Envelope::Publish { topic, .. }
            | Envelope::Subscribe { topic, .. }
            | Envelope::Unsubscribe { topic } => Some(topic),
            Envelope::AdvertiseService { service, .. }
            | Envelope::UnadvertiseService { service }
            | Envelope::CallService { service, .. } => Some(service),
            _ => None,
        }
    }

    /// Lowers the envelope to its top-level map.
    pub fn to_value(&self) -> Value {
        let mut m = BTreeMap::new();
        m.insert("op".to_owned(), Value::Text(self.op().as_str().to_owned()));
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_owned(), v);
        };
        match self {
            Envelope::Hello {
                session_id,
                resume,
                version,
                encodings,
            } => {
                put("session_id", session_id.as_str().into());
                put("resume", Value::Bool(*resume));
                put("version", Value::Int(*version));
                if let Some(encs) = encodings {
                    put(
                        "encodings",
                        Value::List(encs.iter().map(|e| e.as_str().into()).collect()),
                    );
                }
            }
            Envelope::HelloAck {
                session_id,
                resumed,
                encoding,
            } => {
                put("session_id", session_id.as_str().into());
                put("resumed", Value::Bool(*resumed));
                put("encoding", encoding.as_str().into());
            }
            Envelope::Advertise { topic, type_name } => {
                put("topic", topic.as_str().into());
                put("type", type_name.as_str().into());
            }
            Envelope::Unadvertise { topic } | Envelope::Unsubscribe { topic } => {
                put("topic", topic.as_str().into());
            }
            Envelope::Publish { topic, msg, seq } => {
                put("topic", topic.as_str().into());
                put("msg", msg.clone());
                put("seq", Value::Int(*seq));
            }
            Envelope::Subscribe {
                topic,
                type_name,
                throttle_rate,
                queue_length,
                compression,
            } => {
                put("topic", topic.as_str().into());
                put("type", type_name.as_str().into());
                put("throttle_rate", Value::Int(*throttle_rate));
                put("queue_length", Value::Int(*queue_length));
                put("compression", compression.as_str().into());
            }
            Envelope::AdvertiseService { service, type_name } => {
                put("service", service.as_str().into());
                put("type", type_name.as_str().into());
            }
            Envelope::UnadvertiseService { service } => {
                put("service", service.as_str().into());
            }
            Envelope::CallService { service, args, id } => {
                put("service", service.as_str().into());
                put("args", args.clone());
                put("id", id.as_str().into());
            }
            Envelope::ServiceResponse { id, values, result } => {
                put("id", id.as_str().into());
                put("values", values.clone());
                put("result", Value::Bool(*result));
            }
            Envelope::Status { level, msg, ref_id } => {
                put("level", level.as_str().into());
                put("msg", msg.as_str().into());
                if let Some(r) = ref_id {
                    put("ref_id", r.as_str().into());
                }
            }
            // nonce 0 is the default and is left out
            Envelope::Ping { nonce } | Envelope::Pong { nonce } => {
                if *nonce != 0 {
                    put("nonce", Value::Int(*nonce));
                }
            }
        }
        Value::Map(m)
    }

    /// Lifts a decoded top-level value into an envelope. Extra keys are ignored.
    pub fn from_value(value: Value) -> Result<Envelope, CodecError> {
        let Value::Map(mut m) = value else {
            return Err(CodecError::MalformedFrame(format!(
                "top-level item is {}, expected map",
                value.kind()
            )));
        };
        let op_name = text(&mut m, "op")?;
        let op = Op::parse(&op_name).ok_or(CodecError::UnknownOp(op_name))?;
        let f = &mut m;
        Ok(match op {
            Op::Hello => Envelope::Hello {
                session_id: text(f, "session_id")?,
                resume: boolean(f, "resume")?,
                version: int(f, "version")?,
                encodings: match f.remove("encodings") {
                    None => None,
                    Some(Value::List(items)) => Some(
                        items
                            .into_iter()
                            .map(|v| match v {
                                Value::Text(s) => parse_field("encodings", &s),
                                other => Err(mismatch("encodings", ValueKind::Text, &other)),
                            })
                            .collect::<Result<_, _>>()?,
                    ),
                    Some(other) => return Err(mismatch("encodings", ValueKind::List, &other)),
                },
            },
            Op::HelloAck => Envelope::HelloAck {
                session_id: text(f, "session_id")?,
                resumed: boolean(f, "resumed")?,
                encoding: parse_field("encoding", &text(f, "encoding")?)?,
            },
            Op::Advertise => Envelope::Advertise {
                topic: text(f, "topic")?,
                type_name: text(f, "type")?,
            },
            Op::Unadvertise => Envelope::Unadvertise {
                topic: text(f, "topic")?,
            },
            Op::Publish => Envelope::Publish {
                topic: text(f, "topic")?,
                msg: any(f, "msg")?,
                seq: int(f, "seq")?,
            },
            Op::Subscribe => {
                let topic = text(f, "topic")?;
                let type_name = text(f, "type")?;
                let throttle_rate = int(f, "throttle_rate")?;
                if throttle_rate < 0 {
                    return Err(CodecError::InvalidField {
                        field: "throttle_rate",
                        reason: "must be >= 0".into(),
                    });
                }
                let queue_length = int(f, "queue_length")?;
                if queue_length < 1 {
                    return Err(CodecError::InvalidField {
                        field: "queue_length",
                        reason: "must be >= 1".into(),
                    });
                }
                Envelope::Subscribe {
                    topic,
                    type_name,
                    throttle_rate,
                    queue_length,
                    compression: parse_field("compression", &text(f, "compression")?)?,
                }
            }
            Op::Unsubscribe => Envelope::Unsubscribe {
                topic: text(f, "topic")?,
            },
            Op::AdvertiseService => Envelope::AdvertiseService {
                service: text(f, "service")?,
                type_name: text(f, "type")?,
            },
            Op::UnadvertiseService => Envelope::UnadvertiseService {
                service: text(f, "service")?,
            },
            Op::CallService => Envelope::CallService {
                service: text(f, "service")?,
                args: any(f, "args")?,
                id: text(f, "id")?,
            },
            Op::ServiceResponse => Envelope::ServiceResponse {
                id: text(f, "id")?,
                values: any(f, "values")?,
                result: boolean(f, "result")?,
            },
            Op::Status => Envelope::Status {
                level: parse_field("level", &text(f, "level")?)?,
                msg: text(f, "msg")?,
                ref_id: match f.remove("ref_id") {
                    None => None,
                    Some(Value::Text(s)) => Some(s),
                    Some(other) => return Err(mismatch("ref_id", ValueKind::Text, &other)),
                },
            },
            Op::Ping => Envelope::Ping {
                nonce: optional_int(f, "nonce")?,
            },
            Op::Pong => Envelope::Pong {
                nonce: optional_int(f, "nonce")?,
            },
        })
    }
}

fn mismatch(field: &'static str, expected: ValueKind, found: &Value) -> CodecError {
    CodecError::TypeMismatch {
        field,
        expected,
        found: found.kind(),
    }
}

fn any(m: &mut BTreeMap<String, Value>, field: &'static str) -> Result<Value, CodecError> {
    m.remove(field).ok_or(CodecError::MissingField(field))
}

fn text(m: &mut BTreeMap<String, Value>, field: &'static str) -> Result<String, CodecError> {
    match any(m, field)? {
        Value::Text(s) => Ok(s),
        other => Err(mismatch(field, ValueKind::Text, &other)),
    }
}

fn int(m: &mut BTreeMap<String, Value>, field: &'static str) -> Result<i64, CodecError> {
    match any(m, field)? {
        Value::Int(i) => Ok(i),
        other => Err(mismatch(field, ValueKind::Int, &other)),
    }
}

fn optional_int(m: &mut BTreeMap<String, Value>, field: &'static str) -> Result<i64, CodecError> {
    match m.remove(field) {
        None => Ok(0),
        Some(Value::Int(i)) => Ok(i),
        Some(other) => Err(mismatch(field, ValueKind::Int, &other)),
    }
}

fn boolean(m: &mut BTreeMap<String, Value>, field: &'static str) -> Result<bool, CodecError> {
    match any(m, field)? {
        Value::Bool(b) => Ok(b),
        other => Err(mismatch(field, ValueKind::Bool, &other)),
    }
}

fn parse_field<T: FromStr<Err = String>>(field: &'static str, s: &str) -> Result<T, CodecError> {
    s.parse()
        .map_err(|reason| CodecError::InvalidField { field, reason })
}

/// A websocket data frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Binary(Vec<u8>),
    Text(String),
}

impl Frame {
    pub fn encoding(&self) -> Encoding {
        match self {
            Frame::Binary(_) => Encoding::Cbor,
            Frame::Text(_) => Encoding::Json,
        }
    }

    pub fn len(&self) -> usize {
        self.as_bytes().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        match self {
            Frame::Binary(b) => b,
            Frame::Text(s) => s.as_bytes(),
        }
    }
}

/// Envelope codec with a frame size limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Codec {
    pub max_frame_size: usize,
}

impl Default for Codec {
    fn default() -> Self {
        Codec {
            max_frame_size: DEFAULT_MAX_FRAME_SIZE,
        }
    }
}

impl Codec {
    pub fn new(max_frame_size: usize) -> Self {
        Codec { max_frame_size }
    }

    pub fn encode(&self, envelope: &Envelope, encoding: Encoding) -> Result<Vec<u8>, CodecError> {
        let value = envelope.to_value();
        let bytes = match encoding {
            Encoding::Cbor => {
                let mut out = Vec::new();
                cbor::encode_value(&value, &mut out);
                out
            }
            Encoding::Json => json::encode_value(&value)?.into_bytes(),
        };
        if bytes.len() > self.max_frame_size {
            return Err(CodecError::FrameTooLarge {
                size: bytes.len(),
                max: self.max_frame_size,
            });
        }
        Ok(bytes)
    }

    pub fn decode(&self, bytes: &[u8], encoding: Encoding) -> Result<Envelope, CodecError> {
        if bytes.len() > self.max_frame_size {
            return Err(CodecError::FrameTooLarge {
                size: bytes.len(),
                max: self.max_frame_size,
            });
        }
        if bytes.is_empty() {
            return Err(CodecError::MalformedFrame("empty frame".into()));
        }
        let value = match encoding {
            Encoding::Cbor => cbor::decode_value(bytes)?,
            Encoding::Json => json::decode_value(bytes)?,
        };
        Envelope::from_value(value)
    }

    pub fn encode_frame(&self, envelope: &Envelope, encoding: Encoding) -> Result<Frame, CodecError> {
        let bytes = self.encode(envelope, encoding)?;
        Ok(match encoding {
            Encoding::Cbor => Frame::Binary(bytes),
            // serde_json only ever emits UTF-8
            Encoding::Json => Frame::Text(String::from_utf8(bytes).expect("json output is utf-8")),
        })
    }

    pub fn decode_frame(&self, frame: &Frame) -> Result<Envelope, CodecError> {
        self.decode(frame.as_bytes(), frame.encoding())
    }
}

/// Encodes with the default frame limit.
pub fn encode(envelope: &Envelope, encoding: Encoding) -> Result<Vec<u8>, CodecError> {
    Codec::default().encode(envelope, encoding)
}

/// Decodes with the default frame limit. Total over arbitrary input.
pub fn decode(bytes: &[u8], encoding: Encoding) -> Result<Envelope, CodecError> {
    Codec::default().decode(bytes, encoding)
}

/// Encodes a bare value (no envelope) as CBOR.
pub fn value_to_cbor(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    cbor::encode_value(value, &mut out);
    out
}

pub fn value_from_cbor(bytes: &[u8]) -> Result<Value, CodecError> {
    cbor::decode_value(bytes)
}

pub fn value_to_json(value: &Value) -> Result<String, CodecError> {
    json::encode_value(value)
}

pub fn value_from_json(bytes: &[u8]) -> Result<Value, CodecError> {
    json::decode_value(bytes)
}
