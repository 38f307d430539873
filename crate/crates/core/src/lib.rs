//! Pub/sub and service tunneling over a single outbound websocket.
//!
//! An edge process runs a [`duct::Duct`] next to its [`bus::LocalBus`]; a
//! cloud process runs a [`bridge::Bridge`]. The duct dials out, and the
//! selected topics and services flow both ways over that one connection.
//! Both state machines are I/O-free: [`runtime`] drives them over real
//! websockets and [`netsim`] drives them over a simulated link.

pub mod bridge;
pub mod activation;
pub mod bus;
pub mod cli;
pub mod clock;
pub mod duct;
pub mod flow;
pub mod netsim;
pub mod runtime;
pub mod transport;
pub mod value;
pub mod wire;

pub use bridge::{Bridge, BridgeConfig, BridgeError};
pub use bus::{BusError, BusMessage, CallError, LocalBus};
pub use clock::{Clock, ManualClock, SystemClock};
pub use duct::{Duct, DuctConfig, DuctError, RelaySpec};
pub use flow::{ThrottleSpec, ThrottleState};
pub use value::Value;
pub use wire::{Codec, CodecError, Encoding, Envelope, Frame};
