//! The write side of a connection, shared by the websocket runtime and the
//! network simulator.

use thiserror::Error;

use crate::wire::Frame;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
}

pub trait Transport {
    /// Hands a frame to the connection. Never blocks.
    fn send(&mut self, frame: Frame) -> Result<(), TransportError>;

    /// Octets accepted by [`send`](Self::send) that have not left yet.
    fn backlog(&self) -> usize;

    fn close(&mut self);
}

/// Transport that keeps every frame it is given. Useful for driving the
/// bridge and duct state machines by hand.
#[derive(Debug, Default, Clone)]
pub struct RecordingTransport {
    pub sent: Vec<Frame>,
    pub closed: bool,
    /// Reported backlog, settable to emulate congestion.
    pub backlog: usize,
}

impl RecordingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn take(&mut self) -> Vec<Frame> {
        std::mem::take(&mut self.sent)
    }
}

impl Transport for RecordingTransport {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::Closed);
        }
        self.sent.push(frame);
        Ok(())
    }

    fn backlog(&self) -> usize {
        self.backlog
    }

    fn close(&mut self) {
        self.closed = true;
    }
}
