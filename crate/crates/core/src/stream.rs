//! Directional byte streams of a monitored TCP connection.
//!
//! A connection carries two independent, in-order streams (originator and
//! responder). Consumers see bytes segmentation-independently: any chunking
//! of the same stream yields the same delivered byte sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("port {0} out of range (0-65535)")]
    PortOutOfRange(u32),
    #[error("chunk payload must be non-empty")]
    EmptyPayload,
    #[error("delivery on closed {0} direction (harness scripting bug)")]
    DeliveryAfterClose(Direction),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
}

/// Which endpoint sent the bytes. The originator is the connection
/// initiator (client).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "orig")]
    Originator,
    #[serde(rename = "resp")]
    Responder,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Originator => Direction::Responder,
            Direction::Responder => Direction::Originator,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Direction::Originator => 0,
            Direction::Responder => 1,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Originator => write!(f, "orig"),
            Direction::Responder => write!(f, "resp"),
        }
    }
}

/// Connection identity. Addresses are opaque tokens; only TCP is modeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Proto,
}

impl FiveTuple {
    pub fn new(
        src_addr: impl Into<String>,
        dst_addr: impl Into<String>,
        src_port: u32,
        dst_port: u32,
    ) -> Result<Self, StreamError> {
        let src_port = u16::try_from(src_port).map_err(|_| StreamError::PortOutOfRange(src_port))?;
        let dst_port = u16::try_from(dst_port).map_err(|_| StreamError::PortOutOfRange(dst_port))?;
        Ok(FiveTuple {
            src_addr: src_addr.into(),
            dst_addr: dst_addr.into(),
            src_port,
            dst_port,
            proto: Proto::Tcp,
        })
    }
}

/// One directional slice of reassembled stream data. Payloads are non-empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub direction: Direction,
    pub payload: Vec<u8>,
}

impl Chunk {
    pub fn new(direction: Direction, payload: Vec<u8>) -> Result<Self, StreamError> {
        if payload.is_empty() {
            return Err(StreamError::EmptyPayload);
        }
        Ok(Chunk { direction, payload })
    }
}

/// Receives stream bytes exactly once, in order, per direction.
pub trait StreamConsumer {
    fn on_data(&mut self, direction: Direction, payload: &[u8]);
    fn on_close(&mut self, _direction: Direction) {}
}

#[derive(Debug, Clone)]
pub struct Connection {
    id: FiveTuple,
    delivered: [u64; 2],
    closed: [bool; 2],
}

impl Connection {
    pub fn new(id: FiveTuple) -> Self {
        Connection {
            id,
            delivered: [0; 2],
            closed: [false; 2],
        }
    }

    pub fn id(&self) -> &FiveTuple {
        &self.id
    }

    /// Bytes delivered so far on the given direction.
    pub fn delivered(&self, direction: Direction) -> u64 {
        self.delivered[direction.index()]
    }

    pub fn is_closed(&self, direction: Direction) -> bool {
        self.closed[direction.index()]
    }

    pub fn fully_closed(&self) -> bool {
        self.closed[0] && self.closed[1]
    }

    /// Hands the chunk to the consumer and advances the delivered count.
    /// Delivery on a closed direction is a scripting bug, not valid traffic.
    pub fn deliver(
        &mut self,
        chunk: &Chunk,
        consumer: &mut dyn StreamConsumer,
    ) -> Result<u64, StreamError> {
        let idx = chunk.direction.index();
        if self.closed[idx] {
            return Err(StreamError::DeliveryAfterClose(chunk.direction));
        }
        consumer.on_data(chunk.direction, &chunk.payload);
        self.delivered[idx] += chunk.payload.len() as u64;
        Ok(self.delivered[idx])
    }

    /// Closes one direction. Idempotent: a second close changes nothing and
    /// does not re-notify the consumer.
    pub fn close(&mut self, direction: Direction, consumer: &mut dyn StreamConsumer) {
        let idx = direction.index();
        if !self.closed[idx] {
            self.closed[idx] = true;
            consumer.on_close(direction);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[derive(Default)]
    struct Collector {
        orig: Vec<u8>,
        resp: Vec<u8>,
        closes: Vec<Direction>,
    }

    impl StreamConsumer for Collector {
        fn on_data(&mut self, direction: Direction, payload: &[u8]) {
            match direction {
                Direction::Originator => self.orig.extend_from_slice(payload),
                Direction::Responder => self.resp.extend_from_slice(payload),
            }
        }
        fn on_close(&mut self, direction: Direction) {
            self.closes.push(direction);
        }
    }

    fn tuple(dst_port: u32) -> FiveTuple {
        FiveTuple::new("client", "server", 40000, dst_port).unwrap()
    }

    #[test]
    fn new_connection_starts_open_with_zero_counts() {
        for port in [80, 4242] {
            let conn = Connection::new(tuple(port));
            assert_eq!(conn.delivered(Direction::Originator), 0);
            assert_eq!(conn.delivered(Direction::Responder), 0);
            assert!(!conn.is_closed(Direction::Originator));
            assert!(!conn.is_closed(Direction::Responder));
        }
    }

    #[test]
    fn out_of_range_port_is_rejected() {
        let err = FiveTuple::new("a", "b", 70000, 80).unwrap_err();
        assert!(matches!(err, StreamError::PortOutOfRange(70000)));
    }

    #[test]
    fn delivery_preserves_order_and_counts() {
        let mut conn = Connection::new(tuple(80));
        let mut sink = Collector::default();
        conn.deliver(
            &Chunk::new(Direction::Originator, b"GET".to_vec()).unwrap(),
            &mut sink,
        )
        .unwrap();
        conn.deliver(
            &Chunk::new(Direction::Originator, b" /".to_vec()).unwrap(),
            &mut sink,
        )
        .unwrap();
        assert_eq!(sink.orig, b"GET /");
        assert_eq!(conn.delivered(Direction::Originator), 5);
        assert_eq!(conn.delivered(Direction::Responder), 0);
    }

    #[test]
    fn empty_payload_is_rejected() {
        assert!(matches!(
            Chunk::new(Direction::Originator, vec![]),
            Err(StreamError::EmptyPayload)
        ));
    }

    #[test]
    fn delivery_after_close_is_a_scripting_error() {
        let mut conn = Connection::new(tuple(80));
        let mut sink = Collector::default();
        conn.close(Direction::Originator, &mut sink);
        assert!(!conn.is_closed(Direction::Responder));
        let err = conn
            .deliver(
                &Chunk::new(Direction::Originator, b"x".to_vec()).unwrap(),
                &mut sink,
            )
            .unwrap_err();
        assert!(matches!(
            err,
            StreamError::DeliveryAfterClose(Direction::Originator)
        ));
        // The responder side is unaffected.
        conn.deliver(
            &Chunk::new(Direction::Responder, b"y".to_vec()).unwrap(),
            &mut sink,
        )
        .unwrap();
    }

    #[test]
    fn double_close_is_idempotent() {
        let mut conn = Connection::new(tuple(80));
        let mut sink = Collector::default();
        conn.close(Direction::Originator, &mut sink);
        conn.close(Direction::Originator, &mut sink);
        conn.close(Direction::Responder, &mut sink);
        assert!(conn.fully_closed());
        assert_eq!(
            sink.closes,
            vec![Direction::Originator, Direction::Responder]
        );
    }

    proptest! {
        /// Any partition of a byte sequence into chunks delivers the same
        /// ordered bytes, and the delivered count equals the sum of chunk
        /// lengths.
        #[test]
        fn segmentation_invariance(data in proptest::collection::vec(any::<u8>(), 1..512),
                                   cuts in proptest::collection::vec(any::<prop::sample::Index>(), 0..16)) {
            let mut bounds: Vec<usize> = cuts.iter().map(|i| i.index(data.len())).collect();
            bounds.push(0);
            bounds.push(data.len());
            bounds.sort_unstable();
            bounds.dedup();

            let mut conn = Connection::new(tuple(80));
            let mut sink = Collector::default();
            let mut total = 0u64;
            for pair in bounds.windows(2) {
                let part = &data[pair[0]..pair[1]];
                if part.is_empty() {
                    continue;
                }
                total = conn
                    .deliver(&Chunk::new(Direction::Originator, part.to_vec()).unwrap(), &mut sink)
                    .unwrap();
            }
            prop_assert_eq!(&sink.orig, &data);
            prop_assert_eq!(total, data.len() as u64);
        }
    }
}
