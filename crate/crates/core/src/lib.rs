//! Desk-scale laboratory for dynamic protocol detection.
//!
//! The crate models a monitored TCP connection as two directional byte
//! streams and runs them through interchangeable protocol-detection engines:
//! a fixed-buffer analyzer tree, a spell-matching wizard with an irreversible
//! classification, and a sliding-window ring engine with a decoupled
//! detection timeout. Attack generators produce deferred-start and
//! misleading-start conversations, table-driven server simulations supply the
//! responder side, and the harness classifies every engine/attack/port cell
//! into a vulnerability matrix.

pub mod analyzers;
pub mod attacks;
pub mod engines;
pub mod harness;
pub mod server;
pub mod signature;
pub mod stream;
pub mod trace;

pub use harness::{run_cell, run_matrix, Lab, LabConfig};
