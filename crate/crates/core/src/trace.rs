//! Line-delimited conversation traces for record and replay.
//!
//! Each line is one JSON record: `{"dir":"orig","data_b64":"..."}` for a
//! payload or `{"event":"close","dir":"resp"}` for end-of-stream. Payload
//! bytes round-trip bit-exactly through base64.

use crate::stream::Direction;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trace line {line}: invalid base64 payload")]
    Base64 { line: usize },
    #[error("trace line {line}: unknown event {event:?}")]
    UnknownEvent { line: usize, event: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceRecord {
    Data {
        direction: Direction,
        payload: Vec<u8>,
    },
    Close {
        direction: Direction,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLine {
    Close { event: String, dir: Direction },
    Data { dir: Direction, data_b64: String },
}

/// Serializes records to the line-delimited trace format.
pub fn write_trace(records: &[TraceRecord]) -> String {
    let mut out = String::new();
    for record in records {
        let raw = match record {
            TraceRecord::Data { direction, payload } => RawLine::Data {
                dir: *direction,
                data_b64: B64.encode(payload),
            },
            TraceRecord::Close { direction } => RawLine::Close {
                event: "close".to_string(),
                dir: *direction,
            },
        };
        out.push_str(&serde_json::to_string(&raw).expect("trace record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a trace document. Blank lines are ignored.
pub fn parse_trace(input: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine =
            serde_json::from_str(line).map_err(|source| TraceError::Json { line: line_no, source })?;
        records.push(match raw {
            RawLine::Close { event, dir } => {
                if event != "close" {
                    return Err(TraceError::UnknownEvent {
                        line: line_no,
                        event,
                    });
                }
                TraceRecord::Close { direction: dir }
            }
            RawLine::Data { dir, data_b64 } => TraceRecord::Data {
                direction: dir,
                payload: B64
                    .decode(data_b64.as_bytes())
                    .map_err(|_| TraceError::Base64 { line: line_no })?,
            },
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn close_records_round_trip() {
        let records = vec![
            TraceRecord::Data {
                direction: Direction::Originator,
                payload: b"GET / HTTP/1.1\r\n".to_vec(),
            },
            TraceRecord::Close {
                direction: Direction::Originator,
            },
            TraceRecord::Close {
                direction: Direction::Responder,
            },
        ];
        let text = write_trace(&records);
        assert!(text.contains(r#""event":"close""#));
        assert_eq!(parse_trace(&text).unwrap(), records);
    }

    #[test]
    fn unknown_event_is_rejected() {
        let err = parse_trace(r#"{"event":"reset","dir":"orig"}"#).unwrap_err();
        assert!(matches!(err, TraceError::UnknownEvent { line: 1, .. }));
    }

    #[test]
    fn garbage_line_is_rejected() {
        assert!(parse_trace("not json\n").is_err());
    }

    proptest! {
        /// Arbitrary (including non-UTF8) payloads survive a round trip
        /// bit-exactly.
        #[test]
        fn payload_round_trip(payloads in proptest::collection::vec(
            proptest::collection::vec(any::<u8>(), 1..128), 0..8)) {
            let records: Vec<TraceRecord> = payloads
                .iter()
                .enumerate()
                .map(|(i, p)| TraceRecord::Data {
                    direction: if i % 2 == 0 { Direction::Originator } else { Direction::Responder },
                    payload: p.clone(),
                })
                .collect();
            let text = write_trace(&records);
            prop_assert_eq!(parse_trace(&text).unwrap(), records);
        }
    }
}
