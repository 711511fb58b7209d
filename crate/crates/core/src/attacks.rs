//! Client-side conversation scripts: a benign baseline plus the three
//! attack realizations (CRLF stuffing, unknown method, HELO method).
//!
//! Scripts are deterministic byte-for-byte. The harness treats the last
//! request of a script as the marker whose visibility decides the outcome;
//! method attacks append a keep-alive follow-up `GET /secret` for that role.

use crate::stream::Direction;
use crate::trace::TraceRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Request target of the keep-alive follow-up request.
pub const FOLLOW_UP_URI: &str = "/secret";

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("request target required (got empty path)")]
    EmptyPath,
    #[error("method override {0:?} is not a valid token")]
    InvalidMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Baseline,
    CrlfStuffing,
    UnknownMethod,
    HeloMethod,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Baseline => "baseline",
            AttackKind::CrlfStuffing => "crlf",
            AttackKind::UnknownMethod => "unknown",
            AttackKind::HeloMethod => "helo",
        }
    }
}

/// Stuffing unit for deferred-start prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixUnit {
    Crlf,
    Cr,
    Lf,
    Sp,
    Tab,
    Custom(Vec<u8>),
}

impl PrefixUnit {
    pub fn bytes(&self) -> &[u8] {
        match self {
            PrefixUnit::Crlf => b"\r\n",
            PrefixUnit::Cr => b"\r",
            PrefixUnit::Lf => b"\n",
            PrefixUnit::Sp => b" ",
            PrefixUnit::Tab => b"\t",
            PrefixUnit::Custom(bytes) => bytes,
        }
    }

    pub fn parse(name: &str) -> Option<PrefixUnit> {
        match name {
            "crlf" => Some(PrefixUnit::Crlf),
            "cr" => Some(PrefixUnit::Cr),
            "lf" => Some(PrefixUnit::Lf),
            "sp" => Some(PrefixUnit::Sp),
            "tab" => Some(PrefixUnit::Tab),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackStep {
    /// Deliver the server's response before the next step.
    pub await_response: bool,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackScript {
    pub name: AttackKind,
    pub steps: Vec<AttackStep>,
    pub params: BTreeMap<String, String>,
}

impl AttackScript {
    /// Target of the script's final request — the request whose visibility
    /// the harness checks.
    pub fn marker_uri(&self) -> &str {
        self.params
            .get("marker_uri")
            .map(|s| s.as_str())
            .unwrap_or("/")
    }

    /// Client-direction trace records for this script.
    pub fn to_trace(&self) -> Vec<TraceRecord> {
        let mut records: Vec<TraceRecord> = self
            .steps
            .iter()
            .map(|step| TraceRecord::Data {
                direction: Direction::Originator,
                payload: step.payload.clone(),
            })
            .collect();
        records.push(TraceRecord::Close {
            direction: Direction::Originator,
        });
        records
    }
}

fn is_tchar(b: u8) -> bool {
    matches!(b,
        b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' |
        b'^' | b'_' | b'`' | b'|' | b'~' | b'0'..=b'9' | b'A'..=b'Z' | b'a'..=b'z')
}

fn request_bytes(method: &str, path: &str, keep_alive: bool) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(method.as_bytes());
    bytes.push(b' ');
    bytes.extend_from_slice(path.as_bytes());
    bytes.extend_from_slice(b" HTTP/1.1\r\nHost: target\r\n");
    if keep_alive {
        bytes.extend_from_slice(b"Connection: keep-alive\r\n");
    }
    bytes.extend_from_slice(b"\r\n");
    bytes
}

fn follow_up_step() -> AttackStep {
    AttackStep {
        await_response: true,
        payload: request_bytes("GET", FOLLOW_UP_URI, true),
    }
}

fn check_path(path: &str) -> Result<(), AttackError> {
    if path.is_empty() {
        Err(AttackError::EmptyPath)
    } else {
        Ok(())
    }
}

/// One well-formed `GET <path>` request; the control case.
pub fn gen_baseline(path: &str) -> Result<AttackScript, AttackError> {
    check_path(path)?;
    let mut params = BTreeMap::new();
    params.insert("path".to_string(), path.to_string());
    params.insert("marker_uri".to_string(), path.to_string());
    Ok(AttackScript {
        name: AttackKind::Baseline,
        steps: vec![AttackStep {
            await_response: true,
            payload: request_bytes("GET", path, false),
        }],
        params,
    })
}

/// Deferred start: `repetitions` copies of the prefix unit, then a valid
/// `GET <path>` request in the same step.
pub fn gen_crlf_stuffing(
    repetitions: usize,
    unit: &PrefixUnit,
    path: &str,
) -> Result<AttackScript, AttackError> {
    check_path(path)?;
    let unit_bytes = unit.bytes();
    let mut payload = Vec::with_capacity(unit_bytes.len() * repetitions + 64);
    for _ in 0..repetitions {
        payload.extend_from_slice(unit_bytes);
    }
    payload.extend_from_slice(&request_bytes("GET", path, false));
    let mut params = BTreeMap::new();
    params.insert("path".to_string(), path.to_string());
    params.insert("marker_uri".to_string(), path.to_string());
    params.insert("repetitions".to_string(), repetitions.to_string());
    params.insert(
        "prefix_unit".to_string(),
        String::from_utf8_lossy(unit_bytes).escape_default().to_string(),
    );
    Ok(AttackScript {
        name: AttackKind::CrlfStuffing,
        steps: vec![AttackStep {
            await_response: true,
            payload,
        }],
        params,
    })
}

/// Misleading start with an arbitrary unknown token as method, keep-alive,
/// and optionally the valid follow-up request on the same connection.
pub fn gen_unknown_method(
    follow_up: bool,
    path: &str,
    method_override: Option<&str>,
) -> Result<AttackScript, AttackError> {
    gen_misleading(
        AttackKind::UnknownMethod,
        method_override.unwrap_or("UNKNOWNMETHOD"),
        follow_up,
        path,
    )
}

/// Misleading start whose method doubles as another protocol's first
/// command.
pub fn gen_helo_method(follow_up: bool, path: &str) -> Result<AttackScript, AttackError> {
    gen_misleading(AttackKind::HeloMethod, "HELO", follow_up, path)
}

fn gen_misleading(
    kind: AttackKind,
    method: &str,
    follow_up: bool,
    path: &str,
) -> Result<AttackScript, AttackError> {
    check_path(path)?;
    if method.is_empty() || !method.bytes().all(is_tchar) {
        return Err(AttackError::InvalidMethod(method.to_string()));
    }
    let mut steps = vec![AttackStep {
        await_response: true,
        payload: request_bytes(method, path, true),
    }];
    if follow_up {
        steps.push(follow_up_step());
    }
    let mut params = BTreeMap::new();
    params.insert("method".to_string(), method.to_string());
    params.insert("path".to_string(), path.to_string());
    params.insert("follow_up".to_string(), follow_up.to_string());
    params.insert(
        "marker_uri".to_string(),
        if follow_up {
            FOLLOW_UP_URI.to_string()
        } else {
            path.to_string()
        },
    );
    Ok(AttackScript {
        name: kind,
        steps,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signature::{CompiledSpell, MatchStatus, DEFAULT_SKIP_SET};
    use crate::stream::Direction;

    #[test]
    fn baseline_is_one_well_formed_request() {
        let script = gen_baseline("/").unwrap();
        assert_eq!(script.steps.len(), 1);
        assert_eq!(
            script.steps[0].payload,
            b"GET / HTTP/1.1\r\nHost: target\r\n\r\n"
        );
        assert_eq!(gen_baseline("/a").unwrap().marker_uri(), "/a");
        assert!(matches!(gen_baseline(""), Err(AttackError::EmptyPath)));
    }

    #[test]
    fn stuffing_prefix_is_exactly_unit_times_repetitions() {
        let script = gen_crlf_stuffing(512, &PrefixUnit::Crlf, "/x").unwrap();
        let payload = &script.steps[0].payload;
        let g = payload.iter().position(|&b| b == b'G').unwrap();
        assert_eq!(g, 1024);
        assert!(payload[..g].chunks(2).all(|c| c == b"\r\n"));

        let script = gen_crlf_stuffing(7, &PrefixUnit::Lf, "/x").unwrap();
        let g = script.steps[0].payload.iter().position(|&b| b == b'G').unwrap();
        assert_eq!(g, 7);
    }

    #[test]
    fn zero_repetitions_equals_baseline() {
        let stuffed = gen_crlf_stuffing(0, &PrefixUnit::Crlf, "/").unwrap();
        let baseline = gen_baseline("/").unwrap();
        assert_eq!(stuffed.steps[0].payload, baseline.steps[0].payload);
    }

    #[test]
    fn unknown_method_script_shape() {
        let script = gen_unknown_method(true, "/", None).unwrap();
        assert_eq!(script.steps.len(), 2);
        assert!(script.steps[0]
            .payload
            .starts_with(b"UNKNOWNMETHOD / HTTP/1.1\r\n"));
        assert!(script.steps[0]
            .payload
            .windows(b"Connection: keep-alive".len())
            .any(|w| w == b"Connection: keep-alive"));
        assert!(script.steps[1].payload.starts_with(b"GET /secret HTTP/1.1"));
        assert_eq!(script.marker_uri(), "/secret");

        let single = gen_unknown_method(false, "/", None).unwrap();
        assert_eq!(single.steps.len(), 1);
        assert_eq!(single.marker_uri(), "/");

        let custom = gen_unknown_method(true, "/", Some("FOO")).unwrap();
        assert!(custom.steps[0].payload.starts_with(b"FOO / HTTP/1.1"));
        assert!(gen_unknown_method(true, "/", Some("BAD METHOD")).is_err());
    }

    #[test]
    fn helo_script_starts_like_an_smtp_session() {
        let script = gen_helo_method(true, "/").unwrap();
        assert!(script.steps[0].payload.starts_with(b"HELO / HTTP/1.1\r\n"));
        assert!(script.steps[1].payload.starts_with(b"GET /secret HTTP/1.1"));

        // The generated first bytes really do satisfy the smtp spell.
        let spell = crate::signature::default_spells()
            .into_iter()
            .find(|s| s.service == "smtp")
            .map(|s| CompiledSpell::compile(s).unwrap())
            .unwrap();
        let mut side = spell.side_state(Direction::Originator, DEFAULT_SKIP_SET);
        assert_eq!(side.feed(&script.steps[0].payload), MatchStatus::Matched);
    }

    #[test]
    fn nginx_scale_prefix_generation() {
        let script = gen_crlf_stuffing(10_000_000, &PrefixUnit::Lf, "/").unwrap();
        let payload = &script.steps[0].payload;
        assert_eq!(payload.iter().position(|&b| b == b'G'), Some(10_000_000));
    }

    #[test]
    fn generated_requests_parse_under_the_http_grammar() {
        use crate::analyzers::{Analyzer, EventKind, HttpAnalyzer};
        let scripts = [
            gen_baseline("/").unwrap(),
            gen_unknown_method(true, "/", None).unwrap(),
            gen_unknown_method(true, "/", Some("FOO")).unwrap(),
            gen_helo_method(true, "/").unwrap(),
        ];
        for script in scripts {
            let mut analyzer = HttpAnalyzer::new(None);
            let mut events = Vec::new();
            for step in &script.steps {
                analyzer.on_data(Direction::Originator, &step.payload, &mut events);
            }
            assert!(
                events.iter().all(|e| e.kind == EventKind::HttpRequest),
                "{:?}: non-request events {events:?}",
                script.name
            );
            assert_eq!(events.len(), script.steps.len(), "{:?}", script.name);
            assert!(!analyzer.violated());
        }
    }

    #[test]
    fn scripts_are_deterministic() {
        let a = gen_crlf_stuffing(100, &PrefixUnit::Crlf, "/secret").unwrap();
        let b = gen_crlf_stuffing(100, &PrefixUnit::Crlf, "/secret").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_export_covers_client_steps_and_close() {
        let script = gen_unknown_method(true, "/", None).unwrap();
        let trace = script.to_trace();
        assert_eq!(trace.len(), 3);
        assert!(matches!(
            trace.last(),
            Some(TraceRecord::Close {
                direction: Direction::Originator
            })
        ));
    }
}
