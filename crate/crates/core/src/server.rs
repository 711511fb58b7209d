//! Table-driven simulated web-server endpoints.
//!
//! Each profile encodes two empirically observed tolerance behaviors: which
//! leading bytes a server silently ignores (and how many), and how it reacts
//! to an unimplemented request method. `probe_prefixes` re-derives those
//! constants from the simulation alone, mirroring the two-byte permutation
//! probe plus a repetition search.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("request on closed connection (harness scripting bug)")]
    ConnectionClosed,
}

/// Which leading bytes a server strips before parsing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrefixRule {
    /// Nothing is ignored.
    None,
    /// Any mix of these bytes, counted individually.
    CharSet { chars: Vec<u8> },
    /// Only whole repetitions of this exact byte sequence.
    Sequence { bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IgnoredPrefix {
    pub rule: PrefixRule,
    /// Maximum tolerated repetitions: stripped bytes for `CharSet`, whole
    /// sequence repetitions for `Sequence`.
    pub max_repetitions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnknownMethodReaction {
    Status { code: u16, keep_open: bool },
    ImmediateClose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerProfile {
    /// Filled from the config map key when loaded from a config file.
    #[serde(default)]
    pub name: String,
    pub ignored_prefix: IgnoredPrefix,
    pub unknown_method: UnknownMethodReaction,
    pub known_methods: BTreeSet<String>,
}

fn methods(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

const COMMON_METHODS: &[&str] = &["GET", "HEAD", "POST", "PUT", "DELETE", "OPTIONS"];

/// The six built-in endpoint profiles.
pub fn builtin_profiles() -> BTreeMap<String, ServerProfile> {
    let mut map = BTreeMap::new();
    let mut add = |profile: ServerProfile| {
        map.insert(profile.name.clone(), profile);
    };
    add(ServerProfile {
        name: "apache".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::Sequence {
                bytes: b"\r\n".to_vec(),
            },
            max_repetitions: 20,
        },
        unknown_method: UnknownMethodReaction::Status {
            code: 501,
            keep_open: false,
        },
        known_methods: methods(COMMON_METHODS),
    });
    add(ServerProfile {
        name: "apache_hardened".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::Sequence {
                bytes: b"\r\n".to_vec(),
            },
            max_repetitions: 20,
        },
        unknown_method: UnknownMethodReaction::Status {
            code: 403,
            keep_open: true,
        },
        known_methods: methods(&["GET", "HEAD", "POST"]),
    });
    add(ServerProfile {
        name: "nginx".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::CharSet {
                chars: vec![b'\r', b'\n'],
            },
            max_repetitions: 1 << 31,
        },
        unknown_method: UnknownMethodReaction::Status {
            code: 405,
            keep_open: true,
        },
        known_methods: methods(COMMON_METHODS),
    });
    add(ServerProfile {
        name: "iis".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::CharSet {
                chars: vec![b'\t', b' ', b'\r', b'\n'],
            },
            max_repetitions: 16_271,
        },
        unknown_method: UnknownMethodReaction::Status {
            code: 405,
            keep_open: true,
        },
        known_methods: methods(COMMON_METHODS),
    });
    add(ServerProfile {
        name: "lighttpd".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::None,
            max_repetitions: 0,
        },
        unknown_method: UnknownMethodReaction::Status {
            code: 501,
            keep_open: false,
        },
        known_methods: methods(COMMON_METHODS),
    });
    add(ServerProfile {
        name: "nodejs".to_string(),
        ignored_prefix: IgnoredPrefix {
            rule: PrefixRule::CharSet {
                chars: vec![b'\r', b'\n'],
            },
            max_repetitions: 81_797,
        },
        unknown_method: UnknownMethodReaction::ImmediateClose,
        known_methods: methods(COMMON_METHODS),
    });
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AccessLogEntry {
    pub method: String,
    pub uri: String,
    /// Status sent; 0 when the connection was closed with no status line.
    pub status: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionAction {
    Open,
    Closed,
}

#[derive(Debug, Clone)]
pub struct ServerReply {
    pub bytes: Vec<u8>,
    pub action: ConnectionAction,
}

#[derive(Debug, Default)]
pub struct ServerRunState {
    pub closed: bool,
    pub requests_handled: u64,
    pub access_log: Vec<AccessLogEntry>,
}

impl ServerRunState {
    pub fn new() -> Self {
        ServerRunState::default()
    }

    pub fn served(&self, uri: &str, status: u16) -> bool {
        self.access_log
            .iter()
            .any(|e| e.uri == uri && e.status == status)
    }
}

/// Outcome of stripping a profile's tolerated prefix.
enum Strip {
    Ok(usize),
    OverLimit,
}

fn strip_prefix(prefix: &IgnoredPrefix, bytes: &[u8]) -> Strip {
    match &prefix.rule {
        PrefixRule::None => Strip::Ok(0),
        PrefixRule::CharSet { chars } => {
            let mut i = 0;
            while i < bytes.len() && chars.contains(&bytes[i]) {
                i += 1;
            }
            if i as u64 > prefix.max_repetitions {
                Strip::OverLimit
            } else {
                Strip::Ok(i)
            }
        }
        PrefixRule::Sequence { bytes: unit } => {
            let mut i = 0;
            let mut reps = 0u64;
            while bytes[i..].starts_with(unit) {
                i += unit.len();
                reps += 1;
            }
            if reps > prefix.max_repetitions {
                Strip::OverLimit
            } else {
                Strip::Ok(i)
            }
        }
    }
}

struct ParsedRequest {
    method: String,
    target: String,
    keep_alive: bool,
}

fn parse_request(bytes: &[u8]) -> Option<ParsedRequest> {
    let line_end = bytes.iter().position(|&b| b == b'\n')?;
    let mut line = &bytes[..line_end];
    if line.last() == Some(&b'\r') {
        line = &line[..line.len() - 1];
    }
    let first_sp = line.iter().position(|&b| b == b' ')?;
    let last_sp = line.iter().rposition(|&b| b == b' ')?;
    if first_sp == last_sp {
        return None;
    }
    let method = &line[..first_sp];
    let target = &line[first_sp + 1..last_sp];
    let version = &line[last_sp + 1..];
    let token_ok = !method.is_empty()
        && method.iter().all(|&b| {
            matches!(b,
                b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' |
                b'^' | b'_' | b'`' | b'|' | b'~' | b'0'..=b'9' | b'A'..=b'Z' | b'a'..=b'z')
        });
    let target_ok = !target.is_empty() && target.iter().all(|&b| (0x21..=0x7e).contains(&b));
    let version_ok = version.len() == 8
        && version.starts_with(b"HTTP/")
        && version[5].is_ascii_digit()
        && version[6] == b'.'
        && version[7].is_ascii_digit();
    if !token_ok || !target_ok || !version_ok {
        return None;
    }

    // Scan headers for an explicit connection preference.
    let mut keep_alive = true; // HTTP/1.1 default
    for raw in bytes[line_end + 1..].split(|&b| b == b'\n') {
        let mut header = raw;
        if header.last() == Some(&b'\r') {
            header = &header[..header.len() - 1];
        }
        if header.is_empty() {
            break;
        }
        if let Some(colon) = header.iter().position(|&b| b == b':') {
            let name = String::from_utf8_lossy(&header[..colon]).to_ascii_lowercase();
            if name.trim() == "connection" {
                let value = String::from_utf8_lossy(&header[colon + 1..]);
                keep_alive = !value.trim().eq_ignore_ascii_case("close");
            }
        }
    }
    Some(ParsedRequest {
        method: String::from_utf8_lossy(method).into_owned(),
        target: String::from_utf8_lossy(target).into_owned(),
        keep_alive,
    })
}

fn reason_phrase(code: u16) -> &'static str {
    match code {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        405 => "Method Not Allowed",
        501 => "Not Implemented",
        _ => "Error",
    }
}

fn response_bytes(code: u16, body: &str, keep_open: bool) -> Vec<u8> {
    format!(
        "HTTP/1.1 {} {}\r\nContent-Length: {}\r\nConnection: {}\r\n\r\n{}",
        code,
        reason_phrase(code),
        body.len(),
        if keep_open { "keep-alive" } else { "close" },
        body
    )
    .into_bytes()
}

/// Handles one request's bytes: strips the tolerated prefix, parses, and
/// reacts per the profile. Every parsed request lands in the access log.
pub fn server_respond(
    profile: &ServerProfile,
    state: &mut ServerRunState,
    request_bytes: &[u8],
) -> Result<ServerReply, ServerError> {
    if state.closed {
        return Err(ServerError::ConnectionClosed);
    }
    state.requests_handled += 1;

    let reply = |state: &mut ServerRunState,
                 method: &str,
                 uri: &str,
                 code: u16,
                 body: &str,
                 keep_open: bool| {
        state.access_log.push(AccessLogEntry {
            method: method.to_string(),
            uri: uri.to_string(),
            status: code,
        });
        if !keep_open {
            state.closed = true;
        }
        ServerReply {
            bytes: response_bytes(code, body, keep_open),
            action: if keep_open {
                ConnectionAction::Open
            } else {
                ConnectionAction::Closed
            },
        }
    };

    let stripped = match strip_prefix(&profile.ignored_prefix, request_bytes) {
        Strip::Ok(n) => n,
        Strip::OverLimit => {
            return Ok(reply(state, "-", "-", 400, "", false));
        }
    };
    let Some(request) = parse_request(&request_bytes[stripped..]) else {
        return Ok(reply(state, "-", "-", 400, "", false));
    };

    if profile.known_methods.contains(&request.method) {
        return Ok(reply(
            state,
            &request.method,
            &request.target,
            200,
            "ok\n",
            request.keep_alive,
        ));
    }
    match &profile.unknown_method {
        UnknownMethodReaction::Status { code, keep_open } => Ok(reply(
            state,
            &request.method,
            &request.target,
            *code,
            "",
            *keep_open && request.keep_alive,
        )),
        UnknownMethodReaction::ImmediateClose => {
            state.access_log.push(AccessLogEntry {
                method: request.method,
                uri: request.target,
                status: 0,
            });
            state.closed = true;
            Ok(ServerReply {
                bytes: Vec::new(),
                action: ConnectionAction::Closed,
            })
        }
    }
}

/// Maximum repetitions found by the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProbeMax {
    Exact(u64),
    /// Still accepted at the probe ceiling.
    AtLeast(u64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub profile: String,
    pub derived_rule: PrefixRule,
    /// Accepted two-byte prefixes.
    pub pairs_accepted: usize,
    /// Max repetitions per ignored unit (one entry per character for
    /// char-set rules, one for the whole sequence otherwise).
    pub max_repetitions: BTreeMap<String, ProbeMax>,
    pub unknown_method_status: Option<u16>,
    pub unknown_method_keeps_open: bool,
}

const PROBE_REQUEST: &[u8] = b"GET /probe HTTP/1.1\r\nHost: probe\r\n\r\n";

fn prefix_accepted(profile: &ServerProfile, prefix: &[u8]) -> bool {
    let mut state = ServerRunState::new();
    let mut request = Vec::with_capacity(prefix.len() + PROBE_REQUEST.len());
    request.extend_from_slice(prefix);
    request.extend_from_slice(PROBE_REQUEST);
    match server_respond(profile, &mut state, &request) {
        Ok(_) => state.served("/probe", 200),
        Err(_) => false,
    }
}

fn unit_label(unit: &[u8]) -> String {
    let name = |b: u8| -> String {
        match b {
            b'\r' => "CR".to_string(),
            b'\n' => "LF".to_string(),
            b' ' => "SP".to_string(),
            b'\t' => "TAB".to_string(),
            other => format!("0x{other:02x}"),
        }
    };
    unit.iter().map(|&b| name(b)).collect::<Vec<_>>().join("")
}

fn search_max(profile: &ServerProfile, unit: &[u8], ceiling: u64) -> ProbeMax {
    let accepted = |n: u64| -> bool {
        let mut prefix = Vec::with_capacity(unit.len() * n as usize);
        for _ in 0..n {
            prefix.extend_from_slice(unit);
        }
        prefix_accepted(profile, &prefix)
    };
    if accepted(ceiling) {
        return ProbeMax::AtLeast(ceiling);
    }
    // Largest accepted count in [0, ceiling); monotone by construction.
    let mut lo = 0u64;
    let mut hi = ceiling;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if accepted(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ProbeMax::Exact(lo)
}

/// Re-derives a profile's tolerance constants from behavior alone: all
/// 65,536 two-byte prefixes against a fresh endpoint each, then a repetition
/// search per ignored unit.
pub fn probe_prefixes(profile: &ServerProfile, ceiling: u64) -> ProbeReport {
    let mut accepted_pairs: Vec<(u8, u8)> = Vec::new();
    for a in 0..=255u8 {
        for b in 0..=255u8 {
            if prefix_accepted(profile, &[a, b]) {
                accepted_pairs.push((a, b));
            }
        }
    }

    // A closed set of characters shows up as the full C×C square; a strict
    // sequence shows up as a single accepted pair.
    let chars: Vec<u8> = accepted_pairs
        .iter()
        .filter(|(a, b)| a == b)
        .map(|(a, _)| *a)
        .collect();
    let square: BTreeSet<(u8, u8)> = chars
        .iter()
        .flat_map(|&a| chars.iter().map(move |&b| (a, b)))
        .collect();
    let actual: BTreeSet<(u8, u8)> = accepted_pairs.iter().copied().collect();

    let derived_rule = if accepted_pairs.is_empty() {
        PrefixRule::None
    } else if !chars.is_empty() && actual == square {
        PrefixRule::CharSet { chars }
    } else if accepted_pairs.len() == 1 {
        PrefixRule::Sequence {
            bytes: vec![accepted_pairs[0].0, accepted_pairs[0].1],
        }
    } else {
        // Behavior fits neither shape; report raw pairs via the char set of
        // everything seen.
        PrefixRule::CharSet {
            chars: actual.iter().map(|(a, _)| *a).collect(),
        }
    };

    let mut max_repetitions = BTreeMap::new();
    match &derived_rule {
        PrefixRule::None => {}
        PrefixRule::CharSet { chars } => {
            for &c in chars {
                max_repetitions.insert(unit_label(&[c]), search_max(profile, &[c], ceiling));
            }
        }
        PrefixRule::Sequence { bytes } => {
            max_repetitions.insert(unit_label(bytes), search_max(profile, bytes, ceiling));
        }
    }

    // Unknown-method reaction, observed not assumed.
    let mut state = ServerRunState::new();
    let reply = server_respond(
        profile,
        &mut state,
        b"UNKNOWNMETHOD /probe HTTP/1.1\r\nHost: probe\r\nConnection: keep-alive\r\n\r\n",
    )
    .expect("fresh state");
    let unknown_method_status = if reply.bytes.is_empty() {
        None
    } else {
        state.access_log.last().map(|e| e.status)
    };

    ProbeReport {
        profile: profile.name.clone(),
        derived_rule,
        pairs_accepted: accepted_pairs.len(),
        max_repetitions,
        unknown_method_status,
        unknown_method_keeps_open: reply.action == ConnectionAction::Open,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(name: &str) -> ServerProfile {
        builtin_profiles().remove(name).unwrap()
    }

    fn stuffed_get(unit: &[u8], reps: usize) -> Vec<u8> {
        let mut req = Vec::new();
        for _ in 0..reps {
            req.extend_from_slice(unit);
        }
        req.extend_from_slice(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n");
        req
    }

    #[test]
    fn nginx_tolerates_huge_lf_prefixes() {
        let p = profile("nginx");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b"\n", 10_000_000)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 200"));
        assert_eq!(reply.action, ConnectionAction::Open);
        assert!(state.served("/", 200));
    }

    #[test]
    fn apache_stops_at_twenty_crlf_repetitions() {
        let p = profile("apache");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b"\r\n", 20)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 200"));

        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b"\r\n", 21)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 400"));
        assert_eq!(reply.action, ConnectionAction::Closed);
        assert!(state.closed);
    }

    #[test]
    fn apache_ignores_the_sequence_not_the_characters() {
        let p = profile("apache");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b"\r", 2)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 400"));
    }

    #[test]
    fn lighttpd_rejects_any_leading_byte() {
        let p = profile("lighttpd");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b"\r\n", 1)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 400"));
        assert_eq!(reply.action, ConnectionAction::Closed);
    }

    #[test]
    fn iis_accepts_its_documented_space_budget() {
        let p = profile("iis");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b" ", 16_271)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 200"));

        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, &stuffed_get(b" ", 16_272)).unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 400"));
    }

    #[test]
    fn unknown_method_reactions_match_the_profiles() {
        let req = b"UNKNOWNMETHOD / HTTP/1.1\r\nHost: a\r\nConnection: keep-alive\r\n\r\n";
        let cases: [(&str, u16, ConnectionAction); 5] = [
            ("apache", 501, ConnectionAction::Closed),
            ("apache_hardened", 403, ConnectionAction::Open),
            ("nginx", 405, ConnectionAction::Open),
            ("iis", 405, ConnectionAction::Open),
            ("lighttpd", 501, ConnectionAction::Closed),
        ];
        for (name, code, action) in cases {
            let p = profile(name);
            let mut state = ServerRunState::new();
            let reply = server_respond(&p, &mut state, req).unwrap();
            assert!(
                reply.bytes.starts_with(format!("HTTP/1.1 {code}").as_bytes()),
                "{name}"
            );
            assert_eq!(reply.action, action, "{name}");
        }

        let p = profile("nodejs");
        let mut state = ServerRunState::new();
        let reply = server_respond(&p, &mut state, req).unwrap();
        assert!(reply.bytes.is_empty());
        assert_eq!(reply.action, ConnectionAction::Closed);
        assert_eq!(state.access_log.last().map(|e| e.status), Some(0));
    }

    #[test]
    fn hardened_apache_limits_methods_beyond_the_common_set() {
        let p = profile("apache_hardened");
        let mut state = ServerRunState::new();
        let reply =
            server_respond(&p, &mut state, b"PUT /x HTTP/1.1\r\nHost: a\r\n\r\n").unwrap();
        assert!(reply.bytes.starts_with(b"HTTP/1.1 403"));
        assert_eq!(reply.action, ConnectionAction::Open);
    }

    #[test]
    fn served_requests_land_in_the_access_log_once() {
        let p = profile("nginx");
        let mut state = ServerRunState::new();
        server_respond(&p, &mut state, b"GET /a HTTP/1.1\r\nHost: a\r\n\r\n").unwrap();
        server_respond(&p, &mut state, b"GET /b HTTP/1.1\r\nHost: a\r\n\r\n").unwrap();
        assert_eq!(state.access_log.len(), 2);
        assert!(state.served("/a", 200));
        assert!(state.served("/b", 200));
        assert_eq!(
            state.access_log.iter().filter(|e| e.uri == "/a").count(),
            1
        );
    }

    #[test]
    fn request_on_closed_connection_is_an_error() {
        let p = profile("lighttpd");
        let mut state = ServerRunState::new();
        server_respond(&p, &mut state, b"UNKNOWNMETHOD / HTTP/1.1\r\n\r\n").unwrap();
        assert!(state.closed);
        assert!(matches!(
            server_respond(&p, &mut state, b"GET / HTTP/1.1\r\n\r\n"),
            Err(ServerError::ConnectionClosed)
        ));
    }

    #[test]
    fn determinism_same_bytes_same_reply() {
        let p = profile("nginx");
        let req = stuffed_get(b"\r\n", 17);
        let mut s1 = ServerRunState::new();
        let mut s2 = ServerRunState::new();
        let r1 = server_respond(&p, &mut s1, &req).unwrap();
        let r2 = server_respond(&p, &mut s2, &req).unwrap();
        assert_eq!(r1.bytes, r2.bytes);
    }

    #[test]
    fn prefix_monotonicity_in_the_accepted_range() {
        let p = profile("iis");
        for reps in [0usize, 1, 100, 16_271] {
            let mut state = ServerRunState::new();
            let reply = server_respond(&p, &mut state, &stuffed_get(b"\t", reps)).unwrap();
            assert!(reply.bytes.starts_with(b"HTTP/1.1 200"), "reps {reps}");
        }
    }

    #[test]
    fn probe_derives_the_apache_sequence_with_a_small_ceiling() {
        let report = probe_prefixes(&profile("apache"), 1000);
        assert_eq!(
            report.derived_rule,
            PrefixRule::Sequence {
                bytes: b"\r\n".to_vec()
            }
        );
        assert_eq!(
            report.max_repetitions.get("CRLF"),
            Some(&ProbeMax::Exact(20))
        );
        assert_eq!(report.unknown_method_status, Some(501));
        assert!(!report.unknown_method_keeps_open);
    }

    #[test]
    fn probe_finds_nothing_ignorable_for_lighttpd() {
        let report = probe_prefixes(&profile("lighttpd"), 1000);
        assert_eq!(report.derived_rule, PrefixRule::None);
        assert_eq!(report.pairs_accepted, 0);
    }
}
