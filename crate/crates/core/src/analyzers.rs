//! Streaming application-layer analyzers.
//!
//! Analyzers consume directional bytes and emit protocol events, weird
//! events (anomalies, rate-limited by a sampler) and violations. A violation
//! is absorbing: after emitting one, an analyzer goes quiet for the rest of
//! the connection. Event sequences are independent of input chunking.

use crate::stream::Direction;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const WEIRD_EMPTY_REQUEST_LINE: &str = "empty_request_line";
pub const WEIRD_EMPTY_RESPONSE_LINE: &str = "empty_response_line";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    HttpRequest,
    HttpResponse,
    SmtpCommand,
    SmtpReply,
    Weird,
    Violation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerEvent {
    pub kind: EventKind,
    pub direction: Direction,
    /// Offset within the emitting direction's stream, as observed by the
    /// analyzer (replayed analyzers count from their own stream start).
    pub at_byte: u64,
    pub detail: BTreeMap<String, String>,
}

impl AnalyzerEvent {
    fn new(kind: EventKind, direction: Direction, at_byte: u64) -> Self {
        AnalyzerEvent {
            kind,
            direction,
            at_byte,
            detail: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.detail.insert(key.to_string(), value.into());
        self
    }

    pub fn weird(direction: Direction, at_byte: u64, name: &str) -> Self {
        Self::new(EventKind::Weird, direction, at_byte).with("name", name)
    }

    pub fn violation(direction: Direction, at_byte: u64, reason: &str) -> Self {
        Self::new(EventKind::Violation, direction, at_byte).with("reason", reason)
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub emit_first: u64,
    pub sample_every: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            emit_first: 5,
            sample_every: 1000,
        }
    }
}

/// Rate limiter for weird events: the first `emit_first` occurrences of a
/// name are emitted, then one per `sample_every`. With no params every
/// occurrence passes through.
#[derive(Debug, Clone)]
pub struct WeirdSampler {
    params: Option<SamplerParams>,
    seen: BTreeMap<String, u64>,
}

impl WeirdSampler {
    pub fn new(params: Option<SamplerParams>) -> Self {
        WeirdSampler {
            params,
            seen: BTreeMap::new(),
        }
    }

    /// Records one occurrence of `name`; returns whether to emit it.
    pub fn report(&mut self, name: &str) -> bool {
        let n = self.seen.entry(name.to_string()).or_insert(0);
        *n += 1;
        let n = *n;
        match self.params {
            None => true,
            Some(p) => {
                if n <= p.emit_first {
                    true
                } else if p.sample_every == 0 {
                    false
                } else {
                    (n - p.emit_first - 1).is_multiple_of(p.sample_every)
                }
            }
        }
    }

    pub fn seen(&self, name: &str) -> u64 {
        self.seen.get(name).copied().unwrap_or(0)
    }
}

pub trait Analyzer {
    fn protocol(&self) -> &'static str;
    fn on_data(&mut self, direction: Direction, bytes: &[u8], out: &mut Vec<AnalyzerEvent>);
    fn violated(&self) -> bool;
}

pub fn make_analyzer(protocol: &str, sampler: Option<SamplerParams>) -> Option<Box<dyn Analyzer>> {
    match protocol {
        "http" => Some(Box::new(HttpAnalyzer::new(sampler))),
        "smtp" => Some(Box::new(SmtpAnalyzer::new())),
        _ => None,
    }
}

fn is_tchar(b: u8) -> bool {
    matches!(b,
        b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' |
        b'^' | b'_' | b'`' | b'|' | b'~' | b'0'..=b'9' | b'A'..=b'Z' | b'a'..=b'z')
}

fn is_vchar(b: u8) -> bool {
    (0x21..=0x7e).contains(&b)
}

/// Growable line accumulator with an absolute stream offset and amortized
/// O(1) consumption.
#[derive(Debug, Default)]
struct LineBuf {
    buf: Vec<u8>,
    head: usize,
    base: u64,
    scan: usize,
}

impl LineBuf {
    fn push(&mut self, bytes: &[u8]) {
        if self.head > 4096 && self.head * 2 > self.buf.len() {
            self.buf.drain(..self.head);
            self.head = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    fn pending(&self) -> &[u8] {
        &self.buf[self.head..]
    }

    /// Stream offset of the first pending byte.
    fn offset(&self) -> u64 {
        self.base
    }

    /// Pops the next complete line (terminated by LF, one trailing CR
    /// stripped). Returns the line-start offset and the content.
    fn next_line(&mut self) -> Option<(u64, Vec<u8>)> {
        let data = &self.buf[self.head..];
        match data[self.scan..].iter().position(|&b| b == b'\n') {
            Some(rel) => {
                let nl = self.scan + rel;
                let mut content = data[..nl].to_vec();
                if content.last() == Some(&b'\r') {
                    content.pop();
                }
                let start = self.base;
                self.head += nl + 1;
                self.base += (nl + 1) as u64;
                self.scan = 0;
                Some((start, content))
            }
            None => {
                self.scan = data.len();
                None
            }
        }
    }

    /// Consumes up to `n` buffered bytes (body data). Returns how many.
    fn consume(&mut self, n: u64) -> u64 {
        let avail = (self.buf.len() - self.head) as u64;
        let k = n.min(avail);
        self.head += k as usize;
        self.base += k;
        self.scan = self.scan.saturating_sub(k as usize);
        k
    }

    fn clear(&mut self) {
        self.buf.clear();
        self.head = 0;
        self.scan = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HttpPhase {
    Line,
    Headers,
    Body(u64),
}

#[derive(Debug)]
struct HttpSide {
    lines: LineBuf,
    phase: HttpPhase,
    content_length: u64,
    /// Bytes of the current partial line already validated by the early
    /// check.
    checked: usize,
    first_token_done: bool,
}

impl HttpSide {
    fn new() -> Self {
        HttpSide {
            lines: LineBuf::default(),
            phase: HttpPhase::Line,
            content_length: 0,
            checked: 0,
            first_token_done: false,
        }
    }

    fn reset_partial(&mut self) {
        self.checked = 0;
        self.first_token_done = false;
    }
}

/// HTTP/1.x analyzer. Requests are `<method> SP <target> SP HTTP/<d>.<d>`
/// with the method an arbitrary token; bare CRLF before a request line is an
/// empty request line (weird, sampled), a non-token byte is a violation.
/// Bodies are consumed by Content-Length only.
pub struct HttpAnalyzer {
    req: HttpSide,
    resp: HttpSide,
    sampler: WeirdSampler,
    violated: bool,
    requests_seen: u64,
    responses_seen: u64,
    keep_alive_pending: bool,
}

impl HttpAnalyzer {
    pub fn new(sampler: Option<SamplerParams>) -> Self {
        HttpAnalyzer {
            req: HttpSide::new(),
            resp: HttpSide::new(),
            sampler: WeirdSampler::new(sampler),
            violated: false,
            requests_seen: 0,
            responses_seen: 0,
            keep_alive_pending: false,
        }
    }

    pub fn requests_seen(&self) -> u64 {
        self.requests_seen
    }

    pub fn responses_seen(&self) -> u64 {
        self.responses_seen
    }

    pub fn keep_alive_pending(&self) -> bool {
        self.keep_alive_pending
    }

    fn violate(&mut self, direction: Direction, at: u64, reason: &str, out: &mut Vec<AnalyzerEvent>) {
        if !self.violated {
            out.push(AnalyzerEvent::violation(direction, at, reason));
            self.violated = true;
            self.req.lines.clear();
            self.resp.lines.clear();
        }
    }

    fn process_requests(&mut self, out: &mut Vec<AnalyzerEvent>) {
        loop {
            if self.violated {
                return;
            }
            match self.req.phase {
                HttpPhase::Line => match self.req.lines.next_line() {
                    Some((start, line)) => {
                        self.req.reset_partial();
                        if line.is_empty() {
                            if self.sampler.report(WEIRD_EMPTY_REQUEST_LINE) {
                                out.push(AnalyzerEvent::weird(
                                    Direction::Originator,
                                    start,
                                    WEIRD_EMPTY_REQUEST_LINE,
                                ));
                            }
                            continue;
                        }
                        match parse_request_line(&line) {
                            Ok((method, target, version)) => {
                                out.push(
                                    AnalyzerEvent::new(
                                        EventKind::HttpRequest,
                                        Direction::Originator,
                                        start,
                                    )
                                    .with("method", method)
                                    .with("uri", target)
                                    .with("version", version),
                                );
                                self.requests_seen += 1;
                                self.req.content_length = 0;
                                self.req.phase = HttpPhase::Headers;
                            }
                            Err(reason) => {
                                self.violate(Direction::Originator, start, reason, out);
                                return;
                            }
                        }
                    }
                    None => {
                        // Early check: non-token bytes in the method make the
                        // request line hopeless before it even completes.
                        if let Some(off) = self.scan_partial_method() {
                            self.violate(
                                Direction::Originator,
                                off,
                                "non-token byte in request method",
                                out,
                            );
                        }
                        return;
                    }
                },
                HttpPhase::Headers => match self.req.lines.next_line() {
                    Some((start, line)) => {
                        self.req.reset_partial();
                        if line.is_empty() {
                            self.req.phase = if self.req.content_length > 0 {
                                HttpPhase::Body(self.req.content_length)
                            } else {
                                HttpPhase::Line
                            };
                            continue;
                        }
                        match parse_header_line(&line) {
                            Ok((name, value)) => {
                                if name == "content-length" {
                                    match value.parse::<u64>() {
                                        Ok(v) => self.req.content_length = v,
                                        Err(_) => {
                                            self.violate(
                                                Direction::Originator,
                                                start,
                                                "invalid content-length",
                                                out,
                                            );
                                            return;
                                        }
                                    }
                                } else if name == "connection" {
                                    self.keep_alive_pending =
                                        value.eq_ignore_ascii_case("keep-alive");
                                }
                            }
                            Err(reason) => {
                                self.violate(Direction::Originator, start, reason, out);
                                return;
                            }
                        }
                    }
                    None => return,
                },
                HttpPhase::Body(remaining) => {
                    let taken = self.req.lines.consume(remaining);
                    if taken == 0 {
                        return;
                    }
                    self.req.phase = if taken == remaining {
                        HttpPhase::Line
                    } else {
                        HttpPhase::Body(remaining - taken)
                    };
                }
            }
        }
    }

    fn scan_partial_method(&mut self) -> Option<u64> {
        let base = self.req.lines.offset();
        let pending = self.req.lines.pending();
        while self.req.checked < pending.len() {
            let i = self.req.checked;
            let b = pending[i];
            if !self.req.first_token_done {
                if b == b' ' {
                    self.req.first_token_done = true;
                } else if b == b'\r' {
                    // Possible line terminator; defer to line completion.
                    return None;
                } else if !is_tchar(b) {
                    return Some(base + i as u64);
                }
            }
            self.req.checked += 1;
        }
        None
    }

    fn process_responses(&mut self, out: &mut Vec<AnalyzerEvent>) {
        loop {
            if self.violated {
                return;
            }
            match self.resp.phase {
                HttpPhase::Line => match self.resp.lines.next_line() {
                    Some((start, line)) => {
                        self.resp.reset_partial();
                        if line.is_empty() {
                            if self.sampler.report(WEIRD_EMPTY_RESPONSE_LINE) {
                                out.push(AnalyzerEvent::weird(
                                    Direction::Responder,
                                    start,
                                    WEIRD_EMPTY_RESPONSE_LINE,
                                ));
                            }
                            continue;
                        }
                        match parse_status_line(&line) {
                            Ok((version, code, reason)) => {
                                out.push(
                                    AnalyzerEvent::new(
                                        EventKind::HttpResponse,
                                        Direction::Responder,
                                        start,
                                    )
                                    .with("version", version)
                                    .with("status", code.to_string())
                                    .with("reason", reason),
                                );
                                self.responses_seen += 1;
                                self.resp.content_length = 0;
                                self.resp.phase = HttpPhase::Headers;
                            }
                            Err(reason) => {
                                self.violate(Direction::Responder, start, reason, out);
                                return;
                            }
                        }
                    }
                    None => {
                        if let Some(off) = self.scan_partial_status() {
                            self.violate(
                                Direction::Responder,
                                off,
                                "malformed status line",
                                out,
                            );
                        }
                        return;
                    }
                },
                HttpPhase::Headers => match self.resp.lines.next_line() {
                    Some((start, line)) => {
                        self.resp.reset_partial();
                        if line.is_empty() {
                            self.resp.phase = if self.resp.content_length > 0 {
                                HttpPhase::Body(self.resp.content_length)
                            } else {
                                HttpPhase::Line
                            };
                            continue;
                        }
                        match parse_header_line(&line) {
                            Ok((name, value)) => {
                                if name == "content-length" {
                                    match value.parse::<u64>() {
                                        Ok(v) => self.resp.content_length = v,
                                        Err(_) => {
                                            self.violate(
                                                Direction::Responder,
                                                start,
                                                "invalid content-length",
                                                out,
                                            );
                                            return;
                                        }
                                    }
                                }
                            }
                            Err(reason) => {
                                self.violate(Direction::Responder, start, reason, out);
                                return;
                            }
                        }
                    }
                    None => return,
                },
                HttpPhase::Body(remaining) => {
                    let taken = self.resp.lines.consume(remaining);
                    if taken == 0 {
                        return;
                    }
                    self.resp.phase = if taken == remaining {
                        HttpPhase::Line
                    } else {
                        HttpPhase::Body(remaining - taken)
                    };
                }
            }
        }
    }

    fn scan_partial_status(&mut self) -> Option<u64> {
        const PREFIX: &[u8] = b"HTTP/";
        let base = self.resp.lines.offset();
        let pending = self.resp.lines.pending();
        while self.resp.checked < pending.len() {
            let i = self.resp.checked;
            let b = pending[i];
            if i < PREFIX.len() {
                if b == b'\r' {
                    return None;
                }
                if b != PREFIX[i] {
                    return Some(base + i as u64);
                }
            } else {
                return None;
            }
            self.resp.checked += 1;
        }
        None
    }
}

impl Analyzer for HttpAnalyzer {
    fn protocol(&self) -> &'static str {
        "http"
    }

    fn on_data(&mut self, direction: Direction, bytes: &[u8], out: &mut Vec<AnalyzerEvent>) {
        if self.violated {
            return;
        }
        match direction {
            Direction::Originator => {
                self.req.lines.push(bytes);
                self.process_requests(out);
            }
            Direction::Responder => {
                self.resp.lines.push(bytes);
                self.process_responses(out);
            }
        }
    }

    fn violated(&self) -> bool {
        self.violated
    }
}

fn parse_request_line(line: &[u8]) -> Result<(String, String, String), &'static str> {
    let first_sp = line
        .iter()
        .position(|&b| b == b' ')
        .ok_or("malformed request line (missing target)")?;
    let method = &line[..first_sp];
    if method.is_empty() || !method.iter().all(|&b| is_tchar(b)) {
        return Err("non-token byte in request method");
    }
    let last_sp = line.iter().rposition(|&b| b == b' ').unwrap();
    if last_sp == first_sp {
        return Err("malformed request line (missing version)");
    }
    let target = &line[first_sp + 1..last_sp];
    if target.is_empty() || !target.iter().all(|&b| is_vchar(b)) {
        return Err("invalid request target");
    }
    let version = &line[last_sp + 1..];
    parse_http_version(version).ok_or("invalid HTTP version")?;
    Ok((
        String::from_utf8_lossy(method).into_owned(),
        String::from_utf8_lossy(target).into_owned(),
        String::from_utf8_lossy(version).into_owned(),
    ))
}

fn parse_http_version(bytes: &[u8]) -> Option<()> {
    if bytes.len() == 8
        && bytes.starts_with(b"HTTP/")
        && bytes[5].is_ascii_digit()
        && bytes[6] == b'.'
        && bytes[7].is_ascii_digit()
    {
        Some(())
    } else {
        None
    }
}

fn parse_status_line(line: &[u8]) -> Result<(String, u16, String), &'static str> {
    if line.len() < 12 {
        return Err("malformed status line");
    }
    parse_http_version(&line[..8]).ok_or("malformed status line")?;
    if line[8] != b' ' {
        return Err("malformed status line");
    }
    let code_bytes = &line[9..12];
    if !code_bytes.iter().all(|b| b.is_ascii_digit()) {
        return Err("malformed status line");
    }
    if line.len() > 12 && line[12] != b' ' {
        return Err("malformed status line");
    }
    let code: u16 = std::str::from_utf8(code_bytes).unwrap().parse().unwrap();
    let reason = if line.len() > 13 {
        String::from_utf8_lossy(&line[13..]).into_owned()
    } else {
        String::new()
    };
    Ok((String::from_utf8_lossy(&line[..8]).into_owned(), code, reason))
}

fn parse_header_line(line: &[u8]) -> Result<(String, String), &'static str> {
    let colon = line
        .iter()
        .position(|&b| b == b':')
        .ok_or("malformed header line")?;
    let name = &line[..colon];
    if name.is_empty() || !name.iter().all(|&b| is_tchar(b)) {
        return Err("malformed header line");
    }
    let value = String::from_utf8_lossy(&line[colon + 1..]).trim().to_string();
    Ok((
        String::from_utf8_lossy(name).to_ascii_lowercase(),
        value,
    ))
}

/// Minimal SMTP analyzer: client lines are `<verb> [args]` commands, server
/// lines must start with a 3-digit reply code. Its job in the lab is the
/// violation it raises when an HTTP-shaped response arrives.
pub struct SmtpAnalyzer {
    cli: LineBuf,
    srv: LineBuf,
    violated: bool,
    srv_checked: usize,
}

impl SmtpAnalyzer {
    pub fn new() -> Self {
        SmtpAnalyzer {
            cli: LineBuf::default(),
            srv: LineBuf::default(),
            violated: false,
            srv_checked: 0,
        }
    }

    fn violate(&mut self, direction: Direction, at: u64, reason: &str, out: &mut Vec<AnalyzerEvent>) {
        if !self.violated {
            out.push(AnalyzerEvent::violation(direction, at, reason));
            self.violated = true;
            self.cli.clear();
            self.srv.clear();
        }
    }

    fn process_client(&mut self, out: &mut Vec<AnalyzerEvent>) {
        while let Some((start, line)) = self.cli.next_line() {
            if line.is_empty() {
                continue;
            }
            let sp = line.iter().position(|&b| b == b' ').unwrap_or(line.len());
            let verb = &line[..sp];
            if verb.is_empty() || !verb.iter().all(|&b| is_vchar(b)) {
                self.violate(Direction::Originator, start, "malformed command line", out);
                return;
            }
            let args = if sp < line.len() { &line[sp + 1..] } else { &[][..] };
            out.push(
                AnalyzerEvent::new(EventKind::SmtpCommand, Direction::Originator, start)
                    .with("verb", String::from_utf8_lossy(verb).into_owned())
                    .with("args", String::from_utf8_lossy(args).into_owned()),
            );
        }
    }

    fn process_server(&mut self, out: &mut Vec<AnalyzerEvent>) {
        loop {
            match self.srv.next_line() {
                Some((start, line)) => {
                    self.srv_checked = 0;
                    if line.is_empty() {
                        continue;
                    }
                    let valid = line.len() >= 3
                        && line[..3].iter().all(|b| b.is_ascii_digit())
                        && (line.len() == 3 || line[3] == b' ' || line[3] == b'-');
                    if !valid {
                        self.violate(
                            Direction::Responder,
                            start,
                            "reply must start with 3-digit code",
                            out,
                        );
                        return;
                    }
                    let code = std::str::from_utf8(&line[..3]).unwrap();
                    let text = if line.len() > 4 { &line[4..] } else { &[][..] };
                    out.push(
                        AnalyzerEvent::new(EventKind::SmtpReply, Direction::Responder, start)
                            .with("code", code)
                            .with("text", String::from_utf8_lossy(text).into_owned()),
                    );
                }
                None => {
                    // Early check: a reply line must open with digits.
                    let base = self.srv.offset();
                    let pending = self.srv.pending();
                    while self.srv_checked < pending.len() && self.srv_checked < 3 {
                        let i = self.srv_checked;
                        let b = pending[i];
                        if b == b'\r' {
                            return;
                        }
                        if !b.is_ascii_digit() {
                            self.violate(
                                Direction::Responder,
                                base + i as u64,
                                "reply must start with 3-digit code",
                                out,
                            );
                            return;
                        }
                        self.srv_checked += 1;
                    }
                    return;
                }
            }
        }
    }
}

impl Default for SmtpAnalyzer {
    fn default() -> Self {
        Self::new()
    }
}

impl Analyzer for SmtpAnalyzer {
    fn protocol(&self) -> &'static str {
        "smtp"
    }

    fn on_data(&mut self, direction: Direction, bytes: &[u8], out: &mut Vec<AnalyzerEvent>) {
        if self.violated {
            return;
        }
        match direction {
            Direction::Originator => {
                self.cli.push(bytes);
                self.process_client(out);
            }
            Direction::Responder => {
                self.srv.push(bytes);
                self.process_server(out);
            }
        }
    }

    fn violated(&self) -> bool {
        self.violated
    }
}

/// Connection statistics: bytes and chunks per direction. Never violates,
/// never emits events.
#[derive(Debug, Default, Clone, Serialize)]
pub struct ConnSizeAnalyzer {
    pub orig_bytes: u64,
    pub resp_bytes: u64,
    pub orig_chunks: u64,
    pub resp_chunks: u64,
}

impl ConnSizeAnalyzer {
    pub fn feed(&mut self, direction: Direction, bytes: &[u8]) {
        if bytes.is_empty() {
            return;
        }
        match direction {
            Direction::Originator => {
                self.orig_bytes += bytes.len() as u64;
                self.orig_chunks += 1;
            }
            Direction::Responder => {
                self.resp_bytes += bytes.len() as u64;
                self.resp_chunks += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Direction::{Originator, Responder};

    fn feed_http(analyzer: &mut HttpAnalyzer, dir: Direction, bytes: &[u8]) -> Vec<AnalyzerEvent> {
        let mut out = Vec::new();
        analyzer.on_data(dir, bytes, &mut out);
        out
    }

    #[test]
    fn well_formed_request_parses() {
        let mut a = HttpAnalyzer::new(None);
        let events = feed_http(&mut a, Originator, b"GET / HTTP/1.1\r\nHost: a\r\n\r\n");
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, EventKind::HttpRequest);
        assert_eq!(events[0].detail_str("method"), Some("GET"));
        assert_eq!(events[0].detail_str("uri"), Some("/"));
        assert_eq!(events[0].at_byte, 0);
    }

    #[test]
    fn empty_lines_are_weird_not_violations() {
        let mut a = HttpAnalyzer::new(None);
        let mut stream = b"\r\n".repeat(1000);
        stream.extend_from_slice(b"GET / HTTP/1.1\r\nHost: a\r\n\r\n");
        let events = feed_http(&mut a, Originator, &stream);
        let weirds = events
            .iter()
            .filter(|e| e.kind == EventKind::Weird)
            .count();
        assert_eq!(weirds, 1000);
        assert_eq!(
            events.last().map(|e| e.kind),
            Some(EventKind::HttpRequest)
        );
        assert!(!a.violated());
    }

    #[test]
    fn arbitrary_token_methods_are_accepted() {
        let mut a = HttpAnalyzer::new(None);
        let events = feed_http(&mut a, Originator, b"UNKNOWNMETHOD / HTTP/1.1\r\n\r\n");
        assert_eq!(events[0].kind, EventKind::HttpRequest);
        assert_eq!(events[0].detail_str("method"), Some("UNKNOWNMETHOD"));
        assert!(!a.violated());
    }

    #[test]
    fn non_token_first_byte_violates_immediately() {
        let mut a = HttpAnalyzer::new(None);
        let events = feed_http(&mut a, Originator, b"\x00\x01garbage");
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, EventKind::Violation);
        assert_eq!(events[0].at_byte, 0);
        assert!(a.violated());
    }

    #[test]
    fn violation_is_absorbing() {
        let mut a = HttpAnalyzer::new(None);
        feed_http(&mut a, Originator, b"\x00");
        let after = feed_http(&mut a, Originator, b"GET / HTTP/1.1\r\n\r\n");
        assert!(after.is_empty());
        let resp = feed_http(&mut a, Responder, b"HTTP/1.1 200 OK\r\n\r\n");
        assert!(resp.is_empty());
    }

    #[test]
    fn keep_alive_continuation_parses_second_request() {
        let mut a = HttpAnalyzer::new(None);
        let req1 = b"GET /a HTTP/1.1\r\nConnection: keep-alive\r\n\r\n";
        let resp = b"HTTP/1.1 200 OK\r\nContent-Length: 3\r\n\r\nok\n";
        let req2 = b"GET /b HTTP/1.1\r\nHost: a\r\n\r\n";
        feed_http(&mut a, Originator, req1);
        assert!(a.keep_alive_pending());
        feed_http(&mut a, Responder, resp);
        let events = feed_http(&mut a, Originator, req2);
        assert_eq!(events[0].detail_str("uri"), Some("/b"));
        assert_eq!(a.requests_seen(), 2);
        assert_eq!(a.responses_seen(), 1);
    }

    #[test]
    fn response_body_is_skipped_by_content_length() {
        let mut a = HttpAnalyzer::new(None);
        let mut events = feed_http(
            &mut a,
            Responder,
            b"HTTP/1.1 200 OK\r\nContent-Length: 5\r\n\r\nhelloHTTP/1.1 404 Not Found\r\n\r\n",
        );
        events.retain(|e| e.kind == EventKind::HttpResponse);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].detail_str("status"), Some("200"));
        assert_eq!(events[1].detail_str("status"), Some("404"));
    }

    #[test]
    fn malformed_version_violates() {
        let mut a = HttpAnalyzer::new(None);
        let events = feed_http(&mut a, Originator, b"GET /\r\n");
        assert_eq!(events[0].kind, EventKind::Violation);
    }

    #[test]
    fn event_stream_is_chunking_independent() {
        let stream = {
            let mut s = b"\r\n\r\nGET /x HTTP/1.1\r\nHost: a\r\nContent-Length: 2\r\n\r\nokGET /y HTTP/1.1\r\n\r\n".to_vec();
            s.extend_from_slice(b"POST /z HTTP/1.1\r\n\r\n");
            s
        };
        let mut whole = HttpAnalyzer::new(None);
        let expected = feed_http(&mut whole, Originator, &stream);

        for chunk_size in [1, 3, 7, 64] {
            let mut a = HttpAnalyzer::new(None);
            let mut got = Vec::new();
            for part in stream.chunks(chunk_size) {
                a.on_data(Originator, part, &mut got);
            }
            assert_eq!(got, expected, "chunk size {chunk_size}");
        }
    }

    #[test]
    fn smtp_command_and_reply_grammar() {
        let mut a = SmtpAnalyzer::new();
        let mut out = Vec::new();
        a.on_data(Originator, b"HELO example.com\r\n", &mut out);
        assert_eq!(out[0].kind, EventKind::SmtpCommand);
        assert_eq!(out[0].detail_str("verb"), Some("HELO"));

        out.clear();
        a.on_data(Responder, b"220 mail ready\r\n", &mut out);
        assert_eq!(out[0].kind, EventKind::SmtpReply);
        assert_eq!(out[0].detail_str("code"), Some("220"));
    }

    #[test]
    fn http_shaped_reply_violates_smtp() {
        let mut a = SmtpAnalyzer::new();
        let mut out = Vec::new();
        a.on_data(Responder, b"HTTP/1.1 405 Method Not Allowed\r\n", &mut out);
        assert_eq!(out[0].kind, EventKind::Violation);
        assert_eq!(out[0].at_byte, 0);
        assert!(a.violated());
    }

    #[test]
    fn conn_size_counts_bytes_and_chunks() {
        let mut c = ConnSizeAnalyzer::default();
        c.feed(Originator, &[0u8; 10]);
        assert_eq!(c.orig_bytes, 10);
        c.feed(Originator, &[]);
        assert_eq!(c.orig_bytes, 10);
        assert_eq!(c.orig_chunks, 1);
        for _ in 0..4 {
            c.feed(Responder, &[0u8; 256]);
        }
        assert_eq!(c.resp_bytes, 1024);
        assert_eq!(c.resp_chunks, 4);
    }

    #[test]
    fn sampler_emits_first_then_samples() {
        let mut s = WeirdSampler::new(Some(SamplerParams {
            emit_first: 5,
            sample_every: 100,
        }));
        let mut emitted = Vec::new();
        for i in 1..=300u64 {
            if s.report("w") {
                emitted.push(i);
            }
        }
        assert!(emitted.contains(&3));
        let in_window = emitted.iter().filter(|&&i| (6..=104).contains(&i)).count();
        assert_eq!(in_window, 1);
        assert_eq!(emitted, vec![1, 2, 3, 4, 5, 6, 106, 206]);
    }

    #[test]
    fn sampler_emissions_match_the_closed_form() {
        for (emit_first, sample_every) in [(5u64, 1000u64), (5, 100), (1, 2), (0, 7), (3, 1)] {
            for n in [0u64, 1, 5, 6, 7, 104, 105, 106, 999, 1000, 1006, 5000] {
                let mut s = WeirdSampler::new(Some(SamplerParams {
                    emit_first,
                    sample_every,
                }));
                let emitted = (0..n).filter(|_| s.report("w")).count() as u64;
                let expected = if n <= emit_first {
                    n
                } else {
                    emit_first + (n - emit_first).div_ceil(sample_every)
                };
                assert_eq!(
                    emitted, expected,
                    "emit_first={emit_first} sample_every={sample_every} n={n}"
                );
                assert!(emitted <= emit_first + n.div_ceil(sample_every));
            }
        }
    }

    #[test]
    fn disabled_sampler_passes_everything() {
        let mut s = WeirdSampler::new(None);
        assert!((0..100).all(|_| s.report("w")));
        assert_eq!(s.seen("w"), 100);
    }
}
