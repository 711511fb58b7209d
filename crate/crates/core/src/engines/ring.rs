//! Sliding-window engine.
//!
//! Each direction keeps a ring of the last `window_size` bytes, so buffering
//! and the detection budget are decoupled: pattern acceptors are re-anchored
//! at every candidate line start (offset 0 and each position after LF) while
//! the total bytes seen stay under `detection_timeout`. On an enable
//! decision the analyzer is attached and replayed only the ring contents
//! from the most recent candidate start; optionally, a violating analyzer
//! resets the verdict and detection resumes.

use super::{enable_rules, DpdEngine, DpdVerdict, EnableRule, SignatureMode, VerdictBasis};
use crate::analyzers::{make_analyzer, Analyzer, AnalyzerEvent, SamplerParams};
use crate::signature::{SignatureSet, evaluate_bidirectional, MatchStatus};
use crate::stream::{Chunk, Direction};
use std::collections::VecDeque;
use std::sync::Arc;

#[derive(Clone)]
pub struct RingEngineConfig {
    /// Ring capacity per direction.
    pub window_size: usize,
    /// Connection-total byte budget for detection; `None` is unbounded.
    pub detection_timeout: Option<u64>,
    pub restart_on_violation: bool,
    pub signatures: Arc<SignatureSet>,
    pub sampler: Option<SamplerParams>,
}

impl Default for RingEngineConfig {
    fn default() -> Self {
        RingEngineConfig {
            window_size: 4096,
            detection_timeout: None,
            restart_on_violation: true,
            signatures: Arc::new(
                SignatureSet::compile(crate::signature::default_signatures())
                    .expect("default signature set compiles"),
            ),
            sampler: None,
        }
    }
}

struct DirRing {
    ring: VecDeque<u8>,
    /// Stream offset of ring[0].
    base: u64,
    seen: u64,
    /// The next byte begins a line.
    at_line_start: bool,
    /// Offset of the most recent candidate line start.
    line_start: u64,
}

impl DirRing {
    fn new() -> Self {
        DirRing {
            ring: VecDeque::new(),
            base: 0,
            seen: 0,
            at_line_start: true,
            line_start: 0,
        }
    }

    fn slice_from(&self, offset: u64) -> Vec<u8> {
        let begin = offset.max(self.base);
        let skip = (begin - self.base) as usize;
        self.ring.iter().skip(skip).copied().collect()
    }
}

#[derive(Default)]
struct PatternTrack {
    mask: Option<Vec<u64>>,
    matched_line_start: Option<u64>,
}

struct Attached {
    protocol: String,
    analyzer: Box<dyn Analyzer>,
    decided_at: u64,
    misbound: bool,
}

pub struct RingEngine {
    config: Arc<RingEngineConfig>,
    rules: Vec<EnableRule>,
    tracks: Vec<PatternTrack>,
    dirs: [DirRing; 2],
    attached: Option<Attached>,
    detecting: bool,
    total_seen: u64,
    stopped_at: Option<u64>,
}

impl RingEngine {
    pub fn new(config: Arc<RingEngineConfig>) -> Self {
        let rules = enable_rules(&config.signatures, SignatureMode::Bidirectional);
        let tracks = config
            .signatures
            .patterns()
            .iter()
            .map(|_| PatternTrack::default())
            .collect();
        RingEngine {
            config,
            rules,
            tracks,
            dirs: [DirRing::new(), DirRing::new()],
            attached: None,
            detecting: true,
            total_seen: 0,
            stopped_at: None,
        }
    }

    /// Position at which the detection budget ran out, if it did.
    pub fn detection_stopped_at(&self) -> Option<u64> {
        self.stopped_at
    }

    fn clear_tracks(&mut self) {
        for track in &mut self.tracks {
            track.mask = None;
            track.matched_line_start = None;
        }
    }

    fn track_status(&self, idx: usize) -> MatchStatus {
        if self.tracks[idx].matched_line_start.is_some() {
            MatchStatus::Matched
        } else {
            MatchStatus::Pending
        }
    }

    fn ready_rule(&self) -> Option<usize> {
        self.rules.iter().position(|rule| {
            evaluate_bidirectional(
                &rule.effective,
                self.track_status(rule.pattern),
                rule.requires.map(|i| self.track_status(i)),
            )
        })
    }

    fn enable(&mut self, rule_idx: usize, out: &mut Vec<AnalyzerEvent>) {
        let rule = self.rules[rule_idx].clone();
        let Some(mut analyzer) = make_analyzer(&rule.protocol, self.config.sampler) else {
            return;
        };
        // Replay start per direction: the contributing match's line start,
        // or the current line start where no pattern contributed.
        let mut from: [Option<u64>; 2] = [None, None];
        let patterns = self.config.signatures.patterns();
        for idx in std::iter::once(rule.pattern).chain(rule.requires) {
            let dir = patterns[idx].spec().direction;
            if let Some(start) = self.tracks[idx].matched_line_start {
                from[dir.index()] = Some(start);
            }
        }
        for dir in [Direction::Originator, Direction::Responder] {
            let d = dir.index();
            let start = from[d].unwrap_or(self.dirs[d].line_start);
            let replay = self.dirs[d].slice_from(start);
            if !replay.is_empty() {
                analyzer.on_data(dir, &replay, out);
            }
        }
        let misbound = analyzer.violated();
        self.attached = Some(Attached {
            protocol: rule.protocol.clone(),
            analyzer,
            decided_at: self.total_seen,
            misbound,
        });
        self.detecting = false;
        self.clear_tracks();
        if misbound {
            self.handle_violation();
        }
    }

    fn handle_violation(&mut self) {
        if !self.config.restart_on_violation {
            if let Some(att) = &mut self.attached {
                att.misbound = true;
            }
            return;
        }
        self.attached = None;
        let within_budget = self
            .config
            .detection_timeout
            .is_none_or(|t| self.total_seen <= t);
        if within_budget {
            self.detecting = true;
            self.clear_tracks();
        } else {
            self.stopped_at = Some(self.config.detection_timeout.unwrap());
        }
    }
}

impl DpdEngine for RingEngine {
    fn on_chunk(&mut self, chunk: &Chunk) -> Vec<AnalyzerEvent> {
        let dir = chunk.direction;
        let d = dir.index();
        let mut out = Vec::new();

        for &byte in chunk.payload.iter() {
            let offset = self.dirs[d].seen;
            let begins_line = self.dirs[d].at_line_start;
            if begins_line {
                self.dirs[d].line_start = offset;
            }
            self.dirs[d].at_line_start = byte == b'\n';

            self.dirs[d].ring.push_back(byte);
            if self.dirs[d].ring.len() > self.config.window_size {
                self.dirs[d].ring.pop_front();
                self.dirs[d].base += 1;
            }
            self.dirs[d].seen += 1;
            self.total_seen += 1;

            if self.detecting {
                if let Some(t) = self.config.detection_timeout {
                    if self.total_seen > t {
                        self.detecting = false;
                        self.stopped_at = Some(t);
                        self.clear_tracks();
                    }
                }
            }

            if self.detecting {
                let mut newly_matched = false;
                let patterns = self.config.signatures.patterns();
                for (idx, track) in self.tracks.iter_mut().enumerate() {
                    let pattern = &patterns[idx];
                    if pattern.spec().direction != dir || track.matched_line_start.is_some() {
                        continue;
                    }
                    let nfa = pattern.nfa().clone();
                    let mask = track.mask.get_or_insert_with(|| nfa.empty_mask());
                    if begins_line {
                        nfa.inject_start(mask);
                    }
                    *mask = nfa.step(mask, byte);
                    if nfa.accepts(mask) {
                        track.matched_line_start = Some(self.dirs[d].line_start);
                        newly_matched = true;
                    }
                }
                if newly_matched {
                    if let Some(rule_idx) = self.ready_rule() {
                        self.enable(rule_idx, &mut out);
                    }
                }
            } else if self.attached.is_some() {
                let att = self.attached.as_mut().unwrap();
                att.analyzer.on_data(dir, &[byte], &mut out);
                if att.analyzer.violated() && !att.misbound {
                    self.handle_violation();
                }
            }
        }
        out
    }

    fn verdict(&self) -> DpdVerdict {
        match &self.attached {
            Some(att) => DpdVerdict::decided(
                &att.protocol,
                att.decided_at,
                VerdictBasis::Signature,
                att.misbound,
            ),
            None => DpdVerdict::none(),
        }
    }
}
