//! Spell-matching wizard engine.
//!
//! Spells race per byte over both directions; the first match binds the
//! connection to that spell's service, attaches the service analyzer with a
//! full replay of both directions, and the classification never changes —
//! a later violation only marks the binding as misbound. Until a binding
//! exists the whole connection prefix is retained for replay, up to a safety
//! cap after which the wizard gives up.

use super::{DpdEngine, DpdVerdict, VerdictBasis};
use crate::analyzers::{make_analyzer, Analyzer, AnalyzerEvent, SamplerParams};
use crate::signature::{MatchStatus, SpellSet, SpellSideState};
use crate::stream::{Chunk, Direction};
use std::sync::Arc;

#[derive(Clone)]
pub struct WizardConfig {
    pub spells: Arc<SpellSet>,
    /// Per-direction retention cap before binding; beyond it the wizard
    /// gives up and the connection stays unclassified.
    pub replay_cap: usize,
    pub sampler: Option<SamplerParams>,
}

impl Default for WizardConfig {
    fn default() -> Self {
        WizardConfig {
            spells: Arc::new(
                SpellSet::compile(
                    crate::signature::default_spells(),
                    crate::signature::DEFAULT_SKIP_SET.to_vec(),
                )
                .expect("default spells compile"),
            ),
            replay_cap: 1 << 20,
            sampler: None,
        }
    }
}

struct SpellConnState {
    to_server: SpellSideState,
    to_client: SpellSideState,
}

impl SpellConnState {
    fn side_mut(&mut self, direction: Direction) -> &mut SpellSideState {
        match direction {
            Direction::Originator => &mut self.to_server,
            Direction::Responder => &mut self.to_client,
        }
    }
}

struct Detection {
    retained: [Vec<u8>; 2],
    states: Vec<SpellConnState>,
}

struct Bound {
    service: String,
    analyzer: Box<dyn Analyzer>,
    decided_at: u64,
    misbound: bool,
}

pub struct WizardEngine {
    config: Arc<WizardConfig>,
    detection: Option<Detection>,
    bound: Option<Bound>,
    gave_up: bool,
    seen: [u64; 2],
}

impl WizardEngine {
    pub fn new(config: Arc<WizardConfig>) -> Self {
        let states = config
            .spells
            .spells()
            .iter()
            .map(|spell| SpellConnState {
                to_server: spell.side_state(Direction::Originator, config.spells.skip_set()),
                to_client: spell.side_state(Direction::Responder, config.spells.skip_set()),
            })
            .collect();
        WizardEngine {
            config,
            detection: Some(Detection {
                retained: [Vec::new(), Vec::new()],
                states,
            }),
            bound: None,
            gave_up: false,
            seen: [0; 2],
        }
    }

    pub fn bound_service(&self) -> Option<&str> {
        self.bound.as_ref().map(|b| b.service.as_str())
    }

    pub fn gave_up(&self) -> bool {
        self.gave_up
    }

    fn total_seen(&self) -> u64 {
        self.seen[0] + self.seen[1]
    }
}

impl DpdEngine for WizardEngine {
    fn on_chunk(&mut self, chunk: &Chunk) -> Vec<AnalyzerEvent> {
        let dir = chunk.direction;
        let payload = &chunk.payload;
        let mut out = Vec::new();
        let entry_total = self.total_seen();
        self.seen[dir.index()] += payload.len() as u64;

        if let Some(bound) = &mut self.bound {
            bound.analyzer.on_data(dir, payload, &mut out);
            if bound.analyzer.violated() {
                bound.misbound = true;
            }
            return out;
        }
        if self.gave_up {
            return out;
        }

        let detection = self.detection.as_mut().expect("detecting until bound");
        detection.retained[dir.index()].extend_from_slice(payload);
        if detection.retained[dir.index()].len() > self.config.replay_cap {
            self.detection = None;
            self.gave_up = true;
            return out;
        }

        let spells = self.config.spells.spells();
        for (i, &byte) in payload.iter().enumerate() {
            let mut winner: Option<usize> = None;
            for (spell_idx, state) in detection.states.iter_mut().enumerate() {
                let side = state.side_mut(dir);
                if side.status() == MatchStatus::Pending {
                    side.feed(&[byte]);
                }
                if winner.is_none() && side.status() == MatchStatus::Matched {
                    winner = Some(spell_idx);
                }
            }
            // Bind on the first matching spell in configured order; full
            // replay covers everything retained so far, current chunk
            // included, so the analyzer's view equals an attach at offset 0.
            if let Some(spell_idx) = winner {
                let service = spells[spell_idx].spec().service.clone();
                let Some(mut analyzer) = make_analyzer(&service, self.config.sampler) else {
                    continue;
                };
                analyzer.on_data(
                    Direction::Originator,
                    &detection.retained[Direction::Originator.index()],
                    &mut out,
                );
                analyzer.on_data(
                    Direction::Responder,
                    &detection.retained[Direction::Responder.index()],
                    &mut out,
                );
                let misbound = analyzer.violated();
                self.bound = Some(Bound {
                    service,
                    analyzer,
                    decided_at: entry_total + (i as u64) + 1,
                    misbound,
                });
                self.detection = None;
                return out;
            }
        }
        out
    }

    fn verdict(&self) -> DpdVerdict {
        match &self.bound {
            Some(bound) => DpdVerdict::decided(
                &bound.service,
                bound.decided_at,
                VerdictBasis::Signature,
                bound.misbound,
            ),
            None => DpdVerdict::none(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyzers::EventKind;

    fn engine() -> WizardEngine {
        WizardEngine::new(Arc::new(WizardConfig::default()))
    }

    fn orig(bytes: &[u8]) -> Chunk {
        Chunk::new(Direction::Originator, bytes.to_vec()).unwrap()
    }

    fn resp(bytes: &[u8]) -> Chunk {
        Chunk::new(Direction::Responder, bytes.to_vec()).unwrap()
    }

    #[test]
    fn stuffed_request_binds_http_through_the_skip_set() {
        let mut e = engine();
        let mut stuffed = b"\r\n".repeat(512);
        stuffed.extend_from_slice(b"GET /x HTTP/1.1\r\nHost: a\r\n\r\n");
        let events = e.on_chunk(&orig(&stuffed));
        assert_eq!(e.bound_service(), Some("http"));
        // The replay feeds the stuffing to the analyzer as empty request lines.
        let weirds = events.iter().filter(|e| e.kind == EventKind::Weird).count();
        assert_eq!(weirds, 512);
        assert!(events.iter().any(|e| e.kind == EventKind::HttpRequest));
    }

    #[test]
    fn unknown_method_binds_http_via_the_reply() {
        let mut e = engine();
        e.on_chunk(&orig(b"UNKNOWNMETHOD / HTTP/1.1\r\nConnection: keep-alive\r\n\r\n"));
        assert_eq!(e.bound_service(), None);
        let events = e.on_chunk(&resp(b"HTTP/1.1 405 Method Not Allowed\r\nContent-Length: 0\r\n\r\n"));
        assert_eq!(e.bound_service(), Some("http"));
        assert!(events
            .iter()
            .any(|e| e.kind == EventKind::HttpRequest
                && e.detail_str("method") == Some("UNKNOWNMETHOD")));
        let v = e.verdict();
        assert!(v.is_protocol("http"));
        assert!(!v.misbound);
    }

    #[test]
    fn helo_binds_smtp_and_never_unbinds() {
        let mut e = engine();
        let events = e.on_chunk(&orig(b"HELO / HTTP/1.1\r\nConnection: keep-alive\r\n\r\n"));
        assert_eq!(e.bound_service(), Some("smtp"));
        assert_eq!(e.verdict().decided_at, 4);
        assert!(events.iter().any(|e| e.kind == EventKind::SmtpCommand));

        let events = e.on_chunk(&resp(b"HTTP/1.1 405 Method Not Allowed\r\nContent-Length: 0\r\n\r\n"));
        assert!(events.iter().any(|e| e.kind == EventKind::Violation));
        assert_eq!(e.bound_service(), Some("smtp"));
        let v = e.verdict();
        assert!(v.is_protocol("smtp"));
        assert!(v.misbound);

        // The follow-up flows to the dead smtp analyzer: no events.
        let events = e.on_chunk(&orig(b"GET /secret HTTP/1.1\r\nHost: a\r\n\r\n"));
        assert!(events.is_empty());
        assert_eq!(e.bound_service(), Some("smtp"));
    }

    #[test]
    fn retention_cap_makes_the_wizard_give_up() {
        let config = WizardConfig {
            replay_cap: 4096,
            ..WizardConfig::default()
        };
        let mut e = WizardEngine::new(Arc::new(config));
        // Non-matching, non-skip bytes: "@" fails every to_server pattern,
        // but to_client stays pending so retention keeps growing.
        let junk = vec![b'@'; 5000];
        e.on_chunk(&orig(&junk));
        assert!(e.gave_up());
        assert_eq!(e.verdict(), DpdVerdict::none());
        // Even a clean request cannot bind afterwards.
        e.on_chunk(&orig(b"GET / HTTP/1.1\r\n\r\n"));
        assert_eq!(e.bound_service(), None);
    }
}
