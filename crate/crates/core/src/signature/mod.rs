//! Streaming protocol-detection signatures.
//!
//! Two flavors share one acceptor machinery: anchored patterns in a
//! restricted regex syntax with optional bidirectional linkage, and spells —
//! sets of literal-with-glob patterns behind a leading skip set. Acceptors
//! use prefix-match semantics: `Matched` as soon as some prefix of the
//! stream is in the pattern language, `Failed` once no continuation can
//! match. Both states absorb; feeding after absorption is a no-op. Final
//! status is independent of how the input is split across feeds.

mod nfa;
mod parse;

pub use parse::PatternError;

use crate::stream::Direction;
use nfa::{Mask, Nfa};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchStatus {
    Pending,
    Matched,
    Failed,
}

/// An anchored detection pattern with its direction and linkage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub name: String,
    pub pattern: String,
    pub direction: Direction,
    /// Name of a partner pattern that must also have matched on the
    /// opposite direction before this one may enable an analyzer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires_reverse: Option<String>,
    /// Protocol whose analyzer this pattern attaches on an enable decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enable_target: Option<String>,
}

/// A wizard spell: per-direction pattern sets for one service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpellSpec {
    pub service: String,
    pub to_server: Vec<String>,
    pub to_client: Vec<String>,
}

/// Leading bytes the wizard discards before spell matching starts.
pub const DEFAULT_SKIP_SET: &[u8] = b" \t\r\n";

#[derive(Debug, Error)]
pub enum SignatureSetError {
    #[error("pattern {name}: {source}")]
    Pattern {
        name: String,
        source: PatternError,
    },
    #[error("duplicate pattern name {0}")]
    DuplicateName(String),
    #[error("pattern {name}: requires-reverse target {target} not in set")]
    UnknownReverse { name: String, target: String },
    #[error("spell {service}: {side} pattern set must be non-empty")]
    EmptySpellSide { service: String, side: String },
    #[error("spell {service}: pattern {pattern:?}: {source}")]
    SpellPattern {
        service: String,
        pattern: String,
        source: PatternError,
    },
}

/// A compiled, immutable, shareable pattern.
#[derive(Clone)]
pub struct CompiledPattern {
    spec: PatternSpec,
    nfa: Arc<Nfa>,
}

impl CompiledPattern {
    pub fn compile(spec: PatternSpec) -> Result<Self, PatternError> {
        let ast = parse::parse_pattern(&spec.pattern)?;
        Ok(CompiledPattern {
            spec,
            nfa: Arc::new(Nfa::from_ast(&ast)),
        })
    }

    pub fn spec(&self) -> &PatternSpec {
        &self.spec
    }

    pub fn acceptor(&self) -> AcceptorState {
        AcceptorState::new(self.nfa.clone())
    }

    pub(crate) fn nfa(&self) -> &Arc<Nfa> {
        &self.nfa
    }
}

/// Incremental matcher state for one compiled automaton.
#[derive(Clone)]
pub struct AcceptorState {
    nfa: Arc<Nfa>,
    mask: Mask,
    status: MatchStatus,
    bytes_consumed: u64,
}

impl AcceptorState {
    fn new(nfa: Arc<Nfa>) -> Self {
        let mask = nfa.initial();
        let status = if nfa.accepts(&mask) {
            MatchStatus::Matched
        } else if nfa.is_dead(&mask) {
            MatchStatus::Failed
        } else {
            MatchStatus::Pending
        };
        AcceptorState {
            nfa,
            mask,
            status,
            bytes_consumed: 0,
        }
    }

    /// Advances over `bytes`. Returns the (possibly absorbed) status.
    pub fn feed(&mut self, bytes: &[u8]) -> MatchStatus {
        if self.status != MatchStatus::Pending {
            return self.status;
        }
        for &b in bytes {
            self.mask = self.nfa.step(&self.mask, b);
            self.bytes_consumed += 1;
            if self.nfa.accepts(&self.mask) {
                self.status = MatchStatus::Matched;
                break;
            }
            if self.nfa.is_dead(&self.mask) {
                self.status = MatchStatus::Failed;
                break;
            }
        }
        self.status
    }

    pub fn status(&self) -> MatchStatus {
        self.status
    }

    /// Bytes processed while the acceptor was still live; at absorption this
    /// is the offset of the deciding byte.
    pub fn bytes_consumed(&self) -> u64 {
        self.bytes_consumed
    }
}

/// True when the pattern may flip its enable decision: its own direction
/// matched and, when linked, the reverse pattern matched too.
pub fn evaluate_bidirectional(
    spec: &PatternSpec,
    own: MatchStatus,
    reverse: Option<MatchStatus>,
) -> bool {
    debug_assert!(spec.enable_target.is_some());
    own == MatchStatus::Matched
        && (spec.requires_reverse.is_none() || reverse == Some(MatchStatus::Matched))
}

/// A named collection of compiled patterns with resolved linkage.
pub struct SignatureSet {
    patterns: Vec<CompiledPattern>,
    index: BTreeMap<String, usize>,
}

impl SignatureSet {
    pub fn compile(specs: Vec<PatternSpec>) -> Result<Self, SignatureSetError> {
        let mut patterns = Vec::with_capacity(specs.len());
        let mut index = BTreeMap::new();
        for spec in specs {
            if index.contains_key(&spec.name) {
                return Err(SignatureSetError::DuplicateName(spec.name));
            }
            let name = spec.name.clone();
            let compiled = CompiledPattern::compile(spec)
                .map_err(|source| SignatureSetError::Pattern {
                    name: name.clone(),
                    source,
                })?;
            index.insert(name, patterns.len());
            patterns.push(compiled);
        }
        for pattern in &patterns {
            if let Some(target) = &pattern.spec.requires_reverse {
                if !index.contains_key(target) {
                    return Err(SignatureSetError::UnknownReverse {
                        name: pattern.spec.name.clone(),
                        target: target.clone(),
                    });
                }
            }
        }
        Ok(SignatureSet { patterns, index })
    }

    pub fn patterns(&self) -> &[CompiledPattern] {
        &self.patterns
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// A compiled spell: one acceptor per pattern, per side.
#[derive(Clone)]
pub struct CompiledSpell {
    spec: SpellSpec,
    to_server: Vec<Arc<Nfa>>,
    to_client: Vec<Arc<Nfa>>,
}

impl CompiledSpell {
    pub fn compile(spec: SpellSpec) -> Result<Self, SignatureSetError> {
        let compile_side = |side: &str, pats: &[String]| -> Result<Vec<Arc<Nfa>>, SignatureSetError> {
            if pats.is_empty() {
                return Err(SignatureSetError::EmptySpellSide {
                    service: spec.service.clone(),
                    side: side.to_string(),
                });
            }
            pats.iter()
                .map(|p| {
                    parse::parse_glob(p)
                        .map(|ast| Arc::new(Nfa::from_ast(&ast)))
                        .map_err(|source| SignatureSetError::SpellPattern {
                            service: spec.service.clone(),
                            pattern: p.clone(),
                            source,
                        })
                })
                .collect()
        };
        let to_server = compile_side("to_server", &spec.to_server)?;
        let to_client = compile_side("to_client", &spec.to_client)?;
        Ok(CompiledSpell {
            spec,
            to_server,
            to_client,
        })
    }

    pub fn spec(&self) -> &SpellSpec {
        &self.spec
    }

    /// Fresh matcher state for one direction of this spell. Originator
    /// bytes run against `to_server`, responder bytes against `to_client`.
    pub fn side_state(&self, direction: Direction, skip_set: &[u8]) -> SpellSideState {
        let nfas = match direction {
            Direction::Originator => &self.to_server,
            Direction::Responder => &self.to_client,
        };
        SpellSideState::new(nfas, skip_set)
    }
}

/// Matcher state for one spell side: leading skip-set bytes are discarded,
/// then every pattern races; `Matched` if any pattern matches, `Failed` once
/// none can.
pub struct SpellSideState {
    acceptors: Vec<AcceptorState>,
    skip: [bool; 256],
    skipping: bool,
    status: MatchStatus,
    bytes_consumed: u64,
}

impl SpellSideState {
    fn new(nfas: &[Arc<Nfa>], skip_set: &[u8]) -> Self {
        let mut skip = [false; 256];
        for &b in skip_set {
            skip[b as usize] = true;
        }
        let acceptors: Vec<AcceptorState> =
            nfas.iter().map(|n| AcceptorState::new(n.clone())).collect();
        let status = aggregate(&acceptors);
        SpellSideState {
            acceptors,
            skip,
            skipping: true,
            status,
            bytes_consumed: 0,
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) -> MatchStatus {
        if self.status != MatchStatus::Pending {
            return self.status;
        }
        for &b in bytes {
            self.bytes_consumed += 1;
            if self.skipping {
                if self.skip[b as usize] {
                    continue;
                }
                self.skipping = false;
            }
            for acc in &mut self.acceptors {
                acc.feed(&[b]);
            }
            self.status = aggregate(&self.acceptors);
            if self.status != MatchStatus::Pending {
                break;
            }
        }
        self.status
    }

    pub fn status(&self) -> MatchStatus {
        self.status
    }

    /// Bytes processed, including discarded skip-set bytes.
    pub fn bytes_consumed(&self) -> u64 {
        self.bytes_consumed
    }
}

fn aggregate(acceptors: &[AcceptorState]) -> MatchStatus {
    if acceptors
        .iter()
        .any(|a| a.status() == MatchStatus::Matched)
    {
        MatchStatus::Matched
    } else if acceptors.iter().all(|a| a.status() == MatchStatus::Failed) {
        MatchStatus::Failed
    } else {
        MatchStatus::Pending
    }
}

/// Ordered spell collection plus the engine-wide skip set.
pub struct SpellSet {
    spells: Vec<CompiledSpell>,
    skip_set: Vec<u8>,
}

impl SpellSet {
    pub fn compile(specs: Vec<SpellSpec>, skip_set: Vec<u8>) -> Result<Self, SignatureSetError> {
        let spells = specs
            .into_iter()
            .map(CompiledSpell::compile)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SpellSet { spells, skip_set })
    }

    pub fn spells(&self) -> &[CompiledSpell] {
        &self.spells
    }

    pub fn skip_set(&self) -> &[u8] {
        &self.skip_set
    }
}

/// The shipped HTTP/SMTP pattern pairs. The HTTP analyzer is enabled by the
/// server pattern with a reverse requirement on the client pattern; the SMTP
/// analyzer is enabled by the client pattern alone.
pub fn default_signatures() -> Vec<PatternSpec> {
    vec![
        PatternSpec {
            name: "dpd_http_client".to_string(),
            pattern: r"^[[:space:]]*(OPTIONS|GET|HEAD|POST|PUT|DELETE|TRACE|CONNECT)[[:space:]]*"
                .to_string(),
            direction: Direction::Originator,
            requires_reverse: None,
            enable_target: None,
        },
        PatternSpec {
            name: "dpd_http_server".to_string(),
            pattern: r"^HTTP\/[0-9]".to_string(),
            direction: Direction::Responder,
            requires_reverse: Some("dpd_http_client".to_string()),
            enable_target: Some("http".to_string()),
        },
        PatternSpec {
            name: "dpd_smtp_client".to_string(),
            pattern: r"^(HELO|EHLO)".to_string(),
            direction: Direction::Originator,
            requires_reverse: None,
            enable_target: Some("smtp".to_string()),
        },
        PatternSpec {
            name: "dpd_smtp_server".to_string(),
            pattern: r"^220".to_string(),
            direction: Direction::Responder,
            requires_reverse: Some("dpd_smtp_client".to_string()),
            enable_target: Some("smtp".to_string()),
        },
    ]
}

/// The shipped wizard spells, in match-priority order.
pub fn default_spells() -> Vec<SpellSpec> {
    let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        SpellSpec {
            service: "http".to_string(),
            to_server: strs(&[
                "OPTIONS", "GET", "HEAD", "POST", "PUT", "DELETE", "TRACE", "CONNECT",
            ]),
            to_client: strs(&["HTTP/"]),
        },
        SpellSpec {
            service: "smtp".to_string(),
            to_server: strs(&["HELO", "EHLO"]),
            to_client: strs(&["220*SMTP", "220*MAIL"]),
        },
    ]
}
