//! Protocol-detection engines sharing one chunk-driven interface.
//!
//! All three engines consume connection chunks and produce analyzer events
//! plus a protocol verdict: `TreeEngine` (fixed-buffer analyzer tree),
//! `WizardEngine` (spell acceptors with an irreversible classification) and
//! `RingEngine` (sliding window with a decoupled detection timeout).

mod ring;
mod tree;
mod wizard;

pub use ring::{RingEngine, RingEngineConfig};
pub use tree::{AnalyzerTree, PiaBuffer, TreeEngine, TreeEngineConfig};
pub use wizard::{WizardConfig, WizardEngine};

use crate::analyzers::AnalyzerEvent;
use crate::signature::SignatureSet;
use crate::stream::{Chunk, Direction};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignatureMode {
    Bidirectional,
    Unidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictBasis {
    Port,
    Signature,
    None,
}

/// Snapshot of an engine's protocol decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpdVerdict {
    pub protocol: Option<String>,
    pub decided_at: u64,
    pub basis: VerdictBasis,
    /// A protocol was assigned, its analyzer violated, and it was never
    /// replaced (irreversible bindings only).
    pub misbound: bool,
}

impl DpdVerdict {
    pub fn none() -> Self {
        DpdVerdict {
            protocol: None,
            decided_at: 0,
            basis: VerdictBasis::None,
            misbound: false,
        }
    }

    pub fn decided(protocol: &str, decided_at: u64, basis: VerdictBasis, misbound: bool) -> Self {
        debug_assert!(basis != VerdictBasis::None);
        DpdVerdict {
            protocol: Some(protocol.to_string()),
            decided_at,
            basis,
            misbound,
        }
    }

    pub fn is_protocol(&self, name: &str) -> bool {
        self.protocol.as_deref() == Some(name)
    }
}

pub trait DpdEngine {
    fn on_chunk(&mut self, chunk: &Chunk) -> Vec<AnalyzerEvent>;
    fn on_close(&mut self, _direction: Direction) {}
    fn verdict(&self) -> DpdVerdict;
}

/// One resolved "attach protocol P" rule derived from the signature set and
/// mode. Unidirectional mode splits every linked pair into two standalone
/// enabling patterns; `effective` is the pattern spec with the linkage this
/// rule actually applies.
#[derive(Debug, Clone)]
pub(crate) struct EnableRule {
    pub pattern: usize,
    pub requires: Option<usize>,
    pub protocol: String,
    pub effective: crate::signature::PatternSpec,
}

pub(crate) fn enable_rules(set: &SignatureSet, mode: SignatureMode) -> Vec<EnableRule> {
    let mut rules: Vec<EnableRule> = Vec::new();
    let push = |rules: &mut Vec<EnableRule>, rule: EnableRule| {
        if !rules
            .iter()
            .any(|r| r.pattern == rule.pattern && r.protocol == rule.protocol)
        {
            rules.push(rule);
        }
    };
    for (idx, pattern) in set.patterns().iter().enumerate() {
        let spec = pattern.spec();
        let Some(protocol) = &spec.enable_target else {
            continue;
        };
        match mode {
            SignatureMode::Bidirectional => {
                let requires = spec
                    .requires_reverse
                    .as_ref()
                    .map(|name| set.index_of(name).expect("validated at compile"));
                push(
                    &mut rules,
                    EnableRule {
                        pattern: idx,
                        requires,
                        protocol: protocol.clone(),
                        effective: spec.clone(),
                    },
                );
            }
            SignatureMode::Unidirectional => {
                let mut own = spec.clone();
                own.requires_reverse = None;
                push(
                    &mut rules,
                    EnableRule {
                        pattern: idx,
                        requires: None,
                        protocol: protocol.clone(),
                        effective: own,
                    },
                );
                if let Some(reverse) = &spec.requires_reverse {
                    let reverse_idx = set.index_of(reverse).expect("validated at compile");
                    let mut derived = set.patterns()[reverse_idx].spec().clone();
                    derived.requires_reverse = None;
                    derived.enable_target = Some(protocol.clone());
                    push(
                        &mut rules,
                        EnableRule {
                            pattern: reverse_idx,
                            requires: None,
                            protocol: protocol.clone(),
                            effective: derived,
                        },
                    );
                }
            }
        }
    }
    rules
}
