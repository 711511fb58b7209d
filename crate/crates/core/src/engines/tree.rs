//! Fixed-buffer analyzer-tree engine.
//!
//! The initial tree is built from well-known ports; a protocol
//! identification buffer (PIA) stores the first bytes of each direction and
//! drives the detection patterns over exactly those bytes. An enable
//! decision attaches the protocol's analyzer and replays the buffered bytes
//! to it; a violating analyzer is removed and never re-attached. Once a
//! direction's buffer is full that direction stops contributing matches.

use super::{enable_rules, DpdEngine, DpdVerdict, EnableRule, SignatureMode, VerdictBasis};
use crate::analyzers::{make_analyzer, Analyzer, AnalyzerEvent, ConnSizeAnalyzer, SamplerParams};
use crate::signature::{evaluate_bidirectional, AcceptorState, SignatureSet};
use crate::stream::{Chunk, Direction};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::Arc;

#[derive(Clone)]
pub struct TreeEngineConfig {
    pub pia_buffer_size: usize,
    pub port_map: BTreeMap<u16, String>,
    pub signature_mode: SignatureMode,
    pub signatures: Arc<SignatureSet>,
    pub sampler: Option<SamplerParams>,
}

impl Default for TreeEngineConfig {
    fn default() -> Self {
        let mut port_map = BTreeMap::new();
        port_map.insert(80, "http".to_string());
        port_map.insert(25, "smtp".to_string());
        TreeEngineConfig {
            pia_buffer_size: 1024,
            port_map,
            signature_mode: SignatureMode::Bidirectional,
            signatures: Arc::new(
                SignatureSet::compile(crate::signature::default_signatures())
                    .expect("default signature set compiles"),
            ),
            sampler: None,
        }
    }
}

/// Per-direction capture of the connection start. `full` latches once
/// capacity is reached and never reverts.
pub struct PiaBuffer {
    capacity: usize,
    bufs: [Vec<u8>; 2],
}

impl PiaBuffer {
    fn new(capacity: usize) -> Self {
        PiaBuffer {
            capacity,
            bufs: [Vec::new(), Vec::new()],
        }
    }

    pub fn is_full(&self, direction: Direction) -> bool {
        self.bufs[direction.index()].len() >= self.capacity
    }

    pub fn buffered(&self, direction: Direction) -> &[u8] {
        &self.bufs[direction.index()]
    }

    /// Appends up to capacity; returns how many payload bytes were stored.
    fn append(&mut self, direction: Direction, payload: &[u8]) -> usize {
        let buf = &mut self.bufs[direction.index()];
        let room = self.capacity.saturating_sub(buf.len());
        let take = room.min(payload.len());
        buf.extend_from_slice(&payload[..take]);
        take
    }
}

struct ProtocolNode {
    protocol: String,
    analyzer: Box<dyn Analyzer>,
    attached_at: u64,
    basis: VerdictBasis,
}

/// The per-connection analyzer tree: connection statistics and the PIA are
/// present from the start, protocol analyzers join by port or enable
/// decision.
pub struct AnalyzerTree {
    conn_size: ConnSizeAnalyzer,
    nodes: Vec<ProtocolNode>,
    removed: BTreeSet<String>,
}

impl AnalyzerTree {
    pub fn attached_protocols(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.protocol.as_str()).collect()
    }

    pub fn removed_protocols(&self) -> &BTreeSet<String> {
        &self.removed
    }

    pub fn conn_size(&self) -> &ConnSizeAnalyzer {
        &self.conn_size
    }
}

pub struct TreeEngine {
    config: Arc<TreeEngineConfig>,
    rules: Vec<EnableRule>,
    tree: AnalyzerTree,
    pia: PiaBuffer,
    acceptors: Vec<AcceptorState>,
}

impl TreeEngine {
    pub fn new(config: Arc<TreeEngineConfig>, dst_port: u16) -> Self {
        let rules = enable_rules(&config.signatures, config.signature_mode);
        let acceptors = config
            .signatures
            .patterns()
            .iter()
            .map(|p| p.acceptor())
            .collect();
        let mut nodes = Vec::new();
        if let Some(protocol) = config.port_map.get(&dst_port) {
            if let Some(analyzer) = make_analyzer(protocol, config.sampler) {
                nodes.push(ProtocolNode {
                    protocol: protocol.clone(),
                    analyzer,
                    attached_at: 0,
                    basis: VerdictBasis::Port,
                });
            }
        }
        TreeEngine {
            pia: PiaBuffer::new(config.pia_buffer_size),
            config,
            rules,
            tree: AnalyzerTree {
                conn_size: ConnSizeAnalyzer::default(),
                nodes,
                removed: BTreeSet::new(),
            },
            acceptors,
        }
    }

    pub fn tree(&self) -> &AnalyzerTree {
        &self.tree
    }

    pub fn pia(&self) -> &PiaBuffer {
        &self.pia
    }
}

impl DpdEngine for TreeEngine {
    fn on_chunk(&mut self, chunk: &Chunk) -> Vec<AnalyzerEvent> {
        let dir = chunk.direction;
        let payload = &chunk.payload;
        let mut out = Vec::new();

        self.tree.conn_size.feed(dir, payload);

        // Already-attached analyzers see every chunk.
        for node in &mut self.tree.nodes {
            node.analyzer.on_data(dir, payload, &mut out);
        }

        // Detection patterns advance only over buffered bytes.
        let buffered = self.pia.append(dir, payload);
        if buffered > 0 {
            let newly = &payload[..buffered];
            for (idx, pattern) in self.config.signatures.patterns().iter().enumerate() {
                if pattern.spec().direction == dir {
                    self.acceptors[idx].feed(newly);
                }
            }
        }

        // Enable decisions: attach and replay the buffers from offset 0,
        // then hand over the part of the current chunk the buffer dropped.
        for rule in &self.rules {
            if self.tree.removed.contains(&rule.protocol)
                || self.tree.nodes.iter().any(|n| n.protocol == rule.protocol)
            {
                continue;
            }
            let own = self.acceptors[rule.pattern].status();
            let reverse = rule.requires.map(|i| self.acceptors[i].status());
            if !evaluate_bidirectional(&rule.effective, own, reverse) {
                continue;
            }
            let Some(mut analyzer) = make_analyzer(&rule.protocol, self.config.sampler) else {
                continue;
            };
            analyzer.on_data(
                Direction::Originator,
                self.pia.buffered(Direction::Originator),
                &mut out,
            );
            analyzer.on_data(
                Direction::Responder,
                self.pia.buffered(Direction::Responder),
                &mut out,
            );
            if buffered < payload.len() {
                analyzer.on_data(dir, &payload[buffered..], &mut out);
            }
            // Decision offset: bytes each contributing pattern needed, which
            // is independent of how the streams were chunked.
            let mut attached_at = self.acceptors[rule.pattern].bytes_consumed();
            if let Some(required) = rule.requires {
                attached_at += self.acceptors[required].bytes_consumed();
            }
            self.tree.nodes.push(ProtocolNode {
                protocol: rule.protocol.clone(),
                analyzer,
                attached_at,
                basis: VerdictBasis::Signature,
            });
        }

        // A violating analyzer leaves the tree for good.
        let removed = &mut self.tree.removed;
        self.tree.nodes.retain(|node| {
            if node.analyzer.violated() {
                removed.insert(node.protocol.clone());
                false
            } else {
                true
            }
        });

        out
    }

    fn verdict(&self) -> DpdVerdict {
        match self.tree.nodes.first() {
            Some(node) => DpdVerdict::decided(&node.protocol, node.attached_at, node.basis, false),
            None => DpdVerdict::none(),
        }
    }
}
