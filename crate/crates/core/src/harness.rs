//! Evaluation harness: drives attack scripts through an engine and a server
//! profile, classifies outcomes, and assembles the vulnerability matrix.
//!
//! A cell's classification rests on the script's marker request (its last
//! request, `/secret` for follow-up attacks): the attack evaded when the
//! server served it but no HTTP analyzer reported it under an http verdict.

use crate::analyzers::{AnalyzerEvent, EventKind, SamplerParams};
use crate::attacks::{
    gen_baseline, gen_crlf_stuffing, gen_helo_method, gen_unknown_method, AttackError, AttackKind,
    AttackScript, PrefixUnit, FOLLOW_UP_URI,
};
use crate::engines::{
    DpdEngine, DpdVerdict, RingEngine, RingEngineConfig, SignatureMode, TreeEngine,
    TreeEngineConfig, WizardConfig, WizardEngine,
};
use crate::server::{
    builtin_profiles, server_respond, AccessLogEntry, ConnectionAction, ServerError,
    ServerProfile, ServerRunState,
};
use crate::signature::{
    default_signatures, default_spells, PatternSpec, SignatureSet, SignatureSetError, SpellSet,
    SpellSpec,
};
use crate::stream::{Chunk, Connection, Direction, FiveTuple, StreamConsumer, StreamError};
use crate::trace::TraceRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("signature set: {0}")]
    Signatures(#[from] SignatureSetError),
    #[error("no analyzer implementation for protocol {0:?}")]
    UnknownAnalyzer(String),
    #[error("invalid port {0:?} in port map")]
    InvalidPort(String),
    #[error("unknown prefix unit {0:?} (expected crlf|cr|lf|sp|tab)")]
    UnknownPrefixUnit(String),
    #[error("unknown skip-set byte name {0:?} (expected sp|tab|cr|lf)")]
    UnknownSkipByte(String),
    #[error("ring detection_timeout {timeout} must be >= window_size {window}")]
    RingTimeout { timeout: u64, window: usize },
    #[error("{field} must be >= 1")]
    ZeroSize { field: &'static str },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown engine {0:?} (expected tree|tree-uni|wizard|ring)")]
    UnknownEngine(String),
    #[error("unknown attack {0:?} (expected baseline|crlf|unknown|helo)")]
    UnknownAttack(String),
    #[error("unknown server profile {0:?}")]
    UnknownProfile(String),
    #[error("attack generation: {0}")]
    Attack(#[from] AttackError),
    #[error("stream: {0}")]
    Stream(#[from] StreamError),
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("cell {engine}/{attack}:{port}: {source}")]
    Cell {
        engine: String,
        attack: String,
        port: u16,
        #[source]
        source: Box<HarnessError>,
    },
}

// ---------------------------------------------------------------------------
// Declarative configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixAxes {
    pub engines: Vec<String>,
    pub attacks: Vec<String>,
    pub ports: Vec<u16>,
    pub profile: String,
}

impl Default for MatrixAxes {
    fn default() -> Self {
        MatrixAxes {
            engines: vec![
                "tree".to_string(),
                "tree-uni".to_string(),
                "wizard".to_string(),
                "ring".to_string(),
            ],
            attacks: vec![
                "crlf".to_string(),
                "unknown".to_string(),
                "helo".to_string(),
            ],
            ports: vec![4242, 80],
            profile: "nginx".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub pia_buffer_size: usize,
    pub port_map: BTreeMap<String, String>,
}

impl Default for TreeParams {
    fn default() -> Self {
        let mut port_map = BTreeMap::new();
        port_map.insert("80".to_string(), "http".to_string());
        port_map.insert("25".to_string(), "smtp".to_string());
        TreeParams {
            pia_buffer_size: 1024,
            port_map,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingParams {
    pub window_size: usize,
    pub detection_timeout: Option<u64>,
    pub restart_on_violation: bool,
}

impl Default for RingParams {
    fn default() -> Self {
        RingParams {
            window_size: 4096,
            detection_timeout: None,
            restart_on_violation: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WizardParams {
    pub replay_cap: usize,
    pub skip_set: Vec<String>,
}

impl Default for WizardParams {
    fn default() -> Self {
        WizardParams {
            replay_cap: 1 << 20,
            skip_set: vec![
                "sp".to_string(),
                "tab".to_string(),
                "cr".to_string(),
                "lf".to_string(),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerToggle {
    pub enabled: bool,
    pub emit_first: u64,
    pub sample_every: u64,
}

impl Default for SamplerToggle {
    fn default() -> Self {
        SamplerToggle {
            enabled: false,
            emit_first: 5,
            sample_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportParams {
    pub dos_alarm_threshold: u64,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            dos_alarm_threshold: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrlfParams {
    pub repetitions: usize,
    pub prefix_unit: String,
    pub path: String,
}

impl Default for CrlfParams {
    fn default() -> Self {
        CrlfParams {
            repetitions: 512,
            prefix_unit: "crlf".to_string(),
            path: FOLLOW_UP_URI.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodAttackParams {
    pub follow_up: bool,
    pub method: Option<String>,
    pub path: String,
}

impl Default for MethodAttackParams {
    fn default() -> Self {
        MethodAttackParams {
            follow_up: true,
            method: None,
            path: "/".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub path: String,
}

impl Default for BaselineParams {
    fn default() -> Self {
        BaselineParams {
            path: "/".to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackDefaults {
    pub baseline: BaselineParams,
    pub crlf: CrlfParams,
    pub unknown: MethodAttackParams,
    pub helo: MethodAttackParams,
}

/// The single declarative configuration document (TOML on disk).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    pub matrix: MatrixAxes,
    pub tree: TreeParams,
    pub ring: RingParams,
    pub wizard: WizardParams,
    pub sampler: SamplerToggle,
    pub report: ReportParams,
    pub attack: AttackDefaults,
    /// Full replacement for the shipped signature set when present.
    pub signatures: Option<Vec<PatternSpec>>,
    /// Full replacement for the shipped spell set when present.
    pub spells: Option<Vec<SpellSpec>>,
    /// Additional or overriding server profiles.
    pub profiles: BTreeMap<String, ServerProfile>,
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_skip_byte(name: &str) -> Result<u8, ConfigError> {
    match name {
        "sp" => Ok(b' '),
        "tab" => Ok(b'\t'),
        "cr" => Ok(b'\r'),
        "lf" => Ok(b'\n'),
        other => Err(ConfigError::UnknownSkipByte(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Resolved environment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineChoice {
    Tree,
    TreeUni,
    Wizard,
    Ring,
}

impl EngineChoice {
    pub fn parse(name: &str) -> Option<EngineChoice> {
        match name {
            "tree" => Some(EngineChoice::Tree),
            "tree-uni" => Some(EngineChoice::TreeUni),
            "wizard" => Some(EngineChoice::Wizard),
            "ring" => Some(EngineChoice::Ring),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EngineChoice::Tree => "tree",
            EngineChoice::TreeUni => "tree-uni",
            EngineChoice::Wizard => "wizard",
            EngineChoice::Ring => "ring",
        }
    }

    pub const ALL: [EngineChoice; 4] = [
        EngineChoice::Tree,
        EngineChoice::TreeUni,
        EngineChoice::Wizard,
        EngineChoice::Ring,
    ];
}

pub fn parse_attack_kind(name: &str) -> Option<AttackKind> {
    match name {
        "baseline" => Some(AttackKind::Baseline),
        "crlf" => Some(AttackKind::CrlfStuffing),
        "unknown" => Some(AttackKind::UnknownMethod),
        "helo" => Some(AttackKind::HeloMethod),
        _ => None,
    }
}

/// Fully resolved attack parameters for one cell.
#[derive(Debug, Clone)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub repetitions: usize,
    pub unit: PrefixUnit,
    pub follow_up: bool,
    pub path: String,
    pub method: Option<String>,
}

impl AttackSpec {
    pub fn generate(&self) -> Result<AttackScript, AttackError> {
        match self.kind {
            AttackKind::Baseline => gen_baseline(&self.path),
            AttackKind::CrlfStuffing => gen_crlf_stuffing(self.repetitions, &self.unit, &self.path),
            AttackKind::UnknownMethod => {
                gen_unknown_method(self.follow_up, &self.path, self.method.as_deref())
            }
            AttackKind::HeloMethod => gen_helo_method(self.follow_up, &self.path),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellSpec {
    pub engine: EngineChoice,
    pub attack: AttackSpec,
    pub dst_port: u16,
    pub profile: String,
}

/// The resolved lab environment: compiled signature/spell sets, engine
/// configurations, and server profiles.
pub struct Lab {
    config: LabConfig,
    tree_bi: Arc<TreeEngineConfig>,
    tree_uni: Arc<TreeEngineConfig>,
    wizard: Arc<WizardConfig>,
    ring: Arc<RingEngineConfig>,
    profiles: BTreeMap<String, ServerProfile>,
}

impl Lab {
    pub fn from_config(config: LabConfig) -> Result<Self, ConfigError> {
        let sampler: Option<SamplerParams> = config.sampler.enabled.then_some(SamplerParams {
            emit_first: config.sampler.emit_first,
            sample_every: config.sampler.sample_every,
        });

        let signature_specs = config.signatures.clone().unwrap_or_else(default_signatures);
        for spec in &signature_specs {
            if let Some(target) = &spec.enable_target {
                if !matches!(target.as_str(), "http" | "smtp") {
                    return Err(ConfigError::UnknownAnalyzer(target.clone()));
                }
            }
        }
        let signatures = Arc::new(SignatureSet::compile(signature_specs)?);

        let spell_specs = config.spells.clone().unwrap_or_else(default_spells);
        for spec in &spell_specs {
            if !matches!(spec.service.as_str(), "http" | "smtp") {
                return Err(ConfigError::UnknownAnalyzer(spec.service.clone()));
            }
        }
        let skip_set = config
            .wizard
            .skip_set
            .iter()
            .map(|name| parse_skip_byte(name))
            .collect::<Result<Vec<u8>, _>>()?;
        let spells = Arc::new(SpellSet::compile(spell_specs, skip_set)?);

        let mut port_map = BTreeMap::new();
        for (port, protocol) in &config.tree.port_map {
            let port: u16 = port
                .parse()
                .map_err(|_| ConfigError::InvalidPort(port.clone()))?;
            if !matches!(protocol.as_str(), "http" | "smtp") {
                return Err(ConfigError::UnknownAnalyzer(protocol.clone()));
            }
            port_map.insert(port, protocol.clone());
        }

        if config.tree.pia_buffer_size == 0 {
            return Err(ConfigError::ZeroSize {
                field: "tree.pia_buffer_size",
            });
        }
        if config.ring.window_size == 0 {
            return Err(ConfigError::ZeroSize {
                field: "ring.window_size",
            });
        }
        if let Some(timeout) = config.ring.detection_timeout {
            if timeout < config.ring.window_size as u64 {
                return Err(ConfigError::RingTimeout {
                    timeout,
                    window: config.ring.window_size,
                });
            }
        }

        let tree_bi = Arc::new(TreeEngineConfig {
            pia_buffer_size: config.tree.pia_buffer_size,
            port_map: port_map.clone(),
            signature_mode: SignatureMode::Bidirectional,
            signatures: signatures.clone(),
            sampler,
        });
        let tree_uni = Arc::new(TreeEngineConfig {
            pia_buffer_size: config.tree.pia_buffer_size,
            port_map,
            signature_mode: SignatureMode::Unidirectional,
            signatures: signatures.clone(),
            sampler,
        });
        let wizard = Arc::new(WizardConfig {
            spells,
            replay_cap: config.wizard.replay_cap,
            sampler,
        });
        let ring = Arc::new(RingEngineConfig {
            window_size: config.ring.window_size,
            detection_timeout: config.ring.detection_timeout,
            restart_on_violation: config.ring.restart_on_violation,
            signatures,
            sampler,
        });

        let mut profiles = builtin_profiles();
        for (name, profile) in &config.profiles {
            let mut profile = profile.clone();
            profile.name = name.clone();
            profiles.insert(name.clone(), profile);
        }

        Ok(Lab {
            config,
            tree_bi,
            tree_uni,
            wizard,
            ring,
            profiles,
        })
    }

    pub fn default_lab() -> Self {
        Lab::from_config(LabConfig::default()).expect("default config resolves")
    }

    pub fn config(&self) -> &LabConfig {
        &self.config
    }

    pub fn dos_alarm_threshold(&self) -> u64 {
        self.config.report.dos_alarm_threshold
    }

    pub fn build_engine(&self, choice: EngineChoice, dst_port: u16) -> Box<dyn DpdEngine> {
        match choice {
            EngineChoice::Tree => Box::new(TreeEngine::new(self.tree_bi.clone(), dst_port)),
            EngineChoice::TreeUni => Box::new(TreeEngine::new(self.tree_uni.clone(), dst_port)),
            EngineChoice::Wizard => Box::new(WizardEngine::new(self.wizard.clone())),
            EngineChoice::Ring => Box::new(RingEngine::new(self.ring.clone())),
        }
    }

    pub fn profile(&self, name: &str) -> Result<&ServerProfile, HarnessError> {
        self.profiles
            .get(name)
            .ok_or_else(|| HarnessError::UnknownProfile(name.to_string()))
    }

    pub fn profiles(&self) -> &BTreeMap<String, ServerProfile> {
        &self.profiles
    }

    /// Config-default attack parameters for the given kind.
    pub fn attack_spec(&self, kind: AttackKind) -> Result<AttackSpec, HarnessError> {
        let a = &self.config.attack;
        Ok(match kind {
            AttackKind::Baseline => AttackSpec {
                kind,
                repetitions: 0,
                unit: PrefixUnit::Crlf,
                follow_up: false,
                path: a.baseline.path.clone(),
                method: None,
            },
            AttackKind::CrlfStuffing => AttackSpec {
                kind,
                repetitions: a.crlf.repetitions,
                unit: PrefixUnit::parse(&a.crlf.prefix_unit)
                    .ok_or_else(|| ConfigError::UnknownPrefixUnit(a.crlf.prefix_unit.clone()))?,
                follow_up: false,
                path: a.crlf.path.clone(),
                method: None,
            },
            AttackKind::UnknownMethod => AttackSpec {
                kind,
                repetitions: 0,
                unit: PrefixUnit::Crlf,
                follow_up: a.unknown.follow_up,
                path: a.unknown.path.clone(),
                method: a.unknown.method.clone(),
            },
            AttackKind::HeloMethod => AttackSpec {
                kind,
                repetitions: 0,
                unit: PrefixUnit::Crlf,
                follow_up: a.helo.follow_up,
                path: a.helo.path.clone(),
                method: None,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Cell execution and classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum OutcomeClass {
    Detected,
    Evaded,
    Misclassified { protocol: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(flatten)]
    pub class: OutcomeClass,
    /// Count of weird events over the whole run.
    pub dos_indicator: u64,
    pub follow_up_seen_by_engine: bool,
    pub follow_up_served: bool,
    pub verdict: DpdVerdict,
}

impl Outcome {
    /// Human-readable cell label; misclassifications that also hide a served
    /// marker request carry the `+Evaded` suffix.
    pub fn label(&self) -> String {
        match &self.class {
            OutcomeClass::Detected => "Detected".to_string(),
            OutcomeClass::Evaded => "Evaded".to_string(),
            OutcomeClass::Misclassified { protocol } => {
                let mut label = format!("Misclassified({protocol})");
                if self.follow_up_served && !self.follow_up_seen_by_engine {
                    label.push_str("+Evaded");
                }
                label
            }
        }
    }
}

/// Pure classification of one finished cell run.
pub fn classify(
    events: &[AnalyzerEvent],
    verdict: &DpdVerdict,
    access_log: &[AccessLogEntry],
    script: &AttackScript,
) -> Outcome {
    let marker = script.marker_uri();
    let follow_up_served = access_log
        .iter()
        .any(|e| e.uri == marker && e.status == 200);
    let follow_up_seen_by_engine = verdict.is_protocol("http")
        && events
            .iter()
            .any(|e| e.kind == EventKind::HttpRequest && e.detail_str("uri") == Some(marker));
    let dos_indicator = events.iter().filter(|e| e.kind == EventKind::Weird).count() as u64;

    let class = match verdict.protocol.as_deref() {
        Some(protocol) if protocol != "http" => OutcomeClass::Misclassified {
            protocol: protocol.to_string(),
        },
        _ => {
            if follow_up_seen_by_engine {
                OutcomeClass::Detected
            } else if follow_up_served {
                OutcomeClass::Evaded
            } else {
                // The marker request never reached the endpoint: no evasion
                // took place.
                OutcomeClass::Detected
            }
        }
    };
    Outcome {
        class,
        dos_indicator,
        follow_up_seen_by_engine,
        follow_up_served,
        verdict: verdict.clone(),
    }
}

/// Splits step payloads into delivery chunks; tests use randomized
/// segmenters to show outcome invariance.
pub trait Segmenter {
    fn segments(&mut self, payload: &[u8]) -> Vec<Vec<u8>>;
}

/// Delivers every payload as a single chunk.
pub struct WholeChunk;

impl Segmenter for WholeChunk {
    fn segments(&mut self, payload: &[u8]) -> Vec<Vec<u8>> {
        vec![payload.to_vec()]
    }
}

struct EngineDriver<'a> {
    engine: &'a mut dyn DpdEngine,
    events: &'a mut Vec<AnalyzerEvent>,
}

impl StreamConsumer for EngineDriver<'_> {
    fn on_data(&mut self, direction: Direction, payload: &[u8]) {
        let chunk = Chunk {
            direction,
            payload: payload.to_vec(),
        };
        self.events.extend(self.engine.on_chunk(&chunk));
    }

    fn on_close(&mut self, direction: Direction) {
        self.engine.on_close(direction);
    }
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub outcome: Outcome,
    pub events: Vec<AnalyzerEvent>,
    pub trace: Vec<TraceRecord>,
    pub access_log: Vec<AccessLogEntry>,
}

pub fn run_cell(lab: &Lab, spec: &CellSpec) -> Result<Outcome, HarnessError> {
    Ok(run_cell_detailed(lab, spec, &mut WholeChunk)?.outcome)
}

/// Runs one cell: script steps alternate client payload and server response,
/// honoring `await_response` and connection closure (which truncates the
/// remaining steps).
pub fn run_cell_detailed(
    lab: &Lab,
    spec: &CellSpec,
    segmenter: &mut dyn Segmenter,
) -> Result<CellRun, HarnessError> {
    let script = spec.attack.generate()?;
    let profile = lab.profile(&spec.profile)?;
    let tuple = FiveTuple::new("client", "server", 40000, spec.dst_port as u32)?;
    let mut conn = Connection::new(tuple);
    let mut engine = lab.build_engine(spec.engine, spec.dst_port);
    let mut server = ServerRunState::new();
    let mut events: Vec<AnalyzerEvent> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();
    let mut pending: VecDeque<Vec<u8>> = VecDeque::new();

    let deliver = |conn: &mut Connection,
                   engine: &mut Box<dyn DpdEngine>,
                   events: &mut Vec<AnalyzerEvent>,
                   trace: &mut Vec<TraceRecord>,
                   direction: Direction,
                   payload: Vec<u8>|
     -> Result<(), HarnessError> {
        if payload.is_empty() {
            return Ok(());
        }
        let chunk = Chunk::new(direction, payload)?;
        let mut driver = EngineDriver {
            engine: engine.as_mut(),
            events,
        };
        conn.deliver(&chunk, &mut driver)?;
        trace.push(TraceRecord::Data {
            direction,
            payload: chunk.payload,
        });
        Ok(())
    };

    for step in &script.steps {
        if server.closed {
            break;
        }
        for part in segmenter.segments(&step.payload) {
            deliver(
                &mut conn,
                &mut engine,
                &mut events,
                &mut trace,
                Direction::Originator,
                part,
            )?;
        }
        let reply = server_respond(profile, &mut server, &step.payload)?;
        let closing = reply.action == ConnectionAction::Closed;
        if !reply.bytes.is_empty() {
            pending.push_back(reply.bytes);
        }
        if step.await_response || closing {
            while let Some(bytes) = pending.pop_front() {
                for part in segmenter.segments(&bytes) {
                    deliver(
                        &mut conn,
                        &mut engine,
                        &mut events,
                        &mut trace,
                        Direction::Responder,
                        part,
                    )?;
                }
            }
        }
        if closing {
            break;
        }
    }
    while let Some(bytes) = pending.pop_front() {
        for part in segmenter.segments(&bytes) {
            deliver(
                &mut conn,
                &mut engine,
                &mut events,
                &mut trace,
                Direction::Responder,
                part,
            )?;
        }
    }

    for direction in [Direction::Originator, Direction::Responder] {
        let mut driver = EngineDriver {
            engine: engine.as_mut(),
            events: &mut events,
        };
        conn.close(direction, &mut driver);
        trace.push(TraceRecord::Close { direction });
    }

    let verdict = engine.verdict();
    let outcome = classify(&events, &verdict, &server.access_log, &script);
    Ok(CellRun {
        outcome,
        events,
        trace,
        access_log: server.access_log,
    })
}

/// Feeds recorded trace records through an engine under stream-contract
/// enforcement.
pub fn replay_records(
    engine: &mut dyn DpdEngine,
    dst_port: u16,
    records: &[TraceRecord],
) -> Result<Vec<AnalyzerEvent>, HarnessError> {
    let tuple = FiveTuple::new("client", "server", 40000, dst_port as u32)?;
    let mut conn = Connection::new(tuple);
    let mut events = Vec::new();
    for record in records {
        let mut driver = EngineDriver {
            engine,
            events: &mut events,
        };
        match record {
            TraceRecord::Data { direction, payload } => {
                let chunk = Chunk::new(*direction, payload.clone())?;
                conn.deliver(&chunk, &mut driver)?;
            }
            TraceRecord::Close { direction } => conn.close(*direction, &mut driver),
        }
    }
    Ok(events)
}

// ---------------------------------------------------------------------------
// Matrix assembly and export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixMetadata {
    pub config_digest: String,
    pub timestamp: String,
    pub profile: String,
    pub dos_alarm_threshold: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixColumn {
    pub attack: String,
    pub port: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixCell {
    pub engine: String,
    pub attack: String,
    pub port: u16,
    pub label: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixReport {
    pub metadata: MatrixMetadata,
    pub engines: Vec<String>,
    pub columns: Vec<MatrixColumn>,
    pub cells: Vec<MatrixCell>,
}

impl MatrixReport {
    pub fn cell(&self, engine: &str, attack: &str, port: u16) -> Option<&MatrixCell> {
        self.cells
            .iter()
            .find(|c| c.engine == engine && c.attack == attack && c.port == port)
    }
}

/// Runs every engine x attack x port cell of the configured matrix. A
/// failing cell aborts the run, named.
pub fn run_matrix(lab: &Lab) -> Result<MatrixReport, HarnessError> {
    let axes = &lab.config().matrix;
    let mut engines = Vec::new();
    for name in &axes.engines {
        engines.push(
            EngineChoice::parse(name).ok_or_else(|| HarnessError::UnknownEngine(name.clone()))?,
        );
    }
    let mut attacks = Vec::new();
    for name in &axes.attacks {
        attacks.push(
            parse_attack_kind(name).ok_or_else(|| HarnessError::UnknownAttack(name.clone()))?,
        );
    }
    lab.profile(&axes.profile)?;

    let mut columns = Vec::new();
    for kind in &attacks {
        for port in &axes.ports {
            columns.push(MatrixColumn {
                attack: kind.name().to_string(),
                port: *port,
            });
        }
    }

    let mut cells = Vec::new();
    for engine in &engines {
        for kind in &attacks {
            for port in &axes.ports {
                let spec = CellSpec {
                    engine: *engine,
                    attack: lab.attack_spec(*kind)?,
                    dst_port: *port,
                    profile: axes.profile.clone(),
                };
                let outcome = run_cell(lab, &spec).map_err(|source| HarnessError::Cell {
                    engine: engine.name().to_string(),
                    attack: kind.name().to_string(),
                    port: *port,
                    source: Box::new(source),
                })?;
                cells.push(MatrixCell {
                    engine: engine.name().to_string(),
                    attack: kind.name().to_string(),
                    port: *port,
                    label: outcome.label(),
                    outcome,
                });
            }
        }
    }

    Ok(MatrixReport {
        metadata: MatrixMetadata {
            config_digest: lab.config().digest(),
            timestamp: chrono::Utc::now().to_rfc3339(),
            profile: axes.profile.clone(),
            dos_alarm_threshold: lab.dos_alarm_threshold(),
        },
        engines: engines.iter().map(|e| e.name().to_string()).collect(),
        columns,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    TextTable,
    Json,
    Csv,
}

impl ExportFormat {
    pub fn parse(name: &str) -> Option<ExportFormat> {
        match name {
            "text-table" => Some(ExportFormat::TextTable),
            "json" => Some(ExportFormat::Json),
            "csv" => Some(ExportFormat::Csv),
            _ => None,
        }
    }
}

/// Deterministic serialization of a report. JSON round-trips losslessly.
pub fn export(report: &MatrixReport, format: ExportFormat) -> String {
    match format {
        ExportFormat::Json => {
            let mut out = serde_json::to_string_pretty(report).expect("report serializes");
            out.push('\n');
            out
        }
        ExportFormat::Csv => {
            let mut out = String::from(
                "engine,attack,port,class,dos_indicator,follow_up_served,follow_up_seen_by_engine,verdict_protocol,verdict_basis,decided_at,misbound\n",
            );
            for cell in &report.cells {
                let o = &cell.outcome;
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{:?},{},{}\n",
                    cell.engine,
                    cell.attack,
                    cell.port,
                    cell.label,
                    o.dos_indicator,
                    o.follow_up_served,
                    o.follow_up_seen_by_engine,
                    o.verdict.protocol.as_deref().unwrap_or("none"),
                    o.verdict.basis,
                    o.verdict.decided_at,
                    o.verdict.misbound,
                ));
            }
            out
        }
        ExportFormat::TextTable => export_text_table(report),
    }
}

fn export_text_table(report: &MatrixReport) -> String {
    let threshold = report.metadata.dos_alarm_threshold;
    let headers: Vec<String> = report
        .columns
        .iter()
        .map(|c| format!("{}:{}", c.attack, c.port))
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut any_alarm = false;
    for engine in &report.engines {
        let mut row = vec![engine.clone()];
        for col in &report.columns {
            let cell = report
                .cell(engine, &col.attack, col.port)
                .expect("complete matrix");
            let mut label = cell.label.clone();
            if cell.outcome.dos_indicator >= threshold {
                label.push('*');
                any_alarm = true;
            }
            row.push(label);
        }
        rows.push(row);
    }

    let mut widths: Vec<usize> = Vec::new();
    widths.push(
        std::iter::once("engine".len())
            .chain(report.engines.iter().map(|e| e.len()))
            .max()
            .unwrap_or(6),
    );
    for (i, h) in headers.iter().enumerate() {
        let w = std::iter::once(h.len())
            .chain(rows.iter().map(|r| r[i + 1].len()))
            .max()
            .unwrap_or(h.len());
        widths.push(w);
    }

    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(widths.iter())
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };

    let mut out = String::new();
    let mut header = vec!["engine".to_string()];
    header.extend(headers);
    out.push_str(&fmt_row(&header));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out.push_str(&format!(
        "profile: {}   (config {})\n",
        report.metadata.profile,
        &report.metadata.config_digest[..12.min(report.metadata.config_digest.len())]
    ));
    if any_alarm {
        out.push_str(&format!("* dos_indicator >= {threshold}\n"));
    }
    out
}
