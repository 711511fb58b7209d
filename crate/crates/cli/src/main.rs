//! `dpdlab` — run evasion attacks against protocol-detection engines,
//! assemble the vulnerability matrix, probe simulated endpoints and replay
//! recorded conversations.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dpdlab_core::attacks::PrefixUnit;
use dpdlab_core::harness::{
    export, parse_attack_kind, replay_records, run_cell_detailed, run_matrix, CellSpec,
    EngineChoice, ExportFormat, Lab, LabConfig, WholeChunk,
};
use dpdlab_core::server::probe_prefixes;
use dpdlab_core::trace::{parse_trace, write_trace};
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dpdlab", version, about = "Protocol-detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single engine/attack/port/profile cell.
    Run(RunArgs),
    /// Run the full matrix and render it.
    Matrix(MatrixArgs),
    /// Re-derive a profile's tolerance constants from the simulation.
    ProbeSim(ProbeArgs),
    /// Replay a recorded conversation trace through an engine.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "tree", value_parser = parse_engine)]
    engine: EngineChoice,
    #[arg(long, default_value = "baseline")]
    attack: String,
    #[arg(long, default_value_t = 4242)]
    port: u16,
    #[arg(long, default_value = "nginx")]
    profile: String,
    /// Stuffing repetitions (crlf attack).
    #[arg(long)]
    repetitions: Option<usize>,
    /// Stuffing unit: crlf|cr|lf|sp|tab (crlf attack).
    #[arg(long)]
    prefix_unit: Option<String>,
    /// Drop the keep-alive follow-up request (method attacks).
    #[arg(long)]
    no_follow_up: bool,
    /// Request target of the first request.
    #[arg(long)]
    path: Option<String>,
    /// Method override (unknown-method attack).
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Record the conversation to a trace file.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Write analyzer events as JSON lines.
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output format: text-table|json|csv.
    #[arg(long, default_value = "text-table", value_parser = parse_format)]
    format: ExportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long, required_unless_present = "all")]
    profile: Option<String>,
    /// Probe every built-in profile.
    #[arg(long)]
    all: bool,
    /// Repetition-search ceiling.
    #[arg(long, default_value_t = 10_000_000)]
    ceiling: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "tree", value_parser = parse_engine)]
    engine: EngineChoice,
    #[arg(long, default_value_t = 4242)]
    port: u16,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_engine(name: &str) -> Result<EngineChoice, String> {
    EngineChoice::parse(name).ok_or_else(|| format!("unknown engine {name:?}"))
}

fn parse_format(name: &str) -> Result<ExportFormat, String> {
    ExportFormat::parse(name).ok_or_else(|| format!("unknown format {name:?}"))
}

fn load_lab(path: &Option<PathBuf>) -> Result<Lab> {
    let config = match path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            LabConfig::from_toml(&text)?
        }
        None => LabConfig::default(),
    };
    Ok(Lab::from_config(config)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Matrix(args) => cmd_matrix(args),
        Command::ProbeSim(args) => cmd_probe(args),
        Command::Replay(args) => cmd_replay(args),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let lab = load_lab(&args.config)?;
    let kind = parse_attack_kind(&args.attack)
        .ok_or_else(|| anyhow::anyhow!("unknown attack {:?}", args.attack))?;
    let mut attack = lab.attack_spec(kind)?;
    if let Some(reps) = args.repetitions {
        attack.repetitions = reps;
    }
    if let Some(unit) = &args.prefix_unit {
        attack.unit =
            PrefixUnit::parse(unit).ok_or_else(|| anyhow::anyhow!("unknown prefix unit {unit:?}"))?;
    }
    if args.no_follow_up {
        attack.follow_up = false;
    }
    if let Some(path) = args.path {
        attack.path = path;
    }
    if args.method.is_some() {
        attack.method = args.method;
    }
    let spec = CellSpec {
        engine: args.engine,
        attack,
        dst_port: args.port,
        profile: args.profile.clone(),
    };
    let run = run_cell_detailed(&lab, &spec, &mut WholeChunk)?;

    if let Some(path) = &args.record {
        fs::write(path, write_trace(&run.trace))
            .with_context(|| format!("writing trace {}", path.display()))?;
    }
    if let Some(path) = &args.events {
        let mut out = String::new();
        for event in &run.events {
            out.push_str(&serde_json::to_string(event)?);
            out.push('\n');
        }
        fs::write(path, out).with_context(|| format!("writing events {}", path.display()))?;
    }

    println!(
        "outcome: {}  (engine {}, attack {}, port {}, profile {})",
        run.outcome.label(),
        args.engine.name(),
        args.attack,
        args.port,
        args.profile
    );
    println!(
        "verdict: {}  basis {:?}  decided_at {}  misbound {}",
        run.outcome.verdict.protocol.as_deref().unwrap_or("none"),
        run.outcome.verdict.basis,
        run.outcome.verdict.decided_at,
        run.outcome.verdict.misbound
    );
    println!(
        "marker served: {}  marker seen by engine: {}  dos_indicator: {}",
        run.outcome.follow_up_served,
        run.outcome.follow_up_seen_by_engine,
        run.outcome.dos_indicator
    );
    println!("analyzer events: {}", run.events.len());
    println!("server access log:");
    for entry in &run.access_log {
        println!("  {} {} -> {}", entry.method, entry.uri, entry.status);
    }
    Ok(())
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let lab = load_lab(&args.config)?;
    let report = run_matrix(&lab)?;
    let rendered = export(&report, args.format);
    match &args.out {
        Some(path) => fs::write(path, rendered)
            .with_context(|| format!("writing report {}", path.display()))?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let lab = load_lab(&args.config)?;
    let names: Vec<String> = if args.all {
        lab.profiles().keys().cloned().collect()
    } else {
        vec![args.profile.clone().expect("required by clap")]
    };
    for name in names {
        let Some(profile) = lab.profiles().get(&name) else {
            bail!("unknown profile {name:?}");
        };
        let report = probe_prefixes(profile, args.ceiling);
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let lab = load_lab(&args.config)?;
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("reading trace {}", args.trace.display()))?;
    let records = parse_trace(&text)?;
    let mut engine = lab.build_engine(args.engine, args.port);
    let events = replay_records(engine.as_mut(), args.port, &records)?;
    for event in &events {
        println!("{}", serde_json::to_string(event)?);
    }
    let verdict = engine.verdict();
    println!(
        "verdict: {}  basis {:?}  decided_at {}  misbound {}",
        verdict.protocol.as_deref().unwrap_or("none"),
        verdict.basis,
        verdict.decided_at,
        verdict.misbound
    );
    Ok(())
}
