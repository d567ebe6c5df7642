use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use chainfed::checkpoint::save_checkpoint;
use chainfed::config::{load_config, ExperimentConfig, Mode, DEFAULT_THRESHOLD};
use chainfed::error::{Error, Result};
use chainfed::federation::memory::{estimate_peak_memory, MemMode, MemParams, MemReport, ModelDims};
use chainfed::federation::server::{stack_spec, RoundRecord, Simulation};
use chainfed::model::InputKind;

#[derive(Parser)]
#[command(name = "chainfed", version, about = "Chain federated fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full federated run; writes one JSON record per round.
    Run(Common),
    /// Similarity profiling only; prints scores and the chosen start layer.
    Profile(Common),
    /// Peak-memory breakdown over a sweep of window sizes.
    ReportMemory {
        #[command(flatten)]
        common: Common,
        /// Named model shape; `config` uses the model section of --config.
        #[arg(long, value_enum, default_value_t = Preset::Llama2_7b)]
        preset: Preset,
        /// Window sizes to report, comma separated; all of 1..=L by default.
        #[arg(long, value_delimiter = ',')]
        q: Vec<usize>,
    },
    /// Run a baseline or ablation.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: BaselineMode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    #[value(name = "llama2-7b")]
    Llama2_7b,
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum BaselineMode {
    FullAdapters,
    LinearProbing,
    NoDlct,
    NoGpo,
    NoFoat,
}

impl From<BaselineMode> for Mode {
    fn from(m: BaselineMode) -> Mode {
        match m {
            BaselineMode::FullAdapters => Mode::FullAdapters,
            BaselineMode::LinearProbing => Mode::LinearProbing,
            BaselineMode::NoDlct => Mode::NoDlct,
            BaselineMode::NoGpo => Mode::NoGpo,
            BaselineMode::NoFoat => Mode::NoFoat,
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default().finalize()?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(r) = common.rounds {
        cfg.federation.rounds = r;
    }
    Ok(cfg)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut out = open_out(path)?;
    let text = serde_json::to_string_pretty(value).expect("plain data");
    let label = path.unwrap_or(Path::new("<stdout>"));
    writeln!(out, "{text}")
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(label, e))
}

fn checkpoint_path(cfg: &ExperimentConfig, metrics: Option<&Path>) -> Option<PathBuf> {
    cfg.out.checkpoint.clone().or_else(|| metrics.map(|m| m.with_extension("ckpt")))
}

fn run(common: &Common, mode: Option<Mode>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let metrics = common.out.clone().or_else(|| cfg.out.metrics.clone());
    let ckpt = checkpoint_path(&cfg, metrics.as_deref());
    let sim = Simulation::prepare(cfg)?;
    let label = metrics.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut out = open_out(metrics.as_deref())?;
    let sink = |rec: &RoundRecord| {
        let line = serde_json::to_string(rec).expect("plain data");
        writeln!(out, "{line}").map_err(|e| Error::io(&label, e))
    };
    let (_, model) = sim.run_with(sim.config.federation.rounds, sink)?;
    out.flush().map_err(|e| Error::io(&label, e))?;
    if let Some(path) = ckpt {
        save_checkpoint(&model, &path)?;
    }
    Ok(())
}

fn profile(common: &Common) -> Result<()> {
    let mut cfg = load(common)?;
    cfg.mode = Mode::Chainfed;
    let threshold = cfg.chain.threshold.unwrap_or(DEFAULT_THRESHOLD);
    cfg.chain.threshold = Some(threshold);
    cfg.chain.start_layer = None;
    let sim = Simulation::prepare(cfg)?;
    let profile = sim.profile.expect("profiling is enabled");
    write_json(
        common.out.as_deref(),
        &json!({
            "scores": profile.scores,
            "weight": profile.sample_weight,
            "T": threshold,
            "L_start": sim.l_start,
        }),
    )
}

#[derive(Serialize)]
struct ChainRow {
    q: usize,
    report: MemReport,
    reduction: f64,
}

const LATENCY_NOTE: &str = "frozen layers are streamed one block at a time; prefetching the next block while the current one computes hides its load latency, which is not simulated here";

fn report_memory(common: &Common, preset: Preset, qs: &[usize]) -> Result<()> {
    let (name, dims, mem) = match preset {
        Preset::Llama2_7b => ("llama2-7b".to_string(), ModelDims::llama2_7b(), MemParams::llm_ledger()),
        Preset::Config => {
            let cfg = load(common)?;
            let input = match &cfg.data.source {
                chainfed::config::DataSource::Synthetic { kind, vocab, .. } => match kind {
                    chainfed::data::SynthKind::ClusterTokens => InputKind::Tokens { vocab: *vocab },
                    chainfed::data::SynthKind::TwoMoonsSeq => InputKind::Features { dim: 2 },
                },
                chainfed::config::DataSource::Jsonl { vocab, .. } => InputKind::Tokens {
                    vocab: chainfed::data::Vocab::load(vocab)?.size(),
                },
            };
            let m = &cfg.federation.memory;
            let mem = MemParams {
                precision_bytes: m.precision_bytes,
                optimizer_multiplier: m.optimizer_multiplier,
                batch: cfg.chain.batch_size,
                seq_len: cfg.data.seq_len,
                stream_block: m.stream_block,
            };
            ("config".to_string(), ModelDims::from_spec(&stack_spec(&cfg, input)), mem)
        }
    };
    let full = estimate_peak_memory(&dims, MemMode::FullModel, &mem)?;
    let qs: Vec<usize> = if qs.is_empty() { (1..=dims.layers).collect() } else { qs.to_vec() };
    let chain = qs
        .iter()
        .map(|&q| {
            let report = estimate_peak_memory(&dims, MemMode::Chain { q }, &mem)?;
            Ok(ChainRow {
                q,
                reduction: full.peak_bytes as f64 / report.peak_bytes as f64,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(
        common.out.as_deref(),
        &json!({
            "model": name,
            "dims": dims,
            "memory": mem,
            "full": full,
            "chain": chain,
            "latency_note": LATENCY_NOTE,
        }),
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c, None),
        Command::Profile(c) => profile(c),
        Command::ReportMemory { common, preset, q } => report_memory(common, *preset, q),
        Command::Baseline { common, mode } => run(common, Some((*mode).into())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
