//! Experiment configuration: JSON schema, defaults and validation.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthKind;
use crate::kernels::Activation;
use crate::model::LayerKind;

/// One failed constraint, addressed by its JSON field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<Violation>,
}

impl ConfigError {
    fn single(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            violations: vec![Violation {
                path: path.into(),
                message: message.into(),
            }],
        }
    }

    pub fn paths(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.path.as_str()).collect()
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for v in &self.violations {
            write!(f, "\n  {}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub adapter_dim: usize,
    pub ffn: usize,
    pub kind: LayerKind,
    pub classes: usize,
    pub backbone_scale: f64,
    pub adapter_activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            hidden: 32,
            adapter_dim: 8,
            ffn: 64,
            kind: LayerKind::Mlp,
            classes: 2,
            backbone_scale: 1.0,
            adapter_activation: Activation::Gelu,
            seed: 7,
        }
    }
}

/// How labels of a synthetic dataset are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// The generator's own labels.
    Native,
    /// A random linear readout of the frozen model's last layer.
    DeepReadout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        kind: SynthKind,
        samples: usize,
        #[serde(default = "default_vocab")]
        vocab: usize,
        #[serde(default = "default_difficulty")]
        difficulty: f64,
        #[serde(default = "default_labels")]
        labels: LabelRule,
    },
    Jsonl {
        path: PathBuf,
        vocab: PathBuf,
    },
}

fn default_vocab() -> usize {
    64
}

fn default_difficulty() -> f64 {
    0.6
}

fn default_labels() -> LabelRule {
    LabelRule::Native
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub eval_fraction: f64,
    pub seq_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic {
                kind: SynthKind::ClusterTokens,
                samples: 2000,
                vocab: default_vocab(),
                difficulty: default_difficulty(),
                labels: LabelRule::Native,
            },
            eval_fraction: 0.2,
            seq_len: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    Count(usize),
    Fraction(f64),
}

impl SampleSize {
    pub fn resolve(self, clients: usize) -> usize {
        match self {
            SampleSize::Count(c) => c,
            SampleSize::Fraction(f) => ((clients as f64 * f).round() as usize).clamp(1, clients),
        }
    }
}

/// Constants of the memory accounting model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub precision_bytes: u64,
    pub optimizer_multiplier: f64,
    /// Backbone layers resident while streaming the frozen prefix.
    pub stream_block: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            precision_bytes: 4,
            optimizer_multiplier: 0.0,
            stream_block: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub clients: usize,
    /// Dirichlet concentration; absent means an IID split.
    pub alpha: Option<f64>,
    pub sample: SampleSize,
    pub rounds: usize,
    /// Per-client memory budgets in bytes (one value applies to everyone).
    pub budgets: Option<Vec<u64>>,
    pub fixed_q: Option<usize>,
    pub memory: MemoryConfig,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 20,
            alpha: None,
            sample: SampleSize::Count(15),
            rounds: 150,
            budgets: None,
            fixed_q: None,
            memory: MemoryConfig::default(),
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_Q: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub lambda: f64,
    pub threshold: Option<f64>,
    pub start_layer: Option<usize>,
    pub lr: f64,
    /// SGD steps per round; absent means one pass over the local shard.
    pub local_steps: Option<usize>,
    pub batch_size: usize,
    pub aux_adapters_trainable: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            lambda: DEFAULT_LAMBDA,
            threshold: None,
            start_layer: None,
            lr: 0.1,
            local_steps: None,
            batch_size: 8,
            aux_adapters_trainable: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Chainfed,
    FullAdapters,
    LinearProbing,
    NoDlct,
    NoGpo,
    NoFoat,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Chainfed => "chainfed",
            Mode::FullAdapters => "full_adapters",
            Mode::LinearProbing => "linear_probing",
            Mode::NoDlct => "no_dlct",
            Mode::NoGpo => "no_gpo",
            Mode::NoFoat => "no_foat",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutConfig {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub chain: ChainConfig,
    pub mode: Mode,
    pub out: OutConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            federation: FederationConfig::default(),
            chain: ChainConfig::default(),
            mode: Mode::Chainfed,
            out: OutConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, applies defaults and validates every constraint.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        if !text.trim_start().starts_with('{') {
            return Err(ConfigError::single("<root>", "expected a JSON object"));
        }
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::single(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
        })?;
        cfg.finalize()
    }

    /// Fills the threshold / window defaults, then validates.
    pub fn finalize(mut self) -> Result<Self, ConfigError> {
        if self.chain.threshold.is_none() && self.chain.start_layer.is_none() {
            self.chain.threshold = Some(DEFAULT_THRESHOLD);
        }
        if self.federation.budgets.is_none() && self.federation.fixed_q.is_none() {
            self.federation.fixed_q = Some(DEFAULT_Q);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let mut bad = |path: &str, msg: &str| {
            v.push(Violation {
                path: path.to_string(),
                message: msg.to_string(),
            })
        };
        let m = &self.model;
        if m.layers == 0 {
            bad("model.layers", "must be >= 1");
        }
        if m.hidden == 0 {
            bad("model.hidden", "must be >= 1");
        }
        if m.adapter_dim == 0 || m.adapter_dim >= m.hidden {
            bad("model.adapter_dim", "must satisfy 1 <= adapter_dim < hidden");
        }
        if m.ffn == 0 {
            bad("model.ffn", "must be >= 1");
        }
        if m.classes < 2 {
            bad("model.classes", "must be >= 2");
        }
        if !(m.backbone_scale.is_finite() && m.backbone_scale >= 0.0) {
            bad("model.backbone_scale", "must be finite and >= 0");
        }

        let d = &self.data;
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            bad("data.eval_fraction", "must be in (0, 1)");
        }
        if d.seq_len == 0 {
            bad("data.seq_len", "must be >= 1");
        }
        if let DataSource::Synthetic {
            kind,
            samples,
            vocab,
            difficulty,
            ..
        } = &d.source
        {
            if *samples < m.classes {
                bad("data.source.samples", "must be >= model.classes");
            }
            if *samples < self.federation.clients {
                bad("data.source.samples", "must be >= federation.clients");
            }
            match kind {
                SynthKind::ClusterTokens => {
                    if *vocab < 2 + m.classes + 1 {
                        bad("data.source.vocab", "too small for one token cluster per class");
                    }
                    if !(0.0..=1.0).contains(difficulty) {
                        bad("data.source.difficulty", "signal probability must be in [0, 1]");
                    }
                }
                SynthKind::TwoMoonsSeq => {
                    if !(difficulty.is_finite() && *difficulty >= 0.0) {
                        bad("data.source.difficulty", "noise scale must be finite and >= 0");
                    }
                }
            }
        }

        let f = &self.federation;
        if f.clients == 0 {
            bad("federation.clients", "must be >= 1");
        }
        if let Some(a) = f.alpha {
            if !(a.is_finite() && a > 0.0) {
                bad("federation.alpha", "must be > 0");
            }
        }
        match f.sample {
            SampleSize::Count(c) if c == 0 || c > f.clients => {
                bad("federation.sample.count", "must be in 1..=clients")
            }
            SampleSize::Fraction(x) if !(x > 0.0 && x <= 1.0) => {
                bad("federation.sample.fraction", "must be in (0, 1]")
            }
            _ => {}
        }
        match (&f.budgets, f.fixed_q) {
            (Some(_), Some(_)) => bad(
                "federation.budgets",
                "exactly one of federation.budgets and federation.fixed_q may be set",
            ),
            (Some(b), None) => {
                if b.is_empty() || (b.len() != 1 && b.len() != f.clients) {
                    bad("federation.budgets", "needs one entry or one per client");
                }
                if b.iter().any(|&x| x == 0) {
                    bad("federation.budgets", "budgets must be > 0");
                }
            }
            (None, Some(0)) => bad("federation.fixed_q", "must be >= 1"),
            _ => {}
        }
        if f.memory.precision_bytes == 0 {
            bad("federation.memory.precision_bytes", "must be >= 1");
        }
        if !(f.memory.optimizer_multiplier.is_finite() && f.memory.optimizer_multiplier >= 0.0) {
            bad("federation.memory.optimizer_multiplier", "must be finite and >= 0");
        }
        if f.memory.stream_block == 0 {
            bad("federation.memory.stream_block", "must be >= 1");
        }

        let c = &self.chain;
        if !(c.lambda.is_finite() && c.lambda >= 0.0) {
            bad("chain.lambda", "must be finite and >= 0");
        }
        match (c.threshold, c.start_layer) {
            (Some(_), Some(_)) => bad(
                "chain.threshold",
                "exactly one of chain.threshold and chain.start_layer may be set",
            ),
            (Some(t), None) if !(t > 0.0 && t <= 1.0) => bad("chain.threshold", "must be in (0, 1]"),
            (None, Some(s)) if s == 0 || s > m.layers => {
                bad("chain.start_layer", "must be in 1..=model.layers")
            }
            (None, None) => bad("chain.threshold", "one of threshold or start_layer is required"),
            _ => {}
        }
        if !(c.lr.is_finite() && c.lr > 0.0) {
            bad("chain.lr", "must be finite and > 0");
        }
        if c.local_steps == Some(0) {
            bad("chain.local_steps", "must be >= 1");
        }
        if c.batch_size == 0 {
            bad("chain.batch_size", "must be >= 1");
        }

        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { violations: v })
        }
    }
}

/// Reads and validates a JSON config file.
pub fn load_config(path: &Path) -> crate::error::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(ExperimentConfig::from_json(&text)?)
}
