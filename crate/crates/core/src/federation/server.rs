//! The federated round loop and its baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{local_update, LocalTraining, Stage, StageLossConfig, WindowSchedule};
use crate::config::{DataSource, ExperimentConfig, LabelRule, Mode};
use crate::data::{self, Dataset, SynthParams, Vocab};
use crate::error::{Error, Result};
use crate::foat::{self, CkaProfile};
use crate::model::{self, Batch, InputKind, LayerSpan, ModelStack, StackSpec};

use super::aggregate::{aggregate, round_seed, sample_clients};
use super::memory::{determine_q, estimate_peak_memory, MemMode, MemParams, ModelDims};
use super::partition::{dirichlet_partition, iid_partition};

const DATA_SALT: u64 = 0x4441_5441;
const SPLIT_SALT: u64 = 0x5350_4c54;
const PARTITION_SALT: u64 = 0x5041_5254;
const READOUT_SALT: u64 = 0x5245_4144;
const TRAIN_SALT: u64 = 0x5452_4e00;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientProfile {
    pub id: usize,
    /// `None` means unconstrained.
    pub mem_budget: Option<u64>,
    /// Row indices into the full dataset.
    pub shard: Vec<usize>,
}

impl ClientProfile {
    pub fn shard_size(&self) -> usize {
        self.shard.len()
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// `[lo, hi]` of the trained adapter span; absent when no adapter trains.
    pub window: Option<[usize; 2]>,
    pub clients: Vec<usize>,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub comm_bytes: u64,
    pub peak_mem: u64,
}

/// Everything fixed before the first round.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub config: ExperimentConfig,
    pub data: Dataset,
    pub eval_rows: Vec<usize>,
    pub clients: Vec<ClientProfile>,
    pub initial: ModelStack<f64>,
    /// Aggregated similarity profile, when one was computed.
    pub profile: Option<CkaProfile>,
    pub l_start: usize,
    pub q: usize,
    pub schedule: WindowSchedule,
    pub dims: ModelDims,
    pub mem: MemParams,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub model: ModelStack<f64>,
    pub l_start: usize,
    pub q: usize,
    pub initial_fingerprint: u64,
    pub final_fingerprint: u64,
}

pub fn stack_spec(cfg: &ExperimentConfig, input: InputKind) -> StackSpec {
    let m = &cfg.model;
    StackSpec {
        layers: m.layers,
        hidden: m.hidden,
        adapter_dim: m.adapter_dim,
        ffn: m.ffn,
        kind: m.kind,
        input,
        classes: m.classes,
        backbone_scale: m.backbone_scale,
        adapter_activation: m.adapter_activation,
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, ModelStack<f64>)> {
    let seq_len = cfg.data.seq_len;
    let classes = cfg.model.classes;
    let (raw, rule) = match &cfg.data.source {
        DataSource::Synthetic {
            kind,
            samples,
            vocab,
            difficulty,
            labels,
        } => {
            let params = SynthParams {
                kind: *kind,
                samples: *samples,
                classes,
                seq_len,
                vocab: *vocab,
                difficulty: *difficulty,
                seed: round_seed(cfg.seed, 0, DATA_SALT),
            };
            (data::synth_dataset(&params)?, *labels)
        }
        DataSource::Jsonl { path, vocab } => {
            let vocab = Vocab::load(vocab)?;
            (data::load_jsonl_dataset(path, &vocab, seq_len, classes)?, LabelRule::Native)
        }
    };
    let stack = ModelStack::init(&stack_spec(cfg, raw.input_kind()), cfg.model.seed)?;
    let data = match rule {
        LabelRule::Native => raw,
        LabelRule::DeepReadout => {
            data::deep_readout_labels(&stack, &raw, round_seed(cfg.seed, 0, READOUT_SALT))?
        }
    };
    Ok((data, stack))
}

fn mem_params(cfg: &ExperimentConfig) -> MemParams {
    let m = &cfg.federation.memory;
    MemParams {
        precision_bytes: m.precision_bytes,
        optimizer_multiplier: m.optimizer_multiplier,
        batch: cfg.chain.batch_size,
        seq_len: cfg.data.seq_len,
        stream_block: m.stream_block,
    }
}

fn profiling_batch(data: &Dataset, shard: &[usize], batch_size: usize) -> Result<Batch> {
    let take = batch_size.min(shard.len()).max(2.min(shard.len()));
    data.batch(&shard[..take])
}

impl Simulation {
    /// Data, split, partition, model init, similarity profiling, start layer
    /// and window size.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let cfg = config.finalize()?;
        let (data, initial) = load_data(&cfg)?;
        let (train, eval_rows) = data::train_eval_split(
            data.len(),
            cfg.data.eval_fraction,
            round_seed(cfg.seed, 0, SPLIT_SALT),
        );
        let n = cfg.federation.clients;
        if train.len() < n {
            return Err(Error::InvalidArgument(format!(
                "{} training rows cannot cover {n} clients",
                train.len()
            )));
        }
        let part_seed = round_seed(cfg.seed, 0, PARTITION_SALT);
        let local = match cfg.federation.alpha {
            None => iid_partition(train.len(), n, part_seed)?,
            Some(alpha) => {
                let labels: Vec<usize> = train.iter().map(|&i| data.labels()[i]).collect();
                dirichlet_partition(&labels, n, alpha, part_seed)?
            }
        };
        let budget_of = |id: usize| {
            cfg.federation
                .budgets
                .as_ref()
                .map(|b| if b.len() == 1 { b[0] } else { b[id] })
        };
        let clients: Vec<ClientProfile> = local
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientProfile {
                id,
                mem_budget: budget_of(id),
                shard: shard.into_iter().map(|k| train[k]).collect(),
            })
            .collect();

        let l = cfg.model.layers;
        let profiled = matches!(cfg.mode, Mode::Chainfed | Mode::NoDlct | Mode::NoGpo)
            && cfg.chain.start_layer.is_none();
        let (profile, l_start) = if profiled {
            let threshold = cfg.chain.threshold.expect("finalize sets a threshold");
            let profiles = clients
                .par_iter()
                .map(|c| {
                    let batch = profiling_batch(&data, &c.shard, cfg.chain.batch_size)?;
                    foat::profile_layers(&initial, &batch, c.mem_budget)
                })
                .collect::<Result<Vec<_>>>()?;
            let agg = foat::aggregate_profiles(&profiles)?;
            let start = foat::select_start_layer(&agg, threshold);
            (Some(agg), start)
        } else {
            let start = match cfg.mode {
                Mode::Chainfed | Mode::NoDlct | Mode::NoGpo => {
                    cfg.chain.start_layer.expect("validated")
                }
                _ => 1,
            };
            (None, start)
        };

        let dims = ModelDims::from_spec(&stack_spec(&cfg, data.input_kind()));
        let mem = mem_params(&cfg);
        let span = l - l_start + 1;
        let q = if cfg.mode == Mode::NoDlct {
            1
        } else if let Some(q) = cfg.federation.fixed_q {
            q
        } else {
            let min_budget = clients
                .iter()
                .filter_map(|c| c.mem_budget)
                .min()
                .expect("validated: budgets present");
            determine_q(min_budget, &dims, &mem, span)?
        };
        let schedule = WindowSchedule::new(l_start, l, q)?;
        Ok(Simulation {
            config: cfg,
            data,
            eval_rows,
            clients,
            initial,
            profile,
            l_start,
            q,
            schedule,
            dims,
            mem,
        })
    }

    /// Stage for round `r` (1-based) under the configured mode.
    pub fn stage_at(&self, r: usize) -> Result<Stage> {
        let l = self.config.model.layers;
        match self.config.mode {
            Mode::FullAdapters => Ok(Stage::full_adapters(l)),
            Mode::LinearProbing => Ok(Stage::linear_probing(l)),
            mode => {
                let lambda = if mode == Mode::NoGpo { 0.0 } else { self.config.chain.lambda };
                let cfg = StageLossConfig {
                    lambda,
                    aux_adapters_trainable: self.config.chain.aux_adapters_trainable,
                };
                Stage::chain(l, self.schedule.window_at_round(r), &cfg)
            }
        }
    }

    /// Per-client peak memory of a stage.
    pub fn peak_memory(&self, stage: &Stage) -> Result<u64> {
        let mode = match self.config.mode {
            Mode::FullAdapters => MemMode::FullModel,
            Mode::LinearProbing => MemMode::LinearProbe,
            _ => MemMode::Chain {
                q: stage.active.map_or(1, |w| w.len()),
            },
        };
        Ok(estimate_peak_memory(&self.dims, mode, &self.mem)?.peak_bytes)
    }

    pub fn eval_batch(&self) -> Result<Batch> {
        self.data.batch(&self.eval_rows)
    }

    /// Runs every round, handing each record to `sink` as it is produced.
    pub fn run_with(
        &self,
        rounds: usize,
        mut sink: impl FnMut(&RoundRecord) -> Result<()>,
    ) -> Result<(Vec<RoundRecord>, ModelStack<f64>)> {
        let cfg = &self.config;
        let count = cfg.federation.sample.resolve(self.clients.len());
        let eval = if self.eval_rows.is_empty() {
            None
        } else {
            Some(self.eval_batch()?)
        };
        let mut global = self.initial.clone();
        let mut records = Vec::with_capacity(rounds);
        for r in 1..=rounds {
            let sampled = sample_clients(self.clients.len(), count, r, cfg.seed)?;
            let stage = self.stage_at(r)?;
            let updates = sampled
                .par_iter()
                .map(|&id| {
                    let client = &self.clients[id];
                    let bs = cfg.chain.batch_size.min(client.shard_size());
                    let opts = LocalTraining {
                        steps: cfg
                            .chain
                            .local_steps
                            .unwrap_or_else(|| client.shard_size().div_ceil(bs)),
                        lr: cfg.chain.lr,
                        batch_size: bs,
                    };
                    let seed = round_seed(cfg.seed, r, TRAIN_SALT ^ id as u64);
                    local_update(&global, &self.data, &client.shard, &stage, &opts, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let train_loss = if updates.is_empty() {
                0.0
            } else {
                updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64
            };
            let per_client_bytes = updates.first().map_or(0, |u| u.delta.serialized_bytes());
            let deltas: Vec<_> = updates
                .into_iter()
                .zip(&sampled)
                .map(|(u, &id)| (u.delta, self.clients[id].shard_size()))
                .collect();
            global = aggregate(&global, &deltas)?;
            let eval_accuracy = match &eval {
                Some(b) => model::accuracy(&global, b)?,
                None => 0.0,
            };
            let window = match cfg.mode {
                Mode::LinearProbing => None,
                _ => stage.active.map(|w: LayerSpan| [w.lo, w.hi]),
            };
            let rec = RoundRecord {
                round: r,
                window,
                clients: sampled.clone(),
                train_loss,
                eval_accuracy,
                comm_bytes: 2 * sampled.len() as u64 * per_client_bytes,
                peak_mem: self.peak_memory(&stage)?,
            };
            sink(&rec)?;
            records.push(rec);
        }
        Ok((records, global))
    }
}

/// Prepares and runs the configured experiment for `federation.rounds`.
pub fn run(config: ExperimentConfig) -> Result<RunOutput> {
    run_streaming(config, |_| Ok(()))
}

pub fn run_streaming(
    config: ExperimentConfig,
    sink: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    let sim = Simulation::prepare(config)?;
    let (records, model) = sim.run_with(sim.config.federation.rounds, sink)?;
    Ok(RunOutput {
        records,
        l_start: sim.l_start,
        q: sim.q,
        initial_fingerprint: sim.initial.backbone_fingerprint(),
        final_fingerprint: model.backbone_fingerprint(),
        model,
    })
}

/// Same as [`run`] with the mode replaced.
pub fn run_baseline(mut config: ExperimentConfig, mode: Mode) -> Result<RunOutput> {
    config.mode = mode;
    run(config)
}
