//! Closed-form peak-memory accounting for one client.
//!
//! Components follow the usual breakdown for adapter fine-tuning: resident
//! frozen parameters, live activations, trainable parameters with their
//! gradients, and optimizer state. Chain training keeps only a streaming block
//! of preceding layers plus the `Q` window layers resident, and only those
//! layers' activations alive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InputKind, LayerKind, StackSpec};

/// Shape of one backbone layer for parameter counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockShape {
    Mlp,
    AttnLite,
    /// Attention with four `u × u` projections plus a gated three-matrix FFN.
    GatedDecoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub block: BlockShape,
    /// Rows of the embedding table (or input feature width).
    pub embed_rows: usize,
    pub adapter_dim: usize,
    /// Output width of each per-layer local head.
    pub local_head_outputs: usize,
    /// Output width of the final head.
    pub final_head_outputs: usize,
}

impl ModelDims {
    pub fn from_spec(spec: &StackSpec) -> Self {
        ModelDims {
            layers: spec.layers,
            hidden: spec.hidden,
            ffn: spec.ffn,
            block: match spec.kind {
                LayerKind::Mlp => BlockShape::Mlp,
                LayerKind::AttnLite => BlockShape::AttnLite,
            },
            embed_rows: match spec.input {
                InputKind::Tokens { vocab } => vocab,
                InputKind::Features { dim } => dim,
            },
            adapter_dim: spec.adapter_dim,
            local_head_outputs: spec.classes,
            final_head_outputs: spec.classes,
        }
    }

    /// LLaMA2-7B-shaped dimensions: 32 layers, width 4096, FFN 11008,
    /// vocabulary 32000. The final head is the LM head; local heads are
    /// two-way classification heads.
    pub fn llama2_7b() -> Self {
        ModelDims {
            layers: 32,
            hidden: 4096,
            ffn: 11008,
            block: BlockShape::GatedDecoder,
            embed_rows: 32000,
            adapter_dim: 64,
            local_head_outputs: 2,
            final_head_outputs: 32000,
        }
    }

    pub fn layer_params(&self) -> u64 {
        let (u, f) = (self.hidden as u64, self.ffn as u64);
        let mlp = 2 * u + u * f + f + f * u + u;
        match self.block {
            BlockShape::Mlp => mlp,
            BlockShape::AttnLite => 2 * u + 4 * u * u + mlp,
            BlockShape::GatedDecoder => 2 * u + 4 * u * u + 3 * u * f,
        }
    }

    pub fn adapter_params(&self) -> u64 {
        2 * (self.hidden * self.adapter_dim) as u64
    }

    pub fn local_head_params(&self) -> u64 {
        ((self.hidden + 1) * self.local_head_outputs) as u64
    }

    pub fn final_head_params(&self) -> u64 {
        ((self.hidden + 1) * self.final_head_outputs) as u64
    }

    pub fn embed_params(&self) -> u64 {
        (self.embed_rows * self.hidden) as u64
    }

    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.embed_rows == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Accounting constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemParams {
    /// Bytes per stored element.
    pub precision_bytes: u64,
    /// Optimizer state elements per trainable parameter.
    pub optimizer_multiplier: f64,
    pub batch: usize,
    pub seq_len: usize,
    /// Frozen layers resident at once while streaming the prefix.
    pub stream_block: usize,
}

impl MemParams {
    /// fp16 parameters, two fp32 Adam moments, batch 16, sequence 512.
    pub fn llm_ledger() -> Self {
        MemParams {
            precision_bytes: 2,
            optimizer_multiplier: 4.0,
            batch: 16,
            seq_len: 512,
            stream_block: 1,
        }
    }
}

/// Which parameters are trainable and resident.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum MemMode {
    /// Whole model resident, all adapters and the final head trainable.
    FullModel,
    /// Chain training with a `q`-layer co-tuning window.
    Chain { q: usize },
    /// Only the final head trainable on a streamed frozen model.
    LinearProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemShares {
    pub params: f64,
    pub activations: f64,
    pub adapter_and_grad: f64,
    pub optimizer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemReport {
    pub params_bytes: u64,
    pub activation_bytes: u64,
    pub adapter_and_grad_bytes: u64,
    pub optimizer_bytes: u64,
    pub peak_bytes: u64,
    pub shares: MemShares,
}

pub fn estimate_peak_memory(dims: &ModelDims, mode: MemMode, mem: &MemParams) -> Result<MemReport> {
    dims.validate()?;
    if mem.precision_bytes == 0 || mem.batch == 0 || mem.seq_len == 0 || mem.stream_block == 0 {
        return Err(Error::InvalidArgument("memory parameters must be positive".into()));
    }
    let l = dims.layers;
    let (resident_layers, live_layers, trainable_adapters, local_heads, frozen_adapters) =
        match mode {
            MemMode::FullModel => (l, l, l, 0, 0),
            MemMode::Chain { q } => {
                if q == 0 {
                    return Err(Error::InvalidArgument("window size must be >= 1".into()));
                }
                let q = q.min(l);
                // Only the head at the window top is trained, and none once
                // the window spans every layer.
                let heads = usize::from(q < l);
                ((q + mem.stream_block).min(l), (q + 1).min(l), q, heads, l - q)
            }
            MemMode::LinearProbe => (mem.stream_block.min(l), 1, 0, 0, l),
        };
    let p = mem.precision_bytes;
    let frozen = resident_layers as u64 * dims.layer_params()
        + dims.embed_params()
        + frozen_adapters as u64 * dims.adapter_params();
    let trainable = trainable_adapters as u64 * dims.adapter_params()
        + local_heads as u64 * dims.local_head_params()
        + dims.final_head_params();
    let params_bytes = p * frozen;
    let activation_bytes = p * (mem.batch * mem.seq_len * dims.hidden * live_layers) as u64;
    let adapter_and_grad_bytes = 2 * p * trainable;
    let optimizer_bytes = (mem.optimizer_multiplier * (p * trainable) as f64).round() as u64;
    let peak_bytes = params_bytes + activation_bytes + adapter_and_grad_bytes + optimizer_bytes;
    let share = |x: u64| x as f64 / peak_bytes as f64;
    Ok(MemReport {
        params_bytes,
        activation_bytes,
        adapter_and_grad_bytes,
        optimizer_bytes,
        peak_bytes,
        shares: MemShares {
            params: share(params_bytes),
            activations: share(activation_bytes),
            adapter_and_grad: share(adapter_and_grad_bytes),
            optimizer: share(optimizer_bytes),
        },
    })
}

/// Largest window size `Q <= max_q` whose chain peak fits `min_budget`.
pub fn determine_q(min_budget: u64, dims: &ModelDims, mem: &MemParams, max_q: usize) -> Result<usize> {
    let mut best = None;
    for q in 1..=max_q.max(1) {
        let peak = estimate_peak_memory(dims, MemMode::Chain { q }, mem)?.peak_bytes;
        if peak <= min_budget {
            best = Some(q);
        } else {
            break;
        }
    }
    best.ok_or_else(|| Error::BudgetTooSmall {
        what: "chain training with a single-layer window",
        budget: min_budget,
        required: estimate_peak_memory(dims, MemMode::Chain { q: 1 }, mem)
            .map(|r| r.peak_bytes)
            .unwrap_or(u64::MAX),
    })
}
