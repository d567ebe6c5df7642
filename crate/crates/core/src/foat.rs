//! Layer-similarity profiling and start-layer selection.
//!
//! Each client runs one mini-batch through the frozen model, measures how
//! similar every layer's output is to the embedded input using linear CKA,
//! and uploads the scores. The server averages them and starts tuning at the
//! first layer whose similarity drops below a threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples-by-features activation matrix; each token position is one row.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> ActivationMatrix<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "activation_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        if rows < 2 {
            return Err(Error::InvalidArgument(format!(
                "activation matrix needs at least 2 rows, got {rows}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation matrix".into()));
        }
        Ok(ActivationMatrix { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&x| S::from_f64_lossy(x)).collect())
    }

    /// Flattens `[.., u]` activations so every position becomes a row.
    pub fn from_hidden(h: &Tensor<S>) -> Result<Self> {
        let cols = h.last_dim();
        Self::new(h.numel() / cols.max(1), cols, h.data().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    fn centered(&self) -> Vec<S> {
        let n = S::from_usize_lossy(self.rows);
        let mut means = vec![S::zero(); self.cols];
        for row in self.data.chunks(self.cols) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        self.data
            .chunks(self.cols)
            .flat_map(|row| row.iter().zip(&means).map(|(&v, &m)| v - m))
            .collect()
    }
}

/// Empirical HSIC with linear kernels, evaluated on the empirical
/// distribution of the rows: `tr(K H L H) / n²` with `K = X Xᵀ`, `L = Y Yᵀ`.
///
/// Computed as `‖X̃ᵀ Ỹ‖²_F / n²` on column-centered inputs, which costs
/// `O(n·dx·dy)` instead of forming the `n × n` kernels.
pub fn hsic_linear<S: Scalar>(x: &ActivationMatrix<S>, y: &ActivationMatrix<S>) -> Result<S> {
    if x.rows != y.rows {
        return Err(Error::Shape {
            op: "hsic",
            lhs: vec![x.rows, x.cols],
            rhs: vec![y.rows, y.cols],
        });
    }
    let (xc, yc) = (x.centered(), y.centered());
    let mut cross = vec![S::zero(); x.cols * y.cols];
    for (xr, yr) in xc.chunks(x.cols).zip(yc.chunks(y.cols)) {
        for (a, &xv) in xr.iter().enumerate() {
            let row = &mut cross[a * y.cols..(a + 1) * y.cols];
            for (c, &yv) in row.iter_mut().zip(yr) {
                *c += xv * yv;
            }
        }
    }
    let n = S::from_usize_lossy(x.rows);
    Ok(cross.iter().map(|&c| c * c).sum::<S>() / (n * n))
}

/// Self-HSIC values at or below this are treated as zero-variance input.
pub const DEGENERATE_HSIC: f64 = 1e-15;

/// Linear CKA: `HSIC(X, Y) / sqrt(HSIC(X, X) · HSIC(Y, Y))`.
pub fn cka<S: Scalar>(x: &ActivationMatrix<S>, y: &ActivationMatrix<S>) -> Result<S> {
    let hxy = hsic_linear(x, y)?;
    let hxx = hsic_linear(x, x)?;
    let hyy = hsic_linear(y, y)?;
    let floor = S::from_f64_lossy(DEGENERATE_HSIC);
    if hxx <= floor || hyy <= floor {
        return Err(Error::DegenerateSimilarity(format!(
            "self-HSIC too small ({}, {})",
            hxx, hyy
        )));
    }
    Ok(hxy / (hxx * hyy).sqrt())
}

/// Per-layer similarity of each layer's output to the embedded input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    /// `scores[i - 1]` belongs to layer `i`.
    pub scores: Vec<f64>,
    pub sample_weight: f64,
}

impl CkaProfile {
    pub fn num_layers(&self) -> usize {
        self.scores.len()
    }
}

/// Splits layers `1..=L` into maximal contiguous blocks whose resident size
/// (block parameters plus the input and output activation caches) fits
/// `budget` bytes. `None` means one block.
pub fn partition_by_budget<S: Scalar>(
    stack: &ModelStack<S>,
    rows: usize,
    budget: Option<u64>,
) -> Result<Vec<Vec<usize>>> {
    let l = stack.num_layers();
    let Some(budget) = budget else {
        return Ok(vec![(1..=l).collect()]);
    };
    let activation = (2 * rows * stack.hidden() * S::BYTES) as u64;
    let mut costs = Vec::with_capacity(l);
    for i in 1..=l {
        let slot = stack.layer(i)?;
        let params = stack.backbone_layer_params(i)?
            + slot.adapter.down.numel()
            + slot.adapter.up.numel();
        costs.push((params * S::BYTES) as u64);
    }
    let floor = costs.iter().max().copied().unwrap_or(0) + activation;
    if budget < floor {
        return Err(Error::BudgetTooSmall {
            what: "single-layer profiling block",
            budget,
            required: floor,
        });
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut used = activation;
    for (k, &c) in costs.iter().enumerate() {
        if !current.is_empty() && used + c > budget {
            blocks.push(std::mem::take(&mut current));
            used = activation;
        }
        current.push(k + 1);
        used += c;
    }
    blocks.push(current);
    Ok(blocks)
}

/// Profiles with an explicit block partition. Only the hidden state between
/// blocks is carried over; every block's intermediates are dropped after use.
pub fn profile_with_blocks<S: Scalar>(
    stack: &ModelStack<S>,
    batch: &Batch,
    blocks: &[Vec<usize>],
) -> Result<CkaProfile> {
    let l = stack.num_layers();
    let flat: Vec<usize> = blocks.iter().flatten().copied().collect();
    if flat != (1..=l).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument(
            "blocks must cover layers 1..=L contiguously in order".into(),
        ));
    }
    let z0_hidden = model::embed(stack, batch)?;
    let z0 = ActivationMatrix::from_hidden(&z0_hidden)?;
    let mut carried = z0_hidden;
    let mut scores = Vec::with_capacity(l);
    for block in blocks {
        let mut h = carried;
        for &i in block {
            h = model::layer_inference(stack, i, &h)?;
            let zi = ActivationMatrix::from_hidden(&h)?;
            scores.push(cka(&zi, &z0)?.to_f64_lossy());
        }
        carried = h;
    }
    Ok(CkaProfile {
        scores,
        sample_weight: batch.len() as f64,
    })
}

/// One-batch similarity profile under a memory budget.
pub fn profile_layers<S: Scalar>(
    stack: &ModelStack<S>,
    batch: &Batch,
    mem_budget: Option<u64>,
) -> Result<CkaProfile> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("profiling batch is empty".into()));
    }
    let rows = batch.len() * batch.seq_len();
    let blocks = partition_by_budget(stack, rows, mem_budget)?;
    profile_with_blocks(stack, batch, &blocks)
}

/// Sample-weighted mean of client profiles.
pub fn aggregate_profiles(profiles: &[CkaProfile]) -> Result<CkaProfile> {
    let first = profiles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no profiles to aggregate".into()))?;
    let l = first.num_layers();
    if let Some(p) = profiles.iter().find(|p| p.num_layers() != l) {
        return Err(Error::Shape {
            op: "aggregate_profiles",
            lhs: vec![l],
            rhs: vec![p.num_layers()],
        });
    }
    let total: f64 = profiles.iter().map(|p| p.sample_weight).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("total profile weight must be positive".into()));
    }
    let scores = (0..l)
        .map(|i| {
            profiles
                .iter()
                .map(|p| p.sample_weight * p.scores[i])
                .sum::<f64>()
                / total
        })
        .collect();
    Ok(CkaProfile {
        scores,
        sample_weight: total,
    })
}

/// First layer (1-based) whose score is strictly below `threshold`; the last
/// layer when none is.
pub fn select_start_layer(profile: &CkaProfile, threshold: f64) -> usize {
    profile
        .scores
        .iter()
        .position(|&s| s < threshold)
        .map_or(profile.num_layers(), |k| k + 1)
}
