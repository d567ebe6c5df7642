//! Datasets: synthetic generators, JSONL ingestion and batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, BatchInput, InputKind, ModelStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Rows {
    Tokens { ids: Vec<Vec<usize>>, vocab: usize },
    Features { values: Vec<Vec<f64>>, dim: usize },
}

/// Labeled rows of uniform length.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Rows,
    labels: Vec<usize>,
    classes: usize,
    seq_len: usize,
}

impl Dataset {
    pub fn new(rows: Rows, labels: Vec<usize>, classes: usize, seq_len: usize) -> Result<Self> {
        let n = match &rows {
            Rows::Tokens { ids, vocab } => {
                if let Some(r) = ids.iter().find(|r| r.len() != seq_len) {
                    return Err(Error::InvalidArgument(format!(
                        "token row of length {} != seq_len {seq_len}",
                        r.len()
                    )));
                }
                if ids.iter().flatten().any(|&t| t >= *vocab) {
                    return Err(Error::InvalidArgument("token id outside vocabulary".into()));
                }
                ids.len()
            }
            Rows::Features { values, dim } => {
                if values.iter().any(|r| r.len() != seq_len * dim) {
                    return Err(Error::InvalidArgument(
                        "feature row length must equal seq_len * dim".into(),
                    ));
                }
                values.len()
            }
        };
        if n != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset {
            rows,
            labels,
            classes,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn rows(&self) -> &Rows {
        &self.rows
    }

    /// Embedding input kind a model needs to consume this dataset.
    pub fn input_kind(&self) -> InputKind {
        match &self.rows {
            Rows::Tokens { vocab, .. } => InputKind::Tokens { vocab: *vocab },
            Rows::Features { dim, .. } => InputKind::Features { dim: *dim },
        }
    }

    /// Gathers the given rows into a model batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "row {i} out of range for dataset of {}",
                self.len()
            )));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let input = match &self.rows {
            Rows::Tokens { ids, .. } => BatchInput::Tokens {
                ids: indices.iter().flat_map(|&i| ids[i].iter().copied()).collect(),
                seq: self.seq_len,
            },
            Rows::Features { values, dim } => BatchInput::Features {
                values: indices.iter().flat_map(|&i| values[i].iter().copied()).collect(),
                seq: self.seq_len,
                dim: *dim,
            },
        };
        Ok(Batch { input, labels })
    }

    pub fn all(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let rows = match &self.rows {
            Rows::Tokens { ids, vocab } => Rows::Tokens {
                ids: indices.iter().map(|&i| ids[i].clone()).collect(),
                vocab: *vocab,
            },
            Rows::Features { values, dim } => Rows::Features {
                values: indices.iter().map(|&i| values[i].clone()).collect(),
                dim: *dim,
            },
        };
        Dataset::new(rows, labels, self.classes, self.seq_len)
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.rows.clone(), labels, self.classes, self.seq_len)
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Noisy 2-D points on interleaved arcs, repeated over every position.
    TwoMoonsSeq,
    /// Token sequences where a fraction of positions come from a
    /// class-specific token cluster.
    ClusterTokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub samples: usize,
    pub classes: usize,
    pub seq_len: usize,
    /// Vocabulary size for `cluster-tokens`.
    pub vocab: usize,
    /// Probability that a position carries a class token (`cluster-tokens`)
    /// or the per-coordinate noise scale (`two-moons-seq`).
    pub difficulty: f64,
    pub seed: u64,
}

/// Deterministic synthetic dataset; labels are assigned round-robin.
pub fn synth_dataset(p: &SynthParams) -> Result<Dataset> {
    if p.samples < p.classes || p.classes < 2 || p.seq_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic dataset needs samples >= classes >= 2 and seq_len >= 1 (M={}, C={})",
            p.samples, p.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let labels: Vec<usize> = (0..p.samples).map(|i| i % p.classes).collect();
    let rows = match p.kind {
        SynthKind::ClusterTokens => {
            let usable = p.vocab.saturating_sub(2);
            let cluster = usable / (p.classes + 1);
            if cluster == 0 {
                return Err(Error::InvalidArgument(format!(
                    "vocab {} too small for {} token clusters",
                    p.vocab, p.classes
                )));
            }
            if !(0.0..=1.0).contains(&p.difficulty) {
                return Err(Error::InvalidArgument("signal probability must be in [0, 1]".into()));
            }
            let ids = labels
                .iter()
                .map(|&c| {
                    (0..p.seq_len)
                        .map(|_| {
                            if rng.random_bool(p.difficulty) {
                                2 + c * cluster + rng.random_range(0..cluster)
                            } else {
                                2 + rng.random_range(0..usable)
                            }
                        })
                        .collect()
                })
                .collect();
            Rows::Tokens {
                ids,
                vocab: p.vocab,
            }
        }
        SynthKind::TwoMoonsSeq => {
            let noise = Normal::new(0.0, p.difficulty.max(0.0))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let values = labels
                .iter()
                .map(|&c| {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (x, y) = if c % 2 == 0 {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let (x, y) = (x + 2.0 * (c / 2) as f64, y);
                    (0..p.seq_len)
                        .flat_map(|_| [x + noise.sample(&mut rng), y + noise.sample(&mut rng)])
                        .collect()
                })
                .collect();
            Rows::Features { values, dim: 2 }
        }
    };
    Dataset::new(rows, labels, p.classes, p.seq_len)
}

/// Relabels `data` by a random linear readout of the frozen model's last
/// layer, so labels depend only on deep features. Scores are centered per
/// class so every class receives rows.
pub fn deep_readout_labels<S: Scalar>(
    stack: &ModelStack<S>,
    data: &Dataset,
    seed: u64,
) -> Result<Dataset> {
    let c = data.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let readout = Tensor::<S>::uniform(vec![stack.hidden(), c], 1.0, &mut rng);
    let hidden = model::infer_hidden(stack, &data.all()?, stack.num_layers())?;
    let pooled = crate::kernels::mean_tokens(&hidden)?;
    let scores = crate::kernels::matmul(&pooled, &readout)?;
    let n = data.len();
    let mut means = vec![0.0; c];
    for row in scores.data().chunks(c) {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v.to_f64_lossy() / n as f64;
        }
    }
    let labels = scores
        .data()
        .chunks(c)
        .map(|row| {
            let centered: Vec<f64> = row.iter().zip(&means).map(|(v, m)| v.to_f64_lossy() - m).collect();
            (0..c)
                .max_by(|&a, &b| centered[a].total_cmp(&centered[b]))
                .unwrap_or(0)
        })
        .collect();
    data.with_labels(labels)
}

/// Shuffled split into `(train, eval)` row indices.
pub fn train_eval_split(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((n as f64) * eval_fraction).round() as usize;
    let eval = idx.split_off(n - n_eval.min(n));
    (idx, eval)
}

/// Token → id map. Ids 0 and 1 are reserved for padding and unknown tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    to_id: BTreeMap<String, usize>,
    to_token: BTreeMap<usize, String>,
}

impl Vocab {
    pub fn new(to_id: BTreeMap<String, usize>) -> Result<Self> {
        let mut to_token = BTreeMap::new();
        for (tok, &id) in &to_id {
            if id == PAD_ID || id == OOV_ID {
                return Err(Error::InvalidArgument(format!(
                    "token `{tok}` uses reserved id {id}"
                )));
            }
            if to_token.insert(id, tok.clone()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab id {id}")));
            }
        }
        Ok(Vocab { to_id, to_token })
    }

    /// Reads a JSON object mapping tokens to ids.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, usize> =
            serde_json::from_str(&text).map_err(|e| Error::Dataset {
                path: path.to_path_buf(),
                line: e.line(),
                msg: format!("vocab must be a JSON object of token -> id: {e}"),
            })?;
        Self::new(map)
    }

    /// Number of ids the embedding table must cover.
    pub fn size(&self) -> usize {
        self.to_token.keys().next_back().map_or(2, |&m| m + 1)
    }

    pub fn encode(&self, text: &str, seq_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .take(seq_len)
            .map(|t| self.to_id.get(t).copied().unwrap_or(OOV_ID))
            .collect();
        ids.resize(seq_len, PAD_ID);
        ids
    }

    /// Inverse of [`Vocab::encode`], dropping padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|id| self.to_token.get(id).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Deserialize)]
struct JsonlRow {
    text: String,
    label: usize,
}

/// Loads `{"text": ..., "label": ...}` lines with whitespace tokenization.
pub fn load_jsonl_dataset(
    path: &Path,
    vocab: &Vocab,
    seq_len: usize,
    classes: usize,
) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Dataset {
            path: path.to_path_buf(),
            line: k + 1,
            msg,
        };
        let row: JsonlRow = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if row.label >= classes {
            return Err(err(format!("label {} >= {classes} classes", row.label)));
        }
        ids.push(vocab.encode(&row.text, seq_len));
        labels.push(row.label);
    }
    Dataset::new(
        Rows::Tokens {
            ids,
            vocab: vocab.size(),
        },
        labels,
        classes,
        seq_len,
    )
}
