//! Chain training: sliding co-tuning windows and the per-stage objective.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, names, Batch, Graph, LayerSpan, ModelStack};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cyclic plan of co-tuning windows over layers `l_start..=layers`.
///
/// The window has `q` layers and advances one layer per round; once its top
/// reaches the last layer it wraps back to `l_start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    l_start: usize,
    layers: usize,
    q: usize,
    positions: Vec<LayerSpan>,
}

impl WindowSchedule {
    pub fn new(l_start: usize, layers: usize, q: usize) -> Result<Self> {
        if q == 0 || l_start == 0 || l_start > layers {
            return Err(Error::InvalidArgument(format!(
                "invalid schedule: L_start={l_start}, L={layers}, Q={q}"
            )));
        }
        let last_lo = l_start.max((layers + 1).saturating_sub(q));
        let positions = (l_start..=last_lo)
            .map(|lo| LayerSpan::new(lo, (lo + q - 1).min(layers)))
            .collect();
        Ok(WindowSchedule {
            l_start,
            layers,
            q,
            positions,
        })
    }

    pub fn l_start(&self) -> usize {
        self.l_start
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn positions(&self) -> &[LayerSpan] {
        &self.positions
    }

    pub fn cycle_len(&self) -> usize {
        self.positions.len()
    }

    /// Window trained in round `r` (1-based); round 1 uses the first position.
    pub fn window_at_round(&self, r: usize) -> LayerSpan {
        self.positions[r.saturating_sub(1) % self.positions.len()]
    }
}

/// How the stage loss is formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// Local head at `top` plus `lambda` times the auxiliary-branch loss.
    Dual { top: usize, lambda: f64 },
    /// Final head on the last layer's output.
    EndToEnd,
}

/// Knobs of the dual loss that do not depend on the window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLossConfig {
    pub lambda: f64,
    /// Train the auxiliary-branch adapters too instead of only passing
    /// gradients through them.
    pub aux_adapters_trainable: bool,
}

impl Default for StageLossConfig {
    fn default() -> Self {
        StageLossConfig {
            lambda: 0.2,
            aux_adapters_trainable: false,
        }
    }
}

/// `local + λ · global`
pub fn dual_objective<S: Scalar>(local: S, global: S, lambda: S) -> S {
    local + lambda * global
}

/// Everything one client needs to run a training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// Forward depth before the objective is applied.
    pub upto: usize,
    /// Recorded layers; layers below run in inference mode.
    pub active: Option<LayerSpan>,
    pub objective: Objective,
    pub trainable: BTreeSet<String>,
}

fn adapter_names(i: usize) -> [String; 2] {
    [names::adapter_down(i), names::adapter_up(i)]
}

fn head_names(i: usize) -> [String; 2] {
    [names::head_w(i), names::head_b(i)]
}

fn final_head_names() -> [String; 2] {
    [names::FINAL_W.to_string(), names::FINAL_B.to_string()]
}

impl Stage {
    /// Chain stage for `window`: adapters inside the window, the local head
    /// at its top and the final head are trainable. The window reaching the
    /// last layer uses only the end-to-end loss and needs no local head.
    pub fn chain(layers: usize, window: LayerSpan, cfg: &StageLossConfig) -> Result<Stage> {
        if window.lo == 0 || window.is_empty() || window.hi > layers {
            return Err(Error::InvalidArgument(format!(
                "window [{}, {}] outside 1..={layers}",
                window.lo, window.hi
            )));
        }
        if !(cfg.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        let mut trainable: BTreeSet<String> = window
            .layers()
            .flat_map(adapter_names)
            .collect();
        trainable.extend(final_head_names());
        let objective = if window.hi == layers {
            Objective::EndToEnd
        } else {
            trainable.extend(head_names(window.hi));
            if cfg.aux_adapters_trainable {
                trainable.extend((window.hi + 1..=layers).flat_map(adapter_names));
            }
            Objective::Dual {
                top: window.hi,
                lambda: cfg.lambda,
            }
        };
        Ok(Stage {
            upto: window.hi,
            active: Some(window),
            objective,
            trainable,
        })
    }

    /// Every adapter plus the final head, end-to-end loss.
    pub fn full_adapters(layers: usize) -> Stage {
        let mut trainable: BTreeSet<String> = (1..=layers).flat_map(adapter_names).collect();
        trainable.extend(final_head_names());
        Stage {
            upto: layers,
            active: Some(LayerSpan::new(1, layers)),
            objective: Objective::EndToEnd,
            trainable,
        }
    }

    /// Only the final head, on top of a fully frozen forward pass.
    pub fn linear_probing(layers: usize) -> Stage {
        Stage {
            upto: layers,
            active: None,
            objective: Objective::EndToEnd,
            trainable: final_head_names().into_iter().collect(),
        }
    }
}

/// Builds the stage objective on `g` and returns the loss node.
pub fn stage_loss_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    batch: &Batch,
    stage: &Stage,
) -> Result<crate::tape::Var> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (hidden, _) = model::forward_through(g, stack, batch, stage.upto, stage.active)?;
    match stage.objective {
        Objective::EndToEnd => {
            if stage.upto != stack.num_layers() {
                return Err(Error::InvalidArgument(
                    "end-to-end loss needs the forward pass to reach the last layer".into(),
                ));
            }
            model::final_loss(g, stack, hidden, &batch.labels)
        }
        Objective::Dual { top, lambda } => {
            let local = model::local_loss(g, stack, top, hidden, &batch.labels)?;
            if lambda == 0.0 {
                return Ok(local);
            }
            let global = model::aux_branch_loss(g, stack, top, hidden, &batch.labels)?;
            let weighted = g.tape.scale(global, S::from_f64_lossy(lambda))?;
            g.tape.add(local, weighted)
        }
    }
}

/// Value of the chain stage loss for `window`.
pub fn stage_loss<S: Scalar>(
    stack: &ModelStack<S>,
    batch: &Batch,
    window: LayerSpan,
    cfg: &StageLossConfig,
) -> Result<S> {
    let stage = Stage::chain(stack.num_layers(), window, cfg)?;
    let mut g = Graph::new(stage.trainable.clone());
    let loss = stage_loss_on_graph(&mut g, stack, batch, &stage)?;
    g.tape.value(loss).item()
}

/// Loss value plus gradients of every trainable tensor (zero when the loss
/// does not depend on it).
pub fn stage_gradients<S: Scalar>(
    stack: &ModelStack<S>,
    batch: &Batch,
    stage: &Stage,
) -> Result<(S, BTreeMap<String, Tensor<S>>)> {
    let mut g = Graph::new(stage.trainable.clone());
    let loss = stage_loss_on_graph(&mut g, stack, batch, stage)?;
    g.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for name in &stage.trainable {
        let shape = stack
            .tensor(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown trainable tensor `{name}`")))?
            .shape()
            .to_vec();
        let grad = g.param_grad(name).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        grads.insert(name.clone(), grad);
    }
    Ok((g.tape.value(loss).item()?, grads))
}

/// Named parameter differences uploaded by a client.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamDelta<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamDelta<S> {
    pub fn keys(&self) -> BTreeSet<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    /// Wire size when every element is sent as `f32`.
    pub fn serialized_bytes(&self) -> u64 {
        self.tensors.values().map(|t| 4 * t.numel() as u64).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug)]
pub struct LocalUpdate<S> {
    pub delta: ParamDelta<S>,
    /// Mean of the per-step stage losses.
    pub mean_loss: f64,
}

/// Plain SGD on the stage's trainable set, starting from a snapshot of
/// `stack`. Returns `post − pre` for the trainable tensors only.
pub fn local_update<S: Scalar>(
    stack: &ModelStack<S>,
    data: &Dataset,
    shard: &[usize],
    stage: &Stage,
    opts: &LocalTraining,
    seed: u64,
) -> Result<LocalUpdate<S>> {
    if shard.is_empty() {
        return Err(Error::InvalidArgument("client shard is empty".into()));
    }
    if opts.steps == 0 || opts.batch_size == 0 || !(opts.lr >= 0.0) {
        return Err(Error::InvalidArgument(
            "local training needs steps >= 1, batch_size >= 1, lr >= 0".into(),
        ));
    }
    let mut work = stack.clone();
    let lr = S::from_f64_lossy(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = shard.to_vec();
    let bs = opts.batch_size.min(order.len());
    let per_epoch = order.len().div_ceil(bs);
    let mut total_loss = 0.0;
    for step in 0..opts.steps {
        let k = step % per_epoch;
        if k == 0 && bs < order.len() {
            order.shuffle(&mut rng);
        }
        let rows = &order[k * bs..((k + 1) * bs).min(order.len())];
        let batch = data.batch(rows)?;
        let (loss, grads) = stage_gradients(&work, &batch, stage)?;
        total_loss += loss.to_f64_lossy();
        for (name, grad) in &grads {
            let p = work
                .trainable_tensor_mut(name)
                .ok_or_else(|| Error::KeyMismatch(format!("`{name}` is not trainable")))?;
            p.axpy(-lr, grad)?;
            p.check_finite("sgd update")?;
        }
    }
    let mut tensors = BTreeMap::new();
    for name in &stage.trainable {
        let before = stack.tensor(name).expect("checked by stage_gradients");
        let after = work.tensor(name).expect("same names");
        tensors.insert(name.clone(), after.sub(before)?);
    }
    Ok(LocalUpdate {
        delta: ParamDelta { tensors },
        mean_loss: total_loss / opts.steps as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(s: &WindowSchedule) -> Vec<(usize, usize)> {
        s.positions().iter().map(|w| (w.lo, w.hi)).collect()
    }

    #[test]
    fn window_cycle() {
        let s = WindowSchedule::new(2, 6, 2).unwrap();
        assert_eq!(spans(&s), vec![(2, 3), (3, 4), (4, 5), (5, 6)]);
        assert_eq!(s.window_at_round(1), LayerSpan::new(2, 3));
        assert_eq!(s.window_at_round(4), LayerSpan::new(5, 6));
        assert_eq!(s.window_at_round(5), LayerSpan::new(2, 3));
    }

    #[test]
    fn degenerate_window() {
        let s = WindowSchedule::new(3, 6, 4).unwrap();
        assert_eq!(spans(&s), vec![(3, 6)]);
        assert_eq!(s.window_at_round(7), LayerSpan::new(3, 6));
        let s = WindowSchedule::new(1, 3, 2).unwrap();
        assert_eq!(spans(&s), vec![(1, 2), (2, 3)]);
    }

    #[test]
    fn invalid_schedules() {
        assert!(WindowSchedule::new(0, 4, 2).is_err());
        assert!(WindowSchedule::new(5, 4, 2).is_err());
        assert!(WindowSchedule::new(1, 4, 0).is_err());
    }

    #[test]
    fn dual_arithmetic() {
        assert!((dual_objective(1.0, 0.5, 0.2) - 1.1f64).abs() < 1e-15);
    }

    #[test]
    fn chain_stage_trainable_set() {
        let cfg = StageLossConfig::default();
        let st = Stage::chain(6, LayerSpan::new(2, 3), &cfg).unwrap();
        let expected: BTreeSet<String> = [
            "layer.2.adapter.down",
            "layer.2.adapter.up",
            "layer.3.adapter.down",
            "layer.3.adapter.up",
            "layer.3.head.W",
            "layer.3.head.b",
            "final_head.W",
            "final_head.b",
        ]
        .into_iter()
        .map(String::from)
        .collect();
        assert_eq!(st.trainable, expected);
        assert_eq!(st.objective, Objective::Dual { top: 3, lambda: 0.2 });
        let last = Stage::chain(6, LayerSpan::new(5, 6), &cfg).unwrap();
        assert_eq!(last.objective, Objective::EndToEnd);
        assert!(!last.trainable.iter().any(|n| n.contains(".head.")));
        assert!(Stage::chain(6, LayerSpan::new(5, 7), &cfg).is_err());
        let neg = StageLossConfig {
            lambda: -0.1,
            ..cfg
        };
        assert!(Stage::chain(6, LayerSpan::new(1, 2), &neg).is_err());
    }

    #[test]
    fn baseline_stages() {
        let lp = Stage::linear_probing(4);
        assert_eq!(lp.trainable.len(), 2);
        assert!(lp.trainable.iter().all(|n| n.starts_with("final_head.")));
        let fa = Stage::full_adapters(4);
        assert_eq!(fa.trainable.len(), 4 * 2 + 2);
    }
}
