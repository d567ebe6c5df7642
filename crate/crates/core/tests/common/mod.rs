#![allow(dead_code)]

use chainfed::config::ExperimentConfig;
use chainfed::kernels::Activation;
use chainfed::model::{InputKind, LayerKind, ModelStack, StackSpec};
use chainfed::tape::{Tape, Var};
use chainfed::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_spec(layers: usize, kind: LayerKind) -> StackSpec {
    StackSpec {
        layers,
        hidden: 8,
        adapter_dim: 3,
        ffn: 12,
        kind,
        input: InputKind::Tokens { vocab: 20 },
        classes: 3,
        backbone_scale: 1.0,
        adapter_activation: Activation::Gelu,
    }
}

pub fn toy_stack(layers: usize, kind: LayerKind, seed: u64) -> ModelStack<f64> {
    ModelStack::init(&toy_spec(layers, kind), seed).unwrap()
}

/// Adapter up-projections are zero at init, which hides every gradient that
/// flows through them; give them small random values instead.
pub fn perturb_adapters(stack: &mut ModelStack<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in &mut stack.layers {
        let shape = slot.adapter.up.shape().to_vec();
        slot.adapter.up = Tensor::uniform(shape, 0.3, &mut rng);
    }
    for head in stack
        .layers
        .iter_mut()
        .map(|s| &mut s.head)
        .chain(std::iter::once(&mut stack.final_head))
    {
        let shape = head.w.shape().to_vec();
        head.w = Tensor::uniform(shape, 0.5, &mut rng);
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// HSIC of the two sample sets under linear kernels, evaluated term by term
/// as three expectations over the empirical distribution of the rows.
pub fn hsic_double_sum(x: &[f64], dx: usize, y: &[f64], dy: usize) -> f64 {
    let n = x.len() / dx;
    let dot = |m: &[f64], d: usize, a: usize, b: usize| -> f64 {
        (0..d).map(|c| m[a * d + c] * m[b * d + c]).sum()
    };
    let k = |a, b| dot(x, dx, a, b);
    let l = |a, b| dot(y, dy, a, b);
    let nf = n as f64;
    let mut joint = 0.0;
    let mut ek = 0.0;
    let mut el = 0.0;
    for a in 0..n {
        for b in 0..n {
            joint += k(a, b) * l(a, b);
            ek += k(a, b);
            el += l(a, b);
        }
    }
    joint /= nf * nf;
    ek /= nf * nf;
    el /= nf * nf;
    let mut cross = 0.0;
    for a in 0..n {
        let mk: f64 = (0..n).map(|b| k(a, b)).sum::<f64>() / nf;
        let ml: f64 = (0..n).map(|b| l(a, b)).sum::<f64>() / nf;
        cross += mk * ml;
    }
    cross /= nf;
    joint + ek * el - 2.0 * cross
}

/// A random scalar-valued graph that uses every tape operation.
pub struct RandomGraph {
    pub leaves: Vec<Tensor<f64>>,
    b: usize,
    t: usize,
    u: usize,
    d: usize,
    c: usize,
    act: Activation,
    scale: f64,
    labels: Vec<usize>,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(1..=3);
        let t = rng.random_range(2..=4);
        let u = rng.random_range(2..=5);
        let d = rng.random_range(2..=5);
        let c = rng.random_range(2..=4);
        let act = [
            Activation::Gelu,
            Activation::Relu,
            Activation::Tanh,
            Activation::Identity,
        ][rng.random_range(0..4)];
        let mut leaf = |shape: Vec<usize>, bound: f64| Tensor::uniform(shape, bound, &mut rng);
        let leaves = vec![
            leaf(vec![b, t, u], 1.0),  // x
            leaf(vec![u, d], 1.0),     // w1
            leaf(vec![d], 0.5),        // b1
            leaf(vec![d], 1.0),        // ln gain
            leaf(vec![d], 0.5),        // ln bias
            leaf(vec![b * t, d], 1.0), // elementwise multiplier
            leaf(vec![1], 1.0),        // broadcast scalar
            leaf(vec![d, c], 1.0),     // w2
        ];
        let labels = (0..b).map(|_| rng.random_range(0..c)).collect();
        let scale = rng.random_range(0.3..1.5);
        RandomGraph {
            leaves,
            b,
            t,
            u,
            d,
            c,
            act,
            scale,
            labels,
        }
    }

    /// Builds the graph on `tape`; returns the loss, the leaf vars and the
    /// inputs of every activation node.
    pub fn build(&self, tape: &mut Tape<f64>, leaves: &[Tensor<f64>]) -> (Var, Vec<Var>, Vec<Var>) {
        let (b, t, u, d) = (self.b, self.t, self.u, self.d);
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone(), true)).collect();
        let [x, w1, b1, gain, beta, m, s, w2] = vars[..] else {
            unreachable!()
        };
        let mut act_inputs = Vec::new();
        let h = tape.reshape(x, vec![b * t, u]).unwrap();
        let h = tape.matmul(h, w1).unwrap();
        let h = tape.add_bias(h, b1).unwrap();
        act_inputs.push(h);
        let h = tape.activation(h, self.act).unwrap();
        let h = tape.layer_norm(h, gain, beta, 1e-5).unwrap();
        let h = tape.mul(h, m).unwrap();
        let h = tape.add(h, s).unwrap();
        let h = tape.scale(h, self.scale).unwrap();
        let h3 = tape.reshape(h, vec![b, t, d]).unwrap();
        let ht = tape.transpose_last2(h3).unwrap();
        let scores = tape.batched_matmul(h3, ht).unwrap();
        let attn = tape.softmax_last(scores).unwrap();
        let mixed = tape.batched_matmul(attn, h3).unwrap();
        let res = tape.add(mixed, h3).unwrap();
        let pooled = tape.mean_tokens(res).unwrap();
        let logits = tape.matmul(pooled, w2).unwrap();
        let ce = tape.softmax_cross_entropy(logits, &self.labels).unwrap();
        act_inputs.push(logits);
        let bounded = tape.tanh(logits).unwrap();
        let sq = tape.mul(bounded, bounded).unwrap();
        let reg = tape.sum(sq).unwrap();
        let reg = tape.scale(reg, 0.1).unwrap();
        let loss = tape.add(ce, reg).unwrap();
        (loss, vars, act_inputs)
    }

    pub fn loss_at(&self, leaves: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::new();
        let (loss, _, _) = self.build(&mut tape, leaves);
        tape.value(loss).item().unwrap()
    }

    /// Minimum distance of any ReLU input to its kink (infinite otherwise).
    pub fn kink_margin(&self) -> f64 {
        if self.act != Activation::Relu {
            return f64::INFINITY;
        }
        let mut tape = Tape::new();
        let (_, _, inputs) = self.build(&mut tape, &self.leaves);
        tape.value(inputs[0])
            .data()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    pub fn classes(&self) -> usize {
        self.c
    }
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)` over
/// every leaf element, using central differences with step `h`.
pub fn gradient_check(g: &RandomGraph, h: f64, floor: f64) -> f64 {
    let mut tape = Tape::new();
    let (loss, vars, _) = g.build(&mut tape, &g.leaves);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().data().to_vec();
        for e in 0..g.leaves[k].numel() {
            let mut plus = g.leaves.clone();
            plus[k].data_mut()[e] += h;
            let mut minus = g.leaves.clone();
            minus[k].data_mut()[e] -= h;
            let numeric = (g.loss_at(&plus) - g.loss_at(&minus)) / (2.0 * h);
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Criterion-7 style desk configuration.
pub fn desk_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 1;
    cfg.chain.start_layer = Some(1);
    cfg.chain.lambda = 0.2;
    cfg.federation.fixed_q = Some(2);
    cfg.federation.rounds = rounds;
    cfg
}

/// Small fast configuration for plumbing tests.
pub fn tiny_config(rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 5;
    cfg.model.layers = 3;
    cfg.model.hidden = 8;
    cfg.model.adapter_dim = 2;
    cfg.model.ffn = 12;
    cfg.data.seq_len = 4;
    if let chainfed::config::DataSource::Synthetic { samples, .. } = &mut cfg.data.source {
        *samples = 120;
    }
    cfg.federation.clients = 4;
    cfg.federation.sample = chainfed::config::SampleSize::Count(3);
    cfg.federation.rounds = rounds;
    cfg.chain.start_layer = Some(1);
    cfg.federation.fixed_q = Some(2);
    cfg
}
