//! Adapter-augmented layered model.
//!
//! A [`ModelStack`] is a frozen embedding plus `L` frozen backbone layers, each
//! followed by a residual bottleneck adapter and carrying its own local
//! classification head, and a final head acting as the model's real output
//! layer. Layers are addressed 1-based throughout the public API.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Activation};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Canonical tensor names, shared by aggregation and checkpoints.
pub mod names {
    pub const EMBED: &str = "embed";
    pub const FINAL_W: &str = "final_head.W";
    pub const FINAL_B: &str = "final_head.b";

    pub fn adapter_down(layer: usize) -> String {
        format!("layer.{layer}.adapter.down")
    }

    pub fn adapter_up(layer: usize) -> String {
        format!("layer.{layer}.adapter.up")
    }

    pub fn head_w(layer: usize) -> String {
        format!("layer.{layer}.head.W")
    }

    pub fn head_b(layer: usize) -> String {
        format!("layer.{layer}.head.b")
    }

    pub fn backbone(layer: usize, part: &str) -> String {
        format!("backbone.{layer}.{part}")
    }

    pub fn is_backbone(name: &str) -> bool {
        name == EMBED || name.starts_with("backbone.")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Mlp,
    AttnLite,
}

/// What the embedding consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Token ids in `[0, vocab)`.
    Tokens { vocab: usize },
    /// Dense per-token feature vectors of width `dim`.
    Features { dim: usize },
}

/// Architecture and initialization recipe for a [`ModelStack`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub layers: usize,
    pub hidden: usize,
    pub adapter_dim: usize,
    pub ffn: usize,
    pub kind: LayerKind,
    pub input: InputKind,
    pub classes: usize,
    /// Multiplier on the residual-branch output weights of every backbone layer.
    pub backbone_scale: f64,
    pub adapter_activation: Activation,
}

impl StackSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.layers == 0 || self.hidden == 0 || self.ffn == 0 || self.classes < 2 {
            return bad("layers, hidden and ffn must be positive and classes >= 2");
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.hidden {
            return bad("adapter bottleneck must satisfy 1 <= v < u");
        }
        match self.input {
            InputKind::Tokens { vocab: 0 } | InputKind::Features { dim: 0 } => {
                bad("input vocabulary / feature width must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Bottleneck adapter `h + f(h W_down) W_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<S> {
    pub down: Tensor<S>,
    pub up: Tensor<S>,
    pub activation: Activation,
}

/// Fresh adapter: `W_down ~ U(±1/√u)` and `W_up = 0`, so it starts as the identity.
pub fn init_adapter<S: Scalar>(u: usize, v: usize, seed: u64) -> Result<AdapterParams<S>> {
    if v == 0 || v >= u {
        return Err(Error::InvalidArgument(format!(
            "adapter bottleneck must satisfy 1 <= v < u, got u={u} v={v}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(AdapterParams {
        down: Tensor::uniform(vec![u, v], 1.0 / (u as f64).sqrt(), &mut rng),
        up: Tensor::zeros(vec![v, u]),
        activation: Activation::Gelu,
    })
}

/// Mean-pool over tokens followed by an affine map to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHead<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LocalHead<S> {
    pub fn zeros(u: usize, classes: usize) -> Self {
        LocalHead {
            w: Tensor::zeros(vec![u, classes]),
            b: Tensor::zeros(vec![classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

/// `x + gelu(LN(x) W1 + b1) W2 + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock<S> {
    pub ln: Norm<S>,
    pub up: Affine<S>,
    pub down: Affine<S>,
}

/// Single-head pre-norm self-attention followed by an [`MlpBlock`]-style FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnBlock<S> {
    pub ln1: Norm<S>,
    pub q: Tensor<S>,
    pub k: Tensor<S>,
    pub v: Tensor<S>,
    pub o: Tensor<S>,
    pub ffn: MlpBlock<S>,
}

/// Frozen backbone layer. Never trained in any mode.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneLayer<S> {
    Mlp(MlpBlock<S>),
    AttnLite(AttnBlock<S>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlot<S> {
    pub backbone: BackboneLayer<S>,
    pub adapter: AdapterParams<S>,
    pub head: LocalHead<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelStack<S> {
    pub input: InputKind,
    pub embed: Tensor<S>,
    pub layers: Vec<LayerSlot<S>>,
    pub final_head: LocalHead<S>,
}

/// Model inputs for one mini-batch, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchInput {
    Tokens { ids: Vec<usize>, seq: usize },
    Features { values: Vec<f64>, seq: usize, dim: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub input: BatchInput,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        match &self.input {
            BatchInput::Tokens { seq, .. } | BatchInput::Features { seq, .. } => *seq,
        }
    }
}

fn norm_init<S: Scalar>(u: usize) -> Norm<S> {
    Norm {
        gain: Tensor::full(vec![u], S::one()),
        bias: Tensor::zeros(vec![u]),
    }
}

fn mlp_init<S: Scalar>(u: usize, f: usize, out_scale: f64, rng: &mut ChaCha8Rng) -> MlpBlock<S> {
    MlpBlock {
        ln: norm_init(u),
        up: Affine {
            w: Tensor::uniform(vec![u, f], (3.0 / u as f64).sqrt(), rng),
            b: Tensor::uniform(vec![f], 0.1, rng),
        },
        down: Affine {
            w: Tensor::uniform(vec![f, u], out_scale * (3.0 / f as f64).sqrt(), rng),
            b: Tensor::zeros(vec![u]),
        },
    }
}

impl<S: Scalar> ModelStack<S> {
    /// Deterministic random initialization. The backbone stands in for a
    /// pre-trained model; adapters start as identities and heads at zero.
    pub fn init(spec: &StackSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = spec.hidden;
        let embed = match spec.input {
            InputKind::Tokens { vocab } => Tensor::uniform(vec![vocab, u], 1.0, &mut rng),
            InputKind::Features { dim } => {
                Tensor::uniform(vec![dim, u], (3.0 / dim as f64).sqrt(), &mut rng)
            }
        };
        let mut layers = Vec::with_capacity(spec.layers);
        for i in 1..=spec.layers {
            let backbone = match spec.kind {
                LayerKind::Mlp => {
                    BackboneLayer::Mlp(mlp_init(u, spec.ffn, spec.backbone_scale, &mut rng))
                }
                LayerKind::AttnLite => {
                    let b = (3.0 / u as f64).sqrt();
                    BackboneLayer::AttnLite(AttnBlock {
                        ln1: norm_init(u),
                        q: Tensor::uniform(vec![u, u], b, &mut rng),
                        k: Tensor::uniform(vec![u, u], b, &mut rng),
                        v: Tensor::uniform(vec![u, u], b, &mut rng),
                        o: Tensor::uniform(vec![u, u], spec.backbone_scale * b, &mut rng),
                        ffn: mlp_init(u, spec.ffn, spec.backbone_scale, &mut rng),
                    })
                }
            };
            let adapter_seed = seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64));
            let mut adapter = init_adapter(u, spec.adapter_dim, adapter_seed)?;
            adapter.activation = spec.adapter_activation;
            layers.push(LayerSlot {
                backbone,
                adapter,
                head: LocalHead::zeros(u, spec.classes),
            });
        }
        Ok(ModelStack {
            input: spec.input,
            embed,
            layers,
            final_head: LocalHead::zeros(u, spec.classes),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.embed.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.final_head.classes()
    }

    pub fn layer(&self, i: usize) -> Result<&LayerSlot<S>> {
        i.checked_sub(1)
            .and_then(|k| self.layers.get(k))
            .ok_or_else(|| Error::InvalidArgument(format!("layer {i} outside 1..={}", self.layers.len())))
    }

    /// Every tensor under its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = vec![(names::EMBED.to_string(), &self.embed)];
        for (k, slot) in self.layers.iter().enumerate() {
            let i = k + 1;
            backbone_parts(&slot.backbone, |part, t| out.push((names::backbone(i, part), t)));
        }
        for (k, slot) in self.layers.iter().enumerate() {
            let i = k + 1;
            out.push((names::adapter_down(i), &slot.adapter.down));
            out.push((names::adapter_up(i), &slot.adapter.up));
            out.push((names::head_w(i), &slot.head.w));
            out.push((names::head_b(i), &slot.head.b));
        }
        out.push((names::FINAL_W.to_string(), &self.final_head.w));
        out.push((names::FINAL_B.to_string(), &self.final_head.b));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Mutable access to the trainable (non-backbone) tensors by name.
    pub fn trainable_tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        match name {
            names::FINAL_W => return Some(&mut self.final_head.w),
            names::FINAL_B => return Some(&mut self.final_head.b),
            _ => {}
        }
        let rest = name.strip_prefix("layer.")?;
        let (idx, part) = rest.split_once('.')?;
        let i: usize = idx.parse().ok()?;
        let slot = self.layers.get_mut(i.checked_sub(1)?)?;
        match part {
            "adapter.down" => Some(&mut slot.adapter.down),
            "adapter.up" => Some(&mut slot.adapter.up),
            "head.W" => Some(&mut slot.head.w),
            "head.b" => Some(&mut slot.head.b),
            _ => None,
        }
    }

    /// Digest of the embedding and every backbone tensor.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named_tensors() {
            if names::is_backbone(&name) {
                name.hash(&mut h);
                t.shape().hash(&mut h);
                for v in t.data() {
                    v.to_f64_lossy().to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Element count of every tensor.
    pub fn total_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter count of one backbone layer (used by memory accounting).
    pub fn backbone_layer_params(&self, i: usize) -> Result<usize> {
        let mut n = 0;
        backbone_parts(&self.layer(i)?.backbone, |_, t| n += t.numel());
        Ok(n)
    }

    /// Rebuilds a stack from a complete name → tensor map (checkpoint load).
    pub fn from_named(input: InputKind, mut map: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let embed = take(names::EMBED)?;
        let mut layers = Vec::new();
        let mut i = 1;
        while let Ok(down) = take(&names::adapter_down(i)) {
            let part = |p: &str| names::backbone(i, p);
            let mut take_part = |p: &str| take(&part(p));
            let backbone = if let Ok(q) = take_part("attn.q") {
                BackboneLayer::AttnLite(AttnBlock {
                    ln1: Norm {
                        gain: take_part("ln1.gain")?,
                        bias: take_part("ln1.bias")?,
                    },
                    q,
                    k: take_part("attn.k")?,
                    v: take_part("attn.v")?,
                    o: take_part("attn.o")?,
                    ffn: take_mlp(&mut take_part, "ln2")?,
                })
            } else {
                BackboneLayer::Mlp(take_mlp(&mut take_part, "ln")?)
            };
            let adapter = AdapterParams {
                down,
                up: take(&names::adapter_up(i))?,
                activation: Activation::Gelu,
            };
            let head = LocalHead {
                w: take(&names::head_w(i))?,
                b: take(&names::head_b(i))?,
            };
            layers.push(LayerSlot {
                backbone,
                adapter,
                head,
            });
            i += 1;
        }
        let final_head = LocalHead {
            w: take(names::FINAL_W)?,
            b: take(names::FINAL_B)?,
        };
        if let Some(name) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
        }
        let stack = ModelStack {
            input,
            embed,
            layers,
            final_head,
        };
        stack.check_shapes()?;
        Ok(stack)
    }

    fn check_shapes(&self) -> Result<()> {
        let u = self.hidden();
        let c = self.classes();
        let bad = |what: String| Err(Error::Checkpoint(format!("inconsistent shape: {what}")));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (k, slot) in self.layers.iter().enumerate() {
            let a = &slot.adapter;
            if a.down.rank() != 2 || a.down.shape()[0] != u || a.up.shape() != [a.down.shape()[1], u] {
                return bad(format!("adapter of layer {}", k + 1));
            }
            if slot.head.w.shape() != [u, c] || slot.head.b.shape() != [c] {
                return bad(format!("head of layer {}", k + 1));
            }
        }
        if self.final_head.w.shape() != [u, c] {
            return bad("final head".into());
        }
        Ok(())
    }
}

fn take_mlp<S: Scalar>(
    take: &mut impl FnMut(&str) -> Result<Tensor<S>>,
    ln: &str,
) -> Result<MlpBlock<S>> {
    Ok(MlpBlock {
        ln: Norm {
            gain: take(&format!("{ln}.gain"))?,
            bias: take(&format!("{ln}.bias"))?,
        },
        up: Affine {
            w: take("ffn.w1")?,
            b: take("ffn.b1")?,
        },
        down: Affine {
            w: take("ffn.w2")?,
            b: take("ffn.b2")?,
        },
    })
}

fn mlp_parts<'a, S>(m: &'a MlpBlock<S>, ln: &str, f: &mut impl FnMut(&str, &'a Tensor<S>)) {
    f(&format!("{ln}.gain"), &m.ln.gain);
    f(&format!("{ln}.bias"), &m.ln.bias);
    f("ffn.w1", &m.up.w);
    f("ffn.b1", &m.up.b);
    f("ffn.w2", &m.down.w);
    f("ffn.b2", &m.down.b);
}

fn backbone_parts<'a, S>(layer: &'a BackboneLayer<S>, mut f: impl FnMut(&str, &'a Tensor<S>)) {
    match layer {
        BackboneLayer::Mlp(m) => mlp_parts(m, "ln", &mut f),
        BackboneLayer::AttnLite(a) => {
            f("ln1.gain", &a.ln1.gain);
            f("ln1.bias", &a.ln1.bias);
            f("attn.q", &a.q);
            f("attn.k", &a.k);
            f("attn.v", &a.v);
            f("attn.o", &a.o);
            mlp_parts(&a.ffn, "ln2", &mut f);
        }
    }
}

/// A tape plus the set of parameter names that are trainable on it.
///
/// Parameters outside the trainable set enter the tape as frozen constants.
pub struct Graph<S> {
    pub tape: Tape<S>,
    trainable: BTreeSet<String>,
    bound: BTreeMap<String, Var>,
}

impl<S: Scalar> Graph<S> {
    pub fn new(trainable: BTreeSet<String>) -> Self {
        Graph {
            tape: Tape::new(),
            trainable,
            bound: BTreeMap::new(),
        }
    }

    /// Graph with nothing trainable: inference mode.
    pub fn inference() -> Self {
        Self::new(BTreeSet::new())
    }

    pub fn param(&mut self, name: String, t: &Tensor<S>) -> Var {
        if let Some(&v) = self.bound.get(&name) {
            return v;
        }
        if self.trainable.contains(&name) {
            let v = self.tape.leaf(t.clone(), true);
            self.bound.insert(name, v);
            v
        } else {
            self.tape.constant(t.clone())
        }
    }

    /// Trainable parameters that were actually bound during the forward pass.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    /// Gradient of a trainable parameter; `None` when the loss did not reach it.
    pub fn param_grad(&self, name: &str) -> Option<&Tensor<S>> {
        self.bound.get(name).and_then(|&v| self.tape.grad(v))
    }
}

fn check_width<S: Scalar>(h: &Tensor<S>, u: usize, op: &'static str) -> Result<()> {
    if h.rank() != 3 || h.shape()[2] != u {
        return Err(Error::Shape {
            op,
            lhs: h.shape().to_vec(),
            rhs: vec![u],
        });
    }
    Ok(())
}

/// Applies `h + f(h W_down) W_up` on the graph.
pub fn adapter_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    h: Var,
    down: Var,
    up: Var,
    act: Activation,
) -> Result<Var> {
    let hv = g.tape.value(h);
    let u = g.tape.value(down).shape()[0];
    check_width(hv, u, "adapter_forward")?;
    let shape = hv.shape().to_vec();
    let rows = shape[0] * shape[1];
    let flat = g.tape.reshape(h, vec![rows, u])?;
    let z = g.tape.matmul(flat, down)?;
    let z = g.tape.activation(z, act)?;
    let z = g.tape.matmul(z, up)?;
    let z = g.tape.reshape(z, shape)?;
    g.tape.add(h, z)
}

fn adapter_layer<S: Scalar>(g: &mut Graph<S>, stack: &ModelStack<S>, i: usize, h: Var) -> Result<Var> {
    let a = &stack.layer(i)?.adapter;
    let down = g.param(names::adapter_down(i), &a.down);
    let up = g.param(names::adapter_up(i), &a.up);
    adapter_on_graph(g, h, down, up, a.activation)
}

/// Standalone adapter transform `h + f(h W_down) W_up` for `h: [b, t, u]`.
pub fn adapter_forward<S: Scalar>(h: &Tensor<S>, a: &AdapterParams<S>) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let hv = g.tape.constant(h.clone());
    let down = g.tape.constant(a.down.clone());
    let up = g.tape.constant(a.up.clone());
    let out = adapter_on_graph(&mut g, hv, down, up, a.activation)?;
    Ok(g.tape.value(out).clone())
}

fn mlp_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    m: &MlpBlock<S>,
    prefix: &dyn Fn(&str) -> String,
    ln: &str,
    x: Var,
) -> Result<Var> {
    let shape = g.tape.value(x).shape().to_vec();
    let u = shape[2];
    let rows = shape[0] * shape[1];
    let gain = g.param(prefix(&format!("{ln}.gain")), &m.ln.gain);
    let bias = g.param(prefix(&format!("{ln}.bias")), &m.ln.bias);
    let w1 = g.param(prefix("ffn.w1"), &m.up.w);
    let b1 = g.param(prefix("ffn.b1"), &m.up.b);
    let w2 = g.param(prefix("ffn.w2"), &m.down.w);
    let b2 = g.param(prefix("ffn.b2"), &m.down.b);
    let n = g.tape.layer_norm(x, gain, bias, S::from_f64_lossy(LN_EPS))?;
    let n = g.tape.reshape(n, vec![rows, u])?;
    let z = g.tape.matmul(n, w1)?;
    let z = g.tape.add_bias(z, b1)?;
    let z = g.tape.gelu(z)?;
    let z = g.tape.matmul(z, w2)?;
    let z = g.tape.add_bias(z, b2)?;
    let z = g.tape.reshape(z, shape)?;
    g.tape.add(x, z)
}

fn backbone_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    layer: &BackboneLayer<S>,
    i: usize,
    x: Var,
) -> Result<Var> {
    let prefix = |p: &str| names::backbone(i, p);
    match layer {
        BackboneLayer::Mlp(m) => mlp_on_graph(g, m, &prefix, "ln", x),
        BackboneLayer::AttnLite(a) => {
            let shape = g.tape.value(x).shape().to_vec();
            let (b, t, u) = (shape[0], shape[1], shape[2]);
            let gain = g.param(prefix("ln1.gain"), &a.ln1.gain);
            let bias = g.param(prefix("ln1.bias"), &a.ln1.bias);
            let wq = g.param(prefix("attn.q"), &a.q);
            let wk = g.param(prefix("attn.k"), &a.k);
            let wv = g.param(prefix("attn.v"), &a.v);
            let wo = g.param(prefix("attn.o"), &a.o);
            let n = g.tape.layer_norm(x, gain, bias, S::from_f64_lossy(LN_EPS))?;
            let n = g.tape.reshape(n, vec![b * t, u])?;
            let q = g.tape.matmul(n, wq)?;
            let k = g.tape.matmul(n, wk)?;
            let v = g.tape.matmul(n, wv)?;
            let q = g.tape.reshape(q, vec![b, t, u])?;
            let k = g.tape.reshape(k, vec![b, t, u])?;
            let v = g.tape.reshape(v, vec![b, t, u])?;
            let kt = g.tape.transpose_last2(k)?;
            let scores = g.tape.batched_matmul(q, kt)?;
            let scores = g.tape.scale(scores, S::one() / S::from_usize_lossy(u).sqrt())?;
            let attn = g.tape.softmax_last(scores)?;
            let ctx = g.tape.batched_matmul(attn, v)?;
            let ctx = g.tape.reshape(ctx, vec![b * t, u])?;
            let o = g.tape.matmul(ctx, wo)?;
            let o = g.tape.reshape(o, shape)?;
            let x1 = g.tape.add(x, o)?;
            mlp_on_graph(g, &a.ffn, &prefix, "ln2", x1)
        }
    }
}

/// Backbone layer `i` followed by its adapter.
pub fn layer_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    i: usize,
    h: Var,
) -> Result<Var> {
    let slot = stack.layer(i)?;
    let z = backbone_on_graph(g, &slot.backbone, i, h)?;
    adapter_layer(g, stack, i, z)
}

/// Runs layer `i` in inference mode; all intermediates are dropped on return.
pub fn layer_inference<S: Scalar>(stack: &ModelStack<S>, i: usize, h: &Tensor<S>) -> Result<Tensor<S>> {
    check_width(h, stack.hidden(), "layer")?;
    let mut g = Graph::inference();
    let x = g.tape.constant(h.clone());
    let out = layer_on_graph(&mut g, stack, i, x)?;
    Ok(g.tape.value(out).clone())
}

/// Embedding lookup (tokens) or projection (features): `[b, t, u]`.
pub fn embed<S: Scalar>(stack: &ModelStack<S>, batch: &Batch) -> Result<Tensor<S>> {
    let u = stack.hidden();
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    match (&batch.input, stack.input) {
        (BatchInput::Tokens { ids, seq }, InputKind::Tokens { vocab }) => {
            if ids.len() != b * seq {
                return Err(Error::Shape {
                    op: "embed",
                    lhs: vec![ids.len()],
                    rhs: vec![b, *seq],
                });
            }
            let table = stack.embed.data();
            let mut out = Vec::with_capacity(ids.len() * u);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::InvalidArgument(format!("token id {id} >= vocab {vocab}")));
                }
                out.extend_from_slice(&table[id * u..(id + 1) * u]);
            }
            Ok(Tensor::from_parts_unchecked(vec![b, *seq, u], out))
        }
        (BatchInput::Features { values, seq, dim }, InputKind::Features { dim: d }) => {
            if *dim != d || values.len() != b * seq * dim {
                return Err(Error::Shape {
                    op: "embed",
                    lhs: vec![values.len()],
                    rhs: vec![b, *seq, d],
                });
            }
            let x = Tensor::<S>::from_f64(vec![b * seq, d], values)?;
            kernels::matmul(&x, &stack.embed)?.reshape(vec![b, *seq, u])
        }
        _ => Err(Error::InvalidArgument(
            "batch input kind does not match the model's embedding".into(),
        )),
    }
}

/// Inclusive, 1-based range of layers whose activations are kept for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub lo: usize,
    pub hi: usize,
}

impl LayerSpan {
    pub fn new(lo: usize, hi: usize) -> Self {
        LayerSpan { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi + 1 - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.lo..=self.hi).contains(&i)
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

/// One layer whose input activation was freed right after use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Released {
    pub layer: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReleaseTrace {
    pub released: Vec<Released>,
}

impl ReleaseTrace {
    pub fn count(&self) -> usize {
        self.released.len()
    }
}

/// Embeds `batch` and runs layers `1..=upto`.
///
/// Layers below `active.lo` (all layers when `active` is `None`) run in
/// inference mode and their activations are released immediately; from
/// `active.lo` on, computation is recorded on `g` so gradients can reach the
/// trainable parameters of `g`.
pub fn forward_through<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    batch: &Batch,
    upto: usize,
    active: Option<LayerSpan>,
) -> Result<(Var, ReleaseTrace)> {
    if upto > stack.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "upto={upto} exceeds {} layers",
            stack.num_layers()
        )));
    }
    if let Some(span) = active {
        if span.is_empty() || span.lo == 0 || span.hi > upto {
            return Err(Error::InvalidArgument(format!(
                "active layers [{}, {}] not within 1..={upto}",
                span.lo, span.hi
            )));
        }
    }
    let first_recorded = active.map_or(upto + 1, |s| s.lo);
    let mut trace = ReleaseTrace::default();
    let mut h = embed(stack, batch)?;
    for i in 1..first_recorded.min(upto + 1) {
        let next = layer_inference(stack, i, &h)?;
        trace.released.push(Released {
            layer: i,
            bytes: h.numel() * S::BYTES,
        });
        h = next;
    }
    let mut v = g.tape.constant(h);
    for i in first_recorded..=upto {
        v = layer_on_graph(g, stack, i, v)?;
    }
    Ok((v, trace))
}

/// Hidden state after `upto` layers, entirely in inference mode.
pub fn infer_hidden<S: Scalar>(stack: &ModelStack<S>, batch: &Batch, upto: usize) -> Result<Tensor<S>> {
    let mut g = Graph::inference();
    let (v, _) = forward_through(&mut g, stack, batch, upto, None)?;
    Ok(g.tape.value(v).clone())
}

fn head_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    head: &LocalHead<S>,
    w_name: String,
    b_name: String,
    hidden: Var,
) -> Result<Var> {
    let w = g.param(w_name, &head.w);
    let b = g.param(b_name, &head.b);
    let pooled = g.tape.mean_tokens(hidden)?;
    let logits = g.tape.matmul(pooled, w)?;
    g.tape.add_bias(logits, b)
}

/// Cross-entropy of layer `m`'s local head on the hidden state at layer `m`.
pub fn local_loss<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    m: usize,
    hidden: Var,
    labels: &[usize],
) -> Result<Var> {
    let head = &stack.layer(m)?.head;
    let logits = head_on_graph(g, head, names::head_w(m), names::head_b(m), hidden)?;
    g.tape.softmax_cross_entropy(logits, labels)
}

/// Cross-entropy of the final head applied to `hidden`.
pub fn final_loss<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    hidden: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head_on_graph(
        g,
        &stack.final_head,
        names::FINAL_W.into(),
        names::FINAL_B.into(),
        hidden,
    )?;
    g.tape.softmax_cross_entropy(logits, labels)
}

/// Global loss through the lightweight auxiliary branch: adapters
/// `m+1..=L` (backbones skipped) and then the final head.
///
/// Whether those adapters are trainable is decided by the graph's trainable
/// set; chain training leaves them frozen so gradients only pass through.
pub fn aux_branch_loss<S: Scalar>(
    g: &mut Graph<S>,
    stack: &ModelStack<S>,
    m: usize,
    hidden: Var,
    labels: &[usize],
) -> Result<Var> {
    let l = stack.num_layers();
    if m == 0 || m >= l {
        return Err(Error::InvalidArgument(format!(
            "auxiliary branch needs 1 <= m < L, got m={m}, L={l}"
        )));
    }
    let mut h = hidden;
    for j in m + 1..=l {
        h = adapter_layer(g, stack, j, h)?;
    }
    final_loss(g, stack, h, labels)
}

/// Final-head logits for a batch, in inference mode.
pub fn predict<S: Scalar>(stack: &ModelStack<S>, batch: &Batch) -> Result<Tensor<S>> {
    let hidden = infer_hidden(stack, batch, stack.num_layers())?;
    let pooled = kernels::mean_tokens(&hidden)?;
    let logits = kernels::matmul(&pooled, &stack.final_head.w)?;
    kernels::add_bias(&logits, &stack.final_head.b)
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy<S: Scalar>(stack: &ModelStack<S>, batch: &Batch) -> Result<f64> {
    let logits = predict(stack, batch)?;
    let c = logits.last_dim();
    let correct = logits
        .data()
        .chunks(c)
        .zip(&batch.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
