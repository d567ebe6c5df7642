//! Forward kernels and their vector-Jacobian products.
//!
//! Everything here is a pure function on [`Tensor`]s. The tape in
//! [`crate::tape`] records which kernel produced a value and replays the
//! matching backward kernel; inference paths call the forward kernels directly.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(shape_err(op, t.shape(), &[])),
    }
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = dims2("matmul", a)?;
    let (k2, n) = dims2("matmul", b)?;
    if k != k2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// `a · bᵀ` for `a: [m, n]`, `b: [k, n]`.
pub fn matmul_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = dims2("matmul_bt", a)?;
    let (k, n2) = dims2("matmul_bt", b)?;
    if n != n2 {
        return Err(shape_err("matmul_bt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let arow = &ad[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &bd[j * n..(j + 1) * n];
            out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, k], out))
}

/// `aᵀ · b` for `a: [m, k]`, `b: [m, n]`.
pub fn matmul_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = dims2("matmul_at", a)?;
    let (m2, n) = dims2("matmul_at", b)?;
    if m != m2 {
        return Err(shape_err("matmul_at", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![k, n], out))
}

fn split_batch(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, m, n] => Ok((b, m, n)),
        _ => Err(shape_err(op, t.shape(), &[])),
    }
}

/// Applies a 2-D kernel independently to each leading batch slice.
fn batched<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(&Tensor<S>, &Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Tensor<S>> {
    let (ba, ma, na) = split_batch(a, op)?;
    let (bb, mb, nb) = split_batch(b, op)?;
    if ba != bb {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    let mut data = Vec::new();
    let mut inner = vec![];
    for i in 0..ba {
        let sa = Tensor::from_parts_unchecked(
            vec![ma, na],
            a.data()[i * ma * na..(i + 1) * ma * na].to_vec(),
        );
        let sb = Tensor::from_parts_unchecked(
            vec![mb, nb],
            b.data()[i * mb * nb..(i + 1) * mb * nb].to_vec(),
        );
        let r = f(&sa, &sb)?;
        inner = r.shape().to_vec();
        data.extend_from_slice(r.data());
    }
    let mut shape = vec![ba];
    shape.extend(inner);
    if ba == 0 {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// `[B, m, k] x [B, k, n] -> [B, m, n]`
pub fn batched_matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    batched("batched_matmul", a, b, matmul)
}

pub fn batched_matmul_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    batched("batched_matmul", a, b, matmul_bt)
}

pub fn batched_matmul_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    batched("batched_matmul", a, b, matmul_at)
}

/// Swaps the last two axes of a rank-3 tensor.
pub fn transpose_last2<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, m, n) = split_batch(x, "transpose")?;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    for s in 0..b {
        let base = s * m * n;
        for j in 0..n {
            for i in 0..m {
                out.push(d[base + i * n + j]);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![b, n, m], out))
}

/// Elementwise binary op with the two supported broadcasts: equal shapes, or
/// one operand holding a single element.
pub fn broadcast_binary<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts_unchecked(a.shape().to_vec(), data))
    } else if b.numel() == 1 {
        let y = b.data()[0];
        Ok(Tensor::from_parts_unchecked(
            a.shape().to_vec(),
            a.data().iter().map(|&x| f(x, y)).collect(),
        ))
    } else if a.numel() == 1 {
        let x = a.data()[0];
        Ok(Tensor::from_parts_unchecked(
            b.shape().to_vec(),
            b.data().iter().map(|&y| f(x, y)).collect(),
        ))
    } else {
        Err(shape_err(op, a.shape(), b.shape()))
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
pub fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if grad.shape() == shape {
        grad.clone()
    } else {
        Tensor::from_parts_unchecked(shape.to_vec(), vec![grad.sum()])
    }
}

/// `x[..., d] + bias[d]`
pub fn add_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let d = bias.numel();
    if bias.rank() != 1 || x.last_dim() != d || x.rank() == 0 {
        return Err(shape_err("add_bias", x.shape(), bias.shape()));
    }
    let bd = bias.data();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
        .collect();
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), data))
}

/// Column sums over all leading axes: the bias gradient of [`add_bias`].
pub fn sum_rows<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let d = g.last_dim();
    let mut out = vec![S::zero(); d];
    for row in g.data().chunks(d) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts_unchecked(vec![d], out)
}

/// Constant for the tanh approximation of GELU.
fn gelu_c<S: Scalar>() -> S {
    S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt())
}

const GELU_CUBIC: f64 = 0.044715;

/// `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let k = S::from_f64_lossy(GELU_CUBIC);
    half * x * (S::one() + (gelu_c::<S>() * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let half = S::from_f64_lossy(0.5);
    let k = S::from_f64_lossy(GELU_CUBIC);
    let c = gelu_c::<S>();
    let th = (c * (x + k * x * x * x)).tanh();
    let three = S::from_f64_lossy(3.0);
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * k * x * x)
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => gelu_scalar(x),
            Activation::Relu => {
                if x > S::zero() {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative; relu'(0) is 0.
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Gelu => gelu_grad_scalar(x),
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                S::one() - t * t
            }
            Activation::Identity => S::one(),
        }
    }
}

/// Intermediate values of [`layer_norm`] retained for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub normed: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Normalizes each row of the last axis, then applies `gain` and `bias`.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(Error::InvalidArgument(
            "layer_norm needs a non-empty last axis".into(),
        ));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    if !(eps > S::zero()) {
        return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
    }
    let dn = S::from_usize_lossy(d);
    let rows = x.numel() / d;
    let mut normed = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.data().chunks(d) {
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let inv = S::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let n = (v - mean) * inv;
            normed.push(n);
            out.push(n * gain.data()[j] + bias.data()[j]);
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts_unchecked(shape.clone(), out),
        LayerNormCache {
            normed: Tensor::from_parts_unchecked(shape, normed),
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<S: Scalar>(
    grad: &Tensor<S>,
    gain: &Tensor<S>,
    cache: &LayerNormCache<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let d = gain.numel();
    let dn = S::from_usize_lossy(d);
    let mut dx = Vec::with_capacity(grad.numel());
    let mut dgain = vec![S::zero(); d];
    let mut dbias = vec![S::zero(); d];
    for ((g, xh), &inv) in grad
        .data()
        .chunks(d)
        .zip(cache.normed.data().chunks(d))
        .zip(&cache.inv_std)
    {
        let mut sum_dxh = S::zero();
        let mut sum_dxh_xh = S::zero();
        for j in 0..d {
            let dxh = g[j] * gain.data()[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
        }
        for j in 0..d {
            let dxh = g[j] * gain.data()[j];
            dx.push(inv / dn * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh));
        }
    }
    (
        Tensor::from_parts_unchecked(grad.shape().to_vec(), dx),
        Tensor::from_parts_unchecked(vec![d], dgain),
        Tensor::from_parts_unchecked(vec![d], dbias),
    )
}

/// Softmax over the last axis, stabilized by subtracting the row maximum.
pub fn softmax_last<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: S = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}

/// VJP of [`softmax_last`] given its output `y`.
pub fn softmax_last_backward<S: Scalar>(grad: &Tensor<S>, y: &Tensor<S>) -> Tensor<S> {
    let d = y.last_dim();
    let mut out = Vec::with_capacity(y.numel());
    for (g, yr) in grad.data().chunks(d).zip(y.data().chunks(d)) {
        let dot: S = g.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        out.extend(g.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
    }
    Tensor::from_parts_unchecked(y.shape().to_vec(), out)
}

/// Mean negative log-softmax of the true class, plus the softmax matrix.
pub fn softmax_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    let (b, c) = dims2("softmax_cross_entropy", logits)?;
    if labels.len() != b || b == 0 {
        return Err(shape_err("softmax_cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut total = S::zero();
    let mut probs = Vec::with_capacity(b * c);
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let z: S = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y];
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    Ok((
        total / S::from_usize_lossy(b),
        Tensor::from_parts_unchecked(vec![b, c], probs),
    ))
}

/// Mean over the token axis: `[b, t, u] -> [b, u]`.
pub fn mean_tokens<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, t, u) = split_batch(x, "mean_tokens")?;
    if t == 0 {
        return Err(shape_err("mean_tokens", x.shape(), &[]));
    }
    let tn = S::from_usize_lossy(t);
    let mut out = vec![S::zero(); b * u];
    for s in 0..b {
        for k in 0..t {
            let row = &x.data()[(s * t + k) * u..(s * t + k + 1) * u];
            for (o, &v) in out[s * u..(s + 1) * u].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    for o in &mut out {
        *o /= tn;
    }
    Ok(Tensor::from_parts_unchecked(vec![b, u], out))
}

pub fn mean_tokens_backward<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    let (b, t, u) = (shape[0], shape[1], shape[2]);
    let tn = S::from_usize_lossy(t);
    let mut out = Vec::with_capacity(b * t * u);
    for s in 0..b {
        let g = &grad.data()[s * u..(s + 1) * u];
        for _ in 0..t {
            out.extend(g.iter().map(|&v| v / tn));
        }
    }
    Tensor::from_parts_unchecked(shape.to_vec(), out)
}
