//! Primitive kernels and their backward rules.
//!
//! Every reduction runs in ascending index order so results are bit-stable.
//! Kernels that operate "per position" treat all leading axes as rows and the
//! last axis as channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macs;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Layer-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
    pub eps: f64,
}

impl NormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            eps: DEFAULT_EPS,
        }
    }
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> NormParams<U> {
        NormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
            eps: self.eps,
        }
    }
}

/// Batch-norm parameters. Running statistics are buffers, not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    /// gamma = 1, beta = 0, running stats (0, 1).
    pub fn neutral(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: DEFAULT_EPS,
            momentum: 0.1,
        }
    }
}

impl<T> BatchNormParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: f(&format!("{prefix}.gamma"), &self.gamma),
            beta: f(&format!("{prefix}.beta"), &self.beta),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

fn check_channels(x: &Tensor, c: usize, op: &'static str, what: &str) -> Result<()> {
    if x.last_dim() != c {
        return Err(Error::contract(
            op,
            format!("input has {} channels, {what} has {c}", x.last_dim()),
        ));
    }
    Ok(())
}

fn check_vector(t: &Tensor, len: usize, op: &'static str, what: &str) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::contract(
            op,
            format!("{what} must have shape [{len}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- layer norm

/// Saved forward state for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, p: &NormParams) -> Result<Tensor> {
    layer_norm_forward(x, &p.gamma, &p.beta, p.eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let c = x.last_dim();
    check_vector(gamma, c, "layer_norm", "gamma")?;
    check_vector(beta, c, "layer_norm", "beta")?;
    if !(eps > 0.0) {
        return Err(Error::contract("layer_norm", "eps must be positive"));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.rows());
    for (r, row) in x.data().chunks_exact(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * g[j] + b[j];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        LayerNormCache {
            xhat: Tensor::new(shape, xhat)?,
            rstd,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gy.last_dim();
    let g = gamma.data();
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gxhat = vec![0.0; c];
    for (r, (gyr, xh)) in gy
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .enumerate()
    {
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..c {
            ggamma[j] += gyr[j] * xh[j];
            gbeta[j] += gyr[j];
            gxhat[j] = gyr[j] * g[j];
            mean_g += gxhat[j];
            mean_gx += gxhat[j] * xh[j];
        }
        mean_g /= c as f64;
        mean_gx /= c as f64;
        let rs = cache.rstd[r];
        for j in 0..c {
            gx[r * c + j] = rs * (gxhat[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (
        Tensor::new(gy.shape().to_vec(), gx).expect("shape preserved"),
        Tensor::from_vec(ggamma),
        Tensor::from_vec(gbeta),
    )
}

// ------------------------------------------------------------------ softmax

/// Softmax along `axis`, max-subtracted.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::contract(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(src[at(k)]);
            }
            let mut s = 0.0;
            for k in 0..len {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                out[at(k)] /= s;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Backward of a last-axis softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let c = y.last_dim();
    let mut gx = vec![0.0; y.len()];
    for ((yr, gr), out) in y
        .data()
        .chunks_exact(c)
        .zip(gy.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).expect("shape preserved")
}

// ------------------------------------------------------------------- affine

/// `y = x·W + b` over the last axis of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 {
        return Err(Error::contract("affine", format!("weight must be rank 2, got {:?}", w.shape())));
    }
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    check_channels(x, cin, "affine", "weight")?;
    check_vector(b, cout, "affine", "bias")?;
    let rows = x.rows();
    macs::add_projection((rows * cin * cout) as u64);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; rows * cout];
    for r in 0..rows {
        let out = &mut y[r * cout..(r + 1) * cout];
        for i in 0..cin {
            let xi = xd[r * cin + i];
            let wrow = &wd[i * cout..(i + 1) * cout];
            for o in 0..cout {
                out[o] += xi * wrow[o];
            }
        }
        for o in 0..cout {
            out[o] += bd[o];
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cout;
    Tensor::new(shape, y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn affine_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let rows = x.rows();
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![0.0; rows * cin];
    let mut gw = vec![0.0; cin * cout];
    let mut gb = vec![0.0; cout];
    for r in 0..rows {
        let g = &gd[r * cout..(r + 1) * cout];
        for o in 0..cout {
            gb[o] += g[o];
        }
        for i in 0..cin {
            let wrow = &wd[i * cout..(i + 1) * cout];
            let xi = xd[r * cin + i];
            let gwrow = &mut gw[i * cout..(i + 1) * cout];
            let mut acc = 0.0;
            for o in 0..cout {
                acc += g[o] * wrow[o];
                gwrow[o] += xi * g[o];
            }
            gx[r * cin + i] = acc;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape preserved"),
        Tensor::new(vec![cin, cout], gw).expect("weight shape"),
        Tensor::from_vec(gb),
    )
}

/// 1×1 convolution on an `[H, W, C_in]` map.
pub fn conv1x1(f: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    f.expect_rank(3, "conv1x1")?;
    affine(f, w, b)
}

// --------------------------------------------------------------- batch norm

/// Batch statistics and normalized values from a train-mode pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch norm over every position of the map; train mode updates running stats.
pub fn batch_norm(f: &Tensor, p: &mut BatchNormParams, mode: BnMode) -> Result<Tensor> {
    match mode {
        BnMode::Eval => batch_norm_eval(f, p),
        BnMode::Train => {
            let (y, cache) = batch_norm_train_forward(f, &p.gamma, &p.beta, p.eps)?;
            update_running_stats(p, &cache.mean, &cache.var);
            Ok(y)
        }
    }
}

pub fn update_running_stats(p: &mut BatchNormParams, mean: &[f64], var: &[f64]) {
    let m = p.momentum;
    for (r, &v) in p.running_mean.data_mut().iter_mut().zip(mean) {
        *r = (1.0 - m) * *r + m * v;
    }
    for (r, &v) in p.running_var.data_mut().iter_mut().zip(var) {
        *r = (1.0 - m) * *r + m * v;
    }
}

fn check_bn(f: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<usize> {
    let c = f.last_dim();
    check_vector(gamma, c, "batch_norm", "gamma")?;
    check_vector(beta, c, "batch_norm", "beta")?;
    if !(eps > 0.0) {
        return Err(Error::contract("batch_norm", "eps must be positive"));
    }
    Ok(c)
}

pub fn batch_norm_eval(f: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let c = check_bn(f, &p.gamma, &p.beta, p.eps)?;
    check_vector(&p.running_mean, c, "batch_norm", "running_mean")?;
    check_vector(&p.running_var, c, "batch_norm", "running_var")?;
    let scale: Vec<f64> = (0..c)
        .map(|j| p.gamma.data()[j] / (p.running_var.data()[j] + p.eps).sqrt())
        .collect();
    let mut y = f.data().to_vec();
    for row in y.chunks_exact_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - p.running_mean.data()[j]) * scale[j] + p.beta.data()[j];
        }
    }
    Tensor::new(f.shape().to_vec(), y)
}

pub fn batch_norm_train_forward(
    f: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let c = check_bn(f, gamma, beta, eps)?;
    let n = f.rows() as f64;
    let mut mean = vec![0.0; c];
    for row in f.data().chunks_exact(c) {
        for j in 0..c {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for row in f.data().chunks_exact(c) {
        for j in 0..c {
            var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = f.data().to_vec();
    let mut y = f.data().to_vec();
    for (xr, yr) in xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
        for j in 0..c {
            xr[j] = (xr[j] - mean[j]) * rstd[j];
            yr[j] = xr[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    let shape = f.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BatchNormCache {
            xhat: Tensor::new(shape, xhat)?,
            rstd,
            mean,
            var,
        },
    ))
}

/// Train-mode backward. Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_train_backward(
    cache: &BatchNormCache,
    gamma: &Tensor,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = gy.last_dim();
    let n = gy.rows() as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for (gr, xr) in gy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for j in 0..c {
            ggamma[j] += gr[j] * xr[j];
            gbeta[j] += gr[j];
        }
    }
    let mut gx = vec![0.0; gy.len()];
    for ((gr, xr), out) in gy
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        for j in 0..c {
            let k = gamma.data()[j] * cache.rstd[j] / n;
            out[j] = k * (n * gr[j] - gbeta[j] - xr[j] * ggamma[j]);
        }
    }
    (
        Tensor::new(gy.shape().to_vec(), gx).expect("shape preserved"),
        Tensor::from_vec(ggamma),
        Tensor::from_vec(gbeta),
    )
}

/// Eval-mode backward. Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_eval_backward(f: &Tensor, p: &BatchNormParams, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gy.last_dim();
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let rstd: Vec<f64> = (0..c)
        .map(|j| 1.0 / (p.running_var.data()[j] + p.eps).sqrt())
        .collect();
    for ((gr, xr), out) in gy
        .data()
        .chunks_exact(c)
        .zip(f.data().chunks_exact(c))
        .zip(gx.chunks_exact_mut(c))
    {
        for j in 0..c {
            let xh = (xr[j] - p.running_mean.data()[j]) * rstd[j];
            ggamma[j] += gr[j] * xh;
            gbeta[j] += gr[j];
            out[j] = gr[j] * p.gamma.data()[j] * rstd[j];
        }
    }
    (
        Tensor::new(gy.shape().to_vec(), gx).expect("shape preserved"),
        Tensor::from_vec(ggamma),
        Tensor::from_vec(gbeta),
    )
}

// ------------------------------------------------------------ elementwise

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    Tensor::new(
        gy.shape().to_vec(),
        x.data()
            .iter()
            .zip(gy.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
    .expect("shape preserved")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward of sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    Tensor::new(
        gy.shape().to_vec(),
        y.data()
            .iter()
            .zip(gy.data())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect(),
    )
    .expect("shape preserved")
}

/// Concatenates along the last axis, keeping input order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::contract(
                "concat_channels",
                format!("leading shape {:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let rows = first.rows();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let c = p.last_dim();
            out.extend_from_slice(&p.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

/// Splits a last-axis gradient back into per-input pieces.
pub fn concat_channels_backward(widths: &[usize], gy: &Tensor) -> Vec<Tensor> {
    let total = gy.last_dim();
    let rows = gy.rows();
    let lead = &gy.shape()[..gy.rank() - 1];
    let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in gy.data().chunks_exact(total) {
        let mut off = 0;
        for (buf, &w) in out.iter_mut().zip(widths) {
            buf.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::new(shape, d).expect("split shape")
        })
        .collect()
}

/// `g·a + (1 − g)·b` with `g` of trailing size 1 broadcast over channels.
pub fn convex_mix(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "convex_mix")?;
    let c = a.last_dim();
    if g.last_dim() != 1 || g.rows() != a.rows() || g.rank() != a.rank() {
        return Err(Error::contract(
            "convex_mix",
            format!("gate shape {:?} does not broadcast over {:?}", g.shape(), a.shape()),
        ));
    }
    let mut out = vec![0.0; a.len()];
    for (r, &gv) in g.data().iter().enumerate() {
        for j in r * c..(r + 1) * c {
            out[j] = gv * a.data()[j] + (1.0 - gv) * b.data()[j];
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

/// Returns `(grad_a, grad_b, grad_g)`.
pub fn convex_mix_backward(a: &Tensor, b: &Tensor, g: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = a.last_dim();
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; a.len()];
    let mut gg = vec![0.0; g.len()];
    for (r, &gv) in g.data().iter().enumerate() {
        let mut acc = 0.0;
        for j in r * c..(r + 1) * c {
            let d = gy.data()[j];
            ga[j] = gv * d;
            gb[j] = (1.0 - gv) * d;
            acc += d * (a.data()[j] - b.data()[j]);
        }
        gg[r] = acc;
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(a.shape().to_vec(), gb).expect("shape"),
        Tensor::new(g.shape().to_vec(), gg).expect("shape"),
    )
}

// ------------------------------------------------------ batched products

fn bmm_dims(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    a.expect_rank(3, op)?;
    b.expect_rank(3, op)?;
    if a.shape()[0] != b.shape()[0] {
        return Err(Error::contract(op, format!("batch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[1]))
}

fn matmul_nt_raw(a: &[f64], b: &[f64], batch: usize, t: usize, d: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * t * s];
    for n in 0..batch {
        for i in 0..t {
            let ar = &a[(n * t + i) * d..(n * t + i + 1) * d];
            for j in 0..s {
                let br = &b[(n * s + j) * d..(n * s + j + 1) * d];
                let mut acc = 0.0;
                for k in 0..d {
                    acc += ar[k] * br[k];
                }
                out[(n * t + i) * s + j] = acc;
            }
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], batch: usize, t: usize, s: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * t * d];
    for n in 0..batch {
        for i in 0..t {
            let o = &mut out[(n * t + i) * d..(n * t + i + 1) * d];
            for k in 0..s {
                let av = a[(n * t + i) * s + k];
                let br = &b[(n * s + k) * d..(n * s + k + 1) * d];
                for j in 0..d {
                    o[j] += av * br[j];
                }
            }
        }
    }
    out
}

/// `[B,T,D] × [B,S,D]ᵀ → [B,T,S]`; counted as attention MACs.
pub fn bmm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, t, d, s) = bmm_dims(a, b, "bmm_nt")?;
    if b.shape()[2] != d {
        return Err(Error::contract("bmm_nt", format!("inner {:?} vs {:?}", a.shape(), b.shape())));
    }
    macs::add_attention((batch * t * s * d) as u64);
    Tensor::new(vec![batch, t, s], matmul_nt_raw(a.data(), b.data(), batch, t, d, s))
}

/// `[B,T,S] × [B,S,D] → [B,T,D]`; counted as attention MACs.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, t, s, s2) = bmm_dims(a, b, "bmm")?;
    if s != s2 {
        return Err(Error::contract("bmm", format!("inner {:?} vs {:?}", a.shape(), b.shape())));
    }
    let d = b.shape()[2];
    macs::add_attention((batch * t * s * d) as u64);
    Tensor::new(vec![batch, t, d], matmul_raw(a.data(), b.data(), batch, t, s, d))
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let (n, r, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..r {
            for j in 0..c {
                out[(b * c + j) * r + i] = x.data()[(b * r + i) * c + j];
            }
        }
    }
    Tensor::new(vec![n, c, r], out).expect("transpose shape")
}

/// Gradients of [`bmm_nt`]: `(grad_a, grad_b)`.
pub fn bmm_nt_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (batch, t, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let s = b.shape()[1];
    let ga = matmul_raw(gy.data(), b.data(), batch, t, s, d);
    let gyt = transpose_last2(gy);
    let gb = matmul_raw(gyt.data(), a.data(), batch, s, t, d);
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

/// Gradients of [`bmm`]: `(grad_a, grad_b)`.
pub fn bmm_backward(a: &Tensor, b: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (batch, t, s) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let d = b.shape()[2];
    let ga = matmul_nt_raw(gy.data(), b.data(), batch, t, d, s);
    let at = transpose_last2(a);
    let gb = matmul_raw(at.data(), gy.data(), batch, s, t, d);
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

/// `y[i] = x[index[i]]`, reshaped to `shape`.
pub fn gather(x: &Tensor, index: &[usize], shape: &[usize]) -> Result<Tensor> {
    if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
        return Err(Error::contract("gather", format!("index {bad} out of range {}", x.len())));
    }
    Tensor::new(shape.to_vec(), index.iter().map(|&i| x.data()[i]).collect())
}

/// Scatter-add adjoint of [`gather`].
pub fn gather_backward(x_shape: &[usize], index: &[usize], gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(x_shape);
    let d = gx.data_mut();
    for (&i, &g) in index.iter().zip(gy.data()) {
        d[i] += g;
    }
    gx
}
