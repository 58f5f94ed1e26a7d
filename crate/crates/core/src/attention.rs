//! Windowed self-attention enhancement and bidirectional cross-attention.
//!
//! Attention is computed batched over windows: token tensors are
//! `[N_win, T, C]` and no op reduces across the window axis, so every window
//! is processed independently.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::macs::MacCount;
use crate::ops::NormParams;
use crate::rng::Stream;
use crate::tensor::{BevMap, Tensor};
use crate::windowing::{self, WindowSet};

/// Multi-head attention projections. Weights are `[C, C]`, biases `[C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<T = Tensor> {
    pub num_heads: usize,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
}

impl<T> MhaParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> MhaParams<U> {
        MhaParams {
            num_heads: self.num_heads,
            w_q: f(&format!("{prefix}.w_q"), &self.w_q),
            b_q: f(&format!("{prefix}.b_q"), &self.b_q),
            w_k: f(&format!("{prefix}.w_k"), &self.w_k),
            b_k: f(&format!("{prefix}.b_k"), &self.b_k),
            w_v: f(&format!("{prefix}.w_v"), &self.w_v),
            b_v: f(&format!("{prefix}.b_v"), &self.b_v),
            w_o: f(&format!("{prefix}.w_o"), &self.w_o),
            b_o: f(&format!("{prefix}.b_o"), &self.b_o),
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::contract(
            "mha",
            format!("{channels} channels not divisible into {heads} heads"),
        ));
    }
    Ok(())
}

fn xavier(stream: &mut Stream, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(vec![fan_in, fan_out], stream.uniform_vec(fan_in * fan_out, -a, a)).expect("weight shape")
}

impl MhaParams {
    pub fn zeros(channels: usize, num_heads: usize) -> Self {
        let w = Tensor::zeros(&[channels, channels]);
        let b = Tensor::zeros(&[channels]);
        Self {
            num_heads,
            w_q: w.clone(),
            b_q: b.clone(),
            w_k: w.clone(),
            b_k: b.clone(),
            w_v: w.clone(),
            b_v: b.clone(),
            w_o: w,
            b_o: b,
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(channels: usize, num_heads: usize, stream: &mut Stream) -> Self {
        let mut p = Self::zeros(channels, num_heads);
        p.w_q = xavier(stream, channels, channels);
        p.w_k = xavier(stream, channels, channels);
        p.w_v = xavier(stream, channels, channels);
        p.w_o = xavier(stream, channels, channels);
        p
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_heads(c, self.num_heads)?;
        for w in [&self.w_q, &self.w_k, &self.w_v, &self.w_o] {
            if w.shape() != [c, c] {
                return Err(Error::contract("mha", format!("weight shape {:?}, want [{c}, {c}]", w.shape())));
            }
        }
        for b in [&self.b_q, &self.b_k, &self.b_v, &self.b_o] {
            if b.shape() != [c] {
                return Err(Error::contract("mha", format!("bias shape {:?}, want [{c}]", b.shape())));
            }
        }
        Ok(())
    }
}

/// One pre-norm transformer block: attention then ReLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeBlockParams<T = Tensor> {
    pub mha: MhaParams<T>,
    pub ln1: NormParams<T>,
    pub ln2: NormParams<T>,
    /// `[C, rC]`
    pub ffn_w1: T,
    pub ffn_b1: T,
    /// `[rC, C]`
    pub ffn_w2: T,
    pub ffn_b2: T,
}

impl<T> SaeBlockParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> SaeBlockParams<U> {
        SaeBlockParams {
            mha: self.mha.map(&format!("{prefix}.mha"), f),
            ln1: self.ln1.map(&format!("{prefix}.ln1"), f),
            ln2: self.ln2.map(&format!("{prefix}.ln2"), f),
            ffn_w1: f(&format!("{prefix}.ffn_w1"), &self.ffn_w1),
            ffn_b1: f(&format!("{prefix}.ffn_b1"), &self.ffn_b1),
            ffn_w2: f(&format!("{prefix}.ffn_w2"), &self.ffn_w2),
            ffn_b2: f(&format!("{prefix}.ffn_b2"), &self.ffn_b2),
        }
    }
}

impl SaeBlockParams {
    /// All projections zero, layer norms identity.
    pub fn zeros(channels: usize, num_heads: usize, ffn_ratio: usize) -> Self {
        let hidden = channels * ffn_ratio;
        Self {
            mha: MhaParams::zeros(channels, num_heads),
            ln1: NormParams::identity(channels),
            ln2: NormParams::identity(channels),
            ffn_w1: Tensor::zeros(&[channels, hidden]),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::zeros(&[hidden, channels]),
            ffn_b2: Tensor::zeros(&[channels]),
        }
    }

    pub fn init(channels: usize, num_heads: usize, ffn_ratio: usize, stream: &mut Stream) -> Self {
        let hidden = channels * ffn_ratio;
        let mut p = Self::zeros(channels, num_heads, ffn_ratio);
        p.mha = MhaParams::init(channels, num_heads, stream);
        p.ffn_w1 = xavier(stream, channels, hidden);
        // Residual branches start closed so the block begins as the identity.
        p.mha.w_o = Tensor::zeros(&[channels, channels]);
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.mha.validate()?;
        let c = self.mha.channels();
        if self.ffn_w1.rank() != 2 || self.ffn_w1.shape()[0] != c || self.ffn_w1.shape()[1] < c {
            return Err(Error::contract("sae_block", format!("ffn_w1 shape {:?}", self.ffn_w1.shape())));
        }
        let hidden = self.ffn_w1.shape()[1];
        if self.ffn_w2.shape() != [hidden, c] {
            return Err(Error::contract("sae_block", format!("ffn_w2 shape {:?}", self.ffn_w2.shape())));
        }
        Ok(())
    }
}

/// Bind a tensor-valued parameter tree to fresh tape leaves.
pub fn bind_mha(tape: &mut Tape, p: &MhaParams) -> MhaParams<Var> {
    p.map("", &mut |_, t| tape.leaf(t.clone()))
}

pub fn bind_sae(tape: &mut Tape, p: &SaeBlockParams) -> SaeBlockParams<Var> {
    p.map("", &mut |_, t| tape.leaf(t.clone()))
}

/// `[B, T, H·d] → [B·H, T, d]` element order.
fn split_heads_index(batch: usize, tokens: usize, channels: usize, heads: usize) -> Vec<usize> {
    let dk = channels / heads;
    let mut idx = Vec::with_capacity(batch * tokens * channels);
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..tokens {
                let base = (b * tokens + t) * channels + h * dk;
                idx.extend(base..base + dk);
            }
        }
    }
    idx
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (dst, &src) in index.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Multi-head attention on the tape. `q` is `[B, Tq, C]`, `kv` is `[B, Tkv, C]`.
pub fn mha_graph(tape: &mut Tape, q: Var, kv: Var, p: &MhaParams<Var>) -> Result<Var> {
    let (qs, ks) = (tape.value(q).shape().to_vec(), tape.value(kv).shape().to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::contract("mha", format!("query {qs:?} vs key/value {ks:?}")));
    }
    let (batch, tq, c) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let heads = p.num_heads;
    check_heads(c, heads)?;
    let dk = c / heads;

    let qp = tape.affine(q, p.w_q, p.b_q)?;
    let kp = tape.affine(kv, p.w_k, p.b_k)?;
    let vp = tape.affine(kv, p.w_v, p.b_v)?;

    let q_idx: Arc<[usize]> = split_heads_index(batch, tq, c, heads).into();
    let k_idx: Arc<[usize]> = split_heads_index(batch, tk, c, heads).into();
    let qh = tape.gather(qp, q_idx.clone(), &[batch * heads, tq, dk])?;
    let kh = tape.gather(kp, k_idx.clone(), &[batch * heads, tk, dk])?;
    let vh = tape.gather(vp, k_idx, &[batch * heads, tk, dk])?;

    let scores = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let attn = tape.softmax(scaled)?;
    let mixed = tape.matmul(attn, vh)?;
    let merged = tape.gather(mixed, invert(&q_idx).into(), &[batch, tq, c])?;
    tape.affine(merged, p.w_o, p.b_o)
}

/// Pre-norm block: `x + MSA(LN(x))`, then `+ FFN(LN(·))`.
pub fn sae_block_graph(tape: &mut Tape, x: Var, p: &SaeBlockParams<Var>) -> Result<Var> {
    let n1 = tape.layer_norm(x, p.ln1.gamma, p.ln1.beta, p.ln1.eps)?;
    let attn = mha_graph(tape, n1, n1, &p.mha)?;
    let x1 = tape.add(x, attn)?;
    let n2 = tape.layer_norm(x1, p.ln2.gamma, p.ln2.beta, p.ln2.eps)?;
    let h = tape.affine(n2, p.ffn_w1, p.ffn_b1)?;
    let h = tape.relu(h);
    let f = tape.affine(h, p.ffn_w2, p.ffn_b2)?;
    tape.add(x1, f)
}

fn as_batched(t: &Tensor, op: &'static str) -> Result<(Tensor, bool)> {
    match t.rank() {
        2 => Ok((t.clone().reshape(&[1, t.shape()[0], t.shape()[1]])?, true)),
        3 => Ok((t.clone(), false)),
        _ => Err(Error::contract(op, format!("tokens must be rank 2 or 3, got {:?}", t.shape()))),
    }
}

fn unbatch(t: Tensor, squeeze: bool) -> Tensor {
    if squeeze {
        let s = t.shape().to_vec();
        t.reshape(&s[1..]).expect("drop unit batch")
    } else {
        t
    }
}

/// Multi-head attention of `q_tokens` over `kv_tokens` (`[T, C]` or `[B, T, C]`).
pub fn mha(q_tokens: &Tensor, kv_tokens: &Tensor, p: &MhaParams) -> Result<Tensor> {
    p.validate()?;
    let (q, squeeze) = as_batched(q_tokens, "mha")?;
    let (kv, _) = as_batched(kv_tokens, "mha")?;
    if q.last_dim() != p.channels() {
        return Err(Error::contract("mha", format!("tokens have {} channels, params {}", q.last_dim(), p.channels())));
    }
    let mut tape = Tape::new();
    let (qv, kvv) = (tape.leaf(q), tape.leaf(kv));
    let pv = bind_mha(&mut tape, p);
    let out = mha_graph(&mut tape, qv, kvv, &pv)?;
    Ok(unbatch(tape.value(out).clone(), squeeze))
}

/// One enhancement block on `[T, C]` (or batched `[B, T, C]`) tokens.
pub fn sae_block(window_tokens: &Tensor, p: &SaeBlockParams) -> Result<Tensor> {
    p.validate()?;
    let (x, squeeze) = as_batched(window_tokens, "sae_block")?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let pv = bind_sae(&mut tape, p);
    let out = sae_block_graph(&mut tape, xv, &pv)?;
    Ok(unbatch(tape.value(out).clone(), squeeze))
}

/// Partitions `f` and runs the block stack on every window; stays in window form.
pub fn sae_enhance(f: &BevMap, window: usize, blocks: &[SaeBlockParams]) -> Result<WindowSet> {
    let ws = windowing::partition(f, window)?;
    let geometry = ws.geometry();
    let mut tokens = ws.into_tokens();
    for p in blocks {
        tokens = sae_block(&tokens, p)?;
    }
    WindowSet::new(tokens, geometry)
}

/// Bidirectional attention between corresponding windows.
///
/// Returns `(camera queries over lidar, lidar queries over camera)`.
pub fn cross_attend(
    cam: &WindowSet,
    lidar: &WindowSet,
    p_c2l: &MhaParams,
    p_l2c: &MhaParams,
) -> Result<(WindowSet, WindowSet)> {
    if cam.geometry() != lidar.geometry() {
        return Err(Error::contract(
            "cross_attend",
            format!("geometry {:?} vs {:?}", cam.geometry(), lidar.geometry()),
        ));
    }
    let g = cam.geometry();
    let a_c2l = mha(cam.tokens(), lidar.tokens(), p_c2l)?;
    let a_l2c = mha(lidar.tokens(), cam.tokens(), p_l2c)?;
    Ok((WindowSet::new(a_c2l, g)?, WindowSet::new(a_l2c, g)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Windowed,
    Global,
}

/// One self-attention layer of `q` over `kv`, windowed or over the whole map.
///
/// The global form treats all `H·W` pixels as a single token sequence.
pub fn attend(q: &BevMap, kv: &BevMap, p: &MhaParams, window: usize, mode: AttentionMode) -> Result<BevMap> {
    if q.tensor().shape() != kv.tensor().shape() {
        return Err(Error::contract(
            "attend",
            format!("query map {:?} vs key map {:?}", q.tensor().shape(), kv.tensor().shape()),
        ));
    }
    match mode {
        AttentionMode::Windowed => {
            let (qs, ks) = (windowing::partition(q, window)?, windowing::partition(kv, window)?);
            let out = mha(qs.tokens(), ks.tokens(), p)?;
            windowing::merge(&WindowSet::new(out, qs.geometry())?, q.modality())
        }
        AttentionMode::Global => {
            let (h, w, c) = (q.height(), q.width(), q.channels());
            let out = mha(&q.tensor().clone().reshape(&[1, h * w, c])?, &kv.tensor().clone().reshape(&[1, h * w, c])?, p)?;
            BevMap::new(out.reshape(&[h, w, c])?, q.modality())
        }
    }
}

/// Exact MACs of one self-attention layer over an `H×W×C` map.
///
/// `attention` covers the score (`QKᵀ`) and mix (`attn·V`) products:
/// `N_win·2·T²·C` windowed with `T = h²`, `2·(HW)²·C` global.
/// `projection` is the four `C×C` projections, `4·HW·C²` in both modes.
pub fn count_macs(
    height: usize,
    width: usize,
    channels: usize,
    window: usize,
    num_heads: usize,
    mode: AttentionMode,
) -> Result<MacCount> {
    check_heads(channels, num_heads)?;
    let geometry = windowing::WindowGeometry::new(height, width, window, channels)?;
    let hw = (height * width) as u64;
    let c = channels as u64;
    let attention = match mode {
        AttentionMode::Windowed => {
            let t = geometry.tokens_per_window() as u64;
            geometry.num_windows() as u64 * 2 * t * t * c
        }
        AttentionMode::Global => 2 * hw * hw * c,
    };
    Ok(MacCount {
        attention,
        projection: 4 * hw * c * c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Modality;

    fn random_mha(c: usize, heads: usize, seed: u64) -> MhaParams {
        let mut s = Stream::new(seed);
        MhaParams::zeros(c, heads).map("", &mut |_, t| Tensor::from_fn(t.shape(), |_| s.uniform_in(-0.5, 0.5)))
    }

    fn random_tokens(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::new(seed);
        Tensor::from_fn(shape, |_| s.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn single_key_output_ignores_query() {
        let p = random_mha(4, 2, 1);
        let kv = random_tokens(&[1, 4], 2);
        let out = mha(&random_tokens(&[3, 4], 3), &kv, &p).unwrap();
        let v = crate::ops::affine(&kv, &p.w_v, &p.b_v).unwrap();
        let expect = crate::ops::affine(&v, &p.w_o, &p.b_o).unwrap();
        for row in out.data().chunks(4) {
            for (a, b) in row.iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let mut p = random_mha(4, 2, 5);
        for b in [&mut p.b_q, &mut p.b_k, &mut p.b_v, &mut p.b_o] {
            *b = Tensor::zeros(&[4]);
        }
        let out = mha(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[5, 4]), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_count_must_divide_channels() {
        let p = MhaParams::zeros(6, 4);
        assert!(mha(&Tensor::zeros(&[2, 6]), &Tensor::zeros(&[2, 6]), &p).is_err());
        let p = MhaParams::zeros(4, 2);
        assert!(mha(&Tensor::zeros(&[2, 6]), &Tensor::zeros(&[2, 6]), &p).is_err());
    }

    #[test]
    fn zero_block_on_zero_input_is_zero() {
        let p = SaeBlockParams::init(8, 2, 4, &mut Stream::new(9));
        let out = sae_block(&Tensor::zeros(&[4, 8]), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_windows_enhance_identically() {
        let mut data = Vec::new();
        // 2x4 map, h = 2: window 0 covers columns 0-1, window 1 columns 2-3
        let pix = [0.3, -0.7, 1.1, 0.2];
        for y in 0..2 {
            for x in 0..4 {
                data.push(pix[y * 2 + x % 2]);
            }
        }
        let f = BevMap::new(Tensor::new(vec![2, 4, 1], data).unwrap(), Modality::Camera).unwrap();
        let p = SaeBlockParams::init(1, 1, 4, &mut Stream::new(4));
        let ws = sae_enhance(&f, 2, &[p]).unwrap();
        assert!(ws.window(0).bit_eq(&ws.window(1)));
    }

    #[test]
    fn cross_attend_symmetry_and_geometry() {
        let f = BevMap::new(random_tokens(&[4, 4, 4], 11), Modality::Camera).unwrap();
        let ws = windowing::partition(&f, 2).unwrap();
        let p = random_mha(4, 2, 12);
        let (a, b) = cross_attend(&ws, &ws, &p, &p).unwrap();
        assert!(a.tokens().bit_eq(b.tokens()));
        let other = windowing::partition(&f, 4).unwrap();
        assert!(cross_attend(&ws, &other, &p, &p).is_err());
    }

    #[test]
    fn mac_examples() {
        let w = count_macs(8, 8, 16, 4, 4, AttentionMode::Windowed).unwrap();
        let g = count_macs(8, 8, 16, 4, 4, AttentionMode::Global).unwrap();
        assert_eq!(w.attention, 32768);
        assert_eq!(g.attention, 131072);
        assert_eq!(w.projection, 4 * 64 * 256);
        assert_eq!(w.projection, g.projection);
        let one = count_macs(8, 8, 16, 8, 4, AttentionMode::Windowed).unwrap();
        assert_eq!(one.attention, g.attention);
    }
}
