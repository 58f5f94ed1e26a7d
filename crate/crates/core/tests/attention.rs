use agfusion::attention::{cross_attend, mha, sae_block, sae_enhance, MhaParams, SaeBlockParams};
use agfusion::ops;
use agfusion::rng::{self, Stream};
use agfusion::windowing::partition;
use agfusion::{BevMap, Modality, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::from_fn(shape, |i| rng::normal_at(seed, i as u64))
}

fn random_mha(c: usize, heads: usize, seed: u64) -> MhaParams {
    let mut s = Stream::new(seed);
    MhaParams::zeros(c, heads).map("", &mut |_, t| {
        Tensor::new(t.shape().to_vec(), s.uniform_vec(t.len(), -0.6, 0.6)).unwrap()
    })
}

fn random_sae(c: usize, heads: usize, seed: u64) -> SaeBlockParams {
    let mut s = Stream::new(seed);
    SaeBlockParams::zeros(c, heads, 2).map("", &mut |name, t| {
        let (lo, hi) = if name.ends_with("gamma") { (0.5, 1.5) } else { (-0.5, 0.5) };
        Tensor::new(t.shape().to_vec(), s.uniform_vec(t.len(), lo, hi)).unwrap()
    })
}

/// Plain matrix product of row-major `a [n, k]` and `b [k, m]`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

/// Dense single-head attention `softmax(QKᵀ/√C)V` then the output projection.
fn dense_single_head(q: &Tensor, kv: &Tensor, p: &MhaParams) -> Vec<f64> {
    let (tq, tk, c) = (q.shape()[0], kv.shape()[0], q.shape()[1]);
    let proj = |x: &Tensor, w: &Tensor, b: &Tensor, n: usize| {
        let mut y = matmul(x.data(), w.data(), n, c, c);
        for (i, v) in y.iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        y
    };
    let (qp, kp, vp) = (proj(q, &p.w_q, &p.b_q, tq), proj(kv, &p.w_k, &p.b_k, tk), proj(kv, &p.w_v, &p.b_v, tk));
    let mut kt = vec![0.0; c * tk];
    for s in 0..tk {
        for j in 0..c {
            kt[j * tk + s] = kp[s * c + j];
        }
    }
    let scores: Vec<f64> = matmul(&qp, &kt, tq, c, tk).iter().map(|v| v / (c as f64).sqrt()).collect();
    let mut attn = vec![0.0; tq * tk];
    for t in 0..tq {
        let row = &scores[t * tk..(t + 1) * tk];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for s in 0..tk {
            attn[t * tk + s] = (row[s] - m).exp() / z;
        }
    }
    let mixed = matmul(&attn, &vp, tq, tk, c);
    let mut out = matmul(&mixed, p.w_o.data(), tq, c, c);
    for (i, v) in out.iter_mut().enumerate() {
        *v += p.b_o.data()[i % c];
    }
    out
}

#[test]
fn single_head_matches_dense_reference() {
    for seed in 0..5 {
        let p = random_mha(6, 1, seed);
        let q = randn(&[5, 6], rng::sub_seed(seed, 1));
        let kv = randn(&[7, 6], rng::sub_seed(seed, 2));
        let got = mha(&q, &kv, &p).unwrap();
        let want = dense_single_head(&q, &kv, &p);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "seed {seed}: {err:e}");
    }
}

#[test]
fn outputs_stay_in_value_hull() {
    // Identity value and output projections expose the softmax mixing directly.
    let mut p = random_mha(4, 2, 3);
    p.w_v = Tensor::eye(4);
    p.b_v = Tensor::zeros(&[4]);
    p.w_o = Tensor::eye(4);
    p.b_o = Tensor::zeros(&[4]);
    let kv = randn(&[9, 4], 8);
    let out = mha(&randn(&[6, 4], 9), &kv, &p).unwrap();
    for c in 0..4 {
        let col: Vec<f64> = (0..9).map(|s| kv.data()[s * 4 + c]).collect();
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        for t in 0..6 {
            let v = out.data()[t * 4 + c];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.last_dim();
    let data = perm.iter().flat_map(|&r| t.data()[r * c..(r + 1) * c].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

#[test]
fn query_permutation_equivariance_and_key_invariance() {
    let p = random_mha(8, 2, 4);
    let q = randn(&[6, 8], 1);
    let kv = randn(&[6, 8], 2);
    let perm = [3, 0, 5, 1, 4, 2];
    let base = mha(&q, &kv, &p).unwrap();
    let permuted_q = mha(&permute_rows(&q, &perm), &kv, &p).unwrap();
    assert!(permuted_q.max_abs_diff(&permute_rows(&base, &perm)) <= 1e-12);
    let permuted_kv = mha(&q, &permute_rows(&kv, &perm), &p).unwrap();
    assert!(permuted_kv.max_abs_diff(&base) <= 1e-12);
    // Self-attention is fully equivariant.
    let self_base = mha(&q, &q, &p).unwrap();
    let qp = permute_rows(&q, &perm);
    assert!(mha(&qp, &qp, &p).unwrap().max_abs_diff(&permute_rows(&self_base, &perm)) <= 1e-12);
}

#[test]
fn whole_map_window_is_global_enhancement() {
    let f = BevMap::new(randn(&[4, 4, 8], 5), Modality::Camera).unwrap();
    let blocks = [random_sae(8, 2, 6), random_sae(8, 2, 7)];
    let ws = sae_enhance(&f, 4, &blocks).unwrap();
    let mut global = f.tensor().clone().reshape(&[16, 8]).unwrap();
    for b in &blocks {
        global = sae_block(&global, b).unwrap();
    }
    assert!(ws.window(0).max_abs_diff(&global) <= 1e-12);
}

#[test]
fn enhancement_is_local_to_windows() {
    let a = randn(&[8, 8, 4], 1);
    let mut b = a.clone();
    // Perturb one pixel of window 0; every other window must be untouched.
    b.data_mut()[0] += 1.0;
    let blocks = [random_sae(4, 2, 2)];
    let wa = sae_enhance(&BevMap::new(a, Modality::Camera).unwrap(), 4, &blocks).unwrap();
    let wb = sae_enhance(&BevMap::new(b, Modality::Camera).unwrap(), 4, &blocks).unwrap();
    assert!(wa.window(0).max_abs_diff(&wb.window(0)) > 1e-6);
    for i in 1..4 {
        assert!(wa.window(i).bit_eq(&wb.window(i)));
    }
}

#[test]
fn cross_attend_matches_per_window_loop() {
    let cam = partition(&BevMap::new(randn(&[8, 8, 4], 1), Modality::Camera).unwrap(), 4).unwrap();
    let lidar = partition(&BevMap::new(randn(&[8, 8, 4], 2), Modality::Lidar).unwrap(), 4).unwrap();
    let (p1, p2) = (random_mha(4, 2, 3), random_mha(4, 2, 4));
    let (a, b) = cross_attend(&cam, &lidar, &p1, &p2).unwrap();
    for i in 0..cam.num_windows() {
        let ra = mha(&cam.window(i), &lidar.window(i), &p1).unwrap();
        let rb = mha(&lidar.window(i), &cam.window(i), &p2).unwrap();
        assert!(a.window(i).max_abs_diff(&ra) <= 1e-12);
        assert!(b.window(i).max_abs_diff(&rb) <= 1e-12);
    }
}

#[test]
fn constant_kv_window_gives_constant_output() {
    let cam = partition(&BevMap::new(randn(&[4, 4, 4], 1), Modality::Camera).unwrap(), 4).unwrap();
    let lidar = partition(&BevMap::new(Tensor::full(&[4, 4, 4], 0.7), Modality::Lidar).unwrap(), 4).unwrap();
    let (a, _) = cross_attend(&cam, &lidar, &random_mha(4, 2, 3), &random_mha(4, 2, 4)).unwrap();
    let w = a.window(0);
    for t in 1..16 {
        for c in 0..4 {
            assert!((w.data()[t * 4 + c] - w.data()[c]).abs() <= 1e-12);
        }
    }
}

#[test]
fn conv1x1_is_a_per_pixel_matmul() {
    let f = randn(&[3, 5, 4], 1);
    let w = randn(&[4, 6], 2);
    let b = randn(&[6], 3);
    let got = ops::conv1x1(&f, &w, &b).unwrap();
    assert_eq!(got.shape(), [3, 5, 6]);
    let mut want = matmul(f.data(), w.data(), 15, 4, 6);
    for (i, v) in want.iter_mut().enumerate() {
        *v += b.data()[i % 6];
    }
    let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err <= 1e-12);
}
