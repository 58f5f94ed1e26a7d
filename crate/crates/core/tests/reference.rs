//! The pipeline against a straight-line reference written with plain loops
//! over pixel rows. Attention runs over explicit pixel groups, so a single
//! group covering the map is monolithic global attention.

use agfusion::aggregation::{forward_pipeline_with, FusionMode, PipelineConfig, PipelineParams};
use agfusion::attention::{MhaParams, SaeBlockParams};
use agfusion::ops::BnMode;
use agfusion::rng::{self, Stream};
use agfusion::{BevMap, Modality, Tensor};

type Rows = Vec<Vec<f64>>;

fn rows_of(t: &Tensor) -> Rows {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

fn linear(x: &Rows, w: &Tensor, b: &Tensor) -> Rows {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..cout)
                .map(|o| b.data()[o] + (0..cin).map(|i| r[i] * w.data()[i * cout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, gamma: &Tensor, beta: &Tensor, eps: f64) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) / (var + eps).sqrt() * gamma.data()[c] + beta.data()[c])
                .collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(x: &Rows) -> Rows {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn mha(q: &Rows, kv: &Rows, p: &MhaParams) -> Rows {
    let (qp, kp, vp) = (linear(q, &p.w_q, &p.b_q), linear(kv, &p.w_k, &p.b_k), linear(kv, &p.w_v, &p.b_v));
    let c = p.channels();
    let dk = c / p.num_heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..p.num_heads {
        let lo = h * dk;
        for (t, row) in out.iter_mut().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|k| (0..dk).map(|d| qp[t][lo + d] * k[lo + d]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..dk {
                row[lo + d] = e.iter().zip(&vp).map(|(w, v)| w / z * v[lo + d]).sum();
            }
        }
    }
    linear(&out, &p.w_o, &p.b_o)
}

fn sae(x: &Rows, p: &SaeBlockParams) -> Rows {
    let n1 = layer_norm(x, &p.ln1.gamma, &p.ln1.beta, p.ln1.eps);
    let x1 = add(x, &mha(&n1, &n1, &p.mha));
    let n2 = layer_norm(&x1, &p.ln2.gamma, &p.ln2.beta, p.ln2.eps);
    let h = relu(&linear(&n2, &p.ffn_w1, &p.ffn_b1));
    add(&x1, &linear(&h, &p.ffn_w2, &p.ffn_b2))
}

/// Pixel indices of each `h × h` group, row-major inside the group.
fn groups(height: usize, width: usize, h: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for wy in 0..height / h {
        for wx in 0..width / h {
            let mut g = Vec::new();
            for y in 0..h {
                for x in 0..h {
                    g.push((wy * h + y) * width + wx * h + x);
                }
            }
            out.push(g);
        }
    }
    out
}

/// Applies `f` to each group's rows and scatters the result back.
fn per_group(groups: &[Vec<usize>], inputs: &[&Rows], f: impl Fn(&[Rows]) -> Rows) -> Rows {
    let n = inputs[0].len();
    let mut out = vec![Vec::new(); n];
    for g in groups {
        let picked: Vec<Rows> = inputs.iter().map(|x| g.iter().map(|&i| x[i].clone()).collect()).collect();
        for (row, &i) in f(&picked).into_iter().zip(g) {
            out[i] = row;
        }
    }
    out
}

struct Reference {
    y: Rows,
    gate: Vec<f64>,
}

fn reference(
    cam: &Tensor,
    lidar: &Tensor,
    cfg: &PipelineConfig,
    p: &PipelineParams,
    mode: BnMode,
    fusion: FusionMode,
) -> Reference {
    let (h, w) = (cam.shape()[0], cam.shape()[1]);
    let gs = groups(h, w, cfg.window);
    let (cam_r, lidar_r) = (rows_of(cam), rows_of(lidar));
    let enhance = |x: &Rows, blocks: &[SaeBlockParams]| {
        per_group(&gs, &[x], |g| blocks.iter().fold(g[0].clone(), |acc, b| sae(&acc, b)))
    };
    let cam_e = enhance(&cam_r, &p.sae_cam);
    let lidar_e = enhance(&lidar_r, &p.sae_lidar);
    let a_c2l = per_group(&gs, &[&cam_e, &lidar_e], |g| mha(&g[0], &g[1], &p.cross_c2l));
    let a_l2c = per_group(&gs, &[&lidar_e, &cam_e], |g| mha(&g[0], &g[1], &p.cross_l2c));

    let gate: Vec<f64> = match fusion {
        FusionMode::Fixed(g) => vec![g; h * w],
        FusionMode::Adaptive => {
            let cat: Rows = a_c2l.iter().zip(&a_l2c).map(|(a, b)| [a.clone(), b.clone()].concat()).collect();
            let hid = relu(&linear(&cat, &p.gate.w1, &p.gate.b1));
            linear(&hid, &p.gate.w2, &p.gate.b2).iter().map(|r| 1.0 / (1.0 + (-r[0]).exp())).collect()
        }
    };
    let fused: Rows = (0..h * w)
        .map(|i| (0..cfg.channels).map(|c| gate[i] * a_c2l[i][c] + (1.0 - gate[i]) * a_l2c[i][c]).collect())
        .collect();
    let cat: Rows = (0..h * w).map(|i| [cam_e[i].clone(), lidar_e[i].clone(), fused[i].clone()].concat()).collect();
    let z = linear(&cat, &p.phi.conv_w, &p.phi.conv_b);
    let bn = &p.phi.bn;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Eval => (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()),
        BnMode::Train => (0..cfg.channels)
            .map(|c| {
                let n = z.len() as f64;
                let m = z.iter().map(|r| r[c]).sum::<f64>() / n;
                (m, z.iter().map(|r| (r[c] - m) * (r[c] - m)).sum::<f64>() / n)
            })
            .unzip(),
    };
    let f_out: Rows = z
        .iter()
        .map(|r| {
            (0..cfg.channels)
                .map(|c| ((r[c] - mean[c]) / (var[c] + bn.eps).sqrt() * bn.gamma.data()[c] + bn.beta.data()[c]).max(0.0))
                .collect()
        })
        .collect();
    let y = relu(&add(&add(&f_out, &cam_r), &lidar_r));
    Reference { y, gate }
}

/// Every parameter random, norm scales kept positive.
fn random_params(cfg: &PipelineConfig, seed: u64) -> PipelineParams {
    let mut s = Stream::new(seed);
    let mut p = PipelineParams::zeros(cfg).map(&mut |name, t| {
        let scale = if name.ends_with("gamma") { None } else { Some(0.5) };
        let data = match scale {
            None => s.uniform_vec(t.len(), 0.5, 1.5),
            Some(a) => s.uniform_vec(t.len(), -a, a),
        };
        Tensor::new(t.shape().to_vec(), data).unwrap()
    });
    let c = cfg.channels;
    p.phi.bn.running_mean = Tensor::new(vec![c], s.uniform_vec(c, -0.5, 0.5)).unwrap();
    p.phi.bn.running_var = Tensor::new(vec![c], s.uniform_vec(c, 0.5, 2.0)).unwrap();
    p
}

fn random_map(shape: &[usize], seed: u64, modality: Modality) -> BevMap {
    let t = Tensor::from_fn(shape, |i| rng::normal_at(seed, i as u64));
    BevMap::new(t, modality).unwrap()
}

fn compare(window: usize, seed: u64, mode: BnMode, fusion: FusionMode) -> (f64, f64) {
    let cfg = PipelineConfig {
        channels: 8,
        window,
        num_heads: 2,
        sae_depth: 1,
        ffn_ratio: 2,
        gate_hidden: 4,
    };
    let cam = random_map(&[8, 8, 8], rng::sub_seed(seed, 1), Modality::Camera);
    let lidar = random_map(&[8, 8, 8], rng::sub_seed(seed, 2), Modality::Lidar);
    let p = random_params(&cfg, rng::sub_seed(seed, 3));
    let out = forward_pipeline_with(&cam, &lidar, &cfg, &p, mode, fusion).unwrap();
    let r = reference(cam.tensor(), lidar.tensor(), &cfg, &p, mode, fusion);
    let y_err = out
        .y
        .tensor()
        .data()
        .iter()
        .zip(r.y.concat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let g_err = out.gate.tensor().data().iter().zip(&r.gate).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (y_err, g_err)
}

#[test]
fn single_window_equals_global_reference() {
    for seed in 0..10 {
        for mode in [BnMode::Eval, BnMode::Train] {
            let (y, g) = compare(8, seed, mode, FusionMode::Adaptive);
            assert!(y <= 1e-10 && g <= 1e-10, "seed {seed} {mode:?}: y err {y:e}, gate err {g:e}");
        }
    }
}

#[test]
fn windowed_matches_grouped_reference() {
    for seed in 0..5 {
        for window in [2, 4] {
            let (y, g) = compare(window, seed, BnMode::Eval, FusionMode::Adaptive);
            assert!(y <= 1e-10 && g <= 1e-10, "seed {seed} h={window}: y err {y:e}, gate err {g:e}");
        }
    }
}

#[test]
fn fixed_gate_matches_reference() {
    for g in [0.0, 0.3, 1.0] {
        let (y, gerr) = compare(4, 11, BnMode::Train, FusionMode::Fixed(g));
        assert!(y <= 1e-10 && gerr == 0.0, "g={g}: y err {y:e}");
    }
}

#[test]
fn windowing_changes_the_result() {
    let cfg = |window| PipelineConfig {
        channels: 8,
        window,
        num_heads: 2,
        ..PipelineConfig::default()
    };
    let cam = random_map(&[8, 8, 8], 1, Modality::Camera);
    let lidar = random_map(&[8, 8, 8], 2, Modality::Lidar);
    let p = random_params(&cfg(4), 3);
    let a = forward_pipeline_with(&cam, &lidar, &cfg(4), &p, BnMode::Eval, FusionMode::Adaptive).unwrap();
    let b = forward_pipeline_with(&cam, &lidar, &cfg(8), &p, BnMode::Eval, FusionMode::Adaptive).unwrap();
    assert!(a.y.tensor().max_abs_diff(b.y.tensor()) > 1e-6);
}
