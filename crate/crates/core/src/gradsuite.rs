//! Finite-difference checks for every differentiable op and the full pipeline.

use std::collections::BTreeMap;

use crate::aggregation::{pipeline_graph, FusionMode, PipelineConfig, PipelineParams};
use crate::attention::{self, MhaParams, SaeBlockParams};
use crate::autodiff::{Gradcheck, GradcheckReport, Tape, Var};
use crate::error::Result;
use crate::gated_fusion::{self, ConvFuserParams, GateNetParams};
use crate::ops::{BatchNormParams, BnMode};
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::windowing::WindowGeometry;

/// Uniform values in `[lo, hi)` whose magnitude is at least `gap`, so ReLU
/// kinks are never straddled by a finite-difference step.
fn away_from_zero(stream: &mut Stream, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = stream.uniform_in(lo, hi);
        if v.abs() >= gap {
            break v;
        }
    })
}

fn rand(stream: &mut Stream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| stream.uniform_in(-1.0, 1.0))
}

fn named<T>(tree: &T, map: impl FnOnce(&T, &mut dyn FnMut(&str, &Tensor))) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    map(tree, &mut |n, t| out.push((n.to_string(), t.clone())));
    out
}

/// Randomizes every tensor of a parameter tree; `gamma`s land in `[0.5, 1.5)`.
fn randomize(name: &str, t: &Tensor, s: &mut Stream) -> Tensor {
    if name.ends_with("gamma") {
        Tensor::from_fn(t.shape(), |_| s.uniform_in(0.5, 1.5))
    } else {
        Tensor::from_fn(t.shape(), |_| s.uniform_in(-0.5, 0.5))
    }
}

fn lookup(leaves: &[Var], names: &[(String, Tensor)], offset: usize) -> BTreeMap<String, Var> {
    names
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), leaves[offset + i]))
        .collect()
}

/// Pipeline geometry used by the full-model check.
pub fn small_pipeline_config() -> PipelineConfig {
    PipelineConfig {
        channels: 4,
        window: 2,
        num_heads: 2,
        sae_depth: 1,
        ffn_ratio: 4,
        gate_hidden: 0,
    }
}

fn pipeline_check(gc: &Gradcheck, seed: u64, mode: BnMode, fusion: FusionMode, label: &str) -> GradcheckReport {
    let cfg = small_pipeline_config();
    let mut s = Stream::new(seed);
    let params = PipelineParams::zeros(&cfg).map(&mut |n, t| randomize(n, t, &mut s));
    let mut params = params;
    params.phi.bn.running_mean = rand(&mut s, &[cfg.channels]).scale(0.2);
    params.phi.bn.running_var = Tensor::from_fn(&[cfg.channels], |_| s.uniform_in(0.5, 2.0));
    let shape = [4, 4, cfg.channels];
    // Inputs are shifted positive so the residual ReLU stays clear of its kink.
    let cam = Tensor::from_fn(&shape, |_| s.uniform_in(0.2, 1.0));
    let lidar = Tensor::from_fn(&shape, |_| s.uniform_in(0.2, 1.0));
    let pnames = params.named_tensors();
    let mut inputs = vec![("f_cam".to_string(), cam), ("f_lidar".to_string(), lidar)];
    inputs.extend(pnames.iter().cloned());
    gc.run(label, &inputs, |tape, v| {
        let by_name = lookup(v, &pnames, 2);
        let pv = params.map(&mut |n, _| by_name[n]);
        Ok(pipeline_graph(tape, v[0], v[1], &cfg, &pv, mode, fusion)?.y)
    })
}

/// Runs the whole suite with the given harness settings.
pub fn run_suite(gc: &Gradcheck) -> Vec<GradcheckReport> {
    let mut s = Stream::new(0xA6F0);
    let mut reports = Vec::new();
    let mut check = |op: &str, inputs: Vec<(String, Tensor)>, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>| {
        reports.push(gc.run(op, &inputs, f));
    };

    let x8 = rand(&mut s, &[8]);
    let g8 = Tensor::from_fn(&[8], |_| s.uniform_in(0.5, 1.5));
    let b8 = rand(&mut s, &[8]);
    check(
        "layer_norm",
        vec![("x".into(), x8), ("gamma".into(), g8), ("beta".into(), b8)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check(
        "layer_norm_rows",
        vec![
            ("x".into(), rand(&mut s, &[3, 5, 16])),
            ("gamma".into(), Tensor::from_fn(&[16], |_| s.uniform_in(0.5, 1.5))),
            ("beta".into(), rand(&mut s, &[16])),
        ],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    check("softmax", vec![("x".into(), rand(&mut s, &[3, 4, 6]).scale(2.0))], &|t, v| t.softmax(v[0]));
    check(
        "affine",
        vec![
            ("x".into(), rand(&mut s, &[5, 6])),
            ("w".into(), rand(&mut s, &[6, 3])),
            ("b".into(), rand(&mut s, &[3])),
        ],
        &|t, v| t.affine(v[0], v[1], v[2]),
    );
    check(
        "conv1x1",
        vec![
            ("f".into(), rand(&mut s, &[3, 2, 4])),
            ("w".into(), rand(&mut s, &[4, 5])),
            ("b".into(), rand(&mut s, &[5])),
        ],
        &|t, v| t.affine(v[0], v[1], v[2]),
    );
    check(
        "batch_norm_train",
        vec![
            ("f".into(), rand(&mut s, &[3, 3, 4])),
            ("gamma".into(), Tensor::from_fn(&[4], |_| s.uniform_in(0.5, 1.5))),
            ("beta".into(), rand(&mut s, &[4])),
        ],
        &|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    );
    let mut stats = BatchNormParams::neutral(4);
    stats.running_mean = rand(&mut s, &[4]);
    stats.running_var = Tensor::from_fn(&[4], |_| s.uniform_in(0.5, 2.0));
    check(
        "batch_norm_eval",
        vec![
            ("f".into(), rand(&mut s, &[3, 3, 4])),
            ("gamma".into(), Tensor::from_fn(&[4], |_| s.uniform_in(0.5, 1.5))),
            ("beta".into(), rand(&mut s, &[4])),
        ],
        &|t, v| t.batch_norm_eval(v[0], v[1], v[2], &stats),
    );
    check(
        "relu",
        vec![("x".into(), away_from_zero(&mut s, &[4, 6], -1.0, 1.0, 1e-3))],
        &|t, v| Ok(t.relu(v[0])),
    );
    check("sigmoid", vec![("x".into(), rand(&mut s, &[4, 6]).scale(3.0))], &|t, v| Ok(t.sigmoid(v[0])));
    check(
        "concat_channels",
        vec![("a".into(), rand(&mut s, &[2, 2, 2])), ("b".into(), rand(&mut s, &[2, 2, 3]))],
        &|t, v| t.concat(&[v[0], v[1]]),
    );
    check(
        "matmul_nt",
        vec![("a".into(), rand(&mut s, &[2, 3, 4])), ("b".into(), rand(&mut s, &[2, 5, 4]))],
        &|t, v| t.matmul_nt(v[0], v[1]),
    );
    check(
        "matmul",
        vec![("a".into(), rand(&mut s, &[2, 3, 5])), ("b".into(), rand(&mut s, &[2, 5, 4]))],
        &|t, v| t.matmul(v[0], v[1]),
    );
    let geom = WindowGeometry::new(4, 4, 2, 3).expect("geometry");
    let part: std::sync::Arc<[usize]> = geom.partition_index().into();
    check("window_partition", vec![("f".into(), rand(&mut s, &[4, 4, 3]))], &|t, v| {
        t.gather(v[0], part.clone(), &geom.token_shape())
    });
    check(
        "fuse_gated",
        vec![
            ("a".into(), rand(&mut s, &[3, 3, 4])),
            ("b".into(), rand(&mut s, &[3, 3, 4])),
            ("g".into(), Tensor::from_fn(&[3, 3, 1], |_| s.uniform_in(0.0, 1.0))),
        ],
        &|t, v| t.convex_mix(v[0], v[1], v[2]),
    );
    let target = rand(&mut s, &[3, 4]);
    check("mse", vec![("x".into(), rand(&mut s, &[3, 4]))], &|t, v| t.mse(v[0], target.clone()));

    let mha_p = MhaParams::zeros(4, 2).map("mha", &mut |n, t| randomize(n, t, &mut s));
    let mha_names = named(&mha_p, |p, f| {
        p.map("mha", &mut |n, t| f(n, t));
    });
    let mut inputs = vec![("q".into(), rand(&mut s, &[2, 4, 4])), ("kv".into(), rand(&mut s, &[2, 3, 4]))];
    inputs.extend(mha_names.iter().cloned());
    check("mha", inputs, &|t, v| {
        let by_name = lookup(v, &mha_names, 2);
        let pv = mha_p.map("mha", &mut |n, _| by_name[n]);
        attention::mha_graph(t, v[0], v[1], &pv)
    });

    let sae_p = SaeBlockParams::zeros(4, 2, 4).map("sae", &mut |n, t| randomize(n, t, &mut s));
    let sae_names = named(&sae_p, |p, f| {
        p.map("sae", &mut |n, t| f(n, t));
    });
    let mut inputs = vec![("x".into(), rand(&mut s, &[2, 4, 4]))];
    inputs.extend(sae_names.iter().cloned());
    check("sae_block", inputs, &|t, v| {
        let by_name = lookup(v, &sae_names, 1);
        let pv = sae_p.map("sae", &mut |n, _| by_name[n]);
        attention::sae_block_graph(t, v[0], &pv)
    });

    let gate_p = GateNetParams::zeros(3, 2).map("gate", &mut |n, t| randomize(n, t, &mut s));
    let gate_names = named(&gate_p, |p, f| {
        p.map("gate", &mut |n, t| f(n, t));
    });
    let mut inputs = vec![("a_c2l".into(), rand(&mut s, &[3, 3, 3])), ("a_l2c".into(), rand(&mut s, &[3, 3, 3]))];
    inputs.extend(gate_names.iter().cloned());
    check("compute_gate", inputs, &|t, v| {
        let by_name = lookup(v, &gate_names, 2);
        let pv = gate_p.map("gate", &mut |n, _| by_name[n]);
        gated_fusion::gate_graph(t, v[0], v[1], &pv)
    });

    let cf = ConvFuserParams::zeros(3).map("conv_fuser", &mut |n, t| randomize(n, t, &mut s));
    let cf_names = named(&cf, |p, f| {
        p.map("conv_fuser", &mut |n, t| f(n, t));
    });
    let mut inputs = vec![("f_cam".into(), rand(&mut s, &[3, 3, 3])), ("f_lidar".into(), rand(&mut s, &[3, 3, 3]))];
    inputs.extend(cf_names.iter().cloned());
    check("conv_fuser", inputs, &|t, v| {
        let by_name = lookup(v, &cf_names, 2);
        let pv = cf.map("conv_fuser", &mut |n, _| by_name[n]);
        gated_fusion::conv_fuser_graph(t, v[0], v[1], &pv)
    });

    reports.push(pipeline_check(gc, 0xF00D, BnMode::Train, FusionMode::Adaptive, "pipeline_train"));
    reports.push(pipeline_check(gc, 0xBEEF, BnMode::Eval, FusionMode::Adaptive, "pipeline_eval"));
    reports.push(pipeline_check(gc, 0xCAFE, BnMode::Train, FusionMode::Fixed(0.3), "pipeline_fixed_gate"));
    reports
}
