use agfusion::aggregation::{forward_pipeline, PipelineConfig, PipelineParams};
use agfusion::gated_fusion::{compute_gate, fuse_gated, GateMap, GateNetParams};
use agfusion::ops::{self, BnMode};
use agfusion::rng::{self, Stream};
use agfusion::{BevMap, Modality, Tensor};

fn map(shape: &[usize], seed: u64, modality: Modality) -> BevMap {
    BevMap::new(Tensor::from_fn(shape, |i| rng::normal_at(seed, i as u64) * 3.0), modality).unwrap()
}

#[test]
fn gated_fusion_is_convex_over_many_trials() {
    let mut violations = 0;
    for trial in 0..1000u64 {
        let mut s = Stream::new(rng::sub_seed(77, trial));
        let (h, w, c) = (1 + s.below(4) as usize, 1 + s.below(4) as usize, 1 + s.below(5) as usize);
        let a = map(&[h, w, c], s.below(u64::MAX), Modality::Fused);
        let b = map(&[h, w, c], s.below(u64::MAX), Modality::Fused);
        let g = GateMap::new(Tensor::new(vec![h, w, 1], s.uniform_vec(h * w, 0.0, 1.0)).unwrap()).unwrap();
        let f = fuse_gated(&a, &b, &g).unwrap();
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    let (va, vb, v) = (a.at(y, x, k), b.at(y, x, k), f.at(y, x, k));
                    let (lo, hi) = (va.min(vb), va.max(vb));
                    let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
                    if v < lo - slack || v > hi + slack {
                        violations += 1;
                    }
                }
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn endpoint_gates_select_exactly() {
    let a = map(&[4, 4, 3], 1, Modality::Fused);
    let b = map(&[4, 4, 3], 2, Modality::Fused);
    let ones = GateMap::new(Tensor::full(&[4, 4, 1], 1.0)).unwrap();
    let zeros = GateMap::new(Tensor::full(&[4, 4, 1], 0.0)).unwrap();
    assert!(fuse_gated(&a, &b, &ones).unwrap().tensor().bit_eq(a.tensor()));
    assert!(fuse_gated(&a, &b, &zeros).unwrap().tensor().bit_eq(b.tensor()));
    let same = fuse_gated(&a, &a, &GateMap::new(Tensor::full(&[4, 4, 1], 0.37)).unwrap()).unwrap();
    assert!(same.tensor().max_abs_diff(a.tensor()) <= 1e-15);
}

#[test]
fn learned_gate_is_strictly_inside_unit_interval() {
    let mut s = Stream::new(5);
    let p = GateNetParams::init(4, 3, &mut s);
    let p = GateNetParams {
        b1: Tensor::new(vec![3], s.uniform_vec(3, -1.0, 1.0)).unwrap(),
        w2: Tensor::new(vec![3, 1], s.uniform_vec(3, -2.0, 2.0)).unwrap(),
        ..p
    };
    let g = compute_gate(&map(&[4, 4, 4], 1, Modality::Fused), &map(&[4, 4, 4], 2, Modality::Fused), &p).unwrap();
    assert!(g.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(g.tensor().max() - g.tensor().min() > 1e-3);
}

#[test]
fn zeroed_parameters_reduce_to_the_residual() {
    let cfg = PipelineConfig {
        channels: 8,
        window: 4,
        num_heads: 2,
        ..PipelineConfig::default()
    };
    for seed in 0..3 {
        let cam = map(&[8, 8, 8], rng::sub_seed(seed, 1), Modality::Camera);
        let lidar = map(&[8, 8, 8], rng::sub_seed(seed, 2), Modality::Lidar);
        let want = ops::relu(&cam.tensor().add(lidar.tensor()).unwrap());
        for mode in [BnMode::Eval, BnMode::Train] {
            let out = forward_pipeline(&cam, &lidar, &cfg, &PipelineParams::zeros(&cfg), mode).unwrap();
            assert!(out.y.tensor().bit_eq(&want), "seed {seed} {mode:?}");
            assert!(out.gate.tensor().data().iter().all(|&g| g == 0.5));
        }
    }
}

#[test]
fn zero_inputs_with_zero_parameters_give_zero() {
    let cfg = PipelineConfig {
        channels: 4,
        window: 2,
        num_heads: 2,
        ..PipelineConfig::default()
    };
    let z = BevMap::zeros(4, 4, 4, Modality::Camera);
    let out = forward_pipeline(&z, &z.clone().with_modality(Modality::Lidar), &cfg, &PipelineParams::zeros(&cfg), BnMode::Eval)
        .unwrap();
    assert!(out.y.tensor().data().iter().all(|&v| v == 0.0));
}
