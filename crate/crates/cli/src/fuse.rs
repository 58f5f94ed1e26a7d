//! `agf fuse`: run the pipeline on tensor files.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use agfusion::aggregation::{forward_pipeline_with, FusionMode};
use agfusion::io::{read_tensor, write_tensor, Weights};
use agfusion::ops::BnMode;
use agfusion::{BevMap, Modality, Tensor};

use crate::config::RunConfig;
use crate::exit::{fail, ExitClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(t: &Tensor) -> Self {
        Self {
            min: t.min(),
            max: t.max(),
            mean: t.mean(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FuseSummary {
    pub shape: Vec<usize>,
    pub fixed_gate: Option<f64>,
    pub y: Stats,
    pub gate: Stats,
}

pub struct FuseArgs<'a> {
    pub cam: &'a Path,
    pub lidar: &'a Path,
    pub weights: &'a Path,
    pub out_dir: &'a Path,
    pub fixed_gate: Option<f64>,
}

fn load_map(path: &Path, modality: Modality, cfg: &RunConfig, what: &str) -> anyhow::Result<BevMap> {
    let t = read_tensor(path).with_context(|| format!("{what} tensor {}", path.display()))?;
    let map = BevMap::new(t, modality).with_context(|| format!("{what} tensor {}", path.display()))?;
    cfg.pipeline
        .check_input(map.tensor().shape())
        .with_context(|| format!("{what} tensor {}", path.display()))?;
    Ok(map)
}

pub fn run(cfg: &RunConfig, args: &FuseArgs<'_>, out: &mut dyn Write) -> anyhow::Result<FuseSummary> {
    let cam = load_map(args.cam, Modality::Camera, cfg, "camera")?;
    let lidar = load_map(args.lidar, Modality::Lidar, cfg, "lidar")?;
    if cam.tensor().shape() != lidar.tensor().shape() {
        return Err(fail(
            ExitClass::Shape,
            format!(
                "camera shape {:?} differs from lidar shape {:?}",
                cam.tensor().shape(),
                lidar.tensor().shape()
            ),
        ));
    }
    let weights = Weights::read(args.weights).with_context(|| format!("weights {}", args.weights.display()))?;
    let params = weights
        .to_pipeline(&cfg.pipeline)
        .with_context(|| format!("weights {}", args.weights.display()))?;
    let fusion = match args.fixed_gate {
        Some(g) if (0.0..=1.0).contains(&g) => FusionMode::Fixed(g),
        Some(g) => return Err(fail(ExitClass::Parse, format!("--fixed-gate: {g} outside [0, 1]"))),
        None => FusionMode::Adaptive,
    };
    let result = forward_pipeline_with(&cam, &lidar, &cfg.pipeline, &params, BnMode::Eval, fusion)?;

    std::fs::create_dir_all(args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_tensor(args.out_dir.join("y.agt"), result.y.tensor())?;
    write_tensor(args.out_dir.join("gate.agt"), result.gate.tensor())?;
    let summary = FuseSummary {
        shape: result.y.tensor().shape().to_vec(),
        fixed_gate: args.fixed_gate,
        y: Stats::of(result.y.tensor()),
        gate: Stats::of(result.gate.tensor()),
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(args.out_dir.join("summary.json"), format!("{json}\n"))?;
    writeln!(out, "Y    min {:.6e}  max {:.6e}  mean {:.6e}", summary.y.min, summary.y.max, summary.y.mean)?;
    writeln!(out, "gate min {:.6e}  max {:.6e}  mean {:.6e}", summary.gate.min, summary.gate.max, summary.gate.mean)?;
    writeln!(out, "wrote y.agt, gate.agt, summary.json to {}", args.out_dir.display())?;
    Ok(summary)
}
