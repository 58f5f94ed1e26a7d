//! `agf init` and `agf scene`: produce inputs for the other commands.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use agfusion::aggregation::PipelineParams;
use agfusion::degradation::{make_sample, CorruptionSpec};
use agfusion::io::{write_tensor, Weights};

use crate::config::RunConfig;

/// Writes freshly initialized (or all-zero) pipeline weights.
pub fn init(cfg: &RunConfig, zero: bool, path: &Path, out: &mut dyn Write) -> anyhow::Result<Weights> {
    let params = if zero {
        PipelineParams::zeros(&cfg.pipeline)
    } else {
        PipelineParams::init(&cfg.pipeline, cfg.seed)
    };
    let w = Weights::from_pipeline(&params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    w.write(path)?;
    writeln!(out, "wrote {} tensors to {}", w.len(), path.display())?;
    Ok(w)
}

#[derive(Debug, Serialize)]
struct SceneRecord {
    seed: u64,
    index: u64,
    holdout: bool,
    corruption: CorruptionSpec,
}

/// Writes one benchmark sample: corrupted sensor maps plus the reconstruction target.
pub fn scene(cfg: &RunConfig, index: u64, holdout: bool, out_dir: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let a = cfg.ablation();
    let s = make_sample(&a.scene, &a.corruption, a.seed, index, holdout)?;
    std::fs::create_dir_all(out_dir)?;
    write_tensor(out_dir.join("cam.agt"), s.cam.tensor())?;
    write_tensor(out_dir.join("lidar.agt"), s.lidar.tensor())?;
    write_tensor(out_dir.join("target.agt"), &s.target)?;
    let record = SceneRecord {
        seed: a.seed,
        index,
        holdout,
        corruption: s.corruption,
    };
    std::fs::write(out_dir.join("scene.json"), serde_json::to_string_pretty(&record)? + "\n")?;
    writeln!(out, "wrote cam.agt, lidar.agt, target.agt, scene.json to {}", out_dir.display())?;
    Ok(())
}
