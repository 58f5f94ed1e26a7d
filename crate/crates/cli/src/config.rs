//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use agfusion::aggregation::PipelineConfig;
use agfusion::autodiff::{OptimConfig, DEFAULT_STEP, DEFAULT_TOL};
use agfusion::degradation::{AblationConfig, CorruptionPlan, SceneSpec, Strategy};

use crate::exit::{fail, ExitClass};

pub const DEFAULT_OUT_DIR: &str = "agf-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub experiment: ExperimentConfig,
    pub gradcheck: GradcheckSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ablation = AblationConfig::default();
        Self {
            seed: ablation.seed,
            out_dir: None,
            pipeline: ablation.pipeline,
            experiment: ExperimentConfig::default(),
            gradcheck: GradcheckSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

/// Degradation-ablation settings. Geometry and seed come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub corruption: CorruptionPlan,
    pub optim: OptimConfig,
    pub train_steps: usize,
    pub train_scenes: usize,
    pub holdout_scenes: usize,
    pub batch_stats: bool,
    pub strategies: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self {
            scene: a.scene,
            corruption: a.corruption,
            optim: a.optim,
            train_steps: a.train_steps,
            train_scenes: a.train_scenes,
            holdout_scenes: a.holdout_scenes,
            batch_stats: a.batch_stats,
            strategies: Strategy::standard_set().iter().map(Strategy::label).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub tol: f64,
    pub step: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            step: DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    /// Map extents; every (H, W) pair drawn from this list is benchmarked.
    pub sizes: Vec<usize>,
    pub windows: Vec<usize>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sizes: vec![8, 16, 32],
            windows: vec![4, 8],
        }
    }
}

impl RunConfig {
    /// Reads and validates `path`; defaults when `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| fail(ExitClass::Parse, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every geometry constraint and setting up front.
    pub fn validate(&self) -> anyhow::Result<()> {
        let invalid = |e: agfusion::Error| fail(ExitClass::Parse, format!("invalid config: {e}"));
        self.pipeline.validate().map_err(invalid)?;
        self.ablation().validate().map_err(invalid)?;
        self.strategies()?;
        if !(self.gradcheck.tol > 0.0) || !(self.gradcheck.step > 0.0) {
            return Err(fail(ExitClass::Parse, "invalid config: gradcheck.tol and gradcheck.step must be positive"));
        }
        if self.bench.sizes.contains(&0) || self.bench.windows.contains(&0) {
            return Err(fail(ExitClass::Parse, "invalid config: bench sizes and windows must be positive"));
        }
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        let e = &self.experiment;
        AblationConfig {
            pipeline: self.pipeline,
            scene: e.scene,
            corruption: e.corruption,
            optim: e.optim,
            train_steps: e.train_steps,
            train_scenes: e.train_scenes,
            holdout_scenes: e.holdout_scenes,
            seed: self.seed,
            batch_stats: e.batch_stats,
        }
    }

    pub fn strategies(&self) -> anyhow::Result<Vec<Strategy>> {
        parse_strategies(self.experiment.strategies.iter().map(String::as_str))
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

pub fn parse_strategies<'a>(names: impl IntoIterator<Item = &'a str>) -> anyhow::Result<Vec<Strategy>> {
    let list: Vec<Strategy> = names
        .into_iter()
        .map(|n| {
            Strategy::parse(n.trim()).ok_or_else(|| {
                fail(
                    ExitClass::Parse,
                    format!("unknown strategy {n:?} (expected conv_fuser, fixed_<g> or adaptive)"),
                )
            })
        })
        .collect::<anyhow::Result<_>>()?;
    if list.is_empty() {
        return Err(fail(ExitClass::Parse, "strategy list is empty"));
    }
    Ok(list)
}

/// Parses a comma-separated list of positive integers.
pub fn parse_list(flag: &str, text: &str) -> anyhow::Result<Vec<usize>> {
    text.split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(fail(ExitClass::Parse, format!("--{flag}: {s:?} is not a positive integer"))),
        })
        .collect()
}
