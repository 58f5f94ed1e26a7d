//! Synthetic paired-sensor BEV scenes, sensor corruption, and the
//! fusion-strategy ablation built on them.
//!
//! All randomness comes from [`crate::rng`] keyed by explicit seeds, so a
//! scene, a corruption and a whole training run replay bit-identically.

use serde::{Deserialize, Serialize};

use crate::aggregation::{pipeline_graph, FusionMode, PipelineConfig, PipelineParams};
use crate::autodiff::{adam_step, OptimConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gated_fusion::{conv_fuser_graph, ConvFuserParams, GateMap};
use crate::ops::{self, BnMode};
use crate::rng::{self, Stream};
use crate::tensor::{BevMap, Modality, Tensor};

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_blobs: usize,
    pub seed: u64,
    pub amp_min: f64,
    pub amp_max: f64,
    /// Spatial standard deviation range of a blob, in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Standard deviation of the additive noise on each sensor map.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 16,
            num_blobs: 6,
            seed: 0,
            amp_min: 0.5,
            amp_max: 1.5,
            radius_min: 1.0,
            radius_max: 3.0,
            noise_sigma: 0.1,
        }
    }
}

/// One Gaussian blob: per-channel amplitude over an isotropic footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub amplitude: Vec<f64>,
}

impl Blob {
    fn weight(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        (-(dy * dy + dx * dx) / (2.0 * self.radius * self.radius)).exp()
    }

    /// Footprint summed over the `height × width` grid, computed separably.
    pub fn grid_mass(&self, height: usize, width: usize) -> f64 {
        let axis = |n: usize, c: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let d = i as f64 - c;
                    (-(d * d) / (2.0 * self.radius * self.radius)).exp()
                })
                .sum()
        };
        axis(height, self.cy) * axis(width, self.cx)
    }
}

/// A generated scene: the clean target and the two noisy sensor maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cam: BevMap,
    pub lidar: BevMap,
    pub target: BevMap,
    pub blobs: Vec<Blob>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::contract("scene_spec", "empty map"));
        }
        if !(self.amp_min <= self.amp_max) || !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return Err(Error::contract("scene_spec", "invalid amplitude or radius range"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::contract("scene_spec", "noise sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

const TAG_BLOBS: u64 = 1;
const TAG_CAMERA: u64 = 2;
const TAG_LIDAR: u64 = 3;

fn noisy(target: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma == 0.0 {
        return target.clone();
    }
    Tensor::from_fn(target.shape(), |i| target.data()[i] + sigma * rng::normal_at(seed, i as u64))
}

pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut s = Stream::new(rng::sub_seed(spec.seed, TAG_BLOBS));
    let blobs: Vec<Blob> = (0..spec.num_blobs)
        .map(|_| Blob {
            cy: s.uniform_in(0.0, h as f64 - 1.0),
            cx: s.uniform_in(0.0, w as f64 - 1.0),
            radius: s.uniform_in(spec.radius_min, spec.radius_max),
            amplitude: s.uniform_vec(c, spec.amp_min, spec.amp_max),
        })
        .collect();
    let mut target = Tensor::zeros(&[h, w, c]);
    {
        let d = target.data_mut();
        for b in &blobs {
            for y in 0..h {
                for x in 0..w {
                    let wgt = b.weight(y, x);
                    let px = &mut d[(y * w + x) * c..(y * w + x + 1) * c];
                    for (v, a) in px.iter_mut().zip(&b.amplitude) {
                        *v += a * wgt;
                    }
                }
            }
        }
    }
    let cam = noisy(&target, spec.noise_sigma, rng::sub_seed(spec.seed, TAG_CAMERA));
    let lidar = noisy(&target, spec.noise_sigma, rng::sub_seed(spec.seed, TAG_LIDAR));
    Ok(Scene {
        cam: BevMap::new(cam, Modality::Camera)?,
        lidar: BevMap::new(lidar, Modality::Lidar)?,
        target: BevMap::new(target, Modality::Fused)?,
        blobs,
    })
}

/// Axis-aligned pixel rectangle `[y0, y0 + height) × [x0, x0 + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.y0 + self.height > height || self.x0 + self.width > width {
            return Err(Error::contract(
                "corrupt",
                format!("region {self:?} exceeds {height}x{width} map"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Zero the region.
    Dropout,
    /// Add seeded Gaussian noise inside the region.
    GaussianNoise { sigma: f64, seed: u64 },
    /// Box filter of the given radius, written inside the region only.
    Blur { radius: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub target: Modality,
    pub region: Region,
    pub kind: CorruptionKind,
}

/// Applies `c` to `f`. Pixels outside the region are untouched.
pub fn corrupt(f: &BevMap, c: &CorruptionSpec) -> Result<BevMap> {
    let (h, w, ch) = (f.height(), f.width(), f.channels());
    c.region.check(h, w)?;
    let src = f.tensor().data();
    let mut out = src.to_vec();
    let r = c.region;
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            for k in 0..ch {
                let i = (y * w + x) * ch + k;
                out[i] = match c.kind {
                    CorruptionKind::Dropout => 0.0,
                    CorruptionKind::GaussianNoise { sigma, seed } => {
                        if sigma == 0.0 {
                            src[i]
                        } else {
                            src[i] + sigma * rng::normal_at(seed, i as u64)
                        }
                    }
                    CorruptionKind::Blur { radius } => {
                        let (ylo, yhi) = (y.saturating_sub(radius), (y + radius).min(h - 1));
                        let (xlo, xhi) = (x.saturating_sub(radius), (x + radius).min(w - 1));
                        let mut acc = 0.0;
                        for yy in ylo..=yhi {
                            for xx in xlo..=xhi {
                                acc += src[(yy * w + xx) * ch + k];
                            }
                        }
                        acc / ((yhi - ylo + 1) * (xhi - xlo + 1)) as f64
                    }
                };
            }
        }
    }
    BevMap::new(Tensor::new(vec![h, w, ch], out)?, f.modality())
}

/// Which end of the gate weights the uncorrupted modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanSide {
    /// The clean stream is weighted by `G` (the camera-queried stream).
    Gate,
    /// The clean stream is weighted by `1 − G`.
    Complement,
}

impl CleanSide {
    /// Camera weight is `G`, LiDAR weight is `1 − G`.
    pub fn for_clean(modality: Modality) -> Self {
        match modality {
            Modality::Lidar => CleanSide::Complement,
            _ => CleanSide::Gate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateAlignment {
    /// Mean weight on the clean modality inside the corrupted region.
    pub inside: f64,
    /// Same, outside the region.
    pub outside: f64,
    /// `inside − outside`.
    pub separation: f64,
}

/// Averages the clean-modality weight inside and outside `region`. When one
/// side is empty it takes the other side's mean.
pub fn gate_alignment(g: &GateMap, region: &Region, side: CleanSide) -> GateAlignment {
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..g.height() {
        for x in 0..g.width() {
            let v = match side {
                CleanSide::Gate => g.at(y, x),
                CleanSide::Complement => 1.0 - g.at(y, x),
            };
            if region.contains(y, x) {
                sin += v;
                nin += 1;
            } else {
                sout += v;
                nout += 1;
            }
        }
    }
    let inside = if nin > 0 { sin / nin as f64 } else { sout / nout as f64 };
    let outside = if nout > 0 { sout / nout as f64 } else { inside };
    GateAlignment {
        inside,
        outside,
        separation: inside - outside,
    }
}

/// How each scene of a stream is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionPlan {
    pub target: Modality,
    pub kind: CorruptionKind,
    pub region_height: usize,
    pub region_width: usize,
}

impl Default for CorruptionPlan {
    fn default() -> Self {
        Self {
            target: Modality::Lidar,
            kind: CorruptionKind::Dropout,
            region_height: 8,
            region_width: 8,
        }
    }
}

impl CorruptionPlan {
    /// Region placed uniformly at random inside the map, seeded.
    pub fn materialize(&self, height: usize, width: usize, seed: u64) -> Result<CorruptionSpec> {
        if self.region_height > height || self.region_width > width {
            return Err(Error::contract("corruption_plan", "region larger than map"));
        }
        let mut s = Stream::new(seed);
        let y0 = s.below((height - self.region_height + 1) as u64) as usize;
        let x0 = s.below((width - self.region_width + 1) as u64) as usize;
        Ok(CorruptionSpec {
            target: self.target,
            region: Region {
                y0,
                x0,
                height: self.region_height,
                width: self.region_width,
            },
            kind: self.kind,
        })
    }

    pub fn clean_modality(&self) -> Modality {
        match self.target {
            Modality::Lidar => Modality::Camera,
            _ => Modality::Lidar,
        }
    }
}

/// A scene with one sensor corrupted, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cam: BevMap,
    pub lidar: BevMap,
    /// Reconstruction target for `Y`: the clean camera plus clean LiDAR map.
    pub target: Tensor,
    pub corruption: CorruptionSpec,
}

const TAG_TRAIN: u64 = 10;
const TAG_HOLDOUT: u64 = 11;
const TAG_REGION: u64 = 12;

/// Sample `index` of a seeded stream (`holdout` selects a disjoint stream).
pub fn make_sample(spec: &SceneSpec, plan: &CorruptionPlan, seed: u64, index: u64, holdout: bool) -> Result<Sample> {
    let stream = rng::sub_seed(seed, if holdout { TAG_HOLDOUT } else { TAG_TRAIN });
    let scene_seed = rng::sub_seed(stream, index);
    let scene = gen_scene(&spec.with_seed(scene_seed))?;
    let corruption = plan.materialize(spec.height, spec.width, rng::sub_seed(scene_seed, TAG_REGION))?;
    let (mut cam, mut lidar) = (scene.cam, scene.lidar);
    match plan.target {
        Modality::Lidar => lidar = corrupt(&lidar, &corruption)?,
        _ => cam = corrupt(&cam, &corruption)?,
    }
    Ok(Sample {
        cam,
        lidar,
        target: scene.target.tensor().scale(2.0),
        corruption,
    })
}

/// Fusion strategy compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Strategy {
    /// Static `conv1x1(concat(F_cam, F_lidar))`.
    ConvFuser,
    /// Full pipeline with a constant gate.
    FixedGate { g: f64 },
    /// Full pipeline with the learned gate.
    Adaptive,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::ConvFuser => "conv_fuser".into(),
            Strategy::FixedGate { g } => format!("fixed_{g}"),
            Strategy::Adaptive => "adaptive".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv_fuser" | "convfuser" => Some(Strategy::ConvFuser),
            "adaptive" => Some(Strategy::Adaptive),
            _ => {
                let g: f64 = s.strip_prefix("fixed_").or_else(|| s.strip_prefix("fixed:"))?.parse().ok()?;
                (0.0..=1.0).contains(&g).then_some(Strategy::FixedGate { g })
            }
        }
    }

    /// ConvFuser, fixed 0.3 / 0.5 / 0.7, adaptive.
    pub fn standard_set() -> Vec<Strategy> {
        vec![
            Strategy::ConvFuser,
            Strategy::FixedGate { g: 0.3 },
            Strategy::FixedGate { g: 0.5 },
            Strategy::FixedGate { g: 0.7 },
            Strategy::Adaptive,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub pipeline: PipelineConfig,
    pub scene: SceneSpec,
    pub corruption: CorruptionPlan,
    pub optim: OptimConfig,
    pub train_steps: usize,
    pub train_scenes: usize,
    pub holdout_scenes: usize,
    /// Seeds scene streams, regions and initialization.
    pub seed: u64,
    /// Train the batch norm on per-scene batch statistics. Off by default:
    /// statistics of a single scene are too unstable, so the norm is trained
    /// as a frozen affine layer.
    pub batch_stats: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            scene: SceneSpec::default(),
            corruption: CorruptionPlan::default(),
            optim: OptimConfig {
                lr: 3e-3,
                ..OptimConfig::default()
            },
            train_steps: 2000,
            train_scenes: 2000,
            holdout_scenes: 16,
            seed: 0,
            batch_stats: false,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.scene.validate()?;
        self.optim.validate()?;
        if self.scene.channels != self.pipeline.channels {
            return Err(Error::contract("ablation_config", "scene and pipeline channel counts differ"));
        }
        self.pipeline.check_input(&[self.scene.height, self.scene.width, self.scene.channels])?;
        if self.train_scenes == 0 || self.holdout_scenes == 0 {
            return Err(Error::contract("ablation_config", "need at least one train and one holdout scene"));
        }
        Ok(())
    }

    pub fn samples(&self, holdout: bool) -> Result<Vec<Sample>> {
        let n = if holdout { self.holdout_scenes } else { self.train_scenes };
        (0..n as u64)
            .map(|i| make_sample(&self.scene, &self.corruption, self.seed, i, holdout))
            .collect()
    }
}

/// Outcome of one strategy's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub seed: u64,
    pub train_steps: usize,
    pub final_train_mse: f64,
    pub holdout_mse: f64,
    /// Adaptive only: gate weight on the clean modality.
    pub gate_inside: Option<f64>,
    pub gate_outside: Option<f64>,
    pub gate_separation: Option<f64>,
    pub failed: bool,
    pub failure: Option<String>,
}

/// Trained weights of one run.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Pipeline(PipelineParams),
    ConvFuser(ConvFuserParams),
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub record: MetricsRecord,
    pub model: TrainedModel,
    /// Training loss at every completed step.
    pub losses: Vec<f64>,
}

enum Model {
    Pipeline { params: PipelineParams, fusion: FusionMode },
    ConvFuser(ConvFuserParams),
}

impl Model {
    fn named(&self) -> Vec<(String, Tensor)> {
        match self {
            Model::Pipeline { params, .. } => params.named_tensors(),
            Model::ConvFuser(p) => {
                let mut out = Vec::new();
                p.map("conv_fuser", &mut |n, t| out.push((n.to_string(), t.clone())));
                out
            }
        }
    }

    fn load(&mut self, store: &ParamStore) {
        let get = |n: &str| store.value(n).expect("parameter present").clone();
        match self {
            Model::Pipeline { params, .. } => {
                let bn = params.phi.bn.clone();
                *params = params.map(&mut |n, _| get(n));
                params.phi.bn.running_mean = bn.running_mean;
                params.phi.bn.running_var = bn.running_var;
            }
            Model::ConvFuser(p) => *p = p.map("conv_fuser", &mut |n, _| get(n)),
        }
    }

    /// Records the model's output `Y`. Returns `(y, parameter leaves by name, batch stats)`.
    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        tape: &mut Tape,
        cfg: &PipelineConfig,
        s: &Sample,
        mode: BnMode,
    ) -> Result<(Var, Option<Var>, Vec<(String, Var)>, Option<(Vec<f64>, Vec<f64>)>)> {
        let cam = tape.leaf(s.cam.tensor().clone());
        let lidar = tape.leaf(s.lidar.tensor().clone());
        let mut leaves = Vec::new();
        match self {
            Model::Pipeline { params, fusion } => {
                let pv = params.map(&mut |n, t| {
                    let v = tape.leaf(t.clone());
                    leaves.push((n.to_string(), v));
                    v
                });
                let out = pipeline_graph(tape, cam, lidar, cfg, &pv, mode, *fusion)?;
                Ok((out.y, Some(out.gate), leaves, out.batch_stats))
            }
            Model::ConvFuser(p) => {
                let pv = p.map("conv_fuser", &mut |n, t| {
                    let v = tape.leaf(t.clone());
                    leaves.push((n.to_string(), v));
                    v
                });
                Ok((conv_fuser_graph(tape, cam, lidar, &pv)?, None, leaves, None))
            }
        }
    }

    fn fold_stats(&mut self, stats: Option<(Vec<f64>, Vec<f64>)>) {
        if let (Model::Pipeline { params, .. }, Some((m, v))) = (self, stats) {
            ops::update_running_stats(&mut params.phi.bn, &m, &v);
        }
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Eval-mode reconstruction error and mean gate alignment over `samples`.
fn evaluate(model: &Model, cfg: &AblationConfig, samples: &[Sample]) -> Result<(f64, Option<GateAlignment>)> {
    let side = CleanSide::for_clean(cfg.corruption.clean_modality());
    let mut total = 0.0;
    let (mut gin, mut gout) = (0.0, 0.0);
    let mut has_gate = false;
    for s in samples {
        let mut tape = Tape::new();
        let (y, gate, _, _) = model.forward(&mut tape, &cfg.pipeline, s, BnMode::Eval)?;
        total += mse(tape.value(y), &s.target);
        if let Some(g) = gate {
            let a = gate_alignment(&GateMap::new(tape.value(g).clone())?, &s.corruption.region, side);
            gin += a.inside;
            gout += a.outside;
            has_gate = true;
        }
    }
    let n = samples.len() as f64;
    let align = has_gate.then(|| GateAlignment {
        inside: gin / n,
        outside: gout / n,
        separation: (gin - gout) / n,
    });
    Ok((total / n, align))
}

/// Trains one strategy on the configured scene stream and evaluates it.
///
/// Divergence is reported in the record rather than raised; configuration
/// errors are raised.
pub fn run_ablation(cfg: &AblationConfig, strategy: Strategy) -> Result<AblationRun> {
    cfg.validate()?;
    let train = cfg.samples(false)?;
    let holdout = cfg.samples(true)?;
    run_ablation_on(cfg, strategy, &train, &holdout)
}

pub fn run_ablation_on(cfg: &AblationConfig, strategy: Strategy, train: &[Sample], holdout: &[Sample]) -> Result<AblationRun> {
    cfg.validate()?;
    let c = cfg.pipeline.channels;
    let mut model = match strategy {
        Strategy::ConvFuser => Model::ConvFuser(ConvFuserParams::sum_init(c)),
        Strategy::FixedGate { g } => {
            crate::gated_fusion::fixed_gate(g, 1, 1)?;
            Model::Pipeline {
                params: PipelineParams::init(&cfg.pipeline, cfg.seed),
                fusion: FusionMode::Fixed(g),
            }
        }
        Strategy::Adaptive => Model::Pipeline {
            params: PipelineParams::init(&cfg.pipeline, cfg.seed),
            fusion: FusionMode::Adaptive,
        },
    };
    let mut store = ParamStore::from_named(model.named())?;
    let mut failure = None;
    let mut losses = Vec::with_capacity(cfg.train_steps);

    for step in 0..cfg.train_steps {
        let sample = &train[step % train.len()];
        let mut tape = Tape::new();
        let mode = if cfg.batch_stats { BnMode::Train } else { BnMode::Eval };
        let (y, _, leaves, stats) = model.forward(&mut tape, &cfg.pipeline, sample, mode)?;
        let loss = tape.mse(y, sample.target.clone())?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            failure = Some(format!("loss not finite at step {step}"));
            break;
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        for (name, v) in &leaves {
            store.set_grad(name, grads.get_or_zeros(*v, tape.value(*v)))?;
        }
        adam_step(&mut store, &cfg.optim, step)?;
        model.load(&store);
        model.fold_stats(stats);
    }

    let record = match failure {
        Some(msg) => MetricsRecord {
            strategy: strategy.label(),
            seed: cfg.seed,
            train_steps: cfg.train_steps,
            final_train_mse: f64::NAN,
            holdout_mse: f64::NAN,
            gate_inside: None,
            gate_outside: None,
            gate_separation: None,
            failed: true,
            failure: Some(msg),
        },
        None => {
            let (train_mse, _) = evaluate(&model, cfg, train)?;
            let (holdout_mse, align) = evaluate(&model, cfg, holdout)?;
            let align = align.filter(|_| strategy == Strategy::Adaptive);
            let failed = !(train_mse.is_finite() && holdout_mse.is_finite());
            MetricsRecord {
                strategy: strategy.label(),
                seed: cfg.seed,
                train_steps: cfg.train_steps,
                final_train_mse: train_mse,
                holdout_mse,
                gate_inside: align.map(|a| a.inside),
                gate_outside: align.map(|a| a.outside),
                gate_separation: align.map(|a| a.separation),
                failed,
                failure: failed.then(|| "non-finite evaluation".to_string()),
            }
        }
    };
    let model = match model {
        Model::Pipeline { params, .. } => TrainedModel::Pipeline(params),
        Model::ConvFuser(p) => TrainedModel::ConvFuser(p),
    };
    Ok(AblationRun { record, model, losses })
}

/// Completed strategies ordered by holdout MSE, best first.
pub fn rank(records: &[MetricsRecord]) -> Vec<String> {
    let mut ok: Vec<&MetricsRecord> = records.iter().filter(|r| !r.failed).collect();
    ok.sort_by(|a, b| a.holdout_mse.total_cmp(&b.holdout_mse));
    ok.into_iter().map(|r| r.strategy.clone()).collect()
}
