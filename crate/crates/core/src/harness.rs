//! Reproducible experiments: teacher-student early-phase runs, the rank-one
//! and non-negativity sweeps, the projection identity, blow-up fits and the
//! gap between rescaled training flow and correlation ascent.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, one stream
//! per purpose (data, teacher, initialization, mini-batches), with normals
//! from `rand_distr::StandardNormal`. Outputs contain no timestamps, so the
//! same configuration produces the same bytes on the same build.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    self, BlowupReport, GdConfig, IntegratorConfig, MiniBatch, PgaConfig, Termination, Trajectory,
};
use crate::kink::{ascend_on_kinks, KinkConfig};
use crate::kkt::{self, RankOneKkt, Verdict};
use crate::loss::{ncf_target, total_loss, LossKind};
use crate::metrics;
use crate::ncf::{self, NcfProblem};
use crate::net::{self, Dataset, NetSpec, Weights};

pub const GENERATOR: &str =
    "ChaCha8Rng (rand_chacha 0.9), seed_from_u64(seed) with one stream per purpose; normals from rand_distr::StandardNormal";

/// Commit the library was built from, when the build could see git.
pub const BUILD: &str = match option_env!("NCF_BUILD_HASH") {
    Some(h) => h,
    None => "unknown",
};

mod stream {
    pub const DATA: u64 = 0;
    pub const TEACHER: u64 = 1;
    pub const INIT: u64 = 2;
}

/// Mixed into the seed handed to the mini-batch shuffler.
const MINIBATCH_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

const MAX_INIT_DRAWS: usize = 10_000;

fn rng_for(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EarlyPhase,
    TableKappaRho,
    GdVsPga,
    BlowupRate,
    RescaleGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian,
    /// Standard Gaussians normalized to unit length.
    UnitSphere,
    /// Every entry equal to one.
    Ones,
}

/// Teacher network `scale·H*(x)` with standard normal weights. With
/// `abs_inner` the layers strictly between the first and the last enter
/// through their absolute values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecipe {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub alpha: f64,
    pub p: u32,
    #[serde(default)]
    pub abs_inner: bool,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSource {
    Gaussian,
    Constant { value: f64 },
    Teacher(TeacherRecipe),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecipe {
    pub n: usize,
    pub d: usize,
    pub inputs: InputDistribution,
    pub labels: LabelSource,
}

/// How per-example losses are combined for gradient descent. `Mean`
/// divides the summed loss by `n`, which only rescales time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normalized standard Gaussian.
    RandomUnit,
    /// Normalized standard Gaussian redrawn until the correlation is positive.
    PositiveUnit,
    /// Every entry equal to `1/√k`.
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiniBatchSettings {
    pub size: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step: f64,
    /// Descent iterations, ascent iteration cap, or ascent steps.
    #[serde(default)]
    pub iters: usize,
    /// Flow horizon for the continuous-time experiments.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_stop")]
    pub stop_alignment: f64,
    /// Mini-batch warm-up for `p = 1` sweeps.
    #[serde(default)]
    pub minibatch: Option<MiniBatchSettings>,
    /// Full-batch iterations before a kinked `p = 1` run switches to
    /// [`ascend_on_kinks`].
    #[serde(default = "default_kink_after")]
    pub kink_after: usize,
    #[serde(default = "default_kink")]
    pub kink: KinkConfig,
}

fn default_stride() -> usize {
    1
}

fn default_stop() -> f64 {
    1.0 - 1e-10
}

fn default_kink_after() -> usize {
    2_000
}

fn default_kink() -> KinkConfig {
    KinkConfig {
        stop_alignment: 1.0 - 1e-13,
        ..KinkConfig::default()
    }
}

impl OptimizerConfig {
    pub fn new(step: f64, iters: usize) -> Self {
        Self {
            step,
            iters,
            horizon: None,
            stride: default_stride(),
            stop_alignment: default_stop(),
            minibatch: None,
            kink_after: default_kink_after(),
            kink: default_kink(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub min_alignment: Option<f64>,
    pub loss_ratio: Option<[f64; 2]>,
    pub max_kappa: Option<f64>,
    pub min_singular_ratio: Option<f64>,
    pub max_rho: Option<f64>,
    pub max_deviation: Option<f64>,
    pub exponent_tolerance: Option<f64>,
    pub min_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub spec: NetSpec,
    pub data: DatasetRecipe,
    #[serde(default = "square")]
    pub loss: LossKind,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub delta: f64,
    /// Initial scales compared by the rescale-gap experiment.
    #[serde(default)]
    pub deltas: Vec<f64>,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub init: Option<InitScheme>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn square() -> LossKind {
    LossKind::Square
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Precondition("at least one seed is required".into()));
        }
        if self.data.d != self.spec.input_dim() {
            return Err(Error::Shape(format!(
                "recipe dimension {} does not match network input {}",
                self.data.d,
                self.spec.input_dim()
            )));
        }
        if self.data.n == 0 {
            return Err(Error::Precondition("dataset needs at least one example".into()));
        }
        if !(self.optimizer.step > 0.0) || self.optimizer.stride == 0 {
            return Err(Error::Precondition(format!("bad optimizer settings {:?}", self.optimizer)));
        }
        match self.kind {
            ExperimentKind::EarlyPhase if !(self.delta > 0.0) => Err(Error::Precondition(format!(
                "early-phase runs need a positive initial scale, got {}",
                self.delta
            ))),
            ExperimentKind::RescaleGap if self.deltas.is_empty() || self.deltas.iter().any(|&d| !(d > 0.0)) => {
                Err(Error::Precondition("rescale gap needs positive scales".into()))
            }
            ExperimentKind::RescaleGap | ExperimentKind::BlowupRate
                if !self.optimizer.horizon.is_some_and(|h| h > 0.0) =>
            {
                Err(Error::Precondition("flow experiments need a positive horizon".into()))
            }
            _ => Ok(()),
        }
    }

    fn init_scheme(&self) -> InitScheme {
        self.init.unwrap_or(match self.kind {
            ExperimentKind::EarlyPhase => InitScheme::RandomUnit,
            ExperimentKind::BlowupRate => InitScheme::Balanced,
            _ => InitScheme::PositiveUnit,
        })
    }

    /// Squared-ReLU student with 20 hidden units fitted to a 2-unit teacher
    /// on 100 points of the unit sphere in R^10.
    pub fn early_phase(seed: u64) -> Self {
        Self {
            kind: ExperimentKind::EarlyPhase,
            spec: NetSpec::new(vec![10, 20, 1], 0.0, 2).expect("valid widths"),
            data: DatasetRecipe {
                n: 100,
                d: 10,
                inputs: InputDistribution::UnitSphere,
                labels: LabelSource::Teacher(TeacherRecipe {
                    hidden: vec![2],
                    alpha: 0.0,
                    p: 2,
                    abs_inner: false,
                    scale: 1.0,
                }),
            },
            loss: LossKind::Square,
            reduction: Reduction::Mean,
            delta: 0.05,
            deltas: Vec::new(),
            optimizer: OptimizerConfig {
                stride: 20,
                ..OptimizerConfig::new(2e-2, 50_360)
            },
            init: Some(InitScheme::RandomUnit),
            seeds: vec![seed],
            thresholds: Thresholds {
                min_alignment: Some(0.99),
                loss_ratio: Some([0.99, 1.01]),
                max_kappa: Some(0.05),
                ..Thresholds::default()
            },
            out_dir: None,
        }
    }

    /// Three-layer ReLU student (20-20-30-1) fitted to `10·v*ᵀσ(|W2*|σ(W1*x))`
    /// on the unit sphere in R^20.
    pub fn relu_three_layer(seed: u64) -> Self {
        Self {
            kind: ExperimentKind::EarlyPhase,
            spec: NetSpec::new(vec![20, 20, 30, 1], 0.0, 1).expect("valid widths"),
            data: DatasetRecipe {
                n: 100,
                d: 20,
                inputs: InputDistribution::UnitSphere,
                labels: LabelSource::Teacher(TeacherRecipe {
                    hidden: vec![2, 2],
                    alpha: 0.0,
                    p: 1,
                    abs_inner: true,
                    scale: 10.0,
                }),
            },
            loss: LossKind::Square,
            reduction: Reduction::Mean,
            delta: 0.01,
            deltas: Vec::new(),
            optimizer: OptimizerConfig {
                stride: 50,
                ..OptimizerConfig::new(5e-3, 64_900)
            },
            init: Some(InitScheme::RandomUnit),
            seeds: vec![seed],
            thresholds: Thresholds {
                min_alignment: Some(0.98),
                min_singular_ratio: Some(15.0),
                ..Thresholds::default()
            },
            out_dir: None,
        }
    }

    /// One cell of the sweeps: width-10 hidden layers on 100 Gaussian
    /// points in R^10 with Gaussian labels.
    pub fn table_cell(depth: usize, p: u32, alpha: f64, seeds: Vec<u64>) -> Result<Self> {
        let spec = NetSpec::with_hidden(10, &vec![10; depth.saturating_sub(1)], alpha, p)?;
        Ok(Self {
            kind: ExperimentKind::TableKappaRho,
            spec,
            data: DatasetRecipe {
                n: 100,
                d: 10,
                inputs: InputDistribution::Gaussian,
                labels: LabelSource::Gaussian,
            },
            loss: LossKind::Square,
            reduction: Reduction::Sum,
            delta: 0.0,
            deltas: Vec::new(),
            optimizer: OptimizerConfig {
                minibatch: (p == 1).then_some(MiniBatchSettings { size: 10, iters: 2_000 }),
                ..OptimizerConfig::new(1e-2, 5_000_000)
            },
            init: Some(InitScheme::PositiveUnit),
            seeds,
            thresholds: Thresholds {
                max_kappa: Some(1e-6),
                max_rho: (alpha != 1.0).then_some(1e-4),
                ..Thresholds::default()
            },
            out_dir: None,
        })
    }

    /// Paired projected and adaptive-step ascent on a two-layer `p = 2` net.
    pub fn gd_vs_pga(steps: usize, seeds: Vec<u64>) -> Self {
        Self {
            kind: ExperimentKind::GdVsPga,
            spec: NetSpec::new(vec![10, 10, 1], 0.0, 2).expect("valid widths"),
            data: DatasetRecipe {
                n: 20,
                d: 10,
                inputs: InputDistribution::UnitSphere,
                labels: LabelSource::Gaussian,
            },
            loss: LossKind::Square,
            reduction: Reduction::Sum,
            delta: 0.0,
            deltas: Vec::new(),
            // u(T) = v(T)/Π c_t grows geometrically; keep it finite at 500 steps
            optimizer: OptimizerConfig::new(1e-2, steps),
            init: Some(InitScheme::RandomUnit),
            seeds,
            thresholds: Thresholds {
                max_deviation: Some(if steps <= 50 { 1e-10 } else { 1e-8 }),
                ..Thresholds::default()
            },
            out_dir: None,
        }
    }

    /// Balanced scalar linear chain with one sample `x = y = 1`, whose ascent
    /// flow is `u̇ = u^{L−1}` in every coordinate.
    pub fn blowup(depth: usize) -> Result<Self> {
        Ok(Self {
            kind: ExperimentKind::BlowupRate,
            spec: NetSpec::new(vec![1; depth + 1], 1.0, 1)?,
            data: DatasetRecipe {
                n: 1,
                d: 1,
                inputs: InputDistribution::Ones,
                labels: LabelSource::Constant { value: 1.0 },
            },
            loss: LossKind::Square,
            reduction: Reduction::Sum,
            delta: 0.0,
            deltas: Vec::new(),
            optimizer: OptimizerConfig {
                horizon: Some(10.0),
                ..OptimizerConfig::new(1e-3, 0)
            },
            init: Some(InitScheme::Balanced),
            seeds: vec![0],
            thresholds: Thresholds {
                exponent_tolerance: Some(0.05),
                min_r_squared: Some(0.99),
                ..Thresholds::default()
            },
            out_dir: None,
        })
    }

    /// The early-phase toy compared against its correlation flow over a
    /// fixed horizon in rescaled time.
    pub fn rescale_gap(seed: u64) -> Self {
        let base = Self::early_phase(seed);
        Self {
            kind: ExperimentKind::RescaleGap,
            reduction: Reduction::Sum,
            deltas: vec![0.2, 0.1, 0.05],
            delta: 0.0,
            optimizer: OptimizerConfig {
                horizon: Some(0.2),
                ..OptimizerConfig::new(1e-2, 0)
            },
            init: Some(InitScheme::PositiveUnit),
            thresholds: Thresholds::default(),
            ..base
        }
    }
}

// ---------------------------------------------------------------------------
// data

/// Inputs and labels for `seed`. Teacher labels use their own stream, so the
/// inputs do not depend on the label source.
pub fn sample_dataset(recipe: &DatasetRecipe, seed: u64) -> Result<Dataset> {
    let mut rng = rng_for(seed, stream::DATA);
    let (d, n) = (recipe.d, recipe.n);
    let mut x = match recipe.inputs {
        InputDistribution::Ones => Array2::ones((d, n)),
        _ => Array2::from_shape_vec((d, n), gaussian_vec(&mut rng, d * n)).expect("length matches"),
    };
    if recipe.inputs == InputDistribution::UnitSphere {
        for mut col in x.axis_iter_mut(Axis(1)) {
            let norm = col.dot(&col).sqrt();
            col /= norm;
        }
    }
    let zero_labels = Array1::zeros(n);
    let data = Dataset::new(x, zero_labels)?;
    let y = match &recipe.labels {
        LabelSource::Gaussian => Array1::from(gaussian_vec(&mut rng, n)),
        LabelSource::Constant { value } => Array1::from_elem(n, *value),
        LabelSource::Teacher(t) => make_teacher_labels(t, seed, &data)?,
    };
    data.with_targets(y)
}

/// Teacher spec and standard normal weights for inputs of dimension `d`.
pub fn teacher_weights(teacher: &TeacherRecipe, d: usize, seed: u64) -> Result<(NetSpec, Weights)> {
    let spec = NetSpec::with_hidden(d, &teacher.hidden, teacher.alpha, teacher.p)?;
    let mut rng = rng_for(seed, stream::TEACHER);
    let w = Weights::from_flat(&spec, gaussian_vec(&mut rng, spec.param_count()))?;
    Ok((spec, w))
}

/// `scale·H*(X)` for given teacher weights, applying `abs_inner`.
pub fn teacher_outputs(teacher: &TeacherRecipe, spec: &NetSpec, w: &Weights, data: &Dataset) -> Result<Array1<f64>> {
    let mut w = w.clone();
    if teacher.abs_inner {
        for l in 1..spec.depth().saturating_sub(1) {
            w.layer_mut(l).mapv_inplace(f64::abs);
        }
    }
    Ok(net::outputs(spec, &w, data.x.view())? * teacher.scale)
}

pub fn make_teacher_labels(teacher: &TeacherRecipe, seed: u64, data: &Dataset) -> Result<Array1<f64>> {
    let (spec, w) = teacher_weights(teacher, data.dim(), seed)?;
    teacher_outputs(teacher, &spec, &w, data)
}

/// Initial unit direction for `seed`.
pub fn initial_direction(scheme: InitScheme, prob: &NcfProblem, seed: u64) -> Result<Weights> {
    let spec = &prob.spec;
    let k = spec.param_count();
    if scheme == InitScheme::Balanced {
        return Weights::from_flat(spec, vec![1.0 / (k as f64).sqrt(); k]);
    }
    let mut rng = rng_for(seed, stream::INIT);
    for _ in 0..MAX_INIT_DRAWS {
        let w = Weights::from_flat(spec, gaussian_vec(&mut rng, k))?;
        let w = w.scaled(1.0 / w.norm());
        if scheme == InitScheme::RandomUnit || prob.value(&w)? > 0.0 {
            return Ok(w);
        }
    }
    Err(Error::Precondition(format!(
        "no initial direction with positive correlation in {MAX_INIT_DRAWS} draws"
    )))
}

fn problem_for(cfg: &ExperimentConfig, seed: u64) -> Result<NcfProblem> {
    let data = sample_dataset(&cfg.data, seed)?;
    let z = ncf_target(cfg.loss, data.y.view());
    NcfProblem::new(cfg.spec.clone(), data, z)
}

// ---------------------------------------------------------------------------
// checks

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
    Between(f64, f64),
    Finite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` when the quantity could not be measured, which fails the check.
    pub value: Option<f64>,
    pub bound: Bound,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, value: Option<f64>, bound: Bound) -> Self {
        let passed = value.is_some_and(|v| {
            v.is_finite()
                && match bound {
                    Bound::AtMost(b) => v <= b,
                    Bound::AtLeast(b) => v >= b,
                    Bound::Between(lo, hi) => v >= lo && v <= hi,
                    Bound::Finite => true,
                }
        });
        Self {
            name: name.to_string(),
            value: value.filter(|v| v.is_finite()),
            bound,
            passed,
        }
    }
}

fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

// ---------------------------------------------------------------------------
// output files

#[derive(Debug, Clone, Serialize)]
pub struct Meta<'a, C: Serialize> {
    pub build: &'a str,
    pub version: &'a str,
    pub generator: &'a str,
    pub config: &'a C,
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_meta<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("meta.json"),
        &Meta {
            build: BUILD,
            version: env!("CARGO_PKG_VERSION"),
            generator: GENERATOR,
            config: cfg,
        },
    )
}

fn write_outputs<S: Serialize>(cfg: &ExperimentConfig, summary: &S, series: &str, heatmap: Option<&str>) -> Result<()> {
    let Some(dir) = &cfg.out_dir else {
        return Ok(());
    };
    write_meta(dir, cfg)?;
    write_json(&dir.join("summary.json"), summary)?;
    fs::write(dir.join("series.csv"), series)?;
    if let Some(h) = heatmap {
        fs::write(dir.join("heatmap.csv"), h)?;
    }
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// early phase

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlySample {
    pub iteration: f64,
    pub loss_ratio: f64,
    pub norm: f64,
    pub norm_ratio: f64,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyPhaseReport {
    pub seed: u64,
    pub iterations: usize,
    pub diverged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub final_alignment: Option<f64>,
    /// `max_t ‖w(t)‖/δ` over the recorded snapshots.
    pub max_norm_ratio: f64,
    pub final_norm_ratio: f64,
    /// First span of recorded iterations where the alignment and loss-ratio
    /// thresholds hold together.
    pub threshold_window: Option<[f64; 2]>,
    pub hidden_kappa: Option<f64>,
    /// Top two singular values of `W_l/‖w‖` for each hidden layer.
    pub hidden_top2: Vec<Option<(f64, f64)>>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct EarlyPhaseRun {
    pub report: EarlyPhaseReport,
    pub series: Vec<EarlySample>,
    /// `(stage, layer, row, col, |w|/‖w‖)` at initialization and at the end.
    pub heatmap: Vec<(&'static str, usize, usize, usize, f64)>,
}

fn heat_cells(stage: &'static str, w: &Weights, out: &mut Vec<(&'static str, usize, usize, usize, f64)>) {
    let norm = w.norm();
    for (l, layer) in w.layers().iter().enumerate() {
        for ((r, c), &v) in layer.indexed_iter() {
            out.push((stage, l, r, c, if norm > 0.0 { v.abs() / norm } else { 0.0 }));
        }
    }
}

/// Gradient descent from `δ·w0` on the configured teacher-student problem
/// (first seed only), with the loss, norm and directional alignment along
/// the run.
pub fn run_early_phase(cfg: &ExperimentConfig) -> Result<EarlyPhaseRun> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::EarlyPhase {
        return Err(Error::Precondition(format!("expected an early-phase config, got {:?}", cfg.kind)));
    }
    let seed = cfg.seeds[0];
    if cfg.seeds.len() > 1 {
        warn!("early-phase run uses only the first seed {seed}");
    }
    let prob = problem_for(cfg, seed)?;
    let spec = &cfg.spec;
    let w0 = initial_direction(cfg.init_scheme(), &prob, seed)?;
    let opt = &cfg.optimizer;
    let traj = flow::gradient_descent(
        spec,
        &w0,
        cfg.delta,
        &GdConfig {
            step: match cfg.reduction {
                Reduction::Sum => opt.step,
                Reduction::Mean => opt.step / prob.data.n() as f64,
            },
            iters: opt.iters,
            stride: opt.stride,
        },
        &prob.data,
        cfg.loss,
    )?;
    let diverged = matches!(traj.terminated_by, Termination::BlowUp { .. });

    let loss_at = |w: &Weights| -> Result<f64> {
        let out = net::outputs(spec, w, prob.data.x.view())?;
        Ok(total_loss(cfg.loss, out.view(), prob.data.y.view()))
    };
    let first = Weights::from_flat(spec, traj.states[0].clone())?;
    let initial_loss = loss_at(&first)?;
    let mut series = Vec::with_capacity(traj.len());
    for (&t, state) in traj.times.iter().zip(&traj.states) {
        let w = Weights::from_flat(spec, state.clone())?;
        let norm = w.norm();
        series.push(EarlySample {
            iteration: t,
            loss_ratio: loss_at(&w)? / initial_loss,
            norm,
            norm_ratio: norm / cfg.delta,
            alignment: ncf::alignment_at(&prob, &w)?,
        });
    }
    let last = series.last().expect("trajectory has an initial state");
    let final_w = traj.final_weights(spec)?;
    let final_loss = loss_at(&final_w)?;
    let layers = final_w.layers();
    let hidden = &layers[..layers.len() - 1];
    let norm = final_w.norm();
    let hidden_kappa = metrics::kappa(&hidden.iter().map(|l| l.view()).collect::<Vec<_>>()).ok();
    let hidden_top2: Vec<Option<(f64, f64)>> = hidden
        .iter()
        .map(|l| {
            if l.nrows().min(l.ncols()) < 2 || norm == 0.0 {
                return None;
            }
            metrics::top2_singular((l / norm).view()).ok()
        })
        .collect();

    let mut checks = vec![Check::new(
        "max_norm_ratio_finite",
        series.iter().map(|s| s.norm_ratio).reduce(f64::max),
        Bound::Finite,
    )];
    let th = &cfg.thresholds;
    if let Some(b) = th.min_alignment {
        checks.push(Check::new("final_alignment", last.alignment, Bound::AtLeast(b)));
    }
    if let Some([lo, hi]) = th.loss_ratio {
        checks.push(Check::new("loss_ratio", Some(final_loss / initial_loss), Bound::Between(lo, hi)));
    }
    if let Some(b) = th.max_kappa {
        checks.push(Check::new("hidden_kappa", hidden_kappa, Bound::AtMost(b)));
    }
    if let Some(b) = th.min_singular_ratio {
        for (l, top) in hidden_top2.iter().enumerate() {
            let ratio = top.map(|(s1, s2)| if s2 > 0.0 { s1 / s2 } else { f64::MAX });
            checks.push(Check::new(&format!("singular_ratio_layer{}", l + 1), ratio, Bound::AtLeast(b)));
        }
    }
    if diverged {
        checks.push(Check::new("finite_iterates", None, Bound::Finite));
    }
    let passed = all_passed(&checks);
    let inside = |s: &EarlySample| {
        th.min_alignment.is_none_or(|b| s.alignment.is_some_and(|a| a >= b))
            && th.loss_ratio.is_none_or(|[lo, hi]| s.loss_ratio >= lo && s.loss_ratio <= hi)
    };
    let threshold_window = series.iter().position(inside).map(|start| {
        let span = series[start..].iter().take_while(|s| inside(s)).count();
        [series[start].iteration, series[start + span - 1].iteration]
    });
    let report = EarlyPhaseReport {
        seed,
        iterations: traj.final_time() as usize,
        diverged,
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        final_alignment: last.alignment,
        max_norm_ratio: series.iter().map(|s| s.norm_ratio).fold(0.0, f64::max),
        final_norm_ratio: last.norm_ratio,
        threshold_window,
        hidden_kappa,
        hidden_top2,
        checks,
        passed,
    };
    let mut heatmap = Vec::new();
    heat_cells("initial", &first, &mut heatmap);
    heat_cells("final", &final_w, &mut heatmap);
    let run = EarlyPhaseRun {
        report,
        series,
        heatmap,
    };
    if cfg.out_dir.is_some() {
        let mut csv = String::from("iteration,loss_ratio,norm,norm_ratio,alignment\n");
        for s in &run.series {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                s.iteration,
                s.loss_ratio,
                s.norm,
                s.norm_ratio,
                opt_cell(s.alignment)
            );
        }
        let mut heat = String::from("stage,layer,row,col,value\n");
        for (stage, l, r, c, v) in &run.heatmap {
            let _ = writeln!(heat, "{stage},{l},{r},{c},{v}");
        }
        write_outputs(cfg, &run.report, &csv, Some(&heat))?;
    }
    Ok(run)
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub converged: bool,
    /// Projected-ascent iterations, mini-batch steps included.
    pub iterations: usize,
    pub kink_iterations: usize,
    /// Alignment used by the stopping rule: the plain gradient alignment for
    /// smooth runs, the certified kink alignment after kink ascent.
    pub alignment: f64,
    pub residual: f64,
    /// `ŵᵀ∇N(ŵ)/‖∇N(ŵ)‖` with the default kink selection.
    pub selection_alignment: f64,
    pub ncf_value: f64,
    pub kappa: f64,
    pub rho: Option<f64>,
    pub kinks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub depth: usize,
    pub p: u32,
    pub alpha: f64,
    pub records: Vec<SeedRecord>,
    pub converged: usize,
    pub excluded: Vec<u64>,
    /// Maxima over converged seeds.
    pub max_kappa: Option<f64>,
    pub max_rho: Option<f64>,
    pub max_residual: Option<f64>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// `a_1` and `a_l b_lᵀ` (`l ≥ 2`) from the balanced rank-one approximations of
/// the hidden layers, with the sign of `a_1` fixed by its largest entry.
pub fn canonical_factors(w: &Weights) -> Result<Vec<Array2<f64>>> {
    let layers = w.layers();
    layers[..layers.len() - 1]
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let f = metrics::factor_rank_one(layer.view())?;
            Ok(if l == 0 { f.a.insert_axis(Axis(1)) } else { f.outer() })
        })
        .collect()
}

fn sweep_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRecord> {
    let prob = problem_for(cfg, seed)?;
    let spec = &cfg.spec;
    let opt = &cfg.optimizer;
    let w0 = initial_direction(cfg.init_scheme(), &prob, seed)?;
    let kinked = spec.activation().is_nonsmooth();
    let minibatch = if spec.p == 1 {
        opt.minibatch.map(|mb| MiniBatch {
            size: mb.size,
            iters: mb.iters,
            seed: seed ^ MINIBATCH_SALT,
        })
    } else {
        None
    };
    let warm = minibatch.map_or(0, |mb| mb.iters);
    let pga = flow::projected_gradient_ascent(
        &prob,
        &w0,
        &PgaConfig {
            step: opt.step,
            max_iters: if kinked { warm + opt.kink_after } else { opt.iters },
            stride: usize::MAX,
            stop_alignment: Some(opt.stop_alignment),
            minibatch,
        },
    )?;
    let mut w = pga.trajectory.final_weights(spec)?;
    let (converged, alignment, residual, kink_iterations, kinks) = if pga.converged || !kinked {
        let r = ncf::kkt_report(&prob, &w)?;
        (pga.converged, r.alignment, r.residual, 0, 0)
    } else {
        let run = ascend_on_kinks(&prob, &w, &opt.kink)?;
        w = run.weights;
        (run.converged, run.alignment, run.residual, run.iterations, run.kinks.len())
    };
    let selection = ncf::kkt_report(&prob, &w)?;
    let layers = w.layers();
    let hidden: Vec<_> = layers[..layers.len() - 1].iter().map(|l| l.view()).collect();
    let kappa = metrics::kappa(&hidden)?;
    let rho = if spec.alpha == 1.0 {
        None
    } else {
        let factors = canonical_factors(&w)?;
        Some(metrics::rho(&factors.iter().map(|f| f.view()).collect::<Vec<_>>())?)
    };
    Ok(SeedRecord {
        seed,
        converged,
        iterations: pga.iterations,
        kink_iterations,
        alignment,
        residual,
        selection_alignment: selection.alignment,
        ncf_value: selection.ncf_value,
        kappa,
        rho,
        kinks,
    })
}

fn max_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Projected ascent on the sphere-constrained correlation for every seed,
/// with the rank-one and non-negativity measures of each converged point.
pub fn run_table_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::TableKappaRho {
        return Err(Error::Precondition(format!("expected a sweep config, got {:?}", cfg.kind)));
    }
    let mut records = cfg
        .seeds
        .par_iter()
        .map(|&seed| sweep_seed(cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.seed);
    let excluded: Vec<u64> = records.iter().filter(|r| !r.converged).map(|r| r.seed).collect();
    if !excluded.is_empty() {
        warn!(
            "{} of {} seeds did not reach the stopping rule and are excluded: {:?}",
            excluded.len(),
            records.len(),
            excluded
        );
    }
    let good = || records.iter().filter(|r| r.converged);
    let max_kappa = max_of(good().map(|r| r.kappa));
    let max_rho = max_of(good().filter_map(|r| r.rho));
    let max_residual = max_of(good().map(|r| r.residual));
    let mut checks = Vec::new();
    if let Some(b) = cfg.thresholds.max_kappa {
        checks.push(Check::new("max_kappa", max_kappa, Bound::AtMost(b)));
    }
    if let Some(b) = cfg.thresholds.max_rho {
        checks.push(Check::new("max_rho", max_rho, Bound::AtMost(b)));
    }
    let passed = all_passed(&checks);
    let result = SweepResult {
        depth: cfg.spec.depth(),
        p: cfg.spec.p,
        alpha: cfg.spec.alpha,
        converged: records.len() - excluded.len(),
        records,
        excluded,
        max_kappa,
        max_rho,
        max_residual,
        checks,
        passed,
    };
    info!(
        "sweep L={} p={} α={}: {} converged, max κ {:?}, max ρ {:?}",
        result.depth, result.p, result.alpha, result.converged, result.max_kappa, result.max_rho
    );
    if cfg.out_dir.is_some() {
        let mut csv = String::from(
            "seed,converged,iterations,kink_iterations,alignment,residual,selection_alignment,ncf_value,kappa,rho,kinks\n",
        );
        for r in &result.records {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.converged,
                r.iterations,
                r.kink_iterations,
                r.alignment,
                r.residual,
                r.selection_alignment,
                r.ncf_value,
                r.kappa,
                opt_cell(r.rho),
                r.kinks
            );
        }
        write_outputs(cfg, &result, &csv, None)?;
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// projected versus adaptive-step ascent

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdVsPgaReport {
    pub steps: usize,
    /// `(seed, deviation)` pairs.
    pub deviations: Vec<(u64, f64)>,
    pub max_deviation: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Largest relative deviation from `v(T) = (Π c_t)·u(T)` over all seeds.
pub fn run_gd_vs_pga(cfg: &ExperimentConfig) -> Result<GdVsPgaReport> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::GdVsPga {
        return Err(Error::Precondition(format!("expected a gd-vs-pga config, got {:?}", cfg.kind)));
    }
    let steps = cfg.optimizer.iters;
    let mut deviations = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let prob = problem_for(cfg, seed)?;
            let u0 = initial_direction(cfg.init_scheme(), &prob, seed)?;
            let step = cfg.optimizer.step;
            let pga = flow::projected_gradient_ascent(&prob, &u0, &PgaConfig::fixed(step, steps))?;
            let adaptive = flow::adaptive_gradient_ascent(&prob, &u0, step, &pga.scale_factors)?;
            Ok((seed, flow::projection_identity_deviation(&pga, &adaptive)))
        })
        .collect::<Result<Vec<_>>>()?;
    deviations.sort_by_key(|d| d.0);
    let max_deviation = deviations
        .iter()
        .map(|d| if d.1.is_finite() { d.1 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let mut checks = Vec::new();
    if let Some(b) = cfg.thresholds.max_deviation {
        checks.push(Check::new("max_deviation", Some(max_deviation), Bound::AtMost(b)));
    }
    let passed = all_passed(&checks);
    let report = GdVsPgaReport {
        steps,
        deviations,
        max_deviation,
        checks,
        passed,
    };
    if cfg.out_dir.is_some() {
        let mut csv = String::from("seed,deviation\n");
        for (seed, dev) in &report.deviations {
            let _ = writeln!(csv, "{seed},{dev}");
        }
        write_outputs(cfg, &report, &csv, None)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// blow-up

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlowupSummary {
    pub order: u64,
    pub terminated_by: Termination,
    pub report: Option<BlowupReport>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn flow_config(opt: &OptimizerConfig, horizon: f64) -> IntegratorConfig {
    IntegratorConfig::new(opt.step, horizon).with_stride(opt.stride)
}

/// Ascent flow from the configured initial direction, integrated to escape,
/// and the power-law fit of its norm.
pub fn run_blowup(cfg: &ExperimentConfig) -> Result<BlowupSummary> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::BlowupRate {
        return Err(Error::Precondition(format!("expected a blow-up config, got {:?}", cfg.kind)));
    }
    let seed = cfg.seeds[0];
    let prob = problem_for(cfg, seed)?;
    let u0 = initial_direction(cfg.init_scheme(), &prob, seed)?;
    let horizon = cfg.optimizer.horizon.expect("validated");
    let traj = flow::integrate_ncf_flow(
        &cfg.spec,
        &u0,
        prob.z.view(),
        &prob.data,
        &flow_config(&cfg.optimizer, horizon).with_shrink(true),
    )?;
    let order = cfg.spec.homogeneity_order();
    let report = flow::fit_blowup_rate(&traj, order).ok();
    let mut checks = Vec::new();
    let expected = 1.0 / (order as f64 - 2.0);
    if let Some(tol) = cfg.thresholds.exponent_tolerance {
        checks.push(Check::new(
            "fitted_exponent",
            report.map(|r| r.fitted_exponent),
            Bound::Between(expected - tol, expected + tol),
        ));
    }
    if let Some(b) = cfg.thresholds.min_r_squared {
        checks.push(Check::new("r_squared", report.map(|r| r.r_squared), Bound::AtLeast(b)));
    }
    let passed = all_passed(&checks);
    let summary = BlowupSummary {
        order,
        terminated_by: traj.terminated_by,
        report,
        checks,
        passed,
    };
    if cfg.out_dir.is_some() {
        write_outputs(cfg, &summary, &norm_series(&traj), None)?;
    }
    Ok(summary)
}

fn norm_series(traj: &Trajectory) -> String {
    let mut csv = String::from("t,norm\n");
    for (t, n) in traj.times.iter().zip(traj.norms()) {
        let _ = writeln!(csv, "{t},{n}");
    }
    csv
}

// ---------------------------------------------------------------------------
// rescaled training flow versus correlation flow

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGap {
    pub delta: f64,
    /// `sup_{t ≤ T} ‖s(t) − u(t)‖`
    pub sup_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleGapReport {
    pub horizon: f64,
    pub gaps: Vec<ScaleGap>,
    /// Gaps strictly decrease as the scale decreases.
    pub monotone: bool,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// For every δ, integrates the training flow from `δ·w0` up to `T/δ^{M−2}`,
/// maps it to `s(t) = w(t/δ^{M−2})/δ`, and compares with the correlation flow
/// `u̇ = ∇N(u)`, `u(0) = w0`, on the same time grid.
pub fn run_rescale_gap(cfg: &ExperimentConfig) -> Result<RescaleGapReport> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::RescaleGap {
        return Err(Error::Precondition(format!("expected a rescale-gap config, got {:?}", cfg.kind)));
    }
    let seed = cfg.seeds[0];
    let prob = problem_for(cfg, seed)?;
    let spec = &cfg.spec;
    let w0 = initial_direction(cfg.init_scheme(), &prob, seed)?;
    let opt = &cfg.optimizer;
    let horizon = opt.horizon.expect("validated");
    let order = spec.homogeneity_order();
    let u = flow::integrate_ncf_flow(spec, &w0, prob.z.view(), &prob.data, &flow_config(opt, horizon))?;

    let mut series = String::from("delta,t,gap\n");
    let mut gaps = Vec::new();
    for &delta in &cfg.deltas {
        let scale = delta.powi(order as i32 - 2);
        let stretched = IntegratorConfig {
            step: opt.step / scale,
            ..flow_config(opt, horizon / scale)
        };
        let w = flow::integrate_training_flow(spec, &w0, delta, &prob.data, cfg.loss, &stretched)?;
        let s = flow::rescale_trajectory(&w, delta, order)?;
        let mut sup: f64 = 0.0;
        for ((t, a), b) in s.times.iter().zip(&s.states).zip(&u.states) {
            let gap = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            sup = sup.max(gap);
            let _ = writeln!(series, "{delta},{t},{gap}");
        }
        gaps.push(ScaleGap { delta, sup_gap: sup });
    }
    let mut by_scale = gaps.clone();
    by_scale.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let monotone = by_scale.windows(2).all(|w| w[1].sup_gap < w[0].sup_gap);
    let checks = vec![Check::new(
        "gap_decreases_with_scale",
        Some(if monotone { 1.0 } else { 0.0 }),
        Bound::AtLeast(1.0),
    )];
    let passed = all_passed(&checks);
    let report = RescaleGapReport {
        horizon,
        gaps,
        monotone,
        checks,
        passed,
    };
    if cfg.out_dir.is_some() {
        write_outputs(cfg, &report, &series, None)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// constructed KKT points

/// Settings for a constructed rank-one point on sampled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktRecipe {
    pub depth: usize,
    pub p: u32,
    pub alpha: f64,
    #[serde(default = "default_kkt_width")]
    pub width: usize,
    #[serde(default = "default_kkt_n")]
    pub n: usize,
    #[serde(default = "default_kkt_d")]
    pub d: usize,
    pub seed: u64,
}

fn default_kkt_width() -> usize {
    10
}

fn default_kkt_n() -> usize {
    100
}

fn default_kkt_d() -> usize {
    10
}

/// Everything needed to re-check a point without the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktBundle {
    pub spec: NetSpec,
    pub data: Dataset,
    pub weights: Weights,
    #[serde(default)]
    pub kkt: Option<RankOneKkt>,
}

impl KktBundle {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn problem(&self) -> Result<NcfProblem> {
        NcfProblem::from_targets(self.spec.clone(), self.data.clone())
    }
}

/// Gaussian inputs and labels. Labels are made non-negative for kinked
/// `p = 1` activations, where mixed signs rarely admit a rank-one point.
pub fn kkt_dataset(recipe: &KktRecipe) -> Result<Dataset> {
    let mut data = sample_dataset(
        &DatasetRecipe {
            n: recipe.n,
            d: recipe.d,
            inputs: InputDistribution::Gaussian,
            labels: LabelSource::Gaussian,
        },
        recipe.seed,
    )?;
    if recipe.p == 1 && recipe.alpha != 1.0 {
        data.y.mapv_inplace(f64::abs);
    }
    Ok(data)
}

#[derive(Debug, Clone, Serialize)]
pub struct KktOutcome {
    pub recipe: KktRecipe,
    pub residual: f64,
    pub balance: f64,
    pub verdict: Verdict,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn construct_kkt(recipe: &KktRecipe) -> Result<(KktBundle, KktOutcome)> {
    if recipe.depth < 2 {
        return Err(Error::Precondition(format!("need at least two layers, got {}", recipe.depth)));
    }
    let spec = NetSpec::with_hidden(recipe.d, &vec![recipe.width; recipe.depth - 1], recipe.alpha, recipe.p)?;
    let data = kkt_dataset(recipe)?;
    let prob = NcfProblem::from_targets(spec.clone(), data.clone())?;
    let built = kkt::construct_and_verify(&prob, recipe.seed, None)?;
    let weights = kkt::assemble_weights(&built.kkt);
    let bundle = KktBundle {
        spec,
        data,
        weights,
        kkt: Some(built.kkt),
    };
    let outcome = verify_bundle(&bundle, recipe.clone())?;
    Ok((bundle, outcome))
}

/// Re-verifies a bundle: the itemized conditions when it carries its
/// factors, and the full residual and balance in any case.
pub fn verify_bundle(bundle: &KktBundle, recipe: KktRecipe) -> Result<KktOutcome> {
    let prob = bundle.problem()?;
    let report = ncf::kkt_report(&prob, &bundle.weights)?;
    let balance = kkt::max_balance_deviation(&bundle.weights, bundle.spec.alpha, bundle.spec.p);
    let verdict = match &bundle.kkt {
        Some(k) => kkt::verify_theorem_conditions(k, &prob)?,
        None => Verdict {
            checks: Vec::new(),
            passed: true,
        },
    };
    let checks = vec![
        Check::new("conditions", Some(verdict.failures().count() as f64), Bound::AtMost(0.0)),
        Check::new("kkt_residual", Some(report.residual), Bound::AtMost(kkt::tolerance::FULL_KKT)),
        Check::new("balance", Some(balance), Bound::AtMost(kkt::tolerance::BALANCE)),
    ];
    let passed = all_passed(&checks);
    Ok(KktOutcome {
        recipe,
        residual: report.residual,
        balance,
        verdict,
        checks,
        passed,
    })
}

// ---------------------------------------------------------------------------
// dispatch

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", content = "report", rename_all = "snake_case")]
pub enum ExperimentReport {
    EarlyPhase(EarlyPhaseReport),
    TableKappaRho(SweepResult),
    GdVsPga(GdVsPgaReport),
    BlowupRate(BlowupSummary),
    RescaleGap(RescaleGapReport),
}

impl ExperimentReport {
    pub fn checks(&self) -> &[Check] {
        match self {
            Self::EarlyPhase(r) => &r.checks,
            Self::TableKappaRho(r) => &r.checks,
            Self::GdVsPga(r) => &r.checks,
            Self::BlowupRate(r) => &r.checks,
            Self::RescaleGap(r) => &r.checks,
        }
    }

    pub fn passed(&self) -> bool {
        all_passed(self.checks())
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    Ok(match cfg.kind {
        ExperimentKind::EarlyPhase => ExperimentReport::EarlyPhase(run_early_phase(cfg)?.report),
        ExperimentKind::TableKappaRho => ExperimentReport::TableKappaRho(run_table_sweep(cfg)?),
        ExperimentKind::GdVsPga => ExperimentReport::GdVsPga(run_gd_vs_pga(cfg)?),
        ExperimentKind::BlowupRate => ExperimentReport::BlowupRate(run_blowup(cfg)?),
        ExperimentKind::RescaleGap => ExperimentReport::RescaleGap(run_rescale_gap(cfg)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recipe(inputs: InputDistribution) -> DatasetRecipe {
        DatasetRecipe {
            n: 100,
            d: 10,
            inputs,
            labels: LabelSource::Gaussian,
        }
    }

    #[test]
    fn unit_sphere_inputs() {
        let data = sample_dataset(&recipe(InputDistribution::UnitSphere), 3).unwrap();
        for col in data.x.axis_iter(Axis(1)) {
            assert!((col.dot(&col).sqrt() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = sample_dataset(&recipe(InputDistribution::Gaussian), 11).unwrap();
        let b = sample_dataset(&recipe(InputDistribution::Gaussian), 11).unwrap();
        let c = sample_dataset(&recipe(InputDistribution::Gaussian), 12).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn gaussian_mean_smoke() {
        let data = sample_dataset(&recipe(InputDistribution::Gaussian), 0).unwrap();
        // 1000 entries, so four standard errors is 4/√1000
        assert!(data.x.mean().unwrap().abs() <= 4.0 / 1000f64.sqrt());
    }

    #[test]
    fn teacher_labels_scale_and_abs() {
        let teacher = TeacherRecipe {
            hidden: vec![2, 2],
            alpha: 0.0,
            p: 1,
            abs_inner: true,
            scale: 10.0,
        };
        let data = sample_dataset(&recipe(InputDistribution::UnitSphere), 5).unwrap();
        let labels = make_teacher_labels(&teacher, 5, &data).unwrap();
        let (spec, w) = teacher_weights(&teacher, 10, 5).unwrap();
        let layers = w.layers();
        for i in 0..data.n() {
            let x = data.input(i);
            let h1 = layers[0].dot(&x).mapv(|v| v.max(0.0));
            let h2 = layers[1].mapv(f64::abs).dot(&h1).mapv(|v| v.max(0.0));
            let out = 10.0 * layers[2].row(0).dot(&h2);
            assert!((labels[i] - out).abs() <= 1e-12 * (1.0 + out.abs()));
        }
        assert_eq!(spec.shapes(), vec![(2, 10), (2, 2), (1, 2)]);
        let zeros = Weights::zeros(&spec);
        let zero_labels = teacher_outputs(&teacher, &spec, &zeros, &data).unwrap();
        assert!(zero_labels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn early_phase_teacher_shape() {
        let cfg = ExperimentConfig::early_phase(0);
        let LabelSource::Teacher(t) = &cfg.data.labels else {
            panic!("teacher labels expected")
        };
        let (spec, _) = teacher_weights(t, 10, 0).unwrap();
        assert_eq!(spec.shapes(), vec![(2, 10), (1, 2)]);
    }

    #[test]
    fn zero_delta_rejected() {
        let mut cfg = ExperimentConfig::early_phase(0);
        cfg.delta = 0.0;
        assert!(matches!(run_early_phase(&cfg), Err(Error::Precondition(_))));
        cfg.delta = 0.05;
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn check_bounds() {
        assert!(Check::new("a", Some(1.0), Bound::AtMost(1.0)).passed);
        assert!(!Check::new("a", Some(1.1), Bound::AtMost(1.0)).passed);
        assert!(Check::new("a", Some(0.995), Bound::Between(0.99, 1.01)).passed);
        assert!(!Check::new("a", None, Bound::Finite).passed);
        assert!(!Check::new("a", Some(f64::NAN), Bound::AtLeast(0.0)).passed);
    }

    #[test]
    fn positive_init_has_positive_value() {
        let cfg = ExperimentConfig::table_cell(2, 2, 0.0, vec![0]).unwrap();
        let prob = problem_for(&cfg, 4).unwrap();
        let w = initial_direction(InitScheme::PositiveUnit, &prob, 4).unwrap();
        assert!(prob.value(&w).unwrap() > 0.0);
        assert!((w.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::table_cell(3, 1, 0.1, vec![0, 1]).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }
}
