//! Configuration-driven experiment runner: methods x epsilons x splits,
//! with coverage/size statistics, optional per-point traces, and
//! machine-readable reports.
//!
//! Determinism contract: everything random derives from the master seed,
//! split results are collected in index order, and all aggregation runs
//! sequentially over ordered rows — so identical config plus seed yields
//! identical reports. Wall times are the one non-deterministic field; with
//! `timing: false` they are written as zero so the emitted artifacts are
//! byte-identical across reruns.

use crate::attacks::{fgsm, pgd, AttackConfig, AttackError, AttackObjective};
use crate::autodiff::AutodiffError;
use crate::conformal::{
    conformal_quantile, cqr_interval, score_class, score_cqr, vanilla_set_class, ConformalError,
    CriticalValue, Region,
};
use crate::data::{
    gen_gaussian_classes, gen_regression_dynamics, load_csv, make_splits, CsvTarget, DataError,
    Dataset, SplitPlan,
};
use crate::model_io::{load_model, ModelError};
use crate::parallel::par_map;
use crate::seeding::derive_seed;
use crate::tensor::{Network, TensorError};
use crate::trainer::{train_classifier, train_quantile_pair, ArchSpec, TrainConfig, TrainError};
use crate::verifier::{BoundMethod, LpNorm};
use crate::vrcp::{
    class_probability_bounds, containment_check, vrcp_c_calibrate_class, vrcp_c_calibrate_regress,
    vrcp_i_interval_regress, vrcp_i_set_class, ThreatModel, VrcpError,
};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

const SALT_DATASET: u64 = 1;
const SALT_SPLITS: u64 = 2;
const SALT_TRAIN: u64 = 3;
const SALT_ATTACK: u64 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("split {split}: {detail}")]
    SplitFailure { split: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vrcp(#[from] VrcpError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("report I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    VrcpI,
    VrcpC,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Vanilla => write!(f, "vanilla"),
            Method::VrcpI => write!(f, "vrcp_i"),
            Method::VrcpC => write!(f, "vrcp_c"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskName {
    Classification,
    Regression,
}

impl std::fmt::Display for TaskName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskName::Classification => write!(f, "classification"),
            TaskName::Regression => write!(f, "regression"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianClasses { classes: usize, dim: usize, n: usize, sep: f64 },
    Dynamics { n: usize, horizon: usize },
    Csv { path: String },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainParams {
    fn to_config(self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Train on each split's training block.
    Train { arch: ArchSpec, train: TrainParams },
    /// Load a fixed classifier model file.
    File { path: String },
    /// Load a fixed quantile-regressor pair.
    FilePair { lo: String, hi: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    None,
    Fgsm,
    Pgd {
        steps: usize,
        step_size: f64,
        #[serde(default = "default_true")]
        random_start: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub n_splits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskName,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub methods: Vec<Method>,
    pub verifier: BoundMethod,
    pub norm: LpNorm,
    pub epsilons: Vec<f64>,
    pub alpha: f64,
    pub attack: AttackSpec,
    pub splits: SplitSpec,
    pub seed: u64,
    #[serde(default)]
    pub trace: bool,
    #[serde(default = "default_true")]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes)
            .map_err(|e| HarnessError::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0,1)", self.alpha));
        }
        if self.methods.is_empty() {
            return bad("methods list is empty".into());
        }
        if self.epsilons.is_empty() {
            return bad("epsilon list is empty".into());
        }
        for &e in &self.epsilons {
            if !(e >= 0.0) || !e.is_finite() {
                return bad(format!("epsilon {e} must be finite and non-negative"));
            }
        }
        if self.splits.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        match (&self.attack, self.norm) {
            (AttackSpec::None, _) => {}
            (_, LpNorm::L1) => {
                return bad("l1 attacks are unsupported; use attack kind \"none\" for l1 experiments".into());
            }
            (AttackSpec::Fgsm, n) if n != LpNorm::LInf => {
                return bad("fgsm requires the linf norm".into());
            }
            (AttackSpec::Fgsm, _) => {}
            (AttackSpec::Pgd { steps, step_size, .. }, _) => {
                if *steps == 0 {
                    return bad("pgd steps must be at least 1".into());
                }
                if !(*step_size > 0.0) {
                    return bad(format!("pgd step size {step_size} must be positive"));
                }
            }
        }
        match (self.task, &self.dataset) {
            (TaskName::Classification, DatasetSpec::Dynamics { .. }) => {
                return bad("classification task cannot use the dynamics dataset".into());
            }
            (TaskName::Regression, DatasetSpec::GaussianClasses { .. }) => {
                return bad("regression task cannot use the gaussian class dataset".into());
            }
            _ => {}
        }
        match (self.task, &self.model) {
            (TaskName::Classification, ModelSpec::FilePair { .. }) => {
                return bad("classification expects a single classifier model".into());
            }
            (TaskName::Regression, ModelSpec::File { .. }) => {
                return bad("regression expects a quantile model pair".into());
            }
            (_, ModelSpec::Train { train, .. }) => {
                if train.batch_size == 0 {
                    return bad("train.batch_size must be positive".into());
                }
                if !(train.learning_rate > 0.0) {
                    return bad("train.learning_rate must be positive".into());
                }
                if !(0.0..1.0).contains(&train.momentum) {
                    return bad("train.momentum must lie in [0,1)".into());
                }
                if !(train.weight_decay >= 0.0) {
                    return bad("train.weight_decay must be non-negative".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One CSV row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub epsilon: f64,
    pub norm: LpNorm,
    pub split: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub epsilon: f64,
    pub norm: LpNorm,
    pub coverage_mean: f64,
    pub coverage_ci95: f64,
    pub size_mean: f64,
    pub size_ci95: f64,
    pub wall_ms_mean: f64,
    pub calib_ms_mean: f64,
    pub infer_ms_mean: f64,
}

/// One per-point trace entry: score, threshold, region, hit/miss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub method: Method,
    pub epsilon: f64,
    pub norm: LpNorm,
    pub split: usize,
    pub point: usize,
    pub task: TaskName,
    pub score: f64,
    pub qhat: f64,
    pub covered: bool,
    pub size: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeCountRow {
    pub method: Method,
    pub epsilon: f64,
    pub size: usize,
    pub count: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ContainmentSummary {
    pub checked: usize,
    pub violations: usize,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: TaskName,
    pub norm: LpNorm,
    pub alpha: f64,
    pub n_splits: usize,
    pub rows: Vec<ReportRow>,
    pub aggregate: Vec<AggregateRow>,
    pub containment: ContainmentSummary,
    /// Set-size distribution, classification only.
    pub size_counts: Option<Vec<SizeCountRow>>,
    pub trace: Option<Vec<TraceRow>>,
}

struct PointOutcome {
    score: f64,
    qhat: f64,
    covered: bool,
    size: f64,
    lo: Option<f64>,
    hi: Option<f64>,
}

struct MethodEpsOutcome {
    method: Method,
    eps_idx: usize,
    coverage: f64,
    avg_size: f64,
    calib_ms: f64,
    infer_ms: f64,
    points: Vec<PointOutcome>,
    /// Set-size counts indexed by size (classification).
    size_counts: Option<Vec<u64>>,
}

struct SplitOutcome {
    split: usize,
    results: Vec<MethodEpsOutcome>,
    containment_checked: usize,
    containment_violations: Vec<String>,
}

enum TaskModel {
    Classifier(Network),
    QuantilePair { lo: Network, hi: Network },
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let seed = derive_seed(&[cfg.seed, SALT_DATASET]);
    let ds = match &cfg.dataset {
        DatasetSpec::GaussianClasses { classes, dim, n, sep } => {
            gen_gaussian_classes(*classes, *dim, *n, *sep, seed)?
        }
        DatasetSpec::Dynamics { n, horizon } => gen_regression_dynamics(*n, *horizon, seed)?,
        DatasetSpec::Csv { path } => {
            let target = match cfg.task {
                TaskName::Classification => CsvTarget::Label,
                TaskName::Regression => CsvTarget::Real,
            };
            load_csv(path, target)?
        }
    };
    Ok(ds)
}

fn prepare_model(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    split: usize,
) -> Result<TaskModel, HarnessError> {
    let seed = derive_seed(&[cfg.seed, SALT_TRAIN, split as u64]);
    match (&cfg.model, cfg.task) {
        (ModelSpec::Train { arch, train }, TaskName::Classification) => {
            let (net, _) = train_classifier(train_ds, arch, &train.to_config(seed))?;
            Ok(TaskModel::Classifier(net))
        }
        (ModelSpec::Train { arch, train }, TaskName::Regression) => {
            let ((lo, hi), _) = train_quantile_pair(train_ds, arch, cfg.alpha, &train.to_config(seed))?;
            Ok(TaskModel::QuantilePair { lo, hi })
        }
        (ModelSpec::File { path }, TaskName::Classification) => {
            let bytes = std::fs::read(path)?;
            Ok(TaskModel::Classifier(load_model(&bytes)?))
        }
        (ModelSpec::FilePair { lo, hi }, TaskName::Regression) => {
            let lo = load_model(&std::fs::read(lo)?)?;
            let hi = load_model(&std::fs::read(hi)?)?;
            Ok(TaskModel::QuantilePair { lo, hi })
        }
        _ => Err(HarnessError::Config("model kind does not match task".into())),
    }
}

fn attack_test_points(
    cfg: &ExperimentConfig,
    model: &TaskModel,
    test_x: &[Vec<f64>],
    truth: &Truth,
    epsilon: f64,
    split: usize,
    eps_idx: usize,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    if epsilon == 0.0 || matches!(cfg.attack, AttackSpec::None) {
        return Ok(test_x.to_vec());
    }
    let indices: Vec<usize> = (0..test_x.len()).collect();
    let attacked: Vec<Result<Vec<f64>, AttackError>> = par_map(&indices, |&i| {
        let seed = derive_seed(&[cfg.seed, SALT_ATTACK, split as u64, eps_idx as u64, i as u64]);
        let objective = match (model, truth) {
            (TaskModel::Classifier(net), Truth::Labels(ys)) => {
                AttackObjective::ClassifierLoss { net, label: ys[i] }
            }
            (TaskModel::QuantilePair { lo, hi }, Truth::Reals(ys)) => {
                AttackObjective::CqrScore { net_lo: lo, net_hi: hi, target: ys[i] }
            }
            _ => unreachable!("model/task consistency is validated"),
        };
        match &cfg.attack {
            AttackSpec::Fgsm => {
                let attack_cfg = AttackConfig {
                    norm: cfg.norm,
                    epsilon,
                    steps: 1,
                    step_size: epsilon,
                    seed,
                    random_start: false,
                };
                fgsm(&objective, &test_x[i], &attack_cfg)
            }
            AttackSpec::Pgd { steps, step_size, random_start } => {
                let attack_cfg = AttackConfig {
                    norm: cfg.norm,
                    epsilon,
                    steps: *steps,
                    step_size: *step_size,
                    seed,
                    random_start: *random_start,
                };
                pgd(&objective, &test_x[i], &attack_cfg)
            }
            AttackSpec::None => unreachable!("handled above"),
        }
    });
    attacked
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(HarnessError::from)
}

enum Truth {
    Labels(Vec<usize>),
    Reals(Vec<f64>),
}

impl Truth {
    fn len(&self) -> usize {
        match self {
            Truth::Labels(v) => v.len(),
            Truth::Reals(v) => v.len(),
        }
    }

    fn covered_by(&self, i: usize, region: &Region) -> bool {
        match self {
            Truth::Labels(v) => region.covers_label(v[i]),
            Truth::Reals(v) => region.covers_value(v[i]),
        }
    }
}

fn qhat_as_f64(q: &CriticalValue) -> f64 {
    q.as_finite().unwrap_or(f64::INFINITY)
}

/// Regions plus timing for one (method, epsilon) cell.
struct MethodRegions {
    regions: Vec<Region>,
    qhat: f64,
    calib_ms: f64,
    infer_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn class_method_regions(
    method: Method,
    net: &Network,
    cal_x: &[Vec<f64>],
    cal_y: &[usize],
    attacked: &[Vec<f64>],
    threat: &ThreatModel,
    verifier: BoundMethod,
    alpha: f64,
) -> Result<MethodRegions, HarnessError> {
    let t0 = Instant::now();
    let q = match method {
        Method::Vanilla | Method::VrcpI => {
            let probs: Vec<Result<Vec<f64>, TensorError>> = par_map(cal_x, |x| net.forward(x));
            let mut scores = Vec::with_capacity(cal_x.len());
            for (p, &y) in probs.into_iter().zip(cal_y) {
                scores.push(score_class(&p?, y)?);
            }
            conformal_quantile(&scores, alpha)?
        }
        Method::VrcpC => {
            let pairs: Vec<(Vec<f64>, usize)> =
                cal_x.iter().cloned().zip(cal_y.iter().copied()).collect();
            vrcp_c_calibrate_class(net, &pairs, threat, verifier, alpha)?
        }
    };
    let calib_ms = ms_since(t0);

    let t1 = Instant::now();
    let results: Vec<Result<Region, HarnessError>> = par_map(attacked, |x| match method {
        Method::Vanilla | Method::VrcpC => {
            let probs = net.forward(x)?;
            Ok(Region::Labels(vanilla_set_class(&probs, &q)))
        }
        Method::VrcpI => Ok(Region::Labels(vrcp_i_set_class(net, x, threat, verifier, &q)?)),
    });
    let mut regions = Vec::with_capacity(attacked.len());
    for r in results {
        regions.push(r?);
    }
    let infer_ms = ms_since(t1);
    Ok(MethodRegions { regions, qhat: qhat_as_f64(&q), calib_ms, infer_ms })
}

fn regress_method_regions(
    method: Method,
    lo: &Network,
    hi: &Network,
    cal_x: &[Vec<f64>],
    cal_y: &[f64],
    attacked: &[Vec<f64>],
    threat: &ThreatModel,
    verifier: BoundMethod,
    alpha: f64,
) -> Result<MethodRegions, HarnessError> {
    let t0 = Instant::now();
    let q = match method {
        Method::Vanilla | Method::VrcpI => {
            let preds: Vec<Result<(f64, f64), HarnessError>> = par_map(cal_x, |x| {
                Ok((lo.forward(x)?[0], hi.forward(x)?[0]))
            });
            let mut scores = Vec::with_capacity(cal_x.len());
            for (pred, &y) in preds.into_iter().zip(cal_y) {
                let (p_lo, p_hi) = pred?;
                scores.push(score_cqr(p_lo, p_hi, y));
            }
            conformal_quantile(&scores, alpha)?
        }
        Method::VrcpC => {
            let pairs: Vec<(Vec<f64>, f64)> =
                cal_x.iter().cloned().zip(cal_y.iter().copied()).collect();
            vrcp_c_calibrate_regress(lo, hi, &pairs, threat, verifier, alpha)?
        }
    };
    let calib_ms = ms_since(t0);

    let t1 = Instant::now();
    let results: Vec<Result<Region, HarnessError>> = par_map(attacked, |x| match method {
        Method::Vanilla | Method::VrcpC => {
            let p_lo = lo.forward(x)?[0];
            let p_hi = hi.forward(x)?[0];
            Ok(Region::Interval(cqr_interval(p_lo, p_hi, &q)))
        }
        Method::VrcpI => Ok(Region::Interval(vrcp_i_interval_regress(
            lo, hi, x, threat, verifier, &q,
        )?)),
    });
    let mut regions = Vec::with_capacity(attacked.len());
    for r in results {
        regions.push(r?);
    }
    let infer_ms = ms_since(t1);
    Ok(MethodRegions { regions, qhat: qhat_as_f64(&q), calib_ms, infer_ms })
}

/// True-target score per attacked test point under a method's scoring rule,
/// recorded in the trace for auditability.
fn trace_scores(
    method: Method,
    model: &TaskModel,
    attacked: &[Vec<f64>],
    truth: &Truth,
    threat: &ThreatModel,
    verifier: BoundMethod,
) -> Result<Vec<f64>, HarnessError> {
    let out: Vec<Result<f64, HarnessError>> = match (model, truth) {
        (TaskModel::Classifier(net), Truth::Labels(ys)) => {
            let idx: Vec<usize> = (0..attacked.len()).collect();
            par_map(&idx, |&i| match method {
                Method::Vanilla | Method::VrcpC => {
                    let probs = net.forward(&attacked[i])?;
                    Ok(score_class(&probs, ys[i])?)
                }
                Method::VrcpI => {
                    let ball = threat.ball_at(&attacked[i]).map_err(VrcpError::from)?;
                    let (_, p_hi) = class_probability_bounds(net, &ball, verifier)?;
                    Ok(1.0 - p_hi[ys[i]])
                }
            })
        }
        (TaskModel::QuantilePair { lo, hi }, Truth::Reals(ys)) => {
            let idx: Vec<usize> = (0..attacked.len()).collect();
            par_map(&idx, |&i| match method {
                Method::Vanilla | Method::VrcpC => {
                    let p_lo = lo.forward(&attacked[i])?[0];
                    let p_hi = hi.forward(&attacked[i])?[0];
                    Ok(score_cqr(p_lo, p_hi, ys[i]))
                }
                Method::VrcpI => {
                    let ball = threat.ball_at(&attacked[i]).map_err(VrcpError::from)?;
                    let b_lo = crate::verifier::bounds(lo, &ball, verifier).map_err(VrcpError::from)?;
                    let b_hi = crate::verifier::bounds(hi, &ball, verifier).map_err(VrcpError::from)?;
                    Ok(score_cqr(b_lo.lower[0], b_hi.upper[0], ys[i]))
                }
            })
        }
        _ => unreachable!("model/task consistency is validated"),
    };
    out.into_iter().collect()
}

fn run_split(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    split_indices: &crate::data::SplitIndices,
    split: usize,
) -> Result<SplitOutcome, HarnessError> {
    let train_ds = dataset.select(&split_indices.train);
    let cal_ds = dataset.select(&split_indices.cal);
    let test_ds = dataset.select(&split_indices.test);

    let model = prepare_model(cfg, &train_ds, split)?;

    let (cal_x, cal_truth) = match cfg.task {
        TaskName::Classification => {
            let (x, y, _) = cal_ds.labels()?;
            (x.to_vec(), Truth::Labels(y.to_vec()))
        }
        TaskName::Regression => {
            let (x, y) = cal_ds.reals()?;
            (x.to_vec(), Truth::Reals(y.to_vec()))
        }
    };
    let (test_x, test_truth) = match cfg.task {
        TaskName::Classification => {
            let (x, y, _) = test_ds.labels()?;
            (x.to_vec(), Truth::Labels(y.to_vec()))
        }
        TaskName::Regression => {
            let (x, y) = test_ds.reals()?;
            (x.to_vec(), Truth::Reals(y.to_vec()))
        }
    };

    let n_classes = match (&model, cfg.task) {
        (TaskModel::Classifier(net), _) => Some(net.output_dim()),
        _ => None,
    };

    let mut results = Vec::new();
    let mut containment_checked = 0;
    let mut containment_violations = Vec::new();

    for (eps_idx, &epsilon) in cfg.epsilons.iter().enumerate() {
        let threat = ThreatModel { norm: cfg.norm, epsilon };
        let attacked =
            attack_test_points(cfg, &model, &test_x, &test_truth, epsilon, split, eps_idx)?;

        // Vanilla regions are always built: they anchor the containment
        // check even when the vanilla method itself was not requested.
        let vanilla = build_regions(
            Method::Vanilla,
            cfg,
            &model,
            &cal_x,
            &cal_truth,
            &attacked,
            &threat,
        )?;

        for &method in &cfg.methods {
            let outcome = if method == Method::Vanilla {
                assemble_outcome(cfg, method, eps_idx, &model, &vanilla, &attacked, &test_truth, &threat, n_classes)?
            } else {
                let mr = build_regions(method, cfg, &model, &cal_x, &cal_truth, &attacked, &threat)?;
                let report = containment_check(&vanilla.regions, &mr.regions)
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
                containment_checked += report.checked;
                for v in &report.violations {
                    containment_violations.push(format!(
                        "split {split} eps {epsilon} method {method} point {}: vanilla {:?} not within robust {:?}",
                        v.index, v.vanilla, v.robust
                    ));
                }
                assemble_outcome(cfg, method, eps_idx, &model, &mr, &attacked, &test_truth, &threat, n_classes)?
            };
            results.push(outcome);
        }
    }

    Ok(SplitOutcome { split, results, containment_checked, containment_violations })
}

fn build_regions(
    method: Method,
    cfg: &ExperimentConfig,
    model: &TaskModel,
    cal_x: &[Vec<f64>],
    cal_truth: &Truth,
    attacked: &[Vec<f64>],
    threat: &ThreatModel,
) -> Result<MethodRegions, HarnessError> {
    match (model, cal_truth) {
        (TaskModel::Classifier(net), Truth::Labels(cal_y)) => class_method_regions(
            method,
            net,
            cal_x,
            cal_y,
            attacked,
            threat,
            cfg.verifier,
            cfg.alpha,
        ),
        (TaskModel::QuantilePair { lo, hi }, Truth::Reals(cal_y)) => regress_method_regions(
            method,
            lo,
            hi,
            cal_x,
            cal_y,
            attacked,
            threat,
            cfg.verifier,
            cfg.alpha,
        ),
        _ => unreachable!("model/task consistency is validated"),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble_outcome(
    cfg: &ExperimentConfig,
    method: Method,
    eps_idx: usize,
    model: &TaskModel,
    mr: &MethodRegions,
    attacked: &[Vec<f64>],
    test_truth: &Truth,
    threat: &ThreatModel,
    n_classes: Option<usize>,
) -> Result<MethodEpsOutcome, HarnessError> {
    let n = test_truth.len();
    let scores = if cfg.trace {
        trace_scores(method, model, attacked, test_truth, threat, cfg.verifier)?
    } else {
        vec![f64::NAN; n]
    };

    let mut covered_count = 0usize;
    let mut size_sum = 0.0;
    let mut points = Vec::with_capacity(n);
    let mut size_counts = n_classes.map(|k| vec![0u64; k + 1]);
    for i in 0..n {
        let region = &mr.regions[i];
        let covered = test_truth.covered_by(i, region);
        let size = region.size();
        covered_count += usize::from(covered);
        size_sum += size;
        if let (Some(counts), Region::Labels(set)) = (size_counts.as_mut(), region) {
            counts[set.size()] += 1;
        }
        let (lo, hi) = match region {
            Region::Interval(iv) => (Some(iv.lo), Some(iv.hi)),
            Region::Labels(_) => (None, None),
        };
        points.push(PointOutcome { score: scores[i], qhat: mr.qhat, covered, size, lo, hi });
    }

    Ok(MethodEpsOutcome {
        method,
        eps_idx,
        coverage: covered_count as f64 / n as f64,
        avg_size: size_sum / n as f64,
        calib_ms: mr.calib_ms,
        infer_ms: mr.infer_ms,
        points,
        size_counts,
    })
}

/// Run the full protocol: every split, method, and epsilon.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let dataset = build_dataset(cfg)?;
    let plan = SplitPlan {
        n_train: cfg.splits.n_train,
        n_cal: cfg.splits.n_cal,
        n_test: cfg.splits.n_test,
        n_splits: cfg.splits.n_splits,
        seed: derive_seed(&[cfg.seed, SALT_SPLITS]),
    };
    let splits = make_splits(dataset.len(), &plan)?;

    let split_ids: Vec<usize> = (0..splits.len()).collect();
    let outcomes: Vec<Result<SplitOutcome, HarnessError>> =
        par_map(&split_ids, |&s| run_split(cfg, &dataset, &splits[s], s));
    let mut split_outcomes = Vec::with_capacity(outcomes.len());
    for (s, o) in outcomes.into_iter().enumerate() {
        split_outcomes
            .push(o.map_err(|e| HarnessError::SplitFailure { split: s, detail: e.to_string() })?);
    }

    // Assemble rows method-major, then epsilon, then split: stable order.
    let mut rows = Vec::new();
    let mut aggregate = Vec::new();
    let mut trace_rows = if cfg.trace { Some(Vec::new()) } else { None };
    let mut size_counts_acc: Option<Vec<SizeCountRow>> =
        matches!(cfg.task, TaskName::Classification).then(Vec::new);

    for &method in &cfg.methods {
        for (eps_idx, &epsilon) in cfg.epsilons.iter().enumerate() {
            let mut coverages = Vec::with_capacity(split_outcomes.len());
            let mut sizes = Vec::with_capacity(split_outcomes.len());
            let mut walls = Vec::with_capacity(split_outcomes.len());
            let mut calibs = Vec::with_capacity(split_outcomes.len());
            let mut infers = Vec::with_capacity(split_outcomes.len());
            let mut counts_for_cell: Option<Vec<u64>> = None;

            for so in &split_outcomes {
                let cell = so
                    .results
                    .iter()
                    .find(|r| r.method == method && r.eps_idx == eps_idx)
                    .expect("every split computes every (method, eps) cell");
                let wall = if cfg.timing { cell.calib_ms + cell.infer_ms } else { 0.0 };
                rows.push(ReportRow {
                    method,
                    epsilon,
                    norm: cfg.norm,
                    split: so.split,
                    coverage: cell.coverage,
                    avg_size: cell.avg_size,
                    wall_ms: wall,
                });
                coverages.push(cell.coverage);
                sizes.push(cell.avg_size);
                walls.push(wall);
                calibs.push(if cfg.timing { cell.calib_ms } else { 0.0 });
                infers.push(if cfg.timing { cell.infer_ms } else { 0.0 });
                if let Some(counts) = &cell.size_counts {
                    let acc = counts_for_cell.get_or_insert_with(|| vec![0u64; counts.len()]);
                    for (a, &c) in acc.iter_mut().zip(counts) {
                        *a += c;
                    }
                }
                if let Some(tr) = trace_rows.as_mut() {
                    for (i, p) in cell.points.iter().enumerate() {
                        tr.push(TraceRow {
                            method,
                            epsilon,
                            norm: cfg.norm,
                            split: so.split,
                            point: i,
                            task: cfg.task,
                            score: p.score,
                            qhat: p.qhat,
                            covered: p.covered,
                            size: p.size,
                            lo: p.lo,
                            hi: p.hi,
                        });
                    }
                }
            }

            let (cov_mean, cov_ci) = mean_ci95(&coverages);
            let (size_mean, size_ci) = mean_ci95(&sizes);
            aggregate.push(AggregateRow {
                method,
                epsilon,
                norm: cfg.norm,
                coverage_mean: cov_mean,
                coverage_ci95: cov_ci,
                size_mean,
                size_ci95: size_ci,
                wall_ms_mean: mean(&walls),
                calib_ms_mean: mean(&calibs),
                infer_ms_mean: mean(&infers),
            });
            if let (Some(all), Some(counts)) = (size_counts_acc.as_mut(), counts_for_cell) {
                for (size, &count) in counts.iter().enumerate() {
                    all.push(SizeCountRow { method, epsilon, size, count });
                }
            }
        }
    }

    let mut containment = ContainmentSummary::default();
    for so in &split_outcomes {
        containment.checked += so.containment_checked;
        containment.violations += so.containment_violations.len();
        for v in so.containment_violations.iter().take(5) {
            if containment.examples.len() < 5 {
                containment.examples.push(v.clone());
            }
        }
    }

    Ok(ExperimentReport {
        task: cfg.task,
        norm: cfg.norm,
        alpha: cfg.alpha,
        n_splits: cfg.splits.n_splits,
        rows,
        aggregate,
        containment,
        size_counts: size_counts_acc,
        trace: trace_rows,
    })
}

/// Run inside a rayon pool of the requested width. Without the `parallel`
/// feature the hint is ignored and execution is sequential.
#[cfg(feature = "parallel")]
pub fn run_experiment_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentReport, HarnessError> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?
            .install(|| run_experiment(cfg)),
        None => run_experiment(cfg),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn run_experiment_with_threads(
    cfg: &ExperimentConfig,
    _threads: Option<usize>,
) -> Result<ExperimentReport, HarnessError> {
    run_experiment(cfg)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean and 1.96 * sd / sqrt(n) half-width.
pub fn mean_ci95(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, 1.96 * var.sqrt() / (v.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Pinned CSV columns: `method,epsilon,norm,split,coverage,avg_size,wall_ms`.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat) -> Result<Vec<u8>, HarnessError> {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("method,epsilon,norm,split,coverage,avg_size,wall_ms\n");
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.method, r.epsilon, r.norm, r.split, r.coverage, r.avg_size, r.wall_ms
                ));
            }
            Ok(out.into_bytes())
        }
        ReportFormat::Json => {
            // Canonical form: sorted keys via the Value round-trip.
            let value = serde_json::to_value(report)?;
            let mut bytes = serde_json::to_string_pretty(&value)?.into_bytes();
            bytes.push(b'\n');
            Ok(bytes)
        }
    }
}

/// Per-point trace CSV; one row per (method, epsilon, split, point).
pub fn emit_trace(report: &ExperimentReport) -> Option<Vec<u8>> {
    let trace = report.trace.as_ref()?;
    let mut out = String::from("method,epsilon,norm,split,point,task,score,qhat,covered,size,lo,hi\n");
    for t in trace {
        let lo = t.lo.map(|v| v.to_string()).unwrap_or_default();
        let hi = t.hi.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t.method,
            t.epsilon,
            t.norm,
            t.split,
            t.point,
            t.task,
            t.score,
            t.qhat,
            u8::from(t.covered),
            t.size,
            lo,
            hi
        ));
    }
    Some(out.into_bytes())
}

/// Set-size distribution rows; configuration error on regression reports.
pub fn size_histogram(report: &ExperimentReport) -> Result<Vec<SizeCountRow>, HarnessError> {
    if report.task != TaskName::Classification {
        return Err(HarnessError::Config(
            "size histogram is only defined for classification".into(),
        ));
    }
    report
        .size_counts
        .clone()
        .ok_or_else(|| HarnessError::Config("report carries no size counts".into()))
}

pub fn emit_histogram(rows: &[SizeCountRow]) -> Vec<u8> {
    let mut out = String::from("method,epsilon,size,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.method, r.epsilon, r.size, r.count));
    }
    out.into_bytes()
}

/// Rebuild the histogram from an emitted trace CSV (the CLI path).
pub fn histogram_from_trace_csv(bytes: &[u8]) -> Result<Vec<SizeCountRow>, HarnessError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| HarnessError::Config("trace file is not UTF-8".into()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "method,epsilon,norm,split,point,task,score,qhat,covered,size,lo,hi" {
        return Err(HarnessError::Config(
            "not a per-point trace file (run with \"trace\": true)".into(),
        ));
    }
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<(String, String, usize), u64> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(HarnessError::Config(format!(
                "trace line {}: expected 12 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        if fields[5] != "classification" {
            return Err(HarnessError::Config(
                "size histogram is only defined for classification".into(),
            ));
        }
        let size: f64 = fields[9]
            .parse()
            .map_err(|_| HarnessError::Config(format!("trace line {}: bad size", lineno + 2)))?;
        *counts
            .entry((fields[0].to_string(), fields[1].to_string(), size as usize))
            .or_insert(0) += 1;
    }
    let mut rows = Vec::with_capacity(counts.len());
    for ((method, epsilon, size), count) in counts {
        let method = match method.as_str() {
            "vanilla" => Method::Vanilla,
            "vrcp_i" => Method::VrcpI,
            "vrcp_c" => Method::VrcpC,
            other => {
                return Err(HarnessError::Config(format!("unknown method {other} in trace")))
            }
        };
        let epsilon: f64 = epsilon
            .parse()
            .map_err(|_| HarnessError::Config("bad epsilon in trace".into()))?;
        rows.push(SizeCountRow { method, epsilon, size, count });
    }
    Ok(rows)
}
