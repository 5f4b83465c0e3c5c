//! Synthetic datasets, CSV ingestion, and split management.
//!
//! Generators are pure functions of their seed. Features are min-max
//! normalized to [0,1] (constants kept with the dataset) so perturbation
//! radii mean the same thing across datasets.

use crate::seeding::derive_seed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::io::Read;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error("csv read failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv line {line}: {detail}")]
    Row { line: u64, detail: String },
    #[error("csv header mismatch: {0}")]
    Header(String),
    #[error("split plan needs {needed} points, dataset has {available}")]
    SplitSize { needed: usize, available: usize },
    #[error("dataset has {kind} targets, expected {expected}")]
    TargetKind { kind: &'static str, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels { labels: Vec<usize>, n_classes: usize },
    Reals(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Reals(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generator { name: String, seed: u64 },
    File { path: String, sha256: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub targets: Targets,
    pub provenance: Provenance,
    /// Per-dimension (min, max) of the raw features before scaling to
    /// [0,1]; `None` when the data was ingested as-is.
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn labels(&self) -> Result<(&[Vec<f64>], &[usize], usize), DataError> {
        match &self.targets {
            Targets::Labels { labels, n_classes } => Ok((&self.features, labels, *n_classes)),
            Targets::Reals(_) => Err(DataError::TargetKind { kind: "real", expected: "label" }),
        }
    }

    pub fn reals(&self) -> Result<(&[Vec<f64>], &[f64]), DataError> {
        match &self.targets {
            Targets::Reals(values) => Ok((&self.features, values)),
            Targets::Labels { .. } => {
                Err(DataError::TargetKind { kind: "label", expected: "real" })
            }
        }
    }

    /// Materialize a row subset in index order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let targets = match &self.targets {
            Targets::Labels { labels, n_classes } => Targets::Labels {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Reals(v) => Targets::Reals(indices.iter().map(|&i| v[i]).collect()),
        };
        Dataset {
            features,
            targets,
            provenance: self.provenance.clone(),
            normalization: self.normalization.clone(),
        }
    }
}

fn min_max_normalize(features: &mut [Vec<f64>]) -> Vec<(f64, f64)> {
    let d = features.first().map_or(0, Vec::len);
    let mut ranges = Vec::with_capacity(d);
    for j in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in features.iter() {
            lo = lo.min(row[j]);
            hi = hi.max(row[j]);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for row in features.iter_mut() {
            row[j] = (row[j] - lo) / span;
        }
        ranges.push((lo, hi));
    }
    ranges
}

/// Balanced isotropic Gaussian clusters with pairwise mean distance `sep`
/// (in raw units, before normalization). Cluster means sit on scaled
/// coordinate axes while `k <= d`, on random directions past that.
pub fn gen_gaussian_classes(
    k: usize,
    d: usize,
    n: usize,
    sep: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if k < 2 {
        return Err(DataError::Params(format!("need at least 2 classes, got {k}")));
    }
    if d < 2 {
        return Err(DataError::Params(format!("need at least 2 dimensions, got {d}")));
    }
    if !(sep > 0.0) {
        return Err(DataError::Params(format!("separation {sep} must be positive")));
    }
    if n == 0 {
        return Err(DataError::Params("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(k);
    for c in 0..k {
        let mut mean = vec![0.0; d];
        if c < d {
            // Orthogonal placement: distance between any two means is sep.
            mean[c] = sep / std::f64::consts::SQRT_2;
        } else {
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut dir {
                *v *= sep / norm;
            }
            mean = dir;
        }
        means.push(mean);
    }

    // Balanced labels: class c gets n/k points, the first n%k classes one more.
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let count = n / k + usize::from(c < n % k);
        for _ in 0..count {
            let x: Vec<f64> = means[c]
                .iter()
                .map(|&m| m + StandardNormal.sample(&mut rng) as f64)
                .collect();
            features.push(x);
            labels.push(c);
        }
    }
    // Deterministic shuffle so class blocks do not line up with splits.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        features.swap(i, j);
        labels.swap(i, j);
    }
    let ranges = min_max_normalize(&mut features);
    Ok(Dataset {
        features,
        targets: Targets::Labels { labels, n_classes: k },
        provenance: Provenance::Generator { name: "gaussian_classes".into(), seed },
        normalization: Some(ranges),
    })
}

/// Initial condition of the point-mass rollout.
#[derive(Debug, Clone, Copy)]
pub struct WorldState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
}

impl WorldState {
    pub fn to_features(self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.goal[0],
            self.goal[1],
        ]
    }
}

pub const ROLLOUT_MAX_REWARD: f64 = 2.0;
const ROLLOUT_DT: f64 = 0.2;
const ROLLOUT_KP: f64 = 1.5;
const ROLLOUT_KD: f64 = 0.8;
const ROLLOUT_ROLLOUTS_PER_TARGET: usize = 4;

/// Cumulative reward of one `horizon`-step rollout under the scripted
/// go-to-goal controller. Per-step reward is `max_reward - distance`, so a
/// stationary agent at the goal with zero noise earns exactly
/// `horizon * max_reward`. Action noise scales with the current distance,
/// which makes far starts noisier.
pub fn rollout_return(
    state: &WorldState,
    horizon: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> f64 {
    let mut pos = state.position;
    let mut vel = state.velocity;
    let goal = state.goal;
    let mut total = 0.0;
    for _ in 0..horizon {
        let dx = goal[0] - pos[0];
        let dy = goal[1] - pos[1];
        let dist = (dx * dx + dy * dy).sqrt();
        let scale = noise * (0.2 + dist);
        let ax = ROLLOUT_KP * dx - ROLLOUT_KD * vel[0]
            + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let ay = ROLLOUT_KP * dy - ROLLOUT_KD * vel[1]
            + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        vel[0] += ROLLOUT_DT * ax;
        vel[1] += ROLLOUT_DT * ay;
        pos[0] += ROLLOUT_DT * vel[0];
        pos[1] += ROLLOUT_DT * vel[1];
        let ndx = goal[0] - pos[0];
        let ndy = goal[1] - pos[1];
        total += ROLLOUT_MAX_REWARD - (ndx * ndx + ndy * ndy).sqrt();
    }
    total
}

pub const DYNAMICS_NOISE: f64 = 0.6;

/// Regression dataset from the 2-D point-mass world: features are the
/// initial state, the target is the cumulative reward over `horizon`
/// steps averaged over a few noisy rollouts. Heteroscedastic by
/// construction: noise grows with distance to goal.
pub fn gen_regression_dynamics(n: usize, horizon: usize, seed: u64) -> Result<Dataset, DataError> {
    if horizon == 0 {
        return Err(DataError::Params("horizon must be at least 1".into()));
    }
    if n == 0 {
        return Err(DataError::Params("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let state = WorldState {
            position: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            velocity: [rng.random_range(-0.3..=0.3), rng.random_range(-0.3..=0.3)],
            goal: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
        };
        let mut total = 0.0;
        for _ in 0..ROLLOUT_ROLLOUTS_PER_TARGET {
            total += rollout_return(&state, horizon, DYNAMICS_NOISE, &mut rng);
        }
        features.push(state.to_features());
        targets.push(total / ROLLOUT_ROLLOUTS_PER_TARGET as f64);
    }
    let ranges = min_max_normalize(&mut features);
    Ok(Dataset {
        features,
        targets: Targets::Reals(targets),
        provenance: Provenance::Generator { name: "regression_dynamics".into(), seed },
        normalization: Some(ranges),
    })
}

/// Column layout expected by [`load_csv`]: header `x0..x{d-1},y`.
#[derive(Debug, Clone, Copy)]
pub enum CsvTarget {
    Label,
    Real,
}

/// Parse a dataset from CSV bytes. Malformed rows report their 1-based
/// line number.
pub fn load_csv(path: &str, target: CsvTarget) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_csv_bytes(&bytes, target, path)
}

pub fn load_csv_bytes(bytes: &[u8], target: CsvTarget, origin: &str) -> Result<Dataset, DataError> {
    let digest = Sha256::digest(bytes);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Header(e.to_string()))?
        .clone();
    if headers.is_empty() {
        return Err(DataError::Header("empty header row".into()));
    }
    let d = headers.len() - 1;
    if d == 0 {
        return Err(DataError::Header("no feature columns".into()));
    }
    for (j, name) in headers.iter().take(d).enumerate() {
        if name != format!("x{j}") {
            return Err(DataError::Header(format!("column {j} named {name:?}, expected \"x{j}\"")));
        }
    }
    if headers.get(d) != Some("y") {
        return Err(DataError::Header("last column must be named \"y\"".into()));
    }

    let mut features = Vec::new();
    let mut raw_targets = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Row {
            line: e.position().map_or(0, csv::Position::line),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() != d + 1 {
            return Err(DataError::Row {
                line,
                detail: format!("{} fields, expected {}", record.len(), d + 1),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Row {
                line,
                detail: format!("field {j} is not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Row { line, detail: format!("field {j} is not finite") });
            }
            if j < d {
                row.push(v);
            } else {
                raw_targets.push(v);
            }
        }
        features.push(row);
    }

    let targets = match target {
        CsvTarget::Real => Targets::Reals(raw_targets),
        CsvTarget::Label => {
            let mut labels = Vec::with_capacity(raw_targets.len());
            for (i, &v) in raw_targets.iter().enumerate() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(DataError::Row {
                        line: (i + 2) as u64,
                        detail: format!("label {v} is not a non-negative integer"),
                    });
                }
                labels.push(v as usize);
            }
            let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
            Targets::Labels { labels, n_classes }
        }
    };

    Ok(Dataset {
        features,
        targets,
        provenance: Provenance::File {
            path: origin.to_string(),
            sha256: format!("{digest:x}"),
        },
        normalization: None,
    })
}

/// Serialize with the same header convention [`load_csv`] expects.
pub fn save_csv(ds: &Dataset) -> Vec<u8> {
    let d = ds.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("y\n");
    for (i, row) in ds.features.iter().enumerate() {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        match &ds.targets {
            Targets::Labels { labels, .. } => out.push_str(&labels[i].to_string()),
            Targets::Reals(vals) => out.push_str(&vals[i].to_string()),
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Sizes and replication for repeated random splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitPlan {
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub n_splits: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint train/calibration/test index sets for each split, reproducible
/// from `(plan.seed, split_index)` alone.
pub fn make_splits(n_points: usize, plan: &SplitPlan) -> Result<Vec<SplitIndices>, DataError> {
    let needed = plan.n_train + plan.n_cal + plan.n_test;
    if needed > n_points {
        return Err(DataError::SplitSize { needed, available: n_points });
    }
    if plan.n_cal == 0 || plan.n_test == 0 {
        return Err(DataError::Params("calibration and test sets must be nonempty".into()));
    }
    let mut splits = Vec::with_capacity(plan.n_splits);
    for s in 0..plan.n_splits {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[plan.seed, s as u64]));
        let mut perm: Vec<usize> = (0..n_points).collect();
        for i in (1..n_points).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let train = perm[..plan.n_train].to_vec();
        let cal = perm[plan.n_train..plan.n_train + plan.n_cal].to_vec();
        let test = perm[plan.n_train + plan.n_cal..needed].to_vec();
        splits.push(SplitIndices { train, cal, test });
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn gaussian_balance_small() {
        let ds = gen_gaussian_classes(2, 3, 10, 5.0, 1).unwrap();
        let (_, labels, k) = ds.labels().unwrap();
        assert_eq!(k, 2);
        assert_eq!(labels.iter().filter(|&&c| c == 0).count(), 5);
        assert_eq!(labels.iter().filter(|&&c| c == 1).count(), 5);
    }

    #[test]
    fn gaussian_is_seed_deterministic() {
        let a = gen_gaussian_classes(3, 4, 60, 3.0, 42).unwrap();
        let b = gen_gaussian_classes(3, 4, 60, 3.0, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_classes(3, 4, 60, 3.0, 43).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn gaussian_features_normalized() {
        let ds = gen_gaussian_classes(3, 4, 200, 6.0, 9).unwrap();
        for row in &ds.features {
            for &v in row {
                assert!((-1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
        assert!(ds.normalization.is_some());
    }

    #[test]
    fn rollout_at_goal_with_zero_noise_is_k_times_max() {
        let state = WorldState { position: [0.3, -0.4], velocity: [0.0, 0.0], goal: [0.3, -0.4] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 3, 7] {
            let r = rollout_return(&state, k, 0.0, &mut rng);
            assert!((r - k as f64 * ROLLOUT_MAX_REWARD).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamics_is_seed_deterministic() {
        let a = gen_regression_dynamics(50, 5, 7).unwrap();
        let b = gen_regression_dynamics(50, 5, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dynamics_target_variance_grows_with_distance() {
        // Monte-Carlo estimate of Var(return) at a near and a far start.
        let near = WorldState { position: [0.1, 0.0], velocity: [0.0, 0.0], goal: [0.0, 0.0] };
        let far = WorldState { position: [1.8, 0.0], velocity: [0.0, 0.0], goal: [0.0, 0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample_var = |state: &WorldState, rng: &mut ChaCha8Rng| {
            let n = 10_000;
            let returns: Vec<f64> =
                (0..n).map(|_| rollout_return(state, 5, DYNAMICS_NOISE, rng)).collect();
            let mean = returns.iter().sum::<f64>() / n as f64;
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64
        };
        let v_near = sample_var(&near, &mut rng);
        let v_far = sample_var(&far, &mut rng);
        assert!(v_far > v_near, "variance near goal {v_near} should be below far {v_far}");
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_gaussian_classes(3, 4, 30, 4.0, 11).unwrap();
        let bytes = save_csv(&ds);
        let back = load_csv_bytes(&bytes, CsvTarget::Label, "mem").unwrap();
        assert_eq!(back.dim(), ds.dim());
        let (_, labels, _) = ds.labels().unwrap();
        let (_, back_labels, _) = back.labels().unwrap();
        assert_eq!(labels, back_labels);
        for (a, b) in ds.features.iter().zip(&back.features) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x, y, "float text round-trip is exact");
            }
        }
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let doc = "x0,x1,y\n0.5,0.25,1\n0.5,oops,0\n";
        match load_csv_bytes(doc.as_bytes(), CsvTarget::Label, "mem").unwrap_err() {
            DataError::Row { line, .. } => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn csv_header_is_validated() {
        let doc = "a,b,y\n0.5,0.25,1\n";
        assert!(matches!(
            load_csv_bytes(doc.as_bytes(), CsvTarget::Label, "mem"),
            Err(DataError::Header(_))
        ));
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let plan = SplitPlan { n_train: 30, n_cal: 25, n_test: 20, n_splits: 4, seed: 3 };
        let splits = make_splits(100, &plan).unwrap();
        assert_eq!(splits.len(), 4);
        for s in &splits {
            assert_eq!(s.train.len(), 30);
            assert_eq!(s.cal.len(), 25);
            assert_eq!(s.test.len(), 20);
            let all: HashSet<usize> =
                s.train.iter().chain(&s.cal).chain(&s.test).copied().collect();
            assert_eq!(all.len(), 75, "no duplicate indices across the three parts");
        }
        let again = make_splits(100, &plan).unwrap();
        assert_eq!(splits, again);
        assert_ne!(splits[0], splits[1]);
    }

    #[test]
    fn split_plan_too_large_is_rejected() {
        let plan = SplitPlan { n_train: 80, n_cal: 25, n_test: 20, n_splits: 1, seed: 3 };
        assert!(matches!(make_splits(100, &plan), Err(DataError::SplitSize { .. })));
    }
}
