//! Robust conformal set constructors.
//!
//! Two routes to coverage under lp-bounded input perturbations, both built
//! on sound output bounds over the perturbation ball:
//!
//! * robust inference: calibrate as usual, but at test time admit a label
//!   (or widen the interval) using the best-case score over the ball;
//! * robust calibration: inflate the critical value once using worst-case
//!   calibration scores, then score test points the plain way.
//!
//! Either way the robust region contains the vanilla region built from the
//! same model and calibration data; `containment_check` verifies that
//! pointwise.

use crate::conformal::{
    conformal_quantile, cqr_interval, score_cqr, vanilla_set_class, ConformalError, CriticalValue,
    PredictionInterval, PredictionSet, Region,
};
use crate::parallel::par_map;
use crate::tensor::{Network, TaskKind};
use crate::verifier::{bounds_for_layers, softmax_bounds, BoundMethod, LpNorm, PerturbationBall, VerifierError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VrcpError {
    #[error("network is not a softmax classifier")]
    NotClassifier,
    #[error("network is not a scalar quantile regressor")]
    NotQuantileRegressor,
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

/// The adversary's budget, shared by attacker and verifier: one norm and
/// one radius per experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatModel {
    pub norm: LpNorm,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn ball_at(&self, x: &[f64]) -> Result<PerturbationBall, VerifierError> {
        PerturbationBall::new(x.to_vec(), self.epsilon, self.norm)
    }
}

fn require_classifier(net: &Network) -> Result<(), VrcpError> {
    if net.task() != TaskKind::Classifier || !net.ends_with_softmax() {
        return Err(VrcpError::NotClassifier);
    }
    Ok(())
}

fn require_quantile(net: &Network) -> Result<(), VrcpError> {
    if net.output_dim() != 1 || net.ends_with_softmax() {
        return Err(VrcpError::NotQuantileRegressor);
    }
    Ok(())
}

/// Sound bounds on the class probabilities over the ball: verified logit
/// box pushed through the softmax bound.
pub fn class_probability_bounds(
    net: &Network,
    ball: &PerturbationBall,
    method: BoundMethod,
) -> Result<(Vec<f64>, Vec<f64>), VrcpError> {
    require_classifier(net)?;
    let logit = bounds_for_layers(net.logit_layers(), net.input_dim(), ball, method)?;
    Ok(softmax_bounds(&logit.lower, &logit.upper)?)
}

/// Robust-inference classification set: admit every label whose best-case
/// score over the ball passes the vanilla critical value.
pub fn vrcp_i_set_class(
    net: &Network,
    x: &[f64],
    threat: &ThreatModel,
    method: BoundMethod,
    q: &CriticalValue,
) -> Result<PredictionSet, VrcpError> {
    let ball = threat.ball_at(x)?;
    let (_, prob_upper) = class_probability_bounds(net, &ball, method)?;
    let contains = prob_upper.iter().map(|&p_hi| q.admits(1.0 - p_hi)).collect();
    Ok(PredictionSet::from_membership(contains))
}

/// Robust-calibration critical value for classification: worst-case score
/// of each calibration pair over its ball, fed to the conformal quantile.
/// One verifier call per calibration point, independent of test size.
pub fn vrcp_c_calibrate_class(
    net: &Network,
    calibration: &[(Vec<f64>, usize)],
    threat: &ThreatModel,
    method: BoundMethod,
    alpha: f64,
) -> Result<CriticalValue, VrcpError> {
    require_classifier(net)?;
    let worst: Vec<Result<f64, VrcpError>> = par_map(calibration, |(x, y)| {
        let ball = threat.ball_at(x)?;
        let (prob_lower, _) = class_probability_bounds(net, &ball, method)?;
        Ok(1.0 - prob_lower[*y])
    });
    let worst = worst.into_iter().collect::<Result<Vec<f64>, _>>()?;
    Ok(conformal_quantile(&worst, alpha)?)
}

/// Post-robust-calibration set: plain scores against the inflated critical
/// value. Same machinery as the vanilla constructor.
pub fn vrcp_c_set_class(probs: &[f64], q_robust: &CriticalValue) -> PredictionSet {
    vanilla_set_class(probs, q_robust)
}

/// Robust-inference CQR interval: verified lower bound of the low-quantile
/// net and upper bound of the high-quantile net, widened by the vanilla
/// critical value.
pub fn vrcp_i_interval_regress(
    net_lo: &Network,
    net_hi: &Network,
    x: &[f64],
    threat: &ThreatModel,
    method: BoundMethod,
    q: &CriticalValue,
) -> Result<PredictionInterval, VrcpError> {
    require_quantile(net_lo)?;
    require_quantile(net_hi)?;
    let ball = threat.ball_at(x)?;
    let b_lo = bounds_for_layers(net_lo.layers(), net_lo.input_dim(), &ball, method)?;
    let b_hi = bounds_for_layers(net_hi.layers(), net_hi.input_dim(), &ball, method)?;
    Ok(cqr_interval(b_lo.lower[0], b_hi.upper[0], q))
}

/// Robust-calibration critical value for CQR: worst-case score pairs the
/// upper bound of the low quantile with the lower bound of the high one.
pub fn vrcp_c_calibrate_regress(
    net_lo: &Network,
    net_hi: &Network,
    calibration: &[(Vec<f64>, f64)],
    threat: &ThreatModel,
    method: BoundMethod,
    alpha: f64,
) -> Result<CriticalValue, VrcpError> {
    require_quantile(net_lo)?;
    require_quantile(net_hi)?;
    let worst: Vec<Result<f64, VrcpError>> = par_map(calibration, |(x, y)| {
        let ball = threat.ball_at(x)?;
        let b_lo = bounds_for_layers(net_lo.layers(), net_lo.input_dim(), &ball, method)?;
        let b_hi = bounds_for_layers(net_hi.layers(), net_hi.input_dim(), &ball, method)?;
        Ok((b_lo.upper[0] - y).max(y - b_hi.lower[0]))
    });
    let worst = worst.into_iter().collect::<Result<Vec<f64>, _>>()?;
    Ok(conformal_quantile(&worst, alpha)?)
}

/// Best-case CQR score over the ball, used by the enumeration cross-check
/// of the implicit robust interval.
pub fn vrcp_i_best_case_score_regress(
    net_lo: &Network,
    net_hi: &Network,
    x: &[f64],
    threat: &ThreatModel,
    method: BoundMethod,
    y: f64,
) -> Result<f64, VrcpError> {
    require_quantile(net_lo)?;
    require_quantile(net_hi)?;
    let ball = threat.ball_at(x)?;
    let b_lo = bounds_for_layers(net_lo.layers(), net_lo.input_dim(), &ball, method)?;
    let b_hi = bounds_for_layers(net_hi.layers(), net_hi.input_dim(), &ball, method)?;
    Ok(score_cqr(b_lo.lower[0], b_hi.upper[0], y))
}

/// One containment failure, with enough context to reproduce it.
#[derive(Debug, Clone)]
pub struct ContainmentViolation {
    pub index: usize,
    pub vanilla: Region,
    pub robust: Region,
}

#[derive(Debug, Clone, Default)]
pub struct ContainmentReport {
    pub checked: usize,
    pub violations: Vec<ContainmentViolation>,
}

impl ContainmentReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: ContainmentReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }
}

#[derive(Debug, Error)]
#[error("region {index}: cannot compare a label set with an interval")]
pub struct RegionKindMismatch {
    pub index: usize,
}

/// Check `vanilla[i]` is contained in `robust[i]` for every point. A
/// violation is a report entry, not an error; mixing region kinds is.
pub fn containment_check(
    vanilla: &[Region],
    robust: &[Region],
) -> Result<ContainmentReport, RegionKindMismatch> {
    assert_eq!(vanilla.len(), robust.len(), "regions computed on identical inputs");
    let mut report = ContainmentReport::default();
    for (index, (v, r)) in vanilla.iter().zip(robust).enumerate() {
        match v.is_subset_of(r) {
            Some(true) => {}
            Some(false) => report.violations.push(ContainmentViolation {
                index,
                vanilla: v.clone(),
                robust: r.clone(),
            }),
            None => return Err(RegionKindMismatch { index }),
        }
        report.checked += 1;
    }
    Ok(report)
}
