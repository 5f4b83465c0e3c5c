//! Sound output bounds for networks over lp-balls.
//!
//! Two incomplete verifiers are provided: interval bound propagation and a
//! backward linear relaxation. Both return boxes guaranteed to contain the
//! network's image of the ball; neither claims tightness. Softmax is kept
//! out of the verified portion — probability bounds come from
//! [`softmax_bounds`] applied to verified logit boxes, which is both
//! tighter and simpler than relaxing the softmax itself.

mod crown;
mod ibp;
mod sampling;

pub use sampling::{sample_in_ball, sampling_soundness_oracle, Violation, ViolationReport};

use crate::tensor::{Layer, Network, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("perturbation radius {0} is negative")]
    NegativeRadius(f64),
    #[error("ball center contains a non-finite value")]
    NonFiniteCenter,
    #[error("softmax layer inside the verified portion of the network")]
    SoftmaxInside,
    #[error("ball has dimension {ball}, network expects {expected}")]
    BallDim { ball: usize, expected: usize },
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The norm bounding the adversary's perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpNorm {
    L1,
    L2,
    LInf,
}

impl LpNorm {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            LpNorm::L1 => v.iter().map(|x| x.abs()).sum(),
            LpNorm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            LpNorm::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    /// Norm of `v` under the dual norm q with 1/p + 1/q = 1. This turns the
    /// range of a linear form over the ball into `eps * dual_norm(row)`.
    pub fn dual_norm(self, v: &[f64]) -> f64 {
        match self {
            LpNorm::L1 => LpNorm::LInf.norm(v),
            LpNorm::L2 => LpNorm::L2.norm(v),
            LpNorm::LInf => LpNorm::L1.norm(v),
        }
    }
}

impl std::fmt::Display for LpNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LpNorm::L1 => write!(f, "l1"),
            LpNorm::L2 => write!(f, "l2"),
            LpNorm::LInf => write!(f, "linf"),
        }
    }
}

/// `{x' : ||x' - center||_p <= radius}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBall {
    pub center: Vec<f64>,
    pub radius: f64,
    pub norm: LpNorm,
}

impl PerturbationBall {
    pub fn new(center: Vec<f64>, radius: f64, norm: LpNorm) -> Result<Self, VerifierError> {
        if !(radius >= 0.0) {
            return Err(VerifierError::NegativeRadius(radius));
        }
        if !center.iter().all(|v| v.is_finite()) {
            return Err(VerifierError::NonFiniteCenter);
        }
        Ok(PerturbationBall { center, radius, norm })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let delta: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        self.norm.norm(&delta) <= self.radius
    }
}

/// Which bounding method produced a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Ibp,
    Crown,
}

/// Per-output box `[lower, upper]` certified over a ball.
#[derive(Debug, Clone)]
pub struct OutputBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub method: BoundMethod,
    pub ball: PerturbationBall,
}

impl OutputBounds {
    fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        method: BoundMethod,
        ball: PerturbationBall,
    ) -> Result<Self, VerifierError> {
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(VerifierError::NonFinite(format!("bound for output {i}")));
            }
            if l > u {
                return Err(VerifierError::NonFinite(format!(
                    "inverted bound for output {i}: {l} > {u}"
                )));
            }
        }
        Ok(OutputBounds { lower, upper, method, ball })
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn mean_width(&self) -> f64 {
        let n = self.lower.len();
        (0..n).map(|i| self.width(i)).sum::<f64>() / n as f64
    }

    pub fn contains_point(&self, y: &[f64], tol: f64) -> bool {
        y.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| {
            let slack = tol * v.abs().max(1.0);
            *v >= l - slack && *v <= u + slack
        })
    }
}

/// Per-neuron pre-activation intervals for each activation layer, indexed
/// like the layer list (`None` for non-activation layers).
#[derive(Debug, Clone)]
pub struct PreActivationBounds {
    pub per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

fn reject_softmax(layers: &[Layer]) -> Result<(), VerifierError> {
    if layers.iter().any(Layer::is_softmax) {
        return Err(VerifierError::SoftmaxInside);
    }
    Ok(())
}

fn check_ball(layers: &[Layer], input_dim: usize, ball: &PerturbationBall) -> Result<(), VerifierError> {
    reject_softmax(layers)?;
    if !(ball.radius >= 0.0) {
        return Err(VerifierError::NegativeRadius(ball.radius));
    }
    if !ball.center.iter().all(|v| v.is_finite()) {
        return Err(VerifierError::NonFiniteCenter);
    }
    if ball.dim() != input_dim {
        return Err(VerifierError::BallDim { ball: ball.dim(), expected: input_dim });
    }
    Ok(())
}

/// Interval bound propagation over the ball.
///
/// A leading affine layer consumes the lp geometry exactly through the dual
/// norm; everything after runs on coordinate boxes (affine layers in
/// center/radius form, monotone activations endpointwise).
pub fn ibp_bounds(net: &Network, ball: &PerturbationBall) -> Result<OutputBounds, VerifierError> {
    check_ball(net.layers(), net.input_dim(), ball)?;
    let (lower, upper, _) = ibp::propagate(net.layers(), ball);
    OutputBounds::new(lower, upper, BoundMethod::Ibp, ball.clone())
}

/// Backward linear relaxation over the ball, using IBP pre-activation
/// intervals for the activation relaxations. The final box is intersected
/// with the IBP box, so it is never wider.
pub fn crown_bounds(net: &Network, ball: &PerturbationBall) -> Result<OutputBounds, VerifierError> {
    check_ball(net.layers(), net.input_dim(), ball)?;
    let (ibp_lower, ibp_upper, pre) = ibp::propagate(net.layers(), ball);
    let (mut lower, mut upper) = crown::backward_bounds(net.layers(), ball, &pre);
    for i in 0..lower.len() {
        lower[i] = lower[i].max(ibp_lower[i]);
        upper[i] = upper[i].min(ibp_upper[i]);
    }
    OutputBounds::new(lower, upper, BoundMethod::Crown, ball.clone())
}

/// Bounds with the method chosen at runtime.
pub fn bounds(
    net: &Network,
    ball: &PerturbationBall,
    method: BoundMethod,
) -> Result<OutputBounds, VerifierError> {
    match method {
        BoundMethod::Ibp => ibp_bounds(net, ball),
        BoundMethod::Crown => crown_bounds(net, ball),
    }
}

/// IBP pre-activation intervals, exposed for inspection and tests.
pub fn preactivation_bounds(
    net: &Network,
    ball: &PerturbationBall,
) -> Result<PreActivationBounds, VerifierError> {
    check_ball(net.layers(), net.input_dim(), ball)?;
    let (_, _, pre) = ibp::propagate(net.layers(), ball);
    Ok(pre)
}

pub(crate) fn bounds_for_layers(
    layers: &[Layer],
    input_dim: usize,
    ball: &PerturbationBall,
    method: BoundMethod,
) -> Result<OutputBounds, VerifierError> {
    check_ball(layers, input_dim, ball)?;
    match method {
        BoundMethod::Ibp => {
            let (lower, upper, _) = ibp::propagate(layers, ball);
            OutputBounds::new(lower, upper, BoundMethod::Ibp, ball.clone())
        }
        BoundMethod::Crown => {
            let (ibp_lower, ibp_upper, pre) = ibp::propagate(layers, ball);
            let (mut lower, mut upper) = crown::backward_bounds(layers, ball, &pre);
            for i in 0..lower.len() {
                lower[i] = lower[i].max(ibp_lower[i]);
                upper[i] = upper[i].min(ibp_upper[i]);
            }
            OutputBounds::new(lower, upper, BoundMethod::Crown, ball.clone())
        }
    }
}

/// Coordinatewise softmax bounds from a verified logit box.
///
/// softmax_y is increasing in the y-th logit and decreasing in every other,
/// so the extremes of the box give exact per-coordinate bounds:
/// `upper_y = exp(u_y) / (exp(u_y) + sum_{j != y} exp(l_j))` and dually for
/// the lower bound. Exponentials are shifted by the max upper bound. With a
/// degenerate box (l == u) both outputs reproduce `softmax(l)` bit for bit.
pub fn softmax_bounds(
    logit_lower: &[f64],
    logit_upper: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), VerifierError> {
    if logit_lower.len() != logit_upper.len() {
        return Err(VerifierError::NonFinite("mismatched bound lengths".into()));
    }
    for (l, u) in logit_lower.iter().zip(logit_upper) {
        if !l.is_finite() || !u.is_finite() {
            return Err(VerifierError::NonFinite("logit bound".into()));
        }
        if l > u {
            return Err(VerifierError::NonFinite(format!("inverted logit bound {l} > {u}")));
        }
    }
    let k = logit_lower.len();
    let shift = logit_upper.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp_lo: Vec<f64> = logit_lower.iter().map(|&v| (v - shift).exp()).collect();
    let exp_hi: Vec<f64> = logit_upper.iter().map(|&v| (v - shift).exp()).collect();
    let mut prob_lower = vec![0.0; k];
    let mut prob_upper = vec![0.0; k];
    for y in 0..k {
        // Denominators accumulate in index order so the degenerate case
        // matches the forward softmax exactly.
        let mut denom_up = 0.0;
        let mut denom_lo = 0.0;
        for j in 0..k {
            if j == y {
                denom_up += exp_hi[y];
                denom_lo += exp_lo[y];
            } else {
                denom_up += exp_lo[j];
                denom_lo += exp_hi[j];
            }
        }
        prob_upper[y] = exp_hi[y] / denom_up;
        prob_lower[y] = exp_lo[y] / denom_lo;
    }
    Ok((prob_lower, prob_upper))
}
