//! Sampling-based soundness check for output bounds.

use super::{LpNorm, OutputBounds, PerturbationBall, VerifierError};
use crate::tensor::Network;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

/// Float-noise tolerance: a sampled output only counts as escaping the box
/// when it does so by more than this relative margin.
const SOUNDNESS_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Violation {
    pub point_index: usize,
    pub output_index: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct ViolationReport {
    pub points_checked: usize,
    pub violations: Vec<Violation>,
}

impl ViolationReport {
    pub fn is_sound(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Draw one point uniformly from the ball.
///
/// linf balls sample each coordinate independently; l1/l2 balls sample a
/// direction uniformly on the unit sphere of the norm and scale it by
/// `radius * u^(1/d)`, the density correction that makes the radius
/// distribution uniform over the ball volume.
pub fn sample_in_ball(ball: &PerturbationBall, rng: &mut impl Rng) -> Vec<f64> {
    let d = ball.dim();
    if ball.radius == 0.0 {
        return ball.center.clone();
    }
    match ball.norm {
        LpNorm::LInf => ball
            .center
            .iter()
            .map(|&c| c + ball.radius * rng.random_range(-1.0..=1.0))
            .collect(),
        LpNorm::L2 => {
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = LpNorm::L2.norm(&dir).max(f64::MIN_POSITIVE);
            let r = ball.radius * rng.random_range(0.0..=1.0_f64).powf(1.0 / d as f64);
            for v in &mut dir {
                *v *= r / norm;
            }
            dir.iter().zip(&ball.center).map(|(v, c)| c + v).collect()
        }
        LpNorm::L1 => {
            let mut dir: Vec<f64> = (0..d)
                .map(|_| {
                    let mag: f64 = Exp1.sample(rng);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            let norm = LpNorm::L1.norm(&dir).max(f64::MIN_POSITIVE);
            let r = ball.radius * rng.random_range(0.0..=1.0_f64).powf(1.0 / d as f64);
            for v in &mut dir {
                *v *= r / norm;
            }
            dir.iter().zip(&ball.center).map(|(v, c)| c + v).collect()
        }
    }
}

/// Evaluate the network on sampled ball points and report every output that
/// escapes the claimed box. Besides `n_samples` random draws, the center
/// and the 2d axis extremes `center ± radius * e_i` (in the ball for every
/// supported norm) are always probed.
pub fn sampling_soundness_oracle(
    net: &Network,
    bounds: &OutputBounds,
    n_samples: usize,
    seed: u64,
) -> Result<ViolationReport, VerifierError> {
    let ball = &bounds.ball;
    let d = ball.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = Vec::new();
    let mut probe = |index: usize, x: &[f64]| -> Result<(), VerifierError> {
        let y = net.forward(x)?;
        for (j, &v) in y.iter().enumerate() {
            let slack = SOUNDNESS_TOL * v.abs().max(1.0);
            if v < bounds.lower[j] - slack || v > bounds.upper[j] + slack {
                violations.push(Violation {
                    point_index: index,
                    output_index: j,
                    value: v,
                    lower: bounds.lower[j],
                    upper: bounds.upper[j],
                });
            }
        }
        Ok(())
    };

    let mut count = 0;
    probe(count, &ball.center)?;
    count += 1;
    for i in 0..d {
        for sign in [-1.0, 1.0] {
            let mut x = ball.center.clone();
            x[i] += sign * ball.radius;
            probe(count, &x)?;
            count += 1;
        }
    }
    for _ in 0..n_samples {
        let x = sample_in_ball(ball, &mut rng);
        probe(count, &x)?;
        count += 1;
    }
    Ok(ViolationReport { points_checked: count, violations })
}
