//! Gradient attacks bounded in lp norm.
//!
//! FGSM takes one signed step of size epsilon; PGD iterates ascent steps
//! with projection back onto the ball and returns the best iterate seen,
//! with the clean input always among the candidates. Both are white-box:
//! they differentiate the attacked model directly.

use crate::autodiff::{grad_input, value_and_grad_input, AutodiffError, Objective};
use crate::tensor::{Network, TensorError};
use crate::verifier::{sample_in_ball, LpNorm, PerturbationBall};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub norm: LpNorm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.norm == LpNorm::L1 {
            return Err(AttackError::Config("l1 attacks are not supported".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(AttackError::Config(format!("epsilon {} negative", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(AttackError::Config("steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(AttackError::Config(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// What the adversary maximizes.
#[derive(Debug, Clone, Copy)]
pub enum AttackObjective<'a> {
    /// Cross-entropy of the true label under a softmax classifier.
    ClassifierLoss { net: &'a Network, label: usize },
    /// The quantile-regression nonconformity score of the true target,
    /// attacking interval validity directly.
    CqrScore {
        net_lo: &'a Network,
        net_hi: &'a Network,
        target: f64,
    },
}

impl AttackObjective<'_> {
    pub fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), AttackError> {
        match self {
            AttackObjective::ClassifierLoss { net, label } => {
                let (v, g) =
                    value_and_grad_input(net, x, &Objective::CrossEntropy { target: *label })?;
                Ok((v, g))
            }
            AttackObjective::CqrScore { net_lo, net_hi, target } => {
                let lo = net_lo.forward(x)?[0];
                let hi = net_hi.forward(x)?[0];
                let below = lo - target;
                let above = target - hi;
                if below >= above {
                    let g = grad_input(net_lo, x, &Objective::Logit { index: 0 })?;
                    Ok((below, g))
                } else {
                    let mut g = grad_input(net_hi, x, &Objective::Logit { index: 0 })?;
                    for v in &mut g {
                        *v = -*v;
                    }
                    Ok((above, g))
                }
            }
        }
    }
}

/// Single signed-gradient step of size epsilon; linf only.
pub fn fgsm(obj: &AttackObjective, x: &[f64], cfg: &AttackConfig) -> Result<Vec<f64>, AttackError> {
    cfg.validate()?;
    if cfg.norm != LpNorm::LInf {
        return Err(AttackError::Config(
            "fgsm is a sign-step method and requires the linf norm".into(),
        ));
    }
    if cfg.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let (_, g) = obj.value_and_grad(x)?;
    Ok(x.iter()
        .zip(&g)
        .map(|(&xi, &gi)| xi + cfg.epsilon * sign(gi))
        .collect())
}

/// Projected gradient ascent; returns the iterate with the highest
/// objective value, with the clean input as a candidate, so the result is
/// never worse than no attack.
pub fn pgd(obj: &AttackObjective, x: &[f64], cfg: &AttackConfig) -> Result<Vec<f64>, AttackError> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.to_vec());
    }
    let ball = PerturbationBall::new(x.to_vec(), cfg.epsilon, cfg.norm)
        .map_err(|e| AttackError::Config(e.to_string()))?;

    let (clean_value, _) = obj.value_and_grad(x)?;
    let mut best = x.to_vec();
    let mut best_value = clean_value;

    let mut current = if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        sample_in_ball(&ball, &mut rng)
    } else {
        x.to_vec()
    };

    for _ in 0..cfg.steps {
        let (value, grad) = obj.value_and_grad(&current)?;
        if value > best_value {
            best_value = value;
            best = current.clone();
        }
        let step: Vec<f64> = match cfg.norm {
            LpNorm::LInf => grad.iter().map(|&g| cfg.step_size * sign(g)).collect(),
            LpNorm::L2 => {
                let n = LpNorm::L2.norm(&grad);
                if n == 0.0 {
                    break;
                }
                grad.iter().map(|&g| cfg.step_size * g / n).collect()
            }
            LpNorm::L1 => unreachable!("rejected by validate"),
        };
        for (c, s) in current.iter_mut().zip(&step) {
            *c += s;
        }
        current = project_ball(&current, x, cfg.epsilon, cfg.norm)?;
    }
    let (value, _) = obj.value_and_grad(&current)?;
    if value > best_value {
        best = current;
    }
    Ok(best)
}

/// Nearest point of the ball around `x0`: coordinate clamp for linf,
/// radial rescale for l2.
pub fn project_ball(
    x: &[f64],
    x0: &[f64],
    epsilon: f64,
    norm: LpNorm,
) -> Result<Vec<f64>, AttackError> {
    match norm {
        LpNorm::LInf => Ok(x
            .iter()
            .zip(x0)
            .map(|(&xi, &ci)| xi.clamp(ci - epsilon, ci + epsilon))
            .collect()),
        LpNorm::L2 => {
            let delta: Vec<f64> = x.iter().zip(x0).map(|(a, b)| a - b).collect();
            let dist = LpNorm::L2.norm(&delta);
            if dist <= epsilon {
                return Ok(x.to_vec());
            }
            let scale = epsilon / dist;
            Ok(x0.iter().zip(&delta).map(|(c, d)| c + scale * d).collect())
        }
        LpNorm::L1 => Err(AttackError::Config("l1 projection is not supported".into())),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Layer, Matrix, TaskKind};

    fn linear_pair() -> (Network, Network) {
        let mk = |w: Vec<f64>, b: f64| {
            Network::new(
                2,
                vec![Layer::Affine {
                    weight: Matrix::from_rows(&[w]).unwrap(),
                    bias: vec![b],
                }],
                TaskKind::Quantile { tau: 0.5 },
            )
            .unwrap()
        };
        (mk(vec![1.0, 2.0], -0.5), mk(vec![1.0, 2.0], 0.5))
    }

    fn cfg(norm: LpNorm, epsilon: f64) -> AttackConfig {
        AttackConfig {
            norm,
            epsilon,
            steps: 50,
            step_size: 0.05,
            seed: 7,
            random_start: false,
        }
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 0.0 };
        let x = vec![0.3, -0.2];
        assert_eq!(fgsm(&obj, &x, &cfg(LpNorm::LInf, 0.0)).unwrap(), x);
    }

    #[test]
    fn fgsm_matches_hand_computed_direction() {
        // Linear softmax classifier w = [1, -1]; cross-entropy on class 0
        // has input gradient (p0 - 1) * w, i.e. direction (-w). The attack
        // steps along sign(grad) = (-1, +1).
        let net = Network::new(
            2,
            vec![
                Layer::Affine {
                    weight: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap(),
                    bias: vec![0.0, 0.0],
                },
                Layer::Softmax,
            ],
            TaskKind::Classifier,
        )
        .unwrap();
        let obj = AttackObjective::ClassifierLoss { net: &net, label: 0 };
        let x = vec![0.2, 0.1];
        let adv = fgsm(&obj, &x, &cfg(LpNorm::LInf, 0.25)).unwrap();
        assert_eq!(adv, vec![0.2 - 0.25, 0.1 + 0.25]);
        let dist = adv
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!((dist - 0.25).abs() < 1e-15, "full-size step when no gradient is zero");
    }

    #[test]
    fn fgsm_requires_linf() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 0.0 };
        assert!(matches!(
            fgsm(&obj, &[0.0, 0.0], &cfg(LpNorm::L2, 0.1)),
            Err(AttackError::Config(_))
        ));
    }

    #[test]
    fn pgd_zero_epsilon_is_identity() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 0.0 };
        let x = vec![0.3, -0.2];
        assert_eq!(pgd(&obj, &x, &cfg(LpNorm::L2, 0.0)).unwrap(), x);
    }

    #[test]
    fn pgd_never_returns_a_worse_point() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 0.1 };
        let x = vec![0.3, -0.2];
        let mut c = cfg(LpNorm::LInf, 0.2);
        c.random_start = true;
        for seed in 0..20 {
            c.seed = seed;
            let adv = pgd(&obj, &x, &c).unwrap();
            let (v_adv, _) = obj.value_and_grad(&adv).unwrap();
            let (v_clean, _) = obj.value_and_grad(&x).unwrap();
            assert!(v_adv >= v_clean);
        }
    }

    #[test]
    fn pgd_linear_l2_reaches_the_closed_form_optimum() {
        // Objective value y - (w.x + b) is linear with constant gradient
        // -w; the l2-ball maximizer is x - eps * w / ||w||.
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 100.0 };
        let x = vec![0.3, -0.2];
        let eps = 0.5;
        let mut c = cfg(LpNorm::L2, eps);
        c.steps = 200;
        c.step_size = 0.02;
        let adv = pgd(&obj, &x, &c).unwrap();
        let wnorm = (1.0_f64 + 4.0).sqrt();
        let expect = [x[0] - eps * 1.0 / wnorm, x[1] - eps * 2.0 / wnorm];
        for (a, e) in adv.iter().zip(expect) {
            assert!((a - e).abs() < 1e-4, "pgd {a} vs closed form {e}");
        }
    }

    #[test]
    fn pgd_is_deterministic_given_seed() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 3.0 };
        let x = vec![0.3, -0.2];
        let mut c = cfg(LpNorm::LInf, 0.2);
        c.random_start = true;
        c.seed = 99;
        assert_eq!(pgd(&obj, &x, &c).unwrap(), pgd(&obj, &x, &c).unwrap());
    }

    #[test]
    fn projection_examples() {
        // Inside the ball: unchanged.
        let inside = project_ball(&[0.1, 0.1], &[0.0, 0.0], 1.0, LpNorm::L2).unwrap();
        assert_eq!(inside, vec![0.1, 0.1]);
        // 3-4-5 triangle rescales radially.
        let scaled = project_ball(&[3.0, 4.0], &[0.0, 0.0], 1.0, LpNorm::L2).unwrap();
        assert!((scaled[0] - 0.6).abs() < 1e-12);
        assert!((scaled[1] - 0.8).abs() < 1e-12);
        // linf clamps coordinatewise.
        let clamped = project_ball(&[0.7], &[0.0], 0.5, LpNorm::LInf).unwrap();
        assert_eq!(clamped, vec![0.5]);
    }

    #[test]
    fn attack_outputs_satisfy_the_norm_constraint() {
        let (lo, hi) = linear_pair();
        let obj = AttackObjective::CqrScore { net_lo: &lo, net_hi: &hi, target: 2.0 };
        let mut rng_x = 1234_u64;
        for i in 0..1000 {
            rng_x = rng_x.wrapping_mul(6364136223846793005).wrapping_add(1);
            let x = vec![
                ((rng_x >> 33) as f64 / (1u64 << 31) as f64) - 1.0,
                ((rng_x >> 12) as f64 % 1000.0) / 500.0 - 1.0,
            ];
            let norm = if i % 2 == 0 { LpNorm::LInf } else { LpNorm::L2 };
            let mut c = cfg(norm, 0.3);
            c.random_start = true;
            c.seed = i;
            c.steps = 5;
            let adv = pgd(&obj, &x, &c).unwrap();
            let delta: Vec<f64> = adv.iter().zip(&x).map(|(a, b)| a - b).collect();
            assert!(norm.norm(&delta) <= 0.3 + 1e-9);
        }
    }
}
