//! Interval bound propagation.

use super::{PerturbationBall, PreActivationBounds};
use crate::tensor::Layer;

/// Propagate the ball through the layers, returning the output box and the
/// pre-activation intervals seen by each activation layer.
///
/// The caller guarantees the layer list is softmax-free and matches the
/// ball dimension. A leading affine layer consumes the lp ball exactly via
/// the dual norm; a non-affine first layer falls back to the bounding box
/// of the ball (sound for p in {1, 2, inf} since |delta_i| <= ||delta||_p).
pub(super) fn propagate(
    layers: &[Layer],
    ball: &PerturbationBall,
) -> (Vec<f64>, Vec<f64>, PreActivationBounds) {
    let mut per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; layers.len()];

    let (mut lower, mut upper, start) = match layers.first() {
        Some(Layer::Affine { weight, bias }) => {
            // Center through the same matvec as forward evaluation, so a
            // degenerate ball reproduces forward outputs bit for bit.
            let mut center = weight.matvec(&ball.center);
            for (c, b) in center.iter_mut().zip(bias) {
                *c += b;
            }
            let mut lo = Vec::with_capacity(center.len());
            let mut hi = Vec::with_capacity(center.len());
            for (i, &c) in center.iter().enumerate() {
                let hw = ball.radius * ball.norm.dual_norm(weight.row(i));
                lo.push(c - hw);
                hi.push(c + hw);
            }
            (lo, hi, 1)
        }
        _ => {
            let lo: Vec<f64> = ball.center.iter().map(|&c| c - ball.radius).collect();
            let hi: Vec<f64> = ball.center.iter().map(|&c| c + ball.radius).collect();
            (lo, hi, 0)
        }
    };

    for (idx, layer) in layers.iter().enumerate().skip(start) {
        match layer {
            Layer::Affine { weight, bias } => {
                let center: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
                let radius: Vec<f64> = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (u - l)).collect();
                let mut mid = weight.matvec(&center);
                for (m, b) in mid.iter_mut().zip(bias) {
                    *m += b;
                }
                let spread = weight.abs_matvec(&radius);
                lower = mid.iter().zip(&spread).map(|(m, s)| m - s).collect();
                upper = mid.iter().zip(&spread).map(|(m, s)| m + s).collect();
            }
            Layer::Relu => {
                per_layer[idx] = Some((lower.clone(), upper.clone()));
                lower = lower.iter().map(|&l| l.max(0.0)).collect();
                upper = upper.iter().map(|&u| u.max(0.0)).collect();
            }
            Layer::LeakyRelu { slope } => {
                per_layer[idx] = Some((lower.clone(), upper.clone()));
                let f = |z: f64| if z > 0.0 { z } else { slope * z };
                lower = lower.iter().map(|&l| f(l)).collect();
                upper = upper.iter().map(|&u| f(u)).collect();
            }
            Layer::Softmax => unreachable!("softmax rejected before propagation"),
        }
    }

    (lower, upper, PreActivationBounds { per_layer })
}
