//! Reverse-mode gradients through the fixed layer vocabulary.
//!
//! Gradients are computed by a direct backward walk over the layer list;
//! there is no tape because the architecture is a straight chain. The ReLU
//! subgradient at 0 is fixed to 0 and the leaky variant uses its negative
//! slope there, so attack and training behaviour is reproducible.

use crate::tensor::{dot, softmax, Layer, Matrix, Network, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("objective incompatible with network: {0}")]
    Objective(String),
}

/// Scalar objective applied to a network's output.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `-ln p[target]`; requires a softmax output layer.
    CrossEntropy { target: usize },
    /// Quantile (pinball) loss at level `tau` against a scalar target.
    Pinball { target: f64, tau: f64 },
    /// Reads one raw output coordinate; rejects softmax networks.
    Logit { index: usize },
    /// `0.5 * ||out - target||^2`.
    SquaredError { target: Vec<f64> },
    /// Sum of all outputs; handy as a probe.
    SumOutputs,
}

impl Objective {
    fn check(&self, net: &Network) -> Result<(), AutodiffError> {
        match self {
            Objective::CrossEntropy { target } => {
                if !net.ends_with_softmax() {
                    return Err(AutodiffError::Objective(
                        "cross-entropy requires a softmax output layer".into(),
                    ));
                }
                if *target >= net.output_dim() {
                    return Err(AutodiffError::Objective(format!(
                        "target label {target} out of range for {} outputs",
                        net.output_dim()
                    )));
                }
            }
            Objective::Logit { index } => {
                if net.ends_with_softmax() {
                    return Err(AutodiffError::Objective(
                        "logit objective reads pre-softmax values; network ends with softmax"
                            .into(),
                    ));
                }
                if *index >= net.output_dim() {
                    return Err(AutodiffError::Objective(format!(
                        "logit index {index} out of range for {} outputs",
                        net.output_dim()
                    )));
                }
            }
            Objective::Pinball { tau, .. } => {
                if net.output_dim() != 1 {
                    return Err(AutodiffError::Objective(
                        "pinball loss needs a scalar output".into(),
                    ));
                }
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(AutodiffError::Objective(format!(
                        "pinball level {tau} outside (0,1)"
                    )));
                }
            }
            Objective::SquaredError { target } => {
                if target.len() != net.output_dim() {
                    return Err(AutodiffError::Objective(format!(
                        "squared-error target has {} entries, output has {}",
                        target.len(),
                        net.output_dim()
                    )));
                }
            }
            Objective::SumOutputs => {}
        }
        Ok(())
    }

    /// Loss value given the network output.
    pub fn value(&self, output: &[f64]) -> f64 {
        match self {
            Objective::CrossEntropy { target } => -output[*target].ln(),
            Objective::Pinball { target, tau } => pinball_loss(output[0], *target, *tau),
            Objective::Logit { index } => output[*index],
            Objective::SquaredError { target } => {
                0.5 * output
                    .iter()
                    .zip(target)
                    .map(|(o, t)| (o - t) * (o - t))
                    .sum::<f64>()
            }
            Objective::SumOutputs => output.iter().sum(),
        }
    }

    /// d(loss)/d(output). For cross-entropy the softmax layer is fused and
    /// the gradient is taken with respect to the logits instead.
    fn output_grad(&self, output: &[f64]) -> Vec<f64> {
        match self {
            Objective::CrossEntropy { target } => {
                // Fused softmax + cross-entropy: p - onehot, w.r.t. logits.
                let mut g = output.to_vec();
                g[*target] -= 1.0;
                g
            }
            Objective::Pinball { target, tau } => {
                vec![pinball_grad(output[0], *target, *tau)]
            }
            Objective::Logit { index } => {
                let mut g = vec![0.0; output.len()];
                g[*index] = 1.0;
                g
            }
            Objective::SquaredError { target } => {
                output.iter().zip(target).map(|(o, t)| o - t).collect()
            }
            Objective::SumOutputs => vec![1.0; output.len()],
        }
    }
}

/// Pinball (quantile) loss at level `tau`.
pub fn pinball_loss(pred: f64, target: f64, tau: f64) -> f64 {
    if target >= pred {
        tau * (target - pred)
    } else {
        (1.0 - tau) * (pred - target)
    }
}

/// Subgradient of the pinball loss in `pred`; the kink at `pred == target`
/// takes the tau-side value.
pub fn pinball_grad(pred: f64, target: f64, tau: f64) -> f64 {
    if target >= pred {
        -tau
    } else {
        1.0 - tau
    }
}

/// Per-affine-layer parameter gradients, parallel to the network's layers.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<Option<AffineGrad>>,
}

#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    fn zeros_like(net: &Network) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Affine { weight, bias } => Some(AffineGrad {
                    weight: Matrix::zeros(weight.rows(), weight.cols()),
                    bias: vec![0.0; bias.len()],
                }),
                _ => None,
            })
            .collect();
        ParamGrads { layers }
    }

    fn scale(&mut self, s: f64) {
        for grad in self.layers.iter_mut().flatten() {
            grad.weight.scale(s);
            for b in &mut grad.bias {
                *b *= s;
            }
        }
    }
}

/// Objective value and its gradient with respect to the input vector.
pub fn value_and_grad_input(
    net: &Network,
    x: &[f64],
    obj: &Objective,
) -> Result<(f64, Vec<f64>), AutodiffError> {
    obj.check(net)?;
    let trace = net.forward_trace(x)?;
    let value = obj.value(&trace.output);
    let (mut delta, walk) = seed_backward(net, obj, &trace.output);
    for idx in (0..walk).rev() {
        delta = backward_layer(&net.layers()[idx], &trace.inputs[idx], &delta, None);
    }
    Ok((value, delta))
}

/// Gradient of the objective with respect to the input.
pub fn grad_input(net: &Network, x: &[f64], obj: &Objective) -> Result<Vec<f64>, AutodiffError> {
    value_and_grad_input(net, x, obj).map(|(_, g)| g)
}

/// Mean objective value and mean parameter gradients over a batch.
/// Each sample pairs an input with its own objective (targets differ).
pub fn grad_params(
    net: &Network,
    batch: &[(Vec<f64>, Objective)],
) -> Result<(f64, ParamGrads), AutodiffError> {
    if batch.is_empty() {
        return Err(AutodiffError::Objective("empty batch".into()));
    }
    let mut grads = ParamGrads::zeros_like(net);
    let mut total = 0.0;
    for (x, obj) in batch {
        obj.check(net)?;
        let trace = net.forward_trace(x)?;
        total += obj.value(&trace.output);
        let (mut delta, walk) = seed_backward(net, obj, &trace.output);
        for idx in (0..walk).rev() {
            delta = backward_layer(
                &net.layers()[idx],
                &trace.inputs[idx],
                &delta,
                Some(&mut grads.layers[idx]),
            );
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Initial backward error signal plus the number of layers to walk back
/// through. Cross-entropy fuses the trailing softmax into its gradient
/// (p - onehot w.r.t. the logits), so that softmax layer is skipped.
fn seed_backward(net: &Network, obj: &Objective, output: &[f64]) -> (Vec<f64>, usize) {
    let n = net.layers().len();
    match obj {
        Objective::CrossEntropy { .. } => (obj.output_grad(output), n - 1),
        _ => (obj.output_grad(output), n),
    }
}

fn backward_layer(
    layer: &Layer,
    input: &[f64],
    delta: &[f64],
    grad_slot: Option<&mut Option<AffineGrad>>,
) -> Vec<f64> {
    match layer {
        Layer::Affine { weight, .. } => {
            if let Some(slot) = grad_slot {
                let grad = slot.as_mut().expect("affine layer has a gradient slot");
                grad.weight.add_outer(delta, input, 1.0);
                for (b, d) in grad.bias.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            weight.matvec_t(delta)
        }
        Layer::Relu => input
            .iter()
            .zip(delta)
            .map(|(&z, &d)| if z > 0.0 { d } else { 0.0 })
            .collect(),
        Layer::LeakyRelu { slope } => input
            .iter()
            .zip(delta)
            .map(|(&z, &d)| if z > 0.0 { d } else { slope * d })
            .collect(),
        Layer::Softmax => {
            // Jacobian-vector product: p * (delta - <delta, p>).
            let p = softmax(input);
            let inner = dot(delta, &p);
            p.iter().zip(delta).map(|(&pi, &d)| pi * (d - inner)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TaskKind;

    fn net(layers: Vec<Layer>, input_dim: usize) -> Network {
        Network::new(input_dim, layers, TaskKind::Classifier).unwrap()
    }

    fn affine(rows: &[Vec<f64>], bias: &[f64]) -> Layer {
        Layer::Affine {
            weight: Matrix::from_rows(rows).unwrap(),
            bias: bias.to_vec(),
        }
    }

    #[test]
    fn linear_logit_gradient_is_the_weight_row() {
        let n = net(vec![affine(&[vec![2.0, -3.0]], &[0.5])], 2);
        let g = grad_input(&n, &[1.0, 1.0], &Objective::Logit { index: 0 }).unwrap();
        assert_eq!(g, vec![2.0, -3.0]);
    }

    #[test]
    fn relu_subgradient_zero_on_negative_side() {
        let n = net(vec![Layer::Relu], 2);
        let g = grad_input(&n, &[-1.0, 2.0], &Objective::SumOutputs).unwrap();
        assert_eq!(g, vec![0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let n = net(vec![Layer::Relu], 1);
        let g = grad_input(&n, &[0.0], &Objective::SumOutputs).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn logit_on_softmax_network_is_a_configuration_error() {
        let n = net(vec![affine(&[vec![1.0], vec![-1.0]], &[0.0, 0.0]), Layer::Softmax], 1);
        let err = grad_input(&n, &[1.0], &Objective::Logit { index: 0 }).unwrap_err();
        assert!(matches!(err, AutodiffError::Objective(_)));
    }

    #[test]
    fn squared_error_param_gradient_matches_least_squares() {
        // f(x) = w x + b, L = 0.5 (f - t)^2; dL/dw = (f - t) x, dL/db = f - t.
        let n = net(vec![affine(&[vec![2.0, 1.0]], &[0.5])], 2);
        let x = vec![1.0, -2.0];
        let t = vec![1.0];
        let out = n.forward(&x).unwrap()[0];
        let resid = out - t[0];
        let (_, grads) = grad_params(
            &n,
            &[(x.clone(), Objective::SquaredError { target: t })],
        )
        .unwrap();
        let g = grads.layers[0].as_ref().unwrap();
        assert!((g.weight.get(0, 0) - resid * x[0]).abs() < 1e-12);
        assert!((g.weight.get(0, 1) - resid * x[1]).abs() < 1e-12);
        assert!((g.bias[0] - resid).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_bias_gradient_on_zero_network() {
        // Zero weights, uniform softmax output: bias gradient = softmax(0) - onehot.
        let n = net(
            vec![affine(&[vec![0.0], vec![0.0], vec![0.0]], &[0.0, 0.0, 0.0]), Layer::Softmax],
            1,
        );
        let (_, grads) = grad_params(
            &n,
            &[(vec![0.7], Objective::CrossEntropy { target: 0 })],
        )
        .unwrap();
        let g = grads.layers[0].as_ref().unwrap();
        let third = 1.0 / 3.0;
        assert!((g.bias[0] - (third - 1.0)).abs() < 1e-12);
        assert!((g.bias[1] - third).abs() < 1e-12);
        assert!((g.bias[2] - third).abs() < 1e-12);
    }

    #[test]
    fn pinball_kink_takes_tau_side() {
        assert_eq!(pinball_grad(1.0, 1.0, 0.3), -0.3);
        assert_eq!(pinball_grad(0.5, 1.0, 0.3), -0.3);
        assert_eq!(pinball_grad(1.5, 1.0, 0.3), 0.7);
    }

    #[test]
    fn pinball_at_half_is_scaled_absolute_error() {
        for (pred, y) in [(0.0, 1.0), (2.5, 1.0), (1.0, 1.0), (-3.0, 4.0)] {
            assert!((pinball_loss(pred, y, 0.5) - 0.5 * (pred - y).abs()).abs() < 1e-15);
        }
    }
}
