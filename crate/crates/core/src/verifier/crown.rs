//! Backward linear bound propagation.
//!
//! Each output is bracketed by two affine functions of the input, obtained
//! by walking the layers backwards and substituting linear relaxations for
//! the activations. Unstable ReLU neurons use the chord as the upper line
//! and a slope-adaptive lower line (1 if `u >= |l|`, else 0); the leaky
//! variant uses the same construction with its negative slope in place of
//! 0. The final affine forms are concretized over the lp ball via the dual
//! norm.

use super::{PerturbationBall, PreActivationBounds};
use crate::tensor::{dot, Layer, Matrix};

/// Linear lower/upper bounding functions `A x + b` of the network output in
/// terms of some intermediate layer's input.
struct LinearBounds {
    lower_a: Matrix,
    lower_b: Vec<f64>,
    upper_a: Matrix,
    upper_b: Vec<f64>,
}

/// One neuron's relaxation: output bracketed by `slope * z + intercept`.
#[derive(Clone, Copy)]
struct Line {
    slope: f64,
    intercept: f64,
}

fn relu_relaxation(l: f64, u: f64) -> (Line, Line) {
    if u <= 0.0 {
        let z = Line { slope: 0.0, intercept: 0.0 };
        (z, z)
    } else if l >= 0.0 {
        let id = Line { slope: 1.0, intercept: 0.0 };
        (id, id)
    } else {
        let s = u / (u - l);
        let upper = Line { slope: s, intercept: -l * u / (u - l) };
        let lower_slope = if u >= -l { 1.0 } else { 0.0 };
        (Line { slope: lower_slope, intercept: 0.0 }, upper)
    }
}

fn leaky_relaxation(l: f64, u: f64, a: f64) -> (Line, Line) {
    if u <= 0.0 {
        let neg = Line { slope: a, intercept: 0.0 };
        (neg, neg)
    } else if l >= 0.0 {
        let id = Line { slope: 1.0, intercept: 0.0 };
        (id, id)
    } else {
        // Chord through (l, a*l) and (u, u); the function is convex, so the
        // chord is the upper line and any origin line with slope in [a, 1]
        // supports it from below.
        let s = (u - a * l) / (u - l);
        let upper = Line { slope: s, intercept: a * l - s * l };
        let lower_slope = if u >= -l { 1.0 } else { a };
        (Line { slope: lower_slope, intercept: 0.0 }, upper)
    }
}

/// Substitute an activation layer's relaxation into the current bounds.
/// For the upper bound, a positive coefficient picks the neuron's upper
/// line and a negative one its lower line; the lower bound mirrors this.
fn substitute_activation(bounds: &mut LinearBounds, lines: &[(Line, Line)]) {
    let rows = bounds.upper_a.rows();
    let cols = bounds.upper_a.cols();
    debug_assert_eq!(cols, lines.len());
    for i in 0..rows {
        let row = bounds.upper_a.row_mut(i);
        for (j, (lower, upper)) in lines.iter().enumerate() {
            let c = row[j];
            let line = if c >= 0.0 { upper } else { lower };
            row[j] = c * line.slope;
            bounds.upper_b[i] += c * line.intercept;
        }
        let row = bounds.lower_a.row_mut(i);
        for (j, (lower, upper)) in lines.iter().enumerate() {
            let c = row[j];
            let line = if c >= 0.0 { lower } else { upper };
            row[j] = c * line.slope;
            bounds.lower_b[i] += c * line.intercept;
        }
    }
}

/// Substitute `z_out = W z_in + bias` into the bounds: `A <- A W`,
/// `b <- b + A bias`. Exact, so both sides use the same update.
fn substitute_affine(bounds: &mut LinearBounds, weight: &Matrix, bias: &[f64]) {
    for (b, row) in bounds.upper_b.iter_mut().zip(bounds.upper_a.iter_rows()) {
        *b += dot(row, bias);
    }
    for (b, row) in bounds.lower_b.iter_mut().zip(bounds.lower_a.iter_rows()) {
        *b += dot(row, bias);
    }
    bounds.upper_a = bounds.upper_a.matmul(weight);
    bounds.lower_a = bounds.lower_a.matmul(weight);
}

pub(super) fn backward_bounds(
    layers: &[Layer],
    ball: &PerturbationBall,
    pre: &PreActivationBounds,
) -> (Vec<f64>, Vec<f64>) {
    let out_dim = output_dim(layers, ball.dim());
    let mut bounds = LinearBounds {
        lower_a: Matrix::identity(out_dim),
        lower_b: vec![0.0; out_dim],
        upper_a: Matrix::identity(out_dim),
        upper_b: vec![0.0; out_dim],
    };

    for (idx, layer) in layers.iter().enumerate().rev() {
        match layer {
            Layer::Affine { weight, bias } => substitute_affine(&mut bounds, weight, bias),
            Layer::Relu => {
                let (lo, hi) = pre.per_layer[idx]
                    .as_ref()
                    .expect("activation layer has pre-activation bounds");
                let lines: Vec<_> = lo
                    .iter()
                    .zip(hi)
                    .map(|(&l, &u)| relu_relaxation(l, u))
                    .collect();
                substitute_activation(&mut bounds, &lines);
            }
            Layer::LeakyRelu { slope } => {
                let (lo, hi) = pre.per_layer[idx]
                    .as_ref()
                    .expect("activation layer has pre-activation bounds");
                let lines: Vec<_> = lo
                    .iter()
                    .zip(hi)
                    .map(|(&l, &u)| leaky_relaxation(l, u, *slope))
                    .collect();
                substitute_activation(&mut bounds, &lines);
            }
            Layer::Softmax => unreachable!("softmax rejected before propagation"),
        }
    }

    // Concretize the affine forms over the ball via the dual norm.
    let n = bounds.upper_a.rows();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for i in 0..n {
        let row = bounds.upper_a.row(i);
        upper.push(dot(row, &ball.center) + bounds.upper_b[i] + ball.radius * ball.norm.dual_norm(row));
        let row = bounds.lower_a.row(i);
        lower.push(dot(row, &ball.center) + bounds.lower_b[i] - ball.radius * ball.norm.dual_norm(row));
    }
    (lower, upper)
}

fn output_dim(layers: &[Layer], input_dim: usize) -> usize {
    let mut dim = input_dim;
    for layer in layers {
        if let Layer::Affine { weight, .. } = layer {
            dim = weight.rows();
        }
    }
    dim
}
