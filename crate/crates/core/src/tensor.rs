//! Dense matrices, the layer vocabulary, and forward evaluation.
//!
//! Networks are immutable once constructed: every structural invariant
//! (dimension chaining, finite weights, softmax only in final position)
//! is checked in [`Network::new`], so downstream code can assume a valid
//! architecture and only has to validate the runtime input vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from tensor arithmetic and network evaluation.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("layer {layer}: expected {expected} inputs, got {got}")]
    Shape {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("input has dimension {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid network: {0}")]
    Config(String),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n_cols {
                return Err(TensorError::Config(format!(
                    "ragged matrix: row {i} has {} entries, expected {n_cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `W x`. Accumulates each row left to right so results are reproducible.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `W^T y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.iter_rows().zip(y) {
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * yi;
            }
        }
        out
    }

    /// `|W| x`, used by interval propagation.
    pub fn abs_matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows()
            .map(|row| row.iter().zip(x).map(|(w, v)| w.abs() * v).sum())
            .collect()
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Rank-one update `self += scale * u v^T`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let row = self.row_mut(i);
            for (r, &vj) in row.iter_mut().zip(v) {
                *r += scale * ui * vj;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// One layer of the fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine { weight: Matrix, bias: Vec<f64> },
    Relu,
    LeakyRelu { slope: f64 },
    Softmax,
}

impl Layer {
    pub fn is_softmax(&self) -> bool {
        matches!(self, Layer::Softmax)
    }
}

/// What the network predicts; carried through model files and the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classifier,
    Quantile { tau: f64 },
}

/// A validated feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    output_dim: usize,
    layers: Vec<Layer>,
    task: TaskKind,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>, task: TaskKind) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Config("network has no layers".into()));
        }
        if input_dim == 0 {
            return Err(TensorError::Config("input dimension must be positive".into()));
        }
        let mut dim = input_dim;
        let last = layers.len() - 1;
        for (idx, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Affine { weight, bias } => {
                    if weight.cols() != dim {
                        return Err(TensorError::Shape {
                            layer: idx,
                            expected: dim,
                            got: weight.cols(),
                        });
                    }
                    if bias.len() != weight.rows() {
                        return Err(TensorError::Config(format!(
                            "layer {idx}: bias length {} does not match {} rows",
                            bias.len(),
                            weight.rows()
                        )));
                    }
                    if !weight.is_finite() || !bias.iter().all(|v| v.is_finite()) {
                        return Err(TensorError::NonFinite {
                            context: format!("layer {idx} parameters"),
                        });
                    }
                    dim = weight.rows();
                }
                Layer::LeakyRelu { slope } => {
                    if !(*slope > 0.0 && *slope < 1.0) {
                        return Err(TensorError::Config(format!(
                            "layer {idx}: leaky slope {slope} outside (0,1)"
                        )));
                    }
                }
                Layer::Relu => {}
                Layer::Softmax => {
                    if idx != last {
                        return Err(TensorError::Config(format!(
                            "layer {idx}: softmax is only allowed as the final layer"
                        )));
                    }
                }
            }
        }
        Ok(Network {
            input_dim,
            output_dim: dim,
            layers,
            task,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn ends_with_softmax(&self) -> bool {
        self.layers.last().is_some_and(Layer::is_softmax)
    }

    /// Layers up to (excluding) a trailing softmax: the part verifiers see.
    pub fn logit_layers(&self) -> &[Layer] {
        if self.ends_with_softmax() {
            &self.layers[..self.layers.len() - 1]
        } else {
            &self.layers
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<(), TensorError> {
        if x.len() != self.input_dim {
            return Err(TensorError::InputDim {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: "input vector".into(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        self.check_input(x)?;
        let mut v = x.to_vec();
        for layer in &self.layers {
            v = apply_layer(layer, &v);
        }
        Ok(v)
    }

    /// Forward pass that keeps each layer's input, for reverse-mode gradients.
    pub(crate) fn forward_trace(&self, x: &[f64]) -> Result<Trace, TensorError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut v = x.to_vec();
        for layer in &self.layers {
            inputs.push(v.clone());
            v = apply_layer(layer, &v);
        }
        Ok(Trace { inputs, output: v })
    }
}

pub(crate) struct Trace {
    /// `inputs[i]` is the vector fed to layer `i`.
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

pub(crate) fn apply_layer(layer: &Layer, v: &[f64]) -> Vec<f64> {
    match layer {
        Layer::Affine { weight, bias } => {
            let mut out = weight.matvec(v);
            for (o, b) in out.iter_mut().zip(bias) {
                *o += b;
            }
            out
        }
        Layer::Relu => v.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect(),
        Layer::LeakyRelu { slope } => v
            .iter()
            .map(|&z| if z > 0.0 { z } else { slope * z })
            .collect(),
        Layer::Softmax => softmax(v),
    }
}

/// Max-shifted softmax; summation runs in index order so outputs are
/// bit-reproducible.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(rows: &[Vec<f64>], bias: &[f64]) -> Layer {
        Layer::Affine {
            weight: Matrix::from_rows(rows).unwrap(),
            bias: bias.to_vec(),
        }
    }

    pub(crate) fn single_affine(rows: &[Vec<f64>], bias: &[f64]) -> Network {
        let w = Matrix::from_rows(rows).unwrap();
        let d = w.cols();
        Network::new(
            d,
            vec![Layer::Affine {
                weight: w,
                bias: bias.to_vec(),
            }],
            TaskKind::Classifier,
        )
        .unwrap()
    }

    #[test]
    fn affine_forward_by_hand() {
        let net = single_affine(&[vec![1.0, -1.0]], &[0.0]);
        assert_eq!(net.forward(&[3.0, 1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn relu_forward() {
        let net = Network::new(2, vec![Layer::Relu], TaskKind::Classifier).unwrap();
        assert_eq!(net.forward(&[-2.0, 5.0]).unwrap(), vec![0.0, 5.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let net = Network::new(2, vec![Layer::Softmax], TaskKind::Classifier).unwrap();
        let p = net.forward(&[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::new(
            2,
            vec![
                affine(&[vec![0.3, -1.2], vec![0.7, 0.1], vec![-0.5, 0.9]], &[0.1, -0.2, 0.0]),
                Layer::Relu,
                affine(&[vec![1.0, 2.0, -1.0]], &[0.25]),
            ],
            TaskKind::Quantile { tau: 0.5 },
        )
        .unwrap();
        let a = net.forward(&[0.123, -0.456]).unwrap();
        let b = net.forward(&[0.123, -0.456]).unwrap();
        assert_eq!(a, b, "identical inputs must produce bit-identical outputs");
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let err = Network::new(
            2,
            vec![Layer::Affine {
                weight: w,
                bias: vec![0.0, 0.0],
            }],
            TaskKind::Classifier,
        )
        .unwrap_err();
        match err {
            TensorError::Shape { layer, expected, got } => {
                assert_eq!((layer, expected, got), (0, 2, 3));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = single_affine(&[vec![1.0, 0.0]], &[0.0]);
        let err = net.forward(&[f64::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn softmax_must_be_last() {
        let err = Network::new(2, vec![Layer::Softmax, Layer::Relu], TaskKind::Classifier)
            .unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn leaky_slope_validated() {
        let err = Network::new(
            2,
            vec![Layer::LeakyRelu { slope: 1.5 }],
            TaskKind::Classifier,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Config(_)));
    }

    #[test]
    fn empty_network_rejected() {
        assert!(Network::new(2, vec![], TaskKind::Classifier).is_err());
    }
}
