//! Minibatch SGD with momentum for the small networks the experiments use.
//!
//! Model quality only affects how tight the prediction regions are, never
//! their coverage, so training targets "reasonable" rather than
//! state-of-the-art: no schedules, no regularization beyond weight decay.
//! A fixed seed pins initialization and shuffling, so training is
//! bit-reproducible.

use crate::autodiff::{grad_params, AutodiffError, Objective};
use crate::data::{DataError, Dataset};
use crate::seeding::derive_seed;
use crate::tensor::{Layer, Matrix, Network, TaskKind, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0,1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
    LeakyRelu { a: f64 },
}

/// Hidden-layer widths plus the activation between affine layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
}

impl ArchSpec {
    fn activation_layer(&self) -> Layer {
        match self.activation {
            HiddenActivation::Relu => Layer::Relu,
            HiddenActivation::LeakyRelu { a } => Layer::LeakyRelu { slope: a },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    /// Fraction of training points classified correctly (classifiers only).
    pub train_accuracy: Option<f64>,
}

/// Xavier-uniform initial network with the given layout.
fn init_network(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    activation: &Layer,
    softmax: bool,
    task: TaskKind,
    rng: &mut ChaCha8Rng,
) -> Result<Network, TensorError> {
    let mut layers = Vec::new();
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    for w in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[w], dims[w + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weight = Matrix::zeros(fan_out, fan_in);
        for i in 0..fan_out {
            for j in 0..fan_in {
                weight.set(i, j, rng.random_range(-bound..=bound));
            }
        }
        layers.push(Layer::Affine { weight, bias: vec![0.0; fan_out] });
        if w + 2 < dims.len() {
            layers.push(activation.clone());
        }
    }
    if softmax {
        layers.push(Layer::Softmax);
    }
    Network::new(input_dim, layers, task)
}

struct Sgd {
    velocity: Vec<Option<(Matrix, Vec<f64>)>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(net: &Network, cfg: &TrainConfig) -> Self {
        let velocity = net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Affine { weight, bias } => {
                    Some((Matrix::zeros(weight.rows(), weight.cols()), vec![0.0; bias.len()]))
                }
                _ => None,
            })
            .collect();
        Sgd {
            velocity,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    fn step(&mut self, net: &Network, grads: &crate::autodiff::ParamGrads) -> Network {
        let layers: Vec<Layer> = net
            .layers()
            .iter()
            .enumerate()
            .map(|(idx, layer)| match layer {
                Layer::Affine { weight, bias } => {
                    let grad = grads.layers[idx].as_ref().expect("affine gradient");
                    let (vel_w, vel_b) = self.velocity[idx].as_mut().expect("affine velocity");
                    let mut new_w = weight.clone();
                    for i in 0..weight.rows() {
                        for j in 0..weight.cols() {
                            let g = grad.weight.get(i, j) + self.weight_decay * weight.get(i, j);
                            let v = self.momentum * vel_w.get(i, j) - self.lr * g;
                            vel_w.set(i, j, v);
                            new_w.set(i, j, weight.get(i, j) + v);
                        }
                    }
                    let mut new_b = bias.clone();
                    for (i, b) in new_b.iter_mut().enumerate() {
                        let v = self.momentum * vel_b[i] - self.lr * grad.bias[i];
                        vel_b[i] = v;
                        *b += v;
                    }
                    Layer::Affine { weight: new_w, bias: new_b }
                }
                other => other.clone(),
            })
            .collect();
        Network::new(net.input_dim(), layers, net.task()).expect("update preserves shape")
    }
}

fn run_sgd(
    mut net: Network,
    samples: &[(Vec<f64>, Objective)],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Network, Vec<f64>), TrainError> {
    let mut optimizer = Sgd::new(&net, cfg);
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<f64>, Objective)> = chunk
                .iter()
                .map(|&i| (samples[i].0.clone(), samples[i].1.clone()))
                .collect();
            let (loss, grads) = grad_params(&net, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            net = optimizer.step(&net, &grads);
            epoch_loss += loss;
            batches += 1.0;
        }
        epoch_losses.push(epoch_loss / batches);
    }
    Ok((net, epoch_losses))
}

/// Train a softmax classifier with cross-entropy.
pub fn train_classifier(
    data: &Dataset,
    arch: &ArchSpec,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate()?;
    let (features, labels, n_classes) = data.labels()?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(TrainError::Config(format!("label {bad} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = init_network(
        data.dim(),
        &arch.hidden,
        n_classes,
        &arch.activation_layer(),
        true,
        TaskKind::Classifier,
        &mut rng,
    )?;
    let samples: Vec<(Vec<f64>, Objective)> = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| (x.clone(), Objective::CrossEntropy { target: y }))
        .collect();
    let (net, epoch_losses) = run_sgd(net, &samples, cfg, &mut rng)?;

    let mut correct = 0usize;
    for (x, &y) in features.iter().zip(labels) {
        let probs = net.forward(x)?;
        let pred = argmax(&probs);
        correct += usize::from(pred == y);
    }
    let report = TrainReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        train_accuracy: Some(correct as f64 / labels.len() as f64),
    };
    Ok((net, report))
}

/// Train the low/high quantile pair at levels `alpha/2` and `1 - alpha/2`.
pub fn train_quantile_pair(
    data: &Dataset,
    arch: &ArchSpec,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<((Network, Network), (TrainReport, TrainReport)), TrainError> {
    cfg.validate()?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TrainError::Config(format!("alpha {alpha} outside (0,1)")));
    }
    let tau_lo = alpha / 2.0;
    let tau_hi = 1.0 - alpha / 2.0;
    let lo = train_quantile(data, arch, tau_lo, derive_seed(&[cfg.seed, 0]), cfg)?;
    let hi = train_quantile(data, arch, tau_hi, derive_seed(&[cfg.seed, 1]), cfg)?;
    Ok(((lo.0, hi.0), (lo.1, hi.1)))
}

fn train_quantile(
    data: &Dataset,
    arch: &ArchSpec,
    tau: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(Network, TrainReport), TrainError> {
    let (features, targets) = data.reals()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = init_network(
        data.dim(),
        &arch.hidden,
        1,
        &arch.activation_layer(),
        false,
        TaskKind::Quantile { tau },
        &mut rng,
    )?;
    let samples: Vec<(Vec<f64>, Objective)> = features
        .iter()
        .zip(targets)
        .map(|(x, &y)| (x.clone(), Objective::Pinball { target: y, tau }))
        .collect();
    let (net, epoch_losses) = run_sgd(net, &samples, cfg, &mut rng)?;
    let report = TrainReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        train_accuracy: None,
    };
    Ok((net, report))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_classes, Provenance, Targets};

    fn cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
        }
    }

    fn linear_arch() -> ArchSpec {
        ArchSpec { hidden: vec![], activation: HiddenActivation::Relu }
    }

    #[test]
    fn separable_gaussians_reach_high_accuracy() {
        let ds = gen_gaussian_classes(2, 4, 400, 8.0, 21).unwrap();
        let (net, report) = train_classifier(&ds, &linear_arch(), &cfg(20, 3)).unwrap();
        assert!(report.train_accuracy.unwrap() >= 0.95, "{report:?}");
        // Fresh draw from the same generator family as a held-out check.
        let test = gen_gaussian_classes(2, 4, 200, 8.0, 22).unwrap();
        let (features, labels, _) = test.labels().unwrap();
        let mut correct = 0;
        for (x, &y) in features.iter().zip(labels) {
            correct += usize::from(argmax(&net.forward(x).unwrap()) == y);
        }
        assert!(correct as f64 / labels.len() as f64 >= 0.95);
    }

    #[test]
    fn zero_epochs_returns_the_initialized_network() {
        let ds = gen_gaussian_classes(2, 4, 50, 5.0, 21).unwrap();
        let (a, _) = train_classifier(&ds, &linear_arch(), &cfg(0, 7)).unwrap();
        let (b, _) = train_classifier(&ds, &linear_arch(), &cfg(0, 7)).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_classifier(&ds, &linear_arch(), &cfg(1, 7)).unwrap();
        assert_ne!(a, c, "one epoch must move the weights");
    }

    #[test]
    fn same_seed_same_weights() {
        let ds = gen_gaussian_classes(3, 4, 120, 4.0, 5).unwrap();
        let arch = ArchSpec { hidden: vec![8], activation: HiddenActivation::Relu };
        let (a, _) = train_classifier(&ds, &arch, &cfg(5, 11)).unwrap();
        let (b, _) = train_classifier(&ds, &arch, &cfg(5, 11)).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_classifier(&ds, &arch, &cfg(5, 12)).unwrap();
        assert_ne!(a, c);
    }

    fn uniform_noise_line(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random_range(0.0..=1.0);
            let noise: f64 = rng.random_range(-1.0..=1.0);
            features.push(vec![x, 1.0]);
            ys.push(x + noise);
        }
        Dataset {
            features,
            targets: Targets::Reals(ys),
            provenance: Provenance::Generator { name: "line".into(), seed },
            normalization: None,
        }
    }

    #[test]
    fn quantile_pair_learns_uniform_noise_offsets() {
        // y = x + U(-1,1): the tau-quantile of the noise is 2 tau - 1, so
        // with alpha = 0.1 the pair should sit near x -/+ 0.9.
        let ds = uniform_noise_line(4000, 33);
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 2,
        };
        let ((lo, hi), _) = train_quantile_pair(&ds, &linear_arch(), 0.1, &tc).unwrap();
        let probe = |net: &Network, x: f64| net.forward(&[x, 1.0]).unwrap()[0];
        for x in [0.2, 0.5, 0.8] {
            assert!((probe(&lo, x) - (x - 0.9)).abs() < 0.1, "low quantile at {x}");
            assert!((probe(&hi, x) - (x + 0.9)).abs() < 0.1, "high quantile at {x}");
        }
        // Empirical calibration on held-out data: fraction below the low
        // quantile should be close to alpha/2 (and symmetrically above).
        let held = uniform_noise_line(4000, 34);
        let (features, ys) = held.reals().unwrap();
        let below = features
            .iter()
            .zip(ys)
            .filter(|(x, &y)| y < lo.forward(x).unwrap()[0])
            .count() as f64
            / ys.len() as f64;
        let above = features
            .iter()
            .zip(ys)
            .filter(|(x, &y)| y > hi.forward(x).unwrap()[0])
            .count() as f64
            / ys.len() as f64;
        assert!((below - 0.05).abs() < 0.05, "below fraction {below}");
        assert!((above - 0.05).abs() < 0.05, "above fraction {above}");
    }

    #[test]
    fn pinball_loss_decreases_on_a_convex_instance() {
        let ds = uniform_noise_line(800, 44);
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 800, // full batch: plain gradient descent on a convex loss
            learning_rate: 0.2,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 8,
        };
        let ((_, _), (rep_lo, rep_hi)) = train_quantile_pair(&ds, &linear_arch(), 0.1, &tc).unwrap();
        for rep in [rep_lo, rep_hi] {
            for w in rep.epoch_losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "loss went up: {:?}", rep.epoch_losses);
            }
        }
    }
}
