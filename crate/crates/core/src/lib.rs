//! Conformal prediction with verified robustness to lp-bounded input
//! perturbations.
//!
//! Split conformal prediction promises `1 - alpha` coverage when
//! calibration and test data are exchangeable; an adversary perturbing test
//! inputs breaks that promise. This crate restores it by combining the
//! conformal machinery with sound neural-network output bounds over the
//! perturbation ball, in two flavors:
//!
//! * **robust inference** — calibrate as usual, score each candidate output
//!   by its best case over the ball at test time;
//! * **robust calibration** — inflate the critical value once from
//!   worst-case calibration scores, keep test-time scoring unchanged.
//!
//! Both guarantee coverage for any perturbation within the configured
//! ball, for the l1, l2, and linf norms, on classification (softmax
//! classifiers) and regression (conformalized quantile regression).
//!
//! The supporting cast: a small dense-network stack with reverse-mode
//! gradients ([`tensor`], [`autodiff`]), interval and backward
//! linear-relaxation verifiers ([`verifier`]), FGSM/PGD attacks
//! ([`attacks`]), SGD training ([`trainer`]), synthetic data and split
//! management ([`data`]), and a deterministic experiment harness with CSV
//! and JSON reports ([`harness`]).
//!
//! Data-parallel loops run on rayon under the default `parallel` feature;
//! disabling it degrades every parallel map to a sequential loop with
//! identical results.

pub mod attacks;
pub mod autodiff;
pub mod conformal;
pub mod data;
pub mod harness;
pub mod model_io;
pub mod parallel;
pub mod seeding;
pub mod tensor;
pub mod trainer;
pub mod verifier;
pub mod vrcp;

pub use conformal::{
    conformal_quantile, cqr_interval, score_class, score_cqr, vanilla_set_class, CriticalValue,
    PredictionInterval, PredictionSet, Region, Threshold,
};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport};
pub use tensor::{Layer, Matrix, Network, TaskKind};
pub use verifier::{
    crown_bounds, ibp_bounds, softmax_bounds, BoundMethod, LpNorm, OutputBounds, PerturbationBall,
};
pub use vrcp::{
    containment_check, vrcp_c_calibrate_class, vrcp_c_calibrate_regress, vrcp_c_set_class,
    vrcp_i_interval_regress, vrcp_i_set_class, ThreatModel,
};
