//! Benchmark problems, data ingestion, and evaluation protocol.
//!
//! Two shipped problem families: a coordinate-separable three-player market
//! game with a closed-form equilibrium ([`stackelberg`]) and an adversarial
//! hyperparameter-optimization nest over a tabular regression dataset
//! ([`hyperopt`]). [`data`] handles CSV ingestion and normalization.

pub mod data;
pub mod hyperopt;
pub mod protocol;
pub mod stackelberg;

pub use data::{load_wine, split, Dataset, Split, WineVariant};
pub use hyperopt::{build_hyperopt, HyperoptSpec};
pub use protocol::{
    inference_run, inference_run_from, timing_bench, InferenceConfig, InferenceOutcome, TimingRow,
    REFERENCE_RATIOS,
};
pub use stackelberg::{build_stackelberg, StackelbergSpec};

use ndarray::Array1;

/// Mean squared error `(1/d) ||x - reference||^2` against a known optimum.
pub fn mse_to_reference(x: &Array1<f64>, reference: &Array1<f64>) -> f64 {
    assert_eq!(x.len(), reference.len(), "mse_to_reference: length mismatch");
    let d = x.len().max(1) as f64;
    let diff = x - reference;
    diff.dot(&diff) / d
}
