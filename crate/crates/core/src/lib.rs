//! Separation of independent, auto-correlated signal components from noisy
//! multi-channel measurements `d = R M s + n`.
//!
//! The components carry Gaussian priors that are diagonal in the harmonic
//! basis. Inference alternates between a Wiener-filter estimate of the
//! components for fixed mixture `M`, samples from the Gaussian posterior
//! approximation, and a sample-averaged least-squares update of `M`.

pub mod cg;
pub mod error;
pub mod field;
pub mod inference;
pub mod io;
pub mod mixture;
pub mod operators;
pub mod sampler;
pub mod synth;
pub mod wiener;

pub use cg::{CgConfig, CgStats};
pub use error::{Error, Result};
pub use field::{Field, Grid, HarmonicCovariance, HarmonicTransform, MultiField, PowerSpectrum};
pub use inference::{
    epsilon_metric, evaluate, run_inference, run_map, sampled_kl, Evaluation, InferenceConfig, InferenceInputs,
    InferenceMode, InferenceResult, PosteriorState, Schedule, Trace, TraceRecord,
};
pub use mixture::{align_to_reference, mixture_update, normalize_columns, AlignedEstimate, Alignment};
pub use operators::{DataSet, MeasurementModel, MixtureMatrix, NoiseCovariance, PriorCovariance, Response};
pub use sampler::{SampleSeed, SampleSet};
pub use synth::{generate_scenario, GroundTruth, Scenario, ScenarioSpec};
pub use wiener::WienerProblem;
