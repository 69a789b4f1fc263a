//! Simulator and benchmark suite for adaptive Bayesian quantum phase estimation.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: circuit outcome probabilities, binomial likelihoods, the
//!   single-peak variance and the noise-optimal circuit.
//! - [`posterior`]: a log-space grid posterior on the circle with Bayesian
//!   updates, estimators, confidence integrals and loss prediction.
//! - [`adaptive`]: the adaptive estimation loop that deepens circuits once
//!   the posterior is confident enough.
//! - [`baselines`]: textbook QPEA, non-adaptive doubling, the classical
//!   strategy, reference limits and the asymptotic loss bound.
//! - [`harness`]: deterministic Monte Carlo sweeps, aggregation and CSV I/O.
//! - [`plot`]: a small SVG emitter for log-log error plots.

pub mod adaptive;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod plot;
pub mod posterior;

pub use adaptive::{run, AlgorithmConfig, AlgorithmTrace, Decision, Estimator, StepRecord};
pub use error::{Error, Result};
pub use model::{Circuit, MeasurementRecord, NoiseModel};
pub use posterior::{CircularInterval, GridPosterior, LossKind, RefiningPosterior};
