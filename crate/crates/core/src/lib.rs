//! Feature-to-classifier co-design for mixed-signal wearable classifiers.
//!
//! The crate covers the whole flow from raw multi-channel recordings to an
//! accuracy-versus-hardware Pareto front:
//!
//! - [`signal`]: dataset ingestion, synthetic data, windowing, normalization,
//!   subject-level folds and software reference features.
//! - [`analog`]: behavioral models of the Max/Min/Mean/Sum extractor circuits.
//! - [`adc`]: bit-accurate SAR converter with an R-2R style DAC.
//! - [`gating`]: stochastic feature gates with a hardware-cost regularizer.
//! - [`mlp`]: one-hidden-layer classifier, training, quantization, evaluation.
//! - [`prune`]: lottery-ticket magnitude pruning with weight rewind.
//! - [`hwcost`]: area, power, latency and energy estimation.
//! - [`codesign`]: the end-to-end pipeline, hyperparameter search and export.
//!
//! All scalars are `f64`. Every stochastic step takes an explicit seed, so a
//! run is fully determined by its configuration.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adc;
pub mod analog;
pub mod codesign;
pub mod error;
pub mod gating;
pub mod hwcost;
pub mod mlp;
pub mod prune;
pub mod rng;
pub mod signal;

pub use error::{Error, ErrorCategory, Result};
