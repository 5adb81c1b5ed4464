//! Fusion learning over quantitative factors and news embeddings.
//!
//! The crate covers the whole experimental loop:
//!
//! - [`data`]: instances, panel datasets, the MFNR binary format and CSV ingestion.
//! - [`synth`]: a seeded panel generator with regime-dependent news relevance.
//! - [`nn`]: dense layers with exact reverse-mode gradients, dropout, softmax, KL,
//!   Adam/SGD with decoupled weight decay and a linear learning-rate schedule.
//! - [`predictors`]: the six single-head predictors (two single-modal baselines,
//!   FININ and three fusion methods).
//! - [`mixture`]: the gated two-component mixture with conventional and
//!   decoupled objectives.
//! - [`train`]: the training driver, logs and checkpoints.
//! - [`eval`]: MAPE, IC, decile analysis and portfolio backtests.
//! - [`varlab`]: stochastic-gradient variance diagnostics for the mixture.

pub mod data;
pub mod eval;
pub mod mixture;
pub mod nn;
pub mod predictors;
pub mod rng;
pub mod synth;
pub mod train;
pub mod varlab;

pub use data::{CrossSection, Instance, PanelDataset, Split};
pub use mixture::MixtureModel;
pub use predictors::{Predictor, PredictorKind, PredictorSpec};
