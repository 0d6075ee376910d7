//! Desk-scale workbench for multi-modal mmWave RSS map prediction.
//!
//! The crate couples a geometric scene simulator and RSS oracle with a
//! small manually differentiated predictor, a physics-guided training
//! objective, collaborative domain adaptation across base stations, and a
//! Monte Carlo check of the sample-complexity bound for physics-restricted
//! hypothesis classes.
//!
//! Module map:
//! - [`scene`]: synthetic scenes, traffic motion, concept shifts
//! - [`channel`]: UMi LoS path loss, LoS testing, RSS map oracle
//! - [`features`]: multi-modal feature blocks and covariate shifts
//! - [`net`]: the predictor with reverse-mode gradients and snapshots
//! - [`loss`]: data, physics and baseline objectives
//! - [`trainer`]: training loop, evaluation, sample-efficiency sweeps
//! - [`adapt`]: feature statistics, W2 similarity, aggregation, adaptation
//! - [`pac`]: finite-class sample-complexity verification
//! - [`dataset`], [`experiment`], [`cli`]: record formats and orchestration

pub mod adapt;
pub mod channel;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod loss;
pub mod net;
pub mod pac;
pub mod scene;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
