//! Numerical toolkit for studying how self-supervised pretraining length
//! affects calibrated confidence and selective prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: dense matrices, column statistics, seeded streams.
//! - [`losses`]: SiCoVa and batch-all triplet objectives with analytic gradients.
//! - [`calibration`]: temperature scaling, NLL and ECE.
//! - [`selective`]: abstention, coverage, selective metrics, risk-coverage sweeps.
//! - [`protocol`]: the per-checkpoint calibrate / sweep / select / rank procedure.
//! - [`ingest`]: logits, labels, manifests, checkpoint weight files.
//! - [`report`]: summary tables and SVG risk-coverage plots.
//! - [`synth`]: synthetic pretrain → fine-tune → evaluate pipeline.

pub mod calibration;
pub mod error;
pub mod ingest;
pub mod losses;
pub mod numeric;
mod parallel;
pub mod protocol;
pub mod report;
pub mod selective;
pub mod synth;

pub use error::{Error, Result};
pub use numeric::{Matrix, Rng};
