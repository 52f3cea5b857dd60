//! Desk-scale neural transducer lab.
//!
//! This crate implements RNNT and HAT transducers with full analytic
//! backpropagation, the factorized CTC family of auxiliary objectives
//! (vanilla CTC, FCTC, and the parameter-free internal acoustic model),
//! internal language model estimation, ALSD/TSD beam search with HAT-,
//! CTC- and dual blank thresholding, and a benchmark harness that reports
//! decoding efficiency as non-blank percentage (NBP), joint-call ratio
//! (JCR) and real-time factor (RTF).
//!
//! Everything runs on synthetic template corpora so training and decoding
//! claims are testable on a laptop. All arithmetic is `f64` and every
//! operation is deterministic given its seed.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release --example generate_dataset
//! cargo run --release --example train_hat_iam
//! cargo run --release --example decode_thresholded
//! cargo run --release --example sweep_curves
//! cargo run --release --example benchmark_rtf
//! cargo run --release --example iam_ilm_views
//! ```
//!
//! or with the `trlab` binary (`gen-data`, `train`, `decode`, `bench`,
//! `sweep` subcommands).

pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numkit;

pub use error::{Error, Result};
