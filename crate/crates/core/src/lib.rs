//! Beamspace MIMO analog beam selection toolkit.
//!
//! The crate covers the full pipeline of a beam-selection study on clustered
//! THz channels:
//!
//! * [`channel`] — synthetic clustered channel generation and the unitary
//!   beamspace transform;
//! * [`beam_select`] — exhaustive (oracle) and greedy beam selection, the
//!   SVD-based digital stage, spectral-efficiency evaluation, and a fully
//!   digital benchmark;
//! * [`dataset`] — per-beam labeled dataset construction, feature
//!   normalization, Gaussian mixture summaries, and image embedding for
//!   convolutional classifiers;
//! * [`neuralnet`] — a small inception-style CNN with swappable activations
//!   and optimizers, trained from scratch in pure Rust;
//! * [`ensemble`] — a boosted committee of CNN weak learners;
//! * [`baselines`] — k-NN, linear SVM, and MLP reference classifiers;
//! * [`harness`] — experiment configuration, CLI commands, CSV/SVG reporting.
//!
//! Everything is deterministic given the seeds in the experiment
//! configuration: repeated runs produce byte-identical artifacts.

pub mod baselines;
pub mod beam_select;
pub mod channel;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod neuralnet;
pub mod util;

pub use error::{Error, Result};
