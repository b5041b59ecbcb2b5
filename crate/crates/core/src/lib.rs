//! Path-signature sequence models for longitudinal stream classification.
//!
//! The crate is organised as a pipeline:
//!
//! - [`tensor`] — dense f64 tensors with a reverse-mode tape
//! - [`signature`] — truncated signature / log-signature transforms
//! - [`prep`] — dataset loading, feature derivation, history windows, splits
//! - [`nn`] — differentiable layers and losses
//! - [`models`] — the signature-window model family and baselines
//! - [`train`] — Adam training loop, metrics, grid search
//! - [`cli`] — the `sigstream` command-line front end

pub mod gradcheck;
pub mod tensor;
