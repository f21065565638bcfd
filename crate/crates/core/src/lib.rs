//! Detection and relabeling of noisy training labels from the predictive
//! uncertainty of dropout-MLP ensembles.
//!
//! The crate is organised as a pipeline of independent stages:
//!
//! - [`data`]: datasets, CSV/binary formats, synthetic blobs, noise injection
//! - [`nn`]: dropout MLP, synchronized ensemble training, MC-dropout inference
//! - [`uncertainty`]: per-image statistics over a prediction tensor
//! - [`mixfit`]: two-component beta-mixture EM and contamination thresholds
//! - [`detect`]: detected-id sets and detection metrics
//! - [`relabel`]: relabel-epoch selection and label assignment
//! - [`pipeline`]: the iterative detect/relabel loop and its report files
//! - [`cli`]: the `labelsift` command-line front end

pub mod cli;
pub mod data;
pub mod detect;
pub mod error;
pub mod mixfit;
pub mod nn;
pub mod pipeline;
pub mod relabel;
pub mod seed;
pub mod uncertainty;

pub use error::{Error, Result};
