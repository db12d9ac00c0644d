//! Robustness benchmarking for taxi-fare regression.
//!
//! The crate covers the full path from raw trip CSVs to a model comparison
//! report: chunked ingestion, KNN imputation, IQR filtering, feature
//! engineering, keyed Gaussian noise injection with Kolmogorov–Smirnov
//! verification, autoencoder denoising, three regressors (histogram GBDT,
//! graph attention, period-folding temporal) and an evaluation harness
//! covering accuracy, calibration, uncertainty and out-of-distribution
//! degradation.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod autodiff;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod gat;
pub mod gbdt;
pub mod nn;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tslite;

pub use error::{Error, Result};
