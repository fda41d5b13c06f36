//! Desk-scale laboratory for cross-domain semi-supervised segmentation.
//!
//! The crate implements the full experiment lifecycle on synthetic
//! two-domain 2D data:
//!
//! * [`tensor`] / [`dataset`] — raster types, the AHD1 on-disk format,
//!   manifests, deterministic splitting and normalization.
//! * [`synth`] — a procedural two-centre dataset generator whose domain-B
//!   renderer doubles as a ground-truth mapping oracle.
//! * [`autodiff`] / [`nn`] — a small reverse-mode tape over `f64` tensors
//!   and the three network families built on it (mapping U-Nets, a
//!   pair-discriminator, dual-modelling nets with a local conv branch and
//!   a global attention branch).
//! * [`losses`] — every training objective as a pure differentiable
//!   scalar, plus the ramp schedule and uncertainty weighting.
//! * [`bai`] — bidirectional adversarial inference: alternating min-max
//!   training of the two mapping networks against the discriminator with
//!   cycle reconstruction, and matched-domain construction.
//! * [`hdc`] — hierarchical dual-consistency training of the two
//!   dual-modelling networks on the matched domains, plus inference.
//! * [`metrics`] / [`analysis`] — DSC/JI/ASD evaluation, PCA projections
//!   and inter-network feature correlations.
//! * [`config`] / [`pipeline`] — one JSON experiment description driving
//!   every stage, consumed by the `ahdc` binary.

pub mod analysis;
pub mod autodiff;
pub mod bai;
pub mod config;
pub mod dataset;
pub mod hdc;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
