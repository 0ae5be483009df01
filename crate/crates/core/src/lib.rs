//! Siamese few-shot gaze personalization for polarization-enabled eye
//! tracking, at desk scale.
//!
//! The crate covers the whole pipeline: polarization preprocessing
//! ([`polarization`]), a deterministic synthetic multi-subject dataset
//! ([`synthgen`], [`dataio`]), a small binocular CNN with hand-derived
//! gradients ([`net`]), training with the outlier-rejecting Smooth-L1 loss
//! ([`train`]), anchor-based inference and L1 linear calibration
//! ([`personalize`]), percentile evaluation ([`eval`]) and the
//! end-to-end experiment ([`repro`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod eval;
pub mod gaze;
pub mod net;
pub mod personalize;
pub mod polarization;
pub mod repro;
pub mod rng;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use gaze::{BinocularSample, GazeVector, Session};
