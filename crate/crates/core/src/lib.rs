//! Deformable symmetric Gabor wavelet network (DSGWN) face modelling.
//!
//! The crate is organized around the three stages of the detection pipeline:
//!
//! * [`cascade`] — Haar-feature cascade producing candidate face windows,
//!   plus a wavelet-residual verifier that filters them.
//! * [`gabor`] / [`model`] — the wavelet-network face template and its
//!   deformable, symmetry-constrained three-group extension.
//! * [`fitting`] — Levenberg-Marquardt pose and deformation recovery.
//!
//! Supporting modules: [`imaging`] (grayscale rasters, integral images),
//! [`geometry`] (homographies), [`synth`] (ground-truth generation),
//! [`pipeline`] (detect/track/evaluate), and [`config`].

pub mod cascade;
pub mod config;
pub mod error;
pub mod fitting;
pub mod gabor;
pub mod geometry;
pub mod imaging;
pub mod lm;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use gabor::{GaborWavelet, Gwn};
pub use geometry::{Homography, Point};
pub use imaging::{Image, IntegralImage};
pub use model::{ConstraintSpec, DeformableModel, GlobalPose, GroupLabel, GroupPose, WaveletGroup};
