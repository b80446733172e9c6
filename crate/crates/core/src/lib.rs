//! Two-stage manipulation detection in the hyperspectral domain.
//!
//! An RGB image is lifted to a 31-band spectral estimate by a cascade of
//! U-shaped spectral-attention stages ([`hsr`]); a disentangling detector
//! ([`detector`]) then separates content from forgery fingerprints and
//! classifies the cube as real or manipulated. Everything runs on the small
//! autodiff engine in [`engine`], trained on synthetic spectral scenes from
//! [`data`] and scored with ROC/AUC in [`eval`].

pub mod engine;
pub mod error;
pub mod rng;

pub use engine::{ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub mod data;
pub mod hsr;
pub mod image;

pub use image::{RgbImage, SpectralImage, BANDS};
pub mod checkpoint;
pub mod detector;
pub mod eval;
pub mod gradsuite;
pub mod objectives;
pub mod run;
