//! Segmentation networks trained on synthetic images whose augmentation
//! parameters are themselves learned from a handful of real labelled examples.
//!
//! Each training iteration alternates a *synthetic pass* (augment a synthetic
//! image, take one SGD step on the segmentation weights) with a *real pass*
//! (score the updated network on real data and push the gradient back through
//! the update into the augmentation parameters).

pub mod augment;
pub mod autodiff;
pub mod bilevel;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod params;
pub mod segnet;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid, LabelMap, SeededRng};
