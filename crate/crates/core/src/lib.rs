//! Two-step masked-face dataset synthesis.
//!
//! Step 1 warps a mask template onto full-face images via facial landmarks
//! ([`mask_warp`]), recording exactly which pixels the warp touched
//! ([`region_extract`]). Step 2 trains an attention-guided unpaired
//! image-to-image translation model ([`model`], [`losses`], [`trainer`]) that
//! renders those rule-based masks realistically while a Non-Mask Change loss
//! pins every pixel outside the recorded region. [`datasets`] handles A/B
//! directory layouts, filtering and multi-face scene composition; [`metrics`]
//! quantifies non-mask preservation and noise-driven output diversity.

pub mod datasets;
pub mod error;
pub mod image_core;
pub mod losses;
pub mod mask_warp;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod region_extract;
pub mod trainer;

pub use error::{Error, Result};
