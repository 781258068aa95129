//! Adversarial inpainting patches for face-embedding models.
//!
//! Stage 1 paints a patch into a rectangular hole with a style-based
//! generator whose attention-guided AdaIN layers blend the source image's
//! style with a target identity. Stage 2 refines the patch with a U-Net so it
//! blends into its surroundings while keeping the attack. The [`evaluation`]
//! module scores attack success and stealth.

pub mod aain;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod losses;
pub mod masks;
pub mod networks;
pub mod nn;

pub use error::{Error, Result};
pub mod testing;
pub mod training;
