//! Network assemblies: the pyramid style encoder, identity mapping network,
//! attention-guided style generator, the refinement U-Net with dual spatial
//! attention, both critics, and the toy face-recognition surrogate.

pub mod apr;
pub mod attention;
pub mod critics;
pub mod encoder;
pub mod fr;
pub mod generator;
pub mod mapping;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::masks::{stack_masks, BinaryMask};

pub use apr::{AprConfig, AprNet};
pub use attention::DualSpatialAttention;
pub use critics::{Critic, PatchCritic, StyleCritic};
pub use encoder::StyleEncoder;
pub use fr::{FrBackbone, FrConfig, ToyFr};
pub use generator::{AttGenerator, AttStyleGan, Generated};
pub use mapping::MappingNetwork;

/// Shape of the stage-1 generator and its encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub num_blocks: usize,
    pub style_dim: usize,
    pub base_channels: usize,
    /// Length of the identity vector produced by the FR model.
    pub id_dim: usize,
}

impl GeneratorConfig {
    /// Desk-scale default: 64×64, five blocks.
    pub fn toy() -> Self {
        Self { resolution: 64, num_blocks: 5, style_dim: 128, base_channels: 64, id_dim: 128 }
    }

    /// 256×256 with seven blocks and a 14×512 latent.
    pub fn full_scale() -> Self {
        Self { resolution: 256, num_blocks: 7, style_dim: 512, base_channels: 512, id_dim: 512 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        let expected = self.resolution.trailing_zeros() as usize - 1;
        if self.num_blocks != expected {
            return Err(Error::Config(format!(
                "{}x{} needs {expected} generator blocks, got {}",
                self.resolution, self.resolution, self.num_blocks
            )));
        }
        if self.style_dim == 0 || self.base_channels == 0 || self.id_dim == 0 {
            return Err(Error::Config("zero-sized generator dimension".into()));
        }
        Ok(())
    }

    /// Number of style vectors (two AAIN layers per block).
    pub fn num_layers(&self) -> usize {
        2 * self.num_blocks
    }

    /// Side length of block `i`; block 0 is 4×4.
    pub fn block_resolution(&self, i: usize) -> usize {
        4 << i
    }

    /// Channels of block `i`: `base` for the three coarsest blocks, halving
    /// per block after that, never below 4.
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_channels >> i.saturating_sub(2)).max(4)
    }
}

/// Per-sample hole masks at every resolution a network needs.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    pub full: Vec<BinaryMask>,
}

impl MaskPyramid {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(dim_err!("mask batch is empty"));
        }
        Ok(Self { full: masks })
    }

    pub fn batch(&self) -> usize {
        self.full.len()
    }

    /// `N×1×s×s` mask tensor at side `side`.
    pub fn at(&self, side: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let reduced = self
            .full
            .iter()
            .map(|m| m.downsample(side, side))
            .collect::<Result<Vec<_>>>()?;
        stack_masks(&reduced, dtype, device)
    }
}

pub(crate) fn check_image(x: &Tensor, resolution: usize, what: &str) -> Result<(usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if h != resolution || w != resolution {
        return Err(dim_err!("{what} expects {resolution}x{resolution} input, got {h}x{w}"));
    }
    Ok((n, c))
}
