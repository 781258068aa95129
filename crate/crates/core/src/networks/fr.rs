//! Face-recognition interface and the toy convolutional surrogate.
//!
//! # Plugging in an external model
//!
//! Anything implementing [`FrBackbone`] can be attacked or used for
//! evaluation. The contract:
//!
//! * input: `N×3×R×R` tensor in `[-1, 1]` at the model's
//!   [`input_resolution`](FrBackbone::input_resolution) (resize upstream);
//! * output: `N×d` rows of unit L2 norm;
//! * deterministic for a fixed input;
//! * when [`differentiable`](FrBackbone::differentiable) is true the output
//!   must stay on the autograd graph so the attack can push gradients through
//!   it. Black-box models may return detached tensors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::check_image;
use crate::error::{Error, Result};
use crate::nn::layers::{l2_normalize, leaky_relu};
use crate::nn::{Conv2d, Linear, ParamStore};

pub trait FrBackbone {
    fn embed(&self, x: &Tensor) -> Result<Tensor>;
    fn differentiable(&self) -> bool;
    fn input_resolution(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrConfig {
    pub resolution: usize,
    /// Output channels of the four stride-2 conv blocks.
    pub channels: [usize; 4],
    pub embed_dim: usize,
}

impl Default for FrConfig {
    fn default() -> Self {
        Self { resolution: 64, channels: [16, 32, 64, 64], embed_dim: 128 }
    }
}

impl FrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 16 != 0 || self.resolution == 0 {
            return Err(Error::Config(format!(
                "FR resolution must be a multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.channels.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("zero-sized FR layer".into()));
        }
        Ok(())
    }
}

/// Four `conv3×3 s1 → lrelu → conv3×3 s2 → lrelu` blocks, flatten, linear
/// head, L2 normalisation.
pub struct ToyFr {
    cfg: FrConfig,
    name: String,
    blocks: Vec<(Conv2d, Conv2d)>,
    head: Linear,
}

impl ToyFr {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FrConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let a = Conv2d::new(store, &format!("fr.b{i}.conv_a"), c_in, c, 3, 1, 1, 1.4)?;
            let b = Conv2d::new(store, &format!("fr.b{i}.conv_b"), c, c, 3, 2, 1, 1.4)?;
            blocks.push((a, b));
            c_in = c;
        }
        let side = cfg.resolution / 16;
        let head = Linear::new(store, "fr.head", c_in * side * side, cfg.embed_dim)?;
        Ok(Self { cfg: cfg.clone(), name: name.to_string(), blocks, head })
    }

    pub fn config(&self) -> &FrConfig {
        &self.cfg
    }

    /// Un-normalised embedding, used by the margin loss during FR training.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.cfg.resolution, "FR model")?;
        let mut h = x.clone();
        for (a, b) in &self.blocks {
            h = leaky_relu(&a.forward(&h)?)?;
            h = leaky_relu(&b.forward(&h)?)?;
        }
        let h = h.flatten_from(1)?;
        self.head.forward(&h)
    }
}

impl FrBackbone for ToyFr {
    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.features(x)?)
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn input_resolution(&self) -> usize {
        self.cfg.resolution
    }

    fn embedding_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Row-wise cosine similarity of two `N×d` batches of embeddings.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a = l2_normalize(a)?;
    let b = l2_normalize(b)?;
    Ok((a * b)?.sum(1)?)
}
