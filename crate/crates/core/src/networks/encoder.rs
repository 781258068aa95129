//! Pyramid style encoder.
//!
//! A stem convolution at full resolution followed by stride-2 stages down to
//! 4×4. The map at each generator block resolution is kept as that block's
//! prior `F_p`. Every generator layer gets its own map2style head: channel
//! mean and standard deviation of the matching pyramid level, then a linear
//! projection to `style_dim`.

use candle_core::Tensor;

use super::{check_image, GeneratorConfig};
use crate::aain::StyleEmbedding;
use crate::error::Result;
use crate::nn::layers::{leaky_relu, spatial_moments};
use crate::nn::{Conv2d, Linear, ParamStore};

pub struct StyleEncoder {
    cfg: GeneratorConfig,
    stem: Conv2d,
    /// `downs[i]` maps level `i + 1` to level `i`.
    downs: Vec<Conv2d>,
    refine: Vec<Conv2d>,
    heads: Vec<Linear>,
}

/// Prior maps, coarsest first: `levels[i]` is at `4·2^i`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl StyleEncoder {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let top = cfg.num_blocks - 1;
        let ch = |i: usize| Self::level_channels(cfg, i);
        let stem = Conv2d::new(store, "enc.stem", 3, ch(top), 3, 1, 1, 1.4)?;
        let mut downs = Vec::new();
        let mut refine = Vec::new();
        for i in 0..top {
            downs.push(Conv2d::new(store, &format!("enc.down{i}"), ch(i + 1), ch(i), 3, 2, 1, 1.4)?);
        }
        for i in 0..cfg.num_blocks {
            refine.push(Conv2d::new(store, &format!("enc.refine{i}"), ch(i), ch(i), 3, 1, 1, 1.4)?);
        }
        let mut heads = Vec::new();
        for l in 0..cfg.num_layers() {
            let c = ch(l / 2);
            heads.push(Linear::new(store, &format!("enc.map2style{l}"), 2 * c, cfg.style_dim)?);
        }
        Ok(Self { cfg: *cfg, stem, downs, refine, heads })
    }

    /// Channels of the pyramid at block `i`; half the generator width.
    pub fn level_channels(cfg: &GeneratorConfig, i: usize) -> usize {
        (cfg.block_channels(i) / 2).max(4)
    }

    pub fn encode(&self, x_s: &Tensor) -> Result<(StyleEmbedding, FeaturePyramid)> {
        check_image(x_s, self.cfg.resolution, "style encoder")?;
        let top = self.cfg.num_blocks - 1;
        let mut levels = vec![None; self.cfg.num_blocks];
        let mut h = leaky_relu(&self.stem.forward(x_s)?)?;
        for i in (0..=top).rev() {
            if i < top {
                h = leaky_relu(&self.downs[i].forward(&h)?)?;
            }
            h = leaky_relu(&self.refine[i].forward(&h)?)?;
            levels[i] = Some(h.clone());
        }
        let levels: Vec<Tensor> = levels.into_iter().flatten().collect();
        let mut styles = Vec::with_capacity(self.heads.len());
        for (l, head) in self.heads.iter().enumerate() {
            let (mean, std) = spatial_moments(&levels[l / 2])?;
            let pooled = Tensor::cat(&[mean.flatten_from(1)?, std.flatten_from(1)?], 1)?;
            styles.push(head.forward(&pooled)?);
        }
        let w_sty = Tensor::stack(&styles, 1)?;
        Ok((StyleEmbedding(w_sty), FeaturePyramid { levels }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{randn, rng, to_vec};
    use candle_core::{DType, Device};

    #[test]
    fn shapes_and_determinism() {
        let dev = Device::Cpu;
        let cfg = GeneratorConfig { base_channels: 8, style_dim: 16, ..GeneratorConfig::toy() };
        let mut store = ParamStore::new(DType::F32, &dev, 1);
        let enc = StyleEncoder::new(&mut store, &cfg).unwrap();
        let x = randn(&mut rng(0), &[2, 3, 64, 64], 0.5).to_dtype(DType::F32).unwrap();
        let (w, pyr) = enc.encode(&x).unwrap();
        assert_eq!(w.0.dims(), &[2, 10, 16]);
        for (i, f) in pyr.levels.iter().enumerate() {
            let side = 4 << i;
            assert_eq!(f.dims(), &[2, StyleEncoder::level_channels(&cfg, i), side, side]);
        }
        let (w2, _) = enc.encode(&x).unwrap();
        assert_eq!(to_vec(&w.0), to_vec(&w2.0));
        assert!(enc.encode(&x.narrow(2, 0, 32).unwrap()).is_err());
    }
}
