//! Attention-guided style generator and the full stage-1 model.
//!
//! Block `i` runs at `4·2^i`. Block 0 starts from a learned `4×4` constant;
//! later blocks upsample by nearest neighbour. Each block is
//! `conv → lrelu → AAIN → conv → lrelu → AAIN`, and a `1×1` conv plus `tanh`
//! maps the last block to RGB.

use candle_core::Tensor;

use super::encoder::{FeaturePyramid, StyleEncoder};
use super::fr::FrBackbone;
use super::mapping::MappingNetwork;
use super::{GeneratorConfig, MaskPyramid};
use crate::aain::{AainLayer, StyleEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::masks::compose_output;
use crate::nn::layers::leaky_relu;
use crate::nn::{Conv2d, Init, ParamStore};

struct Block {
    conv_a: Conv2d,
    aain_a: AainLayer,
    conv_b: Conv2d,
    aain_b: AainLayer,
}

pub struct AttGenerator {
    cfg: GeneratorConfig,
    constant: Tensor,
    blocks: Vec<Block>,
    to_rgb: Conv2d,
}

impl AttGenerator {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.block_channels(0);
        let constant = store.get("gen.const", &[1, c0, 4, 4], Init::Normal(1.0))?;
        let mut blocks = Vec::new();
        let mut c_prev = c0;
        for i in 0..cfg.num_blocks {
            let c = cfg.block_channels(i);
            let cp = StyleEncoder::level_channels(cfg, i);
            let name = format!("gen.b{i}");
            blocks.push(Block {
                conv_a: Conv2d::new(store, &format!("{name}.conv_a"), c_prev, c, 3, 1, 1, 1.4)?,
                aain_a: AainLayer::new(store, &format!("{name}.aain_a"), 2 * i, c, cfg.style_dim, cp)?,
                conv_b: Conv2d::new(store, &format!("{name}.conv_b"), c, c, 3, 1, 1, 1.4)?,
                aain_b: AainLayer::new(store, &format!("{name}.aain_b"), 2 * i + 1, c, cfg.style_dim, cp)?,
            });
            c_prev = c;
        }
        let to_rgb = Conv2d::new(store, "gen.to_rgb", c_prev, 3, 1, 1, 0, 1.0)?;
        Ok(Self { cfg: *cfg, constant, blocks, to_rgb })
    }

    /// `x_syn` in `[-1, 1]`.
    pub fn synthesize(
        &self,
        w_sty: &StyleEmbedding,
        w_id: &StyleEmbedding,
        priors: &FeaturePyramid,
        masks: &MaskPyramid,
    ) -> Result<Tensor> {
        let n = masks.batch();
        let layers = self.cfg.num_layers();
        for (what, w) in [("w_sty", w_sty), ("w_id", w_id)] {
            if w.0.dims() != [n, layers, self.cfg.style_dim] {
                return Err(dim_err!("{what} has shape {:?}, expected [{n}, {layers}, {}]", w.0.dims(), self.cfg.style_dim));
            }
        }
        if priors.levels.len() != self.blocks.len() {
            return Err(dim_err!("prior pyramid has {} levels", priors.levels.len()));
        }
        let dtype = self.constant.dtype();
        let dev = self.constant.device();
        let mut h = self.constant.broadcast_as((n, self.cfg.block_channels(0), 4, 4))?.contiguous()?;
        for (i, block) in self.blocks.iter().enumerate() {
            let side = self.cfg.block_resolution(i);
            if i > 0 {
                h = h.upsample_nearest2d(side, side)?;
            }
            let m = masks.at(side, dtype, dev)?;
            let prior = &priors.levels[i];
            h = leaky_relu(&block.conv_a.forward(&h)?)?;
            h = block.aain_a.forward(&h, prior, w_sty, w_id, &m)?;
            h = leaky_relu(&block.conv_b.forward(&h)?)?;
            h = block.aain_b.forward(&h, prior, w_sty, w_id, &m)?;
        }
        Ok(self.to_rgb.forward(&h)?.tanh()?)
    }
}

/// Style encoder, mapping network and generator together.
pub struct AttStyleGan {
    pub cfg: GeneratorConfig,
    pub encoder: StyleEncoder,
    pub mapping: MappingNetwork,
    pub generator: AttGenerator,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub x_syn: Tensor,
    pub x_out: Tensor,
}

impl AttStyleGan {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        Ok(Self {
            cfg: *cfg,
            encoder: StyleEncoder::new(store, cfg)?,
            mapping: MappingNetwork::new(store, cfg)?,
            generator: AttGenerator::new(store, cfg)?,
        })
    }

    /// Runs stage 1. `id_encoder` supplies `z_id` for the targets; it is
    /// treated as fixed, so no gradient flows into it.
    pub fn generate(
        &self,
        x_s: &Tensor,
        x_t: &Tensor,
        masks: &MaskPyramid,
        id_encoder: &dyn FrBackbone,
    ) -> Result<Generated> {
        if x_s.dims() != x_t.dims() {
            return Err(dim_err!("source {:?} and target {:?} differ", x_s.dims(), x_t.dims()));
        }
        if x_s.dim(0)? != masks.batch() {
            return Err(dim_err!("{} images but {} masks", x_s.dim(0)?, masks.batch()));
        }
        if id_encoder.input_resolution() != self.cfg.resolution {
            return Err(Error::Config(format!(
                "identity encoder runs at {}, generator at {}",
                id_encoder.input_resolution(),
                self.cfg.resolution
            )));
        }
        if id_encoder.embedding_dim() != self.cfg.id_dim {
            return Err(Error::Config(format!(
                "identity encoder emits {}-d vectors, generator expects {}",
                id_encoder.embedding_dim(),
                self.cfg.id_dim
            )));
        }
        let z_id = id_encoder.embed(x_t)?.detach();
        let w_id = self.mapping.forward(&z_id)?.w_id;
        let (w_sty, priors) = self.encoder.encode(x_s)?;
        let x_syn = self.generator.synthesize(&w_sty, &w_id, &priors, masks)?;
        let m = masks.at(self.cfg.resolution, x_s.dtype(), x_s.device())?;
        let x_out = compose_output(&x_syn, x_s, &m)?;
        Ok(Generated { x_syn, x_out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BinaryMask, PatchRect};
    use crate::networks::fr::{FrConfig, ToyFr};
    use crate::testing::{randn, rng, to_vec};
    use candle_core::{DType, Device};

    fn setup(dtype: DType) -> (AttStyleGan, ToyFr, ParamStore) {
        let dev = Device::Cpu;
        let cfg = GeneratorConfig { resolution: 16, num_blocks: 3, style_dim: 8, base_channels: 8, id_dim: 8 };
        let mut store = ParamStore::new(dtype, &dev, 3);
        let gan = AttStyleGan::new(&mut store, &cfg).unwrap();
        let mut fr_store = ParamStore::new(dtype, &dev, 4);
        let fr = ToyFr::new(&mut fr_store, "fr", &FrConfig { resolution: 16, channels: [4, 4, 4, 4], embed_dim: 8 }).unwrap();
        (gan, fr, store)
    }

    fn masks(n: usize) -> MaskPyramid {
        let rect = PatchRect { left: 4, top: 4, right: 11, bottom: 7 };
        MaskPyramid::new(vec![BinaryMask::new(16, 16, rect).unwrap(); n]).unwrap()
    }

    #[test]
    fn background_is_exact_and_no_hole_returns_source() {
        let (gan, fr, _) = setup(DType::F32);
        let x_s = randn(&mut rng(1), &[2, 3, 16, 16], 0.5).to_dtype(DType::F32).unwrap();
        let x_t = randn(&mut rng(2), &[2, 3, 16, 16], 0.5).to_dtype(DType::F32).unwrap();
        let out = gan.generate(&x_s, &x_t, &masks(2), &fr).unwrap();
        assert_eq!(out.x_syn.dims(), x_s.dims());
        let (a, b, s) = (to_vec(&out.x_out), to_vec(&x_s), to_vec(&out.x_syn));
        let m = masks(1).full[0].clone();
        for (i, ((o, src), syn)) in a.iter().zip(&b).zip(&s).enumerate() {
            let (row, col) = ((i / 16) % 16, i % 16);
            if m.is_hole(row, col) {
                assert_eq!(o, syn);
            } else {
                assert_eq!(o.to_bits(), src.to_bits());
            }
        }

        let none = MaskPyramid::new(vec![BinaryMask::no_hole(16, 16); 2]).unwrap();
        let out = gan.generate(&x_s, &x_t, &none, &fr).unwrap();
        assert_eq!(to_vec(&out.x_out), b);
        let again = gan.generate(&x_s, &x_t, &masks(2), &fr).unwrap();
        assert_eq!(to_vec(&again.x_syn), s);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (gan, fr, store) = setup(DType::F64);
        let x_s = randn(&mut rng(1), &[2, 3, 16, 16], 0.5);
        let x_t = randn(&mut rng(2), &[2, 3, 16, 16], 0.5);
        let out = gan.generate(&x_s, &x_t, &masks(2), &fr).unwrap();
        let z_t = fr.embed(&x_t).unwrap().detach();
        let loss = (fr.embed(&out.x_out).unwrap() * z_t).unwrap().sum_all().unwrap().neg().unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(&var).unwrap_or_else(|| panic!("{name} has no gradient"));
            let norm = to_vec(g).iter().map(|v| v * v).sum::<f64>();
            assert!(norm > 0.0, "{name} gradient is zero");
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let (gan, fr, _) = setup(DType::F32);
        let x = randn(&mut rng(1), &[2, 3, 16, 16], 0.5).to_dtype(DType::F32).unwrap();
        assert!(gan.generate(&x, &x, &masks(3), &fr).is_err());
        let y = randn(&mut rng(1), &[2, 3, 8, 8], 0.5).to_dtype(DType::F32).unwrap();
        assert!(gan.generate(&y, &y, &masks(2), &fr).is_err());
    }
}
