//! Stage-2 refinement network.
//!
//! U-Net over `[x_out, x_s, M]` (seven channels), width `c`, resolution `R`:
//!
//! | stage  | op                                   | out            |
//! |--------|--------------------------------------|----------------|
//! | `e0`   | conv3 s1                             | `c × R`        |
//! | `e1`   | conv3 s2                             | `2c × R/2`     |
//! | `e2`   | conv3 s2                             | `4c × R/4`     |
//! | `e3`   | conv3 s2, dual attention             | `4c × R/8`     |
//! | `d2`   | up, cat `e2`, conv3, dual attention  | `4c × R/4`     |
//! | `d1`   | up, cat `e1`, conv3                  | `2c × R/2`     |
//! | `d0`   | up, cat `e0`, conv3                  | `c × R`        |
//! | `out`  | conv3 → 3, tanh                      | `3 × R`        |
//!
//! In residual mode the head output is halved and added to `x_out`, then
//! clamped to `[-1, 1]`; otherwise the head output is the image. Either way
//! the result is composited with `x_s`, so the background is exact.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::DualSpatialAttention;
use super::check_image;
use crate::error::{dim_err, Error, Result};
use crate::masks::compose_output;
use crate::nn::layers::leaky_relu;
use crate::nn::{Conv2d, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AprConfig {
    pub resolution: usize,
    pub width: usize,
    pub residual: bool,
    pub zero_output: bool,
}

impl Default for AprConfig {
    fn default() -> Self {
        Self { resolution: 64, width: 16, residual: true, zero_output: false }
    }
}

impl AprConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 8 != 0 || self.resolution < 16 {
            return Err(Error::Config(format!("refiner resolution {} unsupported", self.resolution)));
        }
        if self.width == 0 {
            return Err(Error::Config("refiner width must be positive".into()));
        }
        Ok(())
    }
}

pub struct AprNet {
    cfg: AprConfig,
    e: [Conv2d; 4],
    d: [Conv2d; 3],
    out: Conv2d,
    att_coarse: DualSpatialAttention,
    att_mid: DualSpatialAttention,
}

impl AprNet {
    pub fn new(store: &mut ParamStore, cfg: &AprConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let conv = |s: &mut ParamStore, n: &str, i: usize, o: usize, stride: usize| {
            Conv2d::new(s, &format!("apr.{n}"), i, o, 3, stride, 1, 1.4)
        };
        let e = [
            conv(store, "e0", 7, c, 1)?,
            conv(store, "e1", c, 2 * c, 2)?,
            conv(store, "e2", 2 * c, 4 * c, 2)?,
            conv(store, "e3", 4 * c, 4 * c, 2)?,
        ];
        let d = [
            conv(store, "d0", 2 * c + c, c, 1)?,
            conv(store, "d1", 4 * c + 2 * c, 2 * c, 1)?,
            conv(store, "d2", 4 * c + 4 * c, 4 * c, 1)?,
        ];
        let out = if cfg.zero_output {
            Conv2d::zeroed(store, "apr.out", c, 3, 3, 1)?
        } else {
            Conv2d::new(store, "apr.out", c, 3, 3, 1, 1, 0.1)?
        };
        let key_dim = (c / 2).max(4);
        let att_coarse = DualSpatialAttention::new(store, "apr.att_e3", 4 * c, key_dim)?;
        let att_mid = DualSpatialAttention::new(store, "apr.att_d2", 4 * c, key_dim)?;
        Ok(Self { cfg: *cfg, e, d, out, att_coarse, att_mid })
    }

    pub fn config(&self) -> &AprConfig {
        &self.cfg
    }

    /// `masks` holds full-resolution masks; coarser levels are derived.
    pub fn refine(
        &self,
        x_out: &Tensor,
        x_s: &Tensor,
        masks: &super::MaskPyramid,
    ) -> Result<Tensor> {
        check_image(x_out, self.cfg.resolution, "refiner")?;
        if x_out.dims() != x_s.dims() || x_out.dim(0)? != masks.batch() {
            return Err(dim_err!("refiner inputs disagree: {:?}, {:?}, {} masks", x_out.dims(), x_s.dims(), masks.batch()));
        }
        let r = self.cfg.resolution;
        let (dt, dev) = (x_out.dtype(), x_out.device());
        let m = masks.at(r, dt, dev)?;
        let act = |conv: &Conv2d, x: &Tensor| -> Result<Tensor> { leaky_relu(&conv.forward(x)?) };
        let up = |x: &Tensor, side: usize| x.upsample_nearest2d(side, side);

        let e0 = act(&self.e[0], &Tensor::cat(&[x_out, x_s, &m], 1)?)?;
        let e1 = act(&self.e[1], &e0)?;
        let e2 = act(&self.e[2], &e1)?;
        let e3 = act(&self.e[3], &e2)?;
        let e3 = self.att_coarse.forward(&e3, &masks.at(r / 8, dt, dev)?)?;

        let d2 = act(&self.d[2], &Tensor::cat(&[&up(&e3, r / 4)?, &e2], 1)?)?;
        let d2 = self.att_mid.forward(&d2, &masks.at(r / 4, dt, dev)?)?;
        let d1 = act(&self.d[1], &Tensor::cat(&[&up(&d2, r / 2)?, &e1], 1)?)?;
        let d0 = act(&self.d[0], &Tensor::cat(&[&up(&d1, r)?, &e0], 1)?)?;
        let head = self.out.forward(&d0)?.tanh()?;

        let raw = if self.cfg.residual {
            (x_out + (head * 0.5)?)?.clamp(-1.0, 1.0)?
        } else {
            head
        };
        compose_output(&raw, x_s, &m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BinaryMask, PatchRect};
    use crate::networks::MaskPyramid;
    use crate::testing::{randn, rng, to_vec};
    use candle_core::{DType, Device};

    fn inputs() -> (Tensor, Tensor, MaskPyramid, BinaryMask) {
        let x_s = randn(&mut rng(1), &[2, 3, 32, 32], 0.4).clamp(-1.0, 1.0).unwrap();
        let x_out = randn(&mut rng(2), &[2, 3, 32, 32], 0.4).clamp(-1.0, 1.0).unwrap();
        let m = BinaryMask::new(32, 32, PatchRect { left: 8, top: 10, right: 23, bottom: 17 }).unwrap();
        (x_s, x_out, MaskPyramid::new(vec![m.clone(); 2]).unwrap(), m)
    }

    #[test]
    fn zeroed_head_fills_hole_with_zero() {
        let dev = Device::Cpu;
        let (x_s, x_out, masks, m) = inputs();
        let cfg = AprConfig { resolution: 32, width: 4, residual: false, zero_output: true };
        let mut store = ParamStore::new(DType::F64, &dev, 1);
        let apr = AprNet::new(&mut store, &cfg).unwrap();
        let y = to_vec(&apr.refine(&x_out, &x_s, &masks).unwrap());
        let src = to_vec(&x_s);
        for (i, (a, b)) in y.iter().zip(&src).enumerate() {
            let (row, col) = ((i / 32) % 32, i % 32);
            if m.is_hole(row, col) {
                assert_eq!(*a, 0.0);
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let cfg = AprConfig { residual: true, ..cfg };
        let mut store = ParamStore::new(DType::F64, &dev, 1);
        let apr = AprNet::new(&mut store, &cfg).unwrap();
        let y = to_vec(&apr.refine(&x_out, &x_s, &masks).unwrap());
        let composed = to_vec(&compose_output(&x_out, &x_s, &masks.at(32, DType::F64, &dev).unwrap()).unwrap());
        assert_eq!(y, composed);
    }

    #[test]
    fn background_exact_and_gradients_flow() {
        let dev = Device::Cpu;
        let (x_s, x_out, masks, m) = inputs();
        let cfg = AprConfig { resolution: 32, width: 4, ..AprConfig::default() };
        let mut store = ParamStore::new(DType::F64, &dev, 2);
        let apr = AprNet::new(&mut store, &cfg).unwrap();
        let y = apr.refine(&x_out, &x_s, &masks).unwrap();
        let (yv, sv) = (to_vec(&y), to_vec(&x_s));
        for (i, (a, b)) in yv.iter().zip(&sv).enumerate() {
            if !m.is_hole((i / 32) % 32, i % 32) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(yv, to_vec(&apr.refine(&x_out, &x_s, &masks).unwrap()));
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(&var).unwrap_or_else(|| panic!("{name} missing"));
            assert!(to_vec(g).iter().any(|v| *v != 0.0), "{name}");
        }
        let full = MaskPyramid::new(vec![BinaryMask::full_hole(32, 32); 2]).unwrap();
        assert!(matches!(apr.refine(&x_out, &x_s, &full), Err(Error::Attention(_))));
    }
}
