//! Identity mapping network `G_m`: `z_id → w_id`.
//!
//! Two-layer shared trunk, then one linear head per generator layer.

use candle_core::Tensor;

use super::GeneratorConfig;
use crate::aain::StyleEmbedding;
use crate::error::{dim_err, Result};
use crate::nn::layers::{l2_normalize, leaky_relu};
use crate::nn::{Linear, ParamStore};

/// Inputs whose norm is further than this from 1 are renormalised.
pub const NORM_TOLERANCE: f64 = 1e-6;

pub struct MappingNetwork {
    id_dim: usize,
    trunk: Vec<Linear>,
    heads: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MappedIdentity {
    pub w_id: StyleEmbedding,
    /// Set when some input row was not unit norm and had to be rescaled.
    pub renormalized: bool,
}

impl MappingNetwork {
    pub fn new(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.style_dim;
        let trunk = vec![
            Linear::new(store, "map.trunk0", cfg.id_dim, d)?,
            Linear::new(store, "map.trunk1", d, d)?,
        ];
        let heads = (0..cfg.num_layers())
            .map(|l| Linear::new(store, &format!("map.head{l}"), d, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id_dim: cfg.id_dim, trunk, heads })
    }

    pub fn trunk(&self) -> &[Linear] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Linear] {
        &self.heads
    }

    pub fn forward(&self, z_id: &Tensor) -> Result<MappedIdentity> {
        let (_, d) = z_id.dims2()?;
        if d != self.id_dim {
            return Err(dim_err!("mapping network expects {}-d identities, got {d}", self.id_dim));
        }
        let norms = z_id.detach().sqr()?.sum(1)?.sqrt()?.to_dtype(candle_core::DType::F64)?;
        let renormalized =
            norms.to_vec1::<f64>()?.iter().any(|n| (n - 1.0).abs() > NORM_TOLERANCE);
        let z = if renormalized {
            log::warn!("identity embedding is not unit norm; normalising");
            l2_normalize(z_id)?
        } else {
            z_id.clone()
        };
        let mut h = z;
        for layer in &self.trunk {
            h = leaky_relu(&layer.forward(&h)?)?;
        }
        let styles = self.heads.iter().map(|head| head.forward(&h)).collect::<Result<Vec<_>>>()?;
        Ok(MappedIdentity { w_id: StyleEmbedding(Tensor::stack(&styles, 1)?), renormalized })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{max_abs_diff, randn, rng, to_vec};
    use candle_core::{DType, Device};

    fn small() -> GeneratorConfig {
        GeneratorConfig { style_dim: 8, id_dim: 6, base_channels: 8, ..GeneratorConfig::toy() }
    }

    fn matvec(w: &[f64], b: &[f64], x: &[f64], d_in: usize) -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
            .collect()
    }

    #[test]
    fn matches_loop_oracle() {
        let dev = Device::Cpu;
        let cfg = small();
        let mut store = ParamStore::new(DType::F64, &dev, 9);
        let g = MappingNetwork::new(&mut store, &cfg).unwrap();
        let z = l2_normalize(&randn(&mut rng(4), &[3, 6], 1.0)).unwrap();
        let out = g.forward(&z).unwrap();
        assert!(!out.renormalized);
        assert_eq!(out.w_id.0.dims(), &[3, 10, 8]);
        let got = to_vec(&out.w_id.0);
        let zv = to_vec(&z);
        for n in 0..3 {
            let mut h = zv[n * 6..(n + 1) * 6].to_vec();
            for layer in g.trunk() {
                let d_in = h.len();
                h = matvec(&to_vec(&layer.weight), &to_vec(&layer.bias), &h, d_in)
                    .into_iter()
                    .map(|v| if v >= 0.0 { v } else { 0.2 * v })
                    .collect();
            }
            for (l, head) in g.heads().iter().enumerate() {
                let y = matvec(&to_vec(&head.weight), &to_vec(&head.bias), &h, 8);
                for (k, v) in y.iter().enumerate() {
                    assert!((got[(n * 10 + l) * 8 + k] - v).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_weights_output_bias() {
        let dev = Device::Cpu;
        let cfg = small();
        let mut store = ParamStore::new(DType::F64, &dev, 9);
        MappingNetwork::new(&mut store, &cfg).unwrap();
        let mut values = store.snapshot().unwrap();
        let mut r = rng(1);
        for (name, t) in values.iter_mut() {
            *t = if name.ends_with(".weight") {
                t.zeros_like().unwrap()
            } else {
                randn(&mut r, t.dims(), 1.0)
            };
        }
        let mut frozen = ParamStore::frozen(values.clone(), DType::F64, &dev);
        let g = MappingNetwork::new(&mut frozen, &cfg).unwrap();
        let expected = Tensor::stack(
            &(0..10).map(|l| values[&format!("map.head{l}.bias")].clone()).collect::<Vec<_>>(),
            0,
        )
        .unwrap();
        for seed in 0..3 {
            let z = l2_normalize(&randn(&mut rng(seed), &[1, 6], 1.0)).unwrap();
            let w = g.forward(&z).unwrap().w_id.0.squeeze(0).unwrap();
            assert_eq!(max_abs_diff(&w, &expected), 0.0);
        }
    }

    #[test]
    fn unnormalised_input_is_flagged() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, &dev, 9);
        let g = MappingNetwork::new(&mut store, &small()).unwrap();
        let z = l2_normalize(&randn(&mut rng(4), &[2, 6], 1.0)).unwrap();
        let scaled = (&z * 3.0).unwrap();
        let a = g.forward(&z).unwrap();
        let b = g.forward(&scaled).unwrap();
        assert!(b.renormalized);
        assert!(max_abs_diff(&a.w_id.0, &b.w_id.0) < 1e-12);
        assert!(g.forward(&randn(&mut rng(4), &[2, 5], 1.0)).is_err());
    }
}
