//! Dual spatial attention over a masked feature map.
//!
//! With `q, k, v` from `1×1` convolutions and `d_k` the key width:
//!
//! * cross pass: each hole position attends over background positions;
//! * self pass: each hole position attends over hole positions.
//!
//! Both use `softmax(q·kᵀ/√d_k)·v` restricted to the allowed keys. The sum
//! is added to the input at hole positions only, so background features pass
//! through untouched.

use candle_core::{DType, Tensor, D};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Conv2d, ParamStore};

const MASKED_LOGIT: f64 = -1e9;

pub struct DualSpatialAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    key_dim: usize,
}

impl DualSpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, key_dim: usize) -> Result<Self> {
        Ok(Self {
            query: Conv2d::new(store, &format!("{name}.query"), channels, key_dim, 1, 1, 0, 1.0)?,
            key: Conv2d::new(store, &format!("{name}.key"), channels, key_dim, 1, 1, 0, 1.0)?,
            value: Conv2d::new(store, &format!("{name}.value"), channels, channels, 1, 1, 0, 1.0)?,
            key_dim,
        })
    }

    /// `features` is `N×C×H×W`, `mask` is `N×1×H×W` with holes at 0.
    pub fn forward(&self, features: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = features.dims4()?;
        if mask.dims() != [n, 1, h, w] {
            return Err(dim_err!("attention mask {:?} does not fit features {:?}", mask.dims(), features.dims()));
        }
        let bg_count = mask.flatten_from(1)?.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if bg_count.iter().any(|&b| b == 0.0) {
            return Err(Error::Attention("no background positions to attend over".into()));
        }
        let hole_count = bg_count.iter().map(|b| (h * w) as f64 - b).sum::<f64>();
        if hole_count == 0.0 {
            return Ok(features.clone());
        }
        let hw = h * w;
        let tokens = |t: Tensor, ch: usize| -> Result<Tensor> {
            Ok(t.reshape((n, ch, hw))?.transpose(1, 2)?.contiguous()?)
        };
        let q = tokens(self.query.forward(features)?, self.key_dim)?;
        let k = tokens(self.key.forward(features)?, self.key_dim)?;
        let v = tokens(self.value.forward(features)?, c)?;
        let logits = (q.matmul(&k.transpose(1, 2)?)? / (self.key_dim as f64).sqrt())?;

        let bg = mask.reshape((n, 1, hw))?;
        let hole = bg.affine(-1.0, 1.0)?;
        let bias = |allowed: &Tensor| allowed.affine(-MASKED_LOGIT, MASKED_LOGIT);
        let cross = softmax_last(&logits.broadcast_add(&bias(&bg)?)?)?.matmul(&v)?;
        let inner = softmax_last(&logits.broadcast_add(&bias(&hole)?)?)?.matmul(&v)?;

        let update = (cross + inner)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        let keep = mask.affine(-1.0, 1.0)?;
        Ok((features + update.broadcast_mul(&keep)?)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BinaryMask, PatchRect};
    use crate::testing::{randn, rng, to_vec};
    use candle_core::Device;

    fn naive(att: &DualSpatialAttention, f: &[f64], m: &[f64], c: usize, hw: usize) -> Vec<f64> {
        let wq = to_vec(&att.query.weight);
        let bq = to_vec(att.query.bias.as_ref().unwrap());
        let wk = to_vec(&att.key.weight);
        let bk = to_vec(att.key.bias.as_ref().unwrap());
        let wv = to_vec(&att.value.weight);
        let bv = to_vec(att.value.bias.as_ref().unwrap());
        let dk = bq.len();
        let proj = |w: &[f64], b: &[f64], out: usize, p: usize| -> Vec<f64> {
            (0..out).map(|o| b[o] + (0..c).map(|i| w[o * c + i] * f[i * hw + p]).sum::<f64>()).collect()
        };
        let qs: Vec<_> = (0..hw).map(|p| proj(&wq, &bq, dk, p)).collect();
        let ks: Vec<_> = (0..hw).map(|p| proj(&wk, &bk, dk, p)).collect();
        let vs: Vec<_> = (0..hw).map(|p| proj(&wv, &bv, c, p)).collect();
        let mut out = f.to_vec();
        for p in 0..hw {
            if m[p] == 1.0 {
                continue;
            }
            for want in [1.0, 0.0] {
                let keys: Vec<usize> = (0..hw).filter(|&j| m[j] == want).collect();
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&j| (0..dk).map(|d| qs[p][d] * ks[j][d]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (idx, &j) in keys.iter().enumerate() {
                    let a = (scores[idx] - mx).exp() / z;
                    for ch in 0..c {
                        out[ch * hw + p] += a * vs[j][ch];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, &dev, 8);
        let att = DualSpatialAttention::new(&mut store, "dsa", 5, 4).unwrap();
        let f = randn(&mut rng(3), &[1, 5, 8, 8], 1.0);
        let mask = BinaryMask::new(8, 8, PatchRect { left: 2, top: 1, right: 5, bottom: 4 }).unwrap();
        let m = mask.to_tensor(DType::F64, &dev).unwrap();
        let got = to_vec(&att.forward(&f, &m).unwrap());
        let want = naive(&att, &to_vec(&f), &mask.values(), 5, 64);
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!((g - w).abs() < 1e-5, "{i}: {g} vs {w}");
            if mask.values()[i % 64] == 1.0 {
                assert_eq!(g.to_bits(), to_vec(&f)[i].to_bits());
            }
        }
    }

    #[test]
    fn pass_through_and_uniform_background() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F64, &dev, 8);
        let att = DualSpatialAttention::new(&mut store, "dsa", 3, 3).unwrap();
        let f = randn(&mut rng(3), &[2, 3, 4, 4], 1.0);
        let ones = Tensor::ones((2, 1, 4, 4), DType::F64, &dev).unwrap();
        assert_eq!(to_vec(&att.forward(&f, &ones).unwrap()), to_vec(&f));
        let zeros = Tensor::zeros((2, 1, 4, 4), DType::F64, &dev).unwrap();
        assert!(matches!(att.forward(&f, &zeros), Err(Error::Attention(_))));

        // Identity value projection, one hole pixel, constant background v.
        let mut values = store.snapshot().unwrap();
        values.insert("dsa.value.weight".into(), Tensor::eye(3, DType::F64, &dev).unwrap().reshape((3, 3, 1, 1)).unwrap());
        let mut frozen = ParamStore::frozen(values, DType::F64, &dev);
        let att = DualSpatialAttention::new(&mut frozen, "dsa", 3, 3).unwrap();
        let v = [0.3, -1.2, 0.7];
        let mut data = Vec::new();
        for ch in v {
            data.extend(std::iter::repeat(ch).take(16));
        }
        data[5] = 2.0;
        data[16 + 5] = 2.0;
        data[32 + 5] = 2.0;
        let f = Tensor::from_vec(data, (1, 3, 4, 4), &dev).unwrap();
        let mask = BinaryMask::new(4, 4, PatchRect { left: 1, top: 1, right: 1, bottom: 1 }).unwrap();
        let out = to_vec(&att.forward(&f, &mask.to_tensor(DType::F64, &dev).unwrap()).unwrap());
        // Self pass over the single hole pixel returns its own value, 2.0.
        for (ch, vc) in v.iter().enumerate() {
            assert!((out[ch * 16 + 5] - (2.0 + vc + 2.0)).abs() < 1e-12);
        }
    }
}
