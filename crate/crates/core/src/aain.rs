//! AdaIN and the attention-guided AdaIN (AAIN) layer.
//!
//! An AAIN layer modulates a normalised feature map with two style sources:
//! attacker styles `(γ_t, β_t)` projected from the source image's style
//! vector, and fused styles `(γ_f, β_f)` projected from the concatenation of
//! the style vector and the target's identity vector. A background-patch
//! attention map `D_h` (exactly `1` on the background) decides, per hole
//! pixel, how much of each to use. Background pixels always receive the
//! attacker styles, so the layer degenerates to plain AdaIN when there is no
//! hole.

use candle_core::Tensor;

use crate::error::{dim_err, Result};
use crate::nn::layers::{instance_norm, sigmoid};
use crate::nn::{Conv2d, Init, Linear, ParamStore};

/// Instance-norm denominator offset.
pub const NORM_EPS: f64 = 1e-8;

/// Per-layer style vectors in the extended latent space, `N×L×D`.
#[derive(Debug, Clone)]
pub struct StyleEmbedding(pub Tensor);

impl StyleEmbedding {
    pub fn layers(&self) -> Result<usize> {
        Ok(self.0.dim(1)?)
    }

    pub fn style_dim(&self) -> Result<usize> {
        Ok(self.0.dim(2)?)
    }

    /// `N×D` style vector of one layer.
    pub fn layer(&self, index: usize) -> Result<Tensor> {
        let l = self.layers()?;
        if index >= l {
            return Err(dim_err!("style layer {index} out of range for {l} layers"));
        }
        Ok(self.0.narrow(1, index, 1)?.squeeze(1)?)
    }
}

/// Per-channel modulation, each `N×C`.
#[derive(Debug, Clone)]
pub struct StyleParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Background-patch attention, `N×1×H×W`.
#[derive(Debug, Clone)]
pub struct AttentionMap(pub Tensor);

fn as_nc11(v: &Tensor) -> Result<Tensor> {
    let (n, c) = v.dims2()?;
    Ok(v.reshape((n, c, 1, 1))?)
}

/// `gamma·(F − μ)/(σ + ε) + beta` with per-sample, per-channel statistics
/// over spatial positions. `gamma`, `beta` are `N×C` (or `1×C`).
pub fn adain(features: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = features.dim(1)?;
    if gamma.dim(1)? != c || beta.dim(1)? != c {
        return Err(dim_err!(
            "style has {}/{} channels, features have {c}",
            gamma.dim(1)?,
            beta.dim(1)?
        ));
    }
    let normed = instance_norm(features, NORM_EPS)?;
    Ok(normed.broadcast_mul(&as_nc11(gamma)?)?.broadcast_add(&as_nc11(beta)?)?)
}

fn split_beta_gamma(out: &Tensor, channels: usize) -> Result<StyleParams> {
    Ok(StyleParams {
        beta: out.narrow(1, 0, channels)?,
        gamma: out.narrow(1, channels, channels)?,
    })
}

/// One attention-guided AdaIN layer with its own projections.
#[derive(Debug, Clone)]
pub struct AainLayer {
    pub layer: usize,
    pub channels: usize,
    pub style_dim: usize,
    pub prior_channels: usize,
    /// `D → [β_t, γ_t]`
    pub lin_tex: Linear,
    /// `2D → [β_f, γ_f]`
    pub lin_fuse: Linear,
    /// `C_p + C → 1`, 3×3, zero padded.
    pub attn_conv: Conv2d,
}

impl AainLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layer: usize,
        channels: usize,
        style_dim: usize,
        prior_channels: usize,
    ) -> Result<Self> {
        // γ starts at 1 and β at 0 so a fresh layer is close to identity.
        let lin_tex = Linear::with_bias(
            store,
            &format!("{name}.lin_tex"),
            style_dim,
            2 * channels,
            0.25,
            Init::Halves(0.0, 1.0),
        )?;
        let lin_fuse = Linear::with_bias(
            store,
            &format!("{name}.lin_fuse"),
            2 * style_dim,
            2 * channels,
            0.25,
            Init::Halves(0.0, 1.0),
        )?;
        let attn_conv = Conv2d::new(
            store,
            &format!("{name}.attn"),
            prior_channels + channels,
            1,
            3,
            1,
            1,
            0.5,
        )?;
        Ok(Self { layer, channels, style_dim, prior_channels, lin_tex, lin_fuse, attn_conv })
    }

    /// Attacker styles `t` from `w_sty[layer]` and fused styles `f` from
    /// `[w_sty[layer], w_id[layer]]`.
    pub fn project_styles(
        &self,
        w_sty: &StyleEmbedding,
        w_id: &StyleEmbedding,
    ) -> Result<(StyleParams, StyleParams)> {
        let s = w_sty.layer(self.layer)?;
        let i = w_id.layer(self.layer)?;
        if s.dim(1)? != self.style_dim || i.dim(1)? != self.style_dim {
            return Err(dim_err!("layer {} expects style dim {}", self.layer, self.style_dim));
        }
        let t = split_beta_gamma(&self.lin_tex.forward(&s)?, self.channels)?;
        let f = split_beta_gamma(&self.lin_fuse.forward(&Tensor::cat(&[&s, &i], 1)?)?, self.channels)?;
        Ok((t, f))
    }

    /// `σ(Conv([F_p, F_in]))·(1 − M) + M`.
    pub fn attention_map(&self, prior: &Tensor, f_in: &Tensor, mask: &Tensor) -> Result<AttentionMap> {
        let (n, _, h, w) = f_in.dims4()?;
        let (pn, _, ph, pw) = prior.dims4()?;
        let (_, _, mh, mw) = mask.dims4()?;
        if (ph, pw) != (h, w) || (mh, mw) != (h, w) || pn != n {
            return Err(dim_err!(
                "attention inputs disagree: prior {:?}, features {:?}, mask {:?}",
                prior.dims(),
                f_in.dims(),
                mask.dims()
            ));
        }
        let logits = self.attn_conv.forward(&Tensor::cat(&[prior, f_in], 1)?)?;
        let inv = mask.affine(-1.0, 1.0)?;
        let d = sigmoid(&logits)?.broadcast_mul(&inv)?.broadcast_add(mask)?;
        Ok(AttentionMap(d))
    }

    /// Runs the layer on `F_i` (un-normalised block features).
    pub fn forward(
        &self,
        features: &Tensor,
        prior: &Tensor,
        w_sty: &StyleEmbedding,
        w_id: &StyleEmbedding,
        mask: &Tensor,
    ) -> Result<Tensor> {
        if features.dim(1)? != self.channels {
            return Err(dim_err!(
                "layer {} expects {} channels, got {}",
                self.layer,
                self.channels,
                features.dim(1)?
            ));
        }
        let normed = instance_norm(features, NORM_EPS)?;
        let (t, f) = self.project_styles(w_sty, w_id)?;
        let d_h = self.attention_map(prior, &normed, mask)?;
        let (gamma, beta) = fuse_styles(&t, &f, &d_h, mask)?;
        Ok(normed.mul(&gamma)?.add(&beta)?)
    }
}

/// Spatial style fields `(Γ, B)`, each `N×C×H×W`:
/// `γ_syn = D_h·γ_t + (1 − D_h)·γ_f`, `Γ = M·γ_t + (1 − M)·γ_syn`, and the
/// same for β.
pub fn fuse_styles(
    t: &StyleParams,
    f: &StyleParams,
    d_h: &AttentionMap,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, _, h, w) = d_h.0.dims4()?;
    let (_, c) = t.gamma.dims2()?;
    if f.gamma.dims2()? != t.gamma.dims2()? || t.beta.dims() != t.gamma.dims() {
        return Err(dim_err!("style parameter shapes disagree"));
    }
    let (mn, _, mh, mw) = mask.dims4()?;
    if (mh, mw) != (h, w) || (mn != n && mn != 1) {
        return Err(dim_err!("mask {:?} does not match attention {:?}", mask.dims(), d_h.0.dims()));
    }
    let shape = (n, c, h, w);
    let d = d_h.0.broadcast_as(shape)?;
    let inv_d = d.affine(-1.0, 1.0)?;
    let m = mask.broadcast_as(shape)?;
    let inv_m = m.affine(-1.0, 1.0)?;
    let field = |bg: &Tensor, fused: &Tensor| -> Result<Tensor> {
        let bg = as_nc11(bg)?.broadcast_as(shape)?;
        let fused = as_nc11(fused)?.broadcast_as(shape)?;
        let syn = (d.mul(&bg)? + inv_d.mul(&fused)?)?;
        Ok((m.mul(&bg)? + inv_m.mul(&syn)?)?)
    };
    Ok((field(&t.gamma, &f.gamma)?, field(&t.beta, &f.beta)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{BinaryMask, PatchRect};
    use crate::nn::layers::scalar;
    use crate::testing::{fd_relative_error, max_abs_diff, randn, rng, to_vec};
    use candle_core::{DType, Device, Var};
    use std::collections::BTreeMap;

    struct Instance {
        layer: AainLayer,
        store: ParamStore,
        features: Tensor,
        prior: Tensor,
        w_sty: StyleEmbedding,
        w_id: StyleEmbedding,
        mask: Tensor,
    }

    fn instance(seed: u64, hole: Option<PatchRect>) -> Instance {
        let dev = Device::Cpu;
        let mut r = rng(seed);
        let (n, c, cp, h, w, d, l) = (2, 4, 3, 8, 8, 6, 3);
        let mut store = ParamStore::new(DType::F64, &dev, seed);
        let layer = AainLayer::new(&mut store, "aain", 1, c, d, cp).unwrap();
        // Perturb biases so the test does not depend on the identity-ish init.
        let mut vals = store.snapshot().unwrap();
        for (k, v) in vals.iter_mut() {
            if k.ends_with("bias") {
                *v = (v.clone() + randn(&mut r, v.dims(), 0.3)).unwrap();
            }
        }
        store.assign(&vals).unwrap();
        let mask = match hole {
            Some(rect) => BinaryMask::new(h, w, rect).unwrap(),
            None => BinaryMask::no_hole(h, w),
        };
        Instance {
            layer,
            store,
            features: randn(&mut r, &[n, c, h, w], 1.5),
            prior: randn(&mut r, &[n, cp, h, w], 1.0),
            w_sty: StyleEmbedding(randn(&mut r, &[n, l, d], 1.0)),
            w_id: StyleEmbedding(randn(&mut r, &[n, l, d], 1.0)),
            mask: mask.to_tensor(DType::F64, &dev).unwrap(),
        }
    }

    /// Plain-loop reference for `AainLayer::forward`.
    fn naive_forward(inst: &Instance) -> Vec<f64> {
        let p: BTreeMap<String, Vec<f64>> =
            inst.store.snapshot().unwrap().into_iter().map(|(k, v)| (k, to_vec(&v))).collect();
        let (n, c, h, w) = inst.features.dims4().unwrap();
        let cp = inst.prior.dim(1).unwrap();
        let (l, d) = (inst.w_sty.0.dim(1).unwrap(), inst.w_sty.0.dim(2).unwrap());
        let feat = to_vec(&inst.features);
        let prior = to_vec(&inst.prior);
        let sty = to_vec(&inst.w_sty.0);
        let idv = to_vec(&inst.w_id.0);
        let mask = to_vec(&inst.mask);
        let layer = inst.layer.layer;
        let linear = |wname: &str, x: &[f64], d_out: usize| -> Vec<f64> {
            let wt = &p[&format!("{wname}.weight")];
            let b = &p[&format!("{wname}.bias")];
            (0..d_out)
                .map(|o| b[o] + (0..x.len()).map(|i| wt[o * x.len() + i] * x[i]).sum::<f64>())
                .collect()
        };
        let mut out = vec![0.0; n * c * h * w];
        for s in 0..n {
            let ws: Vec<f64> = (0..d).map(|j| sty[(s * l + layer) * d + j]).collect();
            let wi: Vec<f64> = (0..d).map(|j| idv[(s * l + layer) * d + j]).collect();
            let tex = linear("aain.lin_tex", &ws, 2 * c);
            let cat: Vec<f64> = ws.iter().chain(wi.iter()).copied().collect();
            let fuse = linear("aain.lin_fuse", &cat, 2 * c);
            // normalise
            let mut normed = vec![0.0; c * h * w];
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                let vals = &feat[base..base + h * w];
                let mean = vals.iter().sum::<f64>() / (h * w) as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (h * w) as f64;
                let sd = var.sqrt();
                for k in 0..h * w {
                    normed[ch * h * w + k] = (vals[k] - mean) / (sd + NORM_EPS);
                }
            }
            // attention conv over [prior, normed]
            let cw = &p["aain.attn.weight"];
            let cb = p["aain.attn.bias"][0];
            let cin = cp + c;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = cb;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (yy, xx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let (yy, xx) = (yy as usize, xx as usize);
                                let v = if ci < cp {
                                    prior[((s * cp + ci) * h + yy) * w + xx]
                                } else {
                                    normed[(ci - cp) * h * w + yy * w + xx]
                                };
                                acc += cw[((ci) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    let m = mask[y * w + x];
                    let dh = (1.0 / (1.0 + (-acc).exp())) * (1.0 - m) + m;
                    for ch in 0..c {
                        let (bt, gt) = (tex[ch], tex[c + ch]);
                        let (bf, gf) = (fuse[ch], fuse[c + ch]);
                        let g_syn = dh * gt + (1.0 - dh) * gf;
                        let b_syn = dh * bt + (1.0 - dh) * bf;
                        let g = m * gt + (1.0 - m) * g_syn;
                        let b = m * bt + (1.0 - m) * b_syn;
                        out[((s * c + ch) * h + y) * w + x] = g * normed[ch * h * w + y * w + x] + b;
                    }
                }
            }
        }
        out
    }

    fn run(inst: &Instance) -> Tensor {
        inst.layer
            .forward(&inst.features, &inst.prior, &inst.w_sty, &inst.w_id, &inst.mask)
            .unwrap()
    }

    #[test]
    fn adain_examples() {
        let dev = Device::Cpu;
        // Per-channel mean 0 and population std 1.
        let f = Tensor::new(&[1.0f64, -1.0, 1.0, -1.0], &dev).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let g = Tensor::new(&[[2.0f64]], &dev).unwrap();
        let b = Tensor::new(&[[0.5f64]], &dev).unwrap();
        let out = to_vec(&adain(&f, &g, &b).unwrap());
        let want = [2.5, -1.5, 2.5, -1.5];
        for (o, w) in out.iter().zip(want) {
            assert!((o - w).abs() < 1e-7);
        }

        let mut r = rng(1);
        let x = randn(&mut r, &[2, 3, 5, 5], 4.0);
        let ones = Tensor::ones((2, 3), DType::F64, &dev).unwrap();
        let zeros = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let y = adain(&x, &ones, &zeros).unwrap();
        let (mean, std) = crate::nn::layers::spatial_moments(&y).unwrap();
        assert!(to_vec(&mean).iter().all(|m| m.abs() < 1e-9));
        assert!(to_vec(&std).iter().all(|s| (s - 1.0).abs() < 1e-6));

        let constant = Tensor::full(3.0f64, (1, 2, 4, 4), &dev).unwrap();
        let beta = Tensor::new(&[[0.25f64, -0.75]], &dev).unwrap();
        let gam = Tensor::new(&[[5.0f64, 2.0]], &dev).unwrap();
        let y = adain(&constant, &gam, &beta).unwrap();
        let v = to_vec(&y);
        assert!(v[..16].iter().all(|x| (x - 0.25).abs() < 1e-9));
        assert!(v[16..].iter().all(|x| (x + 0.75).abs() < 1e-9));
        assert!(adain(&constant, &Tensor::ones((1, 3), DType::F64, &dev).unwrap(), &beta).is_err());
    }

    #[test]
    fn project_styles_examples() {
        let dev = Device::Cpu;
        let c = 3;
        let d = 2 * c;
        let mut store = ParamStore::new(DType::F64, &dev, 0);
        let layer = AainLayer::new(&mut store, "a", 0, c, d, 1).unwrap();
        let mut vals = store.snapshot().unwrap();
        vals.insert("a.lin_tex.weight".into(), Tensor::eye(d, DType::F64, &dev).unwrap());
        vals.insert("a.lin_tex.bias".into(), Tensor::zeros(d, DType::F64, &dev).unwrap());
        let bias = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &dev).unwrap();
        vals.insert("a.lin_fuse.weight".into(), Tensor::zeros((2 * c, 2 * d), DType::F64, &dev).unwrap());
        vals.insert("a.lin_fuse.bias".into(), bias);
        store.assign(&vals).unwrap();

        let mut r = rng(3);
        let w_sty = StyleEmbedding(Tensor::ones((1, 2, d), DType::F64, &dev).unwrap());
        let w_id = StyleEmbedding(randn(&mut r, &[1, 2, d], 1.0));
        let (t, f) = layer.project_styles(&w_sty, &w_id).unwrap();
        assert_eq!(to_vec(&t.beta), vec![1.0; c]);
        assert_eq!(to_vec(&t.gamma), vec![1.0; c]);
        assert_eq!(to_vec(&f.beta), vec![1.0, 2.0, 3.0]);
        assert_eq!(to_vec(&f.gamma), vec![4.0, 5.0, 6.0]);

        let short = StyleEmbedding(Tensor::ones((1, 0, d), DType::F64, &dev).unwrap());
        assert!(layer.project_styles(&short, &short).is_err());

        let mut frozen = ParamStore::frozen(BTreeMap::new(), DType::F64, &dev);
        assert!(matches!(
            AainLayer::new(&mut frozen, "a", 0, c, d, 1),
            Err(crate::Error::State(_))
        ));
    }

    #[test]
    fn project_styles_matches_loop_matmul() {
        let inst = instance(11, Some(PatchRect { left: 2, top: 2, right: 5, bottom: 4 }));
        let (t, f) = inst.layer.project_styles(&inst.w_sty, &inst.w_id).unwrap();
        let p = inst.store.snapshot().unwrap();
        let wt = to_vec(&p["aain.lin_fuse.weight"]);
        let bt = to_vec(&p["aain.lin_fuse.bias"]);
        let sty = to_vec(&inst.w_sty.0);
        let idv = to_vec(&inst.w_id.0);
        let (l, d, c) = (3, 6, 4);
        let fb = to_vec(&f.beta);
        let fg = to_vec(&f.gamma);
        for s in 0..2 {
            let x: Vec<f64> = (0..d)
                .map(|j| sty[(s * l + 1) * d + j])
                .chain((0..d).map(|j| idv[(s * l + 1) * d + j]))
                .collect();
            for o in 0..2 * c {
                let y = bt[o] + (0..2 * d).map(|i| wt[o * 2 * d + i] * x[i]).sum::<f64>();
                let got = if o < c { fb[s * c + o] } else { fg[s * c + o - c] };
                assert!((y - got).abs() < 1e-6);
            }
        }
        assert_eq!(t.gamma.dims(), &[2, 4]);
    }

    #[test]
    fn attention_map_examples() {
        let inst = instance(5, None);
        let normed = instance_norm(&inst.features, NORM_EPS).unwrap();
        let d = inst.layer.attention_map(&inst.prior, &normed, &inst.mask).unwrap();
        assert!(to_vec(&d.0).iter().all(|&v| v == 1.0));

        let rect = PatchRect { left: 1, top: 1, right: 6, bottom: 5 };
        let inst = instance(6, Some(rect));
        let normed = instance_norm(&inst.features, NORM_EPS).unwrap();
        let d = inst.layer.attention_map(&inst.prior, &normed, &inst.mask).unwrap();
        let v = to_vec(&d.0);
        for s in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let val = v[(s * 8 + y) * 8 + x];
                    if rect.contains(y, x) {
                        assert!(val > 0.0 && val < 1.0);
                    } else {
                        assert_eq!(val, 1.0);
                    }
                }
            }
        }

        // Zero conv → sigmoid(0) = 0.5 on the hole.
        let mut vals = inst.store.snapshot().unwrap();
        for k in ["aain.attn.weight", "aain.attn.bias"] {
            let z = vals[k].zeros_like().unwrap();
            vals.insert(k.into(), z);
        }
        inst.store.assign(&vals).unwrap();
        let d = inst.layer.attention_map(&inst.prior, &normed, &inst.mask).unwrap();
        assert!((to_vec(&d.0)[2 * 8 + 2] - 0.5).abs() < 1e-15);

        let wrong = Tensor::zeros((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(inst.layer.attention_map(&wrong, &normed, &inst.mask).is_err());
    }

    #[test]
    fn fuse_styles_examples() {
        let dev = Device::Cpu;
        let t = StyleParams {
            gamma: Tensor::new(&[[2.0f64]], &dev).unwrap(),
            beta: Tensor::new(&[[-1.0f64]], &dev).unwrap(),
        };
        let f = StyleParams {
            gamma: Tensor::new(&[[4.0f64]], &dev).unwrap(),
            beta: Tensor::new(&[[3.0f64]], &dev).unwrap(),
        };
        let hole = BinaryMask::new(1, 2, PatchRect { left: 1, top: 0, right: 1, bottom: 0 }).unwrap();
        let mask = hole.to_tensor(DType::F64, &dev).unwrap();
        let d = AttentionMap(Tensor::new(&[1.0f64, 0.5], &dev).unwrap().reshape((1, 1, 1, 2)).unwrap());
        let (g, b) = fuse_styles(&t, &f, &d, &mask).unwrap();
        assert_eq!(to_vec(&g), vec![2.0, 3.0]);
        assert_eq!(to_vec(&b), vec![-1.0, 1.0]);

        let d1 = AttentionMap(Tensor::ones((1, 1, 1, 2), DType::F64, &dev).unwrap());
        let (g, b) = fuse_styles(&t, &f, &d1, &mask).unwrap();
        assert_eq!(to_vec(&g), vec![2.0, 2.0]);
        assert_eq!(to_vec(&b), vec![-1.0, -1.0]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for seed in 0..5 {
            let inst = instance(100 + seed, Some(PatchRect { left: 1, top: 2, right: 6, bottom: 5 }));
            let got = to_vec(&run(&inst));
            let want = naive_forward(&inst);
            let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn no_hole_reduces_to_adain_and_ignores_identity() {
        let mut inst = instance(21, None);
        let out = run(&inst);
        let (t, _) = inst.layer.project_styles(&inst.w_sty, &inst.w_id).unwrap();
        let plain = adain(&inst.features, &t.gamma, &t.beta).unwrap();
        assert!(max_abs_diff(&out, &plain) < 1e-6);

        inst.w_id = StyleEmbedding(randn(&mut rng(99), inst.w_id.0.dims(), 3.0));
        let out2 = run(&inst);
        assert!(max_abs_diff(&out, &out2) < 1e-6);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let inst = instance(31, Some(PatchRect { left: 2, top: 1, right: 6, bottom: 6 }));
        let probe = randn(&mut rng(32), &[2, 4, 8, 8], 1.0);
        let loss = || -> crate::Result<f64> { scalar(&(run(&inst) * &probe)?.sum_all()?) };
        let total = (run(&inst) * &probe).unwrap().sum_all().unwrap();
        let grads = total.backward().unwrap();
        for (name, var) in inst.store.vars() {
            let g = grads.get(var.as_tensor()).unwrap().clone();
            let err = fd_relative_error(&var, &g, loss, 1e-6, 40, 7).unwrap();
            assert!(err <= 1e-4, "{name}: {err}");
        }
        // Identity embedding is an input the attack optimises through.
        let w_id = Var::from_tensor(&inst.w_id.0).unwrap();
        let emb = StyleEmbedding(w_id.as_tensor().clone());
        let f = |e: &StyleEmbedding| {
            inst.layer.forward(&inst.features, &inst.prior, &inst.w_sty, e, &inst.mask)
        };
        let grads = (f(&emb).unwrap() * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(w_id.as_tensor()).unwrap().clone();
        let err = fd_relative_error(
            &w_id,
            &g,
            || scalar(&(f(&StyleEmbedding(w_id.as_tensor().clone()))? * &probe)?.sum_all()?),
            1e-6,
            40,
            8,
        )
        .unwrap();
        assert!(err <= 1e-4, "w_id: {err}");
    }
}
