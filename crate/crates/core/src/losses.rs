//! Loss terms for both stages and the two critic objectives.
//!
//! Image losses return the batch mean of per-sample values, as rank-0
//! tensors that stay on the autograd graph.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::masks::{compose_output, stack_masks, BinaryMask, DiscountedMask};
use crate::networks::{Critic, FrBackbone};
use crate::nn::layers::{leaky_relu, softplus};
use crate::nn::{Conv2d, ParamStore};

/// Balance weights. `r1_coeff` is the usual `γ`; the penalty added to the
/// critic loss is `γ/2 · E‖∇D‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lambda_lpips: f64,
    pub lambda_dis: f64,
    pub lambda_bv: f64,
    pub gp_coeff: f64,
    pub r1_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_rec: 1.0,
            lambda_lpips: 1.0,
            lambda_dis: 1.0,
            lambda_bv: 0.01,
            gp_coeff: 10.0,
            r1_coeff: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_adv", self.lambda_adv),
            ("lambda_rec", self.lambda_rec),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_dis", self.lambda_dis),
            ("lambda_bv", self.lambda_bv),
            ("gp_coeff", self.gp_coeff),
            ("r1_coeff", self.r1_coeff),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

fn per_sample_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(1)?)
}

/// `1 − cos(e_x, e_t)` averaged over the batch; the target side is detached.
pub fn adv_loss_embeddings(e_x: &Tensor, e_t: &Tensor) -> Result<Tensor> {
    check_same(e_x, e_t, "adversarial loss")?;
    let cos = crate::networks::fr::cosine_similarity(e_x, &e_t.detach())?;
    Ok(cos.affine(-1.0, 1.0)?.mean_all()?)
}

pub fn adv_loss(x: &Tensor, x_t: &Tensor, fr: &dyn FrBackbone) -> Result<Tensor> {
    check_same(x, x_t, "adversarial loss")?;
    adv_loss_embeddings(&fr.embed(x)?, &fr.embed(x_t)?)
}

/// Per-sample pixel weights for the recovery losses: all ones for same-id
/// pairs, the discounted mask otherwise. `N×1×H×W`.
pub fn recovery_weights(
    same_id: &[bool],
    discounted: &[DiscountedMask],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if same_id.len() != discounted.len() || same_id.is_empty() {
        return Err(dim_err!("{} pair flags for {} masks", same_id.len(), discounted.len()));
    }
    let (h, w) = (discounted[0].height(), discounted[0].width());
    let mut data = Vec::with_capacity(same_id.len() * h * w);
    for (&same, md) in same_id.iter().zip(discounted) {
        if (md.height(), md.width()) != (h, w) {
            return Err(dim_err!("mixed discounted mask sizes"));
        }
        if same {
            data.extend(std::iter::repeat(1.0).take(h * w));
        } else {
            data.extend_from_slice(md.values());
        }
    }
    Ok(Tensor::from_vec(data, (same_id.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

fn weighted_half_sq(diff: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = diff.dims4()?;
    if weights.dims() != [n, 1, h, w] {
        return Err(dim_err!("weights {:?} do not fit residual {:?}", weights.dims(), diff.dims()));
    }
    let r = diff.broadcast_mul(weights)?;
    Ok(per_sample_sum(&r.sqr()?)?.mean_all()?.affine(0.5, 0.0)?)
}

/// Stage 1: `½‖(x_syn − x_s)·W‖²` with `W` from [`recovery_weights`].
pub fn recovery_loss_stage1(x_syn: &Tensor, x_s: &Tensor, weights: &Tensor) -> Result<Tensor> {
    check_same(x_syn, x_s, "stage-1 recovery loss")?;
    weighted_half_sq(&(x_syn - x_s)?, weights)
}

/// Stage 2: anchored to `x_s` for same-id pairs and to the stage-1 output
/// otherwise, weighted by [`recovery_weights`].
pub fn recovery_loss_stage2(
    x_refine: &Tensor,
    x_out: &Tensor,
    x_s: &Tensor,
    same_id: &[bool],
    weights: &Tensor,
) -> Result<Tensor> {
    check_same(x_refine, x_out, "stage-2 recovery loss")?;
    check_same(x_refine, x_s, "stage-2 recovery loss")?;
    let n = x_refine.dim(0)?;
    if same_id.len() != n {
        return Err(dim_err!("{} pair flags for batch of {n}", same_id.len()));
    }
    let sel: Vec<f64> = same_id.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
    let sel = Tensor::from_vec(sel, (n, 1, 1, 1), x_refine.device())?.to_dtype(x_refine.dtype())?;
    let anchor = (x_s.broadcast_mul(&sel)? + x_out.broadcast_mul(&sel.affine(-1.0, 1.0)?)?)?;
    weighted_half_sq(&(x_refine - anchor)?, weights)
}

/// Boundary variance of `x = x_s·M + x_refine·(1 − M)` across the four
/// edges of each rect, halved and averaged over the batch.
pub fn boundary_variance_loss(x_refine: &Tensor, x_s: &Tensor, masks: &[BinaryMask]) -> Result<Tensor> {
    check_same(x_refine, x_s, "boundary variance loss")?;
    let (n, _, h, w) = x_refine.dims4()?;
    if masks.len() != n {
        return Err(dim_err!("{} masks for batch of {n}", masks.len()));
    }
    let m = stack_masks(masks, x_refine.dtype(), x_refine.device())?;
    let x = compose_output(x_refine, x_s, &m)?;
    let mut per = Vec::with_capacity(n);
    for (i, mask) in masks.iter().enumerate() {
        let r = mask
            .rect()
            .ok_or_else(|| Error::Precondition("boundary variance needs a hole".into()))?;
        if !r.strictly_inside(h, w) {
            return Err(Error::Precondition(format!("rect {r} touches the image border")));
        }
        let xi = x.get(i)?;
        let rows = r.bottom - r.top + 1;
        let cols = r.right - r.left + 1;
        let col = |c: usize| xi.narrow(1, r.top, rows)?.narrow(2, c, 1);
        let row = |t: usize| xi.narrow(1, t, 1)?.narrow(2, r.left, cols);
        let pairs = [
            (col(r.left)?, col(r.left - 1)?),
            (col(r.right)?, col(r.right + 1)?),
            (row(r.top)?, row(r.top - 1)?),
            (row(r.bottom)?, row(r.bottom + 1)?),
        ];
        let mut total: Option<Tensor> = None;
        for (a, b) in pairs {
            let s = (a - b)?.sqr()?.sum_all()?;
            total = Some(match total {
                Some(t) => (t + s)?,
                None => s,
            });
        }
        per.push(total.expect("four sides"));
    }
    Ok(Tensor::stack(&per, 0)?.mean_all()?.affine(0.5, 0.0)?)
}

/// Feature stack used by the perceptual loss and FID.
pub trait PerceptualExtractor {
    /// One `N×C_l×H_l×W_l` map per layer.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    pub extractor: String,
    pub seed: u64,
    /// Output channels of each conv layer; the first keeps resolution, the
    /// rest halve it.
    pub channels: Vec<usize>,
    pub layer_weights: Vec<f64>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            extractor: "random-conv3".into(),
            seed: 1234,
            channels: vec![16, 32, 64],
            layer_weights: vec![1.0, 1.0, 1.0],
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("perceptual extractor needs at least one non-empty layer".into()));
        }
        if self.layer_weights.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} layers",
                self.layer_weights.len(),
                self.channels.len()
            )));
        }
        if self.layer_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("layer weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed random conv stack, seeded, never trained.
pub struct RandomConvExtractor {
    name: String,
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(cfg: &PerceptualConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let build = |store: &mut ParamStore| -> Result<Vec<Conv2d>> {
            let mut c_in = 3;
            let mut convs = Vec::new();
            for (i, &c) in cfg.channels.iter().enumerate() {
                let stride = if i == 0 { 1 } else { 2 };
                convs.push(Conv2d::new(store, &format!("lpips.l{i}"), c_in, c, 3, stride, 1, 1.4)?);
                c_in = c;
            }
            Ok(convs)
        };
        let mut seeded = ParamStore::new(dtype, device, cfg.seed);
        build(&mut seeded)?;
        let mut frozen = ParamStore::frozen(seeded.snapshot()?, dtype, device);
        Ok(Self { name: cfg.extractor.clone(), convs: build(&mut frozen)? })
    }
}

impl PerceptualExtractor for RandomConvExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Unit-normalises each spatial position across channels.
pub fn channel_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Per-sample perceptual distance, `N`.
pub fn lpips_per_sample(
    x: &Tensor,
    y: &Tensor,
    extractor: &dyn PerceptualExtractor,
    layer_weights: &[f64],
) -> Result<Tensor> {
    check_same(x, y, "perceptual loss")?;
    let fx = extractor.features(x)?;
    let fy = extractor.features(y)?;
    if fx.len() != layer_weights.len() {
        return Err(Error::Config(format!("{} layer weights for {} layers", layer_weights.len(), fx.len())));
    }
    let mut total: Option<Tensor> = None;
    for ((a, b), &wl) in fx.iter().zip(&fy).zip(layer_weights) {
        let d = ((channel_normalize(a)? - channel_normalize(b)?)? * wl)?;
        let term = d.sqr()?.sum(1)?.flatten_from(1)?.mean(1)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("extractor produced no layers".into()))
}

pub fn lpips(x: &Tensor, y: &Tensor, extractor: &dyn PerceptualExtractor, layer_weights: &[f64]) -> Result<Tensor> {
    Ok(lpips_per_sample(x, y, extractor, layer_weights)?.mean_all()?)
}

/// WGAN-GP term on `x̂ = u·x_real + (1 − u)·x_fake`, `u` one value per
/// sample in `[0, 1]`.
pub fn gradient_penalty(critic: &dyn Critic, x_real: &Tensor, x_fake: &Tensor, u: &Tensor) -> Result<Tensor> {
    check_same(x_real, x_fake, "gradient penalty")?;
    let n = x_real.dim(0)?;
    let u = u.reshape((n, 1, 1, 1))?.to_dtype(x_real.dtype())?;
    let x_hat = (x_real.detach().broadcast_mul(&u)? + x_fake.detach().broadcast_mul(&u.affine(-1.0, 1.0)?)?)?;
    let g = critic.input_grad(&x_hat)?;
    let norm = (per_sample_sum(&g.sqr()?)? + 1e-12)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

/// `E‖∇D(x_real)‖²`.
pub fn r1_penalty(critic: &dyn Critic, x_real: &Tensor) -> Result<Tensor> {
    let g = critic.input_grad(&x_real.detach())?;
    Ok(per_sample_sum(&g.sqr()?)?.mean_all()?)
}

/// Logistic critic loss `softplus(−D(real)) + softplus(D(fake))`.
pub fn logistic_critic_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((softplus(&real.neg()?)?.mean_all()? + softplus(fake)?.mean_all()?)?)
}

/// Non-saturating generator term `−log σ(D(fake))`.
pub fn logistic_generator_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake.neg()?)?.mean_all()?)
}

/// Wasserstein critic loss `E D(fake) − E D(real)`.
pub fn wasserstein_critic_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok((fake.mean_all()? - real.mean_all()?)?)
}

pub fn wasserstein_generator_loss(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.mean_all()?.neg()?)
}

#[derive(Debug, Clone)]
pub struct Stage1Terms {
    pub adv: Tensor,
    pub rec: Tensor,
    pub lpips: Tensor,
    pub dis: Tensor,
}

#[derive(Debug, Clone)]
pub struct Stage2Terms {
    pub adv: Tensor,
    pub rec: Tensor,
    pub bv: Tensor,
    pub dis: Tensor,
    pub lpips: Tensor,
}

fn weighted_sum(terms: &[(&Tensor, f64)]) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (t, w) in terms {
        let s = t.affine(*w, 0.0)?;
        acc = Some(match acc {
            Some(a) => (a + s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::Config("no loss terms".into()))
}

pub fn stage1_total(t: &Stage1Terms, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    weighted_sum(&[
        (&t.adv, w.lambda_adv),
        (&t.rec, w.lambda_rec),
        (&t.lpips, w.lambda_lpips),
        (&t.dis, w.lambda_dis),
    ])
}

pub fn stage2_total(t: &Stage2Terms, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    weighted_sum(&[
        (&t.adv, w.lambda_adv),
        (&t.rec, w.lambda_rec),
        (&t.bv, w.lambda_bv),
        (&t.dis, w.lambda_dis),
        (&t.lpips, w.lambda_lpips),
    ])
}
