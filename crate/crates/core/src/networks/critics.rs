//! The two discriminators.
//!
//! Both are plain conv stacks with leaky-ReLU activations. Besides scoring,
//! each can return the gradient of its per-sample mean score w.r.t. the
//! input, computed by an explicit backward pass made of differentiable ops.
//! That is what the R1 and gradient-penalty terms need: the penalty's own
//! gradient w.r.t. critic weights then comes out of ordinary first-order
//! autodiff.
//!
//! Style critic (stage 1), at resolution `R = 2^k`, width `c`:
//!
//! | layer        | kernel | stride | out            |
//! |--------------|--------|--------|----------------|
//! | `stem`       | 3      | 1      | `c × R × R`    |
//! | `down{i}`    | 3      | 2      | halve until 4  |
//! | `head`       | linear | -      | `1`            |
//!
//! PatchGAN critic (stage 2), width `c`, padding 1:
//!
//! | layer   | kernel | stride | out               | receptive field |
//! |---------|--------|--------|-------------------|-----------------|
//! | `l0`    | 4      | 2      | `c × R/2`         | 4               |
//! | `l1`    | 4      | 2      | `2c × R/4`        | 10              |
//! | `l2`    | 4      | 2      | `4c × R/8`        | 22              |
//! | `out`   | 3      | 1      | `1 × R/8`         | 38              |
//!
//! Each PatchGAN score therefore sees a 38×38 patch, and neighbouring cells
//! are 8 pixels apart.

use candle_core::Tensor;

use super::check_image;
use crate::error::{Error, Result};
use crate::nn::layers::{leaky_relu, leaky_relu_slope};
use crate::nn::{Conv2d, Linear, ParamStore};

pub trait Critic {
    /// Raw scores: `N×1` for whole-image critics, `N×1×h×w` for patch critics.
    fn score(&self, x: &Tensor) -> Result<Tensor>;

    /// Per-sample mean score, `N`.
    fn mean_score(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.score(x)?;
        Ok(s.flatten_from(1)?.mean(1)?)
    }

    /// `∂ mean_score_i / ∂ x_i`, same shape as `x`, differentiable w.r.t.
    /// the critic's parameters.
    fn input_grad(&self, x: &Tensor) -> Result<Tensor>;
}

struct Trace {
    /// Input spatial size and pre-activation of every conv layer.
    layers: Vec<((usize, usize), Tensor)>,
}

fn conv_stack_forward(convs: &[&Conv2d], x: &Tensor) -> Result<(Tensor, Trace)> {
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(convs.len());
    for conv in convs {
        let hw = (h.dim(2)?, h.dim(3)?);
        let z = conv.forward(&h)?;
        h = leaky_relu(&z)?;
        layers.push((hw, z));
    }
    Ok((h, Trace { layers }))
}

fn conv_stack_backward(convs: &[&Conv2d], trace: &Trace, grad_top: Tensor) -> Result<Tensor> {
    let mut g = grad_top;
    for (conv, (hw, z)) in convs.iter().zip(&trace.layers).rev() {
        let gz = g.mul(&leaky_relu_slope(z)?)?;
        g = conv.input_vjp(&gz, *hw)?;
    }
    Ok(g)
}

pub struct StyleCritic {
    resolution: usize,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl StyleCritic {
    pub fn new(store: &mut ParamStore, resolution: usize, width: usize) -> Result<Self> {
        if !resolution.is_power_of_two() || resolution < 8 {
            return Err(Error::Config(format!("critic resolution {resolution} unsupported")));
        }
        let mut convs = vec![Conv2d::new(store, "dis.stem", 3, width, 3, 1, 1, 1.4)?];
        let mut side = resolution;
        let mut c = width;
        let mut i = 0;
        while side > 4 {
            let c_out = (c * 2).min(width * 4);
            convs.push(Conv2d::new(store, &format!("dis.down{i}"), c, c_out, 3, 2, 1, 1.4)?);
            c = c_out;
            side /= 2;
            i += 1;
        }
        let head = Linear::new(store, "dis.head", c * 16, 1)?;
        Ok(Self { resolution, convs, head })
    }

    fn refs(&self) -> Vec<&Conv2d> {
        self.convs.iter().collect()
    }
}

impl Critic for StyleCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.resolution, "style critic")?;
        let (h, _) = conv_stack_forward(&self.refs(), x)?;
        self.head.forward(&h.flatten_from(1)?)
    }

    fn input_grad(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.resolution, "style critic")?;
        let (h, trace) = conv_stack_forward(&self.refs(), x)?;
        let n = x.dim(0)?;
        // d score / d features = head weight row, per sample.
        let g = self.head.weight.broadcast_as((n, self.head.in_dim()))?.reshape(h.dims())?;
        conv_stack_backward(&self.refs(), &trace, g)
    }
}

pub struct PatchCritic {
    resolution: usize,
    convs: Vec<Conv2d>,
    out: Conv2d,
}

impl PatchCritic {
    pub fn new(store: &mut ParamStore, resolution: usize, width: usize) -> Result<Self> {
        if resolution % 8 != 0 || resolution == 0 {
            return Err(Error::Config(format!("patch critic needs a multiple of 8, got {resolution}")));
        }
        let convs = vec![
            Conv2d::new(store, "patch.l0", 3, width, 4, 2, 1, 1.4)?,
            Conv2d::new(store, "patch.l1", width, width * 2, 4, 2, 1, 1.4)?,
            Conv2d::new(store, "patch.l2", width * 2, width * 4, 4, 2, 1, 1.4)?,
        ];
        let out = Conv2d::new(store, "patch.out", width * 4, 1, 3, 1, 1, 1.0)?;
        Ok(Self { resolution, convs, out })
    }

    /// Side of each receptive field and the stride between cells.
    pub fn receptive_field() -> (usize, usize) {
        let layers = [(4usize, 2usize), (4, 2), (4, 2), (3, 1)];
        let mut rf = 1;
        let mut jump = 1;
        for (k, s) in layers {
            rf += (k - 1) * jump;
            jump *= s;
        }
        (rf, jump)
    }

    fn refs(&self) -> Vec<&Conv2d> {
        self.convs.iter().collect()
    }
}

impl Critic for PatchCritic {
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.resolution, "patch critic")?;
        let (h, _) = conv_stack_forward(&self.refs(), x)?;
        self.out.forward(&h)
    }

    fn input_grad(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x, self.resolution, "patch critic")?;
        let (h, trace) = conv_stack_forward(&self.refs(), x)?;
        let (n, _, hh, ww) = h.dims4()?;
        let g_out = Tensor::full(1.0 / (hh * ww) as f64, (n, 1, hh, ww), x.device())?.to_dtype(x.dtype())?;
        let g = self.out.input_vjp(&g_out, (hh, ww))?;
        conv_stack_backward(&self.refs(), &trace, g)
    }
}
