use candle_core::{DType, Tensor, D};

use super::conv::{conv2d, conv2d_input_vjp};
use super::params::{Init, ParamStore};
use crate::error::{dim_err, Result};

pub const LRELU_SLOPE: f64 = 0.2;

/// Square-kernel 2-D convolution with optional bias, NCHW.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Kaiming { fan_in, gain },
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias), stride, padding })
    }

    /// Same as [`Conv2d::new`] with every weight and bias set to zero.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight =
            store.get(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], Init::Zeros)?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias), stride: 1, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(dim_err!("conv expects {} input channels, got {c}", self.in_channels()));
        }
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }

    /// Vector-Jacobian product of the convolution w.r.t. its input, written
    /// with differentiable ops so it can itself be back-propagated through.
    pub fn input_vjp(&self, grad_out: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
        conv2d_input_vjp(grad_out, &self.weight, self.stride, self.padding, input_hw)
    }
}

/// Dense layer `y = x·Wᵀ + b` on `N×in` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_bias(store, name, d_in, d_out, 1.0, Init::Zeros)
    }

    pub fn with_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        bias: Init,
    ) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Kaiming { fan_in: d_in, gain },
        )?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        if d != self.in_dim() {
            return Err(dim_err!("linear expects {} inputs, got {d}", self.in_dim()));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LRELU_SLOPE)?)?)
}

/// Derivative of [`leaky_relu`] evaluated at `x`; carries no gradient.
pub fn leaky_relu_slope(x: &Tensor) -> Result<Tensor> {
    let pos = x.detach().ge(0.0)?.to_dtype(x.dtype())?;
    Ok(pos.affine(1.0 - LRELU_SLOPE, LRELU_SLOPE)?)
}

/// Logistic sigmoid through `tanh`, which keeps gradients finite for large
/// logits.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x * 0.5)?.tanh()?.affine(0.5, 0.5)?)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Per-sample, per-channel spatial mean and standard deviation of an NCHW
/// tensor, each shaped `N×C×1×1`.
pub fn spatial_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    // Tiny offset keeps d(sqrt)/d(var) finite for constant channels.
    let std = (var + 1e-20)?.sqrt()?;
    Ok((mean, std))
}

/// Instance normalisation `(x − μ)/(σ + eps)` over spatial positions.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (mean, std) = spatial_moments(x)?;
    Ok(x.broadcast_sub(&mean)?.broadcast_div(&(std + eps)?)?)
}

/// L2-normalises rows of an `N×d` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Scalar `f64` out of a rank-0 (or single-element) tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
