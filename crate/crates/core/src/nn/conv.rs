//! Convolution as `im2col` + GEMM.
//!
//! The patch gather and its adjoint scatter are custom ops whose backward
//! passes are each other, so a convolution is differentiable to any order in
//! both its input and its weights. Candle's own CPU backward goes through a
//! direct transposed convolution, which dominated training time.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{dim_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(input: (usize, usize, usize, usize), k: usize, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = input;
        if stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(dim_err!("kernel {k} (stride {stride}, pad {pad}) does not fit {h}x{w}"));
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, c, h, w, k, stride, pad, out_h, out_w })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    /// Calls `f(col_start, in_start, len)` for every run of output columns
    /// whose taps fall inside the unpadded input; consecutive columns read
    /// input pixels `stride` apart.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, s, p) = (self.out_h, self.out_w, self.stride, self.pad);
        let cols = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (ci * self.k + ky) * self.k + kx;
                    // Valid ox: 0 <= ox·s + kx − p < w.
                    let lo = p.saturating_sub(kx).div_ceil(s);
                    let hi = ((self.w + p).saturating_sub(kx)).div_ceil(s).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    for b in 0..self.n {
                        let in_base = (b * self.c + ci) * self.h * self.w;
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy < p || iy - p >= self.h {
                                continue;
                            }
                            let row = in_base + (iy - p) * self.w;
                            let col = r * cols + (b * oh + oy) * ow;
                            f(col + lo, row + lo * s + kx - p, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("im2col ops need contiguous input"),
    }
}

/// `N×C×H×W` → `(C·k·k) × (N·H_o·W_o)`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters patch columns back, summing overlaps.
struct Col2Im(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, x: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::zero(); g.rows() * g.cols()];
        let s = g.stride;
        g.for_each_run(|o, i, len| {
            let dst = &mut out[o..o + len];
            if s == 1 {
                dst.copy_from_slice(&x[i..i + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = x[i + j * s];
                }
            }
        });
        out
    }
}

impl Col2Im {
    fn run<T: WithDType>(&self, col: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::zero(); g.n * g.c * g.h * g.w];
        let s = g.stride;
        g.for_each_run(|o, i, len| {
            let src = &col[o..o + len];
            if s == 1 {
                for (d, v) in out[i..i + len].iter_mut().zip(src) {
                    *d += *v;
                }
            } else {
                for (j, v) in src.iter().enumerate() {
                    out[i + j * s] += *v;
                }
            }
        });
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.dims() != [g.n, g.c, g.h, g.w] {
            candle_core::bail!("im2col geometry {:?} does not match input {:?}", g, l.dims());
        }
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.run(contiguous::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.run(contiguous::<f64>(s, l)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.dims() != [g.rows(), g.cols()] {
            candle_core::bail!("col2im geometry {:?} does not match input {:?}", g, l.dims());
        }
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.run(contiguous::<f32>(s, l)?)),
            CpuStorage::F64(_) => CpuStorage::F64(self.run(contiguous::<f64>(s, l)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

fn check_weight(w: &Tensor, c: usize) -> Result<(usize, usize)> {
    let (o, ci, k, k2) = w.dims4()?;
    if ci != c || k != k2 {
        return Err(dim_err!("weight {:?} does not fit {c} input channels", w.dims()));
    }
    Ok((o, k))
}

/// Cross-correlation of `x` (`N×C×H×W`) with `w` (`O×C×k×k`), no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let dims = x.dims4()?;
    let (o, k) = check_weight(w, dims.1)?;
    let g = Geometry::new(dims, k, stride, pad)?;
    let col = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = w.reshape((o, g.rows()))?.matmul(&col)?;
    Ok(y.reshape((o, g.n, g.out_h, g.out_w))?.transpose(0, 1)?.contiguous()?)
}

/// Gradient of `⟨conv2d(x, w), grad_out⟩` w.r.t. `x`, for an input of
/// spatial size `input_hw`. Differentiable in both `grad_out` and `w`.
pub fn conv2d_input_vjp(
    grad_out: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let (n, o, gh, gw) = grad_out.dims4()?;
    let (wo, c, k, _) = w.dims4()?;
    if wo != o {
        return Err(dim_err!("gradient has {o} channels, weight {wo}"));
    }
    let g = Geometry::new((n, c, input_hw.0, input_hw.1), k, stride, pad)?;
    if (g.out_h, g.out_w) != (gh, gw) {
        return Err(dim_err!("gradient {gh}x{gw} does not match conv output {}x{}", g.out_h, g.out_w));
    }
    let gy = grad_out.transpose(0, 1)?.contiguous()?.reshape((o, g.cols()))?;
    let col = w.reshape((o, g.rows()))?.t()?.matmul(&gy)?;
    Ok(col.contiguous()?.apply_op1(Col2Im(g))?)
}
