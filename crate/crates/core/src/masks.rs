//! Patch-region geometry, hole masks, and the composition that pastes a
//! synthesized patch onto a source image.
//!
//! Mask convention: the hole is `0`, the background is `1`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Default discount base for [`DiscountedMask`].
pub const DEFAULT_ALPHA: f64 = 0.15;

/// Inclusive pixel rectangle `left..=right` × `top..=bottom`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRect {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl PatchRect {
    /// Builds a rect and checks it against an image of `height`×`width`.
    pub fn new(
        left: usize,
        top: usize,
        right: usize,
        bottom: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let rect = Self { left, top, right, bottom };
        rect.validate(height, width)?;
        Ok(rect)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.left > self.right || self.top > self.bottom {
            return Err(Error::Domain(format!("empty rect {self:?}")));
        }
        if self.right >= width || self.bottom >= height {
            return Err(Error::Domain(format!(
                "rect {self:?} exceeds a {height}x{width} image"
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }

    /// True when there is at least one pixel of background on every side.
    pub fn strictly_inside(&self, height: usize, width: usize) -> bool {
        self.left >= 1 && self.top >= 1 && self.right + 1 < width && self.bottom + 1 < height
    }

    /// Largest patch allowed at a given resolution: 50 rows × 100 columns at
    /// 256×256, scaled proportionally.
    pub fn max_size_at(height: usize, width: usize) -> (usize, usize) {
        ((50 * height / 256).max(1), (100 * width / 256).max(1))
    }

    /// Parses `L,T,R,B`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Domain(format!("rect `{s}` must be L,T,R,B")));
        }
        let mut v = [0usize; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::Domain(format!("rect `{s}`: `{p}` is not a pixel index")))?;
        }
        let rect = Self { left: v[0], top: v[1], right: v[2], bottom: v[3] };
        if rect.left > rect.right || rect.top > rect.bottom {
            return Err(Error::Domain(format!("rect `{s}` covers zero area")));
        }
        Ok(rect)
    }
}

impl std::fmt::Display for PatchRect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.left, self.top, self.right, self.bottom)
    }
}

/// Hole-vs-background indicator. `rect == None` means there is no hole.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    rect: Option<PatchRect>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, rect: PatchRect) -> Result<Self> {
        rect.validate(height, width)?;
        Ok(Self { height, width, rect: Some(rect) })
    }

    /// The all-background mask (`M ≡ 1`).
    pub fn no_hole(height: usize, width: usize) -> Self {
        Self { height, width, rect: None }
    }

    /// The all-hole mask (`M ≡ 0`).
    pub fn full_hole(height: usize, width: usize) -> Self {
        let rect = PatchRect { left: 0, top: 0, right: width - 1, bottom: height - 1 };
        Self { height, width, rect: Some(rect) }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rect(&self) -> Option<PatchRect> {
        self.rect
    }

    pub fn is_hole(&self, row: usize, col: usize) -> bool {
        self.rect.is_some_and(|r| r.contains(row, col))
    }

    /// Row-major values, `0.0` on the hole and `1.0` elsewhere.
    pub fn values(&self) -> Vec<f64> {
        let mut out = vec![1.0; self.height * self.width];
        if let Some(r) = self.rect {
            for row in r.top..=r.bottom {
                out[row * self.width + r.left..=row * self.width + r.right].fill(0.0);
            }
        }
        out
    }

    /// `1×1×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.values(), (1, 1, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Nearest-neighbour reduction where a target pixel is hole iff its source
    /// block holds any hole pixel.
    pub fn downsample(&self, target_h: usize, target_w: usize) -> Result<BinaryMask> {
        if target_h == 0
            || target_w == 0
            || self.height % target_h != 0
            || self.width % target_w != 0
        {
            return Err(dim_err!(
                "cannot reduce a {}x{} mask to {target_h}x{target_w}",
                self.height,
                self.width
            ));
        }
        let fh = self.height / target_h;
        let fw = self.width / target_w;
        let rect = self.rect.map(|r| PatchRect {
            left: r.left / fw,
            top: r.top / fh,
            right: r.right / fw,
            bottom: r.bottom / fh,
        });
        Ok(BinaryMask { height: target_h, width: target_w, rect })
    }
}

/// Stacks masks into an `N×1×H×W` tensor.
pub fn stack_masks(masks: &[BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| dim_err!("no masks to stack"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.height != h || m.width != w {
            return Err(dim_err!("mixed mask sizes in batch"));
        }
        data.extend(m.values());
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Distance from an in-hole pixel to the nearest edge of the rect; `0` on the
/// outermost ring of the hole.
pub fn boundary_distance(rect: &PatchRect, row: usize, col: usize) -> Result<usize> {
    if !rect.contains(row, col) {
        return Err(Error::Domain(format!("pixel ({row}, {col}) lies outside {rect:?}")));
    }
    Ok((row - rect.top)
        .min(rect.bottom - row)
        .min(col - rect.left)
        .min(rect.right - col))
}

/// Reconstruction weights: `1` on the background and `1/(alpha·e^l)` inside
/// the hole, `l` being [`boundary_distance`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedMask {
    height: usize,
    width: usize,
    alpha: f64,
    data: Vec<f64>,
}

impl DiscountedMask {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

pub fn make_discounted_mask(mask: &BinaryMask, alpha: f64) -> Result<DiscountedMask> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("discount alpha must be > 0, got {alpha}")));
    }
    let mut data = vec![1.0; mask.height * mask.width];
    if let Some(rect) = mask.rect {
        for row in rect.top..=rect.bottom {
            for col in rect.left..=rect.right {
                let l = boundary_distance(&rect, row, col)? as f64;
                data[row * mask.width + col] = 1.0 / (alpha * l.exp());
            }
        }
    }
    Ok(DiscountedMask { height: mask.height, width: mask.width, alpha, data })
}

/// `x_syn·(1−M) + x_s·M`, broadcasting the mask over channels.
///
/// `x_syn` and `x_s` are `N×C×H×W`; `mask` is `N×1×H×W` or `1×1×H×W`.
pub fn compose_output(x_syn: &Tensor, x_s: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = x_syn.dims4()?;
    if x_syn.dims() != x_s.dims() {
        return Err(dim_err!(
            "composition inputs differ: {:?} vs {:?}",
            x_syn.dims(),
            x_s.dims()
        ));
    }
    let (mn, mc, mh, mw) = mask.dims4()?;
    if mc != 1 || mh != h || mw != w || (mn != n && mn != 1) {
        return Err(dim_err!("mask {:?} does not match images {:?}", mask.dims(), x_syn.dims()));
    }
    let inv = mask.affine(-1.0, 1.0)?;
    let hole = x_syn.broadcast_mul(&inv)?;
    let background = x_s.broadcast_mul(mask)?;
    Ok((hole + background)?)
}
