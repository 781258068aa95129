//! `ImageTensor`: the H×W×C image container used at the I/O boundary.
//!
//! Files hold 8-bit RGB in `[0, 1]`; networks work in `[-1, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl ValueRange {
    fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

/// Row-major H×W×C image with values inside `range`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(dim_err!(
                "{} values cannot fill a {height}x{width}x{channels} image",
                data.len()
            ));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < lo || **v > hi) {
            return Err(Error::Domain(format!("pixel value {bad} outside {range:?}")));
        }
        Ok(Self { height, width, channels, range, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn to_range(&self, range: ValueRange) -> ImageTensor {
        let data = match (self.range, range) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => {
                self.data.iter().map(|v| (v * 2.0 - 1.0).clamp(-1.0, 1.0)).collect()
            }
            (ValueRange::Symmetric, ValueRange::Unit) => {
                self.data.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect()
            }
            _ => unreachable!(),
        };
        ImageTensor { data, range, ..*self }
    }

    /// `1×C×H×W` tensor in the symmetric range.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let sym = self.to_range(ValueRange::Symmetric);
        let t = Tensor::from_vec(sym.data, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
    }

    /// Reads one `C×H×W` (or `1×C×H×W`) symmetric-range tensor. Values are
    /// clamped into range so generator outputs at the tanh limit stay valid.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(dim_err!("expected a CHW image tensor, got rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite pixel in tensor".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        ImageTensor::new(h, w, c, ValueRange::Symmetric, data)
    }

    /// Quantizes to 8-bit RGB, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let unit = self.to_range(ValueRange::Unit);
        unit.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        ImageTensor::new(height, width, 3, ValueRange::Unit, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        ImageTensor::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(dim_err!("PNG export needs 3 channels, have {}", self.channels));
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| dim_err!("buffer does not match image size"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }
}

/// Stacks equally sized images into an `N×C×H×W` symmetric-range tensor.
pub fn stack_images(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(dtype, device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Tiles images side by side into one strip, for quick visual inspection.
pub fn hstack(images: &[&ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| dim_err!("nothing to tile"))?;
    let (h, c) = (first.height, first.channels);
    if images.iter().any(|im| im.height != h || im.channels != c) {
        return Err(dim_err!("tiles must share height and channels"));
    }
    let total_w: usize = images.iter().map(|im| im.width).sum();
    let mut data = Vec::with_capacity(h * total_w * c);
    for row in 0..h {
        for im in images {
            let unit = im.to_range(first.range);
            let start = row * im.width * c;
            data.extend_from_slice(&unit.data[start..start + im.width * c]);
        }
    }
    ImageTensor::new(h, total_w, c, first.range, data)
}
