//! Face-like identity datasets: procedural generation, on-disk layout, and
//! pair sampling.
//!
//! Synthetic images are drawn on a 64-unit canvas scaled to the target
//! resolution. An identity is fixed by the colours and geometry of the eye
//! band (eyes, brows, bridge mark). Everything else (background, hair, skin
//! tone, mouth, a one-pixel shift, sensor noise) is drawn fresh per image, so
//! identity lives in the band and the default patch region covers it.
//!
//! On disk a dataset is `root/<label>/<name>.png`, read in lexicographic
//! order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masks::PatchRect;

/// Eye band on the 64-unit canvas: rows 22..=33, cols 20..=44.
pub const BAND_64: PatchRect = PatchRect { left: 20, top: 22, right: 44, bottom: 33 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub resolution: usize,
    pub identities: Vec<(String, Vec<PathBuf>)>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.identities.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Identity {
    pub label: String,
    pub images: Vec<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub resolution: usize,
    pub identities: Vec<Identity>,
}

#[derive(Debug, Clone, Copy)]
struct Signature {
    eye_l: [f32; 3],
    eye_r: [f32; 3],
    brow: [f32; 3],
    mark: [f32; 3],
    separation: f32,
    eye_rx: f32,
    eye_ry: f32,
    brow_tilt: f32,
}

fn colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn jitter(c: [f32; 3], rng: &mut ChaCha8Rng, amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

impl Signature {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            eye_l: colour(rng),
            eye_r: colour(rng),
            brow: colour(rng),
            mark: colour(rng),
            separation: rng.random_range(6.0..9.0),
            eye_rx: rng.random_range(2.0..3.5),
            eye_ry: rng.random_range(1.2..2.2),
            brow_tilt: rng.random_range(-0.25..0.25),
        }
    }
}

struct Canvas {
    res: usize,
    scale: f32,
    px: Vec<f32>,
}

impl Canvas {
    fn new(res: usize, fill: [f32; 3]) -> Self {
        let mut px = Vec::with_capacity(res * res * 3);
        for _ in 0..res * res {
            px.extend_from_slice(&fill);
        }
        Self { res, scale: res as f32 / 64.0, px }
    }

    /// Paints every pixel whose centre (in 64-unit coordinates) passes `inside`.
    fn paint(&mut self, c: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
        for row in 0..self.res {
            for col in 0..self.res {
                let y = (row as f32 + 0.5) / self.scale;
                let x = (col as f32 + 0.5) / self.scale;
                if inside(y, x) {
                    let i = (row * self.res + col) * 3;
                    self.px[i..i + 3].copy_from_slice(&c);
                }
            }
        }
    }

    fn ellipse(&mut self, c: [f32; 3], cy: f32, cx: f32, ry: f32, rx: f32) {
        self.paint(c, |y, x| ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0);
    }
}

fn render(sig: &Signature, res: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let bg = colour(rng);
    let mut cv = Canvas::new(res, bg);
    let dy = rng.random_range(-1i32..=1) as f32;
    let dx = rng.random_range(-1i32..=1) as f32;
    // Nuisance: hair, skin, mouth.
    let hair = colour(rng);
    cv.ellipse(hair, 16.0 + dy, 32.0 + dx, 13.0, 24.0);
    let skin = jitter([0.75, 0.6, 0.5], rng, 0.2);
    cv.ellipse(skin, 36.0 + dy, 32.0 + dx, 24.0 + rng.random_range(-1.0..1.0), 20.0);
    let mouth = colour(rng);
    let mw = rng.random_range(5.0..9.0);
    cv.ellipse(mouth, 46.0 + dy, 32.0 + dx, 1.5, mw);

    // Identity band.
    let (cy, cx) = (27.5 + dy, 32.0 + dx);
    let tilt = sig.brow_tilt;
    let brow = jitter(sig.brow, rng, 0.04);
    cv.paint(brow, |y, x| {
        let off = (x - cx).abs();
        (4.0..=off_limit(sig)).contains(&off) && (y - (cy - 3.5 + tilt * (off - 4.0))).abs() <= 0.6
    });
    cv.ellipse(jitter(sig.eye_l, rng, 0.04), cy, cx - sig.separation, sig.eye_ry, sig.eye_rx);
    cv.ellipse(jitter(sig.eye_r, rng, 0.04), cy, cx + sig.separation, sig.eye_ry, sig.eye_rx);
    cv.ellipse(jitter(sig.mark, rng, 0.04), cy + 1.0, cx, 1.4, 1.2);

    for v in cv.px.iter_mut() {
        let n: f32 = rng.random_range(-0.02..0.02);
        *v = (*v + n).clamp(0.0, 1.0);
    }
    // Quantise so the in-memory copy equals what a PNG round trip yields.
    let bytes: Vec<u8> = cv.px.iter().map(|v| (v * 255.0).round() as u8).collect();
    ImageTensor::from_rgb8(res, res, &bytes)
}

fn off_limit(sig: &Signature) -> f32 {
    sig.separation + sig.eye_rx + 1.0
}

/// Procedural dataset: `n_identities × per_identity` images.
pub fn gen_synthetic_dataset(
    n_identities: usize,
    per_identity: usize,
    resolution: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_identities < 2 {
        return Err(Error::Config(format!("need at least two identities, got {n_identities}")));
    }
    if per_identity == 0 || resolution < 16 || resolution % 16 != 0 {
        return Err(Error::Config(format!(
            "bad dataset shape: {per_identity} images per identity at {resolution}px"
        )));
    }
    let mut identities = Vec::with_capacity(n_identities);
    for id in 0..n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        let sig = Signature::draw(&mut rng);
        let images = (0..per_identity).map(|_| render(&sig, resolution, &mut rng)).collect::<Result<Vec<_>>>()?;
        identities.push(Identity { label: format!("id{id:03}"), images });
    }
    Ok(Dataset { resolution, identities })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.iter().map(|i| i.images.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, root: &Path) -> Result<DatasetManifest> {
        let mut identities = Vec::new();
        for ident in &self.identities {
            let dir = root.join(&ident.label);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut paths = Vec::new();
            for (i, img) in ident.images.iter().enumerate() {
                let p = dir.join(format!("{i:04}.png"));
                img.save_png(&p)?;
                paths.push(p);
            }
            identities.push((ident.label.clone(), paths));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), resolution: self.resolution, identities })
    }

    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut identities = Vec::new();
        for (label, paths) in &manifest.identities {
            let images = paths.iter().map(|p| ImageTensor::load_png(p)).collect::<Result<Vec<_>>>()?;
            identities.push(Identity { label: label.clone(), images });
        }
        Ok(Self { resolution: manifest.resolution, identities })
    }

    /// Splits every identity's images: the first `train_fraction` go to the
    /// first set, the rest to the second.
    pub fn split(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for ident in &self.identities {
            let n = ident.images.len();
            let k = train_count(n, train_fraction);
            if k >= n {
                return Err(Error::Data(format!("identity {} has too few images to split", ident.label)));
            }
            a.push(Identity { label: ident.label.clone(), images: ident.images[..k].to_vec() });
            b.push(Identity { label: ident.label.clone(), images: ident.images[k..].to_vec() });
        }
        Ok((Dataset { resolution: self.resolution, identities: a }, Dataset { resolution: self.resolution, identities: b }))
    }
}

/// Images kept for training out of `n` under [`Dataset::split`]; the rest
/// are held out.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Reads `root/<label>/*.png`, sorted, checking every image's size.
pub fn ingest_dataset(root: &Path) -> Result<DatasetManifest> {
    let mut labels: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    labels.sort();
    if labels.is_empty() {
        return Err(Error::Data(format!("{} has no identity folders", root.display())));
    }
    let mut identities = Vec::new();
    let mut resolution = None;
    let mut offenders = Vec::new();
    for dir in labels {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("identity folder {} is empty", dir.display())));
        }
        for f in &files {
            let (w, h) = ::image::image_dimensions(f)
                .map_err(|e| Error::Data(format!("cannot decode {}: {e}", f.display())))?;
            if w != h {
                offenders.push(format!("{} ({w}x{h})", f.display()));
                continue;
            }
            match resolution {
                None => resolution = Some(w as usize),
                Some(r) if r != w as usize => offenders.push(format!("{} ({w}x{h})", f.display())),
                _ => {}
            }
        }
        let label = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        identities.push((label, files));
    }
    if !offenders.is_empty() {
        return Err(Error::Data(format!(
            "images disagree with the {}px resolution: {}",
            resolution.unwrap_or(0),
            offenders.join(", ")
        )));
    }
    Ok(DatasetManifest { root: root.to_path_buf(), resolution: resolution.unwrap_or(0), identities })
}

/// Patch geometry for training and evaluation pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectSampler {
    /// Region the rect centre is drawn around, at the dataset resolution.
    pub region: PatchRect,
    /// Smallest sampled side as a fraction of the size bound.
    pub min_fraction: f64,
    /// Maximum shift of the rect centre from the region centre, in pixels.
    pub max_shift: usize,
}

impl RectSampler {
    /// Band of the synthetic layout, scaled to `resolution`.
    pub fn eye_band(resolution: usize) -> Self {
        let s = |v: usize| v * resolution / 64;
        let region = PatchRect {
            left: s(BAND_64.left),
            top: s(BAND_64.top),
            right: s(BAND_64.right + 1) - 1,
            bottom: s(BAND_64.bottom + 1) - 1,
        };
        Self { region, min_fraction: 0.75, max_shift: resolution / 64 }
    }

    /// Largest rect the bound allows, centred on the region.
    pub fn centred(&self, resolution: usize) -> Result<PatchRect> {
        let (h, w) = PatchRect::max_size_at(resolution, resolution);
        self.place(resolution, h, w, 0, 0)
    }

    fn place(&self, resolution: usize, h: usize, w: usize, sy: isize, sx: isize) -> Result<PatchRect> {
        let cy = (self.region.top + self.region.bottom) as isize / 2 + sy;
        let cx = (self.region.left + self.region.right) as isize / 2 + sx;
        let top = (cy - (h as isize - 1) / 2).clamp(1, (resolution - h - 1) as isize) as usize;
        let left = (cx - (w as isize - 1) / 2).clamp(1, (resolution - w - 1) as isize) as usize;
        let r = PatchRect { left, top, right: left + w - 1, bottom: top + h - 1 };
        r.validate(resolution, resolution)?;
        Ok(r)
    }

    pub fn sample(&self, resolution: usize, rng: &mut ChaCha8Rng) -> Result<PatchRect> {
        let (hmax, wmax) = PatchRect::max_size_at(resolution, resolution);
        let lo = |m: usize| ((m as f64 * self.min_fraction).ceil() as usize).clamp(1, m);
        let h = rng.random_range(lo(hmax)..=hmax);
        let w = rng.random_range(lo(wmax)..=wmax);
        let s = self.max_shift as i64;
        let sy = rng.random_range(-s..=s) as isize;
        let sx = rng.random_range(-s..=s) as isize;
        self.place(resolution, h, w, sy, sx)
    }
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub x_s: ImageTensor,
    pub x_t: ImageTensor,
    pub source_id: usize,
    pub target_id: usize,
    pub same_identity: bool,
    pub rect: PatchRect,
}

/// Deterministic stream of training pairs.
#[derive(Debug, Clone)]
pub struct PairSampler {
    rng: ChaCha8Rng,
    same_id_fraction: f64,
    rects: RectSampler,
}

impl PairSampler {
    pub fn new(seed: u64, same_id_fraction: f64, rects: RectSampler) -> Result<Self> {
        if !(0.0..=1.0).contains(&same_id_fraction) {
            return Err(Error::Config(format!("same_id_fraction must be in [0, 1], got {same_id_fraction}")));
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed), same_id_fraction, rects })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn next(&mut self, data: &Dataset) -> Result<PairSample> {
        let n = data.identities.len();
        if n < 2 {
            return Err(Error::Data(format!("pair sampling needs two identities, found {n}")));
        }
        let same = self.same_id_fraction > 0.0 && self.rng.random_bool(self.same_id_fraction);
        let s = self.rng.random_range(0..n);
        let t = if same {
            s
        } else {
            (s + self.rng.random_range(1..n)) % n
        };
        let pick = |rng: &mut ChaCha8Rng, id: usize| -> Result<ImageTensor> {
            let imgs = &data.identities[id].images;
            if imgs.is_empty() {
                return Err(Error::Data(format!("identity {} has no images", data.identities[id].label)));
            }
            Ok(imgs[rng.random_range(0..imgs.len())].clone())
        };
        let x_s = pick(&mut self.rng, s)?;
        let x_t = pick(&mut self.rng, t)?;
        let rect = self.rects.sample(data.resolution, &mut self.rng)?;
        Ok(PairSample { x_s, x_t, source_id: s, target_id: t, same_identity: same, rect })
    }

    pub fn batch(&mut self, data: &Dataset, size: usize) -> Result<Vec<PairSample>> {
        (0..size).map(|_| self.next(data)).collect()
    }
}

/// Fixed cross-identity pairs with centred maximum-size rects.
pub fn validation_pairs(data: &Dataset, count: usize, seed: u64) -> Result<Vec<PairSample>> {
    let rects = RectSampler::eye_band(data.resolution);
    let rect = rects.centred(data.resolution)?;
    let mut sampler = PairSampler::new(seed, 0.0, rects)?;
    let mut out = sampler.batch(data, count)?;
    for p in &mut out {
        p.rect = rect;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let a = gen_synthetic_dataset(3, 2, 64, 9).unwrap();
        let b = gen_synthetic_dataset(3, 2, 64, 9).unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.identities.iter().zip(&b.identities) {
            for (p, q) in x.images.iter().zip(&y.images) {
                assert_eq!(p.to_rgb8(), q.to_rgb8());
            }
        }
        let c = gen_synthetic_dataset(3, 2, 64, 10).unwrap();
        assert_ne!(a.identities[0].images[0].to_rgb8(), c.identities[0].images[0].to_rgb8());
        assert!(matches!(gen_synthetic_dataset(1, 2, 64, 9), Err(Error::Config(_))));
    }

    #[test]
    fn pair_fractions() {
        let d = gen_synthetic_dataset(4, 2, 32, 1).unwrap();
        let band = RectSampler::eye_band(32);
        let mut all_same = PairSampler::new(3, 1.0, band).unwrap();
        assert!(all_same.batch(&d, 20).unwrap().iter().all(|p| p.same_identity && p.source_id == p.target_id));
        let mut none = PairSampler::new(3, 0.0, band).unwrap();
        assert!(none.batch(&d, 20).unwrap().iter().all(|p| !p.same_identity && p.source_id != p.target_id));
        let mut a = PairSampler::new(5, 0.5, band).unwrap();
        let mut b = PairSampler::new(5, 0.5, band).unwrap();
        for _ in 0..10 {
            let (p, q) = (a.next(&d).unwrap(), b.next(&d).unwrap());
            assert_eq!((p.source_id, p.target_id, p.rect), (q.source_id, q.target_id, q.rect));
        }
        let one = Dataset { resolution: 32, identities: d.identities[..1].to_vec() };
        assert!(matches!(a.next(&one), Err(Error::Data(_))));
    }

    #[test]
    fn sampled_rects_respect_bound() {
        let band = RectSampler::eye_band(64);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let rect = band.sample(64, &mut r).unwrap();
            assert!(rect.height() <= 12 && rect.width() <= 25);
            assert!(rect.height() >= 9 && rect.width() >= 19);
            assert!(rect.strictly_inside(64, 64));
        }
        assert_eq!(band.centred(64).unwrap(), PatchRect { left: 20, top: 22, right: 44, bottom: 33 });
    }
}
