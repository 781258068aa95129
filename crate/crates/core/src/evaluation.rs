//! Attack success and stealth metrics.
//!
//! FID here is computed on features from the same fixed random extractor
//! as the perceptual loss, so its absolute values are only comparable
//! between runs of this crate, not with Inception-based numbers.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::losses::PerceptualExtractor;
use crate::networks::fr::cosine_similarity;
use crate::networks::FrBackbone;

pub const REPORT_VERSION: u32 = 1;
pub const CURVE_HEADER: &str = "# advinpaint asr-curve v1";

/// Thresholds reported for real face models on CelebA-HQ; usable as-is when
/// one of those models is plugged in.
pub const PUBLISHED_THRESHOLDS: [(&str, f64); 4] =
    [("arcface", 0.23), ("cosface", 0.26), ("mobileface", 0.19), ("facenet", 0.36)];

/// Per-pair cosine similarity between target and adversarial embeddings.
pub fn similarity_scores(x_t: &Tensor, x_adv: &Tensor, fr: &dyn FrBackbone) -> Result<Vec<f64>> {
    if x_t.dims() != x_adv.dims() {
        return Err(dim_err!("targets {:?} vs adversarial {:?}", x_t.dims(), x_adv.dims()));
    }
    let cos = cosine_similarity(&fr.embed(x_t)?, &fr.embed(x_adv)?)?;
    Ok(cos.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Percentage of scores strictly above `tau`.
pub fn asr_from_scores(scores: &[f64], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Domain("ASR over an empty pair list".into()));
    }
    let hits = scores.iter().filter(|&&s| s > tau).count();
    Ok(100.0 * hits as f64 / scores.len() as f64)
}

pub fn asr(x_t: &Tensor, x_adv: &Tensor, fr: &dyn FrBackbone, tau: f64) -> Result<f64> {
    asr_from_scores(&similarity_scores(x_t, x_adv, fr)?, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    /// Mean held-out accuracy over folds.
    pub accuracy: f64,
    pub fold_taus: Vec<f64>,
}

fn accuracy(genuine: &[f64], impostor: &[f64], tau: f64) -> f64 {
    let ok = genuine.iter().filter(|&&s| s > tau).count() + impostor.iter().filter(|&&s| s <= tau).count();
    ok as f64 / (genuine.len() + impostor.len()) as f64
}

/// Exact best threshold over midpoints of consecutive distinct scores;
/// ties go to the smallest.
pub fn best_threshold(genuine: &[f64], impostor: &[f64]) -> (f64, f64) {
    let mut all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut candidates: Vec<f64> = all.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    if candidates.is_empty() {
        candidates.push(all[0]);
    }
    let mut best = (candidates[0], f64::MIN);
    for &t in &candidates {
        let acc = accuracy(genuine, impostor, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    best
}

/// K-fold threshold calibration. Scores are dealt round-robin into folds
/// per class; each fold's threshold is fit on the other folds and scored on
/// the held-out one.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64], k_folds: usize) -> Result<Calibration> {
    if k_folds < 2 {
        return Err(Error::Config(format!("k_folds must be at least 2, got {k_folds}")));
    }
    if genuine.len() < k_folds || impostor.len() < k_folds {
        return Err(Error::Data(format!(
            "{} genuine and {} impostor scores cannot fill {k_folds} folds",
            genuine.len(),
            impostor.len()
        )));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite similarity score".into()));
    }
    let split = |v: &[f64], f: usize| -> (Vec<f64>, Vec<f64>) {
        let mut held = Vec::new();
        let mut rest = Vec::new();
        for (i, &s) in v.iter().enumerate() {
            if i % k_folds == f {
                held.push(s);
            } else {
                rest.push(s);
            }
        }
        (held, rest)
    };
    let mut fold_taus = Vec::with_capacity(k_folds);
    let mut acc_sum = 0.0;
    for f in 0..k_folds {
        let (g_held, g_rest) = split(genuine, f);
        let (i_held, i_rest) = split(impostor, f);
        let (tau, _) = best_threshold(&g_rest, &i_rest);
        acc_sum += accuracy(&g_held, &i_held, tau);
        fold_taus.push(tau);
    }
    let tau = fold_taus.iter().sum::<f64>() / k_folds as f64;
    Ok(Calibration { tau, accuracy: acc_sum / k_folds as f64, fold_taus })
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(dim_err!("MSE inputs {:?} and {:?} differ", x.dims(), y.dims()));
    }
    let v = (x - y)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(v)
}

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!("FID needs at least two feature rows, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Data("ragged or empty feature rows".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m.clone();
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two `n×d` feature sets.
/// `Tr((Σ_a Σ_b)^{1/2})` is taken as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`,
/// which has the same eigenvalues and stays symmetric.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Data(format!("feature widths {} and {} differ", mu_a.len(), mu_b.len())));
    }
    let root_a = psd_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let cross = psd_sqrt(&inner).trace();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Spatially pooled extractor features, all layers concatenated, one row
/// per image.
pub fn pooled_features(extractor: &dyn PerceptualExtractor, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let layers = extractor.features(x)?;
    let pooled = layers
        .iter()
        .map(|f| f.mean((2, 3)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cat = Tensor::cat(&pooled, 1)?.to_dtype(DType::F64)?;
    Ok(cat.to_vec2::<f64>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    pub tau: f64,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub tau: f64,
    pub asr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub pairs: usize,
    pub models: Vec<ModelReport>,
    pub mse: Option<f64>,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Stealth {
    pub mse: Option<f64>,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
}

pub fn build_report(models: &[ModelScores], stealth: &Stealth) -> Result<EvalReport> {
    let first = models.first().ok_or_else(|| Error::Data("report needs at least one model".into()))?;
    let pairs = first.scores.len();
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        if m.scores.len() != pairs {
            return Err(Error::Data(format!(
                "model {} scored {} pairs, expected {pairs}",
                m.name,
                m.scores.len()
            )));
        }
        out.push(ModelReport { name: m.name.clone(), tau: m.tau, asr: asr_from_scores(&m.scores, m.tau)? });
    }
    for (what, v) in [("mse", stealth.mse), ("lpips", stealth.lpips), ("fid", stealth.fid)] {
        if let Some(x) = v {
            if !(x >= 0.0) {
                return Err(Error::Data(format!("{what} must be non-negative, got {x}")));
            }
        }
    }
    Ok(EvalReport {
        format_version: REPORT_VERSION,
        pairs,
        models: out,
        mse: stealth.mse,
        lpips: stealth.lpips,
        fid: stealth.fid,
    })
}

/// τ grid `0.00, 0.01, …, 1.00`.
pub fn tau_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// One row per grid τ: `(τ, ASR per model)`.
pub fn asr_curve(models: &[ModelScores]) -> Result<Vec<(f64, Vec<f64>)>> {
    tau_grid()
        .into_iter()
        .map(|t| {
            let row = models.iter().map(|m| asr_from_scores(&m.scores, t)).collect::<Result<Vec<_>>>()?;
            Ok((t, row))
        })
        .collect()
}

pub fn curve_csv(models: &[ModelScores]) -> Result<String> {
    let mut s = String::new();
    s.push_str(CURVE_HEADER);
    s.push('\n');
    s.push_str("tau");
    for m in models {
        let _ = write!(s, ",asr_{}", m.name);
    }
    s.push('\n');
    for (t, row) in asr_curve(models)? {
        let _ = write!(s, "{t:.2}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}
