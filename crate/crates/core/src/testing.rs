//! Test support: central finite differences and small deterministic tensor
//! factories. Nothing here is used by the pipeline itself.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::from_vec(data, shape, &Device::Cpu).expect("shape matches data")
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).expect("shape matches data")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .and_then(|t| t.to_dtype(DType::F64))
        .and_then(|t| t.to_vec1::<f64>())
        .expect("tensor converts to f64 vec")
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a)
        .iter()
        .zip(to_vec(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Compares the analytic gradient of a scalar loss w.r.t. `var` against
/// central differences on up to `samples` randomly chosen coordinates, and
/// returns the norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
///
/// Coordinates whose two-sided difference shows a kink (the one-sided
/// slopes disagree by more than `kink_tol` relative) are skipped, since a
/// piecewise-linear activation has no derivative there.
pub fn fd_relative_error<F>(
    var: &Var,
    analytic: &Tensor,
    mut loss: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut() -> Result<f64>,
{
    let base = to_vec(var.as_tensor());
    let grad = to_vec(analytic);
    let shape = var.dims().to_vec();
    let mut r = rng(seed);
    let n = base.len();
    let picks: Vec<usize> = if n <= samples {
        (0..n).collect()
    } else {
        (0..samples).map(|_| r.random_range(0..n)).collect()
    };
    let f0 = loss()?;
    let mut num_sq = 0.0;
    let mut ana_sq = 0.0;
    let mut diff_sq = 0.0;
    let set = |vals: &[f64]| -> Result<()> {
        let t = Tensor::from_slice(vals, shape.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
        var.set(&t)?;
        Ok(())
    };
    let mut work = base.clone();
    for &i in &picks {
        work[i] = base[i] + eps;
        set(&work)?;
        let fp = loss()?;
        work[i] = base[i] - eps;
        set(&work)?;
        let fm = loss()?;
        work[i] = base[i];
        let fwd = (fp - f0) / eps;
        let bwd = (f0 - fm) / eps;
        let scale = fwd.abs().max(bwd.abs()).max(1e-8);
        if (fwd - bwd).abs() / scale > 1e-2 && (fwd - bwd).abs() > 1e-6 {
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        num_sq += numeric * numeric;
        ana_sq += grad[i] * grad[i];
        diff_sq += (numeric - grad[i]).powi(2);
    }
    set(&base)?;
    let denom = num_sq.sqrt().max(ana_sq.sqrt());
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(diff_sq.sqrt() / denom)
}
