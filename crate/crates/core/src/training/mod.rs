//! Training loops: the FR surrogate, stage 1, stage 2, and the end-to-end
//! toy pipeline.
//!
//! Every trainer owns its models, optimizers and random streams, steps
//! deterministically, and can be checkpointed and resumed mid-run. Each step
//! appends a [`LossRecord`]; any non-finite term aborts with
//! [`Error::Divergence`].

pub mod fr;
pub mod pipeline;
pub mod stage1;
pub mod stage2;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::image::stack_images;
use crate::losses::recovery_weights;
use crate::masks::{make_discounted_mask, BinaryMask};
use crate::networks::MaskPyramid;
use crate::nn::layers::scalar;

pub use fr::{train_fr, FrTrainer, FrVerification};
pub use pipeline::{run_pipeline, PipelineReport};
pub use stage1::{train_stage1, Stage1Model, Stage1Trainer};
pub use stage2::{train_stage2, Stage2Model, Stage2Trainer};

/// Loss values of one optimisation step, keyed by term name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub terms: BTreeMap<String, f64>,
}

pub(crate) fn log_progress(stage: &str, r: &LossRecord) {
    if r.step % 100 == 0 {
        let terms: Vec<String> = r.terms.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log::info!("{stage} step {}: {}", r.step, terms.join(" "));
    }
}

pub fn log_to_jsonl(log: &[LossRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Mean of `term` over the first and the last `window` records.
pub fn moving_average_ends(log: &[LossRecord], term: &str, window: usize) -> Result<(f64, f64)> {
    let vals: Vec<f64> = log.iter().filter_map(|r| r.terms.get(term).copied()).collect();
    if vals.len() < window || window == 0 {
        return Err(Error::Data(format!("{} values of `{term}`, need {window}", vals.len())));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&vals[..window]), mean(&vals[vals.len() - window..])))
}

pub(crate) struct Recorder {
    step: u64,
    terms: BTreeMap<String, f64>,
}

impl Recorder {
    pub(crate) fn new(step: u64) -> Self {
        Self { step, terms: BTreeMap::new() }
    }

    /// Records a scalar loss term, failing when it is not finite.
    pub(crate) fn add(&mut self, name: &str, t: &Tensor) -> Result<f64> {
        let v = scalar(t)?;
        if !v.is_finite() {
            return Err(Error::Divergence { step: self.step as usize, term: name.to_string(), value: v });
        }
        self.terms.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn finish(self) -> LossRecord {
        LossRecord { step: self.step, terms: self.terms }
    }
}

/// A batch of pairs as tensors.
pub struct PairBatch {
    pub x_s: Tensor,
    pub x_t: Tensor,
    pub masks: MaskPyramid,
    pub same_id: Vec<bool>,
    /// Recovery weights, `N×1×H×W`.
    pub weights: Tensor,
}

impl PairBatch {
    pub fn new(pairs: &[PairSample], alpha: f64, dtype: DType, dev: &Device) -> Result<Self> {
        let x_s = stack_images(&pairs.iter().map(|p| &p.x_s).collect::<Vec<_>>(), dtype, dev)?;
        let x_t = stack_images(&pairs.iter().map(|p| &p.x_t).collect::<Vec<_>>(), dtype, dev)?;
        let (h, w) = (pairs[0].x_s.height(), pairs[0].x_s.width());
        let binary = pairs.iter().map(|p| BinaryMask::new(h, w, p.rect)).collect::<Result<Vec<_>>>()?;
        let discounted = binary.iter().map(|m| make_discounted_mask(m, alpha)).collect::<Result<Vec<_>>>()?;
        let same_id: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
        let weights = recovery_weights(&same_id, &discounted, dtype, dev)?;
        Ok(Self { x_s, x_t, masks: MaskPyramid::new(binary)?, same_id, weights })
    }
}
