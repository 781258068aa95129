//! End-to-end run: data, face model, both attack stages, and evaluation.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::fr::{load_fr, train_fr, verify};
use super::stage1::{train_stage1, Stage1Model};
use super::stage2::{train_stage2, Stage2Model};
use super::{log_to_jsonl, moving_average_ends, LossRecord, PairBatch};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_synthetic_dataset, validation_pairs, PairSample};
use crate::error::{Error, Result};
use crate::image::stack_images;
use crate::evaluation::{build_report, fid, mse, pooled_features, similarity_scores, Calibration, EvalReport, ModelScores, Stealth};
use crate::losses::{lpips_per_sample, RandomConvExtractor};
use crate::networks::FrBackbone;

/// Window for the stage-1 adversarial-loss moving average.
pub const ADV_WINDOW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub fr_calibration: Calibration,
    pub fr_fingerprint: u64,
    /// Largest change of probe embeddings across both attack stages.
    pub fr_probe_drift: f64,
    pub stage1_adv_start: f64,
    pub stage1_adv_end: f64,
    pub asr_stage1: f64,
    pub asr_stage2: f64,
    pub lpips_stage1: f64,
    pub lpips_stage2: f64,
    pub stage2_eval: EvalReport,
    pub seconds: Vec<(String, f64)>,
}

impl PipelineReport {
    /// Relative drop of the adversarial-loss moving average.
    pub fn adv_reduction(&self) -> f64 {
        1.0 - self.stage1_adv_end / self.stage1_adv_start
    }
}

/// Stage-1 images for a list of pairs, in chunks.
pub fn attack_stage1(model: &Stage1Model, pairs: &[PairSample], fr: &dyn FrBackbone, alpha: f64) -> Result<Tensor> {
    chunked(pairs, |b| Ok(model.generate(b, fr)?.x_out.detach()), alpha)
}

/// `(x_out, x_refine)` for a list of pairs, in chunks.
pub fn attack_stage2(
    model: &Stage2Model,
    pairs: &[PairSample],
    fr: &dyn FrBackbone,
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    let mut out = Vec::new();
    let mut refined = Vec::new();
    for c in pairs.chunks(CHUNK) {
        let (o, r) = model.attack(&PairBatch::new(c, alpha, DType::F32, &Device::Cpu)?, fr)?;
        out.push(o);
        refined.push(r.detach());
    }
    Ok((Tensor::cat(&out, 0)?, Tensor::cat(&refined, 0)?))
}

const CHUNK: usize = 10;

fn chunked(pairs: &[PairSample], f: impl Fn(&PairBatch) -> Result<Tensor>, alpha: f64) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to attack".into()));
    }
    let parts = pairs
        .chunks(CHUNK)
        .map(|c| f(&PairBatch::new(c, alpha, DType::F32, &Device::Cpu)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_log(dir: &Path, name: &str, log: &[LossRecord]) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, log_to_jsonl(log)?).map_err(|e| Error::io(&path, e))
}

/// Runs everything under `work_dir`, writing the dataset, checkpoints, loss
/// logs and `report.json`.
pub fn run_pipeline(run: &RunConfig, work_dir: &Path) -> Result<PipelineReport> {
    run.validate()?;
    std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut Vec<(String, f64)>| {
        seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let d = &run.data;
    let data = gen_synthetic_dataset(d.identities, d.per_identity, d.resolution, d.seed)?;
    data.save(&work_dir.join("data"))?;
    let (train, held) = data.split(d.train_fraction)?;
    lap("data", &mut seconds);

    let (fr_ckpt, fr_log) = train_fr(&train, run)?;
    save_checkpoint(&work_dir.join("fr.ckpt"), &fr_ckpt)?;
    write_log(work_dir, "fr_log.jsonl", &fr_log)?;
    let fr = load_fr(&fr_ckpt, &run.fr.model, DType::F32)?;
    let e = &run.eval;
    let ver = verify(&fr, &held, e.calibration_pairs, e.k_folds, e.seed)?;
    let tau = ver.calibration.tau;
    let fr_fingerprint = crate::nn::params::fingerprint(&fr_ckpt.group("fr"))?;
    let probe = stack_images(&held.identities.iter().map(|i| &i.images[0]).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
    let probe_before = fr.embed(&probe)?;
    lap("fr", &mut seconds);

    let attacked: [&dyn FrBackbone; 1] = [&fr];
    let (s1_ckpt, s1_log) = train_stage1(&train, &attacked, run)?;
    save_checkpoint(&work_dir.join("stage1.ckpt"), &s1_ckpt)?;
    write_log(work_dir, "stage1_log.jsonl", &s1_log)?;
    let (adv_start, adv_end) = moving_average_ends(&s1_log, "adv", ADV_WINDOW.min(s1_log.len()))?;
    lap("stage1", &mut seconds);

    let (s2_ckpt, s2_log) = train_stage2(&train, Some(&s1_ckpt), &attacked, run)?;
    save_checkpoint(&work_dir.join("stage2.ckpt"), &s2_ckpt)?;
    write_log(work_dir, "stage2_log.jsonl", &s2_log)?;
    lap("stage2", &mut seconds);

    let pairs = validation_pairs(&held, e.pairs, e.seed)?;
    let model = Stage2Model::load(&s2_ckpt)?;
    let (x_out, x_ref) = attack_stage2(&model, &pairs, &fr, run.alpha)?;
    let batch = PairBatch::new(&pairs, run.alpha, DType::F32, &Device::Cpu)?;
    let s1_scores = similarity_scores(&batch.x_t, &x_out, &fr)?;
    let s2_scores = similarity_scores(&batch.x_t, &x_ref, &fr)?;
    let extractor = RandomConvExtractor::new(&run.perceptual, DType::F32, &Device::Cpu)?;
    let w = &run.perceptual.layer_weights;
    let lp = |x: &Tensor| -> Result<f64> {
        Ok(mean(&lpips_per_sample(x, &batch.x_s, &extractor, w)?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
    };
    let (lpips1, lpips2) = (lp(&x_out)?, lp(&x_ref)?);
    let fid = fid(&pooled_features(&extractor, &x_ref)?, &pooled_features(&extractor, &batch.x_s)?)?;
    let stealth = Stealth { mse: Some(mse(&x_ref, &batch.x_s)?), lpips: Some(lpips2), fid: Some(fid) };
    let s1_model = ModelScores { name: "toy-fr".into(), tau, scores: s1_scores };
    let s2_model = ModelScores { name: "toy-fr".into(), tau, scores: s2_scores };
    let asr1 = build_report(std::slice::from_ref(&s1_model), &Stealth::default())?.models[0].asr;
    let stage2_eval = build_report(std::slice::from_ref(&s2_model), &stealth)?;
    let drift = (fr.embed(&probe)? - &probe_before)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    lap("eval", &mut seconds);

    let report = PipelineReport {
        fr_calibration: ver.calibration,
        fr_fingerprint,
        fr_probe_drift: drift,
        stage1_adv_start: adv_start,
        stage1_adv_end: adv_end,
        asr_stage1: asr1,
        asr_stage2: stage2_eval.models[0].asr,
        lpips_stage1: lpips1,
        lpips_stage2: lpips2,
        stage2_eval,
        seconds,
    };
    let path = work_dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
