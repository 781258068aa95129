use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advinpaint::checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle};
use advinpaint::config::RunConfig;
use advinpaint::data::{gen_synthetic_dataset, ingest_dataset, train_count, Dataset, PairSample, RectSampler};
use advinpaint::evaluation::{
    build_report, curve_csv, fid, mse, pooled_features, similarity_scores, Calibration, ModelScores, Stealth,
};
use advinpaint::image::{stack_images, ImageTensor};
use advinpaint::losses::{lpips_per_sample, RandomConvExtractor};
use advinpaint::masks::PatchRect;
use advinpaint::networks::{FrBackbone, ToyFr};
use advinpaint::nn::params::fingerprint;
use advinpaint::training::fr::{load_fr, verify, FrTrainer};
use advinpaint::training::pipeline::{attack_stage1, attack_stage2};
use advinpaint::training::{
    log_to_jsonl, run_pipeline, LossRecord, PairBatch, Stage1Model, Stage1Trainer, Stage2Model, Stage2Trainer,
};
use advinpaint::Error;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::pairs::{self, PairRecord};
use crate::{Cli, Command};

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn report(e: &CliError) -> ExitCode {
    let (kind, message, code) = match e {
        CliError::Usage(m) => ("usage", m.clone(), 2),
        CliError::Core(e) => (e.kind(), e.to_string(), 1),
    };
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn checkpoint(path: &Path) -> Result<CheckpointBundle> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint `{}` does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn face_model(path: &Path) -> Result<ToyFr> {
    let b = checkpoint(path)?;
    let run = RunConfig::parse(&b.meta.config)?;
    Ok(load_fr(&b, &run.fr.model, DType::F32)?)
}

fn dataset(root: &Path, run: &RunConfig) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(usage(format!("dataset root `{}` is not a directory", root.display())));
    }
    let data = Dataset::load(&ingest_dataset(root)?)?;
    if data.resolution != run.data.resolution {
        return Err(Error::Config(format!(
            "dataset is {}px but the configuration expects {}px",
            data.resolution, run.data.resolution
        ))
        .into());
    }
    Ok(data)
}

fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn finish_training(out: &Path, bundle: &CheckpointBundle, log: &[LossRecord]) -> Result<()> {
    save_checkpoint(out, bundle)?;
    write(&log_path(out), &log_to_jsonl(log)?)?;
    let last = log.last().map(|r| json!(r.terms)).unwrap_or(json!(null));
    println!("{}", json!({ "checkpoint": out, "step": bundle.meta.step, "last": last }));
    Ok(())
}

fn parse_rect(s: &str, h: usize, w: usize) -> Result<PatchRect> {
    let rect = PatchRect::parse(s).map_err(|e| usage(e.to_string()))?;
    rect.validate(h, w).map_err(|e| usage(e.to_string()))?;
    check_bound(&rect, h, w)?;
    Ok(rect)
}

fn check_bound(rect: &PatchRect, h: usize, w: usize) -> Result<()> {
    let (mh, mw) = PatchRect::max_size_at(h, w);
    if rect.height() > mh || rect.width() > mw {
        return Err(usage(format!(
            "rect {rect} is {}x{}, larger than the {mh}x{mw} bound at {h}x{w}",
            rect.height(),
            rect.width()
        )));
    }
    Ok(())
}

fn image(path: &Path, resolution: usize) -> Result<ImageTensor> {
    if !path.is_file() {
        return Err(usage(format!("image `{}` does not exist", path.display())));
    }
    let img = ImageTensor::load_png(path)?;
    if img.height() != resolution || img.width() != resolution {
        return Err(usage(format!(
            "`{}` is {}x{}, the model expects {resolution}x{resolution}",
            path.display(),
            img.height(),
            img.width()
        )));
    }
    Ok(img)
}

struct Attacker {
    stage1: Stage1Model,
    stage2: Option<Stage2Model>,
    run: RunConfig,
}

impl Attacker {
    fn load(ckpt1: &Path, ckpt2: Option<&Path>) -> Result<Self> {
        let b1 = checkpoint(ckpt1)?;
        let run = RunConfig::parse(&b1.meta.config)?;
        let stage1 = Stage1Model::load(&b1)?;
        let stage2 = match ckpt2 {
            Some(p) => {
                let m = Stage2Model::load(&checkpoint(p)?)?;
                if fingerprint(&m.stage1.store.snapshot()?)? != fingerprint(&stage1.store.snapshot()?)? {
                    return Err(Error::State("the stage-2 checkpoint was trained on a different stage-1 model".into()).into());
                }
                Some(m)
            }
            None => None,
        };
        Ok(Self { stage1, stage2, run })
    }

    fn resolution(&self) -> usize {
        self.run.data.resolution
    }

    /// `(x_out, x_refine)` for every pair.
    fn attack(&self, pairs: &[PairSample], fr: &dyn FrBackbone) -> Result<(Tensor, Option<Tensor>)> {
        Ok(match &self.stage2 {
            Some(m) => {
                let (o, r) = attack_stage2(m, pairs, fr, self.run.alpha)?;
                (o, Some(r))
            }
            None => (attack_stage1(&self.stage1, pairs, fr, self.run.alpha)?, None),
        })
    }
}

fn pair(x_s: ImageTensor, x_t: ImageTensor, rect: PatchRect) -> PairSample {
    PairSample { x_s, x_t, source_id: 0, target_id: 1, same_identity: false, rect }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let run = match &cli.config {
        Some(p) if !p.is_file() => return Err(usage(format!("config `{}` does not exist", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    run.validate()?;
    match cli.command {
        Command::Config => {
            print!("{}", run.to_text()?);
            Ok(())
        }
        Command::GenData(a) => {
            let mut d = run.data.clone();
            d.identities = a.identities.unwrap_or(d.identities);
            d.per_identity = a.per_identity.unwrap_or(d.per_identity);
            d.resolution = a.resolution.unwrap_or(d.resolution);
            d.seed = a.seed.unwrap_or(d.seed);
            let data = gen_synthetic_dataset(d.identities, d.per_identity, d.resolution, d.seed)?;
            let manifest = data.save(&a.out)?;
            write(&a.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).map_err(Error::from)?)?;
            println!("{}", json!({ "root": a.out, "identities": manifest.identities.len(), "images": manifest.len() }));
            Ok(())
        }
        Command::TrainFr(a) => {
            let (resumed, run) = match &a.resume {
                Some(p) => {
                    let b = checkpoint(p)?;
                    (Some(FrTrainer::resume(&b)?), RunConfig::parse(&b.meta.config)?)
                }
                None => (None, run),
            };
            let (train, _) = dataset(&a.data, &run)?.split(run.data.train_fraction)?;
            let mut t = match resumed {
                Some(t) => t,
                None => FrTrainer::new(&run.fr, train.identities.len())?,
            };
            t.run(&train, run.fr.steps.saturating_sub(t.steps_done()))?;
            finish_training(&a.out, &t.checkpoint(&run)?, &t.log)
        }
        Command::TrainStage1(a) => {
            let fr = face_model(&a.fr)?;
            let mut t = match &a.resume {
                Some(p) => Stage1Trainer::resume(&checkpoint(p)?)?,
                None => Stage1Trainer::new(&run)?,
            };
            let cfg = t.config().clone();
            let (train, _) = dataset(&a.data, &cfg)?.split(cfg.data.train_fraction)?;
            let attacked: [&dyn FrBackbone; 1] = [&fr];
            t.run(&train, &attacked, cfg.stage1.train.steps.saturating_sub(t.steps_done()))?;
            finish_training(&a.out, &t.checkpoint()?, &t.log)
        }
        Command::TrainStage2(a) => {
            let fr = face_model(&a.fr)?;
            let mut t = match (&a.resume, &a.stage1) {
                (Some(p), _) => Stage2Trainer::resume(&checkpoint(p)?)?,
                (None, Some(p)) => Stage2Trainer::new(&run, Some(&checkpoint(p)?))?,
                (None, None) => Stage2Trainer::new(&run, None)?,
            };
            let cfg = t.config().clone();
            let (train, _) = dataset(&a.data, &cfg)?.split(cfg.data.train_fraction)?;
            let attacked: [&dyn FrBackbone; 1] = [&fr];
            t.run(&train, &attacked, cfg.stage2.train.steps.saturating_sub(t.steps_done()))?;
            finish_training(&a.out, &t.checkpoint()?, &t.log)
        }
        Command::Attack(a) => attack(a),
        Command::Calibrate(a) => {
            let fr = face_model(&a.fr)?;
            let data = dataset(&a.data, &run)?;
            let data = if a.all { data } else { data.split(run.data.train_fraction)?.1 };
            let e = &run.eval;
            let v = verify(&fr, &data, e.calibration_pairs, e.k_folds, e.seed)?;
            write(&a.out, &serde_json::to_string_pretty(&v.calibration).map_err(Error::from)?)?;
            println!("{}", json!({ "tau": v.calibration.tau, "accuracy": v.calibration.accuracy }));
            Ok(())
        }
        Command::MakePairs(a) => make_pairs(a, &run),
        Command::Evaluate(a) => {
            let (models, stealth) = score(&a, true)?;
            let report = build_report(&models, &stealth)?;
            write(&a.out, &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
            println!("{}", serde_json::to_string(&report.models).map_err(Error::from)?);
            Ok(())
        }
        Command::Curve(a) => {
            let (models, _) = score(&a, false)?;
            write(&a.out, &curve_csv(&models)?)
        }
        Command::Pipeline(a) => {
            let dir = a.work_dir.unwrap_or_else(|| PathBuf::from(&run.paths.work_dir));
            let report = run_pipeline(&run, &dir)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            Ok(())
        }
    }
}

fn attack(a: crate::Attack) -> Result<()> {
    let attacker = Attacker::load(&a.ckpt1, a.ckpt2.as_deref())?;
    let fr = face_model(&a.fr)?;
    let res = attacker.resolution();
    let rect = parse_rect(&a.rect, res, res)?;
    let x_s = image(&a.source, res)?;
    let x_t = image(&a.target, res)?;
    let p = pair(x_s, x_t, rect);
    let (x_out, x_ref) = attacker.attack(std::slice::from_ref(&p), &fr)?;
    let batch = PairBatch::new(std::slice::from_ref(&p), attacker.run.alpha, DType::F32, &Device::Cpu)?;
    let cos = |x: &Tensor| -> Result<f64> { Ok(similarity_scores(&batch.x_t, x, &fr)?[0]) };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let out_path = a.out.join("x_out.png");
    ImageTensor::from_tensor(&x_out)?.save_png(&out_path)?;
    let mut sidecar = json!({
        "format_version": SIDECAR_VERSION,
        "source": a.source,
        "target": a.target,
        "rect": rect.to_string(),
        "model": fr.name(),
        "cosine_before": cos(&batch.x_s)?,
        "cosine_after_stage1": cos(&x_out)?,
        "x_out": out_path,
    });
    if let Some(x_ref) = &x_ref {
        let ref_path = a.out.join("x_refine.png");
        ImageTensor::from_tensor(x_ref)?.save_png(&ref_path)?;
        sidecar["cosine_after_stage2"] = json!(cos(x_ref)?);
        sidecar["x_refine"] = json!(ref_path);
    }
    let after = sidecar.get("cosine_after_stage2").or(sidecar.get("cosine_after_stage1")).cloned();
    sidecar["cosine_after"] = after.unwrap_or(json!(null));
    let text = serde_json::to_string_pretty(&sidecar).map_err(Error::from)?;
    write(&a.out.join("attack.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn make_pairs(a: crate::MakePairs, run: &RunConfig) -> Result<()> {
    if !a.data.is_dir() {
        return Err(usage(format!("dataset root `{}` is not a directory", a.data.display())));
    }
    let manifest = ingest_dataset(&a.data)?;
    if manifest.identities.len() < 2 {
        return Err(Error::Data("pairs need at least two identities".into()).into());
    }
    let pools: Vec<Vec<PathBuf>> = manifest
        .identities
        .iter()
        .map(|(_, paths)| {
            if a.all {
                paths.clone()
            } else {
                paths[train_count(paths.len(), run.data.train_fraction)..].to_vec()
            }
        })
        .collect();
    let res = manifest.resolution;
    let rect = RectSampler::eye_band(res).centred(res)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(run.eval.seed));
    let n = pools.len();
    let mut records = Vec::new();
    for _ in 0..a.count.unwrap_or(run.eval.pairs) {
        let s = rng.random_range(0..n);
        let t = (s + rng.random_range(1..n)) % n;
        let pick = |rng: &mut ChaCha8Rng, pool: &[PathBuf]| pool[rng.random_range(0..pool.len())].clone();
        let source = fs::canonicalize(pick(&mut rng, &pools[s])).map_err(|e| Error::io(&a.data, e))?;
        let target = fs::canonicalize(pick(&mut rng, &pools[t])).map_err(|e| Error::io(&a.data, e))?;
        records.push(PairRecord { source, target, rect });
    }
    write(&a.out, &pairs::render(&records))?;
    println!("{}", json!({ "pairs": records.len(), "out": a.out }));
    Ok(())
}

fn parse_model(spec: &str) -> Result<(String, PathBuf, f64)> {
    let bad = || usage(format!("model `{spec}` must be NAME=CKPT:TAU"));
    let (name, rest) = spec.split_once('=').ok_or_else(bad)?;
    let (path, tau) = rest.rsplit_once(':').ok_or_else(bad)?;
    let tau: f64 = tau.parse().map_err(|_| bad())?;
    Ok((name.to_string(), PathBuf::from(path), tau))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn score(a: &crate::Evaluate, need_tau: bool) -> Result<(Vec<ModelScores>, Stealth)> {
    let tau = match (&a.tau, &a.calibration) {
        (Some(t), _) => *t,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<Calibration>(&text).map_err(Error::from)?.tau
        }
        (None, None) if need_tau => return Err(usage("evaluate needs --tau or --calibration")),
        (None, None) => 0.0,
    };
    let extra = a.models.iter().map(|m| parse_model(m)).collect::<Result<Vec<_>>>()?;
    if !a.pairs.is_file() {
        return Err(usage(format!("pair list `{}` does not exist", a.pairs.display())));
    }
    let text = fs::read_to_string(&a.pairs).map_err(|e| Error::io(&a.pairs, e))?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let records = pairs::parse(&text, base).map_err(usage)?;
    let attacker = Attacker::load(&a.ckpt1, a.ckpt2.as_deref())?;
    let fr = face_model(&a.fr)?;
    let res = attacker.resolution();
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        r.rect.validate(res, res).map_err(|e| usage(format!("pair {}: {e}", i + 1)))?;
        check_bound(&r.rect, res, res)?;
        samples.push(pair(image(&r.source, res)?, image(&r.target, res)?, r.rect));
    }
    let (x_out, x_ref) = attacker.attack(&samples, &fr)?;
    let x_adv = x_ref.unwrap_or(x_out);
    let x_t = stack_images(&samples.iter().map(|p| &p.x_t).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
    let x_s = stack_images(&samples.iter().map(|p| &p.x_s).collect::<Vec<_>>(), DType::F32, &Device::Cpu)?;
    let mut models = vec![ModelScores { name: fr.name().to_string(), tau, scores: similarity_scores(&x_t, &x_adv, &fr)? }];
    for (name, path, tau) in extra {
        let m = face_model(&path)?;
        models.push(ModelScores { name, tau, scores: similarity_scores(&x_t, &x_adv, &m)? });
    }
    let run = &attacker.run;
    let ext = RandomConvExtractor::new(&run.perceptual, DType::F32, &Device::Cpu)?;
    let lp = lpips_per_sample(&x_adv, &x_s, &ext, &run.perceptual.layer_weights)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let fid = if samples.len() >= 2 {
        Some(fid(&pooled_features(&ext, &x_adv)?, &pooled_features(&ext, &x_s)?)?)
    } else {
        None
    };
    Ok((models, Stealth { mse: Some(mse(&x_adv, &x_s)?), lpips: Some(mean(&lp)), fid }))
}
