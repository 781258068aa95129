//! Face-recognition surrogate trained with an additive cosine margin.
//!
//! Logits are `s·(cos θ_j − m·[j = y])`, with `cos θ_j` between the
//! normalised embedding and the normalised weight of class `j`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossRecord, Recorder};
use crate::checkpoint::{CheckpointBundle, CheckpointMeta, RngState};
use crate::config::{FrTrainConfig, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{calibrate_threshold, Calibration};
use crate::image::stack_images;
use crate::networks::fr::cosine_similarity;
use crate::networks::{FrBackbone, FrConfig, ToyFr};
use crate::nn::layers::l2_normalize;
use crate::nn::{Init, Optimizer, ParamStore};

pub const KIND: &str = "fr";

pub struct FrTrainer {
    cfg: FrTrainConfig,
    store: ParamStore,
    model: ToyFr,
    classes: Tensor,
    opt: Optimizer,
    rng: ChaCha8Rng,
    step: u64,
    pub log: Vec<LossRecord>,
}

impl FrTrainer {
    pub fn new(cfg: &FrTrainConfig, identities: usize) -> Result<Self> {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(DType::F32, &dev, cfg.seed);
        let model = ToyFr::new(&mut store, "fr", &cfg.model)?;
        let classes = store.get("cls.weight", &[identities, cfg.model.embed_dim], Init::Normal(1.0))?;
        let opt = Optimizer::new(store.vars(), cfg.optim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self { cfg: cfg.clone(), store, model, classes, opt, rng, step: 0, log: Vec::new() })
    }

    /// Continues from a checkpoint written by [`FrTrainer::checkpoint`].
    pub fn resume(bundle: &CheckpointBundle) -> Result<Self> {
        bundle.expect_kind(KIND)?;
        let run = RunConfig::parse(&bundle.meta.config)?;
        let cfg = run.fr;
        let mut values = bundle.group("fr");
        let cls = bundle.group("cls");
        let identities = cls
            .get("cls.weight")
            .ok_or_else(|| Error::Corrupt("fr checkpoint lacks class weights".into()))?
            .dim(0)?;
        values.extend(cls);
        let mut store = ParamStore::preloaded(values, DType::F32, &Device::Cpu);
        let model = ToyFr::new(&mut store, "fr", &cfg.model)?;
        let classes = store.get("cls.weight", &[identities, cfg.model.embed_dim], Init::Normal(1.0))?;
        store.finish()?;
        let mut opt = Optimizer::new(store.vars(), cfg.optim)?;
        let steps = bundle.meta.optimizer_steps.get("fr").copied();
        opt.load_state(&bundle.group("opt"), steps.ok_or_else(|| Error::Corrupt("no step count for `fr`".into()))?)?;
        let rng = bundle.meta.rngs.get("batches").ok_or_else(|| Error::Corrupt("no `batches` rng state".into()))?.restore()?;
        Ok(Self { cfg, store, model, classes, opt, rng, step: bundle.meta.step, log: Vec::new() })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &ToyFr {
        &self.model
    }

    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord> {
        let n_ids = data.identities.len();
        if self.classes.dim(0)? != n_ids {
            return Err(Error::Data(format!("trainer has {} classes, data {n_ids}", self.classes.dim(0)?)));
        }
        let mut images = Vec::with_capacity(self.cfg.batch);
        let mut labels = Vec::with_capacity(self.cfg.batch);
        for _ in 0..self.cfg.batch {
            let id = self.rng.random_range(0..n_ids);
            let imgs = &data.identities[id].images;
            images.push(&imgs[self.rng.random_range(0..imgs.len())]);
            labels.push(id as u32);
        }
        let x = stack_images(&images, DType::F32, &Device::Cpu)?;
        let e = l2_normalize(&self.model.features(&x)?)?;
        let w = l2_normalize(&self.classes)?;
        let cos = e.matmul(&w.t()?)?;
        let labels = Tensor::new(labels.as_slice(), &Device::Cpu)?;
        let onehot = onehot(&labels, n_ids)?;
        let logits = ((cos - (onehot.clone() * self.cfg.margin)?)? * self.cfg.scale)?;
        let max = logits.max_keepdim(1)?.detach();
        let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?;
        let target = (logits * onehot)?.sum_keepdim(1)?;
        let loss = (lse - target)?.mean_all()?;
        let mut rec = Recorder::new(self.step);
        rec.add("margin_ce", &loss)?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        let r = rec.finish();
        self.log.push(r.clone());
        Ok(r)
    }

    pub fn run(&mut self, data: &Dataset, steps: u64) -> Result<()> {
        for _ in 0..steps {
            let r = self.step(data)?;
            super::log_progress("fr", &r);
        }
        Ok(())
    }

    pub fn checkpoint(&self, run: &RunConfig) -> Result<CheckpointBundle> {
        let mut meta = CheckpointMeta { kind: KIND.into(), step: self.step, config: run.to_text()?, ..Default::default() };
        meta.rngs.insert("batches".into(), RngState::capture(&self.rng));
        meta.optimizer_steps.insert("fr".into(), self.opt.steps());
        let snap = self.store.snapshot()?;
        let (cls, fr): (BTreeMap<_, _>, BTreeMap<_, _>) = snap.into_iter().partition(|(k, _)| k.starts_with("cls."));
        let mut b = CheckpointBundle::new(meta);
        b.insert_group("fr", &fr);
        b.insert_group("cls", &cls);
        b.insert_group("opt", &self.opt.state()?);
        Ok(b)
    }
}

fn onehot(labels: &Tensor, classes: usize) -> Result<Tensor> {
    let n = labels.dim(0)?;
    let ids = Tensor::arange(0u32, classes as u32, labels.device())?;
    Ok(labels.reshape((n, 1))?.broadcast_eq(&ids.reshape((1, classes))?)?.to_dtype(DType::F32)?)
}

/// Frozen FR model from a checkpoint: gradients pass through it, but its
/// weights are constants.
pub fn load_fr(bundle: &CheckpointBundle, cfg: &FrConfig, dtype: DType) -> Result<ToyFr> {
    bundle.expect_kind(KIND)?;
    let mut store = ParamStore::frozen(bundle.group("fr"), dtype, &Device::Cpu);
    let fr = ToyFr::new(&mut store, "fr", cfg)?;
    store.finish()?;
    Ok(fr)
}

pub fn train_fr(data: &Dataset, run: &RunConfig) -> Result<(CheckpointBundle, Vec<LossRecord>)> {
    let mut t = FrTrainer::new(&run.fr, data.identities.len())?;
    t.run(data, run.fr.steps)?;
    Ok((t.checkpoint(run)?, t.log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrVerification {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub calibration: Calibration,
}

/// Scores `pairs` genuine and `pairs` impostor pairs drawn from `data` and
/// calibrates a verification threshold on them.
pub fn verify(fr: &dyn FrBackbone, data: &Dataset, pairs: usize, k_folds: usize, seed: u64) -> Result<FrVerification> {
    let n = data.identities.len();
    if n < 2 || data.identities.iter().any(|i| i.images.len() < 2) {
        return Err(Error::Data("verification needs two identities with two images each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in 0..2 * pairs {
        let s = rng.random_range(0..n);
        let imgs = &data.identities[s].images;
        let i = rng.random_range(0..imgs.len());
        if k < pairs {
            let j = (i + rng.random_range(1..imgs.len())) % imgs.len();
            a.push(&imgs[i]);
            b.push(&imgs[j]);
        } else {
            let t = (s + rng.random_range(1..n)) % n;
            let other = &data.identities[t].images;
            a.push(&imgs[i]);
            b.push(&other[rng.random_range(0..other.len())]);
        }
    }
    let mut scores = Vec::with_capacity(2 * pairs);
    for (ca, cb) in a.chunks(64).zip(b.chunks(64)) {
        let ea = fr.embed(&stack_images(ca, DType::F32, &Device::Cpu)?)?;
        let eb = fr.embed(&stack_images(cb, DType::F32, &Device::Cpu)?)?;
        scores.extend(cosine_similarity(&ea, &eb)?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    let impostor = scores.split_off(pairs);
    let calibration = calibrate_threshold(&scores, &impostor, k_folds)?;
    Ok(FrVerification { genuine: scores, impostor, calibration })
}
