//! Stage 1: style encoder, mapping network and generator against a
//! logistic style critic with R1, alternating one critic step and one
//! generator step.

use candle_core::{DType, Device};

use super::{LossRecord, PairBatch, Recorder};
use crate::checkpoint::{CheckpointBundle, CheckpointMeta, RngState};
use crate::config::RunConfig;
use crate::data::{Dataset, PairSampler, RectSampler};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, logistic_critic_loss, logistic_generator_loss, lpips, r1_penalty, recovery_loss_stage1, stage1_total,
    RandomConvExtractor, Stage1Terms,
};
use crate::networks::{AttStyleGan, Critic, FrBackbone, Generated, StyleCritic};
use crate::nn::{Optimizer, ParamStore};

pub const KIND: &str = "stage1";

/// A trained (or initial) stage-1 generator.
pub struct Stage1Model {
    pub store: ParamStore,
    pub gan: AttStyleGan,
}

impl Stage1Model {
    /// Frozen copy of the generator stored in a stage-1 checkpoint.
    pub fn load(bundle: &CheckpointBundle) -> Result<Self> {
        bundle.expect_kind(KIND)?;
        let run = RunConfig::parse(&bundle.meta.config)?;
        let mut store = ParamStore::frozen(bundle.group("gen"), DType::F32, &Device::Cpu);
        let gan = AttStyleGan::new(&mut store, &run.generator)?;
        store.finish()?;
        Ok(Self { store, gan })
    }

    pub fn generate(&self, batch: &PairBatch, id_encoder: &dyn FrBackbone) -> Result<Generated> {
        self.gan.generate(&batch.x_s, &batch.x_t, &batch.masks, id_encoder)
    }
}

pub struct Stage1Trainer {
    run: RunConfig,
    gen_store: ParamStore,
    gan: AttStyleGan,
    dis_store: ParamStore,
    critic: StyleCritic,
    extractor: RandomConvExtractor,
    opt_g: Optimizer,
    opt_d: Optimizer,
    sampler: PairSampler,
    step: u64,
    pub log: Vec<LossRecord>,
}

fn build(
    run: &RunConfig,
    mut gen_store: ParamStore,
    mut dis_store: ParamStore,
) -> Result<(ParamStore, AttStyleGan, ParamStore, StyleCritic)> {
    let gan = AttStyleGan::new(&mut gen_store, &run.generator)?;
    let critic = StyleCritic::new(&mut dis_store, run.data.resolution, run.stage1.critic_width)?;
    gen_store.finish()?;
    dis_store.finish()?;
    Ok((gen_store, gan, dis_store, critic))
}

impl Stage1Trainer {
    pub fn new(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let t = &run.stage1.train;
        let dev = Device::Cpu;
        let (gen_store, gan, dis_store, critic) = build(
            run,
            ParamStore::new(DType::F32, &dev, t.seed),
            ParamStore::new(DType::F32, &dev, t.seed.wrapping_add(1)),
        )?;
        let opt_g = Optimizer::new(gen_store.vars(), t.optim)?;
        let opt_d = Optimizer::new(dis_store.vars(), t.optim)?;
        let sampler = PairSampler::new(t.seed.wrapping_add(2), t.same_id_fraction, RectSampler::eye_band(run.data.resolution))?;
        Ok(Self {
            run: run.clone(),
            gen_store,
            gan,
            dis_store,
            critic,
            extractor: RandomConvExtractor::new(&run.perceptual, DType::F32, &dev)?,
            opt_g,
            opt_d,
            sampler,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn resume(bundle: &CheckpointBundle) -> Result<Self> {
        bundle.expect_kind(KIND)?;
        let run = RunConfig::parse(&bundle.meta.config)?;
        let t = &run.stage1.train;
        let dev = Device::Cpu;
        let (gen_store, gan, dis_store, critic) = build(
            &run,
            ParamStore::preloaded(bundle.group("gen"), DType::F32, &dev),
            ParamStore::preloaded(bundle.group("dis"), DType::F32, &dev),
        )?;
        let steps = |k: &str| {
            bundle.meta.optimizer_steps.get(k).copied().ok_or_else(|| Error::Corrupt(format!("no step count for `{k}`")))
        };
        let mut opt_g = Optimizer::new(gen_store.vars(), t.optim)?;
        opt_g.load_state(&bundle.group("opt_g"), steps("gen")?)?;
        let mut opt_d = Optimizer::new(dis_store.vars(), t.optim)?;
        opt_d.load_state(&bundle.group("opt_d"), steps("dis")?)?;
        let mut sampler = PairSampler::new(0, t.same_id_fraction, RectSampler::eye_band(run.data.resolution))?;
        let rng = bundle.meta.rngs.get("pairs").ok_or_else(|| Error::Corrupt("no pair-sampler state".into()))?;
        sampler.set_rng(rng.restore()?);
        Ok(Self {
            extractor: RandomConvExtractor::new(&run.perceptual, DType::F32, &dev)?,
            run,
            gen_store,
            gan,
            dis_store,
            critic,
            opt_g,
            opt_d,
            sampler,
            step: bundle.meta.step,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn gan(&self) -> &AttStyleGan {
        &self.gan
    }

    /// One critic step then one generator step. `attacked` holds the
    /// white-box models whose adversarial losses are averaged; the first one
    /// also supplies the target identity vectors.
    pub fn step(&mut self, data: &Dataset, attacked: &[&dyn FrBackbone]) -> Result<LossRecord> {
        let id_encoder = *attacked.first().ok_or_else(|| Error::Config("no model to attack".into()))?;
        let t = &self.run.stage1.train;
        let w = self.run.stage1.loss;
        let pairs = self.sampler.batch(data, t.batch)?;
        let batch = PairBatch::new(&pairs, self.run.alpha, DType::F32, &Device::Cpu)?;
        let out = self.gan.generate(&batch.x_s, &batch.x_t, &batch.masks, id_encoder)?;
        let mut rec = Recorder::new(self.step);

        let real = self.critic.score(&batch.x_s)?;
        let fake = self.critic.score(&out.x_out.detach())?;
        let d_main = logistic_critic_loss(&real, &fake)?;
        let r1 = r1_penalty(&self.critic, &batch.x_s)?;
        let d_loss = (&d_main + (&r1 * (w.r1_coeff / 2.0))?)?;
        rec.add("d_logistic", &d_main)?;
        rec.add("d_r1", &r1)?;
        rec.add("d_total", &d_loss)?;
        self.opt_d.step(&d_loss.backward()?)?;

        let terms = generator_terms(&out, &batch, attacked, &self.extractor, &self.run, &self.critic)?;
        let total = stage1_total(&terms, &w)?;
        rec.add("adv", &terms.adv)?;
        rec.add("rec", &terms.rec)?;
        rec.add("lpips", &terms.lpips)?;
        rec.add("dis", &terms.dis)?;
        rec.add("total", &total)?;
        self.opt_g.step(&total.backward()?)?;

        self.step += 1;
        let r = rec.finish();
        self.log.push(r.clone());
        Ok(r)
    }

    pub fn run(&mut self, data: &Dataset, attacked: &[&dyn FrBackbone], steps: u64) -> Result<()> {
        for _ in 0..steps {
            let r = self.step(data, attacked)?;
            super::log_progress("stage1", &r);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<CheckpointBundle> {
        let mut meta = CheckpointMeta { kind: KIND.into(), step: self.step, config: self.run.to_text()?, ..Default::default() };
        meta.rngs.insert("pairs".into(), RngState::capture(self.sampler.rng()));
        meta.optimizer_steps.insert("gen".into(), self.opt_g.steps());
        meta.optimizer_steps.insert("dis".into(), self.opt_d.steps());
        let mut b = CheckpointBundle::new(meta);
        b.insert_group("gen", &self.gen_store.snapshot()?);
        b.insert_group("dis", &self.dis_store.snapshot()?);
        b.insert_group("opt_g", &self.opt_g.state()?);
        b.insert_group("opt_d", &self.opt_d.state()?);
        Ok(b)
    }
}

fn generator_terms(
    out: &Generated,
    batch: &PairBatch,
    attacked: &[&dyn FrBackbone],
    extractor: &RandomConvExtractor,
    run: &RunConfig,
    critic: &StyleCritic,
) -> Result<Stage1Terms> {
    let mut adv = None;
    for fr in attacked {
        let a = adv_loss(&out.x_out, &batch.x_t, *fr)?;
        adv = Some(match adv {
            None => a,
            Some(acc) => (acc + a)?,
        });
    }
    let adv = (adv.expect("at least one model") / attacked.len() as f64)?;
    Ok(Stage1Terms {
        adv,
        rec: recovery_loss_stage1(&out.x_syn, &batch.x_s, &batch.weights)?,
        lpips: lpips(&out.x_syn, &batch.x_s, extractor, &run.perceptual.layer_weights)?,
        dis: logistic_generator_loss(&critic.score(&out.x_out)?)?,
    })
}

pub fn train_stage1(
    data: &Dataset,
    attacked: &[&dyn FrBackbone],
    run: &RunConfig,
) -> Result<(CheckpointBundle, Vec<LossRecord>)> {
    let mut t = Stage1Trainer::new(run)?;
    t.run(data, attacked, run.stage1.train.steps)?;
    Ok((t.checkpoint()?, t.log))
}

