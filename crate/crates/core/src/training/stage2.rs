//! Stage 2: the refinement U-Net against a WGAN-GP patch critic, on top of
//! a frozen stage-1 generator.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::stage1::Stage1Model;
use super::{LossRecord, PairBatch, Recorder};
use crate::checkpoint::{CheckpointBundle, CheckpointMeta, RngState};
use crate::config::RunConfig;
use crate::data::{Dataset, PairSampler, RectSampler};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, boundary_variance_loss, gradient_penalty, lpips, recovery_loss_stage2, stage2_total,
    wasserstein_critic_loss, wasserstein_generator_loss, RandomConvExtractor, Stage2Terms,
};
use crate::networks::{AprNet, Critic, FrBackbone, PatchCritic};
use crate::nn::{Optimizer, ParamStore};

pub const KIND: &str = "stage2";

/// A refinement network plus the frozen stage-1 model it refines.
pub struct Stage2Model {
    pub stage1: Stage1Model,
    pub store: ParamStore,
    pub apr: AprNet,
}

impl Stage2Model {
    pub fn load(bundle: &CheckpointBundle) -> Result<Self> {
        bundle.expect_kind(KIND)?;
        let run = RunConfig::parse(&bundle.meta.config)?;
        let stage1 = Stage1Model::load(&stage1_bundle(bundle)?)?;
        let mut store = ParamStore::frozen(bundle.group("apr"), DType::F32, &Device::Cpu);
        let apr = AprNet::new(&mut store, &run.stage2.refiner)?;
        store.finish()?;
        Ok(Self { stage1, store, apr })
    }

    /// `(x_out, x_refine)`.
    pub fn attack(&self, batch: &PairBatch, id_encoder: &dyn FrBackbone) -> Result<(Tensor, Tensor)> {
        let x_out = self.stage1.generate(batch, id_encoder)?.x_out.detach();
        let x_ref = self.apr.refine(&x_out, &batch.x_s, &batch.masks)?;
        Ok((x_out, x_ref))
    }
}

/// The stage-1 checkpoint embedded in a stage-2 one.
fn stage1_bundle(bundle: &CheckpointBundle) -> Result<CheckpointBundle> {
    let config = bundle
        .meta
        .extra
        .get("stage1_config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Corrupt("stage-2 checkpoint lacks the stage-1 config".into()))?;
    let meta = CheckpointMeta { kind: super::stage1::KIND.into(), config: config.to_string(), ..Default::default() };
    let mut b = CheckpointBundle::new(meta);
    b.insert_group("gen", &bundle.group("stage1"));
    Ok(b)
}

pub struct Stage2Trainer {
    run: RunConfig,
    stage1: Stage1Model,
    stage1_config: String,
    apr_store: ParamStore,
    apr: AprNet,
    dis_store: ParamStore,
    critic: PatchCritic,
    extractor: RandomConvExtractor,
    opt_g: Optimizer,
    opt_d: Optimizer,
    sampler: PairSampler,
    noise: ChaCha8Rng,
    step: u64,
    pub log: Vec<LossRecord>,
}

fn build(
    run: &RunConfig,
    mut apr_store: ParamStore,
    mut dis_store: ParamStore,
) -> Result<(ParamStore, AprNet, ParamStore, PatchCritic)> {
    let apr = AprNet::new(&mut apr_store, &run.stage2.refiner)?;
    let critic = PatchCritic::new(&mut dis_store, run.data.resolution, run.stage2.critic_width)?;
    apr_store.finish()?;
    dis_store.finish()?;
    Ok((apr_store, apr, dis_store, critic))
}

impl Stage2Trainer {
    /// Starts stage 2 from a finished stage-1 checkpoint.
    pub fn new(run: &RunConfig, stage1: Option<&CheckpointBundle>) -> Result<Self> {
        run.validate()?;
        let stage1 = stage1.ok_or_else(|| Error::State("stage 2 needs a stage-1 checkpoint".into()))?;
        let model = Stage1Model::load(stage1)?;
        let t = &run.stage2.train;
        let dev = Device::Cpu;
        let (apr_store, apr, dis_store, critic) = build(
            run,
            ParamStore::new(DType::F32, &dev, t.seed),
            ParamStore::new(DType::F32, &dev, t.seed.wrapping_add(1)),
        )?;
        let mut noise = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(3));
        noise.set_stream(7);
        Ok(Self {
            run: run.clone(),
            stage1: model,
            stage1_config: stage1.meta.config.clone(),
            opt_g: Optimizer::new(apr_store.vars(), t.optim)?,
            opt_d: Optimizer::new(dis_store.vars(), t.optim)?,
            apr_store,
            apr,
            dis_store,
            critic,
            extractor: RandomConvExtractor::new(&run.perceptual, DType::F32, &dev)?,
            sampler: PairSampler::new(t.seed.wrapping_add(2), t.same_id_fraction, RectSampler::eye_band(run.data.resolution))?,
            noise,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn resume(bundle: &CheckpointBundle) -> Result<Self> {
        bundle.expect_kind(KIND)?;
        let run = RunConfig::parse(&bundle.meta.config)?;
        let s1 = stage1_bundle(bundle)?;
        let t = &run.stage2.train;
        let dev = Device::Cpu;
        let (apr_store, apr, dis_store, critic) = build(
            &run,
            ParamStore::preloaded(bundle.group("apr"), DType::F32, &dev),
            ParamStore::preloaded(bundle.group("dis"), DType::F32, &dev),
        )?;
        let steps = |k: &str| {
            bundle.meta.optimizer_steps.get(k).copied().ok_or_else(|| Error::Corrupt(format!("no step count for `{k}`")))
        };
        let rng = |k: &str| -> Result<ChaCha8Rng> {
            bundle.meta.rngs.get(k).ok_or_else(|| Error::Corrupt(format!("no `{k}` rng state")))?.restore()
        };
        let mut opt_g = Optimizer::new(apr_store.vars(), t.optim)?;
        opt_g.load_state(&bundle.group("opt_g"), steps("apr")?)?;
        let mut opt_d = Optimizer::new(dis_store.vars(), t.optim)?;
        opt_d.load_state(&bundle.group("opt_d"), steps("dis")?)?;
        let mut sampler = PairSampler::new(0, t.same_id_fraction, RectSampler::eye_band(run.data.resolution))?;
        sampler.set_rng(rng("pairs")?);
        Ok(Self {
            stage1: Stage1Model::load(&s1)?,
            stage1_config: s1.meta.config,
            extractor: RandomConvExtractor::new(&run.perceptual, DType::F32, &dev)?,
            run,
            apr_store,
            apr,
            dis_store,
            critic,
            opt_g,
            opt_d,
            sampler,
            noise: rng("noise")?,
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

    pub fn stage1(&self) -> &Stage1Model {
        &self.stage1
    }

    pub fn refiner_store(&self) -> &ParamStore {
        &self.apr_store
    }

    pub fn step(&mut self, data: &Dataset, attacked: &[&dyn FrBackbone]) -> Result<LossRecord> {
        let id_encoder = *attacked.first().ok_or_else(|| Error::Config("no model to attack".into()))?;
        let t = &self.run.stage2.train;
        let w = self.run.stage2.loss;
        let pairs = self.sampler.batch(data, t.batch)?;
        let batch = PairBatch::new(&pairs, self.run.alpha, DType::F32, &Device::Cpu)?;
        let x_out = self.stage1.generate(&batch, id_encoder)?.x_out.detach();
        let x_ref = self.apr.refine(&x_out, &batch.x_s, &batch.masks)?;
        let mut rec = Recorder::new(self.step);

        let real = self.critic.score(&batch.x_s)?;
        let fake_det = x_ref.detach();
        let fake = self.critic.score(&fake_det)?;
        let d_main = wasserstein_critic_loss(&real, &fake)?;
        let u: Vec<f32> = (0..pairs.len()).map(|_| self.noise.random::<f32>()).collect();
        let u = Tensor::from_vec(u, pairs.len(), &Device::Cpu)?;
        let gp = gradient_penalty(&self.critic, &batch.x_s, &fake_det, &u)?;
        let d_loss = (&d_main + (&gp * w.gp_coeff)?)?;
        rec.add("d_wasserstein", &d_main)?;
        rec.add("d_gp", &gp)?;
        rec.add("d_total", &d_loss)?;
        self.opt_d.step(&d_loss.backward()?)?;

        let mut adv = None;
        for fr in attacked {
            let a = adv_loss(&x_ref, &batch.x_t, *fr)?;
            adv = Some(match adv {
                None => a,
                Some(acc) => (acc + a)?,
            });
        }
        let terms = Stage2Terms {
            adv: (adv.expect("at least one model") / attacked.len() as f64)?,
            rec: recovery_loss_stage2(&x_ref, &x_out, &batch.x_s, &batch.same_id, &batch.weights)?,
            bv: boundary_variance_loss(&x_ref, &batch.x_s, &batch.masks.full)?,
            dis: wasserstein_generator_loss(&self.critic.score(&x_ref)?)?,
            lpips: lpips(&x_ref, &batch.x_s, &self.extractor, &self.run.perceptual.layer_weights)?,
        };
        let total = stage2_total(&terms, &w)?;
        rec.add("adv", &terms.adv)?;
        rec.add("rec", &terms.rec)?;
        rec.add("bv", &terms.bv)?;
        rec.add("dis", &terms.dis)?;
        rec.add("lpips", &terms.lpips)?;
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
            super::log_progress("stage2", &r);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<CheckpointBundle> {
        let mut meta = CheckpointMeta { kind: KIND.into(), step: self.step, config: self.run.to_text()?, ..Default::default() };
        meta.rngs.insert("pairs".into(), RngState::capture(self.sampler.rng()));
        meta.rngs.insert("noise".into(), RngState::capture(&self.noise));
        meta.optimizer_steps.insert("apr".into(), self.opt_g.steps());
        meta.optimizer_steps.insert("dis".into(), self.opt_d.steps());
        meta.extra.insert("stage1_config".into(), self.stage1_config.clone().into());
        let mut b = CheckpointBundle::new(meta);
        b.insert_group("stage1", &self.stage1.store.snapshot()?);
        b.insert_group("apr", &self.apr_store.snapshot()?);
        b.insert_group("dis", &self.dis_store.snapshot()?);
        b.insert_group("opt_g", &self.opt_g.state()?);
        b.insert_group("opt_d", &self.opt_d.state()?);
        Ok(b)
    }
}

pub fn train_stage2(
    data: &Dataset,
    stage1: Option<&CheckpointBundle>,
    attacked: &[&dyn FrBackbone],
    run: &RunConfig,
) -> Result<(CheckpointBundle, Vec<LossRecord>)> {
    let mut t = Stage2Trainer::new(run, stage1)?;
    t.run(data, attacked, run.stage2.train.steps)?;
    Ok((t.checkpoint()?, t.log))
}
