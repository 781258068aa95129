//! Run configuration as a flat `key = value` document.
//!
//! ```text
//! # advinpaint run-config v1
//! data.identities = 32
//! stage1.train.optim.kind = adamw
//! fr.model.channels = [8,16,32,32]
//! ```
//!
//! Keys are the dotted paths of [`RunConfig`]'s fields. Values are JSON
//! literals, except that string fields take their text verbatim. Keys not
//! listed are taken from [`RunConfig::default`]; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, PerceptualConfig};
use crate::masks::DEFAULT_ALPHA;
use crate::networks::{AprConfig, FrConfig, GeneratorConfig};
use crate::nn::OptimConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_HEADER: &str = "# advinpaint run-config v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub identities: usize,
    pub per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Share of each identity's images used for training; the rest are held
    /// out for verification and validation pairs.
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { identities: 32, per_identity: 64, resolution: 64, seed: 7, train_fraction: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub same_id_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::default(), batch: 4, steps: 2000, seed: 11, same_id_fraction: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.same_id_fraction) {
            return Err(Error::Config(format!(
                "same_id_fraction must lie in [0, 1], got {}",
                self.same_id_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrTrainConfig {
    pub model: FrConfig,
    pub optim: OptimConfig,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    /// Additive cosine margin.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
}

impl Default for FrTrainConfig {
    fn default() -> Self {
        Self {
            model: FrConfig { channels: [8, 16, 32, 32], ..FrConfig::default() },
            optim: OptimConfig { lr: 2e-3, ..OptimConfig::default() },
            batch: 32,
            steps: 500,
            seed: 3,
            margin: 0.3,
            scale: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub critic_width: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig { optim: OptimConfig { lr: 2e-3, ..OptimConfig::default() }, ..TrainConfig::default() },
            loss: LossWeights { lambda_rec: 5e-4, lambda_lpips: 0.1, lambda_dis: 0.05, ..LossWeights::default() },
            critic_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub critic_width: usize,
    pub refiner: AprConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            train: TrainConfig { steps: 400, seed: 13, ..TrainConfig::default() },
            loss: LossWeights { lambda_rec: 2e-3, lambda_lpips: 2.0, lambda_dis: 0.01, ..LossWeights::default() },
            critic_width: 16,
            refiner: AprConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Cross-identity validation pairs for attack success.
    pub pairs: usize,
    pub seed: u64,
    pub k_folds: usize,
    /// Genuine and impostor pairs each, for threshold calibration.
    pub calibration_pairs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { pairs: 50, seed: 21, k_folds: 10, calibration_pairs: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub fr: FrTrainConfig,
    pub generator: GeneratorConfig,
    pub perceptual: PerceptualConfig,
    /// Discount rate of the recovery mask.
    pub alpha: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub work_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { work_dir: "run".into() }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            fr: FrTrainConfig::default(),
            generator: GeneratorConfig { base_channels: 32, style_dim: 64, ..GeneratorConfig::toy() },
            perceptual: PerceptualConfig { channels: vec![8, 16, 32], ..PerceptualConfig::default() },
            alpha: DEFAULT_ALPHA,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.clone())),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node.as_object_mut().and_then(|m| m.get_mut(*p)).expect("key exists in defaults");
    }
    if let Some(m) = node.as_object_mut() {
        m.insert(parts[parts.len() - 1].to_string(), value);
    }
}

fn render_leaf(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// A 32×32 configuration small enough for tests and smoke runs.
    pub fn tiny() -> Self {
        let steps = |steps: u64, seed: u64| TrainConfig { batch: 2, steps, seed, ..TrainConfig::default() };
        Self {
            data: DataConfig { identities: 4, per_identity: 6, resolution: 32, seed: 7, train_fraction: 0.5 },
            fr: FrTrainConfig {
                model: FrConfig { resolution: 32, channels: [4, 8, 8, 8], embed_dim: 16 },
                batch: 8,
                steps: 4,
                ..FrTrainConfig::default()
            },
            generator: GeneratorConfig { resolution: 32, num_blocks: 4, style_dim: 16, base_channels: 8, id_dim: 16 },
            perceptual: PerceptualConfig { channels: vec![4, 8, 8], ..PerceptualConfig::default() },
            stage1: Stage1Config { train: steps(3, 11), critic_width: 4, ..Stage1Config::default() },
            stage2: Stage2Config {
                train: steps(3, 13),
                critic_width: 4,
                refiner: AprConfig { resolution: 32, width: 4, ..AprConfig::default() },
                ..Stage2Config::default()
            },
            eval: EvalConfig { pairs: 4, seed: 21, k_folds: 2, calibration_pairs: 8 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.identities < 2 {
            return Err(Error::Config("at least two identities are required".into()));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        self.generator.validate()?;
        self.fr.model.validate()?;
        self.fr.optim.validate()?;
        self.perceptual.validate()?;
        self.stage1.train.validate()?;
        self.stage1.loss.validate()?;
        self.stage2.train.validate()?;
        self.stage2.loss.validate()?;
        self.stage2.refiner.validate()?;
        if self.generator.resolution != self.data.resolution
            || self.fr.model.resolution != self.data.resolution
            || self.stage2.refiner.resolution != self.data.resolution
        {
            return Err(Error::Config("generator, FR model, refiner and data must share one resolution".into()));
        }
        if self.fr.model.embed_dim != self.generator.id_dim {
            return Err(Error::Config(format!(
                "generator.id_dim ({}) must equal fr.model.embed_dim ({})",
                self.generator.id_dim, self.fr.model.embed_dim
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.eval.k_folds < 2 || self.eval.pairs == 0 {
            return Err(Error::Config("eval needs k_folds >= 2 and at least one pair".into()));
        }
        if self.fr.batch < 2 || !(self.fr.scale > 0.0) || self.fr.margin < 0.0 {
            return Err(Error::Config("fr training needs batch >= 2, scale > 0, margin >= 0".into()));
        }
        Ok(())
    }

    /// Dotted keys and their values, sorted.
    pub fn entries(&self) -> Result<Vec<(String, Value)>> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::from(CONFIG_HEADER);
        s.push('\n');
        for (k, v) in self.entries()? {
            s.push_str(&format!("{k} = {}\n", render_leaf(&v)));
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some(CONFIG_HEADER) => {}
            Some(other) if other.starts_with("# advinpaint run-config v") => {
                let found = other.trim_start_matches("# advinpaint run-config v").parse().unwrap_or(0);
                return Err(Error::Version { found, expected: CONFIG_VERSION });
            }
            _ => return Err(Error::Config(format!("config must start with `{CONFIG_HEADER}`"))),
        }
        let defaults = Self::default();
        let mut root = serde_json::to_value(&defaults)?;
        let known: std::collections::BTreeMap<String, Value> = defaults.entries()?.into_iter().collect();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 2)))?;
            let (k, v) = (k.trim(), v.trim());
            let template = known.get(k).ok_or_else(|| Error::Config(format!("unknown config key `{k}`")))?;
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("config key `{k}` given twice")));
            }
            let value = match template {
                Value::String(_) => Value::String(v.to_string()),
                _ => serde_json::from_str(v)
                    .map_err(|e| Error::Config(format!("bad value for `{k}`: {e}")))?,
            };
            set_path(&mut root, k, value);
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.stage1.train.optim.lr = 3.3e-4;
        cfg.alpha = 0.1 + 0.2;
        cfg.paths.work_dir = "some dir/x".into();
        let text = cfg.to_text().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn partial_documents_and_rejections() {
        let cfg = RunConfig::parse(&format!("{CONFIG_HEADER}\nstage1.train.steps = 7\nstage1.train.optim.kind = sgd\n")).unwrap();
        assert_eq!(cfg.stage1.train.steps, 7);
        assert_eq!(cfg.stage1.train.optim.kind, crate::nn::OptimizerKind::Sgd);
        assert_eq!(cfg.data, DataConfig::default());
        let bad = |body: &str| RunConfig::parse(&format!("{CONFIG_HEADER}\n{body}\n"));
        assert!(matches!(bad("stage1.train.stepz = 7"), Err(Error::Config(_))));
        assert!(matches!(bad("stage1.train.optim.lr = 0"), Err(Error::Config(_))));
        assert!(matches!(bad("stage1.train.same_id_fraction = 1.5"), Err(Error::Config(_))));
        assert!(matches!(bad("data.identities = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("data.identities = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("# advinpaint run-config v9\n"), Err(Error::Version { .. })));
    }
}
