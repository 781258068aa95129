use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, Error, Result};

/// Initial value of a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// He-normal with the given fan-in and gain.
    Kaiming { fan_in: usize, gain: f64 },
    Normal(f64),
    Uniform(f64),
    /// First half of a vector set to `.0`, second half to `.1`.
    Halves(f64, f64),
}

/// Named parameters of one model, in deterministic (sorted) order.
///
/// A trainable store hands out `Var`-backed tensors so gradients flow to
/// them; a frozen store hands out constants, so backward passes through the
/// model never accumulate gradients for its weights.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    trainable: bool,
    rng: ChaCha8Rng,
    preset: BTreeMap<String, Tensor>,
    vars: BTreeMap<String, Var>,
    consts: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device, seed: u64) -> Self {
        Self {
            dtype,
            device: device.clone(),
            trainable: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            preset: BTreeMap::new(),
            vars: BTreeMap::new(),
            consts: BTreeMap::new(),
        }
    }

    /// Frozen store whose every parameter must come from `values`.
    pub fn frozen(values: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        let mut s = Self::new(dtype, device, 0);
        s.trainable = false;
        s.preset = values;
        s
    }

    /// Trainable store initialised from `values` instead of random draws.
    pub fn preloaded(values: BTreeMap<String, Tensor>, dtype: DType, device: &Device) -> Self {
        let mut s = Self::new(dtype, device, 0);
        s.preset = values;
        s
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) || self.consts.contains_key(name) {
            return Err(Error::State(format!("parameter `{name}` registered twice")));
        }
        let value = match self.preset.remove(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(dim_err!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    ));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None if !self.trainable => {
                return Err(Error::State(format!("weights for `{name}` were never initialised")))
            }
            None => self.draw(shape, init)?,
        };
        if self.trainable {
            let var = Var::from_tensor(&value)?;
            let t = var.as_tensor().clone();
            self.vars.insert(name.to_string(), var);
            Ok(t)
        } else {
            self.consts.insert(name.to_string(), value.clone());
            Ok(value)
        }
    }

    fn draw(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        std * z
                    })
                    .collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    std * z
                })
                .collect(),
            Init::Uniform(a) => (0..n).map(|_| self.rng.random_range(-a..=a)).collect(),
            Init::Halves(a, b) => (0..n).map(|i| if i < n / 2 { a } else { b }).collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Fails when preset values were supplied that no layer asked for.
    pub fn finish(&self) -> Result<()> {
        if let Some(name) = self.preset.keys().next() {
            return Err(Error::State(format!("unexpected parameter `{name}` in weights")));
        }
        Ok(())
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len() + self.consts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().detach().copy()?);
        }
        for (k, t) in &self.consts {
            out.insert(k.clone(), t.clone());
        }
        Ok(out)
    }

    /// Overwrites trainable parameters in place.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let v = values
                .get(name)
                .ok_or_else(|| Error::State(format!("missing value for `{name}`")))?;
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// FNV-1a over names and little-endian parameter bytes.
    pub fn fingerprint(&self) -> Result<u64> {
        fingerprint(&self.snapshot()?)
    }
}

pub fn fingerprint(values: &BTreeMap<String, Tensor>) -> Result<u64> {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (k, t) in values {
        feed(k.as_bytes());
        for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
            feed(&v.to_le_bytes());
        }
    }
    Ok(h)
}
