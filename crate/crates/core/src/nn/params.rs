//! Seeded parameter storage.
//!
//! Candle's CPU device cannot be seeded, so every parameter is drawn here from
//! a ChaCha stream instead. Parameters are created lazily the first time a
//! layer asks for them, in construction order, which makes initialization a
//! pure function of the seed and the model layout.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// A named set of parameters backed by candle `Var`s.
///
/// A frozen store hands out detached tensors, so no gradient is ever tracked
/// for its parameters.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    trainable: bool,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            trainable,
            dtype,
            device: Device::Cpu,
        }
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

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), self.dtype, self.device.clone())
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Detached copies of every parameter, sorted by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites existing parameters with the given values.
    ///
    /// Every name in `values` must already exist with the same shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().expect("param store poisoned");
        for (name, value) in values {
            let var = inner.vars.get(name).ok_or_else(|| {
                candle_core::Error::Msg(format!("unknown parameter {name} in checkpoint"))
            })?;
            if var.shape() != value.shape() {
                candle_core::bail!(
                    "shape mismatch for {name}: expected {:?}, got {:?}",
                    var.shape(),
                    value.shape()
                );
            }
            var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// SHA-256 over every parameter's name and little-endian f64 values.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.vars() {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    fn sample(rng: &mut ChaCha8Rng, shape: &Shape, init: Init) -> Result<Vec<f64>> {
        let n = shape.elem_count();
        let values = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => normal(rng, n, mean, stdev)?,
            Init::Uniform { lo, up } => uniform(rng, n, lo, up)?,
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape) as f64;
                let std = non_linearity.gain() / fan.max(1.0).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(rng, n, 0.0, std)?,
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(rng, n, -bound, bound)?
                    }
                }
            }
        };
        Ok(values)
    }
}

fn normal(rng: &mut ChaCha8Rng, n: usize, mean: f64, std: f64) -> Result<Vec<f64>> {
    if std == 0.0 {
        return Ok(vec![mean; n]);
    }
    let dist = Normal::new(mean, std).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, up: f64) -> Result<Vec<f64>> {
    if lo >= up {
        return Ok(vec![lo; n]);
    }
    let dist = Uniform::new(lo, up).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
    Ok((0..n).map(|_| rng.sample(dist)).collect())
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        let tensor = match inner.vars.get(name) {
            Some(var) => {
                if var.shape() != &s {
                    candle_core::bail!(
                        "parameter {name} requested with shape {s:?}, stored as {:?}",
                        var.shape()
                    );
                }
                var.as_tensor().clone()
            }
            None => {
                let values = Self::sample(&mut inner.rng, &s, h)?;
                let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
                let var = Var::from_tensor(&t)?;
                let out = var.as_tensor().clone();
                inner.vars.insert(name.to_string(), var);
                out
            }
        };
        if self.trainable {
            Ok(tensor)
        } else {
            Ok(tensor.detach())
        }
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> Result<Tensor> {
        let inner = self.inner.lock().expect("param store poisoned");
        match inner.vars.get(name) {
            Some(var) => var.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("parameter {name} not initialized"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.contains_key(name)
    }
}
