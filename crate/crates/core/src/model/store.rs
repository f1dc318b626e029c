//! Named parameter storage with deterministic initialization.
//!
//! Initial values are derived from (model seed, parameter name), so parameter
//! creation order never affects the initial state.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// N(0, sqrt(2 / fan_in)), the usual choice ahead of ReLU.
    KaimingNormal { fan_in: usize },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for linear weights and biases.
    UniformFanIn { fan_in: usize },
    Zeros,
    Ones,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    vars: BTreeMap<String, Var>,
    trainable: BTreeMap<String, bool>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType, seed: u64) -> Self {
        Self {
            device,
            dtype,
            seed,
            vars: BTreeMap::new(),
            trainable: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn init_values(&self, name: &str, len: usize, init: Init) -> Vec<f64> {
        let mut rng = rng::derived(self.seed, &format!("param:{name}"));
        match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            }
            Init::UniformFanIn { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        }
    }

    /// Create (or fetch) a named variable; returns the tensor handle that
    /// shares storage with the stored [`Var`].
    pub fn var(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            return Ok(v.as_tensor().clone());
        }
        let len: usize = shape.iter().product();
        let values = self.init_values(name, len, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.trainable.insert(name.to_string(), trainable);
        Ok(handle)
    }

    /// Like [`ParamStore::var`] but returns the `Var` itself; used for state
    /// that the layer updates directly (batch-norm running statistics).
    pub fn state_var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.var(name, shape, init, false)?;
        Ok(self.vars.get(name).expect("just inserted").clone())
    }

    /// Trainable variables in deterministic (sorted-name) order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(n, _)| self.trainable.get(*n).copied().unwrap_or(false))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Byte-level checksum of all parameters, for determinism tests.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            let flat: Vec<f32> = var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1()?;
            for v in flat {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(&hasher.finalize()[..16]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors.into_iter().collect(), path)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = loaded.get(name).ok_or_else(|| {
                Error::Config(format!("checkpoint missing parameter '{name}'"))
            })?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        for name in loaded.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Config(format!(
                    "checkpoint has unknown parameter '{name}'"
                )));
            }
        }
        Ok(())
    }
}
