//! Named, seeded parameter storage.
//!
//! Every parameter draws its initial values from a generator seeded by
//! `(store seed, parameter name)`, so a parameter's initial value does not
//! depend on which other blocks were constructed before it. Two models that
//! share a subset of parameter names and a seed start from identical values
//! on that subset.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for conv and linear layers.
    KaimingUniform { fan_in: usize },
    /// Normal with the given standard deviation.
    Normal(f64),
}

impl Init {
    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match *self {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect(),
        }
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            dtype,
            device: device.clone(),
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn builder(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: Vec::new(),
        }
    }

    /// Parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let guard = self.vars.lock().expect("parameter store poisoned");
        guard.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("parameter store poisoned").get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().expect("parameter store poisoned").keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("parameter store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place, keeping the tensor identity used by the model.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Zero every parameter whose name starts with one of `prefixes`.
    pub fn zero_matching(&self, prefixes: &[&str]) -> Result<usize> {
        let mut n = 0;
        for (name, var) in self.vars() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                var.set(&var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    fn get_or_init(&self, name: String, shape: Shape, init: Init) -> Result<Tensor> {
        let mut guard = self.vars.lock().expect("parameter store poisoned");
        if let Some(var) = guard.get(&name) {
            if var.shape() != &shape {
                return Err(Error::Config(format!(
                    "parameter {name} requested twice with shapes {:?} and {:?}",
                    var.dims(),
                    shape.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&name));
        let values = init.sample(shape.elem_count(), &mut rng);
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        guard.insert(name, var);
        Ok(out)
    }
}

/// Hierarchical view into a [`ParamStore`], in the style of a var-builder.
#[derive(Clone)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl ToString) -> Self {
        let mut prefix = self.prefix.clone();
        prefix.push(name.to_string());
        Self {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix.join("."))
        }
    }

    pub fn get(&self, shape: impl Into<Shape>, name: &str, init: Init) -> Result<Tensor> {
        self.store.get_or_init(self.path(name), shape.into(), init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
