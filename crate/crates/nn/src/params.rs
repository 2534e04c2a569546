//! Named parameter storage with seeded, order-independent initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use strataseg_core::synthgen::sample_seed;

use crate::error::{Error, Result};

/// Initial values of a freshly created parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std sqrt(2 / fan_in).
    Kaiming { fan_in: usize },
    /// Uniform in [-bound, bound].
    Uniform { bound: f64 },
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    /// Optimized by gradient descent; false for running statistics.
    pub trainable: bool,
}

#[derive(Debug)]
struct Inner {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
    seed: u64,
}

/// Shared handle to a model's parameters.
#[derive(Debug, Clone)]
pub struct ParamStore(Arc<Mutex<Inner>>);

fn name_hash(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore(Arc::new(Mutex::new(Inner {
            params: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        })))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.0.lock().expect("parameter store lock poisoned")
    }

    pub fn dtype(&self) -> DType {
        self.lock().dtype
    }

    pub fn device(&self) -> Device {
        self.lock().device.clone()
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.lock().params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().params.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Param> {
        self.lock().params.get(name).cloned()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock()
            .params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    /// Trainable variables whose names start with `prefix`.
    pub fn trainable_vars_under(&self, prefix: &str) -> Vec<Var> {
        self.lock()
            .params
            .iter()
            .filter(|(k, p)| p.trainable && k.starts_with(prefix))
            .map(|(_, p)| p.var.clone())
            .collect()
    }

    /// Sorted (name, tensor) pairs.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.lock()
            .params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.lock()
            .params
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// Deep copy of every tensor.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters named in `values`. Every name must exist with the same
    /// shape; with `require_all`, every stored parameter must be supplied.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, require_all: bool) -> Result<()> {
        let inner = self.lock();
        for (name, t) in values {
            let Some(p) = inner.params.get(name) else {
                return Err(Error::Shape(format!("unexpected tensor {name}")));
            };
            if p.var.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    p.var.dims(),
                    t.dims()
                )));
            }
        }
        if require_all {
            if let Some(missing) = inner.params.keys().find(|k| !values.contains_key(*k)) {
                return Err(Error::Shape(format!("missing tensor {missing}")));
            }
        }
        for (name, t) in values {
            let p = &inner.params[name];
            p.var.set(&t.to_dtype(inner.dtype)?.to_device(&inner.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f64 values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// A name prefix within a store.
#[derive(Debug, Clone)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Creates a parameter. Values depend only on the store seed and the full name.
    pub fn param(&self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        let full = self.pp(name).prefix;
        let mut inner = self.store.lock();
        if inner.params.contains_key(&full) {
            return Err(Error::Config(format!("parameter {full} defined twice")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(inner.seed, name_hash(&full)));
        let values: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Const(c) => vec![c; n],
        };
        let t = Tensor::from_vec(values, shape, &inner.device)?.to_dtype(inner.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.params.insert(
            full,
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }
}
