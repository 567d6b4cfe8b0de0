//! Named, seeded parameter storage and the shared checkpoint format.
//!
//! Parameters are initialised from a ChaCha stream owned by the store, so a
//! model built twice from the same seed is bit-identical. Checkpoints are
//! "EDC1", a u64 LE header length, a JSON header and an f32 LE payload in
//! sorted parameter-name order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{split_header, take_f32s, write_f32s, write_header};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EDC1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Identity,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
}

pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.names().len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
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

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.lock().unwrap().values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.lock().unwrap().values().map(|v| v.elem_count()).sum()
    }

    fn get_or_init(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name}: stored {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = self.rng.lock().unwrap();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Identity => {
                if shape.len() != 2 || shape[0] != shape[1] {
                    return Err(Error::Shape(format!(
                        "identity init needs a square matrix, got {shape:?}"
                    )));
                }
                let k = shape[0];
                (0..n).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| u.sample(&mut *rng)).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
                .collect::<Vec<f64>>(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites an existing parameter (used by tests that configure special
    /// weights, e.g. identity trunks or zeroed projections).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        let v = vars
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over the f32 little-endian bytes of every parameter, in name
    /// order, with names and shapes mixed in.
    pub fn checksum(&self) -> Result<String> {
        let vars = self.vars.lock().unwrap();
        let mut h = Sha256::new();
        for (name, v) in vars.iter() {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Copies every parameter under `prefix` from `other` into this store
    /// (prefix preserved). Used to bundle a frozen encoder into a stage-2
    /// checkpoint.
    pub fn absorb(&self, other: &ParamStore, prefix: &str) -> Result<()> {
        let mut vars = self.vars.lock().unwrap();
        for (name, v) in other.vars.lock().unwrap().iter() {
            let t = v.as_tensor().to_dtype(self.dtype)?;
            vars.insert(format!("{prefix}{name}"), Var::from_tensor(&t)?);
        }
        Ok(())
    }

    /// Adds (or replaces) a parameter holding a copy of `value`.
    pub fn insert(&self, name: &str, value: &Tensor) -> Result<()> {
        let t = value.to_dtype(self.dtype)?.copy()?;
        self.vars
            .lock()
            .unwrap()
            .insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// New store holding the parameters under `prefix`, with the prefix removed.
    pub fn extract(&self, prefix: &str) -> Result<ParamStore> {
        let out = ParamStore::new(0, self.dtype);
        {
            let mut dst = out.vars.lock().unwrap();
            for (name, v) in self.vars.lock().unwrap().iter() {
                if let Some(rest) = name.strip_prefix(prefix) {
                    dst.insert(rest.to_string(), Var::from_tensor(&v.as_tensor().copy()?)?);
                }
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, kind: &str, meta: serde_json::Value) -> Result<String> {
        let checksum = self.checksum()?;
        let vars = self.vars.lock().unwrap();
        let mut entries = Vec::with_capacity(vars.len());
        let mut payload = Vec::new();
        for (name, v) in vars.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: v.dims().to_vec(),
            });
            payload.extend(v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
        }
        let header = CheckpointHeader {
            kind: kind.to_string(),
            meta,
            checksum: checksum.clone(),
            tensors: entries,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_header(&mut out, CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?)?;
        write_f32s(&mut out, &payload)?;
        std::io::Write::flush(&mut out)?;
        Ok(checksum)
    }

    /// Loads a checkpoint into a fresh store. Verifies the recorded checksum.
    pub fn load(path: &Path, dtype: DType) -> Result<(ParamStore, CheckpointHeader)> {
        let bytes = std::fs::read(path)?;
        let (h, mut payload) = split_header(&bytes, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader =
            serde_json::from_slice(h).map_err(|e| Error::Header(format!("checkpoint header: {e}")))?;
        let store = ParamStore::new(0, dtype);
        {
            let mut vars = store.vars.lock().unwrap();
            for (i, e) in header.tensors.iter().enumerate() {
                let n = e.shape.iter().product();
                let (values, rest) = take_f32s(payload, n, i)?;
                payload = rest;
                let t = Tensor::from_vec(values, e.shape.as_slice(), &store.device)?.to_dtype(dtype)?;
                vars.insert(e.name.clone(), Var::from_tensor(&t)?);
            }
        }
        if !payload.is_empty() {
            return Err(Error::Header(format!("{} trailing checkpoint bytes", payload.len())));
        }
        if dtype == DType::F32 {
            let sum = store.checksum()?;
            if sum != header.checksum {
                return Err(Error::Data(format!(
                    "checkpoint checksum mismatch: header {}, payload {sum}",
                    header.checksum
                )));
            }
        }
        Ok((store, header))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

/// Path-prefixed view used by module constructors.
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: join(&self.prefix, &name.to_string()),
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_init(&join(&self.prefix, name), shape, init)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
