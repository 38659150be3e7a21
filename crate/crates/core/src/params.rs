//! Named parameter storage shared by every network in the crate.
//!
//! A [`ParamStore`] plugs into candle's `VarBuilder` as a backend. Each tensor
//! requested by a layer constructor is taken from an optional source map
//! (pretrained weights or a checkpoint) or, failing that, initialised from a
//! ChaCha stream keyed by `(seed, name)`. Initialisation therefore does not
//! depend on construction order, and two stores built with the same seed are
//! bit-identical.
//!
//! Trainable stores hand out `Var`s so gradients flow; frozen stores hand out
//! plain tensors. Non-trainable state such as batch-norm running statistics
//! lives in the same store as "buffers" so that checkpoints and best-epoch
//! snapshots capture it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{FanInOut, NonLinearity, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    kind: EntryKind,
    tensor: Tensor,
    var: Option<Var>,
}

#[derive(Debug)]
struct Inner {
    seed: u64,
    trainable: bool,
    strict: bool,
    dtype: DType,
    device: Device,
    source: HashMap<String, Tensor>,
    entries: Mutex<Vec<Entry>>,
}

/// Shared, clonable handle to a set of named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

/// 64-bit FNV-1a; used to derive per-name RNG streams.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    /// A store whose tensors are all seed-initialised.
    pub fn seeded(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self::build(seed, dtype, trainable, HashMap::new(), false)
    }

    /// A store backed by existing tensors. With `strict`, asking for a name that
    /// the source lacks is an error instead of falling back to initialisation.
    pub fn from_tensors(
        source: HashMap<String, Tensor>,
        seed: u64,
        dtype: DType,
        trainable: bool,
        strict: bool,
    ) -> Self {
        Self::build(seed, dtype, trainable, source, strict)
    }

    fn build(
        seed: u64,
        dtype: DType,
        trainable: bool,
        source: HashMap<String, Tensor>,
        strict: bool,
    ) -> Self {
        ParamStore {
            inner: Arc::new(Inner {
                seed,
                trainable,
                strict,
                dtype,
                device: Device::Cpu,
                source,
                entries: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.inner.dtype
    }

    pub fn device(&self) -> &Device {
        &self.inner.device
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(self.clone()),
            self.inner.dtype,
            self.inner.device.clone(),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.inner.source.contains_key(name)
    }

    /// Creates (or returns the existing) mutable buffer `name` filled with `value`.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        let shape = shape.into();
        let mut entries = self.inner.entries.lock().expect("param store poisoned");
        if let Some(e) = entries.iter().find(|e| e.name == name) {
            return e
                .var
                .clone()
                .ok_or_else(|| Error::Checkpoint(format!("{name} registered as a plain tensor")));
        }
        let tensor = match self.inner.source.get(name) {
            Some(t) => {
                check_shape(name, &shape, t)?;
                t.to_dtype(self.inner.dtype)?
            }
            None if self.inner.strict => {
                return Err(Error::Checkpoint(format!("missing buffer {name}")));
            }
            None => (Tensor::ones(&shape, self.inner.dtype, &self.inner.device)? * value)?,
        };
        let var = Var::from_tensor(&tensor)?;
        entries.push(Entry {
            name: name.to_string(),
            kind: EntryKind::Buffer,
            tensor: var.as_tensor().clone(),
            var: Some(var.clone()),
        });
        Ok(var)
    }

    /// Trainable variables, in creation order (buffers excluded).
    pub fn trainable_vars(&self) -> Vec<Var> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .filter_map(|e| e.var.clone())
            .collect()
    }

    /// Trainable variables with their names, in creation order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .filter_map(|e| e.var.clone().map(|v| (e.name.clone(), v)))
            .collect()
    }

    /// Every named tensor (params and buffers) with its current value.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .map(|e| {
                let t = match &e.var {
                    Some(v) => v.as_tensor().clone(),
                    None => e.tensor.clone(),
                };
                (e.name.clone(), t)
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Deep copy of every mutable tensor, for best-epoch restoration.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        let mut out = HashMap::new();
        for e in entries.iter() {
            if let Some(v) = &e.var {
                out.insert(e.name.clone(), v.as_tensor().copy()?);
            }
        }
        Ok(out)
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        for e in entries.iter() {
            if let (Some(v), Some(t)) = (&e.var, snapshot.get(&e.name)) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    /// Overwrites a stored tensor in place. Only mutable entries can be set.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        match &e.var {
            Some(v) => Ok(v.set(&value.to_dtype(self.inner.dtype)?)?),
            None => Err(Error::Unsupported(format!("{name} is frozen"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        let entries = self.inner.entries.lock().expect("param store poisoned");
        entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| match &e.var {
                Some(v) => v.as_tensor().clone(),
                None => e.tensor.clone(),
            })
    }

    fn init_tensor(&self, shape: &Shape, name: &str, init: Init) -> Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.inner.seed ^ fnv1a(name.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mean + stdev * z
                })
                .collect(),
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan_of(shape, fan).max(1) as f64;
                let gain = match non_linearity {
                    NonLinearity::ReLU => 2f64.sqrt(),
                    NonLinearity::Tanh => 5.0 / 3.0,
                    NonLinearity::Linear | NonLinearity::Sigmoid => 1.0,
                    NonLinearity::SELU => 0.75,
                    NonLinearity::ExplicitGain(g) => g,
                };
                let std = gain / fan.sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            std * z
                        })
                        .collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            }
        };
        Ok(Tensor::from_vec(values, shape.clone(), &self.inner.device)?
            .to_dtype(self.inner.dtype)?)
    }

    fn fetch(&self, shape: Shape, name: &str, init: Init, dtype: DType) -> Result<Tensor> {
        {
            let entries = self.inner.entries.lock().expect("param store poisoned");
            if let Some(e) = entries.iter().find(|e| e.name == name) {
                let t = match &e.var {
                    Some(v) => v.as_tensor().clone(),
                    None => e.tensor.clone(),
                };
                check_shape(name, &shape, &t)?;
                return Ok(t.to_dtype(dtype)?);
            }
        }
        let tensor = match self.inner.source.get(name) {
            Some(t) => {
                check_shape(name, &shape, t)?;
                t.to_dtype(self.inner.dtype)?
            }
            None if self.inner.strict => {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            }
            None => self.init_tensor(&shape, name, init)?,
        };
        let (tensor, var) = if self.inner.trainable {
            let var = Var::from_tensor(&tensor)?;
            (var.as_tensor().clone(), Some(var))
        } else {
            (tensor, None)
        };
        self.inner
            .entries
            .lock()
            .expect("param store poisoned")
            .push(Entry {
                name: name.to_string(),
                kind: EntryKind::Param,
                tensor: tensor.clone(),
                var,
            });
        Ok(tensor.to_dtype(dtype)?)
    }
}

fn fan_of(shape: &Shape, fan: FanInOut) -> usize {
    let dims = shape.dims();
    let receptive: usize = dims.iter().skip(2).product();
    match (fan, dims.len()) {
        (_, 0) => 1,
        (_, 1) => dims[0],
        (FanInOut::FanIn, _) => dims[1] * receptive,
        (FanInOut::FanOut, _) => dims[0] * receptive,
    }
}

fn check_shape(name: &str, expected: &Shape, t: &Tensor) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::Checkpoint(format!(
            "shape mismatch for {name}: expected {expected:?}, found {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        self.fetch(s, name, h, dtype)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }

    fn get_unchecked(
        &self,
        name: &str,
        dtype: DType,
        _dev: &Device,
    ) -> candle_core::Result<Tensor> {
        match self.inner.source.get(name) {
            Some(t) => t.to_dtype(dtype),
            None => candle_core::bail!("no tensor named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.source.contains_key(name)
    }
}
