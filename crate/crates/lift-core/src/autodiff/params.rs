//! Named parameter tensors with Adam/AdamW state and an exact binary
//! checkpoint format.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autodiff::graph::{Grads, Graph, NodeId};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Optimizer group, used for differential learning rates.
    pub group: u8,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in [-bound, bound]; callers pass 1/sqrt(fan_in).
    Uniform(f64),
    Zeros,
    Const(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimMode {
    Adam,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub mode: OptimMode,
    pub lr: f64,
    /// Per-group learning-rate overrides; groups not listed use `lr`.
    pub group_lr: BTreeMap<u8, f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> OptimConfig {
        OptimConfig {
            mode: OptimMode::Adam,
            lr,
            group_lr: BTreeMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> OptimConfig {
        OptimConfig {
            mode: OptimMode::AdamW,
            weight_decay,
            ..OptimConfig::adam(lr)
        }
    }

    pub fn with_group_lr(mut self, group: u8, lr: f64) -> OptimConfig {
        self.group_lr.insert(group, lr);
        self
    }

    fn lr_for(&self, group: u8) -> f64 {
        self.group_lr.get(&group).copied().unwrap_or(self.lr)
    }
}

/// A named collection of trainable tensors. Initialization is seeded per
/// parameter name, so insertion order never changes the values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub label: String,
    pub seed: u64,
    pub step: u64,
    pub frozen: bool,
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(label: &str, seed: u64) -> ParamStore {
        ParamStore {
            label: label.to_string(),
            seed,
            step: 0,
            frozen: false,
            params: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!(
                "parameter {name:?} already exists in store {:?}",
                self.label
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::shape("param", format!("{name:?} has empty shape {shape:?}")));
        }
        let value = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Uniform(bound) => {
                let mut s = Stream::derived(self.seed, name);
                (0..numel).map(|_| s.range(-bound, bound)).collect()
            }
        };
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                value,
                grad: vec![0.0; numel],
                m: vec![0.0; numel],
                v: vec![0.0; numel],
                group: 0,
            },
        );
        Ok(())
    }

    pub fn add_grouped(&mut self, name: &str, shape: Vec<usize>, init: Init, group: u8) -> Result<()> {
        self.add(name, shape, init)?;
        self.params.get_mut(name).unwrap().group = group;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam {
            label: self.label.clone(),
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let label = self.label.clone();
        self.params.get_mut(name).ok_or(Error::UnknownParam {
            label,
            name: name.to_string(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Binds a parameter into a graph as a leaf; trainable unless the
    /// store is frozen. Gradient still flows through frozen leaves to
    /// upstream inputs, it just is not collected for them.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let p = self.get(name)?;
        g.bound_leaf(
            Tensor::new(p.shape.clone(), p.value.clone())?,
            !self.frozen,
            &self.label,
            name,
        )
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the leaf gradients recorded for this store's bindings.
    pub fn accumulate(&mut self, g: &Graph, grads: &Grads) -> Result<()> {
        for b in g.bindings() {
            if b.store != self.label {
                continue;
            }
            let Some(src) = grads.get(b.node) else { continue };
            let p = self.get_mut(&b.name)?;
            for (dst, s) in p.grad.iter_mut().zip(src.iter()) {
                *dst += s;
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam/AdamW step over every parameter.
    pub fn adam_step(&mut self, cfg: &OptimConfig) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen {
                label: self.label.clone(),
            });
        }
        if cfg.lr <= 0.0 || cfg.group_lr.values().any(|&lr| lr <= 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            let lr = cfg.lr_for(p.group);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                if cfg.mode == OptimMode::AdamW && cfg.weight_decay > 0.0 {
                    p.value[i] *= 1.0 - lr * cfg.weight_decay;
                }
                p.value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// FNV-1a over the serialized checkpoint bytes.
    pub fn digest(&self) -> u64 {
        rng::fnv1a(&self.to_bytes())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.push(self.frozen as u8);
        write_str(&mut out, &self.label);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            write_str(&mut out, name);
            out.push(p.group);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for field in [&p.value, &p.m, &p.v] {
                for &x in field.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        ParamStore::from_bytes(&bytes, &path.display().to_string())
    }

    fn from_bytes(bytes: &[u8], origin: &str) -> Result<ParamStore> {
        let mut r = Reader { bytes, pos: 0, origin };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: origin.to_string(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: format!("{magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::BadVersion {
                path: origin.to_string(),
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let frozen = r.take(1, "frozen flag")?[0] != 0;
        let label = r.string("label")?;
        let n = r.u32("param count")? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n {
            let name = r.string("param name")?;
            let group = r.take(1, "group")?[0];
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let value = r.f64s(numel, "values")?;
            let m = r.f64s(numel, "first moments")?;
            let v = r.f64s(numel, "second moments")?;
            params.insert(
                name,
                Param {
                    shape,
                    value,
                    grad: vec![0.0; numel],
                    m,
                    v,
                    group,
                },
            );
        }
        Ok(ParamStore {
            label,
            seed,
            step,
            frozen,
            params,
        })
    }
}

pub const MAGIC: &[u8; 4] = b"LFC1";
pub const VERSION: u32 = 1;

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.origin.to_string(),
                what,
                needed: n,
                had: self.bytes.len() - self.pos,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::invalid(format!("{what}: bad utf-8")))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let b = self.take(n * 8, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
