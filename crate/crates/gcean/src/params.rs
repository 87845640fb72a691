//! Named parameter store, Adam with per-group learning rates, and the
//! binary checkpoint container.
//!
//! Parameters live in a `BTreeMap` keyed by dotted names
//! (`salm.converter.frame.w1`, `gccm.block2.sigma_S`, ...), so iteration
//! order is stable and checkpoints are byte-reproducible. The [`Binder`]
//! bridges the store into an autodiff [`Graph`], memoizing one leaf per
//! parameter per graph so gradients accumulate correctly when a module
//! is applied to several inputs.

use crate::autodiff::{Graph, NodeId};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const CKPT_MAGIC: &[u8; 4] = b"GCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (expected GCKP)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint field is not valid UTF-8")]
    BadString,
}

#[derive(Clone)]
struct ParamEntry {
    value: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// All trainable parameters, keyed by dotted name.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let dim = value.dim();
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry { value, m: Array2::zeros(dim), v: Array2::zeros(dim) },
        );
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Scalar counts grouped by the first two dotted name components
    /// (`salm.converter`, `gccm.block1`, `dvchead.captioner`, ...).
    pub fn segment_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.entries {
            let seg: String = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *out.entry(seg).or_insert(0) += e.value.len();
        }
        out
    }

    /// Adam update over `grads` (name -> gradient), with the global-norm
    /// clip applied across all listed gradients jointly before the moment
    /// updates. Parameters without a gradient entry are left untouched.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Array2<f64>>,
        t: u64,
        opt: &AdamConfig,
        lr_for: impl Fn(&str) -> f64,
    ) {
        assert!(t >= 1, "adam step count is 1-based");
        let mut sq = 0.0;
        for g in grads.values() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if norm > opt.clip_norm && norm > 0.0 { opt.clip_norm / norm } else { 1.0 };

        let bc1 = 1.0 - opt.beta1.powi(t as i32);
        let bc2 = 1.0 - opt.beta2.powi(t as i32);
        for (name, g) in grads {
            let e = self.entries.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let lr = lr_for(name);
            ndarray::Zip::from(&mut e.m)
                .and(&mut e.v)
                .and(&mut e.value)
                .and(g)
                .for_each(|m, v, p, &graw| {
                    let gc = graw * scale;
                    *m = opt.beta1 * *m + (1.0 - opt.beta1) * gc;
                    *v = opt.beta2 * *v + (1.0 - opt.beta2) * gc * gc;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + opt.eps);
                });
        }
    }

    pub fn save(&self, path: &Path, config_json: &str, seed: u64) -> Result<(), CkptError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        let cfg = config_json.as_bytes();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.extend_from_slice(&(e.value.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(e.value.ncols() as u32).to_le_bytes());
            for x in e.value.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint, returning the store, the config snapshot it
    /// carries, and the seed it was trained with.
    pub fn load(path: &Path) -> Result<(Self, String, u64), CkptError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8], CkptError> {
            if *at + n > buf.len() {
                return Err(CkptError::Truncated);
            }
            let s = &buf[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 4)? != CKPT_MAGIC {
            return Err(CkptError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CkptError::BadVersion(version));
        }
        let seed = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
        let cfg_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let config_json =
            String::from_utf8(take(&mut at, cfg_len)?.to_vec()).map_err(|_| CkptError::BadString)?;
        let n = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let name =
                String::from_utf8(take(&mut at, name_len)?.to_vec()).map_err(|_| CkptError::BadString)?;
            let rows = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
            let raw = take(&mut at, rows * cols * 8)?;
            let mut arr = Array2::zeros((rows, cols));
            for (i, x) in arr.iter_mut().enumerate() {
                *x = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
            }
            store.insert(&name, arr);
        }
        Ok((store, config_json, seed))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

/// Memoizes one graph leaf per parameter name, so repeated module
/// applications share leaves and their gradients sum on the tape.
#[derive(Default)]
pub struct Binder {
    bound: BTreeMap<String, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn p(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = g.param(store.get(name).clone());
        self.bound.insert(name.to_string(), id);
        id
    }

    /// Collects gradients for every bound parameter after a backward
    /// sweep. Unreached parameters are omitted.
    pub fn collect(&self, grads: &[Option<Array2<f64>>]) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(gr) = &grads[id] {
                out.insert(name.clone(), gr.clone());
            }
        }
        out
    }
}

/// Xavier-normal init: std = sqrt(2 / (fan_in + fan_out)).
pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal(rng, rows, cols, std)
}

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}
