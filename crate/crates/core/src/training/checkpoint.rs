//! Checkpoint archive: parameters, optimizer moments, iteration counter,
//! configuration snapshot and best validation SSIM.
//!
//! Layout (little endian): magic `RVNCKPT\0`, `u32` version, `u32` header length,
//! JSON header, `u32` entry count, then per entry `u32` key length, key bytes,
//! `u8` dtype tag, `u8` ndim, `u64` dims and the raw values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_reals, read_file, write_file, Reader};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::training::adam::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RVNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub config: Config,
    /// Number of completed training iterations.
    pub iteration: u64,
    pub best_val_ssim: Option<f64>,
    pub params: ParamStore<T>,
    pub optimizer: Option<Adam<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    iteration: u64,
    best_val_ssim: Option<f64>,
    adam_step: Option<u64>,
}

fn put_entries<T: Real>(out: &mut Vec<u8>, prefix: &str, store: &ParamStore<T>) {
    for (name, t) in store.iter() {
        let key = format!("{prefix}{name}");
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.push(T::DTYPE);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_reals(out, t.data());
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            best_val_ssim: self.best_val_ssim,
            adam_step: self.optimizer.as_ref().map(|a| a.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let n = self.params.len() * if self.optimizer.is_some() { 3 } else { 1 };
        out.extend_from_slice(&(n as u32).to_le_bytes());
        put_entries(&mut out, "", &self.params);
        if let Some(adam) = &self.optimizer {
            put_entries(&mut out, "adam.m.", &adam.m);
            put_entries(&mut out, "adam.v.", &adam.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let n = r.u32()?;
        let (mut params, mut m, mut v) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
        for _ in 0..n {
            let klen = r.u32()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec())
                .map_err(|_| Error::format(path, "entry key is not UTF-8"))?;
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let len = dims.iter().product();
            let t = Tensor::new(dims, r.reals(dtype, len)?);
            if let Some(name) = key.strip_prefix("adam.m.") {
                m.insert(name, t);
            } else if let Some(name) = key.strip_prefix("adam.v.") {
                v.insert(name, t);
            } else {
                params.insert(key, t);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(path, format!("{} trailing bytes", r.remaining())));
        }
        let optimizer = match header.adam_step {
            Some(step) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::format(path, "optimizer moments do not cover all parameters"));
                }
                let t = &header.config.train;
                Some(Adam {
                    beta1: t.adam_beta1,
                    beta2: t.adam_beta2,
                    eps: t.adam_eps,
                    step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            best_val_ssim: header.best_val_ssim,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
