//! Binary checkpoints.
//!
//! Layout: the magic `FMT1`, one version byte, the manifest length as a
//! little-endian `u64`, a JSON manifest, then every tensor as raw
//! little-endian `f64` values at the offsets the manifest lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::model::{FmtConfig, FmtModel};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMT1";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8;
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data block.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: FmtConfig,
    pub tensors: Vec<TensorEntry>,
    pub adam: Option<AdamMeta>,
}

/// Serializes the parameters and, if given, the optimizer state.
pub fn encode<T: Scalar>(model: &FmtModel<T>, adam: Option<&AdamState<T>>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor<T>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
    };
    for (_, name, t) in model.store.iter() {
        push(name.to_string(), t);
    }
    let meta = adam.map(|a| {
        for (name, m) in model.store.names().iter().zip(&a.first_moment) {
            push(format!("{FIRST_MOMENT}{name}"), m);
        }
        for (name, v) in model.store.names().iter().zip(&a.second_moment) {
            push(format!("{SECOND_MOMENT}{name}"), v);
        }
        AdamMeta {
            step_count: a.step_count,
            lr: a.lr.to_f64_lossless(),
            beta1: a.beta1.to_f64_lossless(),
            beta2: a.beta2.to_f64_lossless(),
            eps: a.eps.to_f64_lossless(),
        }
    });
    let manifest = Manifest {
        config: model.config.clone(),
        tensors: entries,
        adam: meta,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| FmtError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &FmtModel<T>, adam: Option<&AdamState<T>>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model, adam)?)?;
    Ok(())
}

/// A fully parsed checkpoint; nothing here refers to a live model.
#[derive(Debug, Clone)]
pub struct Decoded<T: Scalar = f64> {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Decoded<T> {
    fn find(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Decoded<T>> {
    let fmt = |m: &str| FmtError::Format(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(fmt("file shorter than the header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(FmtError::Format(format!("unsupported version {}", bytes[4])));
    }
    let len = u64::from_le_bytes(bytes[5..HEADER_LEN].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(fmt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| FmtError::Format(e.to_string()))?;
    let data = &body[len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_end = 0usize;
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = count
            .checked_mul(8)
            .and_then(|b| b.checked_add(start))
            .ok_or_else(|| fmt("tensor extent overflows"))?;
        if end > data.len() {
            return Err(FmtError::Format(format!("truncated data for tensor {}", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), values)?));
        expected_end = expected_end.max(end);
    }
    if data.len() != expected_end {
        return Err(fmt("trailing bytes after tensor data"));
    }
    Ok(Decoded { manifest, tensors })
}

/// Checks every model parameter against the checkpoint, in store order.
fn check_compatible<T: Scalar>(model: &FmtModel<T>, decoded: &Decoded<T>) -> Result<()> {
    for (_, name, t) in model.store.iter() {
        match decoded.find(name) {
            None => {
                return Err(FmtError::Compatibility {
                    name: name.to_string(),
                    msg: "missing from checkpoint".into(),
                })
            }
            Some(c) if c.shape() != t.shape() => {
                return Err(FmtError::Compatibility {
                    name: name.to_string(),
                    msg: format!("checkpoint shape {:?}, model shape {:?}", c.shape(), t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn adam_from<T: Scalar>(model: &FmtModel<T>, decoded: &Decoded<T>) -> Result<Option<AdamState<T>>> {
    let Some(meta) = &decoded.manifest.adam else {
        return Ok(None);
    };
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (prefix, out) in [(FIRST_MOMENT, &mut first), (SECOND_MOMENT, &mut second)] {
        for (_, name, t) in model.store.iter() {
            let key = format!("{prefix}{name}");
            match decoded.find(&key) {
                Some(m) if m.shape() == t.shape() => out.push(m.clone()),
                _ => {
                    return Err(FmtError::Compatibility {
                        name: key,
                        msg: "optimizer moment missing or misshapen".into(),
                    })
                }
            }
        }
    }
    Ok(Some(AdamState {
        step_count: meta.step_count,
        first_moment: first,
        second_moment: second,
        lr: T::lit(meta.lr),
        beta1: T::lit(meta.beta1),
        beta2: T::lit(meta.beta2),
        eps: T::lit(meta.eps),
    }))
}

/// Overwrites `model`'s parameters from `path`. On any error the model is
/// left untouched.
pub fn load_into<T: Scalar>(model: &mut FmtModel<T>, path: impl AsRef<Path>) -> Result<Option<AdamState<T>>> {
    let decoded = decode::<T>(&fs::read(path)?)?;
    check_compatible(model, &decoded)?;
    let adam = adam_from(model, &decoded)?;
    let ids: Vec<_> = model.store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (id, name) in ids {
        let t = decoded.find(&name).expect("checked above").clone();
        model.store.set(id, t)?;
    }
    Ok(adam)
}

/// Rebuilds a model from the configuration stored in the checkpoint.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(FmtModel<T>, Option<AdamState<T>>)> {
    let decoded = decode::<T>(&fs::read(path)?)?;
    let mut model = FmtModel::new(decoded.manifest.config.clone())?;
    check_compatible(&model, &decoded)?;
    let adam = adam_from(&model, &decoded)?;
    for (id, t) in model.store.iter().map(|(id, name, _)| (id, decoded.find(name).expect("checked").clone())).collect::<Vec<_>>() {
        model.store.set(id, t)?;
    }
    Ok((model, adam))
}
