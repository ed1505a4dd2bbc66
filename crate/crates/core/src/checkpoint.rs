//! Parameter checkpoints: `manifest.json` (model description plus name,
//! shape and byte offset of every tensor) next to `params.bin`, a flat
//! little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    format_version: u32,
    model: M,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    crc32: u32,
}

pub fn save<T: Real, M: Serialize>(dir: &Path, model: &M, params: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(params.numel() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model,
        tensors,
        payload_bytes: bytes.len(),
        crc32: crc32fast::hash(&bytes),
    };
    let mpath = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    let ppath = dir.join(PAYLOAD);
    fs::write(&ppath, &bytes).map_err(|e| Error::io(&ppath, e))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn load<T: Real, M: DeserializeOwned>(dir: &Path) -> Result<(M, ParamSet<T>)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(Error::corrupt(&mpath, "missing format_version")),
    }
    let manifest: Manifest<M> = serde_json::from_value(raw).map_err(|e| Error::json(&mpath, e))?;
    let ppath = dir.join(PAYLOAD);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    if bytes.len() != manifest.payload_bytes {
        return Err(Error::corrupt(
            &ppath,
            format!("{} bytes, manifest says {}", bytes.len(), manifest.payload_bytes),
        ));
    }
    let computed = crc32fast::hash(&bytes);
    if computed != manifest.crc32 {
        return Err(Error::Checksum {
            path: ppath,
            stored: manifest.crc32,
            computed,
        });
    }
    let mut params = ParamSet::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if e.offset % 8 != 0 || end > bytes.len() {
            return Err(Error::corrupt(&mpath, format!("tensor `{}` lies outside the payload", e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::corrupt(&ppath, format!("tensor `{}`: {err}", e.name)))?;
        params
            .insert(e.name.clone(), t)
            .map_err(|err| Error::corrupt(&mpath, err.to_string()))?;
    }
    Ok((manifest.model, params))
}
