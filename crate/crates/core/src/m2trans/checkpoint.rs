//! Binary checkpoint container.
//!
//! Layout: magic `FHCK`, `u32` format version, `u64` header length, JSON
//! header (model config plus tensor names and shapes), the tensor values as
//! little-endian `f64` in header order, and a trailing SHA-256 digest of
//! everything before it. All integers are little-endian.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelParams};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FHCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn encode(params: &ModelParams, version: u32) -> Result<Vec<u8>> {
    let header = Header {
        config: params.config().clone(),
        tensors: params
            .tensors()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.num_parameters() * 8 + DIGEST_LEN);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&version.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in params.tensors().values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Writes `params` to `path` via a temporary file and rename.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    write_bytes(&encode(params, CHECKPOINT_VERSION)?, path)
}

fn write_bytes(bytes: &[u8], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if params.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {:?} differs from run config {:?}",
            params.config(),
            expected
        )));
    }
    Ok(params)
}

fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let corrupt = || Error::Checksum(path.to_path_buf());
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(corrupt());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt());
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(corrupt)?;
    let header: Header = serde_json::from_slice(&body[16..header_end])?;
    let mut data = &body[header_end..];
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 8 {
            return Err(corrupt());
        }
        let (chunk, rest) = data.split_at(n * 8);
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(entry.name, Tensor::new(entry.shape, values)?);
        data = rest;
    }
    if !data.is_empty() {
        return Err(corrupt());
    }
    ModelParams::from_tensors(header.config, tensors)
}

#[cfg(test)]
pub(crate) fn save_with_version(params: &ModelParams, path: &Path, version: u32) -> Result<()> {
    write_bytes(&encode(params, version)?, path)
}
