//! Single-file model container: magic, version, JSON manifest, raw f64 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, TRepModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TREPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub time_scale: f64,
    /// Free-form echo of the configuration that produced the model.
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_sha256: String,
}

pub fn to_bytes(model: &TRepModel, config: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(model.params.numel() * 8);
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset, len: t.len() });
        offset += t.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: model.arch,
        time_scale: model.time_scale,
        config,
        tensors,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TRepModel, Manifest)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if mlen > body.len() {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let blob = &body[mlen..];
    if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
        return Err(bad("parameter blob checksum mismatch"));
    }
    if blob.len() % 8 != 0 {
        return Err(bad("parameter blob is not a whole number of f64 values"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.len).filter(|&x| x <= values.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("tensor '{}' outside blob", e.name)))?;
        let t = Tensor::new(e.shape.clone(), values[e.offset..end].to_vec())
            .map_err(|err| Error::Checkpoint(format!("tensor '{}': {err}", e.name)))?;
        params.insert(e.name.clone(), t)?;
    }
    manifest
        .architecture
        .validate()
        .map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    let model = TRepModel { arch: manifest.architecture, params, time_scale: manifest.time_scale };
    check_layout(&model)?;
    Ok((model, manifest))
}

/// Parameter names and shapes must match a fresh model of the same architecture.
fn check_layout(model: &TRepModel) -> Result<()> {
    use rand::SeedableRng;
    let fresh = TRepModel::init(model.arch, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let a: Vec<_> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let b: Vec<_> = model.params.iter().map(|(n, t)| (n, t.shape())).collect();
    if a != b {
        return Err(Error::Checkpoint("parameter layout does not match architecture".into()));
    }
    Ok(())
}

pub fn save(model: &TRepModel, config: serde_json::Value, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, config)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TRepModel, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::time_embedding::{TeKind, TimeEmbeddingConfig};
    use rand::SeedableRng;

    fn tiny() -> TRepModel {
        let mut enc = EncoderConfig::new(2);
        (enc.repr_dims, enc.hidden_dims, enc.depth) = (4, 5, 2);
        let arch = Architecture {
            encoder: enc,
            time_embedding: TimeEmbeddingConfig { kind: TeKind::Mlp, dim: 3, hidden: 4 },
        };
        TRepModel::init(arch, 16.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = tiny();
        let bytes = to_bytes(&m, serde_json::json!({"seed": 5})).unwrap();
        let (back, man) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(man.config["seed"], 5);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = to_bytes(&tiny(), serde_json::Value::Null).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"garbage"), Err(Error::Checkpoint(_))));
    }
}
