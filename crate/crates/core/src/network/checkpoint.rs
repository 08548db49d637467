//! Checkpoint file layout:
//!
//! ```text
//! "ACPP" | u16 LE version | u32 LE header length | header (UTF-8 JSON) | f32 LE payload
//! ```
//!
//! The header carries the model config, the creation seed and the ordered
//! `(name, shape)` manifest; the payload holds every tensor in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACPP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
    manifest: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(params: &ModelParameters, config: &ModelConfig, path: &Path) -> Result<()> {
    // Re-validate so a file never pairs a config with foreign tensors.
    let params = ModelParameters::from_tensors(
        config,
        params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        params.seed(),
    )?;
    let header = Header {
        config: config.clone(),
        seed: params.seed(),
        manifest: params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encoding: {e}")))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Checkpoint("header too large".into()))?;

    let mut bytes = Vec::with_capacity(10 + header.len() + 4 * params.scalar_count());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParameters, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes"));
    let header: Header = serde_json::from_slice(r.take(header_len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    header.config.validate()?;

    let mut tensors = BTreeMap::new();
    for entry in &header.manifest {
        let len: usize = entry.shape.iter().product();
        let raw = r.take(4 * len, &format!("tensor {}", entry.name))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors
            .insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?)
            .is_some()
        {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", entry.name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let params = ModelParameters::from_tensors(&header.config, tensors, header.seed)
        .map_err(|e| Error::Checkpoint(format!("manifest does not match config: {e}")))?;
    Ok((params, header.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_model;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig::desk();
        let p = init_model(&cfg, 11).unwrap();
        save_checkpoint(&p, &cfg, &path).unwrap();
        let (q, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(q.seed(), 11);
        for ((na, a), (nb, b)) in p.iter().zip(q.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn format_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            num_blocks: 1,
            feature_channels: 4,
            ca_reduction: 2,
            ..ModelConfig::default()
        };
        save_checkpoint(&init_model(&cfg, 1).unwrap(), &cfg, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut bad = good.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("version"));

        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("truncated"));

        let mut bad = good.clone();
        bad.push(0);
        fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("trailing"));
    }
}
