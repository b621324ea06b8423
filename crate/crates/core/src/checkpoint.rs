//! Checkpoint container: one JSON header plus named tensor records.
//!
//! Layout: magic `ICAMCKP1` (8 bytes), format version (LE u32), header length
//! (LE u32), header JSON (model config, its SHA-256, and an opaque trainer
//! section), tensor count (LE u32), then per tensor a name (LE u16 length +
//! UTF-8 bytes) and a [`tensorfile`](crate::tensorfile) record. Parameters are
//! stored under their own names; optimizer moments use the `opt.m.` / `opt.v.`
//! prefixes so a resumed run continues bit-exactly.

use crate::error::{Error, Result};
use crate::nets::ModelConfig;
use crate::tensorfile;
use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ICAMCKP1";
pub const VERSION: u32 = 1;

/// Hex SHA-256 of a model configuration's canonical JSON form.
pub fn config_sha256(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    config_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainer: Option<serde_json::Value>,
}

/// A checkpoint's full in-memory content.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    /// Trainer-defined state (optimizer step counts, RNG, epoch bookkeeping);
    /// `None` for bare model exports.
    pub trainer: Option<serde_json::Value>,
    /// Named tensors in file order: model parameters and optimizer moments.
    pub tensors: IndexMap<String, ArrayD<f32>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            model_config: self.model_config.clone(),
            config_sha256: config_sha256(&self.model_config),
            trainer: self.trainer.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let hlen = u32::try_from(header_json.len())
            .map_err(|_| Error::Contract("checkpoint header too large".into()))?;
        buf.extend_from_slice(&hlen.to_le_bytes());
        buf.extend_from_slice(&header_json);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Contract("too many tensors".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nlen = u16::try_from(name.len())
                .map_err(|_| Error::Contract(format!("tensor name too long: {name}")))?;
            buf.extend_from_slice(&nlen.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&tensorfile::encode(tensor)?);
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let take = |off: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(off..off + n)
                .ok_or_else(|| Error::Format("checkpoint truncated".into()))
        };
        if take(0, 8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(take(12, 4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(16, hlen)?)?;
        if config_sha256(&header.model_config) != header.config_sha256 {
            return Err(Error::Format("checkpoint config hash mismatch".into()));
        }
        let mut off = 16 + hlen;
        let count = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
        off += 4;
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(off, 2)?.try_into().unwrap()) as usize;
            off += 2;
            let name = std::str::from_utf8(take(off, nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            off += nlen;
            let (tensor, used) = tensorfile::decode(&bytes[off..])?;
            off += used;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("duplicate tensor name {name}")));
            }
        }
        if off != bytes.len() {
            return Err(Error::Format(format!(
                "trailing bytes in checkpoint: {} unused",
                bytes.len() - off
            )));
        }
        Ok(Checkpoint { model_config: header.model_config, trainer: header.trainer, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn sample() -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("enc_attr.fc1.w".to_string(), ArrayD::from_elem(IxDyn(&[3, 1]), 0.25f32));
        tensors.insert("opt.m.enc_attr.fc1.w".to_string(), ArrayD::zeros(IxDyn(&[3, 1])));
        Checkpoint {
            model_config: ModelConfig::default(),
            trainer: Some(serde_json::json!({"epoch": 3, "phase": "classification"})),
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ckpt = sample();
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.model_config, ckpt.model_config);
        assert_eq!(back.trainer, ckpt.trainer);
        assert_eq!(back.tensors.len(), ckpt.tensors.len());
        for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(na, nb, "tensor order must be preserved");
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.iter().zip(tb.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // re-encoding the decoded checkpoint reproduces the exact bytes
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn detects_corruption() {
        let bytes = sample().encode().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad_magic), Err(Error::Format(_))));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::decode(&trailing).is_err());
        // tamper with the embedded config so the hash no longer matches
        let json_start = 16;
        let pos = bytes[json_start..].windows(4).position(|w| w == b"\"64\"".as_slice());
        assert!(pos.is_none(), "config numbers are not quoted");
        let mut tampered = bytes.clone();
        let needle = b"\"image_height\":64";
        let at = tampered.windows(needle.len()).position(|w| w == needle).unwrap();
        tampered[at + needle.len() - 2] = b'3';
        tampered[at + needle.len() - 1] = b'2';
        assert!(matches!(Checkpoint::decode(&tampered), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.encode().unwrap(), ckpt.encode().unwrap());
    }
}
