//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DISSCKPT" | u32 version | u64 header_len | header (JSON, UTF-8) | payload
//! ```
//!
//! The payload is the concatenation of every tensor as packed `f32` values in
//! the order listed by the header. The header records the payload SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DissError, Result};
use crate::nn::{ParamStore, Tensor, UNet, UNetConfig};
use crate::scalar::Scalar;
use crate::schedule::ScheduleConfig;

pub const MAGIC: &[u8; 8] = b"DISSCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Offset into the payload, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
    /// Training stage that produced the parameters (0 = untrained).
    pub stage: u8,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

/// Metadata plus named f32 parameter blobs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

fn payload_bytes(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.num_scalars() * 4);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

impl Checkpoint {
    pub fn from_unet<T: Scalar>(net: &UNet<T>, schedule: ScheduleConfig, stage: u8, step: u64) -> Self {
        let params: ParamStore<f32> = net.params().cast();
        let mut offset = 0;
        let tensors = params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let digest = hex::encode(Sha256::digest(payload_bytes(&params)));
        Checkpoint {
            meta: CheckpointMeta {
                unet: net.config().clone(),
                schedule,
                stage,
                step,
                tensors,
                payload_sha256: digest,
            },
            params,
        }
    }

    /// Builds the network in the requested precision.
    pub fn to_unet<T: Scalar>(&self) -> Result<UNet<T>> {
        UNet::from_params(self.meta.unet.clone(), self.params.cast())
    }

    /// Like [`Checkpoint::to_unet`] but insists on a specific configuration.
    pub fn to_unet_checked<T: Scalar>(&self, expected: &UNetConfig) -> Result<UNet<T>> {
        if &self.meta.unet != expected {
            return Err(DissError::ConfigMismatch(format!(
                "checkpoint config {:?} differs from requested {:?}",
                self.meta.unet, expected
            )));
        }
        self.to_unet()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec_pretty(&self.meta)?;
        let payload = payload_bytes(&self.params);
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(DissError::CorruptCheckpoint("file shorter than fixed header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(DissError::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(DissError::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| DissError::CorruptCheckpoint("truncated header".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| DissError::CorruptCheckpoint(format!("unreadable header: {e}")))?;
        let payload = &bytes[header_end..];
        let total: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(DissError::CorruptCheckpoint(format!(
                "payload has {} bytes, header describes {}",
                payload.len(),
                total * 4
            )));
        }
        if hex::encode(Sha256::digest(payload)) != meta.payload_sha256 {
            return Err(DissError::CorruptCheckpoint("payload checksum mismatch".into()));
        }
        let mut params = ParamStore::new();
        for entry in &meta.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let blob = payload
                .get(start..start + n * 4)
                .ok_or_else(|| DissError::MissingTensor(entry.name.clone()))?;
            let data = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.add(entry.name.clone(), Tensor::from_vec(entry.shape, data));
        }
        // every tensor the layout needs must be present
        let fresh = UNet::<f32>::new(meta.unet.clone(), 0)?;
        for (name, _) in fresh.params().iter() {
            if params.find(name).is_none() {
                return Err(DissError::MissingTensor(name.to_string()));
            }
        }
        Ok(Checkpoint { meta, params })
    }

    /// Atomic save; an interrupted write never leaves a partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn payload_sha256(&self) -> &str {
        &self.meta.payload_sha256
    }
}

/// Conventional location `checkpoints/<run>/<step>.ckpt` under `root`.
pub fn checkpoint_path(root: impl AsRef<Path>, run: &str, step: u64) -> std::path::PathBuf {
    root.as_ref().join("checkpoints").join(run).join(format!("{step}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(size: usize) -> UNetConfig {
        UNetConfig {
            image_size: size,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            res_blocks_per_level: 1,
            attention_resolutions: vec![],
            attention_head_channels: 4,
            time_embedding_dim: 8,
        }
    }

    fn sample() -> Checkpoint {
        let net = UNet::<f32>::new(cfg(8), 5).unwrap();
        Checkpoint::from_unet(&net, ScheduleConfig::scaled_linear(20), 1, 42)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/1.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(payload_bytes(&back.params), payload_bytes(&ck.params));
        assert_eq!(fs::read(&path).unwrap(), back.to_bytes().unwrap());
        let net: UNet<f32> = back.to_unet().unwrap();
        assert_eq!(net.params().tensors(), ck.params.tensors());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [5, 19, 40, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, DissError::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_payload_byte_is_corrupt() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DissError::CorruptCheckpoint(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DissError::CorruptCheckpoint(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(DissError::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn config_mismatch_is_reported() {
        let ck = sample();
        assert!(matches!(
            ck.to_unet_checked::<f32>(&cfg(16)),
            Err(DissError::ConfigMismatch(_))
        ));
        assert!(ck.to_unet_checked::<f32>(&cfg(8)).is_ok());
    }

    #[test]
    fn missing_tensor_is_reported() {
        let mut ck = sample();
        // drop the last tensor from both header and payload
        let last = ck.meta.tensors.pop().unwrap();
        let mut params = ParamStore::new();
        for (name, t) in ck.params.iter() {
            if name != last.name {
                params.add(name, t.clone());
            }
        }
        ck.params = params;
        ck.meta.payload_sha256 = hex::encode(Sha256::digest(payload_bytes(&ck.params)));
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(DissError::MissingTensor(_))));
    }

    #[test]
    fn path_layout() {
        assert_eq!(
            checkpoint_path("/x", "run1", 200),
            Path::new("/x/checkpoints/run1/200.ckpt")
        );
    }
}
