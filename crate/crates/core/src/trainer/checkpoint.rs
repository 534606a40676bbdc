//! Checkpoint file: magic `NNMILCK1`, u64 LE metadata length, JSON metadata,
//! then f32 LE tensor payloads at the byte offsets listed in the metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::aggregator::{AggregatorParams, TENSOR_NAMES};
use crate::config::{RunConfig, TrainingMode};
use crate::error::{ensure, Error, Result};
use crate::inference::{chunk_windows, BaselineSurvival, ChunkWindows};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NNMILCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: AggregatorParams<f32>,
    pub optimizer: OptimizerState<f32>,
    pub epoch: usize,
    /// Breslow baseline fitted on the training split (survival only).
    pub baseline: Option<BaselineSurvival>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: RunConfig,
    tensors: BTreeMap<String, TensorEntry>,
    optimizer_step: u64,
    epoch: usize,
    #[serde(default)]
    baseline: Option<BaselineSurvival>,
}

impl Checkpoint {
    /// Inference windows: the sliding windows in nnmil mode, the single full
    /// window for models trained on all features.
    pub fn windows(&self) -> Result<ChunkWindows> {
        windows_for(&self.config)
    }

    fn named_tensors(&self) -> Vec<(String, &[f32], Vec<usize>)> {
        let mut out = Vec::with_capacity(15);
        for (prefix, p) in [("", &self.params), ("adam_m.", &self.optimizer.m), ("adam_v.", &self.optimizer.v)] {
            for ((name, t), shape) in TENSOR_NAMES.iter().zip(p.tensors()).zip(p.shapes()) {
                out.push((format!("{prefix}{name}"), t, shape));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, data, shape) in self.named_tensors() {
            tensors.insert(
                name,
                TensorEntry {
                    shape,
                    offset: payload.len() as u64,
                },
            );
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = Metadata {
            config: self.config.clone(),
            tensors,
            optimizer_step: self.optimizer.step,
            epoch: self.epoch,
            baseline: self.baseline.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(
            bytes.len() >= 8 && &bytes[..8] == CHECKPOINT_MAGIC,
            Format,
            "not a checkpoint (bad magic)"
        );
        ensure!(bytes.len() >= 16, Corruption, "checkpoint truncated in header");
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        ensure!(
            bytes.len() - 16 >= json_len,
            Corruption,
            "checkpoint truncated in metadata ({} of {json_len} bytes)",
            bytes.len() - 16
        );
        let meta: Metadata = serde_json::from_slice(&bytes[16..16 + json_len])
            .map_err(|e| Error::Corruption(format!("checkpoint metadata: {e}")))?;
        meta.config.validate()?;
        let payload = &bytes[16 + json_len..];
        let c = &meta.config;
        let expected = AggregatorParams::<f32>::zeros(c.embed_dim, c.hidden_dim, c.out_dim).shapes();

        let mut total = 0usize;
        let mut read = |prefix: &str| -> Result<AggregatorParams<f32>> {
            let mut p = AggregatorParams::<f32>::zeros(c.embed_dim, c.hidden_dim, c.out_dim);
            for ((name, dst), shape) in TENSOR_NAMES.iter().zip(p.tensors_mut()).zip(&expected) {
                let key = format!("{prefix}{name}");
                let entry = meta
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Corruption(format!("checkpoint lacks tensor {key}")))?;
                ensure!(
                    &entry.shape == shape,
                    Shape,
                    "tensor {key} has shape {:?}, config implies {shape:?}",
                    entry.shape
                );
                let start = entry.offset as usize;
                let end = start + 4 * dst.len();
                ensure!(end <= payload.len(), Corruption, "tensor {key} runs past the end of the file");
                for (v, chunk) in dst.iter_mut().zip(payload[start..end].chunks_exact(4)) {
                    *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                total += end - start;
            }
            Ok(p)
        };
        let params = read("")?;
        let m = read("adam_m.")?;
        let v = read("adam_v.")?;
        ensure!(
            total == payload.len() && meta.tensors.len() == 15,
            Corruption,
            "checkpoint payload is {} bytes, tensors cover {total}",
            payload.len()
        );
        Ok(Checkpoint {
            config: meta.config,
            params,
            optimizer: OptimizerState {
                m,
                v,
                step: meta.optimizer_step,
            },
            epoch: meta.epoch,
            baseline: meta.baseline,
        })
    }
}

pub fn windows_for(config: &RunConfig) -> Result<ChunkWindows> {
    match config.training_mode {
        TrainingMode::Nnmil => chunk_windows(config.embed_dim, config.hidden_dim, config.stride),
        TrainingMode::FullBagBatch1 => Ok(ChunkWindows::full(config.embed_dim)),
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::init_params;
    use crate::trainer::schedule::tests::config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample_checkpoint() -> Checkpoint {
        let cfg = config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(cfg.embed_dim, cfg.hidden_dim, cfg.out_dim, &mut rng).unwrap();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.m = init_params(cfg.embed_dim, cfg.hidden_dim, cfg.out_dim, &mut rng).unwrap();
        optimizer.step = 17;
        Checkpoint {
            config: cfg,
            params,
            optimizer,
            epoch: 3,
            baseline: None,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    }

    #[test]
    fn damaged_files() {
        let bytes = sample_checkpoint().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::Corruption(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut longer = bytes;
        longer.extend_from_slice(&[0; 4]);
        assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Corruption(_))));
    }
}
