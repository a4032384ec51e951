//! Checkpoints: a JSON-able manifest plus a blob of little-endian `f32`s
//! laid out in manifest order.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Model, ModelConfig, ModelError, TokenVocab, TrainConfig};
use crate::numeric::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Name of the frozen token table inside a checkpoint.
const FIXED_EMBEDDING: &str = "embed.fixed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    #[serde(default)]
    pub best_epoch: Option<u32>,
}

impl Model {
    /// Manifest (without training metadata) and the value blob.
    pub fn to_checkpoint(&self) -> (CheckpointManifest, Vec<u8>) {
        let mut tensors = Vec::with_capacity(self.params.len() + 1);
        let mut blob = Vec::with_capacity(4 * (self.params.numel() + self.fixed_embeddings.len()));
        let mut push = |name: &str, t: &Tensor, trainable: bool| {
            tensors.push(TensorEntry { name: name.to_string(), shape: [t.rows(), t.cols()], trainable });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        push(FIXED_EMBEDDING, &self.fixed_embeddings, false);
        for (_, p) in self.params.iter() {
            push(&p.name, &p.value, true);
        }
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            tokens: self.tokens.tokens().to_vec(),
            answers: self.answers.clone(),
            tensors,
            train: None,
            history: Vec::new(),
            best_epoch: None,
        };
        (manifest, blob)
    }

    /// Rebuilds a model; the blob must cover exactly the listed tensors.
    pub fn from_checkpoint(manifest: &CheckpointManifest, blob: &[u8]) -> Result<Model, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let total: usize = manifest.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
        if blob.len() != 4 * total {
            return Err(bad("blob size does not match the manifest"));
        }
        let mut floats = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut fixed = None;
        let mut values = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let data: Vec<f64> = floats.by_ref().take(e.shape[0] * e.shape[1]).collect();
            let t = Tensor::new(e.shape[0], e.shape[1], data)?;
            if e.name == FIXED_EMBEDDING {
                fixed = Some(t);
            } else {
                values.push((e.name.clone(), t));
            }
        }
        let fixed = fixed.ok_or_else(|| bad("missing fixed embedding table"))?;
        let tokens = TokenVocab::from_tokens(manifest.tokens.clone())?;
        let mut model = Model::new(manifest.config.clone(), tokens, manifest.answers.clone(), Some(fixed))?;
        model.params.load_values(values)?;
        Ok(model)
    }
}
