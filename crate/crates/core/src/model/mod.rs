//! Relation-aware graph attention over three ROI graphs.
//!
//! A question is embedded (fixed plus learned token tables), run through a
//! GRU and appended to every ROI feature. Each graph (implicit, spatial,
//! semantic) refines the node features with its own stack of attention
//! layers and answer head; the three answer logits are fused affinely and
//! trained with per-class binary cross-entropy.

mod checkpoint;
mod context;
mod gradcheck;
mod net;
mod train;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalError;
use crate::graph::GraphError;
use crate::numeric::TensorError;
use crate::text::tokenize_question;

pub use checkpoint::{CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT_VERSION};
pub use context::{ExplicitContext, ImageContext, DIR_BACKWARD, DIR_FORWARD, DIR_SELF};
pub use gradcheck::{check_model_gradients, random_context, GradCheckConfig};
pub use net::{Model, Prediction};
pub use train::{
    build_samples, fit_batch, score_samples, train, EpochRecord, Sample, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("question has no tokens")]
    EmptyQuestion,
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("ROI features are {got} wide, the model expects {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("graph has {graph} nodes but the image has {rois} ROIs")]
    GraphSize { graph: usize, rois: usize },
    #[error("no ROI fixture for study {0:?}")]
    MissingFixture(String),
    #[error("answer {0:?} is not in the vocabulary")]
    UnknownAnswer(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// How the three answer vectors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    /// `(1 - α - β)·a_imp + α·a_spa + β·a_sem`.
    Fixed { alpha: f64, beta: f64 },
    /// Coefficients are a softmax over three learned logits.
    Learned,
}

impl Fusion {
    /// `[imp, spa, sem]` weights for the fixed form.
    pub fn coefficients(self) -> Option<[f64; 3]> {
        match self {
            Fusion::Fixed { alpha, beta } => Some([1.0 - alpha - beta, alpha, beta]),
            Fusion::Learned => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// ROI feature width.
    pub d_o: usize,
    /// Question vector width (GRU output).
    pub d_q: usize,
    /// Node width inside the graph layers and answer heads.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub fixed_embedding_dim: usize,
    pub learned_embedding_dim: usize,
    pub bidirectional_gru: bool,
    /// One attention scorer per layer shared by all heads.
    pub shared_head_attention: bool,
    pub leaky_slope: f64,
    pub fusion: Fusion,
    pub geometry_eps: f64,
    pub spatial_threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_o: 1024,
            d_q: 1024,
            d: 1024,
            heads: 16,
            layers: 2,
            fixed_embedding_dim: 300,
            learned_embedding_dim: 300,
            bidirectional_gru: false,
            shared_head_attention: false,
            leaky_slope: 0.2,
            fusion: Fusion::Fixed { alpha: 1.0 / 3.0, beta: 1.0 / 3.0 },
            geometry_eps: crate::graph::DEFAULT_GEOMETRY_EPS,
            spatial_threshold: crate::graph::DEFAULT_SPATIAL_THRESHOLD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale widths: `d = d_q = d_o = 64`, four heads.
    pub fn desk() -> Self {
        ModelConfig { d_o: 64, d_q: 64, d: 64, heads: 4, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_o == 0 || self.d_q == 0 || self.d == 0 {
            return Err(ModelError::Config("widths must be positive"));
        }
        if self.heads == 0 || self.layers == 0 {
            return Err(ModelError::Config("heads and layers must be positive"));
        }
        if self.fixed_embedding_dim + self.learned_embedding_dim == 0 {
            return Err(ModelError::Config("token embedding is empty"));
        }
        if self.bidirectional_gru && self.d_q % 2 != 0 {
            return Err(ModelError::Config("bidirectional GRU needs an even d_q"));
        }
        if let Fusion::Fixed { alpha, beta } = self.fusion {
            if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta <= 1.0) {
                return Err(ModelError::Config("fusion needs α, β ≥ 0 and α + β ≤ 1"));
            }
        }
        if !(self.geometry_eps > 0.0) {
            return Err(ModelError::Config("geometry_eps must be positive"));
        }
        Ok(())
    }
}

pub const UNK_TOKEN: &str = "<unk>";

/// Question tokens; index 0 is the shared unknown-word row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenVocab {
    /// All tokens of `questions`, sorted, after [`UNK_TOKEN`].
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen: alloc::collections::BTreeSet<String> = alloc::collections::BTreeSet::new();
        for q in questions {
            seen.extend(tokenize_question(q));
        }
        seen.remove(UNK_TOKEN);
        let mut tokens = alloc::vec![UNK_TOKEN.to_string()];
        tokens.extend(seen);
        TokenVocab::from_tokens(tokens).expect("built with the unknown token first")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(ModelError::Config("token vocabulary must start with <unk>"));
        }
        let index: BTreeMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(ModelError::Config("duplicate token"));
        }
        Ok(TokenVocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, question: &str) -> Result<Vec<usize>, ModelError> {
        let ids: Vec<usize> = tokenize_question(question).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        Ok(ids)
    }
}
