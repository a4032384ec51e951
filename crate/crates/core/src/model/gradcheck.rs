//! Finite-difference check of the full model on a random small image.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageContext, Model, ModelConfig, ModelError, TokenVocab};
use crate::graph::{BBox, Modality, RelationGraph};
use crate::numeric::{finite_difference_check, FdReport, Gradients, Tape, Tensor};
use crate::rng::{derive_seed, seeded_rng};

const QUESTION: &str = "is there pleural effusion in the left lung?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub nodes: usize,
    pub answers: usize,
    /// Edge probability of the random explicit graphs.
    pub density: f64,
    pub eps: f64,
    /// Sampled coordinates per parameter.
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                d_o: 8,
                d_q: 8,
                d: 16,
                heads: 2,
                layers: 2,
                fixed_embedding_dim: 6,
                learned_embedding_dim: 4,
                ..ModelConfig::default()
            },
            nodes: 5,
            answers: 8,
            density: 0.5,
            eps: 1e-5,
            per_param: 64,
            seed: 7,
        }
    }
}

fn random_graph(rng: &mut impl Rng, n: usize, modality: Modality, density: f64) -> RelationGraph {
    let k = modality.label_count() as u8;
    let mut labels = vec![0u8; n * n];
    let mut extra_labels = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(density) {
                labels[i * n + j] = rng.random_range(1..k);
                if modality == Modality::Semantic && rng.random_bool(0.3) {
                    extra_labels.push((i, j, 3 - labels[i * n + j]));
                }
            }
        }
    }
    RelationGraph { n, labels, modality, extra_labels }
}

/// Random image with `n` ROIs and random spatial and semantic graphs.
pub fn random_context(n: usize, d_o: usize, density: f64, seed: u64) -> Result<ImageContext, ModelError> {
    let mut rng = seeded_rng(seed);
    let features = Tensor::uniform(n, d_o, 1.0, &mut rng);
    let boxes: Vec<BBox> = (0..n)
        .map(|_| {
            let w = rng.random_range(0.05..0.5);
            let h = rng.random_range(0.05..0.5);
            BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
        })
        .collect();
    let spatial = random_graph(&mut rng, n, Modality::Spatial, density);
    let semantic = random_graph(&mut rng, n, Modality::Semantic, density);
    ImageContext::new(features, &boxes, &spatial, &semantic, 1e-6)
}

/// Compares backpropagated gradients of the BCE loss with central
/// differences for every parameter. All parameters, including the
/// zero-initialised label tables, are first jittered by `U(-0.5, 0.5)` so
/// no gradient is trivially zero.
pub fn check_model_gradients(cfg: &GradCheckConfig) -> Result<FdReport, ModelError> {
    if cfg.nodes == 0 || cfg.answers == 0 {
        return Err(ModelError::Config("gradient check needs nodes and answers"));
    }
    let answers: Vec<String> = (0..cfg.answers).map(|i| format!("a{i}")).collect();
    let mut model = Model::new(cfg.model.clone(), TokenVocab::build([QUESTION]), answers, None)?;
    let ctx = random_context(cfg.nodes, cfg.model.d_o, cfg.density, derive_seed(cfg.seed, "gradcheck.image"))?;
    let tokens = model.tokens.encode(QUESTION)?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, "gradcheck.jitter"));
    let target: Vec<f64> = (0..cfg.answers).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    for p in model.params.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    let frozen = model.clone();
    finite_difference_check(&mut model.params, cfg.eps, cfg.per_param, cfg.seed, |store| {
        let probe = Model { params: store.clone(), ..frozen.clone() };
        let mut tape = Tape::new(&probe.params);
        let fwd = probe.forward(&mut tape, &ctx, &tokens)?;
        let loss = tape.bce_with_logits(fwd.logits, &target)?;
        let mut grads = Gradients::new(&probe.params);
        tape.backward(loss, &mut grads)?;
        Ok((tape.value(loss).get(0, 0), grads))
    })
}
