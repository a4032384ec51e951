//! Batched training with Adam, the learning-rate schedule and best-val selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::context::ImageContext;
use super::{Model, ModelError};
use crate::eval::{auc_macro, auc_micro};
use crate::numeric::{adam_step, AdamConfig, AdamState, Gradients, LrSchedule, Tape, Tensor};
use crate::qa::{AnswerVocabulary, QAPair, QuestionType};
use crate::rng::{derive_seed, seeded_rng};

/// Samples per sequential gradient chunk. Chunks are merged in order, so
/// results do not depend on the thread count.
const CHUNK: usize = 8;

/// One encoded question about one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index into the image-context table.
    pub context: usize,
    pub tokens: Vec<usize>,
    /// Answer-vocabulary indices of the correct answers.
    pub answers: Vec<usize>,
    pub qtype: QuestionType,
}

impl Sample {
    pub fn target(&self, classes: usize) -> Vec<f64> {
        let mut t = vec![0.0; classes];
        for &a in &self.answers {
            t[a] = 1.0;
        }
        t
    }

    pub fn label_row(&self, classes: usize) -> Vec<bool> {
        let mut t = vec![false; classes];
        for &a in &self.answers {
            t[a] = true;
        }
        t
    }
}

/// Encodes QA pairs against the model's token and answer vocabularies.
/// `contexts` maps study ids to rows of the image-context table.
pub fn build_samples(
    model: &Model,
    pairs: &[QAPair],
    contexts: &BTreeMap<String, usize>,
) -> Result<Vec<Sample>, ModelError> {
    let answers = AnswerVocabulary::from_labels(model.answers.clone(), vec![0; model.answers.len()]);
    pairs
        .iter()
        .map(|p| {
            let context = *contexts.get(&p.study_id).ok_or_else(|| ModelError::MissingFixture(p.study_id.clone()))?;
            let mut ids = Vec::with_capacity(p.answers.len());
            for a in &p.answers {
                ids.push(answers.index_of(a).ok_or_else(|| ModelError::UnknownAnswer(a.clone()))?);
            }
            Ok(Sample { context, tokens: model.tokens.encode(&p.question)?, answers: ids, qtype: p.qtype })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Shuffle seed.
    pub seed: u64,
    /// Per-sample gradients on the rayon pool (when built with `parallel`).
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc_micro: Option<f64>,
    pub val_auc_macro: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: u32,
}

fn sample_loss(model: &Model, ctx: &ImageContext, s: &Sample, grads: &mut Gradients) -> Result<f64, ModelError> {
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward(&mut tape, ctx, &s.tokens)?;
    let loss = tape.bce_with_logits(fwd.logits, &s.target(model.answers.len()))?;
    tape.backward(loss, grads)?;
    Ok(tape.value(loss).get(0, 0))
}

fn chunk_loss(model: &Model, contexts: &[ImageContext], chunk: &[&Sample]) -> Result<(f64, Gradients), ModelError> {
    let mut grads = Gradients::new(&model.params);
    let mut total = 0.0;
    for s in chunk {
        let ctx = contexts.get(s.context).ok_or(ModelError::Config("sample context out of range"))?;
        total += sample_loss(model, ctx, s, &mut grads)?;
    }
    Ok((total, grads))
}

/// Summed loss and gradients over `batch`.
pub(crate) fn batch_gradients(
    model: &Model,
    contexts: &[ImageContext],
    batch: &[&Sample],
    parallel: bool,
) -> Result<(f64, Gradients), ModelError> {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    let parts: Vec<Result<(f64, Gradients), ModelError>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            if parallel && chunks.len() > 1 {
                chunks.par_iter().map(|c| chunk_loss(model, contexts, c)).collect()
            } else {
                chunks.iter().map(|c| chunk_loss(model, contexts, c)).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = parallel;
            chunks.iter().map(|c| chunk_loss(model, contexts, c)).collect()
        }
    };
    let mut total = 0.0;
    let mut grads = Gradients::new(&model.params);
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.merge(&g);
    }
    Ok((total, grads))
}

/// One Adam step on the batch-mean loss. Returns that mean loss.
pub fn fit_batch(
    model: &mut Model,
    contexts: &[ImageContext],
    batch: &[&Sample],
    state: &mut AdamState,
    lr: f64,
    parallel: bool,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptySplit("batch"));
    }
    let (total, grads) = batch_gradients(model, contexts, batch, parallel)?;
    let scale = 1.0 / batch.len() as f64;
    model.params.zero_grad();
    model.params.accumulate(&grads, scale);
    adam_step(&mut model.params, state, lr);
    Ok(total * scale)
}

fn score_one(model: &Model, contexts: &[ImageContext], s: &Sample) -> Result<Vec<f64>, ModelError> {
    let ctx = contexts.get(s.context).ok_or(ModelError::Config("sample context out of range"))?;
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward(&mut tape, ctx, &s.tokens)?;
    Ok(tape.value(fwd.logits).data().iter().map(|&x| crate::math::sigmoid(x)).collect())
}

/// Sigmoid scores for every sample, in order.
pub fn score_samples(model: &Model, contexts: &[ImageContext], samples: &[Sample]) -> Result<Vec<Vec<f64>>, ModelError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        samples.par_iter().map(|s| score_one(model, contexts, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples.iter().map(|s| score_one(model, contexts, s)).collect()
    }
}

fn validation_auc(
    model: &Model,
    contexts: &[ImageContext],
    val: &[Sample],
) -> Result<(Option<f64>, Option<f64>), ModelError> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let scores = score_samples(model, contexts, val)?;
    let c = model.answers.len();
    let labels: Vec<Vec<bool>> = val.iter().map(|s| s.label_row(c)).collect();
    Ok((auc_micro(&scores, &labels).ok(), auc_macro(&scores, &labels).ok().map(|m| m.value)))
}

/// Trains in place and leaves the best-validation parameters in `model`.
/// With an empty validation split the last epoch is kept.
pub fn train(
    model: &mut Model,
    contexts: &[ImageContext],
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::Config("batch size and epochs must be positive"));
    }
    let mut state = AdamState::new(&model.params, cfg.adam);
    let mut history = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(f64, u32, Vec<Tensor>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let mut rng = seeded_rng(derive_seed(cfg.seed, &format!("epoch:{epoch}")));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            loss_sum += fit_batch(model, contexts, &refs, &mut state, lr, cfg.parallel)? * refs.len() as f64;
        }
        let (micro, mac) = validation_auc(model, contexts, val)?;
        let record = EpochRecord { epoch, lr, train_loss: loss_sum / train.len() as f64, val_auc_micro: micro, val_auc_macro: mac };
        log::info!(
            "epoch {epoch}: lr {lr:.5} loss {:.5} val micro {:?} macro {:?}",
            record.train_loss,
            record.val_auc_micro,
            record.val_auc_macro
        );
        if log::log_enabled!(log::Level::Debug) {
            let mut peaks: Vec<(f64, &str)> = model
                .params
                .iter()
                .map(|(_, p)| (p.value.data().iter().fold(0.0f64, |m, x| m.max(x.abs())), p.name.as_str()))
                .collect();
            peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
            log::debug!("epoch {epoch}: largest |parameter| {:?}", &peaks[..peaks.len().min(4)]);
        }
        history.push(record);
        // Ties keep the earlier epoch.
        if let Some(m) = micro {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.params.iter().map(|(_, p)| p.value.clone()).collect()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, values)) => {
            for (p, v) in model.params.iter_mut().zip(values) {
                p.value = v;
            }
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome { history, best_epoch })
}
