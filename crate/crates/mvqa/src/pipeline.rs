//! Glue from reports and fixtures to a trained, evaluated model.

use std::collections::BTreeMap;

use anyhow::{anyhow, ensure, Context, Result};
use mvqa_core::eval::{evaluate, EvalReport};
use mvqa_core::graph::RoiSet;
use mvqa_core::kg::{build_cooccurrence, merge_kgs, KnowledgeGraph, Normalization, DEFAULT_COOCCURRENCE_THRESHOLD};
use mvqa_core::lexicon::Lexicon;
use mvqa_core::model::{
    build_samples, score_samples, train, ImageContext, Model, ModelConfig, TokenVocab, TrainConfig, TrainOutcome,
};
use mvqa_core::qa::{build_vocabulary, generate_corpus_qa, split_dataset, AnswerVocabulary, DatasetSplit, QAPair, QaConfig};
use mvqa_core::report::{extract_keyinfo, KeyInfoRecord, ParserConfig, Report};
use mvqa_core::synth::{synth_corpus, synth_roiset, FixtureConfig, SynthConfig};
use serde::{Deserialize, Serialize};

/// Everything the synthetic end-to-end task depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub studies: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    pub fixtures: FixtureConfig,
    pub qa: QaConfig,
    pub min_count: usize,
    pub cooccurrence_threshold: f64,
    pub normalization: Normalization,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let synth = SynthConfig::compact();
        let qa = QaConfig { absent_pool: synth.abnormality_pool.clone(), ..QaConfig::default() };
        TaskConfig {
            studies: 500,
            seed: 1,
            synth,
            fixtures: FixtureConfig::default(),
            qa,
            min_count: 2,
            cooccurrence_threshold: DEFAULT_COOCCURRENCE_THRESHOLD,
            normalization: Normalization::Joint,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

/// Anatomical graph merged with the co-occurrence graph of `records`.
pub fn knowledge_graph(records: &[KeyInfoRecord], lex: &Lexicon, t: f64, norm: Normalization) -> Result<KnowledgeGraph> {
    let co = build_cooccurrence(records, lex, t, norm)?;
    Ok(merge_kgs(&KnowledgeGraph::bundled_anatomical(), &co)?)
}

/// Image contexts in study-id order plus the study → row index.
pub fn build_contexts(
    fixtures: &BTreeMap<String, RoiSet>,
    kg: &KnowledgeGraph,
    cfg: &ModelConfig,
) -> Result<(Vec<ImageContext>, BTreeMap<String, usize>)> {
    let mut contexts = Vec::with_capacity(fixtures.len());
    let mut index = BTreeMap::new();
    for (study, rois) in fixtures {
        let (ctx, unresolved) = ImageContext::from_roiset(rois, kg, cfg.spatial_threshold, cfg.geometry_eps)
            .with_context(|| format!("study {study}"))?;
        if !unresolved.is_empty() {
            log::warn!("study {study}: ROI classes not in the knowledge graph: {unresolved:?}");
        }
        index.insert(study.clone(), contexts.len());
        contexts.push(ctx);
    }
    Ok((contexts, index))
}

/// Dataset ready for training.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub reports: Vec<Report>,
    /// Parsed from the report text.
    pub records: Vec<KeyInfoRecord>,
    /// What the generator planted; equal to `records` when parsing is exact.
    pub planted: Vec<KeyInfoRecord>,
    pub fixtures: BTreeMap<String, RoiSet>,
    pub kg: KnowledgeGraph,
    pub contexts: Vec<ImageContext>,
    pub context_index: BTreeMap<String, usize>,
    pub vocab: AnswerVocabulary,
    pub split: DatasetSplit,
}

fn train_studies(split: &DatasetSplit) -> std::collections::BTreeSet<&str> {
    split.train.iter().map(|p| p.study_id.as_str()).collect()
}

/// QA pairs, vocabulary, split, knowledge graph and contexts for a corpus
/// whose fixtures are already known. The co-occurrence graph only sees the
/// training studies.
pub fn prepare(
    reports: Vec<Report>,
    records: Vec<KeyInfoRecord>,
    planted: Vec<KeyInfoRecord>,
    fixtures: BTreeMap<String, RoiSet>,
    cfg: &TaskConfig,
) -> Result<Prepared> {
    let lex = Lexicon::bundled();
    let pairs = generate_corpus_qa(&records, &reports, &lex, &cfg.qa, cfg.seed)?;
    let (vocab, pairs) = build_vocabulary(&pairs, cfg.min_count)?;
    let split = split_dataset(&pairs)?;
    let in_train = train_studies(&split);
    let train_records: Vec<KeyInfoRecord> =
        records.iter().filter(|r| in_train.contains(r.study_id.as_str())).cloned().collect();
    let kg = knowledge_graph(&train_records, &lex, cfg.cooccurrence_threshold, cfg.normalization)?;
    let (contexts, context_index) = build_contexts(&fixtures, &kg, &cfg.model)?;
    Ok(Prepared { reports, records, planted, fixtures, kg, contexts, context_index, vocab, split })
}

/// Generates, parses and prepares the synthetic corpus.
pub fn prepare_synthetic(cfg: &TaskConfig) -> Result<Prepared> {
    let lex = Lexicon::bundled();
    let corpus = synth_corpus(cfg.studies, cfg.seed, &lex, &cfg.synth)?;
    let parser = ParserConfig::default();
    let mut reports = Vec::with_capacity(corpus.len());
    let mut records = Vec::with_capacity(corpus.len());
    let mut planted = Vec::with_capacity(corpus.len());
    let mut fixtures = BTreeMap::new();
    for (report, truth) in corpus {
        let rois = synth_roiset(&truth, report.view, &lex, &cfg.fixtures, cfg.seed);
        fixtures.insert(report.study_id.clone(), rois);
        records.push(extract_keyinfo(&report, &lex, &parser));
        reports.push(report);
        planted.push(truth);
    }
    prepare(reports, records, planted, fixtures, cfg)
}

/// Token vocabulary over the training questions.
pub fn token_vocab(pairs: &[QAPair]) -> TokenVocab {
    TokenVocab::build(pairs.iter().map(|p| p.question.as_str()))
}

/// Builds a model sized for `prepared` and trains it.
pub fn fit(prepared: &Prepared, model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<(Model, TrainOutcome)> {
    fit_split(
        &prepared.contexts,
        &prepared.context_index,
        &prepared.split,
        prepared.vocab.labels.clone(),
        model_cfg,
        train_cfg,
    )
}

/// Trains a fresh model on `split.train`, selecting by `split.val`.
pub fn fit_split(
    contexts: &[ImageContext],
    index: &BTreeMap<String, usize>,
    split: &DatasetSplit,
    answers: Vec<String>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(Model, TrainOutcome)> {
    let d_o = contexts.first().map(|c| c.features.cols()).ok_or_else(|| anyhow!("no image contexts"))?;
    ensure!(d_o == model_cfg.d_o, "fixtures carry {d_o}-wide features but the model expects d_o = {}", model_cfg.d_o);
    let tokens = token_vocab(&split.train);
    let mut model = Model::new(model_cfg.clone(), tokens, answers, None)?;
    let train_samples = build_samples(&model, &split.train, index)?;
    let val_samples = build_samples(&model, &split.val, index)?;
    let outcome = train(&mut model, contexts, &train_samples, &val_samples, train_cfg)?;
    Ok((model, outcome))
}

/// AUC report of `model` on `pairs`, sliced by question type.
pub fn evaluate_pairs(
    model: &Model,
    contexts: &[ImageContext],
    index: &BTreeMap<String, usize>,
    pairs: &[QAPair],
) -> Result<EvalReport> {
    let samples = build_samples(model, pairs, index)?;
    let scores = score_samples(model, contexts, &samples)?;
    let c = model.answers.len();
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.label_row(c)).collect();
    let qtypes: Vec<_> = samples.iter().map(|s| s.qtype).collect();
    Ok(evaluate(&scores, &labels, &model.answers, Some(&qtypes))?)
}

pub struct TaskRun {
    pub prepared: Prepared,
    pub model: Model,
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

pub fn run_synthetic(cfg: &TaskConfig) -> Result<TaskRun> {
    let prepared = prepare_synthetic(cfg)?;
    let (model, outcome) = fit(&prepared, &cfg.model, &cfg.train)?;
    let test = evaluate_pairs(&model, &prepared.contexts, &prepared.context_index, &prepared.split.test)?;
    Ok(TaskRun { prepared, model, outcome, test })
}
