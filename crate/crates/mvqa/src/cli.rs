//! Command line: one subcommand per pipeline stage.
//!
//! Flags override the JSON file given with `--config`, which overrides the
//! built-in defaults. Errors exit 1; usage errors exit 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvqa_core::eval::{ACTIVATION_TOP_K, SCORE_THRESHOLD, TOP_K};
use mvqa_core::graph::{build_semantic_graph, build_spatial_graph, RelationGraph};
use mvqa_core::kg::{build_cooccurrence, merge_kgs, KnowledgeGraph, Normalization};
use mvqa_core::lexicon::Lexicon;
use mvqa_core::model::{check_model_gradients, GradCheckConfig};
use mvqa_core::qa::{build_vocabulary, dataset_stats, generate_corpus_qa, sample_for_validation, split_dataset, DatasetSplit, QAPair};
use mvqa_core::report::{build_scene_graph, extract_keyinfo, KeyInfoRecord, ParserConfig, Report};
use mvqa_core::synth::{synth_corpus, synth_roiset};
use serde::Serialize;

use crate::io;
use crate::pipeline::{build_contexts, evaluate_pairs, fit_split, TaskConfig};
use crate::service::{self, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "mvqa", version, about = "Chest X-ray VQA over relation graphs of ROIs")]
pub struct Cli {
    /// JSON file overriding the default task configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (corpus, QA sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic reports, their planted key information and ROI fixtures.
    SynthCorpus(SynthArgs),
    /// Extract key information from reports.
    BuildKeyinfo(KeyinfoArgs),
    /// Generate QA pairs, the answer vocabulary and the 8:1:1 split.
    GenQa(GenQaArgs),
    /// Build the co-occurrence knowledge graph, merged with the anatomical one.
    BuildCooccurrence(CooccurrenceArgs),
    /// Build spatial and semantic relation graphs for every fixture.
    BuildGraphs(GraphsArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Draw a reviewer sample of QA pairs with their report evidence.
    SampleValidation(SampleArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Finite-difference check of the full model's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub studies: Option<usize>,
    /// Writes reports.jsonl, truth.jsonl and fixtures/ here.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeyinfoArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Planted records to compare against.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenQaArgs {
    #[arg(long)]
    pub keyinfo: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Writes train/val/test.jsonl, answers.txt and stats.json here.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum NormArg {
    Joint,
    Conditional,
    GeometricMean,
}

impl From<NormArg> for Normalization {
    fn from(n: NormArg) -> Normalization {
        match n {
            NormArg::Joint => Normalization::Joint,
            NormArg::Conditional => Normalization::Conditional,
            NormArg::GeometricMean => Normalization::GeometricMean,
        }
    }
}

#[derive(Debug, Args)]
pub struct CooccurrenceArgs {
    #[arg(long)]
    pub keyinfo: PathBuf,
    /// Only count studies that appear in this QA file (the training split).
    #[arg(long)]
    pub studies_from: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub normalization: Option<NormArg>,
    /// Write the co-occurrence graph alone.
    #[arg(long)]
    pub no_anatomical: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GraphsArgs {
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Knowledge graph in text form; the bundled anatomical graph by default.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub spatial_threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Directory written by gen-qa.
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub spatial_threshold: Option<f64>,
    #[arg(long)]
    pub geometry_eps: Option<f64>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub fixtures: PathBuf,
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Full report with the per-class table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// QA pairs (JSON lines).
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long, default_value_t = 1700)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MVQA_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "MVQA_FIXTURES")]
    pub fixtures: PathBuf,
    #[arg(long, env = "MVQA_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "MVQA_SESSIONS")]
    pub sessions_dir: Option<PathBuf>,
    #[arg(long, env = "MVQA_STATIC")]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = TOP_K)]
    pub top_k: usize,
    #[arg(long, default_value_t = SCORE_THRESHOLD)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = ACTIVATION_TOP_K)]
    pub activation_k: usize,
    /// Activation threshold; 1.5/N when omitted.
    #[arg(long)]
    pub activation_theta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 5)]
    pub nodes: usize,
    #[arg(long, default_value_t = 8)]
    pub answers: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn task_config(cli: &Cli) -> Result<TaskConfig> {
    let mut cfg: TaskConfig = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => TaskConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = task_config(&cli)?;
    match cli.command {
        Command::SynthCorpus(a) => synth(&cfg, a),
        Command::BuildKeyinfo(a) => keyinfo(a),
        Command::GenQa(a) => gen_qa(&cfg, a),
        Command::BuildCooccurrence(a) => cooccurrence(&cfg, a),
        Command::BuildGraphs(a) => graphs(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(a),
        Command::SampleValidation(a) => sample(&cfg, a),
        Command::Serve(a) => serve(a),
        Command::Gradcheck(a) => gradcheck(cfg.seed, a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn synth(cfg: &TaskConfig, a: SynthArgs) -> Result<()> {
    let lex = Lexicon::bundled();
    let n = a.studies.unwrap_or(cfg.studies);
    let corpus = synth_corpus(n, cfg.seed, &lex, &cfg.synth)?;
    let fixtures = a.out.join("fixtures");
    std::fs::create_dir_all(&fixtures)?;
    let mut reports = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (report, record) in corpus {
        io::write_fixture(&fixtures, &synth_roiset(&record, report.view, &lex, &cfg.fixtures, cfg.seed))?;
        reports.push(report);
        truth.push(record);
    }
    io::write_jsonl(&a.out.join("reports.jsonl"), &reports)?;
    io::write_jsonl(&a.out.join("truth.jsonl"), &truth)?;
    println!("{n} studies written to {}", a.out.display());
    Ok(())
}

fn keyinfo(a: KeyinfoArgs) -> Result<()> {
    let lex = Lexicon::bundled();
    let reports: Vec<Report> = io::read_jsonl(&a.reports)?;
    let parser = ParserConfig::default();
    let records: Vec<KeyInfoRecord> = reports.iter().map(|r| extract_keyinfo(r, &lex, &parser)).collect();
    io::write_jsonl(&a.out, &records)?;
    let round_trip = records.iter().filter(|r| build_scene_graph(r).to_record().as_ref() == Ok(*r)).count();
    println!("{} records; scene-graph round trip {round_trip}/{}", records.len(), records.len());
    if let Some(path) = a.truth {
        let truth: Vec<KeyInfoRecord> = io::read_jsonl(&path)?;
        let by_id: BTreeMap<&str, &KeyInfoRecord> = truth.iter().map(|r| (r.study_id.as_str(), r)).collect();
        let matched = records.iter().filter(|r| by_id.get(r.study_id.as_str()) == Some(r)).count();
        println!("planted records reproduced {matched}/{}", truth.len());
        for r in records.iter().filter(|r| by_id.get(r.study_id.as_str()) != Some(r)).take(5) {
            println!("  mismatch: {}", r.study_id);
        }
    }
    Ok(())
}

fn gen_qa(cfg: &TaskConfig, a: GenQaArgs) -> Result<()> {
    let lex = Lexicon::bundled();
    let records: Vec<KeyInfoRecord> = io::read_jsonl(&a.keyinfo)?;
    let reports: Vec<Report> = io::read_jsonl(&a.reports)?;
    let pairs = generate_corpus_qa(&records, &reports, &lex, &cfg.qa, cfg.seed)?;
    let (vocab, pairs) = build_vocabulary(&pairs, a.min_count.unwrap_or(cfg.min_count))?;
    let split = split_dataset(&pairs)?;
    io::write_jsonl(&a.out.join("train.jsonl"), &split.train)?;
    io::write_jsonl(&a.out.join("val.jsonl"), &split.val)?;
    io::write_jsonl(&a.out.join("test.jsonl"), &split.test)?;
    io::write_vocabulary(&a.out.join("answers.txt"), &vocab)?;
    let stats: BTreeMap<String, usize> = dataset_stats(&pairs).into_iter().map(|(k, v)| (k.as_str().to_string(), v)).collect();
    io::write_json(&a.out.join("stats.json"), &stats)?;
    println!(
        "{} pairs, {} answers; split {}/{}/{}",
        pairs.len(),
        vocab.len(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn cooccurrence(cfg: &TaskConfig, a: CooccurrenceArgs) -> Result<()> {
    let lex = Lexicon::bundled();
    let mut records: Vec<KeyInfoRecord> = io::read_jsonl(&a.keyinfo)?;
    if let Some(path) = &a.studies_from {
        let pairs: Vec<QAPair> = io::read_jsonl(path)?;
        let keep: std::collections::BTreeSet<String> = pairs.into_iter().map(|p| p.study_id).collect();
        records.retain(|r| keep.contains(&r.study_id));
    }
    let t = a.threshold.unwrap_or(cfg.cooccurrence_threshold);
    let norm = a.normalization.map_or(cfg.normalization, Normalization::from);
    let co = build_cooccurrence(&records, &lex, t, norm)?;
    let kg = if a.no_anatomical { co } else { merge_kgs(&KnowledgeGraph::bundled_anatomical(), &co)? };
    io::create(&a.out)?;
    std::fs::write(&a.out, kg.to_text())?;
    println!("{} records; {} nodes, {} edges", records.len(), kg.nodes.len(), kg.edges.len());
    Ok(())
}

#[derive(Serialize)]
struct GraphRow {
    image_id: String,
    study_id: String,
    spatial: RelationGraph,
    semantic: RelationGraph,
    unresolved: Vec<String>,
}

fn load_kg(path: Option<&Path>) -> Result<KnowledgeGraph> {
    match path {
        Some(p) => io::read_kg(p),
        None => Ok(KnowledgeGraph::bundled_anatomical()),
    }
}

fn graphs(cfg: &TaskConfig, a: GraphsArgs) -> Result<()> {
    let kg = load_kg(a.kg.as_deref())?;
    let t = a.spatial_threshold.unwrap_or(cfg.model.spatial_threshold);
    let rows: Vec<GraphRow> = io::read_fixture_dir(&a.fixtures)?
        .into_iter()
        .map(|rois| {
            let (semantic, unresolved) = build_semantic_graph(&rois, &kg);
            GraphRow {
                spatial: build_spatial_graph(&rois, t),
                semantic,
                unresolved,
                image_id: rois.image_id,
                study_id: rois.study_id,
            }
        })
        .collect();
    io::write_jsonl(&a.out, &rows)?;
    println!("{} images", rows.len());
    Ok(())
}

fn read_split(dir: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: io::read_jsonl(&dir.join("train.jsonl"))?,
        val: io::read_jsonl(&dir.join("val.jsonl"))?,
        test: io::read_jsonl(&dir.join("test.jsonl"))?,
    })
}

fn train(mut cfg: TaskConfig, a: TrainArgs) -> Result<()> {
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.d {
        cfg.model.d = v;
    }
    if let Some(v) = a.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = a.spatial_threshold {
        cfg.model.spatial_threshold = v;
    }
    if let Some(v) = a.geometry_eps {
        cfg.model.geometry_eps = v;
    }
    let fixtures = io::fixtures_by_study(io::read_fixture_dir(&a.fixtures)?);
    if let Some(width) = fixtures.values().next().map(|f| f.feature_width()) {
        cfg.model.d_o = width;
    }
    let kg = load_kg(a.kg.as_deref())?;
    let (contexts, index) = build_contexts(&fixtures, &kg, &cfg.model)?;
    let split = read_split(&a.qa)?;
    let vocab = io::read_vocabulary(&a.qa.join("answers.txt"))?;
    let (model, outcome) = fit_split(&contexts, &index, &split, vocab.labels, &cfg.model, &cfg.train)?;
    let (mut manifest, blob) = model.to_checkpoint();
    manifest.train = Some(cfg.train.clone());
    manifest.history = outcome.history.clone();
    manifest.best_epoch = Some(outcome.best_epoch);
    io::save_checkpoint_kg(&a.out, &kg)?;
    io::save_checkpoint(&a.out, &manifest, &blob)?;
    let best = &outcome.history[outcome.best_epoch as usize - 1];
    println!(
        "best epoch {}: val micro {:?} macro {:?}; checkpoint {}",
        outcome.best_epoch,
        best.val_auc_micro,
        best.val_auc_macro,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (_, model) = io::load_checkpoint(&a.checkpoint)?;
    let kg = io::load_checkpoint_kg(&a.checkpoint)?;
    let fixtures = io::fixtures_by_study(io::read_fixture_dir(&a.fixtures)?);
    let (contexts, index) = build_contexts(&fixtures, &kg, &model.config)?;
    let split = read_split(&a.qa)?;
    let pairs = match a.split {
        SplitArg::Train => &split.train,
        SplitArg::Val => &split.val,
        SplitArg::Test => &split.test,
    };
    let report = evaluate_pairs(&model, &contexts, &index, pairs)?;
    println!("micro-AUC {:.4} macro-AUC {:.4} ({} questions)", report.auc_micro, report.auc_macro, report.n_eval);
    if !report.excluded_classes.is_empty() {
        println!("excluded from macro: {}", report.excluded_classes.join(", "));
    }
    if let Some(out) = a.out {
        io::write_json(&out, &report)?;
    }
    Ok(())
}

fn sample(cfg: &TaskConfig, a: SampleArgs) -> Result<()> {
    let pairs: Vec<QAPair> = io::read_jsonl(&a.qa)?;
    let reports: Vec<Report> = io::read_jsonl(&a.reports)?;
    let rows = sample_for_validation(&pairs, &reports, a.n, cfg.seed)?;
    io::write_jsonl(&a.out, &rows)?;
    println!("{} rows", rows.len());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        port: a.port,
        fixtures: a.fixtures,
        checkpoint: a.checkpoint,
        sessions_dir: a.sessions_dir,
        static_dir: a.static_dir,
        top_k: a.top_k,
        score_threshold: a.score_threshold,
        activation_k: a.activation_k,
        activation_theta: a.activation_theta,
    };
    let rt = tokio::runtime::Runtime::new().context("starting the runtime")?;
    rt.block_on(service::serve(config))
}

fn gradcheck(seed: u64, a: GradcheckArgs) -> Result<()> {
    let mut cfg = GradCheckConfig { nodes: a.nodes, answers: a.answers, seed, ..GradCheckConfig::default() };
    cfg.model.d = a.d;
    cfg.model.heads = a.heads;
    let r = check_model_gradients(&cfg)?;
    println!(
        "max relative error {:.3e} (worst parameter {}); worst coordinate {:.3e} at {:?}; {} coordinates",
        r.max_group_error,
        r.worst_group.as_deref().unwrap_or("-"),
        r.max_rel_error,
        r.worst,
        r.checked
    );
    if !(r.max_group_error < a.tolerance) {
        bail!("gradient check failed: {:.3e} ≥ {:.1e}", r.max_group_error, a.tolerance);
    }
    Ok(())
}
