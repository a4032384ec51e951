//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does. Tolerances and budgets are the constants
//! below.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mvqa::pipeline::{run_synthetic, TaskConfig, TaskRun};
use mvqa::service::{router, AppState, ServiceConfig, Session, Turn};
use mvqa_core::eval::{auc_binary, auc_macro, auc_micro};
use mvqa_core::graph::{classify_spatial, BBox, Modality, RelationGraph, DEFAULT_SPATIAL_THRESHOLD};
use mvqa_core::kg::{build_cooccurrence, Normalization};
use mvqa_core::lexicon::Lexicon;
use mvqa_core::model::{
    build_samples, check_model_gradients, fit_batch, GradCheckConfig, ImageContext, Model, ModelConfig, TokenVocab,
    Fusion,
};
use mvqa_core::numeric::{AdamConfig, AdamState, LrSchedule, Tensor};
use mvqa_core::report::{extract_keyinfo, KeyInfoRecord, ParserConfig};
use mvqa_core::seeded_rng;
use mvqa_core::synth::{synth_corpus, SynthConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

const PARSER_BUDGET: Duration = Duration::from_secs(10);
const SPATIAL_PAIRS: usize = 1000;
const COOCCURRENCE_RECORDS: usize = 10_000;
const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ATTENTION_CONFIGS: u64 = 100;
const ROW_SUM_TOLERANCE: f64 = 1e-12;
const PERMUTATION_TOLERANCE: f64 = 1e-10;
const AUC_TOLERANCE: f64 = 1e-9;
const AUC_SAMPLES: usize = 200;
const MIN_MICRO_AUC: f64 = 0.95;
const MIN_MACRO_AUC: f64 = 0.90;
const END_TO_END_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_LOSS: f64 = 0.01;
const OVERFIT_STEPS: usize = 200;

type Check = Result<String, String>;

macro_rules! require {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(n: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1}s): {detail}"),
        Err(why) => println!("FAIL {n:>2} {name} ({secs:.1}s): {why}"),
    }
    result.is_ok()
}

// 1 ------------------------------------------------------------------------

fn parser_round_trip() -> Check {
    let lex = Lexicon::bundled();
    let start = Instant::now();
    let corpus = synth_corpus(1000, 1, &lex, &SynthConfig::default()).map_err(|e| e.to_string())?;
    let parser = ParserConfig::default();
    let mismatched: Vec<&str> = corpus
        .iter()
        .filter(|(report, truth)| &extract_keyinfo(report, &lex, &parser) != truth)
        .map(|(r, _)| r.study_id.as_str())
        .collect();
    let elapsed = start.elapsed();
    require!(mismatched.is_empty(), "{} records differ, first {:?}", mismatched.len(), &mismatched[..mismatched.len().min(5)]);
    require!(elapsed < PARSER_BUDGET, "took {elapsed:?}");
    let findings: usize = corpus.iter().map(|(_, t)| t.findings.len()).sum();
    Ok(format!("1000 records, {findings} findings reproduced in {elapsed:.2?}"))
}

// 2 ------------------------------------------------------------------------

/// Straightforward geometric reference for the 11 spatial classes.
fn spatial_oracle(a: &BBox, b: &BBox, t: f64) -> u8 {
    let contains = |outer: &BBox, inner: &BBox| {
        inner.x >= outer.x && inner.y >= outer.y && inner.x + inner.w <= outer.x + outer.w && inner.y + inner.h <= outer.y + outer.h
    };
    if contains(b, a) {
        return 1;
    }
    if contains(a, b) {
        return 2;
    }
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if inter / union >= 0.5 {
        return 3;
    }
    let (dx, dy) = ((b.x + b.w / 2.0) - (a.x + a.w / 2.0), (b.y + b.h / 2.0) - (a.y + a.h / 2.0));
    if (dx * dx + dy * dy).sqrt() > t {
        return 0;
    }
    let angle = dy.atan2(dx).to_degrees().rem_euclid(360.0);
    4 + ((angle / 45.0) as u8).min(7)
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.02..0.6);
    let h = rng.random_range(0.02..0.6);
    BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
}

fn spatial_oracle_agreement() -> Check {
    let mut rng = seeded_rng(2);
    let t = DEFAULT_SPATIAL_THRESHOLD;
    let mut counts = [0usize; 12];
    for k in 0..SPATIAL_PAIRS {
        let a = random_box(&mut rng);
        // A quarter of the pairs are nested on purpose so classes 1 and 2 occur.
        let b = if k % 4 == 0 {
            let w = a.w * rng.random_range(0.1..1.0);
            let h = a.h * rng.random_range(0.1..1.0);
            BBox::new(a.x + rng.random_range(0.0..=a.w - w), a.y + rng.random_range(0.0..=a.h - h), w, h)
        } else {
            random_box(&mut rng)
        };
        let (ab, ba) = (classify_spatial(&a, &b, t), classify_spatial(&b, &a, t));
        require!(ab == spatial_oracle(&a, &b, t), "pair {k}: {ab} vs oracle {} for {a:?} {b:?}", spatial_oracle(&a, &b, t));
        require!(ba == spatial_oracle(&b, &a, t), "pair {k} reversed disagrees");
        require!((ab == 1) == (ba == 2), "pair {k}: containment duality broken ({ab}, {ba})");
        counts[ab as usize] += 1;
    }
    Ok(format!("{SPATIAL_PAIRS} pairs agree; label histogram {counts:?}"))
}

// 3 ------------------------------------------------------------------------

fn cooccurrence_oracle() -> Check {
    let lex = Lexicon::bundled();
    let corpus: Vec<KeyInfoRecord> = synth_corpus(COOCCURRENCE_RECORDS, 3, &lex, &SynthConfig::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    // O(n·k²) pair counting.
    let mut pairs: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for r in &corpus {
        let ids: BTreeSet<u8> = r.findings.iter().filter(|f| f.present).map(|f| f.abnormality_id).collect();
        let ids: Vec<u8> = ids.into_iter().collect();
        for (x, &i) in ids.iter().enumerate() {
            for &j in &ids[x + 1..] {
                *pairs.entry((i, j)).or_default() += 1;
            }
        }
    }
    let n = corpus.len() as f64;
    let mut edges_checked = 0;
    for t in [0.0, 0.001, 0.01, 0.05] {
        let kg = build_cooccurrence(&corpus, &lex, t, Normalization::Joint).map_err(|e| e.to_string())?;
        let mut got: BTreeMap<(u8, u8), f64> = BTreeMap::new();
        for e in &kg.edges {
            let (a, b) = (kg.nodes[e.a].abnormality_id.unwrap(), kg.nodes[e.b].abnormality_id.unwrap());
            require!((0.0..=1.0).contains(&e.weight), "weight {} outside [0, 1]", e.weight);
            got.insert((a.min(b), a.max(b)), e.weight);
        }
        let want: BTreeMap<(u8, u8), f64> =
            pairs.iter().map(|(&k, &c)| (k, c as f64 / n)).filter(|&(_, c)| c > t).collect();
        require!(got == want, "t = {t}: {} edges vs {} from brute force", got.len(), want.len());
        edges_checked += got.len();
    }
    Ok(format!("{COOCCURRENCE_RECORDS} records, {} co-occurring pairs, {edges_checked} edges over 4 thresholds", pairs.len()))
}

// 4 ------------------------------------------------------------------------

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    let variants: [(&str, fn(&mut ModelConfig)); 2] = [
        ("default", |_| {}),
        ("learned fusion + bidirectional GRU", |m| {
            m.fusion = Fusion::Learned;
            m.bidirectional_gru = true;
        }),
    ];
    for (name, tweak) in variants {
        let mut cfg = GradCheckConfig::default();
        require!(cfg.model.d == 16 && cfg.model.heads == 2 && cfg.model.layers == 2, "unexpected gradcheck defaults");
        require!(cfg.nodes == 5 && cfg.answers == 8, "unexpected gradcheck defaults");
        tweak(&mut cfg.model);
        let r = check_model_gradients(&cfg).map_err(|e| e.to_string())?;
        require!(
            r.max_group_error < GRADIENT_TOLERANCE,
            "{name}: {:.3e} on {:?}",
            r.max_group_error,
            r.worst
        );
        worst = worst.max(r.max_group_error);
        details.push(format!("{name} {:.2e} over {} coordinates", r.max_group_error, r.checked));
    }
    let elapsed = start.elapsed();
    require!(elapsed < GRADIENT_BUDGET, "took {elapsed:?}");
    Ok(format!("max relative error {worst:.2e} ({})", details.join("; ")))
}

// 5 ------------------------------------------------------------------------

struct RawImage {
    features: Tensor,
    boxes: Vec<BBox>,
    spatial: RelationGraph,
    semantic: RelationGraph,
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

impl RawImage {
    fn random(rng: &mut impl Rng, n: usize, d_o: usize) -> RawImage {
        let density = rng.random_range(0.0..1.0);
        RawImage {
            features: Tensor::uniform(n, d_o, 1.0, rng),
            boxes: (0..n).map(|_| random_box(rng)).collect(),
            spatial: random_graph(rng, n, Modality::Spatial, density),
            semantic: random_graph(rng, n, Modality::Semantic, density),
        }
    }

    fn context(&self) -> ImageContext {
        ImageContext::new(self.features.clone(), &self.boxes, &self.spatial, &self.semantic, 1e-6).unwrap()
    }

    fn permuted(&self, perm: &[usize]) -> RawImage {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| self.features.row(p).to_vec()).collect();
        RawImage {
            features: Tensor::from_rows(&rows).unwrap(),
            boxes: perm.iter().map(|&p| self.boxes[p]).collect(),
            spatial: self.spatial.permuted(perm),
            semantic: self.semantic.permuted(perm),
        }
    }
}

fn attention_invariants() -> Check {
    let questions = ["is there pleural effusion?", "where is the opacity?", "what level is the edema?"];
    let tokens = TokenVocab::build(questions);
    let mut rows_checked = 0usize;
    let mut worst_perm = 0.0f64;
    for seed in 0..ATTENTION_CONFIGS {
        let mut rng = seeded_rng(1000 + seed);
        let n = rng.random_range(1..9);
        let d_o = rng.random_range(2..7);
        let heads = rng.random_range(1..4);
        let cfg = ModelConfig {
            d_o,
            d_q: 2 * rng.random_range(1..4),
            d: rng.random_range(2..9),
            heads,
            layers: rng.random_range(1..3),
            fixed_embedding_dim: 3,
            learned_embedding_dim: 2,
            bidirectional_gru: rng.random_bool(0.5),
            shared_head_attention: rng.random_bool(0.3),
            seed,
            ..ModelConfig::default()
        };
        let answers: Vec<String> = (0..rng.random_range(1..6)).map(|i| format!("a{i}")).collect();
        let mut model = Model::new(cfg.clone(), tokens.clone(), answers.clone(), None).map_err(|e| e.to_string())?;
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let img = RawImage::random(&mut rng, n, d_o);
        let ctx = img.context();
        let q = questions[seed as usize % questions.len()];
        let pred = model.predict(&ctx, q).map_err(|e| e.to_string())?;
        for (m, layers) in &pred.attention {
            let mask = ctx.neighbor_mask(*m);
            for heads in layers {
                for a in heads {
                    for i in 0..n {
                        let mut sum = 0.0;
                        for j in 0..n {
                            if mask[i * n + j] {
                                sum += a.get(i, j);
                            } else {
                                require!(a.get(i, j) == 0.0, "config {seed}: {m:?} non-neighbour ({i},{j}) has mass");
                            }
                        }
                        require!((sum - 1.0).abs() <= ROW_SUM_TOLERANCE, "config {seed}: {m:?} row {i} sums to {sum}");
                        rows_checked += 1;
                    }
                }
            }
        }

        // α = β = 0 leaves exactly the implicit answer.
        let mut zero = model.clone();
        zero.config.fusion = Fusion::Fixed { alpha: 0.0, beta: 0.0 };
        let p0 = zero.predict(&ctx, q).map_err(|e| e.to_string())?;
        let imp = &p0.branch_logits[&Modality::Implicit];
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        require!(bits(&p0.logits) == bits(imp), "config {seed}: fused logits differ from the implicit branch");

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let pp = model.predict(&img.permuted(&perm).context(), q).map_err(|e| e.to_string())?;
        for (a, b) in pred.scores.iter().zip(&pp.scores) {
            worst_perm = worst_perm.max((a - b).abs());
        }
        require!(worst_perm <= PERMUTATION_TOLERANCE, "config {seed}: permutation moved the answer by {worst_perm:e}");
    }
    Ok(format!("{ATTENTION_CONFIGS} configs, {rows_checked} rows normalised, max permutation drift {worst_perm:.1e}"))
}

// 6 ------------------------------------------------------------------------

fn schedule() -> Check {
    let s = LrSchedule::default();
    require!(s.lr(1) == 0.0005, "epoch 1: {}", s.lr(1));
    require!(s.lr(4) == 0.002, "epoch 4: {}", s.lr(4));
    for e in 1..4 {
        let step = s.lr(e + 1) - s.lr(e);
        require!((step - 0.0005).abs() < 1e-15, "warm-up step {e} → {} is {step}", e + 1);
    }
    for e in 15..60 {
        require!(s.lr(e + 1) <= s.lr(e), "epoch {} rises above epoch {e}", e + 1);
    }
    let lrs: Vec<String> = (1..=20).map(|e| format!("{}", s.lr(e))).collect();
    Ok(format!("epochs 1..20: {}", lrs.join(" ")))
}

// 7 ------------------------------------------------------------------------

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Check {
    let mut rng = seeded_rng(7);
    let mut worst = 0.0f64;
    for round in 0..20 {
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..AUC_SAMPLES).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
        let labels: Vec<bool> = (0..AUC_SAMPLES).map(|_| rng.random_bool(0.3)).collect();
        let got = auc_binary(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((got - pairwise_auc(&scores, &labels)).abs());
        let squashed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() / (1.0 + (3.0 * s).exp())).collect();
        require!(auc_binary(&squashed, &labels).unwrap() == got, "round {round}: monotone transform changed the AUC");

        let classes = 5;
        let rows = AUC_SAMPLES / classes;
        let m: Vec<Vec<f64>> = (0..rows).map(|_| (0..classes).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let l: Vec<Vec<bool>> = (0..rows).map(|_| (0..classes).map(|_| rng.random_bool(0.4)).collect()).collect();
        let flat_s: Vec<f64> = m.iter().flatten().copied().collect();
        let flat_l: Vec<bool> = l.iter().flatten().copied().collect();
        worst = worst.max((auc_micro(&m, &l).unwrap() - pairwise_auc(&flat_s, &flat_l)).abs());
        let mut per_class = Vec::new();
        for c in 0..classes {
            let s: Vec<f64> = m.iter().map(|r| r[c]).collect();
            let y: Vec<bool> = l.iter().map(|r| r[c]).collect();
            if y.iter().any(|&b| b) && y.iter().any(|&b| !b) {
                per_class.push(pairwise_auc(&s, &y));
            }
        }
        let oracle_macro = per_class.iter().sum::<f64>() / per_class.len() as f64;
        worst = worst.max((auc_macro(&m, &l).unwrap().value - oracle_macro).abs());
    }
    require!(worst <= AUC_TOLERANCE, "max deviation {worst:e}");
    Ok(format!("binary/micro/macro within {worst:.1e} of the pairwise oracle over 20 rounds"))
}

// 8 ------------------------------------------------------------------------

fn end_to_end(slot: &mut Option<TaskRun>) -> Check {
    let cfg = TaskConfig::default();
    require!(cfg.studies == 500 && cfg.train.epochs == 20 && cfg.train.batch_size == 64, "unexpected task defaults");
    require!(cfg.model.d == 64 && cfg.model.heads == 4, "unexpected model defaults");
    let start = Instant::now();
    let run = run_synthetic(&cfg).map_err(|e| format!("{e:#}"))?;
    let elapsed = start.elapsed();
    let t = &run.test;
    let mut detail = format!(
        "test micro {:.4} macro {:.4} on {} questions, best epoch {}, {:.0?}",
        t.auc_micro, t.auc_macro, t.n_eval, run.outcome.best_epoch, elapsed
    );
    // Single-branch scores of the same model, reported only.
    let branches = branch_aucs(&run);
    detail.push_str(&format!("; branch micro-AUC {branches}"));
    let pass = t.auc_micro >= MIN_MICRO_AUC && t.auc_macro >= MIN_MACRO_AUC && elapsed < END_TO_END_BUDGET;
    *slot = Some(run);
    require!(pass, "{detail}");
    Ok(detail)
}

fn branch_aucs(run: &TaskRun) -> String {
    let model = &run.model;
    let Ok(samples) = build_samples(model, &run.prepared.split.test, &run.prepared.context_index) else {
        return "unavailable".into();
    };
    let c = model.answers.len();
    let labels: Vec<Vec<bool>> = samples.iter().map(|s| s.label_row(c)).collect();
    let mut per: BTreeMap<Modality, Vec<Vec<f64>>> = BTreeMap::new();
    for s in &samples {
        let Ok(p) = model.predict_tokens(&run.prepared.contexts[s.context], &s.tokens) else {
            return "unavailable".into();
        };
        for (m, logits) in p.branch_logits {
            per.entry(m).or_default().push(logits.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect());
        }
    }
    per.iter()
        .map(|(m, scores)| format!("{} {:.4}", m.as_str(), auc_micro(scores, &labels).unwrap_or(f64::NAN)))
        .collect::<Vec<_>>()
        .join(", ")
}

// 9 ------------------------------------------------------------------------

fn overfit() -> Check {
    let task = TaskConfig { studies: 40, ..TaskConfig::default() };
    let prepared = mvqa::pipeline::prepare_synthetic(&task).map_err(|e| format!("{e:#}"))?;
    let tokens = mvqa::pipeline::token_vocab(&prepared.split.train);
    let mut model =
        Model::new(task.model.clone(), tokens, prepared.vocab.labels.clone(), None).map_err(|e| e.to_string())?;
    let samples = build_samples(&model, &prepared.split.train, &prepared.context_index).map_err(|e| e.to_string())?;
    let batch: Vec<_> = samples.iter().take(task.train.batch_size).collect();
    let mut state = AdamState::new(&model.params, AdamConfig::default());
    let lr = task.train.schedule.peak;
    let mut history = Vec::new();
    for step in 1..=OVERFIT_STEPS {
        let loss = fit_batch(&mut model, &prepared.contexts, &batch, &mut state, lr, false).map_err(|e| e.to_string())?;
        history.push(loss);
        if loss < OVERFIT_LOSS {
            return Ok(format!("batch of {} reached loss {loss:.4} at step {step} (start {:.4})", batch.len(), history[0]));
        }
    }
    Err(format!("loss {:.4} after {OVERFIT_STEPS} steps", history.last().unwrap()))
}

// 10 -----------------------------------------------------------------------

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn service_contract(run: &TaskRun) -> Check {
    let p = &run.prepared;
    let test_studies: BTreeSet<&str> = p.split.test.iter().map(|q| q.study_id.as_str()).collect();
    let fixtures: Vec<_> = p.fixtures.values().filter(|f| test_studies.contains(f.study_id.as_str())).cloned().collect();
    let cfg = ServiceConfig { fixtures: Path::new("unused").to_path_buf(), ..ServiceConfig::default() };
    let state = Arc::new(
        AppState::new(cfg, fixtures.clone(), &p.kg, Some(run.model.clone()), Some(Arc::new(|| 0)))
            .map_err(|e| format!("{e:#}"))?,
    );
    let app = router(state);

    let (s, list) = call(&app, "GET", "/api/v1/studies", None).await;
    require!(s == StatusCode::OK && list.as_array().map(Vec::len) == Some(fixtures.len()), "GET /studies: {s}");
    let (s, _) = call(&app, "GET", &format!("/api/v1/studies/{}", fixtures[0].study_id), None).await;
    require!(s == StatusCode::OK, "GET /studies/{{id}}: {s}");
    let (s, err) = call(&app, "GET", "/api/v1/studies/missing", None).await;
    require!(s == StatusCode::NOT_FOUND && err["code"] == "not_found", "unknown study: {s} {err}");

    // The two worked examples: the cardiomegaly question should be answered
    // "yes" and the effusion question should score yes above no on planted
    // fixtures. Absent-finding rates are printed so prior-driven yeses show.
    let lex = Lexicon::bundled();
    let cardiomegaly = lex.id_by_name("cardiomegaly").ok_or("no cardiomegaly entry")?;
    let effusion = lex.id_by_name("pleural effusion").ok_or("no pleural effusion entry")?;
    let truth: BTreeMap<&str, &KeyInfoRecord> = p.planted.iter().map(|r| (r.study_id.as_str(), r)).collect();
    let questions =
        ["is there any evidence of cardiomegaly in this image?", "is there pleural effusion?", "where is the atelectasis?"];
    // [planted, absent] × [hits, asked]
    let mut cardio = [[0usize; 2]; 2];
    let mut effus = [[0usize; 2]; 2];
    for f in &fixtures {
        let (s, created) = call(&app, "POST", "/api/v1/sessions", Some(json!({ "study_id": f.study_id }))).await;
        require!(s == StatusCode::CREATED, "POST /sessions: {s}");
        let sid = created["session_id"].as_str().unwrap().to_string();
        let mut turns = Vec::new();
        for q in questions.iter().chain(questions.iter()) {
            let (s, body) = call(&app, "POST", &format!("/api/v1/sessions/{sid}/ask"), Some(json!({ "question": q }))).await;
            require!(s == StatusCode::OK, "ask: {s} {body}");
            let turn: Turn = serde_json::from_value(body).map_err(|e| e.to_string())?;
            require!(turn.top_answers.len() <= 4, "more than four answers");
            require!(turn.top_answers.iter().all(|a| a.score > 0.04), "answer at or below 0.04");
            require!(turn.activated_rois.values().flatten().all(|&i| i < f.rois.len()), "activated ROI out of range");
            turns.push(turn);
        }
        require!(turns.iter().enumerate().all(|(i, t)| t.turn_index == i), "turn indices not dense");
        let k = questions.len();
        require!((0..k).all(|i| turns[i].top_answers == turns[i + k].top_answers), "repeated ask changed the answers");
        let (s, body) = call(&app, "GET", &format!("/api/v1/sessions/{sid}"), None).await;
        let session: Session = serde_json::from_value(body).map_err(|e| e.to_string())?;
        require!(s == StatusCode::OK && session.turns == turns, "GET /sessions/{{id}} differs from the asks");

        let record = truth[f.study_id.as_str()];
        let top_yes = turns[0].top_answers.first().is_some_and(|a| a.label == "yes");
        let bucket = &mut cardio[usize::from(!record.has_present(cardiomegaly))];
        bucket[0] += usize::from(top_yes);
        bucket[1] += 1;
        let ctx = &p.contexts[p.context_index[f.study_id.as_str()]];
        let scores = run.model.predict(ctx, questions[1]).map_err(|e| e.to_string())?.scores;
        let idx = |l: &str| run.model.answers.iter().position(|a| a == l).ok_or("yes/no missing from the vocabulary");
        let bucket = &mut effus[usize::from(!record.has_present(effusion))];
        bucket[0] += usize::from(scores[idx("yes")?] > scores[idx("no")?]);
        bucket[1] += 1;
    }
    let rate = |b: [usize; 2]| format!("{}/{}", b[0], b[1]);
    let detail = format!(
        "{} test studies, 5 endpoints; cardiomegaly question top answer yes on planted {} (absent {}); \
         effusion yes > no on planted {} (absent {})",
        fixtures.len(),
        rate(cardio[0]),
        rate(cardio[1]),
        rate(effus[0]),
        rate(effus[1])
    );
    let majority = |b: [usize; 2]| b[1] > 0 && 2 * b[0] > b[1];
    require!(majority(cardio[0]) && majority(effus[0]), "{detail}");
    Ok(detail)
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    results.push(criterion(1, "parser round trip", parser_round_trip));
    results.push(criterion(2, "spatial oracle", spatial_oracle_agreement));
    results.push(criterion(3, "co-occurrence oracle", cooccurrence_oracle));
    results.push(criterion(4, "gradient suite", gradient_suite));
    results.push(criterion(5, "attention invariants", attention_invariants));
    results.push(criterion(6, "learning-rate schedule", schedule));
    results.push(criterion(7, "AUC oracle", auc_oracle));
    let mut run = None;
    results.push(criterion(8, "end-to-end synthetic task", || end_to_end(&mut run)));
    results.push(criterion(9, "single-batch overfit", overfit));
    results.push(criterion(10, "service contract", || {
        let run = run.as_ref().ok_or("needs the criterion 8 model")?;
        let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
        rt.block_on(service_contract(run))
    }));
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
