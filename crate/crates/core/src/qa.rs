//! Question/answer generation, answer vocabulary, splits and statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{AttributeRole, Lexicon};
use crate::report::{KeyInfoRecord, Report, View};
use crate::rng::{derive_seed, seeded_rng};
use crate::text::Span;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QaError {
    #[error("record is for study {record:?} but the report is for {report:?}")]
    StudyMismatch { record: String, report: String },
    #[error("abnormality id {0} is not in the lexicon")]
    UnknownId(u8),
    #[error("no report for study {0:?}")]
    MissingReport(String),
    #[error("min_count must be at least 1")]
    BadMinCount,
    #[error("splitting needs at least 10 studies, got {0}")]
    TooFewStudies(usize),
    #[error("asked for {requested} pairs but only {available} exist")]
    SampleTooLarge { requested: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Abnormality,
    Presence,
    View,
    Location,
    Level,
    Type,
}

impl QuestionType {
    pub const ALL: [QuestionType; 6] = [
        QuestionType::Abnormality,
        QuestionType::Presence,
        QuestionType::View,
        QuestionType::Location,
        QuestionType::Level,
        QuestionType::Type,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Abnormality => "abnormality",
            QuestionType::Presence => "presence",
            QuestionType::View => "view",
            QuestionType::Location => "location",
            QuestionType::Level => "level",
            QuestionType::Type => "type",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        QuestionType::ALL.into_iter().find(|q| q.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub study_id: String,
    pub qtype: QuestionType,
    pub question: String,
    pub answers: Vec<String>,
    /// Report spans the answer was read from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<Span>,
}

/// Question templates; `{abnormality}` and `{location}` are substituted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Templates {
    pub abnormalities_seen: String,
    pub abnormalities_in_location: String,
    pub any_abnormality: String,
    pub is_normal: String,
    pub any_evidence_of: String,
    pub is_there: String,
    pub is_there_in_location: String,
    pub which_view: String,
    pub is_pa: String,
    pub is_ap: String,
    pub where_located: String,
    pub where_is: String,
    pub on_the_left: String,
    pub on_the_right: String,
    pub in_location: String,
    pub what_level: String,
    pub what_type: String,
}

impl Default for Templates {
    fn default() -> Self {
        let s = |t: &str| t.to_string();
        Templates {
            abnormalities_seen: s("what abnormalities are seen in the image?"),
            abnormalities_in_location: s("what abnormalities are seen in {location}?"),
            any_abnormality: s("is there any evidence of any abnormalities?"),
            is_normal: s("is this image normal?"),
            any_evidence_of: s("any evidence of {abnormality}?"),
            is_there: s("is there {abnormality}?"),
            is_there_in_location: s("is there {abnormality} in {location}?"),
            which_view: s("which view is this image taken?"),
            is_pa: s("is this PA view?"),
            is_ap: s("is this AP view?"),
            where_located: s("where is the {abnormality} located?"),
            where_is: s("where is the {abnormality}?"),
            on_the_left: s("is the {abnormality} located on the left?"),
            on_the_right: s("is the {abnormality} located on the right?"),
            in_location: s("is the {abnormality} in {location}?"),
            what_level: s("what level is the {abnormality}?"),
            what_type: s("what type is the {abnormality}?"),
        }
    }
}

fn fill(template: &str, abnormality: &str, location: &str) -> String {
    template.replace("{abnormality}", abnormality).replace("{location}", location)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    pub templates: Templates,
    /// Absent-abnormality presence questions per present one.
    pub negative_rate: f64,
    /// Upper bound on absent-abnormality presence questions per study.
    pub negative_cap: usize,
    /// Probability of the secondary phrasing where a family has two.
    pub alt_template_rate: f64,
    /// Ids negatives are drawn from; empty means the whole lexicon.
    pub absent_pool: Vec<u8>,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            templates: Templates::default(),
            negative_rate: 1.0,
            negative_cap: 3,
            alt_template_rate: 0.25,
            absent_pool: Vec::new(),
        }
    }
}

/// Per-abnormality merge of the present findings of one record.
struct Merged {
    id: u8,
    evidence: Vec<Span>,
    roles: [Vec<String>; 4],
}

fn merge_present(record: &KeyInfoRecord) -> Vec<Merged> {
    let mut out: Vec<Merged> = Vec::new();
    for f in record.present() {
        let pos = match out.iter().position(|m| m.id == f.abnormality_id) {
            Some(p) => p,
            None => {
                out.push(Merged { id: f.abnormality_id, evidence: Vec::new(), roles: Default::default() });
                out.len() - 1
            }
        };
        let m = &mut out[pos];
        m.evidence.push(f.evidence);
        for (slot, role) in AttributeRole::ALL.into_iter().enumerate() {
            if let Some(p) = f.attribute(role) {
                if !m.roles[slot].iter().any(|q| q == p) {
                    m.roles[slot].push(p.to_string());
                }
            }
        }
    }
    out
}

const LEVEL: usize = 0;
const PRE: usize = 1;
const POST: usize = 2;
const TYPE: usize = 3;

/// Renders every question the record supports.
///
/// Output order is fixed by the record; only negative presence ids, the
/// alternative phrasings and the wrong-location variants are drawn from the
/// seed (mixed with the study id).
pub fn generate_qa(
    record: &KeyInfoRecord,
    report: &Report,
    lex: &Lexicon,
    cfg: &QaConfig,
    seed: u64,
) -> Result<Vec<QAPair>, QaError> {
    if record.study_id != report.study_id {
        return Err(QaError::StudyMismatch { record: record.study_id.clone(), report: report.study_id.clone() });
    }
    let t = &cfg.templates;
    let mut rng = seeded_rng(derive_seed(seed, &record.study_id));
    let mut out = Vec::new();
    let mut push = |qtype, question: String, answers: Vec<String>, evidence: Vec<Span>| {
        out.push(QAPair { study_id: record.study_id.clone(), qtype, question, answers, evidence });
    };
    let yes_no = |b: bool| alloc::vec![if b { "yes" } else { "no" }.to_string()];
    let name = |id: u8| lex.name(id).ok_or(QaError::UnknownId(id));

    let merged = merge_present(record);
    let all_evidence: Vec<Span> = merged.iter().flat_map(|m| m.evidence.iter().copied()).collect();

    // Abnormality family.
    if !merged.is_empty() {
        let names = merged.iter().map(|m| name(m.id).map(str::to_string)).collect::<Result<Vec<_>, _>>()?;
        push(QuestionType::Abnormality, t.abnormalities_seen.clone(), names, all_evidence.clone());
        let mut locations: Vec<&str> = Vec::new();
        for m in &merged {
            for p in &m.roles[POST] {
                if !locations.contains(&p.as_str()) {
                    locations.push(p);
                }
            }
        }
        for loc in locations {
            let here: Vec<&Merged> = merged.iter().filter(|m| m.roles[POST].iter().any(|p| p == loc)).collect();
            let names = here.iter().map(|m| name(m.id).map(str::to_string)).collect::<Result<Vec<_>, _>>()?;
            let ev = here.iter().flat_map(|m| m.evidence.iter().copied()).collect();
            push(QuestionType::Abnormality, fill(&t.abnormalities_in_location, "", loc), names, ev);
        }
    }
    push(QuestionType::Abnormality, t.is_normal.clone(), yes_no(merged.is_empty()), all_evidence.clone());
    if rng.random_bool(cfg.alt_template_rate) {
        push(QuestionType::Abnormality, t.any_abnormality.clone(), yes_no(!merged.is_empty()), all_evidence);
    }

    // Presence family: positives, then sampled negatives.
    for m in &merged {
        let n = name(m.id)?;
        let template = if rng.random_bool(cfg.alt_template_rate) { &t.any_evidence_of } else { &t.is_there };
        push(QuestionType::Presence, fill(template, n, ""), yes_no(true), m.evidence.clone());
        for loc in &m.roles[POST] {
            push(QuestionType::Presence, fill(&t.is_there_in_location, n, loc), yes_no(true), m.evidence.clone());
        }
    }
    let wanted = ((cfg.negative_rate * merged.len() as f64) as usize).max(1).min(cfg.negative_cap);
    let mut negatives: Vec<(u8, Vec<Span>)> = Vec::new();
    for f in record.findings.iter().filter(|f| !f.present) {
        if negatives.len() < wanted
            && !record.has_present(f.abnormality_id)
            && !negatives.iter().any(|(id, _)| *id == f.abnormality_id)
        {
            negatives.push((f.abnormality_id, alloc::vec![f.evidence]));
        }
    }
    let pool: Vec<u8> = if cfg.absent_pool.is_empty() {
        lex.abnormalities.iter().map(|e| e.id).collect()
    } else {
        cfg.absent_pool.clone()
    };
    let mut candidates: Vec<u8> = pool
        .into_iter()
        .filter(|&id| !record.has_present(id) && !negatives.iter().any(|(n, _)| *n == id))
        .collect();
    while negatives.len() < wanted && !candidates.is_empty() {
        let i = rng.random_range(0..candidates.len());
        negatives.push((candidates.swap_remove(i), Vec::new()));
    }
    for (id, ev) in negatives {
        let template = if rng.random_bool(cfg.alt_template_rate) { &t.any_evidence_of } else { &t.is_there };
        push(QuestionType::Presence, fill(template, name(id)?, ""), yes_no(false), ev);
    }

    // View family.
    if let Some(v) = report.view.answer() {
        push(QuestionType::View, t.which_view.clone(), alloc::vec![v.to_string()], Vec::new());
        if rng.random_bool(0.5) {
            push(QuestionType::View, t.is_pa.clone(), yes_no(report.view == View::Pa), Vec::new());
        } else {
            push(QuestionType::View, t.is_ap.clone(), yes_no(report.view == View::Ap), Vec::new());
        }
    }

    // Location, level and type families.
    let posts = lex.attributes.phrases(AttributeRole::LocationPost);
    for m in &merged {
        let n = name(m.id)?;
        let ev = &m.evidence;
        let mut places: Vec<String> = m.roles[PRE].clone();
        places.extend(m.roles[POST].iter().cloned());
        if !places.is_empty() {
            let template = if rng.random_bool(cfg.alt_template_rate) { &t.where_located } else { &t.where_is };
            push(QuestionType::Location, fill(template, n, ""), places, ev.clone());
        }
        let (mut left, mut right) = (false, false);
        let mut sided = false;
        for p in &m.roles[PRE] {
            match p.as_str() {
                "left" | "left-sided" => (left, sided) = (true, true),
                "right" | "right-sided" => (right, sided) = (true, true),
                "bilateral" => (left, right, sided) = (true, true, true),
                _ => {}
            }
        }
        if sided {
            push(QuestionType::Location, fill(&t.on_the_left, n, ""), yes_no(left), ev.clone());
            push(QuestionType::Location, fill(&t.on_the_right, n, ""), yes_no(right), ev.clone());
        }
        for loc in &m.roles[POST] {
            push(QuestionType::Location, fill(&t.in_location, n, loc), yes_no(true), ev.clone());
            let others: Vec<&String> = posts.iter().filter(|p| !m.roles[POST].contains(p)).collect();
            if let Some(other) = others.choose(&mut rng) {
                push(QuestionType::Location, fill(&t.in_location, n, other), yes_no(false), ev.clone());
            }
        }
        if !m.roles[LEVEL].is_empty() {
            push(QuestionType::Level, fill(&t.what_level, n, ""), m.roles[LEVEL].clone(), ev.clone());
        }
        if !m.roles[TYPE].is_empty() {
            push(QuestionType::Type, fill(&t.what_type, n, ""), m.roles[TYPE].clone(), ev.clone());
        }
    }
    Ok(out)
}

/// Runs [`generate_qa`] over a corpus, pairing records with reports by study id.
pub fn generate_corpus_qa(
    records: &[KeyInfoRecord],
    reports: &[Report],
    lex: &Lexicon,
    cfg: &QaConfig,
    seed: u64,
) -> Result<Vec<QAPair>, QaError> {
    let by_id: BTreeMap<&str, &Report> = reports.iter().map(|r| (r.study_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for rec in records {
        let report = by_id.get(rec.study_id.as_str()).ok_or_else(|| QaError::MissingReport(rec.study_id.clone()))?;
        out.extend(generate_qa(rec, report, lex, cfg, seed)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnswerVocabulary {
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
    index: BTreeMap<String, usize>,
}

impl AnswerVocabulary {
    /// Builds a vocabulary from labels in class order.
    pub fn from_labels(labels: Vec<String>, counts: Vec<usize>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        AnswerVocabulary { labels, counts, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Class indices for a pair's answers, skipping unknown labels.
    pub fn encode(&self, answers: &[String]) -> Vec<usize> {
        answers.iter().filter_map(|a| self.index_of(a)).collect()
    }
}

/// Counts answers (once per pair), keeps those seen at least `min_count`
/// times and drops pairs left without answers.
pub fn build_vocabulary(pairs: &[QAPair], min_count: usize) -> Result<(AnswerVocabulary, Vec<QAPair>), QaError> {
    if min_count == 0 {
        return Err(QaError::BadMinCount);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs {
        let distinct: BTreeSet<&str> = p.answers.iter().map(String::as_str).collect();
        for a in distinct {
            *counts.entry(a).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let vocab = AnswerVocabulary::from_labels(
        kept.iter().map(|(l, _)| l.to_string()).collect(),
        kept.iter().map(|&(_, c)| c).collect(),
    );
    let filtered = pairs
        .iter()
        .filter_map(|p| {
            let answers: Vec<String> = p.answers.iter().filter(|a| vocab.index_of(a).is_some()).cloned().collect();
            (!answers.is_empty()).then(|| QAPair { answers, ..p.clone() })
        })
        .collect();
    Ok((vocab, filtered))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<QAPair>,
    pub val: Vec<QAPair>,
    pub test: Vec<QAPair>,
}

/// Sequential 8:1:1 split by study, in order of first appearance.
pub fn split_dataset(pairs: &[QAPair]) -> Result<DatasetSplit, QaError> {
    let mut order: BTreeMap<&str, usize> = BTreeMap::new();
    for p in pairs {
        let next = order.len();
        order.entry(p.study_id.as_str()).or_insert(next);
    }
    let n = order.len();
    if n < 10 {
        return Err(QaError::TooFewStudies(n));
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut split = DatasetSplit::default();
    for p in pairs {
        let rank = order[p.study_id.as_str()];
        let bucket = if rank < n_train {
            &mut split.train
        } else if rank < n_train + n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        bucket.push(p.clone());
    }
    Ok(split)
}

/// Pair counts per question type; every type is present, possibly as 0.
pub fn dataset_stats(pairs: &[QAPair]) -> BTreeMap<QuestionType, usize> {
    let mut m: BTreeMap<QuestionType, usize> = QuestionType::ALL.into_iter().map(|q| (q, 0)).collect();
    for p in pairs {
        *m.get_mut(&p.qtype).expect("all types seeded") += 1;
    }
    m
}

/// One row of a reviewer sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub study_id: String,
    pub qtype: QuestionType,
    pub question: String,
    pub answers: Vec<String>,
    pub report_text: String,
    /// Report excerpts backing the answer.
    pub evidence: Vec<String>,
    pub evidence_spans: Vec<Span>,
}

/// Uniform sample of `n` pairs without replacement, in input order.
pub fn sample_for_validation(
    pairs: &[QAPair],
    reports: &[Report],
    n: usize,
    seed: u64,
) -> Result<Vec<ValidationRow>, QaError> {
    if n > pairs.len() {
        return Err(QaError::SampleTooLarge { requested: n, available: pairs.len() });
    }
    let by_id: BTreeMap<&str, &Report> = reports.iter().map(|r| (r.study_id.as_str(), r)).collect();
    let mut picked = index::sample(&mut seeded_rng(seed), pairs.len(), n).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let p = &pairs[i];
            let report = by_id.get(p.study_id.as_str()).ok_or_else(|| QaError::MissingReport(p.study_id.clone()))?;
            Ok(ValidationRow {
                study_id: p.study_id.clone(),
                qtype: p.qtype,
                question: p.question.clone(),
                answers: p.answers.clone(),
                report_text: report.text.clone(),
                evidence: p
                    .evidence
                    .iter()
                    .filter(|s| s.end <= report.text.len())
                    .map(|s| s.slice(&report.text).to_string())
                    .collect(),
                evidence_spans: p.evidence.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Finding;
    use alloc::{format, vec};

    fn report(id: &str, view: View) -> Report {
        Report { study_id: id.to_string(), image_ids: vec![], view, text: String::new() }
    }

    fn pair(study: &str, qtype: QuestionType, answers: &[&str]) -> QAPair {
        QAPair {
            study_id: study.to_string(),
            qtype,
            question: "q".to_string(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            evidence: vec![],
        }
    }

    fn find<'a>(pairs: &'a [QAPair], q: &str) -> Option<&'a QAPair> {
        pairs.iter().find(|p| p.question == q)
    }

    #[test]
    fn presence_and_level_from_record() {
        let lex = Lexicon::bundled();
        let mut f = Finding::bare(0, true, Span::new(0, 16));
        f.level = Some("small".to_string());
        let rec = KeyInfoRecord::new("s1", vec![f]);
        let cfg = QaConfig { alt_template_rate: 0.0, ..QaConfig::default() };
        let pairs = generate_qa(&rec, &report("s1", View::Pa), &lex, &cfg, 7).unwrap();
        assert_eq!(find(&pairs, "is there pleural effusion?").unwrap().answers, ["yes"]);
        assert_eq!(find(&pairs, "what level is the pleural effusion?").unwrap().answers, ["small"]);
        assert_eq!(find(&pairs, "is this image normal?").unwrap().answers, ["no"]);
        assert_eq!(find(&pairs, "which view is this image taken?").unwrap().answers, ["pa"]);
    }

    #[test]
    fn empty_record_is_normal() {
        let lex = Lexicon::bundled();
        let rec = KeyInfoRecord::new("s1", vec![]);
        let pairs = generate_qa(&rec, &report("s1", View::Unknown), &lex, &QaConfig::default(), 0).unwrap();
        assert_eq!(find(&pairs, "is this image normal?").unwrap().answers, ["yes"]);
        assert!(pairs.iter().all(|p| p.qtype != QuestionType::View));
        assert!(find(&pairs, "what abnormalities are seen in the image?").is_none());
        let negatives: Vec<_> = pairs.iter().filter(|p| p.qtype == QuestionType::Presence).collect();
        assert_eq!(negatives.len(), 1);
        assert_eq!(negatives[0].answers, ["no"]);
    }

    #[test]
    fn enumeration_follows_report_order() {
        let lex = Lexicon::bundled();
        let rec = KeyInfoRecord::new(
            "s1",
            [2u8, 0, 1, 10].iter().enumerate().map(|(i, &id)| Finding::bare(id, true, Span::new(i * 10, i * 10 + 5))).collect(),
        );
        let pairs = generate_qa(&rec, &report("s1", View::Ap), &lex, &QaConfig::default(), 0).unwrap();
        assert_eq!(
            find(&pairs, "what abnormalities are seen in the image?").unwrap().answers,
            ["cardiomegaly", "pleural effusion", "atelectasis", "lung opacity"]
        );
    }

    #[test]
    fn sides_and_locations() {
        let lex = Lexicon::bundled();
        let mut f = Finding::bare(10, true, Span::new(0, 7));
        f.location_pre = Some("bilateral".to_string());
        f.location_post = Some("the lung bases".to_string());
        let rec = KeyInfoRecord::new("s1", vec![f]);
        let cfg = QaConfig { alt_template_rate: 0.0, ..QaConfig::default() };
        let pairs = generate_qa(&rec, &report("s1", View::Pa), &lex, &cfg, 3).unwrap();
        assert_eq!(find(&pairs, "is the lung opacity located on the left?").unwrap().answers, ["yes"]);
        assert_eq!(find(&pairs, "is the lung opacity located on the right?").unwrap().answers, ["yes"]);
        assert_eq!(find(&pairs, "where is the lung opacity?").unwrap().answers, ["bilateral", "the lung bases"]);
        assert_eq!(find(&pairs, "is the lung opacity in the lung bases?").unwrap().answers, ["yes"]);
        assert_eq!(find(&pairs, "what abnormalities are seen in the lung bases?").unwrap().answers, ["lung opacity"]);
        let wrong: Vec<_> = pairs
            .iter()
            .filter(|p| p.question.starts_with("is the lung opacity in ") && p.answers == ["no"])
            .collect();
        assert_eq!(wrong.len(), 1);
    }

    #[test]
    fn negated_findings_become_negative_questions() {
        let lex = Lexicon::bundled();
        let rec = KeyInfoRecord::new("s1", vec![Finding::bare(2, true, Span::new(0, 5)), Finding::bare(8, false, Span::new(9, 20))]);
        let cfg = QaConfig { alt_template_rate: 0.0, ..QaConfig::default() };
        let pairs = generate_qa(&rec, &report("s1", View::Pa), &lex, &cfg, 0).unwrap();
        let neg: Vec<_> = pairs.iter().filter(|p| p.qtype == QuestionType::Presence && p.answers == ["no"]).collect();
        assert_eq!(neg.len(), 1);
        assert_eq!(neg[0].question, "is there pneumothorax?");
        assert_eq!(neg[0].evidence, [Span::new(9, 20)]);
    }

    #[test]
    fn mismatched_study_is_rejected() {
        let lex = Lexicon::bundled();
        let rec = KeyInfoRecord::new("a", vec![]);
        assert!(matches!(generate_qa(&rec, &report("b", View::Pa), &lex, &QaConfig::default(), 0), Err(QaError::StudyMismatch { .. })));
    }

    #[test]
    fn vocabulary_filters_rare_answers() {
        let mut pairs: Vec<QAPair> = (0..100).map(|i| pair(&format!("s{i}"), QuestionType::Presence, &["yes"])).collect();
        pairs.extend((0..3).map(|i| pair(&format!("t{i}"), QuestionType::Level, &["small"])));
        let (vocab, kept) = build_vocabulary(&pairs, 5).unwrap();
        assert_eq!(vocab.labels, ["yes"]);
        assert_eq!(vocab.counts, [100]);
        assert_eq!(kept.len(), 100);
        let (_, same) = build_vocabulary(&pairs, 1).unwrap();
        assert_eq!(same, pairs);
        assert_eq!(build_vocabulary(&pairs, 0), Err(QaError::BadMinCount));
    }

    #[test]
    fn vocabulary_order_breaks_ties_lexicographically() {
        let pairs = [
            pair("a", QuestionType::Level, &["small", "mild"]),
            pair("b", QuestionType::Level, &["mild"]),
            pair("c", QuestionType::Level, &["small"]),
            pair("d", QuestionType::Type, &["focal"]),
        ];
        let (vocab, _) = build_vocabulary(&pairs, 1).unwrap();
        assert_eq!(vocab.labels, ["mild", "small", "focal"]);
        assert_eq!(vocab.index_of("small"), Some(1));
    }

    #[test]
    fn split_sizes() {
        let make = |n: usize| -> Vec<QAPair> {
            (0..n).flat_map(|i| [pair(&format!("s{i:02}"), QuestionType::View, &["pa"]), pair(&format!("s{i:02}"), QuestionType::Presence, &["no"])]).collect()
        };
        let studies = |v: &[QAPair]| v.iter().map(|p| p.study_id.clone()).collect::<BTreeSet<_>>().len();
        let s = split_dataset(&make(10)).unwrap();
        assert_eq!((studies(&s.train), studies(&s.val), studies(&s.test)), (8, 1, 1));
        let s = split_dataset(&make(25)).unwrap();
        assert_eq!((studies(&s.train), studies(&s.val), studies(&s.test)), (20, 2, 3));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 50);
        assert_eq!(split_dataset(&make(9)), Err(QaError::TooFewStudies(9)));
    }

    #[test]
    fn stats_count_by_type() {
        assert!(dataset_stats(&[]).values().all(|&c| c == 0));
        let pairs = [
            pair("a", QuestionType::Presence, &["yes"]),
            pair("a", QuestionType::Presence, &["no"]),
            pair("b", QuestionType::Presence, &["yes"]),
            pair("b", QuestionType::View, &["pa"]),
        ];
        let s = dataset_stats(&pairs);
        assert_eq!(s[&QuestionType::Presence], 3);
        assert_eq!(s[&QuestionType::View], 1);
        assert_eq!(s[&QuestionType::Level], 0);
        assert_eq!(s.len(), 6);
    }

    #[test]
    fn validation_sample() {
        let pairs: Vec<QAPair> = (0..30).map(|i| pair("s", QuestionType::View, &[if i % 2 == 0 { "pa" } else { "ap" }])).collect();
        let reports = [Report { study_id: "s".to_string(), image_ids: vec![], view: View::Pa, text: "x".to_string() }];
        assert!(sample_for_validation(&pairs, &reports, 0, 1).unwrap().is_empty());
        let a = sample_for_validation(&pairs, &reports, 12, 1).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, sample_for_validation(&pairs, &reports, 12, 1).unwrap());
        assert!(matches!(sample_for_validation(&pairs, &reports, 31, 1), Err(QaError::SampleTooLarge { .. })));
    }
}
