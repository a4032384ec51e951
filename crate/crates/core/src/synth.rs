//! Synthetic reports and ROI fixtures.
//!
//! Reports are rendered from planted KeyInfo records through a small family
//! of sentence templates that the parser is expected to invert exactly.
//! Fixtures place one ROI per anatomy region plus one (or two, for bilateral
//! findings) per present abnormality; ROI features are built from
//! per-concept prototypes so answers are recoverable from the image side.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{BBox, Roi, RoiSet};
use crate::lexicon::{AttributeRole, Lexicon};
use crate::report::{Finding, KeyInfoRecord, Report, View};
use crate::rng::{derive_seed, seeded_rng};
use crate::text::Span;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("abnormality pool is empty")]
    EmptyPool,
    #[error("abnormality id {0} is not in the lexicon")]
    UnknownId(u8),
}

/// Pre-location keywords that only make sense next to another word; the
/// generator never renders them on their own.
const MODIFIER_ONLY_PRE: [&str; 9] = ["lobe", "lung", "area", "pleural", "rib", "upper", "lower", "middle", "mid"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Abnormality ids to sample from; empty means the whole lexicon.
    pub abnormality_pool: Vec<u8>,
    /// Attribute phrase pools; empty means every usable lexicon phrase.
    pub levels: Vec<String>,
    pub locations_pre: Vec<String>,
    pub locations_post: Vec<String>,
    pub types: Vec<String>,
    pub normal_rate: f64,
    pub max_present: usize,
    pub max_negated: usize,
    pub level_rate: f64,
    pub type_rate: f64,
    pub pre_rate: f64,
    pub post_rate: f64,
    pub unknown_view_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            abnormality_pool: Vec::new(),
            levels: Vec::new(),
            locations_pre: Vec::new(),
            locations_post: Vec::new(),
            types: Vec::new(),
            normal_rate: 0.2,
            max_present: 3,
            max_negated: 2,
            level_rate: 0.5,
            type_rate: 0.3,
            pre_rate: 0.5,
            post_rate: 0.35,
            unknown_view_rate: 0.05,
        }
    }
}

impl SynthConfig {
    /// Small closed world used for desk-scale training runs.
    pub fn compact() -> Self {
        let s = |v: &[&str]| v.iter().map(|p| p.to_string()).collect::<Vec<_>>();
        SynthConfig {
            abnormality_pool: vec![0, 1, 2, 4, 8, 10, 11, 26],
            levels: s(&["mild", "moderate", "severe", "small"]),
            locations_pre: s(&["left", "right", "bilateral"]),
            locations_post: s(&["the left lower lobe", "the right lower lobe", "the lung bases", "the right upper lobe"]),
            types: s(&["patchy", "interstitial", "layering", "focal"]),
            unknown_view_rate: 0.0,
            ..SynthConfig::default()
        }
    }
}

struct Pools<'a> {
    ids: Vec<u8>,
    roles: [Vec<&'a str>; 4],
}

impl<'a> Pools<'a> {
    fn new(lex: &'a Lexicon, cfg: &'a SynthConfig) -> Result<Self, SynthError> {
        let ids: Vec<u8> = if cfg.abnormality_pool.is_empty() {
            lex.abnormalities.iter().map(|e| e.id).collect()
        } else {
            cfg.abnormality_pool.clone()
        };
        if ids.is_empty() {
            return Err(SynthError::EmptyPool);
        }
        if let Some(&bad) = ids.iter().find(|&&id| lex.entry(id).is_none()) {
            return Err(SynthError::UnknownId(bad));
        }
        let pick = |role: AttributeRole, chosen: &'a [String]| -> Vec<&'a str> {
            if chosen.is_empty() {
                lex.attributes
                    .phrases(role)
                    .iter()
                    .map(|s| s.as_str())
                    .filter(|p| role != AttributeRole::LocationPre || !MODIFIER_ONLY_PRE.contains(p))
                    .collect()
            } else {
                chosen.iter().map(|s| s.as_str()).collect()
            }
        };
        Ok(Pools {
            ids,
            roles: [
                pick(AttributeRole::Level, &cfg.levels),
                pick(AttributeRole::LocationPre, &cfg.locations_pre),
                pick(AttributeRole::LocationPost, &cfg.locations_post),
                pick(AttributeRole::Type, &cfg.types),
            ],
        })
    }
}

/// Accumulates report text and records where each synonym landed.
struct Writer {
    text: String,
}

impl Writer {
    fn sentence_start(&mut self) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
    }

    fn push(&mut self, s: &str) {
        self.text.push_str(s);
    }

    fn push_capitalized(&mut self, s: &str) {
        let mut chars = s.chars();
        if let Some(c) = chars.next() {
            self.text.push(c.to_ascii_uppercase());
            self.text.push_str(chars.as_str());
        }
    }

    /// Writes the pre-attributes and synonym; returns the synonym span.
    fn phrase(&mut self, f: &Finding, synonym: &str, capitalize: bool) -> Span {
        let mut words: Vec<&str> = Vec::new();
        for p in [&f.level, &f.ab_type, &f.location_pre].into_iter().flatten() {
            words.push(p);
        }
        let mut first = capitalize;
        for w in words {
            if first {
                self.push_capitalized(w);
                first = false;
            } else {
                self.push(w);
            }
            self.push(" ");
        }
        let start = self.text.len();
        if first {
            self.push_capitalized(synonym);
        } else {
            self.push(synonym);
        }
        Span::new(start, self.text.len())
    }

    fn post(&mut self, f: &Finding) {
        if let Some(p) = &f.location_post {
            self.push(" in ");
            self.push(p);
        }
    }
}

const FILLERS: [&str; 4] = [
    "Lungs are clear.",
    "The cardiomediastinal silhouette is within normal limits.",
    "No acute cardiopulmonary process.",
    "Osseous structures are unremarkable.",
];

fn sample_finding(id: u8, present: bool, pools: &Pools<'_>, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Finding {
    let mut f = Finding::bare(id, present, Span::new(0, 0));
    if !present {
        return f;
    }
    let draw = |rate: f64, role: AttributeRole, rng: &mut ChaCha8Rng| -> Option<String> {
        let pool = &pools.roles[role as usize];
        if pool.is_empty() || !rng.random_bool(rate) {
            return None;
        }
        pool.choose(rng).map(|s| s.to_string())
    };
    f.level = draw(cfg.level_rate, AttributeRole::Level, rng);
    f.location_pre = draw(cfg.pre_rate, AttributeRole::LocationPre, rng);
    f.location_post = draw(cfg.post_rate, AttributeRole::LocationPost, rng);
    f.ab_type = draw(cfg.type_rate, AttributeRole::Type, rng);
    f
}

enum Unit {
    Present(usize),
    PresentPair(usize, usize),
    Negated(usize),
    NegatedBut(usize, usize),
    Filler(&'static str),
}

/// Generates `n` synthetic reports with their ground-truth records.
pub fn synth_corpus(
    n: usize,
    seed: u64,
    lex: &Lexicon,
    cfg: &SynthConfig,
) -> Result<Vec<(Report, KeyInfoRecord)>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    let pools = Pools::new(lex, cfg)?;
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let study_id = format!("study{:06}", i + 1);
        out.push(synth_study(study_id, &pools, lex, cfg, &mut rng));
    }
    Ok(out)
}

fn synth_study(
    study_id: String,
    pools: &Pools<'_>,
    lex: &Lexicon,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (Report, KeyInfoRecord) {
    let mut ids = pools.ids.clone();
    ids.shuffle(rng);
    let n_present = if rng.random_bool(cfg.normal_rate) || cfg.max_present == 0 {
        0
    } else {
        rng.random_range(1..=cfg.max_present.min(ids.len()))
    };
    let n_negated = rng.random_range(0..=cfg.max_negated).min(ids.len() - n_present);

    let mut findings: Vec<Finding> = Vec::new();
    for &id in &ids[..n_present] {
        findings.push(sample_finding(id, true, pools, cfg, rng));
    }
    for &id in &ids[n_present..n_present + n_negated] {
        findings.push(sample_finding(id, false, pools, cfg, rng));
    }

    // Group findings into sentence units.
    let mut present: Vec<usize> = (0..n_present).collect();
    let mut negated: Vec<usize> = (n_present..n_present + n_negated).collect();
    let mut units = Vec::new();
    while let Some(a) = present.pop() {
        if let Some(&b) = present.last() {
            if findings[a].location_post.is_none() && rng.random_bool(0.3) {
                present.pop();
                units.push(Unit::PresentPair(a, b));
                continue;
            }
        }
        if let Some(&neg) = negated.last() {
            if rng.random_bool(0.3) {
                negated.pop();
                units.push(Unit::NegatedBut(neg, a));
                continue;
            }
        }
        units.push(Unit::Present(a));
    }
    units.extend(negated.into_iter().map(Unit::Negated));
    if n_present == 0 || rng.random_bool(0.3) {
        units.push(Unit::Filler(FILLERS.choose(rng).copied().unwrap_or(FILLERS[0])));
    }
    units.shuffle(rng);

    let synonym = |id: u8, rng: &mut ChaCha8Rng| -> String {
        let syns = &lex.entry(id).expect("pool ids validated").synonyms;
        syns.choose(rng).cloned().unwrap_or_default()
    };

    let mut w = Writer { text: String::new() };
    for unit in units {
        w.sentence_start();
        match unit {
            Unit::Filler(s) => w.push(s),
            Unit::Present(a) => {
                let syn = synonym(findings[a].abnormality_id, rng);
                match rng.random_range(0..3) {
                    0 => {
                        w.push("There is ");
                        findings[a].evidence = w.phrase(&findings[a], &syn, false);
                        w.post(&findings[a]);
                    }
                    1 => {
                        findings[a].evidence = w.phrase(&findings[a], &syn, true);
                        w.post(&findings[a]);
                    }
                    _ => {
                        findings[a].evidence = w.phrase(&findings[a], &syn, true);
                        w.push(" is seen");
                        w.post(&findings[a]);
                    }
                }
                w.push(".");
            }
            Unit::PresentPair(a, b) => {
                let syn_a = synonym(findings[a].abnormality_id, rng);
                let syn_b = synonym(findings[b].abnormality_id, rng);
                findings[a].evidence = w.phrase(&findings[a], &syn_a, true);
                w.push(" and ");
                findings[b].evidence = w.phrase(&findings[b], &syn_b, false);
                w.post(&findings[b]);
                w.push(".");
            }
            Unit::Negated(a) => {
                let syn = synonym(findings[a].abnormality_id, rng);
                w.push(["No ", "There is no ", "No evidence of "][rng.random_range(0..3)]);
                findings[a].evidence = w.phrase(&findings[a], &syn, false);
                w.push(".");
            }
            Unit::NegatedBut(neg, a) => {
                let syn_n = synonym(findings[neg].abnormality_id, rng);
                let syn_a = synonym(findings[a].abnormality_id, rng);
                w.push("No ");
                findings[neg].evidence = w.phrase(&findings[neg], &syn_n, false);
                w.push(", but ");
                findings[a].evidence = w.phrase(&findings[a], &syn_a, false);
                w.post(&findings[a]);
                w.push(".");
            }
        }
    }

    let view = if rng.random_bool(cfg.unknown_view_rate) {
        View::Unknown
    } else if rng.random_bool(0.5) {
        View::Pa
    } else {
        View::Ap
    };
    let report = Report {
        image_ids: vec![format!("{study_id}-0")],
        study_id: study_id.clone(),
        view,
        text: w.text,
    };
    (report, KeyInfoRecord::new(study_id, findings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    /// Visual feature width.
    pub d_o: usize,
    /// Seed of the concept prototypes (shared by every study).
    pub prototype_seed: u64,
    pub attribute_weight: f64,
    pub noise: f64,
    pub jitter: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig { d_o: 64, prototype_seed: 17, attribute_weight: 0.3, noise: 0.1, jitter: 0.02 }
    }
}

/// Anatomy regions every synthetic image carries, with their base boxes.
pub const ANATOMY_LAYOUT: [(&str, [f64; 4]); 4] = [
    ("right lung", [0.08, 0.12, 0.36, 0.66]),
    ("left lung", [0.56, 0.12, 0.36, 0.66]),
    ("heart", [0.42, 0.46, 0.26, 0.28]),
    ("mediastinum", [0.42, 0.08, 0.16, 0.38]),
];

const CARDIAC_IDS: [u8; 4] = [2, 3, 9, 16];
const MEDIASTINAL_IDS: [u8; 8] = [5, 7, 12, 14, 18, 24, 28, 29];

fn prototype(cfg: &FixtureConfig, key: &str) -> Vec<f64> {
    let mut rng = seeded_rng(derive_seed(cfg.prototype_seed, key));
    (0..cfg.d_o).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn clamp_box(x: f64, y: f64, w: f64, h: f64) -> BBox {
    let w = w.clamp(0.02, 0.98);
    let h = h.clamp(0.02, 0.98);
    BBox { x: x.clamp(0.0, 1.0 - w), y: y.clamp(0.0, 1.0 - h), w, h }
}

/// ROI fixture for one study; deterministic in (record, view, seed).
pub fn synth_roiset(record: &KeyInfoRecord, view: View, lex: &Lexicon, cfg: &FixtureConfig, seed: u64) -> RoiSet {
    let mut rng = seeded_rng(derive_seed(seed, &record.study_id));
    let jit = |rng: &mut ChaCha8Rng| rng.random_range(-cfg.jitter..=cfg.jitter);
    let noise = |rng: &mut ChaCha8Rng, v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x += cfg.noise * rng.random_range(-1.0..1.0);
        }
    };
    let mut rois = Vec::new();
    let mut layout = ANATOMY_LAYOUT;
    if view == View::Ap {
        // Projection magnifies the heart on AP films.
        layout[2].1 = [0.38, 0.44, 0.34, 0.31];
    }
    for (name, [x, y, w, h]) in layout {
        let bbox = clamp_box(x + jit(&mut rng), y + jit(&mut rng), w + jit(&mut rng), h + jit(&mut rng));
        let mut feature = prototype(cfg, &format!("class:{name}"));
        if name == "heart" {
            if let Some(v) = view.answer() {
                add_scaled(&mut feature, &prototype(cfg, &format!("view:{v}")), cfg.attribute_weight);
            }
        }
        noise(&mut rng, &mut feature);
        rois.push(Roi { bbox, class_name: name.to_string(), feature });
    }

    for f in record.present() {
        let Some(name) = lex.name(f.abnormality_id) else { continue };
        let mut feature = prototype(cfg, &format!("class:{name}"));
        for role in AttributeRole::ALL {
            if let Some(p) = f.attribute(role) {
                add_scaled(&mut feature, &prototype(cfg, &format!("{role}:{p}")), cfg.attribute_weight);
            }
        }
        let scale = match f.level.as_deref() {
            Some(l) if l.contains("severe") || l.contains("large") => 1.4,
            Some(l) if l.contains("mild") || l.contains("small") || l.contains("minimal") => 0.7,
            _ => 1.0,
        };
        let post = f.location_post.as_deref().unwrap_or("");
        let y_centre = if post.contains("upper") || post.contains("apical") {
            0.28
        } else if post.contains("lower") || post.contains("base") {
            0.62
        } else {
            0.45
        };
        let mut boxes = Vec::new();
        if CARDIAC_IDS.contains(&f.abnormality_id) {
            let heart = rois[2].bbox;
            boxes.push(clamp_box(heart.x - 0.03, heart.y - 0.03, heart.w + 0.06, heart.h + 0.06));
        } else if MEDIASTINAL_IDS.contains(&f.abnormality_id) {
            boxes.push(clamp_box(0.43 + jit(&mut rng), 0.2 + jit(&mut rng), 0.14 * scale, 0.14 * scale));
        } else {
            let pre = f.location_pre.as_deref().unwrap_or("");
            let sides: Vec<f64> = if pre.starts_with("left") {
                vec![0.74]
            } else if pre.starts_with("right") {
                vec![0.26]
            } else if pre == "bilateral" || pre == "bibasilar" {
                vec![0.26, 0.74]
            } else if rng.random_bool(0.5) {
                vec![0.26]
            } else {
                vec![0.74]
            };
            for cx in sides {
                let (w, h) = (0.16 * scale, 0.14 * scale);
                boxes.push(clamp_box(cx - w / 2.0 + jit(&mut rng), y_centre - h / 2.0 + jit(&mut rng), w, h));
            }
        }
        for bbox in boxes {
            let mut feat = feature.clone();
            noise(&mut rng, &mut feat);
            rois.push(Roi { bbox, class_name: name.to_string(), feature: feat });
        }
    }

    RoiSet {
        image_id: format!("{}-0", record.study_id),
        study_id: record.study_id.clone(),
        rois,
    }
}
