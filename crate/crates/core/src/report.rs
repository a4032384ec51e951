//! Rule-based KeyInfo extraction: abnormality mentions, negation and
//! attribute binding, plus the per-report scene graph.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{AttributeRole, Lexicon};
use crate::text::{self, PhraseMatcher, Span};

pub use crate::synth::{synth_corpus, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "unknown")]
    Unknown,
}

impl View {
    /// Answer label used for view questions.
    pub fn answer(self) -> Option<&'static str> {
        match self {
            View::Pa => Some("pa"),
            View::Ap => Some("ap"),
            View::Unknown => None,
        }
    }
}

/// One study: one report, one or more images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub study_id: String,
    pub image_ids: Vec<String>,
    pub view: View,
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportError {
    #[error("study id is empty")]
    EmptyStudyId,
    #[error("study {0} has no images")]
    NoImages(String),
    #[error("study {0} has an empty report")]
    EmptyText(String),
}

impl Report {
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.study_id.is_empty() {
            return Err(ReportError::EmptyStudyId);
        }
        if self.image_ids.is_empty() {
            return Err(ReportError::NoImages(self.study_id.clone()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub abnormality_id: u8,
    pub present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_pre: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location_post: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ab_type: Option<String>,
    /// Byte range of the abnormality mention in the report text.
    pub evidence: Span,
}

impl Finding {
    pub fn bare(abnormality_id: u8, present: bool, evidence: Span) -> Self {
        Finding {
            abnormality_id,
            present,
            level: None,
            location_pre: None,
            location_post: None,
            ab_type: None,
            evidence,
        }
    }

    pub fn attribute(&self, role: AttributeRole) -> Option<&str> {
        match role {
            AttributeRole::Level => self.level.as_deref(),
            AttributeRole::LocationPre => self.location_pre.as_deref(),
            AttributeRole::LocationPost => self.location_post.as_deref(),
            AttributeRole::Type => self.ab_type.as_deref(),
        }
    }

    fn attribute_mut(&mut self, role: AttributeRole) -> &mut Option<String> {
        match role {
            AttributeRole::Level => &mut self.level,
            AttributeRole::LocationPre => &mut self.location_pre,
            AttributeRole::LocationPost => &mut self.location_post,
            AttributeRole::Type => &mut self.ab_type,
        }
    }
}

/// Structured content of one report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyInfoRecord {
    pub study_id: String,
    pub findings: Vec<Finding>,
    pub is_normal: bool,
}

impl KeyInfoRecord {
    /// Builds a record, deriving `is_normal` and sorting by evidence offset.
    pub fn new(study_id: impl Into<String>, mut findings: Vec<Finding>) -> Self {
        findings.sort_by_key(|f| f.evidence.start);
        let is_normal = !findings.iter().any(|f| f.present);
        KeyInfoRecord { study_id: study_id.into(), findings, is_normal }
    }

    pub fn present(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.present)
    }

    pub fn present_ids(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.present().map(|f| f.abnormality_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn has_present(&self, id: u8) -> bool {
        self.present().any(|f| f.abnormality_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParserConfig {
    pub negation_cues: Vec<String>,
    pub scope_breaks: Vec<String>,
    pub window_tokens: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        let cues = ["no", "without", "free of", "clear of", "resolved", "rule out", "negative for"];
        ParserConfig {
            negation_cues: cues.iter().map(|s| s.to_string()).collect(),
            scope_breaks: ["but", ";"].iter().map(|s| s.to_string()).collect(),
            window_tokens: 6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundAttributes {
    pub level: Option<String>,
    pub location_pre: Option<String>,
    pub location_post: Option<String>,
    pub ab_type: Option<String>,
}

/// Compiled parser: the lexicon plus cue matchers built once.
pub struct ReportParser<'a> {
    lex: &'a Lexicon,
    window: usize,
    cues: PhraseMatcher,
    breaks: PhraseMatcher,
}

impl<'a> ReportParser<'a> {
    pub fn new(lex: &'a Lexicon, cfg: &ParserConfig) -> Self {
        let lower = |v: &[String]| -> Vec<(String, usize)> {
            v.iter().enumerate().map(|(i, s)| (text::normalize_phrase(s).to_lowercase(), i)).collect()
        };
        ReportParser {
            lex,
            window: cfg.window_tokens,
            cues: PhraseMatcher::new(lower(&cfg.negation_cues)),
            breaks: PhraseMatcher::new(lower(&cfg.scope_breaks)),
        }
    }

    pub fn extract(&self, report: &Report) -> KeyInfoRecord {
        let text = report.text.to_ascii_lowercase();
        let mut findings = Vec::new();
        for sent in text::sentences(&text) {
            findings.extend(self.sentence_findings(sent.slice(&text), sent.start));
        }
        KeyInfoRecord::new(report.study_id.clone(), findings)
    }

    /// `false` when a negation cue precedes `span` in the sentence with no
    /// scope break in between.
    pub fn is_present(&self, sentence: &str, span: Span) -> bool {
        let head = &sentence[..span.start];
        let last_break = self.breaks.find_all(head, &[]).last().map(|(s, _)| s.end).unwrap_or(0);
        !self.cues.find_all(head, &[]).iter().any(|(s, _)| s.start >= last_break)
    }

    fn sentence_findings(&self, sentence: &str, offset: usize) -> Vec<Finding> {
        let mut mentions: Vec<(Span, u8)> = Vec::new();
        for m in self.lex.match_abnormalities(sentence) {
            if !mentions.iter().any(|&(_, id)| id == m.id) {
                mentions.push((m.span, m.id));
            }
        }
        if mentions.is_empty() {
            return Vec::new();
        }
        let spans: Vec<Span> = mentions.iter().map(|m| m.0).collect();
        let bound = self.bind_all(sentence, &spans);
        mentions
            .iter()
            .zip(bound)
            .map(|(&(span, id), attrs)| {
                let mut f = Finding::bare(id, self.is_present(sentence, span), span.shift(offset));
                f.level = attrs.level;
                f.location_pre = attrs.location_pre;
                f.location_post = attrs.location_post;
                f.ab_type = attrs.ab_type;
                f
            })
            .collect()
    }

    /// Binds attribute keywords to the abnormality mentions of one sentence.
    ///
    /// Level, type and pre-location keywords bind forward to a mention that
    /// starts within `window` tokens after them; post-locations bind backward.
    /// Each keyword goes to its nearest eligible mention (ties to the earlier
    /// mention) and each mention keeps its nearest keyword per role.
    pub fn bind_all(&self, sentence: &str, mentions: &[Span]) -> Vec<BoundAttributes> {
        let tokens = text::word_tokens(sentence);
        let tok_range = |s: Span| -> Option<(usize, usize)> {
            let first = tokens.iter().position(|t| t.end > s.start)?;
            let last = tokens.iter().rposition(|t| t.start < s.end)?;
            (first <= last).then_some((first, last))
        };
        let mention_toks: Vec<Option<(usize, usize)>> = mentions.iter().map(|&s| tok_range(s)).collect();

        // Per mention, per role: (distance, phrase).
        let mut best: Vec<[Option<(usize, &str)>; 4]> = alloc::vec![[None; 4]; mentions.len()];
        for attr in self.lex.match_all_attributes(sentence, mentions) {
            let Some((a_first, a_last)) = tok_range(attr.span) else { continue };
            let mut chosen: Option<(usize, usize)> = None;
            for (mi, mt) in mention_toks.iter().enumerate() {
                let Some((m_first, m_last)) = *mt else { continue };
                let dist = if attr.role == AttributeRole::LocationPost {
                    if a_first <= m_last {
                        continue;
                    }
                    a_first - m_last
                } else {
                    if a_last >= m_first {
                        continue;
                    }
                    m_first - a_last
                };
                if dist > self.window {
                    continue;
                }
                if chosen.is_none_or(|(d, _)| dist < d) {
                    chosen = Some((dist, mi));
                }
            }
            if let Some((dist, mi)) = chosen {
                let slot = &mut best[mi][attr.role as usize];
                if slot.is_none_or(|(d, _)| dist < d) {
                    *slot = Some((dist, attr.phrase));
                }
            }
        }
        best.into_iter()
            .map(|slots| {
                let get = |r: AttributeRole| slots[r as usize].map(|(_, p)| p.to_string());
                BoundAttributes {
                    level: get(AttributeRole::Level),
                    location_pre: get(AttributeRole::LocationPre),
                    location_post: get(AttributeRole::LocationPost),
                    ab_type: get(AttributeRole::Type),
                }
            })
            .collect()
    }
}

/// Extracts the KeyInfo record of one report.
pub fn extract_keyinfo(report: &Report, lex: &Lexicon, cfg: &ParserConfig) -> KeyInfoRecord {
    ReportParser::new(lex, cfg).extract(report)
}

/// Presence of the mention at `span` (relative to `sentence`).
pub fn detect_negation(sentence: &str, span: Span, lex: &Lexicon, cfg: &ParserConfig) -> bool {
    ReportParser::new(lex, cfg).is_present(sentence, span)
}

/// Attributes bound to the mention at `ab_span`, taking the other mentions
/// of the sentence into account.
pub fn bind_attributes(sentence: &str, ab_span: Span, lex: &Lexicon, cfg: &ParserConfig) -> BoundAttributes {
    let parser = ReportParser::new(lex, cfg);
    let mut spans: Vec<Span> = lex.match_abnormalities(sentence).iter().map(|m| m.span).collect();
    let idx = match spans.iter().position(|s| *s == ab_span) {
        Some(i) => i,
        None => {
            spans.retain(|s| !s.overlaps(&ab_span));
            spans.push(ab_span);
            spans.sort();
            spans.iter().position(|s| *s == ab_span).unwrap_or(0)
        }
    };
    parser.bind_all(sentence, &spans).swap_remove(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationPosition {
    Pre,
    Post,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneNode {
    Abnormality { abnormality_id: u8, present: bool, evidence: Span },
    Level { phrase: String },
    Location { phrase: String, position: LocationPosition },
    Type { phrase: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    HasLevel,
    HasLocation,
    HasType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
}

/// Typed nodes and relations of one report; attribute nodes are owned by a
/// single finding so the graph converts back to the finding list exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub study_id: String,
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SceneGraphError {
    #[error("edge {0} points outside the node list")]
    DanglingEdge(usize),
    #[error("edge {0} does not go from an abnormality to a matching attribute node")]
    IllTyped(usize),
    #[error("abnormality node {0} has two values for one attribute")]
    Conflict(usize),
}

pub fn build_scene_graph(record: &KeyInfoRecord) -> SceneGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for f in &record.findings {
        let subject = nodes.len();
        nodes.push(SceneNode::Abnormality {
            abnormality_id: f.abnormality_id,
            present: f.present,
            evidence: f.evidence,
        });
        let mut attach = |node: SceneNode, relation: Relation, nodes: &mut Vec<SceneNode>| {
            edges.push(SceneEdge { subject, relation, object: nodes.len() });
            nodes.push(node);
        };
        if let Some(p) = &f.level {
            attach(SceneNode::Level { phrase: p.clone() }, Relation::HasLevel, &mut nodes);
        }
        if let Some(p) = &f.location_pre {
            let n = SceneNode::Location { phrase: p.clone(), position: LocationPosition::Pre };
            attach(n, Relation::HasLocation, &mut nodes);
        }
        if let Some(p) = &f.location_post {
            let n = SceneNode::Location { phrase: p.clone(), position: LocationPosition::Post };
            attach(n, Relation::HasLocation, &mut nodes);
        }
        if let Some(p) = &f.ab_type {
            attach(SceneNode::Type { phrase: p.clone() }, Relation::HasType, &mut nodes);
        }
    }
    SceneGraph { study_id: record.study_id.clone(), nodes, edges }
}

impl SceneGraph {
    /// Inverse of [`build_scene_graph`].
    pub fn to_record(&self) -> Result<KeyInfoRecord, SceneGraphError> {
        let mut findings: Vec<(usize, Finding)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let SceneNode::Abnormality { abnormality_id, present, evidence } = node {
                findings.push((i, Finding::bare(*abnormality_id, *present, *evidence)));
            }
        }
        for (ei, e) in self.edges.iter().enumerate() {
            let (Some(subject), Some(object)) = (self.nodes.get(e.subject), self.nodes.get(e.object)) else {
                return Err(SceneGraphError::DanglingEdge(ei));
            };
            if !matches!(subject, SceneNode::Abnormality { .. }) {
                return Err(SceneGraphError::IllTyped(ei));
            }
            let (role, phrase) = match (e.relation, object) {
                (Relation::HasLevel, SceneNode::Level { phrase }) => (AttributeRole::Level, phrase),
                (Relation::HasType, SceneNode::Type { phrase }) => (AttributeRole::Type, phrase),
                (Relation::HasLocation, SceneNode::Location { phrase, position }) => match position {
                    LocationPosition::Pre => (AttributeRole::LocationPre, phrase),
                    LocationPosition::Post => (AttributeRole::LocationPost, phrase),
                },
                _ => return Err(SceneGraphError::IllTyped(ei)),
            };
            let finding = &mut findings
                .iter_mut()
                .find(|(i, _)| *i == e.subject)
                .ok_or(SceneGraphError::IllTyped(ei))?
                .1;
            let slot = finding.attribute_mut(role);
            if slot.is_some() {
                return Err(SceneGraphError::Conflict(e.subject));
            }
            *slot = Some(phrase.clone());
        }
        Ok(KeyInfoRecord::new(self.study_id.clone(), findings.into_iter().map(|(_, f)| f).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn report(text: &str) -> Report {
        Report { study_id: "s1".into(), image_ids: vec!["i1".into()], view: View::Pa, text: text.into() }
    }

    fn parse(text: &str) -> KeyInfoRecord {
        extract_keyinfo(&report(text), &Lexicon::bundled(), &ParserConfig::default())
    }

    #[test]
    fn effusion_and_negated_pneumothorax() {
        let rec = parse("There is a small left pleural effusion. No pneumothorax.");
        assert_eq!(rec.findings.len(), 2);
        let f0 = &rec.findings[0];
        assert_eq!((f0.abnormality_id, f0.present), (0, true));
        assert_eq!(f0.level.as_deref(), Some("small"));
        assert_eq!(f0.location_pre.as_deref(), Some("left"));
        assert_eq!(f0.location_post, None);
        assert_eq!(f0.ab_type, None);
        let f1 = &rec.findings[1];
        assert_eq!((f1.abnormality_id, f1.present), (8, false));
        assert!(!rec.is_normal);
    }

    #[test]
    fn clear_lungs_are_normal() {
        let rec = parse("Lungs are clear.");
        assert!(rec.findings.is_empty());
        assert!(rec.is_normal);
    }

    #[test]
    fn each_abnormality_binds_nearest_preceding_level() {
        let rec = parse("Moderate pulmonary edema and moderate cardiomegaly.");
        let got: Vec<(u8, bool, Option<&str>)> =
            rec.findings.iter().map(|f| (f.abnormality_id, f.present, f.level.as_deref())).collect();
        assert_eq!(got, vec![(4, true, Some("moderate")), (2, true, Some("moderate"))]);
    }

    #[test]
    fn negation_rules() {
        let lex = Lexicon::bundled();
        let cfg = ParserConfig::default();
        let s = "no pleural effusion";
        assert!(!detect_negation(s, Span::new(3, 19), &lex, &cfg));
        let s = "pleural effusion is present";
        assert!(detect_negation(s, Span::new(0, 16), &lex, &cfg));
        let s = "no pneumothorax, but small effusion";
        assert!(detect_negation(s, Span::new(27, 35), &lex, &cfg));
        // Cue matching respects word boundaries.
        let s = "normal heart, effusion";
        assert!(detect_negation(s, Span::new(14, 22), &lex, &cfg));
    }

    #[test]
    fn binding_rules() {
        let lex = Lexicon::bundled();
        let cfg = ParserConfig::default();
        let s = "small left pleural effusion";
        let b = bind_attributes(s, Span::new(11, 27), &lex, &cfg);
        assert_eq!(b.level.as_deref(), Some("small"));
        assert_eq!(b.location_pre.as_deref(), Some("left"));
        let s = "atelectasis in the left lower lobe";
        let b = bind_attributes(s, Span::new(0, 11), &lex, &cfg);
        assert_eq!(b.location_post.as_deref(), Some("the left lower lobe"));
        assert_eq!(b.location_pre, None);
        let b = bind_attributes("pleural effusion", Span::new(0, 16), &lex, &cfg);
        assert_eq!(b, BoundAttributes::default());
    }

    #[test]
    fn window_limits_binding() {
        let lex = Lexicon::bundled();
        let cfg = ParserConfig { window_tokens: 2, ..ParserConfig::default() };
        let s = "small and very much unrelated words effusion";
        let span = lex.match_abnormalities(s)[0].span;
        assert_eq!(bind_attributes(s, span, &lex, &cfg).level, None);
    }

    #[test]
    fn keyword_goes_to_nearest_mention_only() {
        let rec = parse("Small effusion and atelectasis.");
        assert_eq!(rec.findings[0].level.as_deref(), Some("small"));
        assert_eq!(rec.findings[1].level, None);
    }

    #[test]
    fn one_finding_per_id_per_sentence() {
        let rec = parse("Effusion and more effusion. Effusion again.");
        assert_eq!(rec.findings.len(), 2);
    }

    #[test]
    fn scene_graph_mapping() {
        let mut f = Finding::bare(0, true, Span::new(0, 8));
        f.level = Some("small".into());
        let rec = KeyInfoRecord::new("s", vec![f]);
        let g = build_scene_graph(&rec);
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges, vec![SceneEdge { subject: 0, relation: Relation::HasLevel, object: 1 }]);
        assert_eq!(g.to_record().unwrap(), rec);

        let empty = KeyInfoRecord::new("s", vec![]);
        let g = build_scene_graph(&empty);
        assert!(g.nodes.is_empty() && g.edges.is_empty());
        assert_eq!(g.to_record().unwrap(), empty);
    }

    #[test]
    fn scene_graph_does_not_share_attribute_nodes() {
        let mut a = Finding::bare(0, true, Span::new(0, 8));
        a.location_pre = Some("left".into());
        let mut b = Finding::bare(1, true, Span::new(10, 20));
        b.location_pre = Some("left".into());
        let rec = KeyInfoRecord::new("s", vec![a, b]);
        let g = build_scene_graph(&rec);
        let locs = g.nodes.iter().filter(|n| matches!(n, SceneNode::Location { .. })).count();
        assert_eq!(locs, 2);
        assert_eq!(g.to_record().unwrap(), rec);
    }

    #[test]
    fn scene_graph_rejects_bad_edges() {
        let g = SceneGraph {
            study_id: "s".into(),
            nodes: vec![SceneNode::Level { phrase: "small".into() }],
            edges: vec![SceneEdge { subject: 0, relation: Relation::HasLevel, object: 3 }],
        };
        assert_eq!(g.to_record(), Err(SceneGraphError::DanglingEdge(0)));
    }
}
