//! Anatomical and co-occurrence knowledge graphs.
//!
//! File format (UTF-8, `#` comments):
//!
//! ```text
//! node NAME KIND [ABNORMALITY_ID]
//! NAME_A -- NAME_B [LABEL] [WEIGHT]
//! ```
//!
//! Names may contain spaces. `KIND` is `anatomy` or `disease`; labels are 1
//! (anatomical, the default) or 2 (co-occurrence); weights default to 1.0.

use alloc::collections::{BTreeMap, BTreeSet};

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::Lexicon;
use crate::math;
use crate::report::KeyInfoRecord;

pub const BUNDLED_ANATOMICAL_KG: &str = include_str!("../data/anatomical_kg.txt");

/// Default co-occurrence threshold.
pub const DEFAULT_COOCCURRENCE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KgError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown node kind {kind:?}")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: edge endpoint {name:?} was never declared")]
    DanglingEndpoint { line: usize, name: String },
    #[error("node {0:?} declared twice")]
    DuplicateNode(String),
    #[error("node {name:?} is {a:?} in one graph and {b:?} in the other")]
    ConflictingKind { name: String, a: NodeKind, b: NodeKind },
    #[error("disease node {name:?} maps to abnormality id {id}, which the lexicon lacks")]
    UnknownAbnormality { name: String, id: u8 },
    #[error("co-occurrence corpus is empty")]
    EmptyCorpus,
    #[error("threshold {0} is outside [0, 1)")]
    BadThreshold(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Anatomy,
    Disease,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "anatomy" => Some(NodeKind::Anatomy),
            "disease" => Some(NodeKind::Disease),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            NodeKind::Anatomy => "anatomy",
            NodeKind::Disease => "disease",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum EdgeLabel {
    Anatomical = 1,
    CoOccurrence = 2,
}

impl EdgeLabel {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(EdgeLabel::Anatomical),
            2 => Some(EdgeLabel::CoOccurrence),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub name: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abnormality_id: Option<u8>,
}

/// Undirected edge, stored once with `a < b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub a: usize,
    pub b: usize,
    pub label: EdgeLabel,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<KgNode>,
    pub edges: Vec<KgEdge>,
}

impl KnowledgeGraph {
    pub fn bundled_anatomical() -> KnowledgeGraph {
        KnowledgeGraph::parse(BUNDLED_ANATOMICAL_KG).expect("bundled anatomical graph is valid")
    }

    pub fn parse(src: &str) -> Result<KnowledgeGraph, KgError> {
        let mut g = KnowledgeGraph::default();
        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("node ") {
                let mut words: Vec<&str> = rest.split_whitespace().collect();
                let id = match words.last().and_then(|w| w.parse::<u8>().ok()) {
                    Some(id) => {
                        words.pop();
                        Some(id)
                    }
                    None => None,
                };
                let kind_word = words.pop().ok_or_else(|| KgError::Parse {
                    line: line_no,
                    message: "node declaration needs a name and a kind".to_string(),
                })?;
                let kind = NodeKind::parse(kind_word)
                    .ok_or_else(|| KgError::UnknownKind { line: line_no, kind: kind_word.to_string() })?;
                if words.is_empty() {
                    return Err(KgError::Parse { line: line_no, message: "node name is empty".to_string() });
                }
                g.add_node(KgNode { name: words.join(" "), kind, abnormality_id: id })?;
            } else if let Some((lhs, rhs)) = line.split_once(" -- ") {
                let mut words: Vec<&str> = rhs.split_whitespace().collect();
                let mut numbers: Vec<&str> = Vec::new();
                while numbers.len() < 2 && words.last().is_some_and(|w| w.parse::<f64>().is_ok()) {
                    numbers.insert(0, words.pop().unwrap());
                }
                let bad = |message: &str| KgError::Parse { line: line_no, message: message.to_string() };
                let label = match numbers.first() {
                    Some(s) => s.parse::<u8>().ok().and_then(EdgeLabel::from_u8).ok_or_else(|| bad("label must be 1 or 2"))?,
                    None => EdgeLabel::Anatomical,
                };
                let weight = match numbers.get(1) {
                    Some(s) => s.parse::<f64>().map_err(|_| bad("bad weight"))?,
                    None => 1.0,
                };
                if !(0.0..=1.0).contains(&weight) {
                    return Err(bad("weight must lie in [0, 1]"));
                }
                let lookup = |name: &str| {
                    g.node_index(name)
                        .ok_or_else(|| KgError::DanglingEndpoint { line: line_no, name: name.to_string() })
                };
                let a = lookup(&lhs.split_whitespace().collect::<Vec<_>>().join(" "))?;
                let b = lookup(&words.join(" "))?;
                if a == b {
                    return Err(bad("self loops are not allowed"));
                }
                g.add_edge(a, b, label, weight);
            } else {
                return Err(KgError::Parse {
                    line: line_no,
                    message: "expected `node ...` or `a -- b`".to_string(),
                });
            }
        }
        Ok(g)
    }

    /// Text form accepted by [`KnowledgeGraph::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = write!(out, "node {} {}", n.name, n.kind.as_str());
            if let Some(id) = n.abnormality_id {
                let _ = write!(out, " {id}");
            }
            out.push('\n');
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "{} -- {} {} {}",
                self.nodes[e.a].name, self.nodes[e.b].name, e.label as u8, e.weight
            );
        }
        out
    }

    fn add_node(&mut self, node: KgNode) -> Result<usize, KgError> {
        if self.node_index(&node.name).is_some() {
            return Err(KgError::DuplicateNode(node.name));
        }
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }

    fn add_edge(&mut self, a: usize, b: usize, label: EdgeLabel, weight: f64) {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        if !self.edges.iter().any(|e| e.a == a && e.b == b && e.label == label) {
            self.edges.push(KgEdge { a, b, label, weight });
        }
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn has_edge(&self, i: usize, j: usize, label: EdgeLabel) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.edges.iter().any(|e| e.a == a && e.b == b && e.label == label)
    }

    /// Directed view: every edge in both directions.
    pub fn adjacency(&self) -> Vec<(usize, usize, EdgeLabel, f64)> {
        self.edges
            .iter()
            .flat_map(|e| [(e.a, e.b, e.label, e.weight), (e.b, e.a, e.label, e.weight)])
            .collect()
    }

    pub fn edge_count(&self, label: EdgeLabel) -> usize {
        self.edges.iter().filter(|e| e.label == label).count()
    }

    /// Checks disease ids against the lexicon.
    pub fn validate_against(&self, lex: &Lexicon) -> Result<(), KgError> {
        for n in &self.nodes {
            if let Some(id) = n.abnormality_id {
                if lex.entry(id).is_none() {
                    return Err(KgError::UnknownAbnormality { name: n.name.clone(), id });
                }
            }
        }
        Ok(())
    }
}

/// How pair counts are turned into co-occurrence strengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `count(i, j) / studies`.
    #[default]
    Joint,
    /// `count(i, j) / min(count(i), count(j))`.
    Conditional,
    /// `count(i, j) / sqrt(count(i) * count(j))`.
    GeometricMean,
}

/// Counts of present abnormalities and abnormality pairs over a corpus,
/// via per-id study bitsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    pub studies: usize,
    pub single: Vec<u64>,
    /// Row-major `k × k`, symmetric, zero diagonal.
    pub pair: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn from_corpus(corpus: &[KeyInfoRecord], k: usize) -> Self {
        let words = corpus.len().div_ceil(64);
        let mut columns = vec![vec![0u64; words]; k];
        for (s, rec) in corpus.iter().enumerate() {
            for f in rec.present() {
                let id = f.abnormality_id as usize;
                if id < k {
                    columns[id][s / 64] |= 1 << (s % 64);
                }
            }
        }
        let single: Vec<u64> = columns.iter().map(|c| c.iter().map(|w| w.count_ones() as u64).sum()).collect();
        let mut pair = vec![0u64; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let c: u64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| (a & b).count_ones() as u64).sum();
                pair[i * k + j] = c;
                pair[j * k + i] = c;
            }
        }
        CooccurrenceCounts { studies: corpus.len(), single, pair }
    }

    pub fn strength(&self, i: usize, j: usize, norm: Normalization) -> f64 {
        let k = self.single.len();
        let c = self.pair[i * k + j] as f64;
        if c == 0.0 {
            return 0.0;
        }
        match norm {
            Normalization::Joint => c / self.studies as f64,
            Normalization::Conditional => c / self.single[i].min(self.single[j]) as f64,
            Normalization::GeometricMean => c / math::sqrt(self.single[i] as f64 * self.single[j] as f64),
        }
    }
}

/// Disease co-occurrence graph: one node per lexicon abnormality, a label-2
/// edge weighted `c_ij` for every pair with `c_ij > t`.
pub fn build_cooccurrence(
    corpus: &[KeyInfoRecord],
    lex: &Lexicon,
    t: f64,
    norm: Normalization,
) -> Result<KnowledgeGraph, KgError> {
    if corpus.is_empty() {
        return Err(KgError::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&t) {
        return Err(KgError::BadThreshold(t));
    }
    let k = lex.len();
    let counts = CooccurrenceCounts::from_corpus(corpus, k);
    let mut g = KnowledgeGraph {
        nodes: lex
            .abnormalities
            .iter()
            .map(|e| KgNode { name: e.name.clone(), kind: NodeKind::Disease, abnormality_id: Some(e.id) })
            .collect(),
        edges: Vec::new(),
    };
    for i in 0..k {
        for j in i + 1..k {
            let c = counts.strength(i, j, norm);
            if c > t {
                g.edges.push(KgEdge { a: i, b: j, label: EdgeLabel::CoOccurrence, weight: c });
            }
        }
    }
    Ok(g)
}

/// Union of two graphs by node name; parallel edges with different labels
/// are both kept.
pub fn merge_kgs(first: &KnowledgeGraph, second: &KnowledgeGraph) -> Result<KnowledgeGraph, KgError> {
    let mut merged = first.clone();
    let mut remap = Vec::with_capacity(second.nodes.len());
    for node in &second.nodes {
        match merged.node_index(&node.name) {
            Some(i) => {
                let existing = &merged.nodes[i];
                if existing.kind != node.kind {
                    return Err(KgError::ConflictingKind { name: node.name.clone(), a: existing.kind, b: node.kind });
                }
                if existing.abnormality_id.is_none() {
                    merged.nodes[i].abnormality_id = node.abnormality_id;
                }
                remap.push(i);
            }
            None => {
                merged.nodes.push(node.clone());
                remap.push(merged.nodes.len() - 1);
            }
        }
    }
    for e in &second.edges {
        merged.add_edge(remap[e.a], remap[e.b], e.label, e.weight);
    }
    Ok(merged)
}

/// Node/edge census used to pin the bundled transcription.
pub fn census(g: &KnowledgeGraph) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    m.insert("nodes".to_string(), g.nodes.len());
    m.insert("anatomy".to_string(), g.nodes.iter().filter(|n| n.kind == NodeKind::Anatomy).count());
    m.insert("disease".to_string(), g.nodes.iter().filter(|n| n.kind == NodeKind::Disease).count());
    m.insert("edges_label_1".to_string(), g.edge_count(EdgeLabel::Anatomical));
    m.insert("edges_label_2".to_string(), g.edge_count(EdgeLabel::CoOccurrence));
    let names: BTreeSet<&str> = g.nodes.iter().map(|n| n.name.as_str()).collect();
    m.insert("distinct_names".to_string(), names.len());
    m.insert("name_bytes".to_string(), g.nodes.iter().map(|n| n.name.len()).sum());
    m.insert(
        "edge_index_sum".to_string(),
        g.edges.iter().map(|e| e.a * 1000 + e.b).sum(),
    );
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::Finding;
    use crate::text::Span;

    fn record(ids: &[u8]) -> KeyInfoRecord {
        KeyInfoRecord::new("s", ids.iter().enumerate().map(|(i, &id)| Finding::bare(id, true, Span::new(i, i + 1))).collect())
    }

    #[test]
    fn bundled_graph_census() {
        let g = KnowledgeGraph::bundled_anatomical();
        g.validate_against(&Lexicon::bundled()).unwrap();
        let c = census(&g);
        assert_eq!(c["nodes"], 42);
        assert_eq!(c["anatomy"], 12);
        assert_eq!(c["disease"], 30);
        assert_eq!(c["edges_label_1"], 58);
        assert_eq!(c["edges_label_2"], 0);
        let heart = g.node_index("heart").unwrap();
        let cardio = g.node_index("cardiomegaly").unwrap();
        assert_eq!(g.nodes[cardio].abnormality_id, Some(2));
        assert!(g.has_edge(heart, cardio, EdgeLabel::Anatomical));
        assert!(g.has_edge(cardio, heart, EdgeLabel::Anatomical));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(KnowledgeGraph::parse("node x organ"), Err(KgError::UnknownKind { line: 1, .. })));
        assert!(matches!(
            KnowledgeGraph::parse("node a anatomy\na -- b"),
            Err(KgError::DanglingEndpoint { line: 2, .. })
        ));
        let nodes_only = KnowledgeGraph::parse("node a anatomy\nnode b disease 3\n").unwrap();
        assert_eq!(nodes_only.nodes.len(), 2);
        assert!(nodes_only.edges.is_empty());
    }

    #[test]
    fn text_round_trip() {
        let g = KnowledgeGraph::bundled_anatomical();
        assert_eq!(KnowledgeGraph::parse(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn cooccurrence_examples() {
        let lex = Lexicon::bundled();
        let corpus = [record(&[0, 1]), record(&[0, 2]), record(&[0, 1])];
        let g = build_cooccurrence(&corpus, &lex, 0.5, Normalization::Joint).unwrap();
        assert_eq!(g.edges.len(), 1);
        let e = g.edges[0];
        assert_eq!((e.a, e.b, e.label), (0, 1, EdgeLabel::CoOccurrence));
        assert!((e.weight - 2.0 / 3.0).abs() < 1e-15);
        assert!(build_cooccurrence(&corpus, &lex, 0.9, Normalization::Joint).unwrap().edges.is_empty());
        let singles = [record(&[4]), record(&[4])];
        assert!(build_cooccurrence(&singles, &lex, 0.0, Normalization::Joint).unwrap().edges.is_empty());
        assert_eq!(build_cooccurrence(&[], &lex, 0.1, Normalization::Joint), Err(KgError::EmptyCorpus));
        assert_eq!(build_cooccurrence(&corpus, &lex, 1.0, Normalization::Joint), Err(KgError::BadThreshold(1.0)));
    }

    #[test]
    fn alternative_normalizations() {
        let lex = Lexicon::bundled();
        let corpus = [record(&[0, 1]), record(&[0]), record(&[0]), record(&[1, 2])];
        let counts = CooccurrenceCounts::from_corpus(&corpus, lex.len());
        assert_eq!(counts.strength(0, 1, Normalization::Joint), 0.25);
        assert_eq!(counts.strength(0, 1, Normalization::Conditional), 0.5);
        assert!((counts.strength(0, 1, Normalization::GeometricMean) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn merge_keeps_parallel_edges() {
        let a = KnowledgeGraph::parse("node heart anatomy\nnode cardiomegaly disease 2\nheart -- cardiomegaly").unwrap();
        let b = KnowledgeGraph::parse("node cardiomegaly disease 2\nnode heart anatomy\ncardiomegaly -- heart 2 0.4").unwrap();
        let m = merge_kgs(&a, &b).unwrap();
        assert_eq!(m.nodes.len(), 2);
        assert_eq!(m.edges.len(), 2);
        assert!(m.has_edge(0, 1, EdgeLabel::Anatomical) && m.has_edge(0, 1, EdgeLabel::CoOccurrence));

        let c = KnowledgeGraph::parse("node x anatomy\nnode y anatomy\nx -- y").unwrap();
        assert_eq!(merge_kgs(&a, &c).unwrap().edges.len(), 2);

        let bad = KnowledgeGraph::parse("node heart disease").unwrap();
        assert!(matches!(merge_kgs(&a, &bad), Err(KgError::ConflictingKind { .. })));
    }

    #[test]
    fn adjacency_is_symmetric() {
        let g = KnowledgeGraph::bundled_anatomical();
        let adj = g.adjacency();
        for &(i, j, l, _) in &adj {
            assert!(adj.iter().any(|&(a, b, m, _)| a == j && b == i && m == l));
        }
    }
}
