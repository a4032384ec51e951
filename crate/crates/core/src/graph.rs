//! Per-image relation graphs over detected regions: spatial (geometry
//! classes), semantic (knowledge-graph adjacency) and implicit (fully
//! connected).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EdgeLabel, KnowledgeGraph};
use crate::math;

/// Number of spatial labels including 0 (no edge).
pub const SPATIAL_LABELS: usize = 12;
/// Number of semantic labels including 0 (no edge).
pub const SEMANTIC_LABELS: usize = 3;

pub const SPATIAL_INSIDE: u8 = 1;
pub const SPATIAL_COVER: u8 = 2;
pub const SPATIAL_OVERLAP: u8 = 3;
/// First of the eight angular classes.
pub const SPATIAL_OCTANT_BASE: u8 = 4;

/// Default centre-distance threshold: half the normalized image diagonal.
pub const DEFAULT_SPATIAL_THRESHOLD: f64 = 0.5 * core::f64::consts::SQRT_2;
/// Default lower clamp for centre offsets in the relative geometry feature.
pub const DEFAULT_GEOMETRY_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("roi set {0} is empty")]
    Empty(String),
    #[error("roi {index}: invalid box {bbox:?}")]
    InvalidBox { index: usize, bbox: BBox },
    #[error("roi {index}: feature length {got} differs from {expected}")]
    FeatureWidth { index: usize, expected: usize, got: usize },
    #[error("roi {0}: non-finite feature value")]
    NonFinite(usize),
}

/// Normalized box, `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        finite
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + 1e-12
            && self.y + self.h <= 1.0 + 1e-12
    }

    /// `self ⊆ other`, boundaries included.
    pub fn inside(&self, other: &BBox) -> bool {
        self.x >= other.x
            && self.y >= other.y
            && self.x + self.w <= other.x + other.w
            && self.y + self.h <= other.y + other.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub bbox: BBox,
    /// Anatomy or disease label; matches knowledge-graph node names.
    pub class_name: String,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    pub image_id: String,
    pub study_id: String,
    pub rois: Vec<Roi>,
}

impl RoiSet {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn feature_width(&self) -> usize {
        self.rois.first().map_or(0, |r| r.feature.len())
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.rois.is_empty() {
            return Err(GraphError::Empty(self.image_id.clone()));
        }
        let d = self.feature_width();
        for (index, roi) in self.rois.iter().enumerate() {
            if !roi.bbox.is_valid() {
                return Err(GraphError::InvalidBox { index, bbox: roi.bbox });
            }
            if roi.feature.len() != d {
                return Err(GraphError::FeatureWidth { index, expected: d, got: roi.feature.len() });
            }
            if roi.feature.iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite(index));
            }
        }
        Ok(())
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.rois.iter().map(|r| r.bbox).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Implicit,
    Spatial,
    Semantic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Implicit, Modality::Spatial, Modality::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Implicit => "implicit",
            Modality::Spatial => "spatial",
            Modality::Semantic => "semantic",
        }
    }

    /// Size of the label-bias tables for this modality.
    pub fn label_count(self) -> usize {
        match self {
            Modality::Implicit => 2,
            Modality::Spatial => SPATIAL_LABELS,
            Modality::Semantic => SEMANTIC_LABELS,
        }
    }
}

/// Dense labelled adjacency; `labels[i * n + j]` is the label of `i → j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGraph {
    pub n: usize,
    pub labels: Vec<u8>,
    pub modality: Modality,
    /// Extra labels on pairs that carry more than one relation, as
    /// `(i, j, label)`. Only the semantic graph uses this.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_labels: Vec<(usize, usize, u8)>,
}

impl RelationGraph {
    pub fn label(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.n + j]
    }

    pub fn edge_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Every label on `i → j` as a bit set (bit `l` for label `l`).
    pub fn label_set(&self, i: usize, j: usize) -> u16 {
        let mut set = 0u16;
        let l = self.label(i, j);
        if l != 0 {
            set |= 1 << l;
        }
        for &(a, b, l) in &self.extra_labels {
            if a == i && b == j {
                set |= 1 << l;
            }
        }
        set
    }

    /// Same graph with node `k` of the result being node `perm[k]` here.
    pub fn permuted(&self, perm: &[usize]) -> RelationGraph {
        let n = self.n;
        let mut labels = vec![0u8; n * n];
        let mut inverse = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        for i in 0..n {
            for j in 0..n {
                labels[i * n + j] = self.label(perm[i], perm[j]);
            }
        }
        let extra_labels = self.extra_labels.iter().map(|&(a, b, l)| (inverse[a], inverse[b], l)).collect();
        RelationGraph { n, labels, modality: self.modality, extra_labels }
    }
}

/// Spatial relation class of `i → j`: 1 inside, 2 cover, 3 overlap
/// (IoU ≥ 0.5), 4–11 the octant of the centre-to-centre vector when the
/// centres are within `t`, else 0. Containment is checked first so equal
/// boxes classify as inside.
pub fn classify_spatial(bi: &BBox, bj: &BBox, t: f64) -> u8 {
    if bi.inside(bj) {
        return SPATIAL_INSIDE;
    }
    if bj.inside(bi) {
        return SPATIAL_COVER;
    }
    if bi.iou(bj) >= 0.5 {
        return SPATIAL_OVERLAP;
    }
    let (xi, yi) = bi.center();
    let (xj, yj) = bj.center();
    let (dx, dy) = (xj - xi, yj - yi);
    if math::sqrt(dx * dx + dy * dy) > t {
        return 0;
    }
    let mut deg = math::atan2(dy, dx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    let octant = (math::floor(deg / 45.0) as u8).min(7);
    SPATIAL_OCTANT_BASE + octant
}

pub fn build_spatial_graph(rois: &RoiSet, t: f64) -> RelationGraph {
    let n = rois.len();
    let mut labels = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                labels[i * n + j] = classify_spatial(&rois.rois[i].bbox, &rois.rois[j].bbox, t);
            }
        }
    }
    RelationGraph { n, labels, modality: Modality::Spatial, extra_labels: Vec::new() }
}

/// Semantic graph plus the class names that did not resolve to a KG node.
pub fn build_semantic_graph(rois: &RoiSet, kg: &KnowledgeGraph) -> (RelationGraph, Vec<String>) {
    let n = rois.len();
    let mut unresolved = Vec::new();
    let nodes: Vec<Option<usize>> = rois
        .rois
        .iter()
        .map(|r| {
            let idx = kg.node_index(&r.class_name);
            if idx.is_none() && !unresolved.contains(&r.class_name) {
                log::warn!("roi class {:?} has no knowledge-graph node; leaving it isolated", r.class_name);
                unresolved.push(r.class_name.clone());
            }
            idx
        })
        .collect();
    let mut labels = vec![0u8; n * n];
    let mut extra_labels = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (Some(a), Some(b)) = (nodes[i], nodes[j]) else { continue };
            if i == j {
                continue;
            }
            let anatomical = kg.has_edge(a, b, EdgeLabel::Anatomical);
            let cooccur = kg.has_edge(a, b, EdgeLabel::CoOccurrence);
            labels[i * n + j] = match (anatomical, cooccur) {
                (_, true) => {
                    if anatomical {
                        extra_labels.push((i, j, EdgeLabel::Anatomical as u8));
                    }
                    EdgeLabel::CoOccurrence as u8
                }
                (true, false) => EdgeLabel::Anatomical as u8,
                _ => 0,
            };
        }
    }
    (RelationGraph { n, labels, modality: Modality::Semantic, extra_labels }, unresolved)
}

pub fn build_implicit_graph(n: usize) -> RelationGraph {
    let mut labels = vec![1u8; n * n];
    for i in 0..n {
        labels[i * n + i] = 0;
    }
    RelationGraph { n, labels, modality: Modality::Implicit, extra_labels: Vec::new() }
}

/// `[log(|Δx|/w_i), log(|Δy|/h_i), log(w_j/w_i), log(h_j/h_i)]` over box
/// centres, with the centre offsets clamped below by `eps`.
pub fn relative_geometry(bi: &BBox, bj: &BBox, eps: f64) -> [f64; 4] {
    let (xi, yi) = bi.center();
    let (xj, yj) = bj.center();
    [
        math::ln((xi - xj).abs().max(eps) / bi.w),
        math::ln((yi - yj).abs().max(eps) / bi.h),
        math::ln(bj.w / bi.w),
        math::ln(bj.h / bi.h),
    ]
}
