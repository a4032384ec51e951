//! Per-image inputs that do not depend on parameters or the question.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ModelError;
use crate::graph::{
    build_semantic_graph, build_spatial_graph, relative_geometry, BBox, Modality, RelationGraph, RoiSet,
};
use crate::kg::KnowledgeGraph;
use crate::numeric::Tensor;

pub const DIR_FORWARD: usize = 0;
pub const DIR_BACKWARD: usize = 1;
pub const DIR_SELF: usize = 2;

/// Attention structure of one explicit graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitContext {
    pub n: usize,
    /// Label bitmask per cell; empty on self-loop fallbacks.
    pub sets: Vec<u32>,
    /// Cells attended over: labelled edges, or the diagonal for isolated nodes.
    pub mask: Vec<bool>,
    /// 0/1 masks selecting the cells of each direction class; `None` when
    /// the class does not occur.
    pub dirs: [Option<Tensor>; 3],
    pub label_count: usize,
}

impl ExplicitContext {
    /// Direction of `i → j`: self on the diagonal, forward when
    /// `lab(i, j) ≤ lab(j, i)`, backward otherwise. Depends on labels only,
    /// so relabelling nodes permutes it consistently.
    pub fn direction(graph: &RelationGraph, i: usize, j: usize) -> usize {
        if i == j {
            DIR_SELF
        } else if graph.label(i, j) <= graph.label(j, i) {
            DIR_FORWARD
        } else {
            DIR_BACKWARD
        }
    }

    pub fn from_graph(graph: &RelationGraph) -> ExplicitContext {
        let n = graph.n;
        let mut sets = vec![0u32; n * n];
        let mut mask = vec![false; n * n];
        let mut dir_data = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
        let mut used = [false; 3];
        for i in 0..n {
            let mut any = false;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let set = graph.label_set(i, j) as u32;
                if set != 0 {
                    any = true;
                    sets[i * n + j] = set;
                    mask[i * n + j] = true;
                    let d = Self::direction(graph, i, j);
                    dir_data[d][i * n + j] = 1.0;
                    used[d] = true;
                }
            }
            if !any {
                mask[i * n + i] = true;
                dir_data[DIR_SELF][i * n + i] = 1.0;
                used[DIR_SELF] = true;
            }
        }
        let [f, b, s] = dir_data;
        let mk = |data: Vec<f64>, on: bool| on.then(|| Tensor::new(n, n, data).expect("n × n"));
        ExplicitContext {
            n,
            sets,
            mask,
            dirs: [mk(f, used[0]), mk(b, used[1]), mk(s, used[2])],
            label_count: graph.modality.label_count(),
        }
    }

    pub fn directions_used(&self) -> usize {
        self.dirs.iter().filter(|d| d.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageContext {
    pub n: usize,
    /// `N × d_o`.
    pub features: Tensor,
    /// `N² × 4` relative geometry, row `i·N + j` for the pair `(i, j)`.
    pub geometry: Tensor,
    /// Off-diagonal cells (the diagonal alone when `N = 1`).
    pub implicit_mask: Vec<bool>,
    pub spatial: ExplicitContext,
    pub semantic: ExplicitContext,
}

impl ImageContext {
    pub fn new(
        features: Tensor,
        boxes: &[BBox],
        spatial: &RelationGraph,
        semantic: &RelationGraph,
        eps: f64,
    ) -> Result<ImageContext, ModelError> {
        let n = features.rows();
        if n == 0 {
            return Err(ModelError::Config("image has no ROIs"));
        }
        for g in [spatial, semantic] {
            if g.n != n {
                return Err(ModelError::GraphSize { graph: g.n, rois: n });
            }
        }
        if boxes.len() != n {
            return Err(ModelError::GraphSize { graph: boxes.len(), rois: n });
        }
        let mut geo = Vec::with_capacity(n * n * 4);
        for bi in boxes {
            for bj in boxes {
                geo.extend_from_slice(&relative_geometry(bi, bj, eps));
            }
        }
        let mut implicit_mask = vec![true; n * n];
        if n > 1 {
            for i in 0..n {
                implicit_mask[i * n + i] = false;
            }
        }
        Ok(ImageContext {
            n,
            features,
            geometry: Tensor::new(n * n, 4, geo)?,
            implicit_mask,
            spatial: ExplicitContext::from_graph(spatial),
            semantic: ExplicitContext::from_graph(semantic),
        })
    }

    /// Builds both explicit graphs from the ROIs. Returns the ROI class
    /// names the knowledge graph does not know.
    pub fn from_roiset(
        rois: &RoiSet,
        kg: &KnowledgeGraph,
        spatial_threshold: f64,
        eps: f64,
    ) -> Result<(ImageContext, Vec<String>), ModelError> {
        rois.validate()?;
        let features = Tensor::from_rows(&rois.rois.iter().map(|r| r.feature.clone()).collect::<Vec<_>>())?;
        let spatial = build_spatial_graph(rois, spatial_threshold);
        let (semantic, unresolved) = build_semantic_graph(rois, kg);
        let ctx = ImageContext::new(features, &rois.boxes(), &spatial, &semantic, eps)?;
        Ok((ctx, unresolved))
    }

    pub fn explicit(&self, m: Modality) -> Option<&ExplicitContext> {
        match m {
            Modality::Implicit => None,
            Modality::Spatial => Some(&self.spatial),
            Modality::Semantic => Some(&self.semantic),
        }
    }

    /// Cells each attention row is normalised over.
    pub fn neighbor_mask(&self, m: Modality) -> &[bool] {
        match m {
            Modality::Implicit => &self.implicit_mask,
            Modality::Spatial => &self.spatial.mask,
            Modality::Semantic => &self.semantic.mask,
        }
    }
}
