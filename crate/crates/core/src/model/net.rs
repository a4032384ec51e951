//! Parameters and the forward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::context::{ExplicitContext, ImageContext};
use super::{Fusion, ModelConfig, ModelError, TokenVocab};
use crate::graph::Modality;
use crate::math;
use crate::numeric::{GruParams, GruSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{derive_seed, seeded_rng};

/// Attention scorer of one implicit head: `U`, `H` and the geometry weight `w`.
#[derive(Clone, Debug, PartialEq)]
pub(super) struct ImplicitScorer {
    u: ParamId,
    h: ParamId,
    w_geo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(super) struct ImplicitLayer {
    fb_w: ParamId,
    fb_b: ParamId,
    /// One per head, or a single shared scorer.
    scorers: Vec<ImplicitScorer>,
    w: Vec<ParamId>,
    w_o: ParamId,
}

/// Scorer of one explicit head: `U`, per-direction `H`, label biases `c`.
#[derive(Clone, Debug, PartialEq)]
pub(super) struct ExplicitScorer {
    u: ParamId,
    h: [ParamId; 3],
    c_lab: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(super) struct ExplicitLayer {
    scorers: Vec<ExplicitScorer>,
    w: Vec<[ParamId; 3]>,
    b_lab: Vec<ParamId>,
    w_o: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(super) struct AnswerHead {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub(super) struct Ids {
    embed: ParamId,
    gru: GruParams,
    implicit: Vec<ImplicitLayer>,
    pub(super) spatial: Vec<ExplicitLayer>,
    semantic: Vec<ExplicitLayer>,
    heads: [AnswerHead; 3],
    fusion: Option<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokens: TokenVocab,
    pub answers: Vec<String>,
    pub params: ParamStore,
    /// `V × fixed_embedding_dim`, never trained.
    pub fixed_embeddings: Tensor,
    pub(super) ids: Ids,
}

/// Scores and the attention captured on the way.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Sigmoid of the fused logits, one per answer.
    pub scores: Vec<f64>,
    pub logits: Vec<f64>,
    /// Per modality: layers × heads attention matrices.
    pub attention: BTreeMap<Modality, Vec<Vec<Tensor>>>,
    /// Per-modality answer logits before fusion.
    pub branch_logits: BTreeMap<Modality, Vec<f64>>,
}

impl Prediction {
    /// Head-averaged attention of the last layer.
    pub fn final_attention(&self, m: Modality) -> Option<Tensor> {
        let heads = self.attention.get(&m)?.last()?;
        let mut avg = heads.first()?.clone();
        for h in &heads[1..] {
            avg.add_assign(h);
        }
        avg.scale_in_place(1.0 / heads.len() as f64);
        Some(avg)
    }

    pub fn final_attention_by_modality(&self) -> BTreeMap<Modality, Tensor> {
        self.attention.keys().filter_map(|&m| Some((m, self.final_attention(m)?))).collect()
    }
}

/// Forward-pass output on a tape.
pub(crate) struct Forward {
    pub logits: Var,
    pub attention: BTreeMap<Modality, Vec<Vec<Var>>>,
    pub branch: BTreeMap<Modality, Var>,
}

/// Input rows of a graph layer. The first layer sees `[o_i ‖ q]`, which is
/// projected as `O·W_oᵀ + 1·(q·W_qᵀ)` so the shared question half is
/// multiplied once rather than once per node.
#[derive(Clone, Debug)]
pub(crate) enum NodeInput {
    Factored { features: Var, q: Var, d_o: usize, d_q: usize },
    Dense(Var),
}

impl NodeInput {
    /// `V · wᵀ` for a weight stored `out × in`.
    pub(crate) fn project(&self, tape: &mut Tape<'_>, w: Var) -> Result<Var, ModelError> {
        Ok(match *self {
            NodeInput::Dense(v) => tape.matmul_nt(v, w)?,
            NodeInput::Factored { features, q, d_o, d_q } => {
                let w_o = tape.slice_cols(w, 0, d_o)?;
                let w_q = tape.slice_cols(w, d_o, d_q)?;
                let a = tape.matmul_nt(features, w_o)?;
                let b = tape.matmul_nt(q, w_q)?;
                tape.add_row(a, b)?
            }
        })
    }

    /// The materialised `N × width` matrix.
    pub(crate) fn dense(&self, tape: &mut Tape<'_>) -> Result<Var, ModelError> {
        Ok(match *self {
            NodeInput::Dense(v) => v,
            NodeInput::Factored { features, q, .. } => {
                let n = tape.value(features).rows();
                let qs = tape.repeat_rows(q, n)?;
                tape.concat_cols(&[features, qs])?
            }
        })
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// Weight `rows × cols`, uniform ±1/√cols.
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        let bound = 1.0 / math::sqrt(cols as f64);
        Ok(self.store.add(name, Tensor::uniform(rows, cols, bound, &mut self.rng))?)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        Ok(self.store.add(name, Tensor::zeros(rows, cols))?)
    }
}

impl Model {
    /// Fresh model. `fixed` replaces the seeded random fixed token table.
    pub fn new(
        config: ModelConfig,
        tokens: TokenVocab,
        answers: Vec<String>,
        fixed: Option<Tensor>,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        if answers.is_empty() {
            return Err(ModelError::Config("answer vocabulary is empty"));
        }
        let v = tokens.len();
        let fixed_embeddings = match fixed {
            Some(t) if t.shape() == (v, config.fixed_embedding_dim) => t,
            Some(_) => return Err(ModelError::Config("fixed embedding table has the wrong shape")),
            None => {
                let bound = if config.fixed_embedding_dim > 0 { 1.0 / math::sqrt(config.fixed_embedding_dim as f64) } else { 0.0 };
                Tensor::uniform(v, config.fixed_embedding_dim, bound, &mut seeded_rng(derive_seed(config.seed, "embed.fixed")))
            }
        };
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng: seeded_rng(config.seed) };
        let (d, m) = (config.d, config.heads);
        let c = answers.len();

        let embed = b.weight("embed.learned".into(), v, config.learned_embedding_dim.max(1))?;
        let gru = GruParams::register(
            b.store,
            "question.gru",
            GruSpec {
                input: config.fixed_embedding_dim + config.learned_embedding_dim.max(1),
                output: config.d_q,
                bidirectional: config.bidirectional_gru,
            },
            &mut b.rng,
        )?;
        let scorers = if config.shared_head_attention { 1 } else { m };
        let input_width = |layer: usize| if layer == 0 { config.d_o + config.d_q } else { d };

        let mut implicit = Vec::new();
        for l in 0..config.layers {
            let p = |s: &str| format!("implicit.l{l}.{s}");
            let inw = input_width(l);
            let fb_w = b.weight(p("fb.w"), d, 4)?;
            let fb_b = b.zeros(p("fb.b"), 1, d)?;
            let mut sc = Vec::new();
            for h in 0..scorers {
                sc.push(ImplicitScorer {
                    u: b.weight(p(&format!("h{h}.u")), d, inw)?,
                    h: b.weight(p(&format!("h{h}.h")), d, inw)?,
                    w_geo: b.weight(p(&format!("h{h}.w_geo")), 1, d)?,
                });
            }
            let mut w = Vec::new();
            for h in 0..m {
                w.push(b.weight(p(&format!("h{h}.w")), d, inw)?);
            }
            let w_o = b.weight(p("w_o"), d, m * d)?;
            implicit.push(ImplicitLayer { fb_w, fb_b, scorers: sc, w, w_o });
        }

        let explicit = |name: &str, labels: usize, b: &mut Builder<'_>| -> Result<Vec<ExplicitLayer>, ModelError> {
            let mut layers = Vec::new();
            for l in 0..config.layers {
                let p = |s: &str| format!("{name}.l{l}.{s}");
                let inw = input_width(l);
                let mut sc = Vec::new();
                for h in 0..scorers {
                    sc.push(ExplicitScorer {
                        u: b.weight(p(&format!("h{h}.u")), d, inw)?,
                        h: [
                            b.weight(p(&format!("h{h}.h_fwd")), d, inw)?,
                            b.weight(p(&format!("h{h}.h_bwd")), d, inw)?,
                            b.weight(p(&format!("h{h}.h_self")), d, inw)?,
                        ],
                        c_lab: b.zeros(p(&format!("h{h}.c_lab")), 1, labels)?,
                    });
                }
                let mut w = Vec::new();
                let mut b_lab = Vec::new();
                for h in 0..m {
                    w.push([
                        b.weight(p(&format!("h{h}.w_fwd")), d, inw)?,
                        b.weight(p(&format!("h{h}.w_bwd")), d, inw)?,
                        b.weight(p(&format!("h{h}.w_self")), d, inw)?,
                    ]);
                    b_lab.push(b.zeros(p(&format!("h{h}.b_lab")), labels, d)?);
                }
                let w_o = b.weight(p("w_o"), d, m * d)?;
                layers.push(ExplicitLayer { scorers: sc, w, b_lab, w_o });
            }
            Ok(layers)
        };
        let spatial = explicit("spatial", Modality::Spatial.label_count(), &mut b)?;
        let semantic = explicit("semantic", Modality::Semantic.label_count(), &mut b)?;

        let head = |name: &str, b: &mut Builder<'_>| -> Result<AnswerHead, ModelError> {
            Ok(AnswerHead {
                w1: b.weight(format!("answer.{name}.w1"), d, d)?,
                b1: b.zeros(format!("answer.{name}.b1"), 1, d)?,
                w2: b.weight(format!("answer.{name}.w2"), c, d)?,
                b2: b.zeros(format!("answer.{name}.b2"), 1, c)?,
            })
        };
        let heads = [head("implicit", &mut b)?, head("spatial", &mut b)?, head("semantic", &mut b)?];
        let fusion = match config.fusion {
            Fusion::Learned => Some(b.zeros("fusion.logits".into(), 1, 3)?),
            Fusion::Fixed { .. } => None,
        };
        let ids = Ids { embed, gru, implicit, spatial, semantic, heads, fusion };
        Ok(Model { config, tokens, answers, params, fixed_embeddings, ids })
    }

    /// Current fusion weights `[imp, spa, sem]`.
    pub fn fusion_weights(&self) -> [f64; 3] {
        match (self.config.fusion.coefficients(), self.ids.fusion) {
            (Some(c), _) => c,
            (None, Some(id)) => {
                let l = self.params.value(id).data();
                let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = l.iter().map(|x| math::exp(x - mx)).collect();
                let s: f64 = e.iter().sum();
                [e[0] / s, e[1] / s, e[2] / s]
            }
            (None, None) => unreachable!("learned fusion registers its logits"),
        }
    }

    /// Question vector `1 × d_q` on the tape.
    pub(crate) fn encode_on(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Result<Var, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        if tokens.iter().any(|&t| t >= self.tokens.len()) {
            return Err(ModelError::Config("token id outside the vocabulary"));
        }
        let embed = tape.param(self.ids.embed);
        let learned = tape.gather_rows(embed, tokens)?;
        let x = if self.config.fixed_embedding_dim > 0 {
            let fixed = tape.constant_rows(&self.fixed_embeddings, tokens)?;
            tape.concat_cols(&[fixed, learned])?
        } else {
            learned
        };
        Ok(self.ids.gru.run(tape, x)?)
    }

    /// Question vector for `text`.
    pub fn encode_question(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let tokens = self.tokens.encode(text)?;
        let mut tape = Tape::new(&self.params);
        let q = self.encode_on(&mut tape, &tokens)?;
        Ok(tape.value(q).data().to_vec())
    }

    /// Node features `[o_i ‖ q]`, `N × (d_o + d_q)`, kept factored.
    pub(crate) fn node_features(&self, tape: &mut Tape<'_>, ctx: &ImageContext, q: Var) -> Result<NodeInput, ModelError> {
        if ctx.features.cols() != self.config.d_o {
            return Err(ModelError::FeatureWidth { expected: self.config.d_o, got: ctx.features.cols() });
        }
        let features = tape.leaf(ctx.features.clone())?;
        Ok(NodeInput::Factored { features, q, d_o: self.config.d_o, d_q: self.config.d_q })
    }

    fn implicit_layer(
        &self,
        tape: &mut Tape<'_>,
        layer: &ImplicitLayer,
        ctx: &ImageContext,
        geometry: Var,
        v: &NodeInput,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let slope = self.config.leaky_slope;
        let n = ctx.n;
        let fb_w = tape.param(layer.fb_w);
        let fb_b = tape.param(layer.fb_b);
        let fb = tape.matmul_nt(geometry, fb_w)?;
        let fb = tape.add_row(fb, fb_b)?;
        let fb = tape.leaky_relu(fb, slope)?;
        let mut alphas = Vec::with_capacity(layer.scorers.len());
        for s in &layer.scorers {
            let u = tape.param(s.u);
            let h = tape.param(s.h);
            let w_geo = tape.param(s.w_geo);
            let uv = v.project(tape, u)?;
            let hv = v.project(tape, h)?;
            let logits = tape.matmul_nt(uv, hv)?;
            let geo = tape.matmul_nt(fb, w_geo)?;
            let geo = tape.relu(geo)?;
            let geo = tape.reshape(geo, n, n)?;
            alphas.push(tape.weighted_softmax(logits, geo, &ctx.implicit_mask)?);
        }
        let mut outs = Vec::with_capacity(layer.w.len());
        let mut per_head = Vec::with_capacity(layer.w.len());
        for (k, &w) in layer.w.iter().enumerate() {
            let alpha = alphas[k.min(alphas.len() - 1)];
            let wp = tape.param(w);
            let wv = v.project(tape, wp)?;
            let agg = tape.matmul(alpha, wv)?;
            outs.push(tape.leaky_relu(agg, slope)?);
            per_head.push(alpha);
        }
        let cat = tape.concat_cols(&outs)?;
        let w_o = tape.param(layer.w_o);
        Ok((tape.matmul_nt(cat, w_o)?, per_head))
    }

    pub(super) fn explicit_layer(
        &self,
        tape: &mut Tape<'_>,
        layer: &ExplicitLayer,
        ec: &ExplicitContext,
        dir_masks: &[Option<Var>; 3],
        v: &NodeInput,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let slope = self.config.leaky_slope;
        let single_dir = ec.directions_used() == 1;
        let mut alphas = Vec::with_capacity(layer.scorers.len());
        for s in &layer.scorers {
            let u = tape.param(s.u);
            let uv = v.project(tape, u)?;
            let mut logits: Option<Var> = None;
            for (dir, mask) in dir_masks.iter().enumerate() {
                let Some(mask) = *mask else { continue };
                let h = tape.param(s.h[dir]);
                let hv = v.project(tape, h)?;
                let mut part = tape.matmul_nt(uv, hv)?;
                if !single_dir {
                    part = tape.mul(part, mask)?;
                }
                logits = Some(match logits {
                    Some(acc) => tape.add(acc, part)?,
                    None => part,
                });
            }
            let logits = logits.expect("every node attends somewhere");
            let c = tape.param(s.c_lab);
            let bias = tape.label_bias(c, &ec.sets, ec.n)?;
            let logits = tape.add(logits, bias)?;
            alphas.push(tape.masked_softmax(logits, &ec.mask)?);
        }
        let mut outs = Vec::with_capacity(layer.w.len());
        let mut per_head = Vec::with_capacity(layer.w.len());
        for (k, ws) in layer.w.iter().enumerate() {
            let alpha = alphas[k.min(alphas.len() - 1)];
            let mut agg: Option<Var> = None;
            for (dir, mask) in dir_masks.iter().enumerate() {
                let Some(mask) = *mask else { continue };
                let a = if single_dir { alpha } else { tape.mul(alpha, mask)? };
                let wp = tape.param(ws[dir]);
                let wv = v.project(tape, wp)?;
                let part = tape.matmul(a, wv)?;
                agg = Some(match agg {
                    Some(acc) => tape.add(acc, part)?,
                    None => part,
                });
            }
            let agg = agg.expect("every node attends somewhere");
            let mass = tape.label_mass(alpha, &ec.sets, ec.label_count)?;
            let b = tape.param(layer.b_lab[k]);
            let bias = tape.matmul(mass, b)?;
            let agg = tape.add(agg, bias)?;
            outs.push(tape.leaky_relu(agg, slope)?);
            per_head.push(alpha);
        }
        let cat = tape.concat_cols(&outs)?;
        let w_o = tape.param(layer.w_o);
        Ok((tape.matmul_nt(cat, w_o)?, per_head))
    }

    fn answer_head(&self, tape: &mut Tape<'_>, head: &AnswerHead, v: Var) -> Result<Var, ModelError> {
        let pooled = tape.mean_rows(v)?;
        let w1 = tape.param(head.w1);
        let b1 = tape.param(head.b1);
        let w2 = tape.param(head.w2);
        let b2 = tape.param(head.b2);
        let h = tape.matmul_nt(pooled, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.leaky_relu(h, self.config.leaky_slope)?;
        let a = tape.matmul_nt(h, w2)?;
        Ok(tape.add_row(a, b2)?)
    }

    /// Full forward pass. Branches whose fixed fusion weight is 0 are skipped.
    pub(crate) fn forward(&self, tape: &mut Tape<'_>, ctx: &ImageContext, tokens: &[usize]) -> Result<Forward, ModelError> {
        let q = self.encode_on(tape, tokens)?;
        let v0 = self.node_features(tape, ctx, q)?;
        let coef = self.config.fusion.coefficients();
        let mut attention = BTreeMap::new();
        let mut branch = BTreeMap::new();
        for (bi, modality) in Modality::ALL.into_iter().enumerate() {
            if coef.is_some_and(|c| c[bi] == 0.0) {
                continue;
            }
            let mut v = v0.clone();
            let mut layers_att = Vec::with_capacity(self.config.layers);
            match modality {
                Modality::Implicit => {
                    let geometry = tape.leaf(ctx.geometry.clone())?;
                    for layer in &self.ids.implicit {
                        let (nv, att) = self.implicit_layer(tape, layer, ctx, geometry, &v)?;
                        v = NodeInput::Dense(nv);
                        layers_att.push(att);
                    }
                }
                Modality::Spatial | Modality::Semantic => {
                    let (ec, layers) = if modality == Modality::Spatial {
                        (&ctx.spatial, &self.ids.spatial)
                    } else {
                        (&ctx.semantic, &self.ids.semantic)
                    };
                    let mut masks: [Option<Var>; 3] = [None; 3];
                    for (k, d) in ec.dirs.iter().enumerate() {
                        if let Some(t) = d {
                            masks[k] = Some(tape.leaf(t.clone())?);
                        }
                    }
                    for layer in layers {
                        let (nv, att) = self.explicit_layer(tape, layer, ec, &masks, &v)?;
                        v = NodeInput::Dense(nv);
                        layers_att.push(att);
                    }
                }
            }
            attention.insert(modality, layers_att);
            let v = v.dense(tape)?;
            branch.insert(modality, self.answer_head(tape, &self.ids.heads[bi], v)?);
        }
        let logits = match (coef, self.ids.fusion) {
            (Some(c), _) => {
                let mut acc: Option<Var> = None;
                for (bi, m) in Modality::ALL.into_iter().enumerate() {
                    if c[bi] == 0.0 {
                        continue;
                    }
                    let a = branch[&m];
                    let term = if c[bi] == 1.0 { a } else { tape.scale(a, c[bi])? };
                    acc = Some(match acc {
                        Some(x) => tape.add(x, term)?,
                        None => term,
                    });
                }
                acc.expect("fusion weights sum to one")
            }
            (None, Some(id)) => {
                let l = tape.param(id);
                let w = tape.masked_softmax(l, &[true; 3])?;
                let stack: Vec<Var> = Modality::ALL.iter().map(|m| branch[m]).collect();
                let stack = tape.concat_rows(&stack)?;
                tape.matmul(w, stack)?
            }
            (None, None) => unreachable!("learned fusion registers its logits"),
        };
        Ok(Forward { logits, attention, branch })
    }

    pub fn predict_tokens(&self, ctx: &ImageContext, tokens: &[usize]) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, ctx, tokens)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let scores = logits.iter().map(|&x| math::sigmoid(x)).collect();
        let attention = fwd
            .attention
            .iter()
            .map(|(m, layers)| {
                (*m, layers.iter().map(|heads| heads.iter().map(|&h| tape.value(h).clone()).collect()).collect())
            })
            .collect();
        let branch_logits = fwd.branch.iter().map(|(m, &v)| (*m, tape.value(v).data().to_vec())).collect();
        Ok(Prediction { scores, logits, attention, branch_logits })
    }

    pub fn predict(&self, ctx: &ImageContext, question: &str) -> Result<Prediction, ModelError> {
        let tokens = self.tokens.encode(question)?;
        self.predict_tokens(ctx, &tokens)
    }
}
