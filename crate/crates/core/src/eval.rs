//! AUC metrics, answer selection and activated-ROI extraction.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Modality;
use crate::numeric::Tensor;
use crate::qa::QuestionType;

/// Answers shown per question.
pub const TOP_K: usize = 4;
/// Answers must score strictly above this.
pub const SCORE_THRESHOLD: f64 = 0.04;
/// Activated ROIs returned per modality.
pub const ACTIVATION_TOP_K: usize = 5;
/// Activation threshold as a multiple of the uniform mass `1/N`.
pub const ACTIVATION_FACTOR: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("AUC needs both positive and negative examples")]
    SingleClass,
    #[error("scores and labels differ in shape")]
    ShapeMismatch,
    #[error("no class has both positive and negative examples")]
    NoEvaluableClass,
}

/// Mann–Whitney AUC with ties counted one half.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::ShapeMismatch);
    }
    let c = scores.first().map_or(0, Vec::len);
    if scores.iter().zip(labels).any(|(s, l)| s.len() != c || l.len() != c) {
        return Err(EvalError::ShapeMismatch);
    }
    Ok(c)
}

/// AUC of all (sample, class) cells pooled into one binary problem.
pub fn auc_micro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<f64, EvalError> {
    check_matrix(scores, labels)?;
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let l: Vec<bool> = labels.iter().flatten().copied().collect();
    auc_binary(&s, &l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuc {
    pub value: f64,
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Unweighted mean of per-class AUCs over the evaluable classes.
pub fn auc_macro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroAuc, EvalError> {
    let c = check_matrix(scores, labels)?;
    let mut per_class = Vec::with_capacity(c);
    let mut excluded = Vec::new();
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        match auc_binary(&s, &l) {
            Ok(a) => per_class.push(Some(a)),
            Err(_) => {
                per_class.push(None);
                excluded.push(k);
            }
        }
    }
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(EvalError::NoEvaluableClass);
    }
    Ok(MacroAuc { value: vals.iter().sum::<f64>() / vals.len() as f64, per_class, excluded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub n_eval: usize,
    pub auc_micro: Option<f64>,
    pub auc_macro: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc_micro: f64,
    pub auc_macro: f64,
    pub per_class_auc: BTreeMap<String, f64>,
    /// Classes left out of the macro average.
    pub excluded_classes: Vec<String>,
    pub n_eval: usize,
    pub n_classes: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_qtype: BTreeMap<String, SliceReport>,
}

/// Full report; `qtypes`, when given, adds per-question-type slices.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    class_labels: &[String],
    qtypes: Option<&[QuestionType]>,
) -> Result<EvalReport, EvalError> {
    let c = check_matrix(scores, labels)?;
    if c != class_labels.len() {
        return Err(EvalError::ShapeMismatch);
    }
    let micro = auc_micro(scores, labels)?;
    let mac = auc_macro(scores, labels)?;
    let mut per_class_auc = BTreeMap::new();
    for (k, a) in mac.per_class.iter().enumerate() {
        if let Some(a) = a {
            per_class_auc.insert(class_labels[k].clone(), *a);
        }
    }
    let mut per_qtype = BTreeMap::new();
    if let Some(qt) = qtypes {
        if qt.len() != scores.len() {
            return Err(EvalError::ShapeMismatch);
        }
        for q in QuestionType::ALL {
            let rows: Vec<usize> = (0..qt.len()).filter(|&i| qt[i] == q).collect();
            if rows.is_empty() {
                continue;
            }
            let s: Vec<Vec<f64>> = rows.iter().map(|&i| scores[i].clone()).collect();
            let l: Vec<Vec<bool>> = rows.iter().map(|&i| labels[i].clone()).collect();
            per_qtype.insert(
                q.as_str().to_string(),
                SliceReport {
                    n_eval: rows.len(),
                    auc_micro: auc_micro(&s, &l).ok(),
                    auc_macro: auc_macro(&s, &l).ok().map(|m| m.value),
                },
            );
        }
    }
    Ok(EvalReport {
        auc_micro: micro,
        auc_macro: mac.value,
        per_class_auc,
        excluded_classes: mac.excluded.iter().map(|&k| class_labels[k].clone()).collect(),
        n_eval: scores.len(),
        n_classes: c,
        per_qtype,
    })
}

/// Up to `k` answers scoring above `threshold`, best first; ties keep
/// vocabulary order.
pub fn top_answers_with(scores: &[f64], labels: &[String], k: usize, threshold: f64) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..scores.len().min(labels.len())).filter(|&i| scores[i] > threshold).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (labels[i].clone(), scores[i])).collect()
}

/// At most four answers scoring above 0.04.
pub fn top_answers(scores: &[f64], labels: &[String]) -> Vec<(String, f64)> {
    top_answers_with(scores, labels, TOP_K, SCORE_THRESHOLD)
}

/// Column means of an `N × N` attention matrix: the mass each ROI receives.
pub fn incoming_mass(attention: &Tensor) -> Vec<f64> {
    let (n, m) = attention.shape();
    (0..m).map(|j| (0..n).map(|i| attention.get(i, j)).sum::<f64>() / n.max(1) as f64).collect()
}

/// ROIs whose incoming mass is at least `theta` (default `1.5/N`), best
/// first, capped at `k`.
pub fn activated_rois(attention: &Tensor, k: usize, theta: Option<f64>) -> Vec<usize> {
    let mass = incoming_mass(attention);
    let theta = theta.unwrap_or(ACTIVATION_FACTOR / mass.len().max(1) as f64);
    let mut idx: Vec<usize> = (0..mass.len()).filter(|&j| mass[j] >= theta).collect();
    idx.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// [`activated_rois`] for every modality's final-layer attention.
pub fn activated_rois_by_modality(
    attention: &BTreeMap<Modality, Tensor>,
    k: usize,
    theta: Option<f64>,
) -> BTreeMap<Modality, Vec<usize>> {
    attention.iter().map(|(m, a)| (*m, activated_rois(a, k, theta))).collect()
}
