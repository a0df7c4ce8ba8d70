//! Multi-label loss with a threshold class.
//!
//! For one entity type the positives are the labeled span cells and the
//! negatives are every other valid cell. The loss pushes positives above the
//! threshold score `s_TH` and negatives below it:
//!
//! ```text
//! log(e^{s_TH} + Σ_neg e^{s_i}) + log(e^{-s_TH} + Σ_pos e^{-s_j})
//! ```
//!
//! With `s_TH = 0` this is `log(1 + Σ_neg e^{s_i}) + log(1 + Σ_pos e^{-s_j})`.
//! A sentence's loss sums this over entity types.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{EntityTypeSet, ScoreTensor};
use crate::numerics::{logsumexp0, logsumexp_anchored, logsumexp_anchored_grad, sigmoid, softplus, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    #[serde(rename = "global-pointer")]
    GlobalPointer,
    /// Independent binary cross-entropy on `sigmoid(s)` for every cell.
    #[serde(rename = "bce")]
    Bce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::GlobalPointer => "global-pointer",
            LossKind::Bce => "bce",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global-pointer" => Ok(LossKind::GlobalPointer),
            "bce" => Ok(LossKind::Bce),
            other => Err(Error::Invalid(format!("unknown loss kind `{other}`"))),
        }
    }
}

/// `log(1 + Σ_neg e^{s}) + log(1 + Σ_pos e^{-s})`.
pub fn multilabel_loss(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    let negated: Vec<f64> = pos_scores.iter().map(|s| -s).collect();
    logsumexp0(neg_scores) + logsumexp0(&negated)
}

/// Gradients of [`multilabel_loss`] as `(∂L/∂pos, ∂L/∂neg)`.
pub fn multilabel_loss_grad(pos_scores: &[f64], neg_scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    multilabel_loss_threshold_grad(pos_scores, neg_scores, 0.0)
}

/// Threshold-class form, evaluated in its factored two-term shape.
pub fn multilabel_loss_threshold(pos_scores: &[f64], neg_scores: &[f64], threshold: f64) -> f64 {
    let negated: Vec<f64> = pos_scores.iter().map(|s| -s).collect();
    logsumexp_anchored(threshold, neg_scores) + logsumexp_anchored(-threshold, &negated)
}

pub fn multilabel_loss_threshold_grad(
    pos_scores: &[f64],
    neg_scores: &[f64],
    threshold: f64,
) -> (Vec<f64>, Vec<f64>) {
    let negated: Vec<f64> = pos_scores.iter().map(|s| -s).collect();
    let dpos = logsumexp_anchored_grad(-threshold, &negated)
        .into_iter()
        .map(|g| -g)
        .collect();
    let dneg = logsumexp_anchored_grad(threshold, neg_scores);
    (dpos, dneg)
}

/// Loss selection shared by training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::GlobalPointer,
            threshold: 0.0,
        }
    }
}

/// A labeled cell `(start, end, type index)`; `end` is inclusive.
pub type LabelCell = (usize, usize, usize);

/// Positive and negative cells for each type.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSets {
    pub positives: Vec<Vec<(usize, usize)>>,
    pub negatives: Vec<Vec<(usize, usize)>>,
    pub threshold: f64,
}

impl LossSets {
    pub fn build(scores: &ScoreTensor, labels: &[LabelCell], threshold: f64) -> Result<Self> {
        let types = scores.num_types();
        let mut pos: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); types];
        for &(start, end, ty) in labels {
            if ty >= types {
                return Err(Error::UnknownType(format!("#{ty}")));
            }
            if !scores.mask.is_valid(start, end) {
                return Err(Error::Invalid(format!(
                    "label span ({start}, {end}) lies outside the valid cells (length {}{})",
                    scores.mask.true_len(),
                    scores
                        .mask
                        .max_span()
                        .map(|m| format!(", max span {m}"))
                        .unwrap_or_default()
                )));
            }
            pos[ty].insert((start, end));
        }
        let negatives = pos
            .iter()
            .map(|p| scores.mask.cells().filter(|c| !p.contains(c)).collect())
            .collect();
        Ok(LossSets {
            positives: pos.into_iter().map(|p| p.into_iter().collect()).collect(),
            negatives,
            threshold,
        })
    }
}

/// Sentence loss and its gradient with respect to every score cell.
/// Gradients of masked cells are exactly zero.
pub fn span_loss_with_grad(
    scores: &ScoreTensor,
    labels: &[LabelCell],
    config: LossConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let sets = LossSets::build(scores, labels, config.threshold)?;
    let n = scores.mask.n();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scores.num_types());
    for (ty, m) in scores.scores.iter().enumerate() {
        let pos: Vec<f64> = sets.positives[ty].iter().map(|&c| m[c]).collect();
        let neg: Vec<f64> = sets.negatives[ty].iter().map(|&c| m[c]).collect();
        let mut g = Matrix::zeros(n, n);
        match config.kind {
            LossKind::GlobalPointer => {
                total += multilabel_loss_threshold(&pos, &neg, config.threshold);
                let (dpos, dneg) = multilabel_loss_threshold_grad(&pos, &neg, config.threshold);
                for (&c, d) in sets.positives[ty].iter().zip(dpos) {
                    g[c] = d;
                }
                for (&c, d) in sets.negatives[ty].iter().zip(dneg) {
                    g[c] = d;
                }
            }
            LossKind::Bce => {
                for (&c, &s) in sets.positives[ty].iter().zip(&pos) {
                    total += softplus(-s);
                    g[c] = sigmoid(s) - 1.0;
                }
                for (&c, &s) in sets.negatives[ty].iter().zip(&neg) {
                    total += softplus(s);
                    g[c] = sigmoid(s);
                }
            }
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Global-pointer loss of one sentence, summed over entity types.
pub fn span_loss(
    scores: &ScoreTensor,
    labels: &[crate::data::SpanAnnotation],
    types: &EntityTypeSet,
) -> Result<f64> {
    let cells = labels
        .iter()
        .map(|s| Ok((s.start, s.end, types.index_of(&s.label)?)))
        .collect::<Result<Vec<_>>>()?;
    span_loss_with_grad(scores, &cells, LossConfig::default()).map(|(l, _)| l)
}
