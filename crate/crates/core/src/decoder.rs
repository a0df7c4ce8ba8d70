//! Turning score tensors into spans.
//!
//! A span of type α is emitted when its score is above the threshold (0 by
//! default). Nested mode keeps every such cell; flat mode then greedily keeps
//! the highest-scoring spans that do not share a token with an already kept
//! span.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SpanAnnotation};
use crate::encoder::PrecomputedEmbeddings;
use crate::error::{Error, Result};
use crate::heads::{EntityTypeSet, ScoreTensor};
use crate::model::{Input, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Nested,
    Flat,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Nested => "nested",
            DecodeMode::Flat => "flat",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nested" => Ok(DecodeMode::Nested),
            "flat" => Ok(DecodeMode::Flat),
            other => Err(Error::Invalid(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Nested,
            threshold: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub ty: usize,
    pub score: f64,
}

impl ScoredSpan {
    fn overlaps(&self, other: &ScoredSpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// Decoded spans, ordered by `(start, end, type)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub spans: Vec<ScoredSpan>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn annotations(&self, types: &EntityTypeSet) -> Vec<SpanAnnotation> {
        self.spans
            .iter()
            .map(|s| SpanAnnotation::new(s.start, s.end, types.name(s.ty)))
            .collect()
    }

    fn sort(&mut self) {
        self.spans.sort_by_key(|s| (s.start, s.end, s.ty));
    }
}

/// Every valid cell whose score exceeds `threshold`, across all types.
pub fn decode_nested(scores: &ScoreTensor, threshold: f64) -> Prediction {
    let mut spans = Vec::new();
    for (i, j) in scores.mask.cells() {
        for (ty, m) in scores.scores.iter().enumerate() {
            let s = m[(i, j)];
            if s > threshold {
                spans.push(ScoredSpan { start: i, end: j, ty, score: s });
            }
        }
    }
    let mut p = Prediction { spans };
    p.sort();
    p
}

/// Greedy overlap removal: descending score, ties broken by smaller start,
/// then smaller end, then type order.
pub fn decode_flat(pred: &Prediction) -> Prediction {
    let mut candidates = pred.spans.clone();
    candidates.sort_by(flat_priority);
    let mut kept: Vec<ScoredSpan> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| !k.overlaps(&c)) {
            kept.push(c);
        }
    }
    let mut p = Prediction { spans: kept };
    p.sort();
    p
}

pub fn decode(scores: &ScoreTensor, config: DecodeConfig) -> Prediction {
    let nested = decode_nested(scores, config.threshold);
    match config.mode {
        DecodeMode::Nested => nested,
        DecodeMode::Flat => decode_flat(&nested),
    }
}

/// Encodes, scores and decodes one tokenised sentence with the model's
/// decoding settings.
pub fn predict<S: AsRef<str>>(model: &Model, tokens: &[S]) -> Result<Prediction> {
    let ids = model.vocab.ids(tokens);
    predict_input(model, Input::Ids(&ids))
}

pub fn predict_input(model: &Model, input: Input<'_>) -> Result<Prediction> {
    if input.len() == 0 {
        return Ok(Prediction::default());
    }
    let scores = model.scores(input)?;
    Ok(decode(&scores, model.config.decode))
}

/// Predictions for every sentence of a corpus, in corpus order. Sentences are
/// scored in parallel.
pub fn predict_corpus(
    model: &Model,
    corpus: &Corpus,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<Vec<(String, Prediction)>> {
    corpus
        .sentences
        .par_iter()
        .map(|s| {
            let pred = match embeddings {
                Some(e) => predict_input(model, Input::Embeddings(e.get(&s.id)?))?,
                None => predict(model, &s.tokens)?,
            };
            Ok((s.id.clone(), pred))
        })
        .collect()
}

/// Ordering used by the flat decoder, exposed for tests and tooling.
pub fn flat_priority(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
        .then(a.ty.cmp(&b.ty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::SpanMask;
    use crate::numerics::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn tensor(types: usize, n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> ScoreTensor {
        let scores = (0..types)
            .map(|t| {
                let mut m = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        m[(i, j)] = f(t, i, j);
                    }
                }
                m
            })
            .collect();
        ScoreTensor::new(scores, SpanMask::full(n))
    }

    fn span(start: usize, end: usize, ty: usize, score: f64) -> ScoredSpan {
        ScoredSpan { start, end, ty, score }
    }

    #[test]
    fn negative_scores_decode_to_nothing() {
        assert!(decode_nested(&tensor(2, 4, |_, _, _| -0.5), 0.0).is_empty());
    }

    #[test]
    fn single_positive_cell() {
        let t = tensor(2, 3, |ty, i, j| if (ty, i, j) == (0, 0, 1) { 2.5 } else { -1.0 });
        let p = decode_nested(&t, 0.0);
        assert_eq!(p.spans, vec![span(0, 1, 0, 2.5)]);
    }

    #[test]
    fn masked_cells_are_never_decoded() {
        let mut t = tensor(1, 4, |_, i, j| if i > j { 1e300 } else { -1.0 });
        t.mask = SpanMask::new(4, 3, None);
        t.scores[0][(0, 3)] = 1e300;
        assert!(decode_nested(&t, 0.0).is_empty());
    }

    #[test]
    fn nested_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = tensor(3, 6, |_, _, _| rng.gen_range(-1.0..1.0));
            let got: BTreeSet<(usize, usize, usize)> =
                decode_nested(&t, 0.0).spans.iter().map(|s| (s.start, s.end, s.ty)).collect();
            let mut want = BTreeSet::new();
            for ty in 0..3 {
                for i in 0..6 {
                    for j in 0..6 {
                        if i <= j && t.get(ty, i, j) > 0.0 {
                            want.insert((i, j, ty));
                        }
                    }
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn flat_cases() {
        let disjoint = Prediction { spans: vec![span(0, 1, 0, 1.0), span(2, 2, 1, 0.5)] };
        assert_eq!(decode_flat(&disjoint), disjoint);
        let clash = Prediction { spans: vec![span(0, 2, 0, 3.0), span(1, 1, 1, 1.0)] };
        assert_eq!(decode_flat(&clash).spans, vec![span(0, 2, 0, 3.0)]);
        let tie = Prediction { spans: vec![span(1, 2, 1, 1.0), span(1, 2, 0, 1.0), span(0, 1, 0, 1.0)] };
        assert_eq!(decode_flat(&tie).spans, vec![span(0, 1, 0, 1.0)]);
    }

    #[test]
    fn raising_threshold_never_adds_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = tensor(2, 7, |_, _, _| rng.gen_range(-2.0..2.0));
        let mut prev = usize::MAX;
        for th in [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5] {
            let n = decode_nested(&t, th).len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn mode_strings() {
        assert_eq!("flat".parse::<DecodeMode>().unwrap(), DecodeMode::Flat);
        assert!("bio".parse::<DecodeMode>().is_err());
    }
}
