//! The full extractor: encoder, scoring head, rotary encoding, loss and
//! decoding settings, plus the forward/backward composition used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecodeConfig;
use crate::encoder::{EmbeddingEncoder, Vocab};
use crate::error::{Error, Result};
use crate::heads::{EntityTypeSet, Head, HeadKind, ScoreTensor, SpanMask};
use crate::loss::{span_loss_with_grad, LabelCell, LossConfig};
use crate::numerics::{Matrix, Param};
use crate::rope::{RotaryEncoding, DEFAULT_BASE};

/// Where token representations come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSource {
    /// Trainable embedding table with optional window mixing.
    #[default]
    Builtin,
    /// Vectors supplied per sentence from a precomputed-embeddings file.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    /// Token representation width.
    pub v: usize,
    /// Query/key width.
    pub d: usize,
    pub max_span_len: Option<usize>,
    pub rope_enabled: bool,
    pub rope_base: f64,
    pub encoder: EncoderSource,
    pub mixing: bool,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            head: HeadKind::Gp,
            v: 64,
            d: 64,
            max_span_len: None,
            rope_enabled: true,
            rope_base: DEFAULT_BASE,
            encoder: EncoderSource::Builtin,
            mixing: true,
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.v == 0 || self.d == 0 {
            return Err(Error::Config("v and d must be positive".into()));
        }
        if self.rope_enabled && self.d % 2 != 0 {
            return Err(Error::Config(format!("rotary encoding needs an even d, got {}", self.d)));
        }
        if self.max_span_len == Some(0) {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Ids(&'a [u32]),
    Embeddings(&'a Matrix),
}

impl Input<'_> {
    pub fn len(&self) -> usize {
        match self {
            Input::Ids(ids) => ids.len(),
            Input::Embeddings(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub types: EntityTypeSet,
    pub encoder: Option<EmbeddingEncoder>,
    pub head: Head,
    rope: Option<RotaryEncoding>,
}

impl Model {
    /// Randomly initialised model; the encoder is drawn first, then the head.
    pub fn new(config: ModelConfig, vocab: Vocab, types: EntityTypeSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match config.encoder {
            EncoderSource::Builtin => Some(EmbeddingEncoder::new(vocab.len(), config.v, config.mixing, &mut rng)),
            EncoderSource::Precomputed => None,
        };
        let head = Head::new(config.head, types.len(), config.v, config.d, &mut rng);
        Model::assemble(config, vocab, types, encoder, head)
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(config: ModelConfig, vocab: Vocab, types: EntityTypeSet) -> Result<Self> {
        config.validate()?;
        let encoder = match config.encoder {
            EncoderSource::Builtin => Some(EmbeddingEncoder::zeros(vocab.len(), config.v, config.mixing)),
            EncoderSource::Precomputed => None,
        };
        let head = Head::zeros(config.head, types.len(), config.v, config.d);
        Model::assemble(config, vocab, types, encoder, head)
    }

    pub(crate) fn assemble(
        config: ModelConfig,
        vocab: Vocab,
        types: EntityTypeSet,
        encoder: Option<EmbeddingEncoder>,
        head: Head,
    ) -> Result<Self> {
        let rope = if config.rope_enabled {
            Some(RotaryEncoding::new(config.d, config.rope_base)?)
        } else {
            None
        };
        Ok(Model {
            config,
            vocab,
            types,
            encoder,
            head,
            rope,
        })
    }

    pub fn rope(&self) -> Option<&RotaryEncoding> {
        self.rope.as_ref()
    }

    /// Parameters in a fixed order: encoder first, then head.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.encoder.iter().flat_map(|e| e.params()).collect();
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.encoder.iter_mut().flat_map(|e| e.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.reset_grad();
        }
    }

    fn embed(&self, input: Input<'_>) -> Result<(Matrix, Option<crate::encoder::EncoderCache>)> {
        match (input, &self.encoder) {
            (Input::Ids(ids), Some(enc)) => {
                let (h, cache) = enc.forward(ids)?;
                Ok((h, Some(cache)))
            }
            (Input::Embeddings(m), _) => {
                if m.cols() != self.config.v {
                    return Err(Error::Dimension {
                        op: "precomputed embeddings",
                        left: (m.rows(), self.config.v),
                        right: m.shape(),
                    });
                }
                Ok((m.clone(), None))
            }
            (Input::Ids(_), None) => Err(Error::Invalid(
                "model reads precomputed embeddings; token ids cannot be encoded".into(),
            )),
        }
    }

    fn mask(&self, n: usize) -> SpanMask {
        SpanMask::new(n, n, self.config.max_span_len)
    }

    pub fn scores(&self, input: Input<'_>) -> Result<ScoreTensor> {
        let (h, _) = self.embed(input)?;
        self.head.score(&h, self.mask(h.rows()), self.rope.as_ref())
    }

    pub fn loss(&self, input: Input<'_>, labels: &[LabelCell]) -> Result<f64> {
        let scores = self.scores(input)?;
        span_loss_with_grad(&scores, labels, self.config.loss).map(|(l, _)| l)
    }

    /// Forward and backward for one sentence. Gradients of `scale · loss` are
    /// added to every parameter; the unscaled loss is returned.
    pub fn accumulate_gradients(&mut self, input: Input<'_>, labels: &[LabelCell], scale: f64) -> Result<f64> {
        let (h, enc_cache) = self.embed(input)?;
        let mask = self.mask(h.rows());
        let (scores, head_cache) = self.head.forward(&h, mask, self.rope.as_ref())?;
        let (loss, mut grads) = span_loss_with_grad(&scores, labels, self.config.loss)?;
        if scale != 1.0 {
            for g in &mut grads {
                g.scale(scale);
            }
        }
        let dh = self.head.backward(&head_cache, &grads)?;
        if let (Some(enc), Some(cache)) = (self.encoder.as_mut(), enc_cache) {
            enc.backward(&cache, &dh)?;
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::predict;

    fn small_config(kind: HeadKind) -> ModelConfig {
        ModelConfig {
            head: kind,
            v: 6,
            d: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_model() {
        let vocab = Vocab::build([["a", "b"].as_slice()]);
        let types = EntityTypeSet::new(["X", "Y"]).unwrap();
        let a = Model::new(small_config(HeadKind::Egp), vocab.clone(), types.clone(), 5).unwrap();
        let b = Model::new(small_config(HeadKind::Egp), vocab.clone(), types.clone(), 5).unwrap();
        let c = Model::new(small_config(HeadKind::Egp), vocab, types, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_model_scores_zero_and_predicts_nothing() {
        let vocab = Vocab::build([["a", "b", "c"].as_slice()]);
        let types = EntityTypeSet::new(["X"]).unwrap();
        for kind in HeadKind::ALL {
            let m = Model::zeroed(small_config(kind), vocab.clone(), types.clone()).unwrap();
            let ids = vocab.ids(&["a", "c", "b"]);
            let s = m.scores(Input::Ids(&ids)).unwrap();
            assert!(s.scores[0].as_slice().iter().all(|&x| x == 0.0));
            assert!(predict(&m, &["a", "c", "b"]).unwrap().is_empty());
            assert!(predict(&m, &[] as &[&str]).unwrap().is_empty());
        }
    }

    #[test]
    fn odd_d_with_rope_is_rejected() {
        let cfg = ModelConfig { d: 3, ..small_config(HeadKind::Gp) };
        let types = EntityTypeSet::new(["X"]).unwrap();
        assert!(Model::new(cfg.clone(), Vocab::default(), types.clone(), 0).is_err());
        let no_rope = ModelConfig { rope_enabled: false, ..cfg };
        assert!(Model::new(no_rope, Vocab::default(), types, 0).is_ok());
    }

    #[test]
    fn precomputed_models_take_matrices_only() {
        let cfg = ModelConfig { encoder: EncoderSource::Precomputed, ..small_config(HeadKind::Gp) };
        let types = EntityTypeSet::new(["X"]).unwrap();
        let m = Model::new(cfg, Vocab::default(), types, 1).unwrap();
        assert!(m.scores(Input::Ids(&[2, 3])).is_err());
        assert!(m.scores(Input::Embeddings(&Matrix::zeros(3, 5))).is_err());
        let t = m.scores(Input::Embeddings(&Matrix::zeros(3, 6))).unwrap();
        assert_eq!(t.mask.count(), 6);
        assert!(m.params().iter().all(|p| p.name.starts_with("head.")));
    }
}
