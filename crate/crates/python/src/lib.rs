//! Python bindings: models, training, decoding, losses, rotary encoding and
//! strict evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gpner::config::RunConfig;
use gpner::data::{label_cells, read_corpus, synth_corpus as synth, SpanAnnotation};
use gpner::decoder::{decode as decode_tensor, predict, DecodeConfig, DecodeMode};
use gpner::encoder::Vocab;
use gpner::error::Error;
use gpner::eval::{strict_f1 as strict, SentenceSpans};
use gpner::heads::{EntityTypeSet, HeadKind, ScoreTensor, SpanMask};
use gpner::loss::multilabel_loss_threshold;
use gpner::model::{Input, Model, ModelConfig};
use gpner::numerics::Matrix;
use gpner::rope::RotaryEncoding;
use gpner::train::{grad_check as check_gradients, train as run_training, Dataset};
use gpner::{checkpoint, data};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::RawIo(_) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn head_kind(name: &str) -> PyResult<HeadKind> {
    name.parse().map_err(py_err)
}

type Span = (usize, usize, String);
type ScoredSpan = (usize, usize, String, f64);

/// A trained or freshly initialised extractor.
#[pyclass(name = "Model", module = "gpner")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Random model over `vocabulary` tokens and entity `types`.
    #[new]
    #[pyo3(signature = (types, vocabulary, head = "gp", v = 64, d = 64, rope = true, seed = 0))]
    fn new(types: Vec<String>, vocabulary: Vec<String>, head: &str, v: usize, d: usize, rope: bool, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            head: head_kind(head)?,
            v,
            d,
            rope_enabled: rope,
            ..ModelConfig::default()
        };
        let types = EntityTypeSet::new(types).map_err(py_err)?;
        let inner = Model::new(cfg, Vocab::from_tokens(vocabulary), types, seed).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(path).map_err(py_err)?.model,
        })
    }

    #[pyo3(signature = (path, meta = ""))]
    fn save(&self, path: PathBuf, meta: &str) -> PyResult<()> {
        checkpoint::save(path, &self.inner, meta).map_err(py_err)
    }

    /// Spans `(start, end, type, score)` with inclusive `end`.
    #[pyo3(signature = (tokens, mode = None, threshold = None))]
    fn predict(&self, tokens: Vec<String>, mode: Option<&str>, threshold: Option<f64>) -> PyResult<Vec<ScoredSpan>> {
        let mut model = self.inner.clone();
        if let Some(m) = mode {
            model.config.decode.mode = m.parse::<DecodeMode>().map_err(py_err)?;
        }
        if let Some(t) = threshold {
            model.config.decode.threshold = t;
        }
        let p = predict(&model, &tokens).map_err(py_err)?;
        Ok(p.spans
            .iter()
            .map(|s| (s.start, s.end, model.types.name(s.ty).to_string(), s.score))
            .collect())
    }

    /// Score tensor `[type][i][j]`; invalid cells hold -1e30.
    fn scores(&self, tokens: Vec<String>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let ids = self.inner.vocab.ids(&tokens);
        let t = self.inner.scores(Input::Ids(&ids)).map_err(py_err)?;
        Ok((0..t.num_types())
            .map(|ty| {
                let m = t.masked_view(ty);
                (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
            })
            .collect())
    }

    /// Sentence loss for gold spans `(start, end, type)`.
    fn loss(&self, tokens: Vec<String>, spans: Vec<Span>) -> PyResult<f64> {
        let sentence = data::Sentence {
            id: String::new(),
            tokens,
            spans: spans.into_iter().map(|(s, e, t)| SpanAnnotation::new(s, e, t)).collect(),
        };
        let labels = label_cells(&sentence, &self.inner.types).map_err(py_err)?;
        let ids = self.inner.vocab.ids(&sentence.tokens);
        self.inner.loss(Input::Ids(&ids), &labels).map_err(py_err)
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.inner.config.head.as_str()
    }

    #[getter]
    fn types(&self) -> Vec<String> {
        self.inner.types.names().to_vec()
    }

    #[getter]
    fn v(&self) -> usize {
        self.inner.config.v
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.config.d
    }

    /// Head weights, biases excluded.
    #[getter]
    fn head_weight_count(&self) -> usize {
        self.inner.head.weight_count()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params().iter().map(|p| p.len()).sum()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(head={:?}, types={:?}, v={}, d={})",
            self.head(),
            self.types(),
            self.inner.config.v,
            self.inner.config.d
        )
    }
}

/// Trains on a JSONL or CoNLL corpus. `overrides` are `key=value` strings
/// using the run-configuration keys. Returns the model and per-epoch losses.
#[pyfunction]
#[pyo3(signature = (train_path, overrides = Vec::new(), dev_path = None))]
fn train(py: Python<'_>, train_path: PathBuf, overrides: Vec<String>, dev_path: Option<PathBuf>) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = RunConfig::load(None, &overrides).map_err(py_err)?;
    py.detach(move || {
        let policy = cfg.data.orphan_policy;
        let corpus = read_corpus(&train_path, policy)?;
        let dev = dev_path.map(|p| read_corpus(p, policy)).transpose()?;
        let vocab = Vocab::build(corpus.sentences.iter().map(|s| s.tokens.as_slice()));
        let model = Model::new(cfg.model.clone(), vocab, corpus.types.clone(), cfg.seed)?;
        let out = run_training(model, cfg.train, Dataset::new(&corpus), dev.as_ref().map(Dataset::new))?;
        Ok((PyModel { inner: out.model }, out.log.iter().map(|r| r.mean_loss).collect()))
    })
    .map_err(py_err)
}

#[pyfunction]
fn added_params(kind: &str, v: usize, d: usize) -> PyResult<usize> {
    gpner::heads::added_params_by_name(kind, v, d).map_err(py_err)
}

/// `log(e^th + Σ_neg e^s) + log(e^-th + Σ_pos e^-s)`.
#[pyfunction]
#[pyo3(signature = (pos, neg, threshold = 0.0))]
fn multilabel_loss(pos: Vec<f64>, neg: Vec<f64>, threshold: f64) -> f64 {
    multilabel_loss_threshold(&pos, &neg, threshold)
}

#[pyclass(name = "RotaryEncoding", module = "gpner")]
struct PyRotary {
    inner: RotaryEncoding,
}

#[pymethods]
impl PyRotary {
    #[new]
    #[pyo3(signature = (dim, base = gpner::rope::DEFAULT_BASE))]
    fn new(dim: usize, base: f64) -> PyResult<Self> {
        Ok(PyRotary {
            inner: RotaryEncoding::new(dim, base).map_err(py_err)?,
        })
    }

    fn rotate(&self, x: Vec<f64>, position: i64) -> PyResult<Vec<f64>> {
        self.inner.rotate(&x, position).map_err(py_err)
    }

    /// `<R_i q, R_j k>`.
    fn rel_score(&self, q: Vec<f64>, k: Vec<f64>, i: usize, j: usize) -> PyResult<f64> {
        self.inner.rel_score(&q, &k, i, j).map_err(py_err)
    }
}

/// Decodes a `[type][i][j]` score tensor of a sentence of length `n`.
#[pyfunction]
#[pyo3(signature = (scores, mode = "nested", threshold = 0.0, max_span_len = None))]
fn decode(scores: Vec<Vec<Vec<f64>>>, mode: &str, threshold: f64, max_span_len: Option<usize>) -> PyResult<Vec<(usize, usize, usize, f64)>> {
    let n = scores.first().map_or(0, Vec::len);
    let matrices = scores
        .iter()
        .map(|m| {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(PyValueError::new_err("every score matrix must be n x n"));
            }
            Matrix::from_rows(m).map_err(py_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let tensor = ScoreTensor::new(matrices, SpanMask::new(n, n, max_span_len));
    let cfg = DecodeConfig {
        mode: mode.parse().map_err(py_err)?,
        threshold,
    };
    Ok(decode_tensor(&tensor, cfg)
        .spans
        .iter()
        .map(|s| (s.start, s.end, s.ty, s.score))
        .collect())
}

/// Synthetic corpus as `(id, tokens, spans)` triples.
#[pyfunction]
#[pyo3(signature = (seed, sentences, types, nested = false))]
fn synth_corpus(seed: u64, sentences: usize, types: usize, nested: bool) -> PyResult<Vec<(String, Vec<String>, Vec<Span>)>> {
    let c = synth(seed, sentences, types, nested).map_err(py_err)?;
    Ok(c.sentences
        .into_iter()
        .map(|s| {
            let spans = s.spans.into_iter().map(|a| (a.start, a.end, a.label)).collect();
            (s.id, s.tokens, spans)
        })
        .collect())
}

fn to_sentence_spans(side: Vec<(String, Vec<Span>)>) -> Vec<SentenceSpans> {
    side.into_iter()
        .map(|(id, spans)| (id, spans.into_iter().map(|(s, e, t)| SpanAnnotation::new(s, e, t)).collect()))
        .collect()
}

/// Strict-match scores for `(id, spans)` lists on both sides.
#[pyfunction]
fn strict_f1<'py>(py: Python<'py>, gold: Vec<(String, Vec<Span>)>, pred: Vec<(String, Vec<Span>)>) -> PyResult<Bound<'py, PyDict>> {
    let r = strict(&to_sentence_spans(gold), &to_sentence_spans(pred)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("micro_p", r.micro.precision)?;
    out.set_item("micro_r", r.micro.recall)?;
    out.set_item("micro_f1", r.micro.f1)?;
    out.set_item("macro_f1", r.macro_f1)?;
    out.set_item("tp", r.micro.counts.tp)?;
    out.set_item("fp", r.micro.counts.fp)?;
    out.set_item("fn", r.micro.counts.fn_)?;
    let per_type = PyDict::new(py);
    for (name, s) in &r.per_type {
        per_type.set_item(name, s.f1)?;
    }
    out.set_item("per_type_f1", per_type)?;
    out.set_item("flags", r.flags)?;
    Ok(out)
}

/// Largest relative gradient error of a small model on a short synthetic
/// sentence.
#[pyfunction]
#[pyo3(signature = (head = "gp", v = 16, d = 8, rope = true, seed = 0))]
fn grad_check(head: &str, v: usize, d: usize, rope: bool, seed: u64) -> PyResult<f64> {
    let corpus = synth(seed, 50, 2, false).map_err(py_err)?;
    let sample = corpus
        .sentences
        .iter()
        .filter(|s| s.len() <= 6)
        .max_by_key(|s| s.spans.len())
        .ok_or_else(|| PyValueError::new_err("no short synthetic sentence for this seed"))?;
    let cfg = ModelConfig {
        head: head_kind(head)?,
        v,
        d,
        rope_enabled: rope,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, Vocab::build([sample.tokens.as_slice()]), corpus.types.clone(), seed).map_err(py_err)?;
    let ids = model.vocab.ids(&sample.tokens);
    let labels = label_cells(sample, &model.types).map_err(py_err)?;
    Ok(check_gradients(&model, Input::Ids(&ids), &labels, 1e-5)
        .map_err(py_err)?
        .max_rel_error)
}

#[pymodule]
#[pyo3(name = "gpner")]
fn gpner_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyRotary>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(added_params, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_loss, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(strict_f1, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
