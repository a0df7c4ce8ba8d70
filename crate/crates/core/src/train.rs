//! Adam optimisation, the epoch loop and the finite-difference gradient check.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Corpus};
use crate::decoder::predict_corpus;
use crate::encoder::PrecomputedEmbeddings;
use crate::error::{Error, Result};
use crate::eval::strict_f1;
use crate::loss::LabelCell;
use crate::model::{Input, Model};
use crate::numerics::{Matrix, Param};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Score the training set after every epoch.
    pub track_train_f1: bool,
    /// Stop once training micro-F1 reaches this value. Implies `track_train_f1`.
    pub target_train_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::standard()
    }
}

impl TrainConfig {
    pub fn standard() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            clip_norm: None,
            track_train_f1: false,
            target_train_f1: None,
        }
    }

    pub fn synthetic() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            ..TrainConfig::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(TrainConfig::standard()),
            "synthetic" => Ok(TrainConfig::synthetic()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected standard or synthetic)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {x}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("eps", self.eps)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::from(&TrainConfig::standard())
    }
}

/// Moment estimates, one pair per parameter in `Model::params` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Param]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState { m: zeros(), u: zeros(), t: 0 }
    }
}

/// Bias-corrected Adam update, then gradients are reset to zero.
pub fn adam_step(params: &mut [&mut Param], state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "optimizer tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), u) in params.iter_mut().zip(&mut state.m).zip(&mut state.u) {
        if m.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: m.shape(),
                right: p.value.shape(),
            });
        }
        let g = p.grad.as_slice();
        let w = p.value.as_mut_slice();
        for (k, ((mk, uk), wk)) in m.as_mut_slice().iter_mut().zip(u.as_mut_slice()).zip(w).enumerate() {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g[k];
            *uk = cfg.beta2 * *uk + (1.0 - cfg.beta2) * g[k] * g[k];
            *wk -= lr * (*mk / c1) / ((*uk / c2).sqrt() + cfg.eps);
        }
        p.reset_grad();
    }
    Ok(())
}

fn clip_gradients(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

/// Training data with optional precomputed vectors keyed by sentence id.
#[derive(Clone, Copy, Debug)]
pub struct Dataset<'a> {
    pub corpus: &'a Corpus,
    pub embeddings: Option<&'a PrecomputedEmbeddings>,
}

impl<'a> Dataset<'a> {
    pub fn new(corpus: &'a Corpus) -> Self {
        Dataset { corpus, embeddings: None }
    }

    pub fn with_embeddings(corpus: &'a Corpus, embeddings: &'a PrecomputedEmbeddings) -> Self {
        Dataset {
            corpus,
            embeddings: Some(embeddings),
        }
    }

    pub fn micro_f1(&self, model: &Model) -> Result<f64> {
        let pred = predict_corpus(model, self.corpus, self.embeddings)?;
        let pred: Vec<_> = pred
            .into_iter()
            .map(|(id, p)| (id, p.annotations(&model.types)))
            .collect();
        Ok(strict_f1(&self.corpus.gold(), &pred)?.micro.f1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sentence loss over the epoch.
    pub mean_loss: f64,
    pub train_f1: Option<f64>,
    pub dev_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// First epoch whose training micro-F1 met the target, if any.
    pub reached_target: Option<usize>,
}

pub struct Trainer<'a> {
    pub model: Model,
    pub config: TrainConfig,
    state: AdamState,
    train: Dataset<'a>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, train: Dataset<'a>) -> Result<Self> {
        config.validate()?;
        if train.corpus.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        if train.corpus.types.is_empty() {
            return Err(Error::Invalid("training corpus has no entity types".into()));
        }
        if let Some(e) = train.embeddings {
            e.validate(train.corpus.sentences.iter().map(|s| (s.id.as_str(), s.len())))?;
        }
        let state = AdamState::new(&model.params());
        Ok(Trainer {
            model,
            config,
            state,
            train,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled training set. Returns the mean sentence loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epoch;
        let batches = make_batches(
            self.train.corpus,
            &self.model.vocab,
            &self.model.types,
            self.config.batch_size,
            self.config.seed,
            epoch,
            self.model.config.max_span_len,
        )?;
        let adam = AdamConfig::from(&self.config);
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for k in 0..batch.len() {
                let ids = &batch.token_ids[k][..batch.lengths[k]];
                let input = match self.train.embeddings {
                    Some(e) => Input::Embeddings(e.get(&self.train.corpus.sentences[batch.sentence_indices[k]].id)?),
                    None => Input::Ids(ids),
                };
                batch_loss += self.model.accumulate_gradients(input, &batch.labels[k], scale)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += batch_loss;
            count += batch.len();
            let mut params = self.model.params_mut();
            if let Some(c) = self.config.clip_norm {
                clip_gradients(&mut params, c);
            }
            adam_step(&mut params, &mut self.state, self.config.learning_rate, adam)?;
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }
}

/// Full training run. With a dev set the best-dev parameters are returned
/// (earliest epoch on ties); otherwise the final ones.
pub fn train(model: Model, config: TrainConfig, data: Dataset<'_>, dev: Option<Dataset<'_>>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, config, data)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut reached_target = None;
    for epoch in 0..config.epochs {
        let mean_loss = trainer.run_epoch()?;
        let train_f1 = if config.track_train_f1 || config.target_train_f1.is_some() {
            Some(data.micro_f1(&trainer.model)?)
        } else {
            None
        };
        let dev_f1 = dev.map(|d| d.micro_f1(&trainer.model)).transpose()?;
        log::info!(
            "epoch {epoch}: loss {mean_loss:.6}{}{}",
            train_f1.map(|f| format!(" train-F1 {f:.4}")).unwrap_or_default(),
            dev_f1.map(|f| format!(" dev-F1 {f:.4}")).unwrap_or_default()
        );
        log.push(EpochRecord {
            epoch,
            mean_loss,
            train_f1,
            dev_f1,
        });
        if let Some(f) = dev_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                best = Some((f, epoch, trainer.model.clone()));
            }
        }
        if let (Some(target), Some(f)) = (config.target_train_f1, train_f1) {
            if f >= target {
                reached_target = Some(epoch);
                break;
            }
        }
    }
    let last = log.len() - 1;
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (trainer.model, last),
    };
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        reached_target,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<GradCheckEntry>,
}

/// `|g − fd| / max(|fd|, 1e-2)`; a value ≤ 1e-4 means
/// `|g − fd| ≤ max(1e-4·|fd|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-2)
}

pub fn grad_check(model: &Model, input: Input<'_>, labels: &[LabelCell], h: f64) -> Result<GradCheckReport> {
    grad_check_with(model, input, labels, h, |_| {})
}

/// Like [`grad_check`], with `tamper` applied to the model after backward so
/// the harness itself can be tested against corrupted gradients.
pub fn grad_check_with(
    model: &Model,
    input: Input<'_>,
    labels: &[LabelCell],
    h: f64,
    tamper: impl FnOnce(&mut Model),
) -> Result<GradCheckReport> {
    let mut analytic = model.clone();
    analytic.zero_grads();
    analytic.accumulate_gradients(input, labels, 1.0)?;
    tamper(&mut analytic);
    let grads: Vec<(String, Matrix)> = analytic
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (pi, (name, grad)) in grads.iter().enumerate() {
        let cols = grad.cols();
        for k in 0..grad.len() {
            let original = probe.params()[pi].value.as_slice()[k];
            probe.params_mut()[pi].value.as_mut_slice()[k] = original + h;
            let up = probe.loss(input, labels)?;
            probe.params_mut()[pi].value.as_mut_slice()[k] = original - h;
            let down = probe.loss(input, labels)?;
            probe.params_mut()[pi].value.as_mut_slice()[k] = original;
            let numeric = (up - down) / (2.0 * h);
            let g = grad.as_slice()[k];
            let rel = relative_error(g, numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(GradCheckEntry {
                    param: name.clone(),
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    analytic: g,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
