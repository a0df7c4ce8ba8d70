//! Run configuration: a TOML document with dotted keys, command-line
//! `key=value` overrides and a resolved echo written next to every artifact.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 0 |
//! | `preset` | `"standard"` (or `"synthetic"`) |
//! | `data.train`, `data.dev`, `data.test` | unset |
//! | `data.train_embeddings`, `data.dev_embeddings`, `data.test_embeddings` | unset |
//! | `data.orphan_policy` | `"repair"` |
//! | `encoder.source` | `"builtin"` |
//! | `encoder.v` | 64 |
//! | `encoder.mixing` | true |
//! | `head.kind` | `"gp"` |
//! | `head.d` | 64 |
//! | `head.max_span_len` | unset |
//! | `rope.enabled` | true |
//! | `rope.base` | 10000 |
//! | `loss.kind` | `"global-pointer"` |
//! | `loss.threshold` | 0 |
//! | `decode.mode` | `"nested"` |
//! | `decode.threshold` | 0 |
//! | `train.epochs`, `train.batch_size`, `train.learning_rate` | from the preset |
//! | `train.beta1`, `train.beta2`, `train.eps` | 0.9, 0.999, 1e-8 |
//! | `train.clip_norm` | unset |
//! | `train.track_train_f1` | false |
//! | `train.target_train_f1` | unset |
//!
//! Relative paths are taken relative to the working directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use toml::Value;

use crate::data::OrphanPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub train_embeddings: Option<PathBuf>,
    pub dev_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    pub orphan_policy: OrphanPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(BTreeMap::new()).expect("defaults are valid")
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("x = {value}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

struct Fields(BTreeMap<String, Value>);

impl Fields {
    fn take<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>> {
        self.0
            .remove(key)
            .map(|v| {
                let shown = v.to_string();
                v.try_into::<T>()
                    .map_err(|e| Error::Config(format!("bad value {shown} for `{key}`: {e}")))
            })
            .transpose()
    }

    fn set<T: DeserializeOwned>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_opt<T: DeserializeOwned>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = Some(v);
        }
        Ok(())
    }
}

impl RunConfig {
    /// Loads `path` (if given) and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        RunConfig::load_with_keys(path, overrides).map(|(c, _)| c)
    }

    /// Like [`RunConfig::load`], also returning the keys that were set
    /// explicitly rather than defaulted.
    pub fn load_with_keys(path: Option<&Path>, overrides: &[String]) -> Result<(Self, BTreeSet<String>)> {
        let mut fields = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            flatten("", table, &mut fields);
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            fields.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let keys = fields.keys().cloned().collect();
        Ok((RunConfig::resolve(fields)?, keys))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut fields = BTreeMap::new();
        flatten("", table, &mut fields);
        RunConfig::resolve(fields)
    }

    fn resolve(fields: BTreeMap<String, Value>) -> Result<Self> {
        let mut f = Fields(fields);
        let seed: u64 = f.take("seed")?.unwrap_or(0);
        let preset: String = f.take("preset")?.unwrap_or_else(|| "standard".into());

        let mut model = ModelConfig::default();
        f.set("encoder.source", &mut model.encoder)?;
        f.set("encoder.v", &mut model.v)?;
        f.set("encoder.mixing", &mut model.mixing)?;
        f.set("head.kind", &mut model.head)?;
        f.set("head.d", &mut model.d)?;
        f.set_opt("head.max_span_len", &mut model.max_span_len)?;
        f.set("rope.enabled", &mut model.rope_enabled)?;
        f.set("rope.base", &mut model.rope_base)?;
        f.set("loss.kind", &mut model.loss.kind)?;
        f.set("loss.threshold", &mut model.loss.threshold)?;
        f.set("decode.mode", &mut model.decode.mode)?;
        f.set("decode.threshold", &mut model.decode.threshold)?;

        let mut train = TrainConfig::preset(&preset)?;
        train.seed = seed;
        f.set("train.epochs", &mut train.epochs)?;
        f.set("train.batch_size", &mut train.batch_size)?;
        f.set("train.learning_rate", &mut train.learning_rate)?;
        f.set("train.beta1", &mut train.beta1)?;
        f.set("train.beta2", &mut train.beta2)?;
        f.set("train.eps", &mut train.eps)?;
        f.set_opt("train.clip_norm", &mut train.clip_norm)?;
        f.set("train.track_train_f1", &mut train.track_train_f1)?;
        f.set_opt("train.target_train_f1", &mut train.target_train_f1)?;

        let mut data = DataPaths::default();
        f.set_opt("data.train", &mut data.train)?;
        f.set_opt("data.dev", &mut data.dev)?;
        f.set_opt("data.test", &mut data.test)?;
        f.set_opt("data.train_embeddings", &mut data.train_embeddings)?;
        f.set_opt("data.dev_embeddings", &mut data.dev_embeddings)?;
        f.set_opt("data.test_embeddings", &mut data.test_embeddings)?;
        f.set("data.orphan_policy", &mut data.orphan_policy)?;

        if let Some(k) = f.0.keys().next() {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        model.validate()?;
        train.validate()?;
        Ok(RunConfig {
            seed,
            preset,
            model,
            train,
            data,
        })
    }

    /// Every resolved key, sorted, as `(key, TOML value)`.
    pub fn entries(&self) -> Vec<(String, Value)> {
        fn v<T: serde::Serialize>(x: &T) -> Value {
            Value::try_from(x).expect("configuration values serialise")
        }
        fn path(p: &Option<PathBuf>) -> Option<Value> {
            p.as_ref().map(|p| Value::String(p.display().to_string()))
        }
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut out: Vec<(&str, Option<Value>)> = vec![
            ("seed", Some(Value::Integer(self.seed as i64))),
            ("preset", Some(v(&self.preset))),
            ("encoder.source", Some(v(&m.encoder))),
            ("encoder.v", Some(v(&m.v))),
            ("encoder.mixing", Some(v(&m.mixing))),
            ("head.kind", Some(v(&m.head))),
            ("head.d", Some(v(&m.d))),
            ("head.max_span_len", m.max_span_len.map(|x| v(&x))),
            ("rope.enabled", Some(v(&m.rope_enabled))),
            ("rope.base", Some(v(&m.rope_base))),
            ("loss.kind", Some(v(&m.loss.kind))),
            ("loss.threshold", Some(v(&m.loss.threshold))),
            ("decode.mode", Some(v(&m.decode.mode))),
            ("decode.threshold", Some(v(&m.decode.threshold))),
            ("train.epochs", Some(v(&t.epochs))),
            ("train.batch_size", Some(v(&t.batch_size))),
            ("train.learning_rate", Some(v(&t.learning_rate))),
            ("train.beta1", Some(v(&t.beta1))),
            ("train.beta2", Some(v(&t.beta2))),
            ("train.eps", Some(v(&t.eps))),
            ("train.clip_norm", t.clip_norm.map(|x| v(&x))),
            ("train.track_train_f1", Some(v(&t.track_train_f1))),
            ("train.target_train_f1", t.target_train_f1.map(|x| v(&x))),
            ("data.train", path(&d.train)),
            ("data.dev", path(&d.dev)),
            ("data.test", path(&d.test)),
            ("data.train_embeddings", path(&d.train_embeddings)),
            ("data.dev_embeddings", path(&d.dev_embeddings)),
            ("data.test_embeddings", path(&d.test_embeddings)),
            ("data.orphan_policy", Some(v(&d.orphan_policy))),
        ];
        out.sort_by(|a, b| a.0.cmp(b.0));
        out.into_iter()
            .filter_map(|(k, val)| val.map(|val| (k.to_string(), val)))
            .collect()
    }

    /// Resolved configuration as a TOML document of dotted keys; reading it
    /// back yields the same configuration.
    pub fn to_toml(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
