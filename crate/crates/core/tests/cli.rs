use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gpner::checkpoint;
use gpner::data::{read_jsonl, synth_corpus, write_jsonl};
use gpner::encoder::Vocab;
use gpner::eval::parse_kv;
use gpner::heads::HeadKind;
use gpner::model::{Model, ModelConfig};
use serde_json::Value;

fn gpner(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpner"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        gpner(self.dir.path(), args)
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
        o
    }

    fn train_small(&self, data: &str, out: &str, kind: &str) {
        self.ok(&[
            "train", "--train", data, "--out-dir", out, "--seed", "3", "--set", "preset=synthetic",
            "--set", "train.epochs=20", "--set", "encoder.v=16", "--set", "head.d=8",
            "--set", &format!("head.kind={kind}"),
        ]);
    }
}

fn predictions(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn span_set(v: &Value) -> BTreeSet<(u64, u64, String)> {
    v["entities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["start"].as_u64().unwrap(), e["end"].as_u64().unwrap(), e["type"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn missing_corpus_exits_2_and_names_the_path() {
    let ws = Workspace::new();
    let o = ws.run(&["train", "--train", "no/such/corpus.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/corpus.jsonl"));
}

#[test]
fn usage_errors_exit_2() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ws.run(&["bench", "--set", "head.knd=gp"]).status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_convert_round_trips() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--seed", "5", "--sentences", "30", "--output", "a.jsonl"]);
    ws.ok(&["synth", "--seed", "5", "--sentences", "30", "--output", "b.jsonl"]);
    let a = std::fs::read(ws.path("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(ws.path("b.jsonl")).unwrap());
    ws.ok(&["convert", "--input", "a.jsonl", "--output", "a.conll"]);
    ws.ok(&["convert", "--input", "a.conll", "--output", "c.jsonl"]);
    assert_eq!(read_jsonl(ws.path("c.jsonl")).unwrap().sentences, read_jsonl(ws.path("a.jsonl")).unwrap().sentences);
}

#[test]
fn train_eval_predict_pipeline() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--seed", "8", "--sentences", "40", "--nested", "--output", "train.jsonl"]);
    ws.train_small("train.jsonl", "run", "egp");
    for f in ["model.ckpt", "epochs.tsv", "config.toml", "train_summary.kv"] {
        assert!(ws.path("run").join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(ws.path("run/epochs.tsv")).unwrap();
    assert!(log.contains("# seed = 3"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 21);

    ws.ok(&["eval", "--checkpoint", "run/model.ckpt", "--data", "train.jsonl", "--buckets", "sentence_length,entity_length,density", "--out-dir", "ev"]);
    let report = std::fs::read_to_string(ws.path("ev/report.kv")).unwrap();
    assert!(report.contains("# head.kind = \"egp\"") && report.contains("# encoder.v = 16"));
    let kv = parse_kv(&report).unwrap();
    for key in ["micro.p", "micro.r", "micro.f1", "macro.f1", "per_type.PER.f1"] {
        assert!(kv.contains_key(key), "{key} missing");
    }
    for axis in ["sentence_length", "entity_length", "density"] {
        assert!(kv.keys().any(|k| k.starts_with(&format!("bucket.{axis}."))));
    }
    assert!(kv.keys().all(|k| k.starts_with("micro.")
        || k.starts_with("macro.")
        || k.starts_with("per_type.")
        || k.starts_with("bucket.")
        || k == "sentences"
        || k == "flags"));
    let f1: f64 = kv["micro.f1"].parse().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    ws.ok(&["predict", "--checkpoint", "run/model.ckpt", "--input", "train.jsonl", "--mode", "nested", "--out-dir", "nested"]);
    ws.ok(&["predict", "--checkpoint", "run/model.ckpt", "--input", "train.jsonl", "--mode", "flat", "--out-dir", "flat"]);
    let sidecar = std::fs::read_to_string(ws.path("flat/predictions.config.toml")).unwrap();
    assert!(sidecar.contains("decode.mode = \"flat\"") && sidecar.contains("head.d = 8"));
    let nested = predictions(&ws.path("nested/predictions.jsonl"));
    let flat = predictions(&ws.path("flat/predictions.jsonl"));
    assert_eq!(nested.len(), 40);
    for (n, f) in nested.iter().zip(&flat) {
        assert_eq!(n["id"], f["id"]);
        let fs = span_set(f);
        assert!(fs.is_subset(&span_set(n)));
        let v: Vec<_> = fs.into_iter().collect();
        for (a, b) in v.iter().zip(v.iter().skip(1)) {
            assert!(a.1 < b.0, "flat spans overlap: {a:?} {b:?}");
        }
        assert!(f["entities"].as_array().unwrap().iter().all(|e| e["score"].as_f64().unwrap() > 0.0));
    }
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--sentences", "10", "--output", "t.jsonl"]);
    ws.train_small("t.jsonl", "run", "gp");
    let o = ws.run(&["eval", "--checkpoint", "run/model.ckpt", "--data", "t.jsonl", "--set", "head.d=16"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("head.d"));
}

#[test]
fn zero_model_scores_zero_with_flags() {
    let ws = Workspace::new();
    let corpus = synth_corpus(2, 10, 2, false).unwrap();
    write_jsonl(ws.path("t.jsonl"), &corpus.sentences).unwrap();
    let vocab = Vocab::build(corpus.sentences.iter().map(|s| s.tokens.as_slice()));
    let cfg = ModelConfig { head: HeadKind::EgpH, v: 8, d: 4, ..ModelConfig::default() };
    let model = Model::zeroed(cfg, vocab, corpus.types.clone()).unwrap();
    checkpoint::save(ws.path("zero.ckpt"), &model, "").unwrap();
    ws.ok(&["eval", "--checkpoint", "zero.ckpt", "--data", "t.jsonl", "--out-dir", "ev"]);
    let kv = parse_kv(&std::fs::read_to_string(ws.path("ev/report.kv")).unwrap()).unwrap();
    assert_eq!(kv["micro.f1"], "0");
    assert!(kv["flags"].split(',').any(|f| f == "micro.p"));
}

#[test]
fn empty_input_gives_empty_output() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--sentences", "10", "--output", "t.jsonl"]);
    ws.train_small("t.jsonl", "run", "gp");
    std::fs::write(ws.path("empty.txt"), "").unwrap();
    ws.ok(&["predict", "--checkpoint", "run/model.ckpt", "--input", "empty.txt", "--out-dir", "p"]);
    assert_eq!(std::fs::read_to_string(ws.path("p/predictions.jsonl")).unwrap(), "");
}

#[test]
fn gradcheck_and_bench_report() {
    let ws = Workspace::new();
    let o = ws.ok(&["gradcheck", "--set", "encoder.v=12", "--set", "head.d=6"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let err: f64 = line.split("max relative error ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        assert!(err <= 1e-4, "{line}");
    }
    let o = ws.ok(&["bench", "--reps", "1", "--set", "encoder.v=8", "--set", "head.d=4"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for kind in ["gp", "egp", "egp-h"] {
        assert_eq!(text.lines().filter(|l| l.split_whitespace().next() == Some(kind)).count(), 12);
    }
}
