//! The `gpner` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bench;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    label_cells, read_corpus, read_token_lines, synth_corpus, write_conll_bio, write_jsonl, Corpus, Format, Sentence,
    Split,
};
use crate::decoder::{predict_corpus, DecodeMode, Prediction};
use crate::encoder::{load_precomputed, PrecomputedEmbeddings, Vocab};
use crate::error::{Error, Result};
use crate::eval::{bucket_report, bucket_table, format_kv, kv_report, strict_f1, BucketAxis};
use crate::heads::{EntityTypeSet, HeadKind};
use crate::model::{EncoderSource, Input, Model};
use crate::train::{grad_check, train, Dataset, EpochRecord};

#[derive(Parser, Debug)]
#[command(name = "gpner", version, about = "Span-based named-entity extraction with Global Pointer heads")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for parallel scoring (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint with its epoch log.
    Train(TrainArgs),
    /// Score a checkpoint against a gold corpus.
    Eval(EvalArgs),
    /// Write span predictions for an input file.
    Predict(PredictArgs),
    /// Convert between span JSONL and CoNLL BIO.
    Convert(ConvertArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Time scoring and decoding across lengths and type counts.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training corpus (overrides `data.train`).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development corpus for best-model selection (overrides `data.dev`).
    #[arg(long)]
    pub dev: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Gold corpus (defaults to `data.test`, then `data.dev`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Precomputed vectors for the gold corpus.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Comma-separated bucket axes: sentence_length, entity_length, density.
    #[arg(long, value_delimiter = ',')]
    pub buckets: Vec<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sentences to tag: JSONL, CoNLL, or `.txt` with one tokenised sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// nested or flat (overrides the checkpoint's setting).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; `.jsonl`/`.json` selects JSONL, anything else CoNLL.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub sentences: usize,
    #[arg(long, default_value_t = 3)]
    pub types: usize,
    #[arg(long)]
    pub nested: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Head kinds to check; all three when omitted.
    #[arg(long, value_delimiter = ',')]
    pub head: Vec<HeadKind>,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Runs a parsed command; returns the exit code for non-error outcomes.
pub fn run(cli: Cli) -> Result<u8> {
    if cli.threads > 0 {
        // A second initialisation in the same process keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let (config, explicit) = RunConfig::load_with_keys(cli.config.as_deref(), &overrides)?;
    let ctx = Context {
        config,
        explicit,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Train(a) => ctx.train(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Predict(a) => ctx.predict(a),
        Command::Convert(a) => ctx.convert(a),
        Command::Synth(a) => ctx.synth(a),
        Command::Gradcheck(a) => ctx.gradcheck(a),
        Command::Bench(a) => ctx.bench(a),
    }
}

struct Context {
    config: RunConfig,
    explicit: BTreeSet<String>,
    out_dir: PathBuf,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} `{}` does not exist or is not a file", path.display())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn commented(text: &str) -> String {
    text.lines().map(|l| format!("# {l}\n")).collect()
}

fn epoch_log(records: &[EpochRecord]) -> String {
    let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v}"));
    let mut out = String::from("epoch\tmean_loss\ttrain_f1\tdev_f1\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.epoch, r.mean_loss, opt(r.train_f1), opt(r.dev_f1));
    }
    out
}

#[derive(Serialize)]
struct PredictedSpan<'a> {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct PredictedSentence<'a> {
    id: &'a str,
    tokens: &'a [String],
    entities: Vec<PredictedSpan<'a>>,
}

impl Context {
    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn read_corpus(&self, path: &Path, what: &str) -> Result<Corpus> {
        require_file(path, what)?;
        read_corpus(path, self.config.data.orphan_policy)
    }

    fn embeddings(&self, path: Option<&Path>, corpus: &Corpus, v: usize) -> Result<Option<PrecomputedEmbeddings>> {
        let Some(path) = path else { return Ok(None) };
        require_file(path, "embeddings file")?;
        let e = load_precomputed(path, Some(v))?;
        e.validate(corpus.sentences.iter().map(|s| (s.id.as_str(), s.len())))?;
        Ok(Some(e))
    }

    fn needs_embeddings(&self, e: &Option<PrecomputedEmbeddings>, what: &str) -> Result<()> {
        if self.config.model.encoder == EncoderSource::Precomputed && e.is_none() {
            return Err(Error::MissingEmbeddings(format!(
                "encoder.source is precomputed but no embeddings were given for the {what} corpus"
            )));
        }
        Ok(())
    }

    fn train(&self, args: TrainArgs) -> Result<u8> {
        let cfg = &self.config;
        let train_path = args
            .train
            .or_else(|| cfg.data.train.clone())
            .ok_or_else(|| Error::Config("no training corpus: pass --train or set data.train".into()))?;
        let dev_path = args.dev.or_else(|| cfg.data.dev.clone());
        let train_corpus = self.read_corpus(&train_path, "training corpus")?;
        let dev_corpus = dev_path.as_deref().map(|p| self.read_corpus(p, "dev corpus")).transpose()?;
        let precomputed = cfg.model.encoder == EncoderSource::Precomputed;
        let train_emb = if precomputed {
            self.embeddings(cfg.data.train_embeddings.as_deref(), &train_corpus, cfg.model.v)?
        } else {
            None
        };
        self.needs_embeddings(&train_emb, "training")?;
        let dev_emb = match (&dev_corpus, precomputed) {
            (Some(d), true) => {
                let e = self.embeddings(cfg.data.dev_embeddings.as_deref(), d, cfg.model.v)?;
                self.needs_embeddings(&e, "dev")?;
                e
            }
            _ => None,
        };

        let vocab = if precomputed {
            Vocab::default()
        } else {
            Vocab::build(train_corpus.sentences.iter().map(|s| s.tokens.as_slice()))
        };
        let model = Model::new(cfg.model.clone(), vocab, train_corpus.types.clone(), cfg.seed)?;
        let data = match &train_emb {
            Some(e) => Dataset::with_embeddings(&train_corpus, e),
            None => Dataset::new(&train_corpus),
        };
        let dev = dev_corpus.as_ref().map(|d| match &dev_emb {
            Some(e) => Dataset::with_embeddings(d, e),
            None => Dataset::new(d),
        });
        log::info!(
            "training {} head on {} sentences, {} types, {} epochs",
            cfg.model.head,
            train_corpus.len(),
            train_corpus.types.len(),
            cfg.train.epochs
        );
        let outcome = train(model, cfg.train, data, dev)?;

        self.ensure_out_dir()?;
        let resolved = cfg.to_toml();
        write(&self.out("config.toml"), &resolved)?;
        checkpoint::save(self.out("model.ckpt"), &outcome.model, &resolved)?;
        write(
            &self.out("epochs.tsv"),
            &format!("{}{}", commented(&resolved), epoch_log(&outcome.log)),
        )?;
        let final_f1 = data.micro_f1(&outcome.model)?;
        let mut summary = commented(&resolved);
        let _ = writeln!(summary, "best_epoch={}", outcome.best_epoch);
        let _ = writeln!(summary, "epochs_run={}", outcome.log.len());
        let _ = writeln!(summary, "train.micro.f1={final_f1}");
        if let Some(e) = outcome.reached_target {
            let _ = writeln!(summary, "reached_target_epoch={e}");
        }
        write(&self.out("train_summary.kv"), &summary)?;
        println!(
            "trained {} epochs; best epoch {}; train micro-F1 {final_f1:.4}; checkpoint {}",
            outcome.log.len(),
            outcome.best_epoch,
            self.out("model.ckpt").display()
        );
        Ok(0)
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Model> {
        require_file(path, "checkpoint")?;
        let mut model = checkpoint::load(path)?.model;
        let mc = &model.config;
        for (key, want, have) in [("encoder.v", self.config.model.v, mc.v), ("head.d", self.config.model.d, mc.d)] {
            if self.explicit.contains(key) && want != have {
                return Err(Error::Config(format!(
                    "configuration sets {key} = {want} but the checkpoint was trained with {have}"
                )));
            }
        }
        if self.explicit.contains("decode.mode") {
            model.config.decode.mode = self.config.model.decode.mode;
        }
        if self.explicit.contains("decode.threshold") {
            model.config.decode.threshold = self.config.model.decode.threshold;
        }
        Ok(model)
    }

    /// Run configuration with the model section taken from a loaded checkpoint.
    fn resolved_for(&self, model: &Model) -> String {
        RunConfig {
            model: model.config.clone(),
            ..self.config.clone()
        }
        .to_toml()
    }

    fn eval(&self, args: EvalArgs) -> Result<u8> {
        let model = self.load_checkpoint(&args.checkpoint)?;
        let path = args
            .data
            .or_else(|| self.config.data.test.clone())
            .or_else(|| self.config.data.dev.clone())
            .ok_or_else(|| Error::Config("no evaluation corpus: pass --data or set data.test".into()))?;
        let corpus = self.read_corpus(&path, "evaluation corpus")?;
        let emb_path = args.embeddings.or_else(|| self.config.data.test_embeddings.clone());
        let emb = match model.encoder {
            None => {
                let e = self.embeddings(emb_path.as_deref(), &corpus, model.config.v)?;
                Some(e.ok_or_else(|| {
                    Error::MissingEmbeddings("the checkpoint reads precomputed embeddings; pass --embeddings".into())
                })?)
            }
            Some(_) => None,
        };
        let axes = args
            .buckets
            .iter()
            .map(|a| a.parse::<BucketAxis>())
            .collect::<Result<Vec<_>>>()?;

        let pred: Vec<_> = predict_corpus(&model, &corpus, emb.as_ref())?
            .into_iter()
            .map(|(id, p)| (id, p.annotations(&model.types)))
            .collect();
        let report = strict_f1(&corpus.gold(), &pred)?;
        let mut buckets = Vec::new();
        for axis in axes {
            buckets.push((axis, bucket_report(&corpus.sentences, &pred, axis)?));
        }

        self.ensure_out_dir()?;
        let resolved = self.resolved_for(&model);
        let mut kv = commented(&resolved);
        kv.push_str(&format_kv(&kv_report(&report, &buckets)));
        write(&self.out("report.kv"), &kv)?;
        let mut table = report.table();
        for (axis, b) in &buckets {
            table.push('\n');
            table.push_str(&bucket_table(*axis, b));
        }
        write(&self.out("report.txt"), &format!("{}{table}", commented(&resolved)))?;
        print!("{table}");
        Ok(0)
    }

    fn predict(&self, args: PredictArgs) -> Result<u8> {
        let mut model = self.load_checkpoint(&args.checkpoint)?;
        if let Some(m) = &args.mode {
            model.config.decode.mode = m.parse::<DecodeMode>()?;
        }
        if let Some(t) = args.threshold {
            model.config.decode.threshold = t;
        }
        require_file(&args.input, "input file")?;
        let corpus = if args.input.extension().and_then(|e| e.to_str()) == Some("txt") {
            let sentences = read_token_lines(&args.input)?
                .into_iter()
                .enumerate()
                .filter(|(_, t)| !t.is_empty())
                .map(|(i, tokens)| Sentence {
                    id: i.to_string(),
                    tokens,
                    spans: Vec::new(),
                })
                .collect();
            Corpus::with_types(sentences, EntityTypeSet::new(Vec::<String>::new())?, Split::Test)?
        } else {
            read_corpus(&args.input, self.config.data.orphan_policy)?
        };
        let emb = match model.encoder {
            None => {
                let e = self.embeddings(args.embeddings.as_deref(), &corpus, model.config.v)?;
                Some(e.ok_or_else(|| {
                    Error::MissingEmbeddings("the checkpoint reads precomputed embeddings; pass --embeddings".into())
                })?)
            }
            Some(_) => None,
        };
        let preds = predict_corpus(&model, &corpus, emb.as_ref())?;
        let mut out = String::new();
        for (s, (_, p)) in corpus.sentences.iter().zip(&preds) {
            out.push_str(&prediction_line(s, p, &model.types)?);
            out.push('\n');
        }
        self.ensure_out_dir()?;
        write(&self.out("predictions.jsonl"), &out)?;
        write(&self.out("predictions.config.toml"), &self.resolved_for(&model))?;
        println!("{} sentences -> {}", preds.len(), self.out("predictions.jsonl").display());
        Ok(0)
    }

    fn convert(&self, args: ConvertArgs) -> Result<u8> {
        let corpus = self.read_corpus(&args.input, "input corpus")?;
        match Format::from_path(&args.output) {
            Format::Jsonl => write_jsonl(&args.output, &corpus.sentences)?,
            Format::Conll => write_conll_bio(&args.output, &corpus.sentences)?,
        }
        println!("{} sentences -> {}", corpus.len(), args.output.display());
        Ok(0)
    }

    fn synth(&self, args: SynthArgs) -> Result<u8> {
        let corpus = synth_corpus(self.config.seed, args.sentences, args.types, args.nested)?;
        match Format::from_path(&args.output) {
            Format::Jsonl => write_jsonl(&args.output, &corpus.sentences)?,
            Format::Conll => write_conll_bio(&args.output, &corpus.sentences)?,
        }
        println!(
            "{} sentences, types {:?}, seed {} -> {}",
            corpus.len(),
            corpus.types.names(),
            self.config.seed,
            args.output.display()
        );
        Ok(0)
    }

    fn gradcheck(&self, args: GradcheckArgs) -> Result<u8> {
        let kinds = if args.head.is_empty() { HeadKind::ALL.to_vec() } else { args.head.clone() };
        let corpus = synth_corpus(self.config.seed, 50, 2, false)?;
        let sample = corpus
            .sentences
            .iter()
            .filter(|s| s.len() <= 6)
            .min_by_key(|s| (std::cmp::Reverse(s.spans.len()), s.len()))
            .ok_or_else(|| Error::Invalid("no synthetic sentence of at most 6 tokens for this seed".into()))?;
        let mut report = commented(&self.config.to_toml());
        let mut worst: f64 = 0.0;
        for kind in kinds {
            let mut mc = self.config.model.clone();
            mc.head = kind;
            mc.encoder = EncoderSource::Builtin;
            let vocab = Vocab::build([sample.tokens.as_slice()]);
            let model = Model::new(mc, vocab, corpus.types.clone(), self.config.seed)?;
            let ids = model.vocab.ids(&sample.tokens);
            let labels = label_cells(sample, &model.types)?;
            let r = grad_check(&model, Input::Ids(&ids), &labels, args.h)?;
            worst = worst.max(r.max_rel_error);
            let w = r.worst.as_ref();
            let line = format!(
                "{}: {} entries, max relative error {:.3e} at {}[{}, {}]",
                kind,
                r.entries_checked,
                r.max_rel_error,
                w.map_or("-", |w| w.param.as_str()),
                w.map_or(0, |w| w.row),
                w.map_or(0, |w| w.col)
            );
            println!("{line}");
            report.push_str(&line);
            report.push('\n');
        }
        self.ensure_out_dir()?;
        write(&self.out("gradcheck.txt"), &report)?;
        if worst <= args.tolerance {
            Ok(0)
        } else {
            eprintln!("error: max relative error {worst:.3e} exceeds {:.1e}", args.tolerance);
            Ok(3)
        }
    }

    fn bench(&self, args: BenchArgs) -> Result<u8> {
        let (v, d) = (self.config.model.v, self.config.model.d);
        let cells = bench::run(v, d, args.reps, self.config.seed)?;
        let table = bench::table(&cells);
        for w in bench::non_monotone(&cells) {
            log::warn!("timing not monotone in n: {w}");
        }
        self.ensure_out_dir()?;
        let header = format!("{}# v = {v}, d = {d}, reps = {}\n", commented(&self.config.to_toml()), args.reps);
        write(&self.out("bench.txt"), &format!("{header}{table}"))?;
        print!("{table}");
        Ok(0)
    }
}

fn prediction_line(s: &Sentence, p: &Prediction, types: &EntityTypeSet) -> Result<String> {
    let obj = PredictedSentence {
        id: &s.id,
        tokens: &s.tokens,
        entities: p
            .spans
            .iter()
            .map(|sp| PredictedSpan {
                start: sp.start,
                end: sp.end,
                label: types.name(sp.ty),
                score: sp.score,
            })
            .collect(),
    };
    serde_json::to_string(&obj).map_err(|e| Error::Invalid(e.to_string()))
}
