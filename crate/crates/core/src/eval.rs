//! Strict span-match evaluation.
//!
//! A predicted span counts only when start, end and type all equal a gold
//! span of the same sentence. Ratios with a zero denominator are reported as
//! 0 and listed in [`EvalReport::flags`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::data::{Sentence, SpanAnnotation};
use crate::error::{Error, Result};

/// Sentence id with its spans.
pub type SentenceSpans = (String, Vec<SpanAnnotation>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize, flag: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(flag.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Scores {
    fn from_counts(counts: Counts, prefix: &str, flags: &mut Vec<String>) -> Self {
        Scores {
            counts,
            precision: ratio(counts.tp, counts.predicted(), &format!("{prefix}.p"), flags),
            recall: ratio(counts.tp, counts.support(), &format!("{prefix}.r"), flags),
            f1: ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn_, &format!("{prefix}.f1"), flags),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Per-type scores, sorted by type name, over types seen in gold or prediction.
    pub per_type: BTreeMap<String, Scores>,
    pub micro: Scores,
    pub macro_f1: f64,
    /// Keys of ratios whose denominator was zero.
    pub flags: Vec<String>,
    pub sentences: usize,
}

impl EvalReport {
    fn from_counts(per_type_counts: BTreeMap<String, Counts>, sentences: usize) -> Self {
        let mut flags = Vec::new();
        let mut total = Counts::default();
        let mut per_type = BTreeMap::new();
        for (name, c) in per_type_counts {
            total.add(c);
            let s = Scores::from_counts(c, &format!("per_type.{name}"), &mut flags);
            per_type.insert(name, s);
        }
        let micro = Scores::from_counts(total, "micro", &mut flags);
        let macro_f1 = if per_type.is_empty() {
            flags.push("macro.f1".into());
            0.0
        } else {
            per_type.values().map(|s| s.f1).sum::<f64>() / per_type.len() as f64
        };
        EvalReport {
            per_type,
            micro,
            macro_f1,
            flags,
            sentences,
        }
    }

    /// Key-value lines with the documented key names, `prefix` prepended.
    pub fn kv_lines(&self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: String, v: String| out.push((format!("{prefix}{k}"), v));
        let scores = |push: &mut dyn FnMut(String, String), key: &str, s: &Scores| {
            push(format!("{key}.p"), fmt_f64(s.precision));
            push(format!("{key}.r"), fmt_f64(s.recall));
            push(format!("{key}.f1"), fmt_f64(s.f1));
            push(format!("{key}.tp"), s.counts.tp.to_string());
            push(format!("{key}.fp"), s.counts.fp.to_string());
            push(format!("{key}.fn"), s.counts.fn_.to_string());
            push(format!("{key}.support"), s.counts.support().to_string());
        };
        scores(&mut push, "micro", &self.micro);
        push("macro.f1".into(), fmt_f64(self.macro_f1));
        for (name, s) in &self.per_type {
            scores(&mut push, &format!("per_type.{name}"), s);
        }
        push("sentences".into(), self.sentences.to_string());
        push("flags".into(), self.flags.join(","));
        out
    }

    pub fn table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(t, "{:<12} {:>8} {:>8} {:>8} {:>6} {:>6} {:>6}", "type", "P", "R", "F1", "TP", "FP", "FN");
        let mut row = |name: &str, s: &Scores| {
            let _ = writeln!(
                t,
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6} {:>6}",
                name, s.precision, s.recall, s.f1, s.counts.tp, s.counts.fp, s.counts.fn_
            );
        };
        for (name, s) in &self.per_type {
            row(name, s);
        }
        row("micro", &self.micro);
        let _ = writeln!(t, "{:<12} {:>26.4}", "macro-F1", self.macro_f1);
        if !self.flags.is_empty() {
            let _ = writeln!(t, "undefined (reported as 0): {}", self.flags.join(", "));
        }
        t
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

fn span_set(spans: &[SpanAnnotation]) -> BTreeSet<(usize, usize, &str)> {
    spans.iter().map(|s| (s.start, s.end, s.label.as_str())).collect()
}

fn index_by_id<'a>(side: &'a [SentenceSpans], what: &str) -> Result<BTreeMap<&'a str, &'a [SpanAnnotation]>> {
    let mut map = BTreeMap::new();
    for (id, spans) in side {
        if map.insert(id.as_str(), spans.as_slice()).is_some() {
            return Err(Error::Invalid(format!("duplicate sentence id `{id}` in {what}")));
        }
    }
    Ok(map)
}

fn paired<'a>(
    gold: &'a [SentenceSpans],
    pred: &'a [SentenceSpans],
) -> Result<Vec<(&'a str, &'a [SpanAnnotation], &'a [SpanAnnotation])>> {
    let g = index_by_id(gold, "gold")?;
    let p = index_by_id(pred, "predictions")?;
    if let Some(id) = g.keys().find(|id| !p.contains_key(*id)) {
        return Err(Error::Invalid(format!("sentence `{id}` has gold spans but no prediction")));
    }
    if let Some(id) = p.keys().find(|id| !g.contains_key(*id)) {
        return Err(Error::Invalid(format!("sentence `{id}` is predicted but absent from gold")));
    }
    Ok(g.into_iter().map(|(id, gs)| (id, gs, p[id])).collect())
}

fn count_into(counts: &mut BTreeMap<String, Counts>, gold: &[SpanAnnotation], pred: &[SpanAnnotation], keep: impl Fn(&SpanAnnotation) -> bool) {
    let g: Vec<SpanAnnotation> = gold.iter().filter(|s| keep(s)).cloned().collect();
    let p: Vec<SpanAnnotation> = pred.iter().filter(|s| keep(s)).cloned().collect();
    let gs = span_set(&g);
    let ps = span_set(&p);
    for s in &ps {
        let c = counts.entry(s.2.to_string()).or_default();
        if gs.contains(s) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for s in gs.difference(&ps) {
        counts.entry(s.2.to_string()).or_default().fn_ += 1;
    }
}

/// Strict micro/macro scores. Both sides must cover the same sentence ids.
pub fn strict_f1(gold: &[SentenceSpans], pred: &[SentenceSpans]) -> Result<EvalReport> {
    let pairs = paired(gold, pred)?;
    let mut counts = BTreeMap::new();
    for (_, g, p) in &pairs {
        count_into(&mut counts, g, p, |_| true);
    }
    Ok(EvalReport::from_counts(counts, pairs.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum BucketAxis {
    SentenceLength,
    EntityLength,
    Density,
}

impl BucketAxis {
    pub const ALL: [BucketAxis; 3] = [BucketAxis::SentenceLength, BucketAxis::EntityLength, BucketAxis::Density];

    pub fn as_str(self) -> &'static str {
        match self {
            BucketAxis::SentenceLength => "sentence_length",
            BucketAxis::EntityLength => "entity_length",
            BucketAxis::Density => "density",
        }
    }

    /// Bucket names with their human-readable ranges.
    pub fn buckets(self) -> [(&'static str, &'static str); 3] {
        match self {
            BucketAxis::SentenceLength | BucketAxis::EntityLength => {
                [("L-1", "L<3"), ("L-2", "3<=L<6"), ("L-3", "L>=6")]
            }
            BucketAxis::Density => [("D-1", "<=0.1"), ("D-2", "(0.1,0.3]"), ("D-3", ">0.3")],
        }
    }
}

impl fmt::Display for BucketAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BucketAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BucketAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown bucket axis `{s}`")))
    }
}

pub fn length_bucket(len: usize) -> usize {
    match len {
        0..=2 => 0,
        3..=5 => 1,
        _ => 2,
    }
}

/// Tokens covered by at least one span, counted once.
pub fn covered_tokens(spans: &[SpanAnnotation], len: usize) -> usize {
    let mut covered = vec![false; len];
    for s in spans {
        for c in covered.iter_mut().take(s.end.min(len.saturating_sub(1)) + 1).skip(s.start) {
            *c = true;
        }
    }
    covered.iter().filter(|&&c| c).count()
}

/// Density bucket of `covered / len`, compared in integers.
pub fn density_bucket(covered: usize, len: usize) -> usize {
    if covered * 10 <= len {
        0
    } else if covered * 10 <= 3 * len {
        1
    } else {
        2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    pub name: &'static str,
    pub range: &'static str,
    pub report: EvalReport,
}

/// Per-bucket strict scores along `axis`. Every bucket is present, even when
/// empty.
pub fn bucket_report(gold: &[Sentence], pred: &[SentenceSpans], axis: BucketAxis) -> Result<Vec<Bucket>> {
    let gold_spans: Vec<SentenceSpans> = gold.iter().map(|s| (s.id.clone(), s.spans.clone())).collect();
    let pairs = paired(&gold_spans, pred)?;
    let lengths: BTreeMap<&str, usize> = gold.iter().map(|s| (s.id.as_str(), s.len())).collect();
    let mut counts: [BTreeMap<String, Counts>; 3] = Default::default();
    let mut sentences = [0usize; 3];
    for (id, g, p) in &pairs {
        let len = lengths[id];
        match axis {
            BucketAxis::EntityLength => {
                for (b, c) in counts.iter_mut().enumerate() {
                    count_into(c, g, p, |s| length_bucket(s.len()) == b);
                    sentences[b] += 1;
                }
            }
            BucketAxis::SentenceLength | BucketAxis::Density => {
                let b = if axis == BucketAxis::SentenceLength {
                    length_bucket(len)
                } else {
                    density_bucket(covered_tokens(g, len), len)
                };
                count_into(&mut counts[b], g, p, |_| true);
                sentences[b] += 1;
            }
        }
    }
    Ok(axis
        .buckets()
        .into_iter()
        .zip(counts)
        .zip(sentences)
        .map(|(((name, range), c), n)| Bucket {
            name,
            range,
            report: EvalReport::from_counts(c, n),
        })
        .collect())
}

/// Key-value report: the base report followed by `bucket.<axis>.<name>.*` keys.
pub fn kv_report(report: &EvalReport, buckets: &[(BucketAxis, Vec<Bucket>)]) -> Vec<(String, String)> {
    let mut out = report.kv_lines("");
    for (axis, list) in buckets {
        for b in list {
            out.extend(b.report.kv_lines(&format!("bucket.{axis}.{}.", b.name)));
        }
    }
    out
}

pub fn format_kv(lines: &[(String, String)]) -> String {
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "<kv>".into(),
            line: n + 1,
            message: "expected key=value".into(),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

pub fn bucket_table(axis: BucketAxis, buckets: &[Bucket]) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{axis}");
    for b in buckets {
        let r = &b.report;
        let _ = writeln!(
            t,
            "  {:<4} {:<10} sentences {:>5}  P {:.4}  R {:.4}  F1 {:.4}",
            b.name, b.range, r.sentences, r.micro.precision, r.micro.recall, r.micro.f1
        );
    }
    t
}
