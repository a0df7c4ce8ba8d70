//! Corpora, span annotations and their on-disk formats.
//!
//! Span indices are token positions and `end` is inclusive everywhere: the
//! span `(0, 1)` covers the first two tokens.
//!
//! Two formats are supported:
//!
//! * JSONL, one sentence per line:
//!   `{"id": "s1", "tokens": ["John", "Smith"], "entities": [{"start": 0, "end": 1, "type": "PER"}]}`
//!   (`id` is optional on input and defaults to the 0-based line index).
//! * Two-column CoNLL with BIO tags, sentences separated by blank lines. An
//!   optional `# id = <id>` line before a sentence carries its identifier.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::heads::{EntityTypeSet, SpanMask};
use crate::loss::LabelCell;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SpanAnnotation {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &SpanAnnotation) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl std::fmt::Display for SpanAnnotation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "entities")]
    pub spans: Vec<SpanAnnotation>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks index ranges, sorts spans and drops duplicates. Returns how many
    /// duplicates were removed.
    pub fn validate(&mut self) -> Result<usize> {
        for s in &self.spans {
            if s.start > s.end || s.end >= self.tokens.len() {
                return Err(Error::InvalidSpan {
                    sentence: self.id.clone(),
                    span: s.to_string(),
                    reason: format!("sentence has {} tokens", self.tokens.len()),
                });
            }
            if s.label.is_empty() {
                return Err(Error::InvalidSpan {
                    sentence: self.id.clone(),
                    span: s.to_string(),
                    reason: "empty entity type".into(),
                });
            }
        }
        let before = self.spans.len();
        self.spans.sort();
        self.spans.dedup();
        Ok(before - self.spans.len())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub types: EntityTypeSet,
    pub split: Split,
}

impl Corpus {
    /// Builds a corpus whose type set is the sorted union of annotation types.
    pub fn new(mut sentences: Vec<Sentence>, split: Split) -> Result<Self> {
        let mut names = BTreeSet::new();
        for s in &mut sentences {
            let dups = s.validate()?;
            if dups > 0 {
                log::warn!("sentence `{}`: collapsed {dups} duplicate span(s)", s.id);
            }
            names.extend(s.spans.iter().map(|a| a.label.clone()));
        }
        Ok(Corpus {
            sentences,
            types: EntityTypeSet::new(names)?,
            split,
        })
    }

    /// Builds a corpus with a declared type order; annotation types must be a subset.
    pub fn with_types(mut sentences: Vec<Sentence>, types: EntityTypeSet, split: Split) -> Result<Self> {
        for s in &mut sentences {
            s.validate()?;
            for a in &s.spans {
                types.index_of(&a.label)?;
            }
        }
        Ok(Corpus {
            sentences,
            types,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn gold(&self) -> Vec<(String, Vec<SpanAnnotation>)> {
        self.sentences
            .iter()
            .map(|s| (s.id.clone(), s.spans.clone()))
            .collect()
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    #[serde(default)]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<SpanAnnotation>,
}

pub fn parse_jsonl(text: &str, origin: &str) -> Result<Corpus> {
    let mut sentences = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        sentences.push(Sentence {
            id: rec.id.unwrap_or_else(|| sentences.len().to_string()),
            tokens: rec.tokens,
            spans: rec.entities,
        });
    }
    Corpus::new(sentences, Split::Train)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&serde_json::to_string(s).expect("sentence serialises"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(sentences)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrphanPolicy {
    /// An `I-X` that does not continue an `X` run starts a new span.
    #[default]
    Repair,
    Reject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    match tag {
        "O" => Some(Tag::Outside),
        _ => match tag.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Some(Tag::Begin(t)),
            Some(("I", t)) if !t.is_empty() => Some(Tag::Inside(t)),
            _ => None,
        },
    }
}

/// Converts BIO tags to spans. Returns the spans and the number of repaired
/// orphan `I-` tags.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S], policy: OrphanPolicy) -> Result<(Vec<SpanAnnotation>, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let mut orphans = 0;
    for (i, raw) in tags.iter().enumerate() {
        let raw = raw.as_ref();
        let tag = parse_tag(raw).ok_or_else(|| Error::Invalid(format!("malformed BIO tag `{raw}` at position {i}")))?;
        let continues = matches!((tag, open), (Tag::Inside(t), Some((_, o))) if t == o);
        if continues {
            continue;
        }
        if let Some((start, label)) = open.take() {
            spans.push(SpanAnnotation::new(start, i - 1, label));
        }
        match tag {
            Tag::Outside => {}
            Tag::Begin(t) => open = Some((i, t)),
            Tag::Inside(t) => match policy {
                OrphanPolicy::Repair => {
                    orphans += 1;
                    open = Some((i, t));
                }
                OrphanPolicy::Reject => {
                    return Err(Error::Invalid(format!("orphan tag `{raw}` at position {i}")));
                }
            },
        }
    }
    if let Some((start, label)) = open {
        spans.push(SpanAnnotation::new(start, tags.len() - 1, label));
    }
    Ok((spans, orphans))
}

/// Inverse of [`bio_to_spans`] for flat (non-overlapping) spans.
pub fn spans_to_bio(spans: &[SpanAnnotation], n: usize) -> Result<Vec<String>> {
    let mut sorted: Vec<&SpanAnnotation> = spans.iter().collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(Error::Overlap(pair[0].to_string(), pair[1].to_string()));
        }
    }
    let mut tags = vec!["O".to_string(); n];
    for s in sorted {
        if s.start > s.end || s.end >= n {
            return Err(Error::Invalid(format!("span {s} out of range for {n} tokens")));
        }
        tags[s.start] = format!("B-{}", s.label);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = format!("I-{}", s.label);
        }
    }
    Ok(tags)
}

pub fn parse_conll_bio(text: &str, origin: &str, policy: OrphanPolicy) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut pending_id: Option<String> = None;
    let mut first_line = 0;
    let mut total_orphans = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, id: &mut Option<String>, line: usize, sentences: &mut Vec<Sentence>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let (spans, orphans) = bio_to_spans(tags, policy).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line,
            message: e.to_string(),
        })?;
        total_orphans += orphans;
        sentences.push(Sentence {
            id: id.take().unwrap_or_else(|| sentences.len().to_string()),
            tokens: std::mem::take(tokens),
            spans,
        });
        tags.clear();
        Ok(())
    };

    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, &mut pending_id, first_line, &mut sentences)?;
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("# id = ") {
            flush(&mut tokens, &mut tags, &mut pending_id, first_line, &mut sentences)?;
            pending_id = Some(rest.trim().to_string());
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let mut cols = trimmed.split_whitespace();
        let (Some(token), Some(tag), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                message: format!("expected `token tag`, got `{trimmed}`"),
            });
        };
        if tokens.is_empty() {
            first_line = lineno + 1;
        }
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, &mut pending_id, first_line, &mut sentences)?;
    if total_orphans > 0 {
        log::warn!("{origin}: repaired {total_orphans} orphan I- tag(s)");
    }
    Corpus::new(sentences, Split::Train)
}

pub fn read_conll_bio(path: impl AsRef<Path>, policy: OrphanPolicy) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll_bio(&text, &path.display().to_string(), policy)
}

pub fn to_conll_bio(sentences: &[Sentence]) -> Result<String> {
    let mut out = String::new();
    for s in sentences {
        let tags = spans_to_bio(&s.spans, s.tokens.len()).map_err(|e| match e {
            Error::Overlap(a, b) => Error::Invalid(format!("sentence `{}`: overlapping spans {a} and {b}", s.id)),
            other => other,
        })?;
        out.push_str(&format!("# id = {}\n", s.id));
        for (tok, tag) in s.tokens.iter().zip(tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(&tag);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_conll_bio(path: impl AsRef<Path>, sentences: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let text = to_conll_bio(sentences)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSONL or CoNLL, decided by the file extension (`.jsonl`/`.json` vs anything else).
pub fn read_corpus(path: impl AsRef<Path>, policy: OrphanPolicy) -> Result<Corpus> {
    let path = path.as_ref();
    match Format::from_path(path) {
        Format::Jsonl => read_jsonl(path),
        Format::Conll => read_conll_bio(path, policy),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Conll,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Conll,
        }
    }
}

/// Padded mini-batch. Row `b` of `token_ids` is PAD-filled past `lengths[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sentence_indices: Vec<usize>,
    pub token_ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub labels: Vec<Vec<LabelCell>>,
    pub masks: Vec<SpanMask>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sentence_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence_indices.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }
}

/// Seed for the shuffle of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffled, padded batches for one epoch. The order is a pure function of
/// `(corpus, seed, epoch)`.
pub fn make_batches(
    corpus: &Corpus,
    vocab: &Vocab,
    types: &EntityTypeSet,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    max_span: Option<usize>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let padded = chunk.iter().map(|&i| corpus.sentences[i].len()).max().unwrap_or(0);
            let mut batch = Batch {
                sentence_indices: chunk.to_vec(),
                token_ids: Vec::with_capacity(chunk.len()),
                lengths: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
                masks: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let s = &corpus.sentences[i];
                let mut ids = vocab.ids(&s.tokens);
                ids.resize(padded, Vocab::PAD);
                batch.token_ids.push(ids);
                batch.lengths.push(s.len());
                batch.masks.push(SpanMask::new(padded, s.len(), max_span));
                batch.labels.push(label_cells(s, types)?);
            }
            Ok(batch)
        })
        .collect()
}

pub fn label_cells(sentence: &Sentence, types: &EntityTypeSet) -> Result<Vec<LabelCell>> {
    sentence
        .spans
        .iter()
        .map(|a| Ok((a.start, a.end, types.index_of(&a.label)?)))
        .collect()
}

const TYPE_NAMES: [&str; 8] = ["PER", "LOC", "ORG", "MISC", "DATE", "TIME", "MONEY", "PCT"];
const FILLERS: usize = 40;

fn synth_type_name(k: usize) -> String {
    TYPE_NAMES.get(k).map_or_else(|| format!("T{k}"), |s| s.to_string())
}

/// Opening and closing trigger tokens of a synthetic entity type.
pub fn synth_triggers(label: &str) -> (String, String) {
    (format!("<{label}"), format!("{label}>"))
}

/// Deterministic synthetic corpus.
///
/// Each entity is a run `<X w… X>` delimited by the type's own opening and
/// closing trigger tokens, with 0–5 filler words inside (entity length 2–7).
/// A sentence holds one to three entities of pairwise distinct types separated
/// by filler runs. In nested mode about 30% of the sentences (at least one)
/// wrap one entity inside another.
pub fn synth_corpus(seed: u64, n_sentences: usize, type_count: usize, nested: bool) -> Result<Corpus> {
    if type_count == 0 {
        return Err(Error::Invalid("type_count must be at least 1".into()));
    }
    let names: Vec<String> = (0..type_count).map(synth_type_name).collect();
    let types = EntityTypeSet::new(names.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let nested_set: HashSet<usize> = if nested && n_sentences > 0 {
        let count = ((n_sentences as f64 * 0.3).round() as usize).clamp(1, n_sentences);
        let mut idx: Vec<usize> = (0..n_sentences).collect();
        idx.shuffle(&mut rng);
        idx.into_iter().take(count).collect()
    } else {
        HashSet::new()
    };

    let filler = |rng: &mut ChaCha8Rng, out: &mut Vec<String>, lo: usize, hi: usize| {
        for _ in 0..rng.gen_range(lo..=hi) {
            out.push(format!("w{:02}", rng.gen_range(0..FILLERS)));
        }
    };

    let mut sentences = Vec::with_capacity(n_sentences);
    for s in 0..n_sentences {
        let mut order: Vec<usize> = (0..type_count).collect();
        order.shuffle(&mut rng);
        let mut tokens = Vec::new();
        let mut spans = Vec::new();

        let mut units: Vec<Vec<usize>> = Vec::new();
        let mut remaining = order.as_slice();
        if nested_set.contains(&s) {
            let (outer, inner) = if type_count >= 2 { (order[0], order[1]) } else { (order[0], order[0]) };
            units.push(vec![outer, inner]);
            remaining = &order[(2.min(type_count))..];
        }
        let extra = if units.is_empty() {
            rng.gen_range(1..=remaining.len().min(3))
        } else {
            rng.gen_range(0..=remaining.len().min(1))
        };
        units.extend(remaining.iter().take(extra).map(|&t| vec![t]));
        units.shuffle(&mut rng);

        filler(&mut rng, &mut tokens, 0, 3);
        for unit in units {
            let (open, close) = synth_triggers(&names[unit[0]]);
            let start = tokens.len();
            tokens.push(open);
            if let [_, inner] = unit[..] {
                filler(&mut rng, &mut tokens, 0, 2);
                let (iopen, iclose) = synth_triggers(&names[inner]);
                let istart = tokens.len();
                tokens.push(iopen);
                filler(&mut rng, &mut tokens, 0, 3);
                tokens.push(iclose);
                spans.push(SpanAnnotation::new(istart, tokens.len() - 1, names[inner].clone()));
                filler(&mut rng, &mut tokens, 0, 2);
            } else {
                filler(&mut rng, &mut tokens, 0, 5);
            }
            tokens.push(close);
            spans.push(SpanAnnotation::new(start, tokens.len() - 1, names[unit[0]].clone()));
            filler(&mut rng, &mut tokens, 1, 3);
        }
        sentences.push(Sentence {
            id: format!("synth-{seed}-{s}"),
            tokens,
            spans,
        });
    }
    Corpus::with_types(sentences, types, Split::Train)
}

/// Pairs `(outer, inner)` of spans in one sentence where `inner` sits inside
/// `outer` and differs from it on at least one boundary.
pub fn nested_pairs(spans: &[SpanAnnotation]) -> Vec<(&SpanAnnotation, &SpanAnnotation)> {
    let mut out = Vec::new();
    for a in spans {
        for b in spans {
            if a.start <= b.start && b.end <= a.end && (a.start < b.start || b.end < a.end) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Reads whitespace-separated tokens, one sentence per line.
pub fn read_token_lines(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            l.map(|l| l.split_whitespace().map(str::to_string).collect())
                .map_err(|e| Error::io(path, e))
        })
        .collect()
}
