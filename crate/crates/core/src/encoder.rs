//! Token representations.
//!
//! The built-in encoder looks tokens up in a trainable embedding table and,
//! when mixing is enabled, passes each window `[e_{i-1}; e_i; e_{i+1}]`
//! (zero-padded at the sentence edges) through one affine layer. Precomputed
//! vectors from any external model can be supplied instead.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{affine, affine_backward, Matrix, Param};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    /// Vocabulary over the given sentences in first-seen order, after the
    /// reserved PAD and UNK entries.
    pub fn build<'a, I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut vocab = Vocab::default();
        for sentence in sentences {
            for tok in sentence {
                vocab.insert(tok.as_ref());
            }
        }
        vocab
    }

    /// Rebuilds a vocabulary from its non-reserved entries in id order.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut vocab = Vocab {
            tokens: vec![Self::PAD_TOKEN.to_string(), Self::UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(Self::PAD_TOKEN.to_string(), Self::PAD);
        vocab.index.insert(Self::UNK_TOKEN.to_string(), Self::UNK);
        for t in tokens {
            vocab.insert(&t.into());
        }
        vocab
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Entries after PAD and UNK, in id order.
    pub fn user_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingEncoder {
    pub table: Param,
    pub mix_w: Param,
    pub mix_b: Param,
    pub mixing: bool,
}

pub struct EncoderCache {
    ids: Vec<u32>,
    window: Option<Matrix>,
}

impl EmbeddingEncoder {
    /// Table entries uniform in `±0.5/√v`; mixer weights Glorot-uniform.
    pub fn new(vocab_size: usize, v: usize, mixing: bool, rng: &mut impl RngCore) -> Self {
        let limit = 0.5 / (v as f64).sqrt();
        let table = (0..vocab_size * v).map(|_| rng.gen_range(-limit..=limit)).collect();
        let mix_limit = (6.0 / (4 * v) as f64).sqrt();
        let mix = (0..3 * v * v).map(|_| rng.gen_range(-mix_limit..mix_limit)).collect();
        EmbeddingEncoder {
            table: Param::new("encoder.table", Matrix::from_vec(vocab_size, v, table).expect("shape")),
            mix_w: Param::new("encoder.mix.w", Matrix::from_vec(3 * v, v, mix).expect("shape")),
            mix_b: Param::zeros("encoder.mix.b", 1, v),
            mixing,
        }
    }

    pub fn zeros(vocab_size: usize, v: usize, mixing: bool) -> Self {
        EmbeddingEncoder {
            table: Param::zeros("encoder.table", vocab_size, v),
            mix_w: Param::zeros("encoder.mix.w", 3 * v, v),
            mix_b: Param::zeros("encoder.mix.b", 1, v),
            mixing,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.value.rows()
    }

    pub fn encode(&self, ids: &[u32]) -> Result<Matrix> {
        self.forward(ids).map(|(h, _)| h)
    }

    pub fn forward(&self, ids: &[u32]) -> Result<(Matrix, EncoderCache)> {
        let v = self.dim();
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab: self.vocab_size(),
                });
            }
        }
        let mut emb = Matrix::zeros(ids.len(), v);
        for (i, &id) in ids.iter().enumerate() {
            emb.row_mut(i).copy_from_slice(self.table.value.row(id as usize));
        }
        if !self.mixing {
            return Ok((
                emb,
                EncoderCache {
                    ids: ids.to_vec(),
                    window: None,
                },
            ));
        }
        let n = ids.len();
        let mut window = Matrix::zeros(n, 3 * v);
        for i in 0..n {
            let row = window.row_mut(i);
            if i > 0 {
                row[..v].copy_from_slice(emb.row(i - 1));
            }
            row[v..2 * v].copy_from_slice(emb.row(i));
            if i + 1 < n {
                row[2 * v..].copy_from_slice(emb.row(i + 1));
            }
        }
        let h = affine(&window, &self.mix_w.value, &self.mix_b.value)?;
        Ok((
            h,
            EncoderCache {
                ids: ids.to_vec(),
                window: Some(window),
            },
        ))
    }

    pub fn backward(&mut self, cache: &EncoderCache, grad: &Matrix) -> Result<()> {
        let v = self.dim();
        let n = cache.ids.len();
        let d_emb = match &cache.window {
            None => grad.clone(),
            Some(window) => {
                let g = affine_backward(window, &self.mix_w.value, grad)?;
                self.mix_w.accumulate(&g.w)?;
                self.mix_b.accumulate(&g.b)?;
                let mut d_emb = Matrix::zeros(n, v);
                for i in 0..n {
                    let dw = g.x.row(i);
                    if i > 0 {
                        add_into(d_emb.row_mut(i - 1), &dw[..v]);
                    }
                    add_into(d_emb.row_mut(i), &dw[v..2 * v]);
                    if i + 1 < n {
                        add_into(d_emb.row_mut(i + 1), &dw[2 * v..]);
                    }
                }
                d_emb
            }
        };
        for (i, &id) in cache.ids.iter().enumerate() {
            self.table.accumulate_row(id as usize, d_emb.row(i));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        if self.mixing {
            vec![&self.table, &self.mix_w, &self.mix_b]
        } else {
            vec![&self.table]
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        if self.mixing {
            vec![&mut self.table, &mut self.mix_w, &mut self.mix_b]
        } else {
            vec![&mut self.table]
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-sentence token vectors produced outside this crate.
///
/// File layout (UTF-8, LF):
///
/// ```text
/// #emb v=<dims>
/// >s <sentence-id> n=<len>
/// <v space-separated floats>     (n lines)
/// ```
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    matrices: BTreeMap<String, Matrix>,
}

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        PrecomputedEmbeddings {
            dim,
            matrices: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, m: Matrix) -> Result<()> {
        let id = id.into();
        if m.cols() != self.dim {
            return Err(Error::EmbeddingShape {
                sentence: id,
                expected: (m.rows(), self.dim),
                actual: m.shape(),
            });
        }
        self.matrices.insert(id, m);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Matrix> {
        self.matrices
            .get(id)
            .ok_or_else(|| Error::MissingEmbeddings(id.to_string()))
    }

    /// Checks that every sentence has a matrix with its token count.
    pub fn validate<'a>(&self, sentences: impl IntoIterator<Item = (&'a str, usize)>) -> Result<()> {
        for (id, len) in sentences {
            let m = self.get(id)?;
            if m.rows() != len {
                return Err(Error::EmbeddingShape {
                    sentence: id.to_string(),
                    expected: (len, self.dim),
                    actual: m.shape(),
                });
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, header)) = lines.next() else {
            return Ok(PrecomputedEmbeddings::default());
        };
        let dim: usize = header
            .trim()
            .strip_prefix("#emb v=")
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| parse_err(1, format!("expected `#emb v=<dims>`, got `{header}`")))?;
        let mut out = PrecomputedEmbeddings::new(dim);
        while let Some((lineno, line)) = lines.next() {
            let rest = line
                .strip_prefix(">s ")
                .ok_or_else(|| parse_err(lineno + 1, format!("expected `>s <id> n=<len>`, got `{line}`")))?;
            let (id, n) = rest
                .rsplit_once(" n=")
                .and_then(|(id, n)| Some((id.to_string(), n.trim().parse::<usize>().ok()?)))
                .ok_or_else(|| parse_err(lineno + 1, format!("malformed sentence header `{line}`")))?;
            let mut values = Vec::with_capacity(n * dim);
            for _ in 0..n {
                let (row_no, row) = lines
                    .next()
                    .ok_or_else(|| parse_err(lineno + 1, format!("sentence `{id}` ends early")))?;
                let before = values.len();
                for tok in row.split_whitespace() {
                    let x: f64 = tok
                        .parse()
                        .map_err(|_| parse_err(row_no + 1, format!("bad float `{tok}`")))?;
                    values.push(x);
                }
                let got = values.len() - before;
                if got != dim {
                    return Err(Error::EmbeddingShape {
                        sentence: id,
                        expected: (n, dim),
                        actual: (n, got),
                    });
                }
            }
            out.matrices.insert(id, Matrix::from_vec(n, dim, values)?);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#emb v={}\n", self.dim);
        for (id, m) in &self.matrices {
            writeln!(out, ">s {id} n={}", m.rows()).unwrap();
            for r in 0..m.rows() {
                let row: Vec<String> = m.row(r).iter().map(|x| x.to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Loads a precomputed-embeddings file. When `expected_dim` is given the file's
/// dimension must match it.
pub fn load_precomputed(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<PrecomputedEmbeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let emb = PrecomputedEmbeddings::parse(&text, &path.display().to_string())?;
    if let Some(v) = expected_dim {
        if !emb.is_empty() && emb.dim() != v {
            return Err(Error::EmbeddingShape {
                sentence: "<header>".into(),
                expected: (0, v),
                actual: (0, emb.dim()),
            });
        }
    }
    Ok(emb)
}

pub fn write_precomputed(path: impl AsRef<Path>, emb: &PrecomputedEmbeddings) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, emb.to_text()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_reserves_pad_and_unk() {
        let v = Vocab::build([["a", "b", "a"].as_slice(), ["c"].as_slice()]);
        assert_eq!(v.len(), 5);
        assert_eq!(v.ids(&["a", "c", "zzz"]), vec![2, 4, Vocab::UNK]);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(Vocab::from_tokens(v.user_tokens().to_vec()), v);
    }

    #[test]
    fn lookup_without_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EmbeddingEncoder::new(6, 4, false, &mut rng);
        let limit = 0.5 / 2.0;
        assert!(enc.table.value.as_slice().iter().all(|x| x.abs() <= limit));
        let h = enc.encode(&[3, 5, 3]).unwrap();
        assert_eq!(h.row(0), enc.table.value.row(3));
        assert_eq!(h.row(1), enc.table.value.row(5));
        assert_eq!(h.row(2), enc.table.value.row(3));
    }

    #[test]
    fn single_token_mixing_uses_zero_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut enc = EmbeddingEncoder::new(4, 3, true, &mut rng);
        enc.mix_b.value = Matrix::row_vector(&[0.1, -0.2, 0.3]);
        let h = enc.encode(&[2]).unwrap();
        let e = enc.table.value.row(2);
        for c in 0..3 {
            let mut want = enc.mix_b.value[(0, c)];
            for k in 0..3 {
                want += enc.mix_w.value[(3 + k, c)] * e[k];
            }
            assert!((h[(0, c)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn mixing_matches_naive_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = EmbeddingEncoder::new(7, 4, true, &mut rng);
        enc.mix_b.value = Matrix::from_vec(1, 4, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ids = [2, 6, 1, 0, 4];
        let h = enc.encode(&ids).unwrap();
        let t = &enc.table.value;
        for i in 0..5 {
            for c in 0..4 {
                let mut acc = enc.mix_b.value[(0, c)];
                for (slot, offset) in [(0usize, -1i64), (1, 0), (2, 1)] {
                    let p = i as i64 + offset;
                    if p < 0 || p >= 5 {
                        continue;
                    }
                    for k in 0..4 {
                        acc += enc.mix_w.value[(slot * 4 + k, c)] * t[(ids[p as usize] as usize, k)];
                    }
                }
                assert!((h[(i, c)] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_id_reports_position() {
        let enc = EmbeddingEncoder::zeros(3, 2, true);
        let err = enc.encode(&[0, 1, 9]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 9, position: 2, .. }));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mixing in [false, true] {
            let mut enc = EmbeddingEncoder::new(5, 3, mixing, &mut rng);
            enc.mix_b.value = Matrix::from_vec(1, 3, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let ids = [2, 4, 2, 3];
            let coeff = Matrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let loss = |e: &EmbeddingEncoder| -> f64 {
                let h = e.encode(&ids).unwrap();
                h.as_slice().iter().zip(coeff.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = enc.forward(&ids).unwrap();
            enc.backward(&cache, &coeff).unwrap();
            for pi in 0..enc.params().len() {
                for idx in 0..enc.params()[pi].len() {
                    let analytic = enc.params()[pi].grad.as_slice()[idx];
                    let mut probe = enc.clone();
                    probe.params_mut()[pi].value.as_mut_slice()[idx] += 1e-5;
                    let up = loss(&probe);
                    probe.params_mut()[pi].value.as_mut_slice()[idx] -= 2e-5;
                    let fd = (up - loss(&probe)) / 2e-5;
                    assert!((analytic - fd).abs() <= (1e-4 * fd.abs()).max(1e-6));
                }
            }
        }
    }

    #[test]
    fn precomputed_parse_and_validate() {
        let text = "#emb v=4\n>s a n=3\n1 2 3 4\n5 6 7 8\n9 10 11 12\n";
        let emb = PrecomputedEmbeddings::parse(text, "t").unwrap();
        assert_eq!(emb.get("a").unwrap().shape(), (3, 4));
        emb.validate([("a", 3)]).unwrap();
        assert!(matches!(emb.validate([("a", 2)]), Err(Error::EmbeddingShape { .. })));
        assert!(matches!(emb.validate([("b", 2)]), Err(Error::MissingEmbeddings(_))));
        let bad = "#emb v=4\n>s a n=1\n1 2 3\n";
        assert!(matches!(PrecomputedEmbeddings::parse(bad, "t"), Err(Error::EmbeddingShape { .. })));
        let short = "#emb v=2\n>s a n=2\n1 2\n";
        assert!(PrecomputedEmbeddings::parse(short, "t").is_err());
    }

    #[test]
    fn empty_file_gives_empty_provider() {
        let emb = PrecomputedEmbeddings::parse("", "t").unwrap();
        assert!(emb.is_empty());
        assert!(emb.get("x").is_err());
    }

    #[test]
    fn precomputed_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut emb = PrecomputedEmbeddings::new(5);
        for (id, n) in [("s-1", 3), ("s 2", 1), ("s3", 0)] {
            let vals = (0..n * 5).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(7)).collect();
            emb.insert(id, Matrix::from_vec(n, 5, vals).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        write_precomputed(&path, &emb).unwrap();
        let back = load_precomputed(&path, Some(5)).unwrap();
        assert_eq!(back, emb);
        for (id, m) in &emb.matrices {
            let b = back.get(id).unwrap();
            assert!(m.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(load_precomputed(&path, Some(4)).is_err());
    }
}
