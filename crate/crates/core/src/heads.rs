//! Span scoring heads.
//!
//! Every head maps token representations `H` (n×v) to one n×n score matrix per
//! entity type, where cell `(i, j)` scores the span starting at token `i` and
//! ending (inclusively) at token `j`.
//!
//! * [`HeadKind::Gp`]: each type owns its own query/key projections and the
//!   score is `⟨R_i q_{i,α}, R_j k_{j,α}⟩`.
//! * [`HeadKind::Egp`]: one shared query/key projection scores span extents for
//!   all types; a type adds `w_αᵀ[q_i; k_i; q_j; k_j]` on top (`w_α` has 4d
//!   entries).
//! * [`HeadKind::EgpH`]: like `Egp`, but the type term reads the raw token
//!   vectors, `w_αᵀ[h_i; h_j]` (`w_α` has 2v entries).
//!
//! Rotary encoding, when enabled, rotates only the query/key extraction term.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{affine, affine_backward, dot, matmul, matmul_nt, matmul_tn, Matrix, Param};
use crate::rope::RotaryEncoding;

/// Fill value used when a score matrix is shown with masked cells blanked out.
pub const MASKED_FILL: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct EntityTypeSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for EntityTypeSet {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        EntityTypeSet::new(names)
    }
}

impl From<EntityTypeSet> for Vec<String> {
    fn from(t: EntityTypeSet) -> Self {
        t.names
    }
}

impl EntityTypeSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Invalid("entity type names must be nonempty".into()));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate entity type `{name}`")));
            }
        }
        Ok(EntityTypeSet { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownType(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "egp")]
    Egp,
    #[serde(rename = "egp-h")]
    EgpH,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Gp, HeadKind::Egp, HeadKind::EgpH];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Gp => "gp",
            HeadKind::Egp => "egp",
            HeadKind::EgpH => "egp-h",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(HeadKind::Gp),
            "egp" => Ok(HeadKind::Egp),
            "egp-h" => Ok(HeadKind::EgpH),
            other => Err(Error::Invalid(format!(
                "unknown head kind `{other}` (expected gp, egp or egp-h)"
            ))),
        }
    }
}

/// Weight parameters (biases excluded) added by registering one more entity
/// type: `2vd` for gp, `4d` for egp, `2v` for egp-h.
pub fn added_params(kind: HeadKind, v: usize, d: usize) -> usize {
    match kind {
        HeadKind::Gp => 2 * v * d,
        HeadKind::Egp => 4 * d,
        HeadKind::EgpH => 2 * v,
    }
}

/// Like [`added_params`] but parses the kind name.
pub fn added_params_by_name(kind: &str, v: usize, d: usize) -> Result<usize> {
    if v == 0 || d == 0 {
        return Err(Error::Invalid("v and d must be positive".into()));
    }
    Ok(added_params(kind.parse()?, v, d))
}

/// Valid score cells: `0 ≤ i ≤ j < true_len`, optionally `j - i + 1 ≤ max_span`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanMask {
    n: usize,
    true_len: usize,
    max_span: Option<usize>,
}

impl SpanMask {
    pub fn new(n: usize, true_len: usize, max_span: Option<usize>) -> Self {
        assert!(true_len <= n, "true length {true_len} exceeds padded length {n}");
        SpanMask {
            n,
            true_len,
            max_span,
        }
    }

    pub fn full(len: usize) -> Self {
        SpanMask::new(len, len, None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn true_len(&self) -> usize {
        self.true_len
    }

    pub fn max_span(&self) -> Option<usize> {
        self.max_span
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        i <= j && j < self.true_len && self.max_span.map_or(true, |m| j - i < m)
    }

    /// Valid cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.true_len).flat_map(move |i| {
            let end = match self.max_span {
                Some(m) => (i + m).min(self.true_len),
                None => self.true_len,
            };
            (i..end).map(move |j| (i, j))
        })
    }

    pub fn count(&self) -> usize {
        self.cells().count()
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.is_valid(i, j)).collect())
            .collect()
    }
}

/// Per-type n×n span scores plus the mask of cells that take part in loss and
/// decoding. Cells outside the mask hold whatever the head computed and must be
/// ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    pub scores: Vec<Matrix>,
    pub mask: SpanMask,
}

impl ScoreTensor {
    pub fn new(scores: Vec<Matrix>, mask: SpanMask) -> Self {
        debug_assert!(scores.iter().all(|s| s.shape() == (mask.n(), mask.n())));
        ScoreTensor { scores, mask }
    }

    pub fn num_types(&self) -> usize {
        self.scores.len()
    }

    pub fn get(&self, ty: usize, i: usize, j: usize) -> f64 {
        self.scores[ty][(i, j)]
    }

    /// Copy of one type's matrix with masked cells replaced by [`MASKED_FILL`].
    pub fn masked_view(&self, ty: usize) -> Matrix {
        let mut m = self.scores[ty].clone();
        for i in 0..self.mask.n() {
            for j in 0..self.mask.n() {
                if !self.mask.is_valid(i, j) {
                    m[(i, j)] = MASKED_FILL;
                }
            }
        }
        m
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, values).expect("shape")
}

/// Query/key projections for one type (gp) or shared by all types (egp).
#[derive(Clone, Debug, PartialEq)]
pub struct QkProjection {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
}

impl QkProjection {
    fn new(prefix: &str, wq: Matrix, wk: Matrix) -> Self {
        let d = wq.cols();
        QkProjection {
            wq: Param::new(format!("{prefix}.wq"), wq),
            bq: Param::zeros(format!("{prefix}.bq"), 1, d),
            wk: Param::new(format!("{prefix}.wk"), wk),
            bk: Param::zeros(format!("{prefix}.bk"), 1, d),
        }
    }

    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        Ok((
            affine(h, &self.wq.value, &self.bq.value)?,
            affine(h, &self.wk.value, &self.bk.value)?,
        ))
    }

    /// Accumulates parameter gradients and returns `∂L/∂h`.
    fn backward(&mut self, h: &Matrix, dq: &Matrix, dk: &Matrix) -> Result<Matrix> {
        let gq = affine_backward(h, &self.wq.value, dq)?;
        let gk = affine_backward(h, &self.wk.value, dk)?;
        self.wq.accumulate(&gq.w)?;
        self.bq.accumulate(&gq.b)?;
        self.wk.accumulate(&gk.w)?;
        self.bk.accumulate(&gk.b)?;
        let mut dh = gq.x;
        dh.add_assign(&gk.x)?;
        Ok(dh)
    }

    fn params(&self) -> [&Param; 4] {
        [&self.wq, &self.bq, &self.wk, &self.bk]
    }

    fn params_mut(&mut self) -> [&mut Param; 4] {
        [&mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpHeadParams {
    pub per_type: Vec<QkProjection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EgpHeadParams {
    pub kind: HeadKind,
    pub shared: QkProjection,
    /// One `1 x 4d` (egp) or `1 x 2v` (egp-h) row per type.
    pub type_weights: Vec<Param>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Gp(GpHeadParams),
    Egp(EgpHeadParams),
}

/// Intermediate values kept from a forward pass for [`Head::backward`].
pub struct HeadCache {
    h: Matrix,
    rope: Option<RotaryEncoding>,
    inner: CacheInner,
}

enum CacheInner {
    Gp {
        /// Rotated (or plain) Q and K per type.
        qk: Vec<(Matrix, Matrix)>,
    },
    Egp {
        q: Matrix,
        k: Matrix,
        qr: Matrix,
        kr: Matrix,
        /// Per-token features read by the type term: `[q_i; k_i]` or `h_i`.
        feats: Matrix,
    },
}

impl Head {
    /// Randomly initialised head. Biases start at zero.
    pub fn new(kind: HeadKind, types: usize, v: usize, d: usize, rng: &mut impl RngCore) -> Self {
        Head::build(kind, types, v, d, Some(rng))
    }

    /// All-zero head.
    pub fn zeros(kind: HeadKind, types: usize, v: usize, d: usize) -> Self {
        Head::build(kind, types, v, d, None)
    }

    fn build(kind: HeadKind, types: usize, v: usize, d: usize, mut rng: Option<&mut dyn RngCore>) -> Self {
        let mut weight = |rows: usize, cols: usize| match rng.as_deref_mut() {
            Some(r) => glorot(r, rows, cols),
            None => Matrix::zeros(rows, cols),
        };
        match kind {
            HeadKind::Gp => Head::Gp(GpHeadParams {
                per_type: (0..types)
                    .map(|t| QkProjection::new(&format!("head.gp.{t}"), weight(v, d), weight(v, d)))
                    .collect(),
            }),
            HeadKind::Egp | HeadKind::EgpH => {
                let shared = QkProjection::new("head.shared", weight(v, d), weight(v, d));
                let width = if kind == HeadKind::Egp { 4 * d } else { 2 * v };
                let type_weights = (0..types)
                    .map(|t| Param::new(format!("head.type.{t}.w"), weight(1, width)))
                    .collect();
                Head::Egp(EgpHeadParams {
                    kind,
                    shared,
                    type_weights,
                })
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Gp(_) => HeadKind::Gp,
            Head::Egp(p) => p.kind,
        }
    }

    pub fn num_types(&self) -> usize {
        match self {
            Head::Gp(p) => p.per_type.len(),
            Head::Egp(p) => p.type_weights.len(),
        }
    }

    /// Input width v.
    pub fn input_dim(&self) -> usize {
        match self {
            Head::Gp(p) => p.per_type.first().map_or(0, |pr| pr.wq.value.rows()),
            Head::Egp(p) => p.shared.wq.value.rows(),
        }
    }

    /// Projection width d.
    pub fn proj_dim(&self) -> usize {
        match self {
            Head::Gp(p) => p.per_type.first().map_or(0, |pr| pr.wq.value.cols()),
            Head::Egp(p) => p.shared.wq.value.cols(),
        }
    }

    /// Number of weight entries, biases excluded.
    pub fn weight_count(&self) -> usize {
        match self {
            Head::Gp(p) => p.per_type.iter().map(|pr| pr.wq.len() + pr.wk.len()).sum(),
            Head::Egp(p) => {
                p.shared.wq.len()
                    + p.shared.wk.len()
                    + p.type_weights.iter().map(Param::len).sum::<usize>()
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Head::Gp(p) => p.per_type.iter().flat_map(|pr| pr.params()).collect(),
            Head::Egp(p) => {
                let mut out: Vec<&Param> = p.shared.params().into_iter().collect();
                out.extend(p.type_weights.iter());
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Head::Gp(p) => p.per_type.iter_mut().flat_map(|pr| pr.params_mut()).collect(),
            Head::Egp(p) => {
                let mut out: Vec<&mut Param> = p.shared.params_mut().into_iter().collect();
                out.extend(p.type_weights.iter_mut());
                out
            }
        }
    }

    /// Query and key rows for type `ty` (ignored by the shared-projection heads).
    pub fn project_index(&self, h: &Matrix, ty: usize) -> Result<(Matrix, Matrix)> {
        self.check_input(h)?;
        match self {
            Head::Gp(p) => p
                .per_type
                .get(ty)
                .ok_or_else(|| Error::UnknownType(format!("#{ty}")))?
                .forward(h),
            Head::Egp(p) => p.shared.forward(h),
        }
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "head input",
                left: (h.rows(), self.input_dim()),
                right: h.shape(),
            });
        }
        Ok(())
    }

    pub fn score(
        &self,
        h: &Matrix,
        mask: SpanMask,
        rope: Option<&RotaryEncoding>,
    ) -> Result<ScoreTensor> {
        self.forward(h, mask, rope).map(|(t, _)| t)
    }

    pub fn forward(
        &self,
        h: &Matrix,
        mask: SpanMask,
        rope: Option<&RotaryEncoding>,
    ) -> Result<(ScoreTensor, HeadCache)> {
        self.check_input(h)?;
        if mask.n() != h.rows() {
            return Err(Error::Dimension {
                op: "score mask",
                left: (mask.n(), mask.n()),
                right: h.shape(),
            });
        }
        let rotate = |m: Matrix| -> Result<Matrix> {
            match rope {
                Some(r) => r.rotate_rows(&m),
                None => Ok(m),
            }
        };
        match self {
            Head::Gp(p) => {
                let mut scores = Vec::with_capacity(p.per_type.len());
                let mut qk = Vec::with_capacity(p.per_type.len());
                for proj in &p.per_type {
                    let (q, k) = proj.forward(h)?;
                    let (qr, kr) = (rotate(q)?, rotate(k)?);
                    scores.push(matmul_nt(&qr, &kr)?);
                    qk.push((qr, kr));
                }
                let cache = HeadCache {
                    h: h.clone(),
                    rope: rope.cloned(),
                    inner: CacheInner::Gp { qk },
                };
                Ok((ScoreTensor::new(scores, mask), cache))
            }
            Head::Egp(p) => {
                let (q, k) = p.shared.forward(h)?;
                let qr = rotate(q.clone())?;
                let kr = rotate(k.clone())?;
                let extraction = matmul_nt(&qr, &kr)?;
                let feats = match p.kind {
                    HeadKind::EgpH => h.clone(),
                    _ => concat_cols(&q, &k),
                };
                let width = feats.cols();
                let mut scores = Vec::with_capacity(p.type_weights.len());
                for w in &p.type_weights {
                    let w = w.value.as_slice();
                    let (w_start, w_end) = w.split_at(width);
                    let start_term: Vec<f64> =
                        (0..feats.rows()).map(|i| dot(w_start, feats.row(i))).collect();
                    let end_term: Vec<f64> =
                        (0..feats.rows()).map(|j| dot(w_end, feats.row(j))).collect();
                    let mut s = extraction.clone();
                    for (i, a) in start_term.iter().enumerate() {
                        for (cell, b) in s.row_mut(i).iter_mut().zip(&end_term) {
                            *cell += a + b;
                        }
                    }
                    scores.push(s);
                }
                let cache = HeadCache {
                    h: h.clone(),
                    rope: rope.cloned(),
                    inner: CacheInner::Egp { q, k, qr, kr, feats },
                };
                Ok((ScoreTensor::new(scores, mask), cache))
            }
        }
    }

    /// Accumulates parameter gradients from `∂L/∂scores` and returns `∂L/∂h`.
    /// Masked cells of `grad` must already be zero.
    pub fn backward(&mut self, cache: &HeadCache, grad: &[Matrix]) -> Result<Matrix> {
        let unrotate = |m: Matrix| -> Result<Matrix> {
            match &cache.rope {
                Some(r) => r.unrotate_rows(&m),
                None => Ok(m),
            }
        };
        let h = &cache.h;
        match (self, &cache.inner) {
            (Head::Gp(p), CacheInner::Gp { qk }) => {
                let mut dh = Matrix::zeros(h.rows(), h.cols());
                for ((proj, (qr, kr)), ds) in p.per_type.iter_mut().zip(qk).zip(grad) {
                    let dq = unrotate(matmul(ds, kr)?)?;
                    let dk = unrotate(matmul_tn(ds, qr)?)?;
                    dh.add_assign(&proj.backward(h, &dq, &dk)?)?;
                }
                Ok(dh)
            }
            (Head::Egp(p), CacheInner::Egp { q, k, qr, kr, feats }) => {
                let n = h.rows();
                let width = feats.cols();
                let mut d_extraction = Matrix::zeros(n, n);
                let mut d_feats = Matrix::zeros(n, width);
                for (w, ds) in p.type_weights.iter_mut().zip(grad) {
                    d_extraction.add_assign(ds)?;
                    let d_start: Vec<f64> = (0..n).map(|i| ds.row(i).iter().sum()).collect();
                    let d_end = ds.col_sums();
                    let mut dw = vec![0.0; 2 * width];
                    let (wv_start, wv_end) = w.value.as_slice().split_at(width);
                    for i in 0..n {
                        let (a, b) = (d_start[i], d_end.as_slice()[i]);
                        let f = feats.row(i);
                        for c in 0..width {
                            dw[c] += a * f[c];
                            dw[width + c] += b * f[c];
                        }
                        for (c, df) in d_feats.row_mut(i).iter_mut().enumerate() {
                            *df += a * wv_start[c] + b * wv_end[c];
                        }
                    }
                    w.accumulate_row(0, &dw);
                }
                let mut dq = unrotate(matmul(&d_extraction, kr)?)?;
                let mut dk = unrotate(matmul_tn(&d_extraction, qr)?)?;
                let mut dh = Matrix::zeros(h.rows(), h.cols());
                match p.kind {
                    HeadKind::EgpH => dh.add_assign(&d_feats)?,
                    _ => {
                        let d = q.cols();
                        debug_assert_eq!(k.cols(), d);
                        for i in 0..n {
                            let row = d_feats.row(i);
                            for (x, g) in dq.row_mut(i).iter_mut().zip(&row[..d]) {
                                *x += g;
                            }
                            for (x, g) in dk.row_mut(i).iter_mut().zip(&row[d..]) {
                                *x += g;
                            }
                        }
                    }
                }
                dh.add_assign(&p.shared.backward(h, &dq, &dk)?)?;
                Ok(dh)
            }
            _ => Err(Error::Invalid("head cache does not match head kind".into())),
        }
    }
}

fn concat_cols(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}

/// Query/key projection for a named type.
pub fn project(h: &Matrix, head: &Head, types: &EntityTypeSet, ty: &str) -> Result<(Matrix, Matrix)> {
    let index = types.index_of(ty)?;
    head.project_index(h, index)
}

fn require_kind(head: &Head, kind: HeadKind) -> Result<()> {
    if head.kind() != kind {
        return Err(Error::Invalid(format!(
            "expected a {kind} head, got {}",
            head.kind()
        )));
    }
    Ok(())
}

pub fn score_gp(h: &Matrix, head: &Head, rope: Option<&RotaryEncoding>, mask: SpanMask) -> Result<ScoreTensor> {
    require_kind(head, HeadKind::Gp)?;
    head.score(h, mask, rope)
}

pub fn score_egp(h: &Matrix, head: &Head, rope: Option<&RotaryEncoding>, mask: SpanMask) -> Result<ScoreTensor> {
    require_kind(head, HeadKind::Egp)?;
    head.score(h, mask, rope)
}

pub fn score_egp_h(h: &Matrix, head: &Head, rope: Option<&RotaryEncoding>, mask: SpanMask) -> Result<ScoreTensor> {
    require_kind(head, HeadKind::EgpH)?;
    head.score(h, mask, rope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn randomize_biases(head: &mut Head, rng: &mut ChaCha8Rng) {
        for p in head.params_mut() {
            if p.name.ends_with(".bq") || p.name.ends_with(".bk") {
                let (r, c) = p.shape();
                p.value = random(rng, r, c);
            }
        }
    }

    fn vec_row(m: &Matrix, r: usize) -> Vec<f64> {
        m.row(r).to_vec()
    }

    /// Direct per-cell evaluation of each head's scoring rule.
    fn brute_force(head: &Head, h: &Matrix, rope: Option<&RotaryEncoding>, ty: usize, i: usize, j: usize) -> f64 {
        let matvec = |w: &Matrix, b: &Matrix, x: &[f64]| -> Vec<f64> {
            (0..w.cols())
                .map(|c| b[(0, c)] + (0..w.rows()).map(|r| w[(r, c)] * x[r]).sum::<f64>())
                .collect()
        };
        let rotated_dot = |q: Vec<f64>, k: Vec<f64>| -> f64 {
            match rope {
                Some(r) => dot(&r.rotate(&q, i as i64).unwrap(), &r.rotate(&k, j as i64).unwrap()),
                None => dot(&q, &k),
            }
        };
        match head {
            Head::Gp(p) => {
                let pr = &p.per_type[ty];
                let q = matvec(&pr.wq.value, &pr.bq.value, h.row(i));
                let k = matvec(&pr.wk.value, &pr.bk.value, h.row(j));
                rotated_dot(q, k)
            }
            Head::Egp(p) => {
                let s = &p.shared;
                let qi = matvec(&s.wq.value, &s.bq.value, h.row(i));
                let ki = matvec(&s.wk.value, &s.bk.value, h.row(i));
                let qj = matvec(&s.wq.value, &s.bq.value, h.row(j));
                let kj = matvec(&s.wk.value, &s.bk.value, h.row(j));
                let span: Vec<f64> = match p.kind {
                    HeadKind::EgpH => [vec_row(h, i), vec_row(h, j)].concat(),
                    _ => [qi.clone(), ki, qj, kj.clone()].concat(),
                };
                rotated_dot(qi, kj) + dot(p.type_weights[ty].value.as_slice(), &span)
            }
        }
    }

    #[test]
    fn added_params_reference_values() {
        assert_eq!(added_params(HeadKind::Gp, 768, 64), 98304);
        assert_eq!(added_params(HeadKind::Egp, 768, 64), 256);
        assert_eq!(added_params(HeadKind::EgpH, 768, 64), 1536);
        assert!(added_params_by_name("crf", 768, 64).is_err());
        assert_eq!(added_params_by_name("egp-h", 10, 3).unwrap(), 20);
    }

    #[test]
    fn weight_count_grows_by_added_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in HeadKind::ALL {
            for types in 1..4 {
                let a = Head::new(kind, types, 12, 6, &mut rng);
                let b = Head::new(kind, types + 1, 12, 6, &mut rng);
                assert_eq!(b.weight_count() - a.weight_count(), added_params(kind, 12, 6));
            }
        }
    }

    #[test]
    fn type_set_lookup() {
        let types = EntityTypeSet::new(["PER", "LOC"]).unwrap();
        assert_eq!(types.index_of("LOC").unwrap(), 1);
        assert!(matches!(types.index_of("ORG"), Err(Error::UnknownType(t)) if t == "ORG"));
        assert!(EntityTypeSet::new(["A", "A"]).is_err());
        assert!(EntityTypeSet::new([""]).is_err());
    }

    #[test]
    fn identity_projection_returns_input() {
        let mut head = Head::zeros(HeadKind::Gp, 1, 3, 3);
        if let Head::Gp(p) = &mut head {
            p.per_type[0].wq.value = Matrix::identity(3);
            p.per_type[0].wk.value = Matrix::identity(3);
        }
        let types = EntityTypeSet::new(["X"]).unwrap();
        let h = Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]).unwrap();
        let (q, k) = project(&h, &head, &types, "X").unwrap();
        assert_eq!(q, h);
        assert_eq!(k, h);
        assert!(matches!(project(&h, &head, &types, "Y"), Err(Error::UnknownType(_))));
    }

    #[test]
    fn zero_row_projects_to_bias() {
        let mut head = Head::zeros(HeadKind::Gp, 1, 2, 3);
        if let Head::Gp(p) = &mut head {
            p.per_type[0].bq.value = Matrix::row_vector(&[1.0, 2.0, 3.0]);
            p.per_type[0].wq.value = Matrix::filled(2, 3, 0.7);
        }
        let h = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let (q, _) = head.project_index(&h, 0).unwrap();
        assert_eq!(q.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn projection_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut head = Head::new(HeadKind::Gp, 2, 5, 4, &mut rng);
        randomize_biases(&mut head, &mut rng);
        let h = random(&mut rng, 6, 5);
        let (q, k) = head.project_index(&h, 1).unwrap();
        let Head::Gp(p) = &head else { unreachable!() };
        let pr = &p.per_type[1];
        for i in 0..6 {
            for c in 0..4 {
                let mut eq = pr.bq.value[(0, c)];
                let mut ek = pr.bk.value[(0, c)];
                for r in 0..5 {
                    eq += h[(i, r)] * pr.wq.value[(r, c)];
                    ek += h[(i, r)] * pr.wk.value[(r, c)];
                }
                assert!((q[(i, c)] - eq).abs() <= 1e-12);
                assert!((k[(i, c)] - ek).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unit_vector_gp_scores() {
        let mut head = Head::zeros(HeadKind::Gp, 1, 2, 2);
        if let Head::Gp(p) = &mut head {
            p.per_type[0].wq.value = Matrix::identity(2);
            p.per_type[0].wk.value = Matrix::identity(2);
        }
        let h = Matrix::identity(2);
        let t = score_gp(&h, &head, None, SpanMask::full(2)).unwrap();
        assert_eq!(t.scores[0], Matrix::identity(2));
        assert!(!t.mask.is_valid(1, 0));
        assert_eq!(t.masked_view(0)[(1, 0)], MASKED_FILL);
    }

    #[test]
    fn rope_leaves_diagonal_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let head = Head::new(HeadKind::Gp, 2, 6, 4, &mut rng);
        let rope = RotaryEncoding::new(4, 10_000.0).unwrap();
        let h = random(&mut rng, 7, 6);
        let plain = head.score(&h, SpanMask::full(7), None).unwrap();
        let rotated = head.score(&h, SpanMask::full(7), Some(&rope)).unwrap();
        for t in 0..2 {
            for i in 0..7 {
                assert!((plain.get(t, i, i) - rotated.get(t, i, i)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn every_head_matches_per_cell_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rope = RotaryEncoding::new(4, 10_000.0).unwrap();
        for kind in HeadKind::ALL {
            for use_rope in [false, true] {
                for n in [1, 5, 8] {
                    let mut head = Head::new(kind, 3, 6, 4, &mut rng);
                    randomize_biases(&mut head, &mut rng);
                    let h = random(&mut rng, n, 6);
                    let r = use_rope.then_some(&rope);
                    let t = head.score(&h, SpanMask::full(n), r).unwrap();
                    for ty in 0..3 {
                        for (i, j) in t.mask.cells() {
                            let want = brute_force(&head, &h, r, ty, i, j);
                            assert!((t.get(ty, i, j) - want).abs() <= 1e-9, "{kind} rope={use_rope}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn named_scoring_functions_check_the_kind() {
        let head = Head::zeros(HeadKind::Egp, 1, 4, 2);
        let h = Matrix::zeros(3, 4);
        assert!(score_gp(&h, &head, None, SpanMask::full(3)).is_err());
        assert!(score_egp_h(&h, &head, None, SpanMask::full(3)).is_err());
        let t = score_egp(&h, &head, None, SpanMask::full(3)).unwrap();
        assert!(t.scores[0].as_slice().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn zero_type_weights_reduce_to_extraction_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for kind in [HeadKind::Egp, HeadKind::EgpH] {
            let mut head = Head::new(kind, 3, 5, 4, &mut rng);
            let Head::Egp(p) = &mut head else { unreachable!() };
            for w in &mut p.type_weights {
                w.value.fill(0.0);
            }
            let h = random(&mut rng, 5, 5);
            let t = head.score(&h, SpanMask::full(5), None).unwrap();
            let (q, k) = head.project_index(&h, 0).unwrap();
            let extraction = matmul_nt(&q, &k).unwrap();
            for ty in 0..3 {
                assert_eq!(t.scores[ty], extraction);
            }
        }
    }

    #[test]
    fn zero_queries_and_keys_give_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut head = Head::new(HeadKind::Egp, 2, 5, 4, &mut rng);
        let Head::Egp(p) = &mut head else { unreachable!() };
        p.shared.wq.value.fill(0.0);
        p.shared.wk.value.fill(0.0);
        let h = random(&mut rng, 4, 5);
        let t = head.score(&h, SpanMask::full(4), None).unwrap();
        assert!(t.scores.iter().all(|s| s.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn one_hot_inputs_give_kronecker_extraction() {
        let mut head = Head::zeros(HeadKind::EgpH, 2, 4, 4);
        let Head::Egp(p) = &mut head else { unreachable!() };
        p.shared.wq.value = Matrix::identity(4);
        p.shared.wk.value = Matrix::identity(4);
        let h = Matrix::identity(4);
        let t = head.score(&h, SpanMask::full(4), None).unwrap();
        assert_eq!(t.scores[0], Matrix::identity(4));
        assert_eq!(t.scores[1], Matrix::identity(4));
    }

    #[test]
    fn egp_types_differ_only_by_classification_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let rope = RotaryEncoding::new(4, 10_000.0).unwrap();
        for use_rope in [false, true] {
            let mut head = Head::new(HeadKind::Egp, 2, 5, 4, &mut rng);
            randomize_biases(&mut head, &mut rng);
            let h = random(&mut rng, 6, 5);
            let t = head.score(&h, SpanMask::full(6), use_rope.then_some(&rope)).unwrap();
            let (q, k) = head.project_index(&h, 0).unwrap();
            let Head::Egp(p) = &head else { unreachable!() };
            let wa = p.type_weights[0].value.as_slice();
            let wb = p.type_weights[1].value.as_slice();
            let diff: Vec<f64> = wa.iter().zip(wb).map(|(a, b)| a - b).collect();
            for (i, j) in t.mask.cells() {
                let span = [q.row(i), k.row(i), q.row(j), k.row(j)].concat();
                let want = dot(&diff, &span);
                assert!((t.get(0, i, j) - t.get(1, i, j) - want).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn mask_cells_and_caps() {
        let m = SpanMask::new(5, 3, None);
        assert_eq!(m.count(), 6);
        assert!(m.is_valid(0, 2) && !m.is_valid(2, 1) && !m.is_valid(0, 3));
        let capped = SpanMask::new(4, 4, Some(2));
        assert_eq!(capped.cells().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3)]);
        for len in 0..10 {
            assert_eq!(SpanMask::full(len).count(), len * (len + 1) / 2);
        }
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let rope = RotaryEncoding::new(4, 10_000.0).unwrap();
        for kind in HeadKind::ALL {
            for use_rope in [false, true] {
                let mut head = Head::new(kind, 2, 5, 4, &mut rng);
                randomize_biases(&mut head, &mut rng);
                let h = random(&mut rng, 4, 5);
                let r = use_rope.then_some(&rope);
                let mask = SpanMask::full(4);
                // L = Σ_valid s·c for random coefficients
                let coeffs: Vec<Matrix> = (0..2).map(|_| random(&mut rng, 4, 4)).collect();
                let grads: Vec<Matrix> = coeffs
                    .iter()
                    .map(|c| {
                        let mut g = c.clone();
                        for i in 0..4 {
                            for j in 0..4 {
                                if !mask.is_valid(i, j) {
                                    g[(i, j)] = 0.0;
                                }
                            }
                        }
                        g
                    })
                    .collect();
                let loss = |head: &Head, h: &Matrix| -> f64 {
                    let t = head.score(h, mask, r).unwrap();
                    (0..2).map(|ty| dot(t.scores[ty].as_slice(), grads[ty].as_slice())).sum()
                };
                let (_, cache) = head.forward(&h, mask, r).unwrap();
                let dh = head.backward(&cache, &grads).unwrap();
                let eps = 1e-5;
                let check = |a: f64, fd: f64| (a - fd).abs() <= (1e-4 * fd.abs()).max(1e-6);
                for idx in 0..h.len() {
                    let mut hp = h.clone();
                    hp.as_mut_slice()[idx] += eps;
                    let up = loss(&head, &hp);
                    hp.as_mut_slice()[idx] -= 2.0 * eps;
                    let fd = (up - loss(&head, &hp)) / (2.0 * eps);
                    assert!(check(dh.as_slice()[idx], fd), "{kind} dh[{idx}]");
                }
                let n_params = head.params().len();
                for pi in 0..n_params {
                    let len = head.params()[pi].len();
                    for idx in 0..len {
                        let analytic = head.params()[pi].grad.as_slice()[idx];
                        let mut probe = head.clone();
                        probe.params_mut()[pi].value.as_mut_slice()[idx] += eps;
                        let up = loss(&probe, &h);
                        probe.params_mut()[pi].value.as_mut_slice()[idx] -= 2.0 * eps;
                        let fd = (up - loss(&probe, &h)) / (2.0 * eps);
                        assert!(check(analytic, fd), "{kind} rope={use_rope} {}[{idx}]", head.params()[pi].name);
                    }
                }
            }
        }
    }
}
