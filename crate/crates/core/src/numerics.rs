//! Dense row-major `f64` matrices, trainable parameters, and the closed-form
//! backward rules every forward computation in the crate is assembled from.
//!
//! Gradients are propagated by hand: each differentiable forward function has a
//! `*_backward` sibling that maps the upstream gradient onto its inputs. All
//! reductions run in a fixed order so results are reproducible bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (values.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, values })
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (i, cols),
                    right: (i, r.len()),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            values: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Column sums as a `1 x cols` row vector.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.values.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.values[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.values[r * self.cols + c]
    }
}

/// `a · b`. Every output cell sums over the inner dimension left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &b_kj) in out_row.iter_mut().zip(b.row(k)) {
                *o += a_ik * b_kj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let b_row = b.row(k);
        for (i, &a_ki) in a.row(k).iter().enumerate() {
            if a_ki == 0.0 {
                continue;
            }
            let out_row = &mut out.values[i * b.cols..(i + 1) * b.cols];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ki * b_kj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, i.e. all pairwise row dot products.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.values[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `c = a · b` given `∂L/∂c`.
pub fn matmul_backward(a: &Matrix, b: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Matrix)> {
    let da = matmul_nt(grad_out, b)?;
    let db = matmul_tn(a, grad_out)?;
    Ok((da, db))
}

/// `x · w + b` with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows != 1 || b.cols != w.cols {
        return Err(Error::Dimension {
            op: "affine bias",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let mut out = matmul(x, w)?;
    for r in 0..out.rows {
        for (o, bias) in out.row_mut(r).iter_mut().zip(&b.values) {
            *o += bias;
        }
    }
    Ok(out)
}

pub struct AffineGrads {
    pub x: Matrix,
    pub w: Matrix,
    pub b: Matrix,
}

pub fn affine_backward(x: &Matrix, w: &Matrix, grad_out: &Matrix) -> Result<AffineGrads> {
    let (dx, dw) = matmul_backward(x, w, grad_out)?;
    Ok(AffineGrads {
        x: dx,
        w: dw,
        b: grad_out.col_sums(),
    })
}

/// `log(e^anchor + Σ e^{xᵢ})`, evaluated around the largest exponent.
pub fn logsumexp_anchored(anchor: f64, xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(anchor, f64::max);
    let tail: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + ((anchor - m).exp() + tail).ln()
}

/// Partial derivatives of [`logsumexp_anchored`] with respect to each `xᵢ`.
pub fn logsumexp_anchored_grad(anchor: f64, xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(anchor, f64::max);
    let weights: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z = (anchor - m).exp() + weights.iter().sum::<f64>();
    weights.into_iter().map(|w| w / z).collect()
}

/// `log(1 + Σ e^{xᵢ})`: a log-sum-exp with an implicit zero term.
pub fn logsumexp0(xs: &[f64]) -> f64 {
    logsumexp_anchored(0.0, xs)
}

pub fn logsumexp0_grad(xs: &[f64]) -> Vec<f64> {
    logsumexp_anchored_grad(0.0, xs)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows, value.cols);
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Adds `grad` into the accumulator. Repeated calls sum.
    pub fn accumulate(&mut self, grad: &Matrix) -> Result<()> {
        self.grad.add_assign(grad).map_err(|_| Error::Dimension {
            op: "accumulate",
            left: self.grad.shape(),
            right: grad.shape(),
        })
    }

    pub fn accumulate_row(&mut self, row: usize, grad: &[f64]) {
        for (g, d) in self.grad.row_mut(row).iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn reset_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Sum of all entries; the gradient is all ones.
pub fn sum_loss(p: &mut Param) -> f64 {
    let ones = Matrix::filled(p.value.rows, p.value.cols, 1.0);
    p.accumulate(&ones).expect("same shape");
    p.value.sum()
}

/// `½‖W‖²`; the gradient is `W` itself.
pub fn half_sq_norm_loss(p: &mut Param) -> f64 {
    let g = p.value.clone();
    p.accumulate(&g).expect("same shape");
    0.5 * p.value.sq_norm()
}
