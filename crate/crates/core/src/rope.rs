//! Rotary position encoding.
//!
//! Position `p` rotates each dimension pair `(2k, 2k+1)` by the angle
//! `p·θ_k` with `θ_k = base^(-2k/d)`. The rotations are orthogonal and compose
//! additively, so `⟨R_i q, R_j k⟩ = ⟨q, R_{j-i} k⟩`: a dot product between
//! rotated vectors only sees the relative offset between the two positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryEncoding {
    dim: usize,
    base: f64,
    angles: Vec<f64>,
}

impl RotaryEncoding {
    pub fn new(dim: usize, base: f64) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Invalid(format!(
                "rotary dimension must be even and positive, got {dim}"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Invalid(format!(
                "rotary base must be positive, got {base}"
            )));
        }
        let angles = (0..dim / 2)
            .map(|k| base.powf(-2.0 * k as f64 / dim as f64))
            .collect();
        Ok(RotaryEncoding { dim, base, angles })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Rotates `x` to `position`. A negative position applies the inverse
    /// rotation, which is also the transpose of `R_{-position}`.
    pub fn rotate(&self, x: &[f64], position: i64) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        let mut out = x.to_vec();
        self.rotate_in_place(&mut out, position);
        Ok(out)
    }

    pub(crate) fn rotate_in_place(&self, x: &mut [f64], position: i64) {
        if position == 0 {
            return;
        }
        let p = position as f64;
        for (pair, theta) in x.chunks_exact_mut(2).zip(&self.angles) {
            let (sin, cos) = (p * theta).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }

    /// Rotates row `i` of `m` to position `i`.
    pub fn rotate_rows(&self, m: &Matrix) -> Result<Matrix> {
        self.check_len(m.cols())?;
        let mut out = m.clone();
        for r in 0..out.rows() {
            self.rotate_in_place(out.row_mut(r), r as i64);
        }
        Ok(out)
    }

    /// Backward of [`rotate_rows`](Self::rotate_rows): applies `R_iᵀ` to row `i`.
    pub fn unrotate_rows(&self, grad: &Matrix) -> Result<Matrix> {
        self.check_len(grad.cols())?;
        let mut out = grad.clone();
        for r in 0..out.rows() {
            self.rotate_in_place(out.row_mut(r), -(r as i64));
        }
        Ok(out)
    }

    /// `⟨R_i q, R_j k⟩`.
    pub fn rel_score(&self, q: &[f64], k: &[f64], i: usize, j: usize) -> Result<f64> {
        if q.len() != k.len() {
            return Err(Error::Dimension {
                op: "rel_score",
                left: (1, q.len()),
                right: (1, k.len()),
            });
        }
        let rq = self.rotate(q, i as i64)?;
        let rk = self.rotate(k, j as i64)?;
        Ok(dot(&rq, &rk))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Dimension {
                op: "rotate",
                left: (1, self.dim),
                right: (1, len),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(x: &[f64]) -> f64 {
        dot(x, x).sqrt()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn rejects_odd_or_zero_dims() {
        assert!(RotaryEncoding::new(3, DEFAULT_BASE).is_err());
        assert!(RotaryEncoding::new(0, DEFAULT_BASE).is_err());
        assert!(RotaryEncoding::new(4, -1.0).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let enc = RotaryEncoding::new(6, DEFAULT_BASE).unwrap();
        let x = [0.3, -1.2, 4.0, 0.0, 2.5, -0.7];
        assert_eq!(enc.rotate(&x, 0).unwrap(), x.to_vec());
    }

    #[test]
    fn two_dim_closed_form() {
        let enc = RotaryEncoding::new(2, DEFAULT_BASE).unwrap();
        assert_eq!(enc.angles(), &[1.0]);
        let r = enc.rotate(&[1.0, 0.0], 1).unwrap();
        assert!((r[0] - 0.5403023058681398).abs() < 1e-12);
        assert!((r[1] - 0.8414709848078965).abs() < 1e-12);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let enc = RotaryEncoding::new(4, DEFAULT_BASE).unwrap();
        assert!(enc.rotate(&[1.0, 2.0], 1).is_err());
        assert!(enc.rel_score(&[1.0; 4], &[1.0; 2], 0, 1).is_err());
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = RotaryEncoding::new(16, DEFAULT_BASE).unwrap();
        for p in [1, 7, 100] {
            let x = random_vec(&mut rng, 16);
            let r = enc.rotate(&x, p).unwrap();
            assert!((norm(&r) - norm(&x)).abs() <= 1e-9);
        }
    }

    #[test]
    fn equal_positions_give_plain_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = RotaryEncoding::new(8, DEFAULT_BASE).unwrap();
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        for i in [0, 3, 77] {
            assert!((enc.rel_score(&q, &k, i, i).unwrap() - dot(&q, &k)).abs() <= 1e-9);
        }
    }

    #[test]
    fn relative_shift_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [8, 64] {
            let enc = RotaryEncoding::new(d, DEFAULT_BASE).unwrap();
            for _ in 0..50 {
                let q = random_vec(&mut rng, d);
                let k = random_vec(&mut rng, d);
                let a = rng.gen_range(0..128usize);
                let b = rng.gen_range(0..128usize);
                let (i, j) = (a.min(b), a.max(b));
                let s = enc.rel_score(&q, &k, i, j).unwrap();
                let shifted = dot(&q, &enc.rotate(&k, (j - i) as i64).unwrap());
                assert!((s - shifted).abs() <= 1e-6);
                let moved = enc.rel_score(&q, &k, i + 5, j + 5).unwrap();
                assert!((s - moved).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn unrotate_is_the_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = RotaryEncoding::new(4, 100.0).unwrap();
        let m = Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = Matrix::from_vec(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        // ⟨R m, g⟩ = ⟨m, Rᵀ g⟩
        let lhs = dot(enc.rotate_rows(&m).unwrap().as_slice(), g.as_slice());
        let rhs = dot(m.as_slice(), enc.unrotate_rows(&g).unwrap().as_slice());
        assert!((lhs - rhs).abs() < 1e-12);
        let back = enc.unrotate_rows(&enc.rotate_rows(&m).unwrap()).unwrap();
        assert!(back.max_abs_diff(&m) < 1e-12);
    }

    proptest! {
        #[test]
        fn rotation_is_orthogonal(seed in any::<u64>(), p in 0i64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = RotaryEncoding::new(10, DEFAULT_BASE).unwrap();
            let a = random_vec(&mut rng, 10);
            let b = random_vec(&mut rng, 10);
            let ra = enc.rotate(&a, p).unwrap();
            let rb = enc.rotate(&b, p).unwrap();
            prop_assert!((dot(&ra, &rb) - dot(&a, &b)).abs() <= 1e-9);
        }
    }
}
