//! Cyclic banded matrices and a profile Cholesky solver for them.
//!
//! The semi-implicit contour update solves `(I + A + B) y = r` where `A`
//! is cyclic tri-diagonal and `B` cyclic penta-diagonal. Both are symmetric
//! positive semi-definite for non-negative weights, so `I + A + B` admits a
//! Cholesky factorisation. With the wrap-around entries in the corners, the
//! lower factor keeps the band in every row except the last `half` rows,
//! which fill in completely. Factorisation costs `O(n·half²)`.

use crate::error::{Error, Result};

/// `n × n` matrix whose row `i` only has entries in columns `i + o (mod n)`
/// for `o ∈ [-half, half]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclicBanded {
    n: usize,
    half: usize,
    /// Row-major, `2·half + 1` coefficients per row ordered by offset.
    coeffs: Vec<f64>,
}

impl CyclicBanded {
    pub fn zeros(n: usize, half: usize) -> Self {
        CyclicBanded {
            n,
            half,
            coeffs: vec![0.0; n * (2 * half + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, 0);
        m.coeffs.fill(1.0);
        m
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn half_bandwidth(&self) -> usize {
        self.half
    }

    /// Coefficient of row `row` at column `row + offset (mod n)`.
    #[inline]
    pub fn band(&self, row: usize, offset: isize) -> f64 {
        let w = 2 * self.half + 1;
        self.coeffs[row * w + (offset + self.half as isize) as usize]
    }

    #[inline]
    pub fn set_band(&mut self, row: usize, offset: isize, value: f64) {
        let w = 2 * self.half + 1;
        self.coeffs[row * w + (offset + self.half as isize) as usize] = value;
    }

    /// Dense entry `(i, j)`; offsets that alias for small `n` are summed.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let n = self.n as isize;
        let h = self.half as isize;
        (-h..=h)
            .filter(|o| (i as isize + o).rem_euclid(n) as usize == j)
            .map(|o| self.band(i, o))
            .sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let n = self.n as isize;
        let h = self.half as isize;
        (0..self.n)
            .map(|i| {
                (-h..=h)
                    .map(|o| self.band(i, o) * x[(i as isize + o).rem_euclid(n) as usize])
                    .sum()
            })
            .collect()
    }

    /// Sum of two cyclic banded matrices of equal size.
    pub fn plus(&self, other: &CyclicBanded) -> CyclicBanded {
        assert_eq!(self.n, other.n);
        let half = self.half.max(other.half);
        let mut out = CyclicBanded::zeros(self.n, half);
        for m in [self, other] {
            let h = m.half as isize;
            for i in 0..self.n {
                for o in -h..=h {
                    let cur = out.band(i, o);
                    out.set_band(i, o, cur + m.band(i, o));
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let h = self.half as isize;
        let n = self.n as isize;
        for i in 0..self.n {
            for o in 1..=h {
                let j = (i as isize + o).rem_euclid(n) as usize;
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Lower Cholesky factor of a symmetric positive definite [`CyclicBanded`]
/// matrix stored by row profile.
#[derive(Clone, Debug)]
pub struct CyclicCholesky {
    first: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl CyclicCholesky {
    pub fn factor(m: &CyclicBanded) -> Result<Self> {
        let n = m.size();
        let half = m.half_bandwidth();
        let scale = m.coeffs.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
        if !m.is_symmetric(1e-12 * scale) {
            return Err(Error::Shape("cyclic system matrix is not symmetric".into()));
        }
        let dense = n <= 2 * half + 2;
        let first: Vec<usize> = (0..n)
            .map(|i| {
                if dense || i + half >= n {
                    0
                } else {
                    i.saturating_sub(half)
                }
            })
            .collect();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let fi = first[i];
            let mut row = vec![0.0; i - fi + 1];
            for j in fi..=i {
                let fj = first[j];
                let mut s = m.get(i, j);
                if j < i {
                    let other = &rows[j];
                    for p in fi.max(fj)..j {
                        s -= row[p - fi] * other[p - fj];
                    }
                    row[j - fi] = s / other[j - fj];
                } else {
                    for p in fi..i {
                        s -= row[p - fi] * row[p - fi];
                    }
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Singular { row: i, pivot: s });
                    }
                    row[i - fi] = s.sqrt();
                }
            }
            rows.push(row);
        }
        Ok(CyclicCholesky { first, rows })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.rows.len();
        assert_eq!(b.len(), n);
        let mut z = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.rows[i];
            let mut s = z[i];
            for p in fi..i {
                s -= row[p - fi] * z[p];
            }
            z[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.rows[i];
            let xi = z[i] / row[i - fi];
            z[i] = xi;
            for p in fi..i {
                z[p] -= row[p - fi] * xi;
            }
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize, seed: u64) -> CyclicBanded {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = CyclicBanded::zeros(n, 2);
        for i in 0..n {
            for o in 1..=2isize {
                let j = (i as isize + o).rem_euclid(n as isize) as usize;
                let w = rng.random_range(-1.0..1.0);
                m.set_band(i, o, w);
                m.set_band(j, -o, w);
            }
        }
        for i in 0..n {
            m.set_band(i, 0, 5.0);
        }
        m
    }

    fn check_solve(n: usize, seed: u64) {
        let m = spd(n, seed);
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = m.mul_vec(&x);
        let got = CyclicCholesky::factor(&m).unwrap().solve(&b);
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() < 1e-12, "n={n}: {g} vs {w}");
        }
    }

    #[test]
    fn solves_cyclic_pentadiagonal() {
        for n in [4, 5, 6, 7, 12, 60] {
            check_solve(n, n as u64);
        }
    }

    #[test]
    fn aliased_offsets_sum() {
        let mut m = CyclicBanded::zeros(4, 2);
        m.set_band(0, 2, 1.0);
        m.set_band(0, -2, 2.0);
        assert_eq!(m.get(0, 2), 3.0);
    }

    #[test]
    fn rejects_indefinite() {
        let mut m = CyclicBanded::identity(6);
        m.set_band(3, 0, -1.0);
        assert!(matches!(
            CyclicCholesky::factor(&m),
            Err(Error::Singular { row: 3, .. })
        ));
    }

    #[test]
    fn rejects_asymmetric() {
        let mut m = spd(8, 1);
        m.set_band(2, 1, 9.0);
        assert!(CyclicCholesky::factor(&m).is_err());
    }
}
