//! Symmetric banded matrices and their LDLᵀ factorization.
//!
//! The implicit-Euler system matrix `M + h²K` couples only nodes that share an
//! element, so with grid-ordered node indices it is banded with a small half
//! bandwidth. A banded LDLᵀ factorization costs O(n·b²) instead of O(n³),
//! which dominates the cost of every Newton iteration and adjoint solve.

use crate::error::{Error, Result};

/// Symmetric matrix stored as its lower band.
///
/// Entry `(i, j)` with `j <= i <= j + half_bw` lives at
/// `data[j * (half_bw + 1) + (i - j)]`. Entries outside the band are zero.
#[derive(Debug, Clone)]
pub struct SymBanded {
    n: usize,
    half_bw: usize,
    data: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, half_bw: usize) -> Self {
        let half_bw = half_bw.min(n.saturating_sub(1));
        Self {
            n,
            half_bw,
            data: vec![0.0; n * (half_bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half_bw
    }

    pub fn reset(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.half_bw);
        j * (self.half_bw + 1) + (i - j)
    }

    /// Adds `val` at `(i, j)`; only the lower triangle is stored, so callers
    /// scatter each symmetric pair once with `i >= j`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, val: f64) {
        let k = self.idx(i, j);
        self.data[k] += val;
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, val: f64) {
        let k = self.idx(i, j);
        self.data[k] = val;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.half_bw {
            return 0.0;
        }
        self.data[self.idx(i, j)]
    }

    /// y = A·x using the full symmetric matrix.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let hi = (j + self.half_bw).min(self.n - 1);
            let base = j * (self.half_bw + 1);
            y[j] += self.data[base] * x[j];
            for i in (j + 1)..=hi {
                let a = self.data[base + (i - j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let hi = (j + self.half_bw).min(self.n - 1);
            for i in j..=hi {
                let a = self.data[self.idx(i, j)];
                m[(i, j)] = a;
                m[(j, i)] = a;
            }
        }
        m
    }

    /// In-place LDLᵀ factorization (no pivoting; the band is preserved).
    ///
    /// Fails when a pivot falls below `pivot_floor` in magnitude; the caller
    /// decides whether to regularize and retry.
    pub fn factorize_ldl(self, pivot_floor: f64) -> Result<LdlFactor> {
        self.factorize_impl(pivot_floor, false)
    }

    /// LDLᵀ that additionally fails on any non-positive pivot, certifying the
    /// matrix positive definite. Newton uses this to detect indefinite
    /// Hessians and fall back to a shifted system.
    pub fn factorize_spd(self, pivot_floor: f64) -> Result<LdlFactor> {
        self.factorize_impl(pivot_floor, true)
    }

    fn factorize_impl(mut self, pivot_floor: f64, require_positive: bool) -> Result<LdlFactor> {
        let n = self.n;
        let hbw = self.half_bw;
        let w = hbw + 1;
        for j in 0..n {
            let lo = j.saturating_sub(hbw);
            // d_j = a_jj - sum_k l_jk^2 d_k
            let mut d = self.data[j * w];
            for k in lo..j {
                let l_jk = self.data[k * w + (j - k)];
                let d_k = self.data[k * w];
                d -= l_jk * l_jk * d_k;
            }
            let ok = if require_positive {
                d > pivot_floor
            } else {
                d.abs() > pivot_floor
            };
            if !d.is_finite() || !ok {
                return Err(Error::SingularSystem { index: j });
            }
            self.data[j * w] = d;
            let hi = (j + hbw).min(n - 1);
            for i in (j + 1)..=hi {
                // l_ij = (a_ij - sum_k l_ik d_k l_jk) / d_j
                let mut s = self.data[j * w + (i - j)];
                let lo_i = i.saturating_sub(hbw).max(lo);
                for k in lo_i..j {
                    let l_ik = self.data[k * w + (i - k)];
                    let l_jk = self.data[k * w + (j - k)];
                    let d_k = self.data[k * w];
                    s -= l_ik * l_jk * d_k;
                }
                self.data[j * w + (i - j)] = s / d;
            }
        }
        Ok(LdlFactor {
            n,
            half_bw: hbw,
            data: self.data,
        })
    }
}

/// LDLᵀ factors of a [`SymBanded`] matrix: L in the strict lower band, D on
/// the diagonal slots.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    half_bw: usize,
    data: Vec<f64>,
}

impl LdlFactor {
    /// Solves A·x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let w = self.half_bw + 1;
        // forward: L y = b
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                let hi = (j + self.half_bw).min(self.n - 1);
                for i in (j + 1)..=hi {
                    b[i] -= self.data[j * w + (i - j)] * bj;
                }
            }
        }
        // diagonal: D z = y
        for j in 0..self.n {
            b[j] /= self.data[j * w];
        }
        // backward: Lᵀ x = z
        for j in (0..self.n).rev() {
            let hi = (j + self.half_bw).min(self.n - 1);
            let mut s = b[j];
            for i in (j + 1)..=hi {
                s -= self.data[j * w + (i - j)] * b[i];
            }
            b[j] = s;
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
