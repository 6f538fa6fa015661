//! Vectorization orders and the index maps that connect them.
//!
//! Everything half-vectorized in this crate uses `vecl`: the strict lower
//! triangle stacked **column-major**, so for an `n × n` matrix the order is
//! `(2,1), (3,1), …, (n,1), (3,2), …, (n, n−1)` (1-based). The full
//! vectorization `vec` is the usual column-major stack of all `n²` entries.
//!
//! Rather than materializing the classical selection/duplication matrices as
//! dense 0/1 arrays, [`IndexMaps`] stores them as index permutations and
//! gather lists, which is how the rest of the crate applies them.

use nalgebra::{DMatrix, DVector};

/// Length of `vecl` for an `n × n` matrix: `n(n−1)/2`.
pub fn vecl_len(n: usize) -> usize {
    n * (n - 1) / 2
}

/// The `(row, col)` pairs (0-based, `row > col`) in `vecl` order.
pub fn vecl_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(vecl_len(n));
    for col in 0..n {
        for row in (col + 1)..n {
            pairs.push((row, col));
        }
    }
    pairs
}

/// Extracts the strict lower triangle of `m` in `vecl` order.
pub fn vecl(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "vecl requires a square matrix");
    let mut out = DVector::zeros(vecl_len(n));
    let mut k = 0;
    for col in 0..n {
        for row in (col + 1)..n {
            out[k] = m[(row, col)];
            k += 1;
        }
    }
    out
}

/// Builds the symmetric matrix with zero diagonal whose strict lower
/// triangle is `v` (in `vecl` order).
pub fn sym_from_vecl(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), vecl_len(n), "vecl length does not match n");
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for col in 0..n {
        for row in (col + 1)..n {
            m[(row, col)] = v[k];
            m[(col, row)] = v[k];
            k += 1;
        }
    }
    m
}

/// Index maps between `vec`, `vecl`, and diagonal coordinates of an
/// `n × n` matrix.
///
/// The fields encode the classical commutation and selection matrices as
/// permutations / gather lists over `vec` positions (`vec` index of entry
/// `(i, j)` is `i + n·j`):
///
/// - applying the commutation matrix is `out[p] = v[transpose[p]]`;
/// - the lower/upper selectors gather `vecl` entries from `vec`;
/// - the diagonal selector gathers `(i, i)` entries.
#[derive(Debug, Clone)]
pub struct IndexMaps {
    /// Matrix dimension.
    pub n: usize,
    /// `transpose[i + n·j] = j + n·i`: commutation as a permutation of `vec`.
    pub transpose: Vec<usize>,
    /// `vec` position of each `vecl` entry `(row, col)`: `row + n·col`.
    pub lower: Vec<usize>,
    /// `vec` position of the mirrored entry `(col, row)`: `col + n·row`.
    pub upper: Vec<usize>,
    /// `vec` positions of the diagonal: `i + n·i`.
    pub diag: Vec<usize>,
}

impl IndexMaps {
    /// Builds the maps for dimension `n`.
    pub fn new(n: usize) -> Self {
        let mut transpose = vec![0usize; n * n];
        for j in 0..n {
            for i in 0..n {
                transpose[i + n * j] = j + n * i;
            }
        }
        let pairs = vecl_pairs(n);
        let lower = pairs.iter().map(|&(r, c)| r + n * c).collect();
        let upper = pairs.iter().map(|&(r, c)| c + n * r).collect();
        let diag = (0..n).map(|i| i + n * i).collect();
        IndexMaps {
            n,
            transpose,
            lower,
            upper,
            diag,
        }
    }

    /// Applies the commutation matrix: returns `w` with `w[p] = v[transpose[p]]`,
    /// i.e. `w = vec(M')` when `v = vec(M)`.
    pub fn commute(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n * self.n);
        DVector::from_iterator(v.len(), self.transpose.iter().map(|&p| v[p]))
    }

    /// Gathers the strict lower triangle from a `vec`: the selector matrix
    /// applied to `v`.
    pub fn select_lower(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n * self.n);
        DVector::from_iterator(self.lower.len(), self.lower.iter().map(|&p| v[p]))
    }

    /// Scatters `vecl` values into both triangles of a zero-diagonal
    /// symmetric `vec`: the adjoint of the symmetric selector pair, i.e.
    /// the map `vecl ↦ vec` with each value placed at `(row, col)` and
    /// `(col, row)`.
    pub fn scatter_symmetric(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.lower.len());
        let mut out = DVector::zeros(self.n * self.n);
        for (k, (&lo, &up)) in self.lower.iter().zip(&self.upper).enumerate() {
            out[lo] = v[k];
            out[up] = v[k];
        }
        out
    }

    /// Gathers the diagonal from a `vec`.
    pub fn select_diag(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.n * self.n);
        DVector::from_iterator(self.n, self.diag.iter().map(|&p| v[p]))
    }
}

/// The `(row, col)` pairs (0-based, `row ≥ col`) of the lower triangle
/// *including* the diagonal, column-major. This is the order used for
/// block-level parameter vectors, where diagonal cells carry their own
/// parameter.
pub fn vech_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
    for col in 0..n {
        for row in col..n {
            pairs.push((row, col));
        }
    }
    pairs
}
