//! Matrix-logarithm parametrization of correlation matrices.
//!
//! A correlation matrix `C` is encoded by `γ = vecl(log C)`: the strict
//! lower triangle of its matrix logarithm. The map is a bijection between
//! the open set of valid `n × n` correlation matrices and `ℝ^{n(n−1)/2}`,
//! so score-driven recursions can move `γ` freely without leaving the
//! correlation manifold. The inverse direction recovers the log-domain
//! diagonal by a fast fixed-point iteration on the constraint
//! `diag(exp G) = ι`.
//!
//! The module also provides the Fréchet-derivative machinery used for
//! analytic scores: the derivative of `vec C` with respect to `γ`
//! (divided-difference form with the unit-diagonal correction) and the
//! derivative of the symmetric square root `C^{1/2}` (a Sylvester solve in
//! the shared eigenbasis).

use nalgebra::{DMatrix, DVector};

use crate::indexmaps::{sym_from_vecl, vecl, vecl_len, vecl_pairs};
use crate::{Error, Result};

/// Eigenvalues below this are treated as a positive-definiteness failure.
const MIN_EIGENVALUE: f64 = 1e-12;
/// Tolerance on the unit-diagonal residual of the reconstruction fixed point.
const FIXED_POINT_TOL: f64 = 1e-12;
/// Iteration cap for the reconstruction fixed point.
const FIXED_POINT_MAX_ITERS: usize = 500;
/// Below this eigenvalue gap the divided difference switches to its limit.
const DIVIDED_DIFF_GAP: f64 = 1e-10;

/// A validated correlation matrix.
///
/// Construction checks symmetry and unit diagonal to `1e-12` and positive
/// definiteness (smallest eigenvalue above `1e-12`). Inputs that fail are
/// rejected, never repaired.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    values: DMatrix<f64>,
}

impl CorrMatrix {
    /// Validates `values` as a correlation matrix.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::DimensionMismatch {
                what: "correlation matrix columns",
                expected: n,
                got: values.ncols(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("correlation matrix has non-finite entries"));
        }
        for i in 0..n {
            if (values[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::domain(format!(
                    "diagonal entry ({i},{i}) = {} is not 1",
                    values[(i, i)]
                )));
            }
            for j in 0..i {
                if (values[(i, j)] - values[(j, i)]).abs() > 1e-12 {
                    return Err(Error::domain(format!(
                        "asymmetry at ({i},{j}): {} vs {}",
                        values[(i, j)],
                        values[(j, i)]
                    )));
                }
            }
        }
        let min_eig = sym_eigen(&values).1.min();
        if min_eig <= MIN_EIGENVALUE {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(CorrMatrix { values })
    }

    /// Wraps a matrix known-valid by construction (e.g. the exponential of a
    /// symmetric matrix with the diagonal constraint already enforced).
    pub(crate) fn from_valid(values: DMatrix<f64>) -> Self {
        CorrMatrix { values }
    }

    /// Matrix dimension.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// The underlying matrix.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Consumes the wrapper, returning the matrix.
    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// The log-domain parameter vector `γ = vecl(log C)` together with its
/// dimension tag.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaVec {
    /// Dimension of the correlation matrix the vector refers to.
    pub n: usize,
    /// The `n(n−1)/2` strict-lower-triangle values, column-major.
    pub values: DVector<f64>,
}

impl GammaVec {
    /// Validates length against `n` and finiteness.
    pub fn new(n: usize, values: DVector<f64>) -> Result<Self> {
        if values.len() != vecl_len(n) {
            return Err(Error::DimensionMismatch {
                what: "gamma vector length",
                expected: vecl_len(n),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("gamma vector has non-finite entries"));
        }
        Ok(GammaVec { n, values })
    }
}

/// Symmetric eigendecomposition: returns `(Q, eigenvalues)` with
/// `M = Q diag(λ) Q'`.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    (eig.eigenvectors, eig.eigenvalues)
}

/// Shared eigendecomposition of a correlation matrix and its logarithm.
///
/// `C` and `G = log C` have the same eigenvectors, and the eigenvalues of
/// `C` are the exponentials of those of `G`, so one symmetric
/// eigendecomposition serves every matrix function the filters need (log,
/// exp, square root, inverse square root, determinant) as well as the
/// Fréchet-derivative applications.
#[derive(Debug, Clone)]
pub struct CorrSpectrum {
    /// Orthonormal eigenvectors, one per column.
    pub q: DMatrix<f64>,
    /// Eigenvalues of `log C` (logs of the eigenvalues of `C`).
    pub log_eigs: DVector<f64>,
}

impl CorrSpectrum {
    /// Decomposes a correlation matrix; fails if it is not positive
    /// definite.
    pub fn from_corr(c: &CorrMatrix) -> Result<Self> {
        let (q, eigs) = sym_eigen(c.values());
        let min_eig = eigs.min();
        if min_eig <= MIN_EIGENVALUE {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min_eig,
            });
        }
        Ok(CorrSpectrum {
            q,
            log_eigs: eigs.map(f64::ln),
        })
    }

    /// Decomposes a log-domain (symmetric) matrix.
    pub fn from_log(g: &DMatrix<f64>) -> Self {
        let (q, eigs) = sym_eigen(g);
        CorrSpectrum { q, log_eigs: eigs }
    }

    /// Matrix dimension.
    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Applies the spectral function `f` to the eigenvalues of `log C`:
    /// `Q diag(f(λ)) Q'`.
    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.n();
        let mut scaled = self.q.clone();
        for j in 0..n {
            let fj = f(self.log_eigs[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        let mut out = &scaled * self.q.transpose();
        // Symmetrize away the last-bit asymmetry of the two matmuls.
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Reconstructs `C = exp(log C)`.
    pub fn corr(&self) -> DMatrix<f64> {
        self.spectral_map(f64::exp)
    }

    /// The log-domain matrix `G = log C`.
    pub fn log_matrix(&self) -> DMatrix<f64> {
        self.spectral_map(|x| x)
    }

    /// Symmetric square root `C^{1/2}`.
    pub fn sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(|x| (0.5 * x).exp())
    }

    /// Symmetric inverse square root `C^{-1/2}`.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        self.spectral_map(|x| (-0.5 * x).exp())
    }

    /// `log |C|`, the sum of the log-domain eigenvalues.
    pub fn log_det(&self) -> f64 {
        self.log_eigs.sum()
    }

    /// Fréchet derivative of the matrix exponential at `G = log C` applied
    /// to the symmetric matrix `s`: the divided-difference (Daleckii–Krein)
    /// form `Q ((Q'sQ) ∘ F) Q'` with
    /// `F_ij = (e^{λ_i} − e^{λ_j})/(λ_i − λ_j)` and the limit value at
    /// coincident eigenvalues.
    pub fn dexp_log(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut inner = self.q.transpose() * s * &self.q;
        for i in 0..n {
            for j in 0..n {
                inner[(i, j)] *= divided_diff_exp(self.log_eigs[i], self.log_eigs[j]);
            }
        }
        &self.q * inner * self.q.transpose()
    }

    /// Solves the Sylvester equation `C^{1/2} X + X C^{1/2} = s` for the
    /// symmetric `X`, i.e. applies the inverse Fréchet derivative of the
    /// squaring map at `C^{1/2}`.
    pub fn dsqrt_solve(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        let mut inner = self.q.transpose() * s * &self.q;
        for i in 0..n {
            let si = (0.5 * self.log_eigs[i]).exp();
            for j in 0..n {
                let sj = (0.5 * self.log_eigs[j]).exp();
                inner[(i, j)] /= si + sj;
            }
        }
        &self.q * inner * self.q.transpose()
    }
}

/// Divided difference of `exp` with the coincident-eigenvalue limit.
fn divided_diff_exp(a: f64, b: f64) -> f64 {
    if (a - b).abs() < DIVIDED_DIFF_GAP {
        (0.5 * (a + b)).exp()
    } else {
        (a.exp() - b.exp()) / (a - b)
    }
}

/// Matrix logarithm of a correlation matrix.
pub fn matrix_log(c: &CorrMatrix) -> Result<DMatrix<f64>> {
    Ok(CorrSpectrum::from_corr(c)?.log_matrix())
}

/// Matrix exponential of a symmetric matrix.
pub fn matrix_exp_sym(g: &DMatrix<f64>) -> DMatrix<f64> {
    CorrSpectrum::from_log(g).corr()
}

/// Symmetric positive-definite square root of a correlation matrix.
pub fn sym_sqrt(c: &CorrMatrix) -> Result<DMatrix<f64>> {
    Ok(CorrSpectrum::from_corr(c)?.sqrt())
}

/// Extracts `γ = vecl(log C)`.
pub fn gamma_of_corr(c: &CorrMatrix) -> Result<GammaVec> {
    let g = matrix_log(c)?;
    Ok(GammaVec {
        n: c.dim(),
        values: vecl(&g),
    })
}

/// Reconstructs the correlation matrix from `γ` by the unit-diagonal fixed
/// point, returning its spectrum (shared by all downstream matrix
/// functions).
///
/// The strict lower/upper triangles of `G = log C` are fixed by `γ`; the
/// diagonal `x` is the unique vector making `diag(exp G) = ι`, found by
/// iterating `x ← x − log diag(exp G(x))` from `x = 0` until the residual
/// `max_i |log [exp G]_ii|` drops below `1e-12` (at most 500 iterations).
pub fn spectrum_of_gamma(gamma: &GammaVec) -> Result<CorrSpectrum> {
    if gamma.values.len() != vecl_len(gamma.n) {
        return Err(Error::DimensionMismatch {
            what: "gamma vector length",
            expected: vecl_len(gamma.n),
            got: gamma.values.len(),
        });
    }
    if gamma.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("gamma vector has non-finite entries"));
    }
    let n = gamma.n;
    let mut g = sym_from_vecl(&gamma.values, n);
    let mut residual = f64::INFINITY;
    for _ in 0..FIXED_POINT_MAX_ITERS {
        let spectrum = CorrSpectrum::from_log(&g);
        let c = spectrum.corr();
        residual = 0.0;
        for i in 0..n {
            residual = residual.max(c[(i, i)].ln().abs());
        }
        if residual < FIXED_POINT_TOL {
            return Ok(spectrum);
        }
        for i in 0..n {
            g[(i, i)] -= c[(i, i)].ln();
        }
    }
    Err(Error::NoConvergence {
        what: "correlation reconstruction fixed point",
        iterations: FIXED_POINT_MAX_ITERS,
        residual,
    })
}

/// Reconstructs the correlation matrix from `γ = vecl(log C)`.
pub fn corr_of_gamma(gamma: &GammaVec) -> Result<CorrMatrix> {
    let spectrum = spectrum_of_gamma(gamma)?;
    let mut c = spectrum.corr();
    // The fixed point leaves the diagonal within 1e-12 of one; pin it.
    for i in 0..gamma.n {
        c[(i, i)] = 1.0;
    }
    Ok(CorrMatrix::from_valid(c))
}

/// Derivatives of the reconstructed correlation matrix along arbitrary
/// symmetric off-diagonal directions of its matrix logarithm.
///
/// For each basis matrix `S` (symmetric, zero diagonal) the returned matrix
/// is the Fréchet derivative of `exp` at `log C` applied to `S`, corrected
/// for the movement of the log-domain diagonal that keeps the diagonal of
/// the reconstruction pinned at one.
pub fn dcorr_directions(
    spectrum: &CorrSpectrum,
    bases: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = spectrum.n();

    // Diagonal responses: D_k = dexp(e_k e_k'), and the n × n system matrix
    // M[i][k] = (D_k)_ii that maps diagonal log-domain shifts to diagonal
    // movements of C.
    let mut diag_responses = Vec::with_capacity(n);
    let mut m_dd = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut basis = DMatrix::zeros(n, n);
        basis[(k, k)] = 1.0;
        let resp = spectrum.dexp_log(&basis);
        for i in 0..n {
            m_dd[(i, k)] = resp[(i, i)];
        }
        diag_responses.push(resp);
    }
    let m_dd_lu = m_dd.lu();

    let mut out = Vec::with_capacity(bases.len());
    for basis in bases {
        let mut resp = spectrum.dexp_log(basis);
        let diag_move = DVector::from_fn(n, |i, _| resp[(i, i)]);
        let correction = m_dd_lu.solve(&diag_move).ok_or(Error::IllConditioned {
            what: "unit-diagonal correction solve",
            detail: "diagonal response matrix is singular".to_string(),
        })?;
        for (k, resp_k) in diag_responses.iter().enumerate() {
            resp -= resp_k * correction[k];
        }
        out.push(resp);
    }
    Ok(out)
}

/// Derivative `∂ vec C / ∂ γ'` as an `n² × n(n−1)/2` matrix.
///
/// Column `p` is the direction from [`dcorr_directions`] for the symmetric
/// basis matrix of the `p`-th strict-lower position.
pub fn dvecc_dgamma(spectrum: &CorrSpectrum) -> Result<DMatrix<f64>> {
    let n = spectrum.n();
    let d = vecl_len(n);
    let pairs = vecl_pairs(n);
    let bases: Vec<DMatrix<f64>> = pairs
        .iter()
        .map(|&(r, c)| {
            let mut basis = DMatrix::zeros(n, n);
            basis[(r, c)] = 1.0;
            basis[(c, r)] = 1.0;
            basis
        })
        .collect();
    let directions = dcorr_directions(spectrum, &bases)?;
    let mut out = DMatrix::zeros(n * n, d);
    for (p, dir) in directions.iter().enumerate() {
        out.column_mut(p).copy_from_slice(dir.as_slice());
    }
    Ok(out)
}

/// Jacobian `∂ vecl(C) / ∂ γ'` of the reconstruction map, as a square
/// `n(n−1)/2` matrix.
pub fn gamma_jacobian(c: &CorrMatrix) -> Result<DMatrix<f64>> {
    let spectrum = CorrSpectrum::from_corr(c)?;
    let full = dvecc_dgamma(&spectrum)?;
    let n = c.dim();
    let d = vecl_len(n);
    let pairs = vecl_pairs(n);
    let mut out = DMatrix::zeros(d, d);
    for (row, &(r, cidx)) in pairs.iter().enumerate() {
        let vec_pos = r + n * cidx;
        for col in 0..d {
            out[(row, col)] = full[(vec_pos, col)];
        }
    }
    Ok(out)
}

/// Derivative `∂ vec C^{1/2} / ∂ γ'` as an `n² × n(n−1)/2` matrix: each
/// column of [`dvecc_dgamma`] pushed through the Sylvester solve
/// `C^{1/2} X + X C^{1/2} = dC`.
pub fn dsqrt_dgamma(spectrum: &CorrSpectrum) -> Result<DMatrix<f64>> {
    let n = spectrum.n();
    let dvec = dvecc_dgamma(spectrum)?;
    let d = dvec.ncols();
    let mut out = DMatrix::zeros(n * n, d);
    let mut col_mat = DMatrix::zeros(n, n);
    for p in 0..d {
        col_mat.copy_from_slice(dvec.column(p).as_slice());
        let solved = spectrum.dsqrt_solve(&col_mat);
        out.column_mut(p).copy_from_slice(solved.as_slice());
    }
    Ok(out)
}
