//! Convolution-t distributions: affine transforms of independent
//! standardized multivariate-t blocks.
//!
//! A random vector `X = μ + Ξ V` where `V` stacks `G` independent groups,
//! group `g` being an `m_g`-dimensional spherical t with `ν_g > 2` degrees
//! of freedom scaled to unit covariance. The family nests, by choice of the
//! partition and tail indices:
//!
//! - **Gaussian** — one group, `ν = ∞` (encoded literally as `f64::INFINITY`);
//! - **multivariate t** — one group, finite `ν`;
//! - **cluster t** — several multi-coordinate groups;
//! - **heterogeneous t** — every coordinate its own group.
//!
//! Besides the log-density the module supplies the analytic score and
//! Fisher information with respect to `(μ, Ξ)`. The information of `vec Ξ`
//! has the closed form `(I ⊗ Ξ⁻ᵀ)(K + Υ)(I ⊗ Ξ⁻¹)` where `K` is the
//! commutation matrix and the sparse `Υ` depends only on the partition
//! through the fourth-moment ratios `φ_g = (ν_g + m_g)/(ν_g + m_g + 2)`
//! and `ψ_g = φ_g ν_g/(ν_g − 2)`; [`score_metric_gram`] contracts that
//! structure against derivative directions in `O(n²)` per pair without ever
//! forming the `n² × n²` object.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

const LN_PI: f64 = 1.144_729_885_849_400_2;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Partition of `n` coordinates into tail groups with degrees of freedom.
///
/// `ν_g = ∞` marks a Gaussian group; finite values must exceed 2 so the
/// unit-covariance scaling exists.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvolutionT {
    group_sizes: Vec<usize>,
    nu: Vec<f64>,
}

impl ConvolutionT {
    /// Builds and validates a partition.
    pub fn new(group_sizes: Vec<usize>, nu: Vec<f64>) -> Result<Self> {
        if group_sizes.is_empty() {
            return Err(Error::domain("tail partition has no groups"));
        }
        if group_sizes.iter().any(|&m| m == 0) {
            return Err(Error::domain("tail group sizes must be at least 1"));
        }
        if nu.len() != group_sizes.len() {
            return Err(Error::DimensionMismatch {
                what: "degrees-of-freedom vector",
                expected: group_sizes.len(),
                got: nu.len(),
            });
        }
        for &v in &nu {
            if v.is_nan() || (v.is_finite() && v <= 2.0) {
                return Err(Error::domain(format!(
                    "degrees of freedom must exceed 2 (or be infinite), got {v}"
                )));
            }
        }
        Ok(ConvolutionT { group_sizes, nu })
    }

    /// Single Gaussian group of dimension `n`.
    pub fn gaussian(n: usize) -> Self {
        ConvolutionT {
            group_sizes: vec![n],
            nu: vec![f64::INFINITY],
        }
    }

    /// Single t group of dimension `n`.
    pub fn multivariate_t(n: usize, nu: f64) -> Result<Self> {
        ConvolutionT::new(vec![n], vec![nu])
    }

    /// One group per coordinate.
    pub fn heterogeneous_t(nu: Vec<f64>) -> Result<Self> {
        let sizes = vec![1; nu.len()];
        ConvolutionT::new(sizes, nu)
    }

    /// Total dimension.
    pub fn n(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Number of groups.
    pub fn n_groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Group sizes.
    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    /// Degrees of freedom per group.
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    /// Group index of each coordinate.
    pub fn group_of_coord(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n());
        for (g, &m) in self.group_sizes.iter().enumerate() {
            out.extend(std::iter::repeat(g).take(m));
        }
        out
    }

    /// Coordinate ranges per group.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::with_capacity(self.n_groups());
        let mut start = 0;
        for &m in &self.group_sizes {
            out.push(start..start + m);
            start += m;
        }
        out
    }

    /// Number of finite degrees-of-freedom parameters (for model size
    /// accounting: 0 Gaussian, 1 multivariate t, `G` cluster t, `n`
    /// heterogeneous t).
    pub fn n_tail_params(&self) -> usize {
        self.nu.iter().filter(|v| v.is_finite()).count()
    }

    /// Fourth-moment ratio `φ_g = (ν_g + m_g)/(ν_g + m_g + 2)` (1 for
    /// Gaussian groups).
    pub fn phi(&self, g: usize) -> f64 {
        let nu = self.nu[g];
        if nu.is_finite() {
            let m = self.group_sizes[g] as f64;
            (nu + m) / (nu + m + 2.0)
        } else {
            1.0
        }
    }

    /// Weighted second-moment ratio `ψ_g = φ_g ν_g/(ν_g − 2)` (1 for
    /// Gaussian groups).
    pub fn psi(&self, g: usize) -> f64 {
        let nu = self.nu[g];
        if nu.is_finite() {
            self.phi(g) * nu / (nu - 2.0)
        } else {
            1.0
        }
    }
}

/// Log normalizing constant of one standardized t group:
/// `c = lnΓ((ν+m)/2) − lnΓ(ν/2) − (m/2) ln((ν−2)π)`; Gaussian limit
/// `−(m/2) ln 2π`.
pub fn log_norm_const(nu: f64, m: usize) -> f64 {
    let mf = m as f64;
    if nu.is_finite() {
        ln_gamma((nu + mf) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * mf * ((nu - 2.0).ln() + LN_PI)
    } else {
        -0.5 * mf * LN_2PI
    }
}

/// Log-density term of one group given its squared norm `‖V_g‖²`:
/// `c − ((ν+m)/2) ln(1 + ‖V‖²/(ν−2))`, Gaussian limit `c − ‖V‖²/2`.
pub fn group_log_density(nu: f64, m: usize, v_sq: f64) -> f64 {
    let c = log_norm_const(nu, m);
    if nu.is_finite() {
        c - 0.5 * (nu + m as f64) * (v_sq / (nu - 2.0)).ln_1p()
    } else {
        c - 0.5 * v_sq
    }
}

/// Score weight of a group: `W_g = (ν+m)/(ν−2+‖V_g‖²)`, 1 for Gaussian.
pub fn tail_weight(nu: f64, m: usize, v_sq: f64) -> f64 {
    if nu.is_finite() {
        (nu + m as f64) / (nu - 2.0 + v_sq)
    } else {
        1.0
    }
}

/// Location-information scale of a group:
/// `s_g = (ν+m)ν / ((ν+m+2)(ν−2))`, 1 for Gaussian.
pub fn location_info_scale(nu: f64, m: usize) -> f64 {
    if nu.is_finite() {
        let mf = m as f64;
        (nu + mf) * nu / ((nu + mf + 2.0) * (nu - 2.0))
    } else {
        1.0
    }
}

/// Information of a scalar scale parameter at unit scale for a univariate
/// standardized-t margin: `2ν/(ν+3)`, 2 in the Gaussian limit. This is the
/// one-dimensional case of the fourth-moment metric.
pub fn scalar_scale_info(nu: f64) -> f64 {
    if nu.is_finite() {
        2.0 * nu / (nu + 3.0)
    } else {
        2.0
    }
}

/// Log-density of `X = μ + Ξ V` at `x` for an invertible `Ξ`.
pub fn loglik(
    x: &DVector<f64>,
    mu: &DVector<f64>,
    xi: &DMatrix<f64>,
    ct: &ConvolutionT,
) -> Result<f64> {
    let n = ct.n();
    check_dims(x, mu, xi, n)?;
    let lu = xi.clone().lu();
    let det = lu.determinant();
    if det.abs() < 1e-300 || !det.is_finite() {
        return Err(Error::IllConditioned {
            what: "transform matrix",
            detail: format!("determinant {det:.3e}"),
        });
    }
    let v = lu
        .solve(&(x - mu))
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "solve failed".to_string(),
        })?;
    let mut ell = -det.abs().ln();
    for (g, range) in ct.group_ranges().into_iter().enumerate() {
        let v_sq: f64 = range.map(|i| v[i] * v[i]).sum();
        ell += group_log_density(ct.nu[g], ct.group_sizes[g], v_sq);
    }
    Ok(ell)
}

/// Analytic score of the log-density with respect to `μ` and `Ξ`.
///
/// Returns `(∇_μ, ∇_Ξ)` with the latter as an `n × n` matrix (the gradient
/// with respect to `vec Ξ` reshaped): writing `V = Ξ⁻¹(x − μ)` and the
/// per-coordinate weights `w_i = W_{g(i)}`,
///
/// `∇_μ = Ξ⁻ᵀ (w ∘ V)`, `∇_Ξ = Ξ⁻ᵀ ((w ∘ V) V' − I)`.
pub fn score_mu_xi(
    x: &DVector<f64>,
    mu: &DVector<f64>,
    xi: &DMatrix<f64>,
    ct: &ConvolutionT,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = ct.n();
    check_dims(x, mu, xi, n)?;
    let lu = xi.clone().lu();
    let v = lu
        .solve(&(x - mu))
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "solve failed".to_string(),
        })?;
    let mut wv = v.clone();
    for (g, range) in ct.group_ranges().into_iter().enumerate() {
        let v_sq: f64 = range.clone().map(|i| v[i] * v[i]).sum();
        let w = tail_weight(ct.nu[g], ct.group_sizes[g], v_sq);
        for i in range {
            wv[i] *= w;
        }
    }
    let xi_t_lu = xi.transpose().lu();
    let grad_mu = xi_t_lu
        .solve(&wv)
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "transpose solve failed".to_string(),
        })?;
    // Ξ⁻ᵀ((w∘V)V' − I) column by column.
    let mut inner = &wv * v.transpose();
    for i in 0..n {
        inner[(i, i)] -= 1.0;
    }
    let grad_xi = xi_t_lu
        .solve(&inner)
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "transpose solve failed".to_string(),
        })?;
    Ok((grad_mu, grad_xi))
}

/// Fisher information of `μ`: `I_μ = Ξ⁻ᵀ diag(s_{g(i)}) Ξ⁻¹`.
pub fn information_mu(xi: &DMatrix<f64>, ct: &ConvolutionT) -> Result<DMatrix<f64>> {
    let n = ct.n();
    let inv = xi
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "inversion failed".to_string(),
        })?;
    let groups = ct.group_of_coord();
    let mut weighted = inv.clone();
    for i in 0..n {
        let s = location_info_scale(ct.nu[groups[i]], ct.group_sizes[groups[i]]);
        for j in 0..n {
            weighted[(i, j)] *= s;
        }
    }
    Ok(inv.transpose() * weighted)
}

/// The sparse fourth-moment structure `K + Υ` as a dense `n² × n²` matrix
/// (`vec` position of `(i, j)` is `i + n·j`). Intended for tests and small
/// dimensions; filters use [`score_metric_gram`] instead.
pub fn k_plus_upsilon_dense(ct: &ConvolutionT) -> DMatrix<f64> {
    let n = ct.n();
    let groups = ct.group_of_coord();
    let mut out = DMatrix::zeros(n * n, n * n);
    let pos = |i: usize, j: usize| i + n * j;
    // Commutation part: ((i,j),(j,i)) = 1.
    for i in 0..n {
        for j in 0..n {
            out[(pos(i, j), pos(j, i))] += 1.0;
        }
    }
    // Υ part.
    for i in 0..n {
        for j in 0..n {
            if i == j {
                let phi = ct.phi(groups[i]);
                out[(pos(i, i), pos(i, i))] += 3.0 * phi - 2.0;
                for k in 0..n {
                    if k != i && groups[k] == groups[i] {
                        out[(pos(i, i), pos(k, k))] += phi - 1.0;
                    }
                }
            } else if groups[i] == groups[j] {
                let phi = ct.phi(groups[i]);
                out[(pos(i, j), pos(i, j))] += phi;
                out[(pos(i, j), pos(j, i))] += phi - 1.0;
            } else {
                out[(pos(i, j), pos(i, j))] += ct.psi(groups[i]);
            }
        }
    }
    out
}

/// Fisher information of `vec Ξ` as a dense `n² × n²` matrix:
/// `(I ⊗ Ξ⁻ᵀ)(K + Υ)(I ⊗ Ξ⁻¹)`. Tests and small dimensions only.
pub fn information_xi_dense(xi: &DMatrix<f64>, ct: &ConvolutionT) -> Result<DMatrix<f64>> {
    let n = ct.n();
    let inv = xi
        .clone()
        .try_inverse()
        .ok_or(Error::IllConditioned {
            what: "transform matrix",
            detail: "inversion failed".to_string(),
        })?;
    let core = k_plus_upsilon_dense(ct);
    // (I ⊗ A) M: multiply each n-row block of M by A on the left; we apply
    // it as block-diagonal congruence.
    let mut left = DMatrix::zeros(n * n, n * n);
    for b in 0..n {
        let mut block = left.view_mut((b * n, b * n), (n, n));
        block.copy_from(&inv.transpose());
    }
    let mut right = DMatrix::zeros(n * n, n * n);
    for b in 0..n {
        let mut block = right.view_mut((b * n, b * n), (n, n));
        block.copy_from(&inv);
    }
    Ok(&left * core * &right)
}

/// Contracts the fourth-moment structure against derivative directions:
/// given `H_a = Ξ⁻¹ ∂Ξ/∂θ_a` as matrices, returns the Gram matrix with
/// entries `vec(H_a)' (K + Υ) vec(H_b)` — the information of `θ` when the
/// location is unaffected — without forming `K + Υ`.
///
/// `groups` assigns coordinates to tail groups (it must match `ct`).
pub fn score_metric_gram(hs: &[DMatrix<f64>], ct: &ConvolutionT) -> DMatrix<f64> {
    let n = ct.n();
    let groups = ct.group_of_coord();
    let p = hs.len();
    let n_groups = ct.n_groups();
    let phis: Vec<f64> = (0..n_groups).map(|g| ct.phi(g)).collect();
    let psis: Vec<f64> = (0..n_groups).map(|g| ct.psi(g)).collect();

    // Per-direction group diagonal sums.
    let mut diag_sums = vec![vec![0.0; n_groups]; p];
    for (a, h) in hs.iter().enumerate() {
        for i in 0..n {
            diag_sums[a][groups[i]] += h[(i, i)];
        }
    }

    let mut out = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let (ha, hb) = (&hs[a], &hs[b]);
            // Commutation part tr(H_a H_b) plus the Υ contractions.
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let haij = ha[(i, j)];
                    acc += haij * hb[(j, i)]; // tr(H_a H_b)
                    if i == j {
                        acc += (2.0 * phis[groups[i]] - 1.0) * haij * hb[(i, i)];
                    } else if groups[i] == groups[j] {
                        let phi = phis[groups[i]];
                        acc += phi * haij * hb[(i, j)] + (phi - 1.0) * haij * hb[(j, i)];
                    } else {
                        acc += psis[groups[i]] * haij * hb[(i, j)];
                    }
                }
            }
            for g in 0..n_groups {
                acc += (phis[g] - 1.0) * diag_sums[a][g] * diag_sums[b][g];
            }
            out[(a, b)] = acc;
            out[(b, a)] = acc;
        }
    }
    out
}

/// Draws one unit-scale vector `V` (independent standardized t groups).
pub fn sample_v<R: Rng + ?Sized>(ct: &ConvolutionT, rng: &mut R) -> DVector<f64> {
    let mut v = DVector::zeros(ct.n());
    for (g, range) in ct.group_ranges().into_iter().enumerate() {
        let nu = ct.nu[g];
        let scale = if nu.is_finite() {
            let chi_sq = Gamma::new(nu / 2.0, 2.0)
                .expect("valid gamma shape")
                .sample(rng);
            ((nu - 2.0) / chi_sq).sqrt()
        } else {
            1.0
        };
        for i in range {
            let z: f64 = StandardNormal.sample(rng);
            v[i] = z * scale;
        }
    }
    v
}

/// Draws `X = μ + Ξ V`.
pub fn sample<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    xi: &DMatrix<f64>,
    ct: &ConvolutionT,
    rng: &mut R,
) -> DVector<f64> {
    mu + xi * sample_v(ct, rng)
}

fn check_dims(x: &DVector<f64>, mu: &DVector<f64>, xi: &DMatrix<f64>, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            what: "observation length",
            expected: n,
            got: x.len(),
        });
    }
    if mu.len() != n {
        return Err(Error::DimensionMismatch {
            what: "location length",
            expected: n,
            got: mu.len(),
        });
    }
    if xi.nrows() != n || xi.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "transform matrix rows",
            expected: n,
            got: xi.nrows(),
        });
    }
    Ok(())
}
