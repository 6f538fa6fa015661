//! Unconstrained parametrization of factor loadings.
//!
//! An asset's loading vector `ρ` on `r` orthogonalized factors must satisfy
//! `ρ'ρ < 1` so that the idiosyncratic weight `ω = √(1 − ρ'ρ)` exists. The
//! radial artanh transform removes the constraint:
//!
//! `τ = (artanh ‖ρ‖ / ‖ρ‖) ρ`,  `ρ = (tanh ‖τ‖ / ‖τ‖) τ`,
//!
//! mapping the open unit ball bijectively onto all of `ℝ^r`. Score-driven
//! recursions can therefore update `τ` freely.
//!
//! The module also provides the Jacobian `J = ∂ρ/∂τ'`, the `2 × r`
//! sensitivity of the per-asset location/scale pair `(μ_i, ω_i) = (ρ'U, ω)`
//! with respect to `τ`, and its Moore–Penrose and Tikhonov-regularized
//! pseudo-inverses used to scale score innovations.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Below this norm the hyperbolic ratios switch to their series expansions.
const SERIES_THRESHOLD: f64 = 1e-6;
/// Idiosyncratic weights below this are rejected as numerically degenerate.
const OMEGA_FLOOR: f64 = 1e-8;
/// Relative cutoff below which the closed-form pseudo-inverse falls back to
/// a singular value decomposition.
const PINV_CUTOFF: f64 = 1e-12;

/// `tanh(t)/t`, series-expanded near zero.
fn tanh_ratio(t: f64) -> f64 {
    if t < SERIES_THRESHOLD {
        1.0 - t * t / 3.0
    } else {
        t.tanh() / t
    }
}

/// `artanh(s)/s`, series-expanded near zero.
fn atanh_ratio(s: f64) -> f64 {
    if s < SERIES_THRESHOLD {
        1.0 + s * s / 3.0
    } else {
        s.atanh() / s
    }
}

/// A loading vector in both coordinate systems, with its idiosyncratic
/// weight.
///
/// Invariants: `ρ'ρ < 1`, `ω = √(1 − ρ'ρ) ≥ 1e-8`, and `τ`/`ρ` related by
/// the radial artanh map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingState {
    tau: DVector<f64>,
    rho: DVector<f64>,
    omega: f64,
}

impl LoadingState {
    /// Builds the state from unconstrained coordinates. Fails only when the
    /// implied `ω` falls below the numerical floor (`‖τ‖` so large that
    /// `tanh ‖τ‖` rounds to one).
    pub fn from_tau(tau: DVector<f64>) -> Result<Self> {
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("loading vector has non-finite entries"));
        }
        let t = tau.norm();
        let rho = &tau * tanh_ratio(t);
        let rho_sq = rho.norm_squared();
        let omega_sq = 1.0 - rho_sq;
        if omega_sq < OMEGA_FLOOR * OMEGA_FLOOR {
            return Err(Error::Boundary(format!(
                "idiosyncratic weight below floor: 1 − ρ'ρ = {omega_sq:.3e} at ‖τ‖ = {t:.3}"
            )));
        }
        Ok(LoadingState {
            tau,
            rho,
            omega: omega_sq.sqrt(),
        })
    }

    /// Builds the state from constrained coordinates; requires `ρ'ρ < 1`
    /// with `ω` above the floor.
    pub fn from_rho(rho: DVector<f64>) -> Result<Self> {
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("loading vector has non-finite entries"));
        }
        let s = rho.norm();
        if s >= 1.0 {
            return Err(Error::domain(format!(
                "loading norm ‖ρ‖ = {s} must be below 1"
            )));
        }
        let omega_sq = 1.0 - s * s;
        if omega_sq < OMEGA_FLOOR * OMEGA_FLOOR {
            return Err(Error::Boundary(format!(
                "idiosyncratic weight below floor: 1 − ρ'ρ = {omega_sq:.3e}"
            )));
        }
        let tau = &rho * atanh_ratio(s);
        Ok(LoadingState {
            tau,
            rho,
            omega: omega_sq.sqrt(),
        })
    }

    /// Number of factors.
    pub fn r(&self) -> usize {
        self.tau.len()
    }

    /// Unconstrained coordinates.
    pub fn tau(&self) -> &DVector<f64> {
        &self.tau
    }

    /// Constrained loadings.
    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    /// Idiosyncratic weight `ω = √(1 − ρ'ρ)`.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Jacobian `J = ∂ρ/∂τ'`: writing `a = tanh‖τ‖/‖τ‖` and
    /// `P = ττ'/τ'τ`,
    ///
    /// `J = a (I − P) + (1 − ρ'ρ) P`,
    ///
    /// with `J = I` at `τ = 0`.
    pub fn tau_jacobian(&self) -> DMatrix<f64> {
        let r = self.r();
        let t_sq = self.tau.norm_squared();
        let t = t_sq.sqrt();
        let a = tanh_ratio(t);
        let radial = 1.0 - self.rho.norm_squared();
        // Coefficient of ττ': (radial − a)/t², with its τ → 0 limit −2/3.
        let coef = if t < SERIES_THRESHOLD {
            -2.0 / 3.0
        } else {
            (radial - a) / t_sq
        };
        let mut j = DMatrix::identity(r, r) * a;
        for i in 0..r {
            for k in 0..r {
                j[(i, k)] += coef * self.tau[i] * self.tau[k];
            }
        }
        j
    }

    /// Inverse Jacobian `J⁻¹ = (1/a)(I − P) + (1/(1 − ρ'ρ)) P`.
    pub fn tau_jacobian_inv(&self) -> DMatrix<f64> {
        let r = self.r();
        let t_sq = self.tau.norm_squared();
        let t = t_sq.sqrt();
        let a = tanh_ratio(t);
        let radial = 1.0 - self.rho.norm_squared();
        let coef = if t < SERIES_THRESHOLD {
            // (1/radial − 1/a)/t² → 2/3 as τ → 0.
            2.0 / 3.0
        } else {
            (1.0 / radial - 1.0 / a) / t_sq
        };
        let mut j = DMatrix::identity(r, r) / a;
        for i in 0..r {
            for k in 0..r {
                j[(i, k)] += coef * self.tau[i] * self.tau[k];
            }
        }
        j
    }

    /// Sensitivity `M = ∂(μ, ω)/∂τ'` of the conditional location
    /// `μ = ρ'u` and idiosyncratic weight `ω` with respect to `τ`, for the
    /// current factor vector `u`:
    ///
    /// `M = [u'J ; −(ρ'J)/ω]` (2 × r).
    pub fn sensitivity(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let j = self.tau_jacobian();
        let r = self.r();
        let mut m = DMatrix::zeros(2, r);
        let ut_j = j.transpose() * u;
        let rho_j = j.transpose() * &self.rho;
        for k in 0..r {
            m[(0, k)] = ut_j[k];
            m[(1, k)] = -rho_j[k] / self.omega;
        }
        m
    }

    /// Moore–Penrose pseudo-inverse of [`LoadingState::sensitivity`] in
    /// closed form (`r ≥ 2`):
    ///
    /// `M⁺ = J⁻¹ [ (ρ'ρ)u − (u'ρ)ρ , ω((u'ρ)u − (u'u)ρ) ] / den`,
    ///
    /// with `den = (u'u)(ρ'ρ) − (u'ρ)²`. When `u` and `ρ` are nearly
    /// parallel (`den` below `1e-12` relative to its factors) the closed
    /// form is abandoned for a singular-value pseudo-inverse with cutoff
    /// `1e-12`; the same route serves `r = 1`, where the two columns are
    /// always proportional.
    pub fn sensitivity_pinv(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let r = self.r();
        let uu = u.norm_squared();
        let rr = self.rho.norm_squared();
        let ur = u.dot(&self.rho);
        let den = uu * rr - ur * ur;
        if r < 2 || den <= PINV_CUTOFF * uu.max(1e-300) * rr.max(1e-300) || den <= 0.0 {
            return svd_pinv(&self.sensitivity(u));
        }
        let col1 = (u * rr - &self.rho * ur) / den;
        let col2 = (u * ur - &self.rho * uu) * (self.omega / den);
        let mut stacked = DMatrix::zeros(r, 2);
        stacked.column_mut(0).copy_from(&col1);
        stacked.column_mut(1).copy_from(&col2);
        self.tau_jacobian_inv() * stacked
    }

    /// Tikhonov-regularized pseudo-inverse `M'(MM' + λI₂)⁻¹` of the
    /// sensitivity. At `λ = 0` this coincides with the Moore–Penrose
    /// pseudo-inverse (by construction when `MM'` is invertible, by SVD
    /// fallback otherwise).
    pub fn sensitivity_tikhonov(&self, u: &DVector<f64>, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda >= 0.0) {
            return Err(Error::domain(format!(
                "regularization weight must be nonnegative, got {lambda}"
            )));
        }
        let m = self.sensitivity(u);
        let mmt = &m * m.transpose();
        let a = mmt[(0, 0)] + lambda;
        let b = mmt[(0, 1)];
        let d = mmt[(1, 1)] + lambda;
        let det = a * d - b * b;
        let scale = a.abs().max(d.abs()).max(1.0);
        if det <= PINV_CUTOFF * scale * scale {
            return Ok(svd_pinv(&m));
        }
        // M' (MM' + λI)⁻¹ with the 2×2 inverse written out.
        let inv = DMatrix::from_row_slice(2, 2, &[d / det, -b / det, -b / det, a / det]);
        Ok(m.transpose() * inv)
    }
}

/// Singular-value pseudo-inverse with relative cutoff `1e-12`.
fn svd_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = PINV_CUTOFF * max_sv.max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps)
        .expect("svd pseudo-inverse with computed u/v")
}
