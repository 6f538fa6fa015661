//! Score-driven recursions for time-varying loadings and correlations.
//!
//! Every dynamic quantity in this crate — factor-correlation coordinates,
//! factor loadings, idiosyncratic correlation coordinates — follows the same
//! mean-reverting recursion in an unconstrained parameter space:
//!
//! ```text
//! ζ_{t+1} = μ + β ∘ (ζ_t − μ) + α ∘ ε_t,        ζ_1 = μ,
//! ```
//!
//! where `ε_t` is a scaled score of the time-`t` observation density and
//! `∘` is the elementwise product. Because `ζ` lives in an unconstrained
//! space (matrix-logarithm coordinates for correlations, hyperbolic
//! coordinates for loading rows), the recursion can never leave the
//! admissible region; the maps back to correlation matrices and loading
//! vectors are handled by [`crate::matcorr`], [`crate::blockcorr`] and
//! [`crate::loadings`].
//!
//! The filters in this module share a few conventions:
//!
//! * **Predictive timing.** The state used to evaluate the likelihood of
//!   observation `t` is a function of observations `1..t−1` only. The score
//!   of observation `t` then updates the state for `t+1`.
//! * **Stepwise log-likelihoods.** Each filter returns the per-observation
//!   log-likelihood vector alongside the total, so callers can form
//!   split-sample sums without re-running the filter.
//! * **Hard failure on divergence.** If a state produces a non-finite
//!   likelihood or score, the filter stops with
//!   [`Error::FilterDiverged`](crate::Error::FilterDiverged) naming the
//!   step; estimation treats such draws as rejected candidates.

mod cell;
mod decoupled;
mod factor;
mod joint;

pub use cell::{cells_for, CellKind, CorrCell};
pub use decoupled::{
    equicorr_ht_score, equicorr_mt_score, filter_equicorr_ht, filter_equicorr_mt,
    filter_loading_decoupled, filter_residual_corr, filter_sector_block, loading_score,
    residual_corr_score, EquiScore, EquicorrOutput, LoadingModel, LoadingOutput,
    LoadingStepScore, ResidualCorrModel, ResidualCorrOutput, ResidualStepScore,
};
pub use factor::{factor_score, filter_factor_corr, FactorCorrModel, FactorCorrOutput, FactorStepScore};
pub use joint::{filter_core_joint, joint_score, CoreModel, CoreOutput, CoreStepScore};

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Coefficients of the mean-reverting score recursion for one block of
/// state channels: `ζ_{t+1} = mean + beta ∘ (ζ_t − mean) + alpha ∘ ε_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDynamics {
    mean: DVector<f64>,
    beta: DVector<f64>,
    alpha: DVector<f64>,
}

impl ChannelDynamics {
    /// Validates and wraps recursion coefficients. Requires equal lengths,
    /// finite entries, `|beta| < 1` (mean reversion) and `alpha ≥ 0`.
    pub fn new(mean: DVector<f64>, beta: DVector<f64>, alpha: DVector<f64>) -> Result<Self> {
        let d = mean.len();
        if beta.len() != d {
            return Err(Error::DimensionMismatch {
                what: "dynamics persistence vector",
                expected: d,
                got: beta.len(),
            });
        }
        if alpha.len() != d {
            return Err(Error::DimensionMismatch {
                what: "dynamics step-size vector",
                expected: d,
                got: alpha.len(),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("dynamics mean must be finite"));
        }
        for &b in beta.iter() {
            if !b.is_finite() || b.abs() >= 1.0 {
                return Err(Error::domain(format!(
                    "persistence must satisfy |beta| < 1, got {b}"
                )));
            }
        }
        for &a in alpha.iter() {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::domain(format!(
                    "step size must satisfy alpha >= 0, got {a}"
                )));
            }
        }
        Ok(Self { mean, beta, alpha })
    }

    /// Constant dynamics pinned at `mean` (`beta = alpha = 0`), useful for
    /// static sub-models and tests.
    pub fn constant(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self {
            mean,
            beta: DVector::zeros(d),
            alpha: DVector::zeros(d),
        }
    }

    /// Uniform scalar coefficients broadcast over `mean`'s channels.
    pub fn uniform(mean: DVector<f64>, beta: f64, alpha: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(
            mean,
            DVector::from_element(d, beta),
            DVector::from_element(d, alpha),
        )
    }

    /// Number of state channels.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unconditional mean `μ` of the recursion.
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Persistence coefficients `β`.
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Score step sizes `α`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Initial state: the unconditional mean.
    pub fn init(&self) -> DVector<f64> {
        self.mean.clone()
    }

    /// Advances `state` in place using the scaled score `eps`.
    pub fn step(&self, state: &mut DVector<f64>, eps: &DVector<f64>) {
        for j in 0..state.len() {
            state[j] =
                self.mean[j] + self.beta[j] * (state[j] - self.mean[j]) + self.alpha[j] * eps[j];
        }
    }
}

/// How the raw score of a loading row is turned into the recursion
/// innovation `ε`.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaling {
    /// `ε = ∇`: the raw score in the unconstrained parametrization.
    Identity,
    /// `ε = M⁺ I⁻¹ ∇`: information-rescaled score pulled back through the
    /// Moore–Penrose pseudoinverse of the loading sensitivity.
    MoorePenrose,
    /// Like [`Scaling::MoorePenrose`] but with Tikhonov-regularized
    /// pullback `M'(MM' + λI)⁻¹`; one `λ ≥ 0` per asset.
    Tikhonov {
        /// Per-asset ridge parameters.
        lambda: Vec<f64>,
    },
}

impl Scaling {
    /// Validates the ridge parameters and the asset count.
    pub fn validate(&self, n_assets: usize) -> Result<()> {
        if let Scaling::Tikhonov { lambda } = self {
            if lambda.len() != n_assets {
                return Err(Error::DimensionMismatch {
                    what: "Tikhonov ridge vector",
                    expected: n_assets,
                    got: lambda.len(),
                });
            }
            for &l in lambda {
                if !l.is_finite() || l < 0.0 {
                    return Err(Error::domain(format!(
                        "ridge parameter must be finite and >= 0, got {l}"
                    )));
                }
            }
        }
        Ok(())
    }
}
