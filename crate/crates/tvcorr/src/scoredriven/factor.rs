//! Score-driven filter for the factor correlation matrix.
//!
//! The factor panel `F` (already standardized marginally) is modeled with a
//! time-varying correlation matrix `C_{F,t}` driven through its dense
//! log-domain coordinates. Each step also emits the whitened factor vector
//! `U_t = C_{F,t}^{-1/2} F_t`, which downstream models treat as an
//! orthogonalized factor with conditional identity covariance. Among the
//! rotations that whiten `F`, the symmetric inverse square root is the one
//! that keeps each `U_j` maximally aligned with its own `F_j`.

use nalgebra::{DMatrix, DVector};

use super::cell::{evaluate_cell, state_gradient, CellEngine, CellKind, CorrCell};
use super::ChannelDynamics;
use crate::convt::{self, ConvolutionT};
use crate::error::{Error, Result};
use crate::indexmaps::vecl_len;

/// Dynamic correlation model for the factor panel: dense log-domain
/// coordinates with one recursion channel per factor pair, and a tail
/// partition for the factor innovations.
#[derive(Debug, Clone)]
pub struct FactorCorrModel {
    dynamics: ChannelDynamics,
    tails: ConvolutionT,
    engine: CellEngine,
}

impl FactorCorrModel {
    /// Validates channel count against the factor dimension implied by the
    /// tail partition: `r` factors need `r(r−1)/2` channels.
    pub fn new(dynamics: ChannelDynamics, tails: ConvolutionT) -> Result<Self> {
        let d = vecl_len(tails.n());
        if dynamics.dim() != d {
            return Err(Error::DimensionMismatch {
                what: "factor correlation state channels",
                expected: d,
                got: dynamics.dim(),
            });
        }
        let engine = CellEngine::new(CorrCell {
            first: 0,
            kind: CellKind::Dense { n: tails.n() },
        });
        Ok(Self {
            dynamics,
            tails,
            engine,
        })
    }

    /// Number of factors.
    pub fn r(&self) -> usize {
        self.tails.n()
    }

    /// Recursion coefficients.
    pub fn dynamics(&self) -> &ChannelDynamics {
        &self.dynamics
    }

    /// Tail partition of the factor innovations.
    pub fn tails(&self) -> &ConvolutionT {
        &self.tails
    }

    /// Correlation matrix at a log-domain state.
    pub fn corr(&self, gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.engine.reconstruct(gamma.as_view())?.spectrum.corr())
    }

    /// Symmetric square root of the correlation matrix at a state.
    pub fn corr_sqrt(&self, gamma: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.engine.reconstruct(gamma.as_view())?.sqrt.clone())
    }
}

/// One-observation score of the factor-correlation model.
#[derive(Debug, Clone)]
pub struct FactorStepScore {
    /// Log-density of the factor vector.
    pub loglik: f64,
    /// Whitened factor vector `U_t = C^{-1/2} F_t`.
    pub u: DVector<f64>,
    /// Information-rescaled score driving the recursion.
    pub eps: DVector<f64>,
}

/// Scores one factor observation at state `gamma`.
pub fn factor_score(
    model: &FactorCorrModel,
    gamma: &DVector<f64>,
    f_t: nalgebra::DVectorView<'_, f64>,
) -> Result<FactorStepScore> {
    if f_t.len() != model.r() {
        return Err(Error::DimensionMismatch {
            what: "factor observation",
            expected: model.r(),
            got: f_t.len(),
        });
    }
    let cell = model.engine.reconstruct(gamma.as_view())?;
    let eval = evaluate_cell(&cell, &model.tails, f_t);
    if !eval.loglik.is_finite() {
        return Err(Error::domain("non-finite log-likelihood contribution"));
    }
    let d = gamma.len();
    let eps = if d > 0 {
        let grad = state_gradient(&cell, &eval.p_mat);
        let info = convt::score_metric_gram(&cell.h_state(), &model.tails);
        let chol = info.cholesky().ok_or_else(|| Error::IllConditioned {
            what: "factor state information",
            detail: "fourth-moment metric is not positive definite".to_string(),
        })?;
        let eps = chol.solve(&grad);
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite scaled score"));
        }
        eps
    } else {
        DVector::zeros(0)
    };
    Ok(FactorStepScore {
        loglik: eval.loglik,
        u: eval.v,
        eps,
    })
}

/// Output of [`filter_factor_corr`].
#[derive(Debug, Clone)]
pub struct FactorCorrOutput {
    /// Total log-likelihood `ℓ(F) = Σ_t ℓ_t`.
    pub loglik: f64,
    /// Per-observation log-likelihood contributions.
    pub stepwise: DVector<f64>,
    /// Whitened factor panel `U_t = C_{F,t}^{-1/2} F_t`, row per period.
    pub u: DMatrix<f64>,
    /// Filtered log-domain coordinate path, row per period (the state used
    /// at that period, i.e. predicted from the past).
    pub gamma_path: DMatrix<f64>,
    /// Per-period correlation matrices, if requested.
    pub corr_path: Option<Vec<DMatrix<f64>>>,
}

/// Runs the factor-correlation filter over the panel `f` (rows are
/// periods). The state recursion is driven by the information-rescaled
/// score of each observation.
pub fn filter_factor_corr(
    model: &FactorCorrModel,
    f: &DMatrix<f64>,
    record_corr: bool,
) -> Result<FactorCorrOutput> {
    let r = model.r();
    let d = vecl_len(r);
    if f.ncols() != r {
        return Err(Error::DimensionMismatch {
            what: "factor panel columns",
            expected: r,
            got: f.ncols(),
        });
    }
    let t_len = f.nrows();

    let mut state = model.dynamics.init();
    let mut stepwise = DVector::zeros(t_len);
    let mut u = DMatrix::zeros(t_len, r);
    let mut gamma_path = DMatrix::zeros(t_len, d);
    let mut corr_path = record_corr.then(|| Vec::with_capacity(t_len));

    for t in 0..t_len {
        gamma_path.row_mut(t).copy_from(&state.transpose());
        let x = f.row(t).transpose();
        let step = factor_score(model, &state, x.as_view()).map_err(|e| diverged(t, &e))?;
        stepwise[t] = step.loglik;
        u.row_mut(t).copy_from(&step.u.transpose());
        if let Some(path) = corr_path.as_mut() {
            path.push(model.corr(&state).map_err(|e| diverged(t, &e))?);
        }

        if d > 0 {
            model.dynamics.step(&mut state, &step.eps);
        }
    }

    Ok(FactorCorrOutput {
        loglik: stepwise.sum(),
        stepwise,
        u,
        gamma_path,
        corr_path,
    })
}

pub(crate) fn diverged(step: usize, source: &Error) -> Error {
    Error::FilterDiverged {
        step,
        detail: source.to_string(),
    }
}
