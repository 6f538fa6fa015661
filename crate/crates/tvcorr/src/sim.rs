//! Generative simulation of the factor-correlation model.
//!
//! Simulation mirrors the filters step for step: at each period the current
//! state implies a correlation structure, an innovation is drawn from the
//! convolution-t law, the observation is assembled, and the state is advanced
//! with the *same* scaled score the filter would compute from that
//! observation. A filter run on simulated data at the true parameters
//! therefore reproduces the simulated state paths exactly (up to the
//! first-period initialization, which both sides pin at the recursion mean).
//!
//! Layers:
//!
//! - [`simulate_factor`]: factor panel `F` with score-driven correlation,
//!   emitting the whitened panel `U` consumed downstream;
//! - [`simulate_core`]: asset panel `Z` given `U`, with dynamic loadings and
//!   block idiosyncratic correlation;
//! - [`crate::egarch::returns_from_innovations`] turns either standardized
//!   panel into raw return series with AR(1)-EGARCH marginals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::convt;
use crate::error::Result;
use crate::loadings::LoadingState;
use crate::scoredriven::{
    factor_score, joint_score, loading_score, residual_corr_score, CoreModel, FactorCorrModel,
    LoadingModel, ResidualCorrModel,
};

/// Simulated factor panel and its generating states.
#[derive(Debug, Clone)]
pub struct FactorSim {
    /// Factor observations, row per period.
    pub f: DMatrix<f64>,
    /// Whitened factors `U_t = C_t^{-1/2} F_t` — by construction the raw
    /// convolution-t draws.
    pub u: DMatrix<f64>,
    /// Log-domain correlation state used at each period.
    pub gamma_path: DMatrix<f64>,
}

/// Draws `t_len` periods from the factor-correlation model.
pub fn simulate_factor<R: Rng + ?Sized>(
    model: &FactorCorrModel,
    t_len: usize,
    rng: &mut R,
) -> Result<FactorSim> {
    let r = model.r();
    let d = model.dynamics().dim();
    let mut state = model.dynamics().init();
    let mut f = DMatrix::zeros(t_len, r);
    let mut u = DMatrix::zeros(t_len, r);
    let mut gamma_path = DMatrix::zeros(t_len, d);

    for t in 0..t_len {
        gamma_path.row_mut(t).copy_from(&state.transpose());
        let v = convt::sample_v(model.tails(), rng);
        let f_t = model.corr_sqrt(&state)? * &v;
        f.row_mut(t).copy_from(&f_t.transpose());
        u.row_mut(t).copy_from(&v.transpose());
        if d > 0 {
            let step = factor_score(model, &state, f_t.as_view())?;
            model.dynamics().step(&mut state, &step.eps);
        }
    }
    Ok(FactorSim { f, u, gamma_path })
}

/// Simulated asset panel and its generating states.
#[derive(Debug, Clone)]
pub struct CoreSim {
    /// Asset observations on the standardized scale, row per period.
    pub z: DMatrix<f64>,
    /// Idiosyncratic draws `e_t` (unit scale, correlated within blocks).
    pub residuals: DMatrix<f64>,
    /// Loading state path, row per period, assets concatenated.
    pub tau_path: DMatrix<f64>,
    /// Correlation state path, row per period.
    pub eta_path: DMatrix<f64>,
}

/// Draws the asset panel conditional on a whitened factor panel `u`
/// (`T × r`, rows are periods).
pub fn simulate_core<R: Rng + ?Sized>(
    model: &CoreModel,
    u: &DMatrix<f64>,
    rng: &mut R,
) -> Result<CoreSim> {
    let n = model.n();
    let r = model.r();
    if u.ncols() != r {
        return Err(crate::Error::DimensionMismatch {
            what: "whitened factor panel columns",
            expected: r,
            got: u.ncols(),
        });
    }
    let t_len = u.nrows();
    let q = model.n_corr_state();

    let mut tau: Vec<DVector<f64>> = model.loading_dynamics().iter().map(|dy| dy.init()).collect();
    let mut eta = model.corr_dynamics().init();

    let mut z = DMatrix::zeros(t_len, n);
    let mut residuals = DMatrix::zeros(t_len, n);
    let mut tau_path = DMatrix::zeros(t_len, n * r);
    let mut eta_path = DMatrix::zeros(t_len, q);

    for t in 0..t_len {
        for (i, tau_i) in tau.iter().enumerate() {
            tau_path.view_mut((t, i * r), (1, r)).copy_from(&tau_i.transpose());
        }
        eta_path.row_mut(t).copy_from(&eta.transpose());

        let v = convt::sample_v(model.tails(), rng);
        let e_t = model.residual_corr_sqrt(&eta)? * &v;
        residuals.row_mut(t).copy_from(&e_t.transpose());

        let u_t = u.row(t).transpose();
        let mut z_t = DVector::zeros(n);
        for i in 0..n {
            let ls = LoadingState::from_tau(tau[i].clone())?;
            z_t[i] = ls.rho().dot(&u_t) + ls.omega() * e_t[i];
        }
        z.row_mut(t).copy_from(&z_t.transpose());

        let step = joint_score(model, &tau, &eta, z_t.as_view(), u_t.as_view())?;
        for i in 0..n {
            model.loading_dynamics()[i].step(&mut tau[i], &step.eps_tau[i]);
        }
        model.corr_dynamics().step(&mut eta, &step.eps_eta);
    }

    Ok(CoreSim {
        z,
        residuals,
        tau_path,
        eta_path,
    })
}

/// Draws the asset panel conditional on a whitened factor panel under the
/// two-stage parametrization: each loading state advances on its per-asset
/// quasi-likelihood score and the residual correlation state on the pooled
/// residual score. This is the generative counterpart of
/// [`crate::scoredriven::filter_loading_decoupled`] followed by
/// [`crate::scoredriven::filter_residual_corr`], and it covers tail
/// partitions that straddle correlation cells (which the one-stage core
/// model rejects).
pub fn simulate_core_decoupled<R: Rng + ?Sized>(
    loading_models: &[LoadingModel],
    residual_model: &ResidualCorrModel,
    u: &DMatrix<f64>,
    rng: &mut R,
) -> Result<CoreSim> {
    let n = residual_model.n();
    if loading_models.len() != n {
        return Err(crate::Error::DimensionMismatch {
            what: "per-asset loading models",
            expected: n,
            got: loading_models.len(),
        });
    }
    let r = u.ncols();
    for model in loading_models {
        if model.r() != r {
            return Err(crate::Error::DimensionMismatch {
                what: "loading factor dimension",
                expected: r,
                got: model.r(),
            });
        }
    }
    let t_len = u.nrows();
    let q = residual_model.n_state();

    let mut tau: Vec<DVector<f64>> =
        loading_models.iter().map(|m| m.dynamics().init()).collect();
    let mut eta = residual_model.dynamics().init();

    let mut z = DMatrix::zeros(t_len, n);
    let mut residuals = DMatrix::zeros(t_len, n);
    let mut tau_path = DMatrix::zeros(t_len, n * r);
    let mut eta_path = DMatrix::zeros(t_len, q);

    for t in 0..t_len {
        for (i, tau_i) in tau.iter().enumerate() {
            tau_path.view_mut((t, i * r), (1, r)).copy_from(&tau_i.transpose());
        }
        eta_path.row_mut(t).copy_from(&eta.transpose());

        let v = convt::sample_v(residual_model.tails(), rng);
        let e_t = residual_model.corr_sqrt(&eta)? * &v;
        residuals.row_mut(t).copy_from(&e_t.transpose());

        let u_t = u.row(t).transpose();
        let mut z_t = DVector::zeros(n);
        for i in 0..n {
            let ls = LoadingState::from_tau(tau[i].clone())?;
            z_t[i] = ls.rho().dot(&u_t) + ls.omega() * e_t[i];
        }
        z.row_mut(t).copy_from(&z_t.transpose());

        for i in 0..n {
            let step = loading_score(&loading_models[i], &tau[i], z_t[i], u_t.as_view())?;
            loading_models[i].dynamics().step(&mut tau[i], &step.eps_tau);
        }
        let step = residual_corr_score(residual_model, &eta, e_t.as_view())?;
        residual_model.dynamics().step(&mut eta, &step.eps_eta);
    }

    Ok(CoreSim {
        z,
        residuals,
        tau_path,
        eta_path,
    })
}
