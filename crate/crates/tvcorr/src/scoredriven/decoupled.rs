//! Filters for decoupled estimation: per-asset loading recursions against a
//! marginal quasi-likelihood, then correlation recursions on the
//! standardized residuals.
//!
//! Stage 1 treats each asset on its own: `Z_i = ρ_i'U + ω_i e_i` with a
//! univariate standardized-t (or Gaussian) margin for `e_i`. The loading
//! coordinates `τ_i` follow the score recursion; the filter emits the
//! residual path `ê_i = (Z_i − ρ_i'U)/ω_i` consumed by stage 2.
//!
//! Stage 2 filters the correlation of the pooled residual panel. Cells with
//! an equicorrelation interior have closed-form scores and information
//! ([`equicorr_mt_score`], [`equicorr_ht_score`]); the general driver
//! [`filter_residual_corr`] handles any block structure and any tail
//! partition, including a tail group pooled across cells, by whitening per
//! cell and accumulating the group terms globally. The factorized entry
//! point [`filter_sector_block`] additionally enforces that tails nest
//! within cells — the structure that makes per-sector estimation exact —
//! and rejects pooled tails.

use nalgebra::{DMatrix, DVector, DVectorView};

use super::cell::{
    cells_for, score_matrix, split_tails, state_gradient, CellEngine, CellState, CorrCell,
};
use super::factor::diverged;
use super::{ChannelDynamics, Scaling};
use crate::blockcorr::{equicorr_eta_jacobian, equicorr_rho, BlockSpec};
use crate::convt::{self, ConvolutionT};
use crate::error::{Error, Result};
use crate::loadings::LoadingState;

// ===================================================================
// Stage 1: per-asset loading filter
// ===================================================================

/// Marginal dynamic-loading model for one asset.
#[derive(Debug, Clone)]
pub struct LoadingModel {
    dynamics: ChannelDynamics,
    nu: f64,
    scaling: Scaling,
}

impl LoadingModel {
    /// `dynamics` drives the `r` loading coordinates; `nu` is the marginal
    /// tail parameter (`> 2`, or `f64::INFINITY` for a Gaussian margin);
    /// `scaling` selects the innovation definition (Tikhonov carries one
    /// ridge value).
    pub fn new(dynamics: ChannelDynamics, nu: f64, scaling: Scaling) -> Result<Self> {
        if !(nu > 2.0) {
            return Err(Error::domain(format!(
                "marginal tail parameter must exceed 2, got {nu}"
            )));
        }
        scaling.validate(1)?;
        Ok(Self {
            dynamics,
            nu,
            scaling,
        })
    }

    /// Number of loading channels.
    pub fn r(&self) -> usize {
        self.dynamics.dim()
    }

    /// Recursion coefficients.
    pub fn dynamics(&self) -> &ChannelDynamics {
        &self.dynamics
    }

    /// Marginal tail parameter.
    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Innovation scaling.
    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }
}

/// One-observation score of the marginal loading model.
#[derive(Debug, Clone)]
pub struct LoadingStepScore {
    /// `ℓ_t = −log ω + log f(e)`.
    pub loglik: f64,
    /// Standardized residual `ê = (z − ρ'u)/ω`.
    pub residual: f64,
    /// Idiosyncratic scale `ω` at the current state.
    pub omega: f64,
    /// Score in the location/scale pair `(μ, ω)`: `(We, We²−1)/ω`.
    pub grad_xi: (f64, f64),
    /// Diagonal information of `(μ, ω)` at the current state.
    pub info_xi: (f64, f64),
    /// Score in the loading coordinates, `∇_τ = M'∇_ξ`.
    pub grad_tau: DVector<f64>,
    /// Scaled innovation under the model's scaling.
    pub eps_tau: DVector<f64>,
}

/// Scores one observation `(z_t, u_t)` of the marginal loading model at
/// state `τ`.
pub fn loading_score(
    model: &LoadingModel,
    tau: &DVector<f64>,
    z_t: f64,
    u_t: DVectorView<'_, f64>,
) -> Result<LoadingStepScore> {
    if u_t.len() != model.r() {
        return Err(Error::DimensionMismatch {
            what: "factor observation",
            expected: model.r(),
            got: u_t.len(),
        });
    }
    let ls = LoadingState::from_tau(tau.clone())?;
    let omega = ls.omega();
    let u = u_t.clone_owned();
    let e = (z_t - ls.rho().dot(&u)) / omega;
    let nu = model.nu;
    let w = convt::tail_weight(nu, 1, e * e);
    let loglik = -omega.ln() + convt::group_log_density(nu, 1, e * e);
    if !loglik.is_finite() {
        return Err(Error::domain("non-finite marginal log-likelihood"));
    }

    let grad_mu = w * e / omega;
    let grad_omega = (w * e * e - 1.0) / omega;
    let s_loc = convt::location_info_scale(nu, 1);
    let s_scale = convt::scalar_scale_info(nu);
    let info_xi = (s_loc / (omega * omega), s_scale / (omega * omega));

    let m = ls.sensitivity(&u);
    let g2 = DVector::from_vec(vec![grad_mu, grad_omega]);
    let grad_tau = m.transpose() * &g2;
    let eps_tau = match &model.scaling {
        Scaling::Identity => grad_tau.clone(),
        Scaling::MoorePenrose => {
            let s2 = DVector::from_vec(vec![grad_mu / info_xi.0, grad_omega / info_xi.1]);
            ls.sensitivity_pinv(&u) * s2
        }
        Scaling::Tikhonov { lambda } => {
            let s2 = DVector::from_vec(vec![grad_mu / info_xi.0, grad_omega / info_xi.1]);
            ls.sensitivity_tikhonov(&u, lambda[0])? * s2
        }
    };
    if eps_tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite scaled innovation"));
    }

    Ok(LoadingStepScore {
        loglik,
        residual: e,
        omega,
        grad_xi: (grad_mu, grad_omega),
        info_xi,
        grad_tau,
        eps_tau,
    })
}

/// Output of [`filter_loading_decoupled`].
#[derive(Debug, Clone)]
pub struct LoadingOutput {
    /// Total marginal log-likelihood `ℓ*(Z_i|U)`.
    pub loglik: f64,
    /// Per-observation contributions.
    pub stepwise: DVector<f64>,
    /// Standardized residual path `ê_i`.
    pub residuals: DVector<f64>,
    /// Idiosyncratic scale path `ω_i`, aligned with `residuals`; together
    /// they reconstruct the observation likelihood as
    /// `ℓ(z_i|u) = −Σ_t log ω_{i,t} + ℓ(ê_i)`.
    pub omegas: DVector<f64>,
    /// Loading state path, row per period, if requested.
    pub tau_path: Option<DMatrix<f64>>,
}

/// Filters one asset's loadings against the factor panel `u` (T×r).
pub fn filter_loading_decoupled(
    model: &LoadingModel,
    z_i: &DVector<f64>,
    u: &DMatrix<f64>,
    record_paths: bool,
) -> Result<LoadingOutput> {
    let r = model.r();
    if u.ncols() != r {
        return Err(Error::DimensionMismatch {
            what: "factor panel columns",
            expected: r,
            got: u.ncols(),
        });
    }
    if u.nrows() != z_i.len() {
        return Err(Error::DimensionMismatch {
            what: "panel period counts",
            expected: z_i.len(),
            got: u.nrows(),
        });
    }
    let t_len = z_i.len();
    let mut tau = model.dynamics.init();
    let mut stepwise = DVector::zeros(t_len);
    let mut residuals = DVector::zeros(t_len);
    let mut omegas = DVector::zeros(t_len);
    let mut tau_path = record_paths.then(|| DMatrix::zeros(t_len, r));

    for t in 0..t_len {
        if let Some(tp) = tau_path.as_mut() {
            tp.row_mut(t).copy_from(&tau.transpose());
        }
        let u_t = u.row(t).transpose();
        let step =
            loading_score(model, &tau, z_i[t], u_t.as_view()).map_err(|e| diverged(t, &e))?;
        stepwise[t] = step.loglik;
        residuals[t] = step.residual;
        omegas[t] = step.omega;
        model.dynamics.step(&mut tau, &step.eps_tau);
    }

    Ok(LoadingOutput {
        loglik: stepwise.sum(),
        stepwise,
        residuals,
        omegas,
        tau_path,
    })
}

// ===================================================================
// Equicorrelation cells: closed-form scores
// ===================================================================

/// One-observation score of an equicorrelation cell, on both the
/// correlation scale `ϱ` and the log-domain scale `η`.
#[derive(Debug, Clone)]
pub struct EquiScore {
    /// Cell log-density at the observation.
    pub loglik: f64,
    /// `∂ℓ/∂ϱ`.
    pub grad_rho: f64,
    /// Fisher information of `ϱ`.
    pub info_rho: f64,
    /// `∂ℓ/∂η = (dϱ/dη) ∂ℓ/∂ϱ`.
    pub grad_eta: f64,
    /// Fisher information of `η`.
    pub info_eta: f64,
}

fn equicorr_shape(rho: f64, m: usize) -> Result<(f64, f64, f64)> {
    let mf = m as f64;
    if m < 2 {
        return Err(Error::domain(
            "equicorrelation cell needs at least two members",
        ));
    }
    if !(rho < 1.0 && rho > -1.0 / (mf - 1.0)) {
        return Err(Error::domain(format!(
            "equicorrelation {rho} outside (-1/{}, 1) for cell size {m}",
            mf - 1.0
        )));
    }
    let a = 1.0 + (mf - 1.0) * rho;
    let delta = 1.0 - rho;
    let log_det = a.ln() + (mf - 1.0) * delta.ln();
    Ok((a, delta, log_det))
}

/// Trace pieces of `H = C^{-1/2} ∂C^{1/2}/∂ϱ` for an equicorrelation
/// matrix: the eigenvalue `a` on the mean direction and `δ` (multiplicity
/// `m−1`) on its complement give
/// `H = ((m−1)/(2a)) P_ι − (1/(2δ))(I − P_ι)`.
fn equicorr_h(a: f64, delta: f64, m: usize) -> (f64, f64) {
    let mf = m as f64;
    let c_a = (mf - 1.0) / (2.0 * a);
    let c_d = -1.0 / (2.0 * delta);
    let h_diag = (c_a + (mf - 1.0) * c_d) / mf;
    let h_off = (c_a - c_d) / mf;
    (h_diag, h_off)
}

/// Scores one observation of an equicorrelation cell whose members share a
/// single pooled tail group with parameter `nu` (`f64::INFINITY` for the
/// Gaussian case).
pub fn equicorr_mt_score(x: DVectorView<'_, f64>, rho: f64, nu: f64) -> Result<EquiScore> {
    let m = x.len();
    let (a, delta, log_det) = equicorr_shape(rho, m)?;
    let mf = m as f64;

    let xx = x.dot(&x);
    let xsum: f64 = x.iter().sum();
    let ssum = xsum * xsum;
    // Q = x'C⁻¹x for the equicorrelation inverse.
    let q = xx / delta - rho * ssum / (delta * a);
    let loglik = -0.5 * log_det + convt::group_log_density(nu, m, q);
    let w = convt::tail_weight(nu, m, q);

    let dlog_det = (mf - 1.0) * (1.0 / a - 1.0 / delta);
    let dq = xx / (delta * delta) - ssum * (1.0 + (mf - 1.0) * rho * rho) / (delta * delta * a * a);
    let grad_rho = -0.5 * (dlog_det + w * dq);

    // Information via the fourth-moment metric of H = C^{-1/2} dC^{1/2}/dϱ:
    // a single pooled group gives 2φ tr(H²) + (φ−1)(tr H)².
    let phi = if nu.is_finite() {
        (nu + mf) / (nu + mf + 2.0)
    } else {
        1.0
    };
    let tr_h2 = (mf - 1.0) * (mf - 1.0) / (4.0 * a * a) + (mf - 1.0) / (4.0 * delta * delta);
    let tr_h = (mf - 1.0) / (2.0 * a) - (mf - 1.0) / (2.0 * delta);
    let info_rho = 2.0 * phi * tr_h2 + (phi - 1.0) * tr_h * tr_h;

    let deta_drho = equicorr_eta_jacobian(rho, m)?;
    let drho_deta = 1.0 / deta_drho;
    Ok(EquiScore {
        loglik,
        grad_rho,
        info_rho,
        grad_eta: grad_rho * drho_deta,
        info_eta: info_rho * drho_deta * drho_deta,
    })
}

/// Scores one observation of an equicorrelation cell whose members carry
/// individual tail parameters `nus` (entries may be `f64::INFINITY`).
pub fn equicorr_ht_score(x: DVectorView<'_, f64>, rho: f64, nus: &[f64]) -> Result<EquiScore> {
    let m = x.len();
    if nus.len() != m {
        return Err(Error::DimensionMismatch {
            what: "per-member tail parameters",
            expected: m,
            got: nus.len(),
        });
    }
    let (a, delta, log_det) = equicorr_shape(rho, m)?;
    let mf = m as f64;

    let mean = x.iter().sum::<f64>() / mf;
    let sqrt_a = a.sqrt();
    let sqrt_d = delta.sqrt();
    let mut loglik = -0.5 * log_det;
    let mut grad_quad = 0.0;
    for i in 0..m {
        let dev = x[i] - mean;
        let v = mean / sqrt_a + dev / sqrt_d;
        let nu = nus[i];
        loglik += convt::group_log_density(nu, 1, v * v);
        let w = convt::tail_weight(nu, 1, v * v);
        let dv = 0.5 * dev / (delta * sqrt_d) - 0.5 * (mf - 1.0) * mean / (a * sqrt_a);
        grad_quad += w * v * dv;
    }
    let dlog_det = (mf - 1.0) * (1.0 / a - 1.0 / delta);
    let grad_rho = -0.5 * dlog_det - grad_quad;

    // Information: Σ_i (3φ_i − 1) H_ii² + Σ_{i≠j} (1 + ψ_i) H_ij² for the
    // all-singleton tail partition.
    let (h_diag, h_off) = equicorr_h(a, delta, m);
    let mut sum_phi = 0.0;
    let mut sum_psi = 0.0;
    for &nu in nus {
        let (phi, psi) = if nu.is_finite() {
            let phi = (nu + 1.0) / (nu + 3.0);
            (phi, phi * nu / (nu - 2.0))
        } else {
            (1.0, 1.0)
        };
        sum_phi += phi;
        sum_psi += psi;
    }
    let info_rho =
        h_diag * h_diag * (3.0 * sum_phi - mf) + h_off * h_off * (mf - 1.0) * (mf + sum_psi);

    let deta_drho = equicorr_eta_jacobian(rho, m)?;
    let drho_deta = 1.0 / deta_drho;
    Ok(EquiScore {
        loglik,
        grad_rho,
        info_rho,
        grad_eta: grad_rho * drho_deta,
        info_eta: info_rho * drho_deta * drho_deta,
    })
}

/// Output of the equicorrelation filters.
#[derive(Debug, Clone)]
pub struct EquicorrOutput {
    /// Total cell log-likelihood.
    pub loglik: f64,
    /// Per-observation contributions.
    pub stepwise: DVector<f64>,
    /// Log-domain state path.
    pub eta_path: DVector<f64>,
    /// Correlation path `ϱ_t`.
    pub rho_path: DVector<f64>,
}

fn filter_equicorr_impl<S>(
    x: &DMatrix<f64>,
    dynamics: &ChannelDynamics,
    score: S,
) -> Result<EquicorrOutput>
where
    S: Fn(DVectorView<'_, f64>, f64) -> Result<EquiScore>,
{
    if dynamics.dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "equicorrelation state channels",
            expected: 1,
            got: dynamics.dim(),
        });
    }
    let m = x.ncols();
    if m < 2 {
        return Err(Error::domain(
            "equicorrelation cell needs at least two members",
        ));
    }
    let t_len = x.nrows();
    let mut eta = dynamics.init();
    let mut stepwise = DVector::zeros(t_len);
    let mut eta_path = DVector::zeros(t_len);
    let mut rho_path = DVector::zeros(t_len);

    for t in 0..t_len {
        eta_path[t] = eta[0];
        let rho = equicorr_rho(eta[0], m);
        rho_path[t] = rho;
        let row = x.row(t).transpose();
        let s = score(row.as_view(), rho).map_err(|e| diverged(t, &e))?;
        if !s.loglik.is_finite() || !s.grad_eta.is_finite() || !(s.info_eta > 0.0) {
            return Err(Error::FilterDiverged {
                step: t,
                detail: "non-finite score or non-positive information".to_string(),
            });
        }
        stepwise[t] = s.loglik;
        let eps = DVector::from_element(1, s.grad_eta / s.info_eta);
        dynamics.step(&mut eta, &eps);
    }

    Ok(EquicorrOutput {
        loglik: stepwise.sum(),
        stepwise,
        eta_path,
        rho_path,
    })
}

/// Filters an equicorrelation cell with a pooled tail group: observations
/// are rows of `x`, the single state channel is the log-domain coordinate
/// `η`, and the innovation is the information-rescaled score.
pub fn filter_equicorr_mt(
    x: &DMatrix<f64>,
    dynamics: &ChannelDynamics,
    nu: f64,
) -> Result<EquicorrOutput> {
    filter_equicorr_impl(x, dynamics, |row, rho| equicorr_mt_score(row, rho, nu))
}

/// Filters an equicorrelation cell with per-member tail parameters.
pub fn filter_equicorr_ht(
    x: &DMatrix<f64>,
    dynamics: &ChannelDynamics,
    nus: &[f64],
) -> Result<EquicorrOutput> {
    filter_equicorr_impl(x, dynamics, |row, rho| equicorr_ht_score(row, rho, nus))
}

// ===================================================================
// Stage 2: residual correlation filter
// ===================================================================

/// Dynamic correlation model for the standardized residual panel.
#[derive(Debug, Clone)]
pub struct ResidualCorrModel {
    blocks: BlockSpec,
    dynamics: ChannelDynamics,
    tails: ConvolutionT,
    information_scaling: bool,
    cells: Vec<CorrCell>,
    engines: Vec<CellEngine>,
    eta_offsets: Vec<usize>,
}

impl ResidualCorrModel {
    /// Validates dimensions: the tail partition covers the panel and the
    /// dynamics provide one channel per log-domain coordinate of the
    /// structure. Tail groups may pool across correlation cells; the
    /// density is then evaluated globally.
    pub fn new(
        blocks: BlockSpec,
        dynamics: ChannelDynamics,
        tails: ConvolutionT,
        information_scaling: bool,
    ) -> Result<Self> {
        if tails.n() != blocks.n() {
            return Err(Error::DimensionMismatch {
                what: "tail partition dimension",
                expected: blocks.n(),
                got: tails.n(),
            });
        }
        let cells = cells_for(&blocks)?;
        let q: usize = cells.iter().map(|c| c.n_state()).sum();
        if dynamics.dim() != q {
            return Err(Error::DimensionMismatch {
                what: "correlation state channels",
                expected: q,
                got: dynamics.dim(),
            });
        }
        let engines = cells.iter().map(|c| CellEngine::new(c.clone())).collect();
        let mut eta_offsets = Vec::with_capacity(cells.len());
        let mut off = 0;
        for c in &cells {
            eta_offsets.push(off);
            off += c.n_state();
        }
        Ok(Self {
            blocks,
            dynamics,
            tails,
            information_scaling,
            cells,
            engines,
            eta_offsets,
        })
    }

    /// Number of assets.
    pub fn n(&self) -> usize {
        self.blocks.n()
    }

    /// Number of correlation state channels.
    pub fn n_state(&self) -> usize {
        self.dynamics.dim()
    }

    /// The block structure.
    pub fn blocks(&self) -> &BlockSpec {
        &self.blocks
    }

    /// The tail partition.
    pub fn tails(&self) -> &ConvolutionT {
        &self.tails
    }

    /// Recursion coefficients.
    pub fn dynamics(&self) -> &ChannelDynamics {
        &self.dynamics
    }

    /// Whether tail groups nest within correlation cells (the factorizable
    /// arrangement).
    pub fn tails_nest_in_cells(&self) -> bool {
        split_tails(&self.tails, &self.cells).is_ok()
    }

    fn check_state(&self, eta: &DVector<f64>) -> Result<()> {
        if eta.len() != self.n_state() {
            return Err(Error::DimensionMismatch {
                what: "residual correlation state",
                expected: self.n_state(),
                got: eta.len(),
            });
        }
        Ok(())
    }

    /// Residual correlation matrix at a log-domain state.
    pub fn corr(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(eta)?;
        dense_corr(self, eta)
    }

    /// Symmetric square root of the residual correlation matrix at a state
    /// (block diagonal, so the root is assembled cell by cell).
    pub fn corr_sqrt(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(eta)?;
        let n = self.n();
        let mut out = DMatrix::identity(n, n);
        for (s, engine) in self.engines.iter().enumerate() {
            let cell = &self.cells[s];
            let off = self.eta_offsets[s];
            let st = engine.reconstruct(eta.rows(off, cell.n_state()))?;
            let range = cell.range();
            out.view_mut((range.start, range.start), (range.len(), range.len()))
                .copy_from(&st.sqrt);
        }
        Ok(out)
    }
}

/// One-observation score of the residual correlation model.
#[derive(Debug, Clone)]
pub struct ResidualStepScore {
    /// Log-density of the residual vector.
    pub loglik: f64,
    /// Raw score of the log-domain coordinates.
    pub grad_eta: DVector<f64>,
    /// Scaled innovation (information-rescaled when the model says so).
    pub eps_eta: DVector<f64>,
}

/// Scores one residual observation at state `eta`.
pub fn residual_corr_score(
    model: &ResidualCorrModel,
    eta: &DVector<f64>,
    e_t: DVectorView<'_, f64>,
) -> Result<ResidualStepScore> {
    let n = model.n();
    if e_t.len() != n {
        return Err(Error::DimensionMismatch {
            what: "residual observation",
            expected: n,
            got: e_t.len(),
        });
    }
    if eta.len() != model.n_state() {
        return Err(Error::DimensionMismatch {
            what: "correlation state vector",
            expected: model.n_state(),
            got: eta.len(),
        });
    }

    // Reconstruct cells and whiten globally.
    let mut states: Vec<CellState> = Vec::with_capacity(model.cells.len());
    let mut v = DVector::zeros(n);
    let mut loglik = 0.0;
    for (s, engine) in model.engines.iter().enumerate() {
        let cell = &model.cells[s];
        let off = model.eta_offsets[s];
        let st = engine.reconstruct(eta.rows(off, cell.n_state()))?;
        let range = cell.range();
        let vs = st.whiten(e_t.rows(range.start, range.len()));
        v.rows_mut(range.start, range.len()).copy_from(&vs);
        loglik -= 0.5 * st.log_det;
        states.push(st);
    }

    // Group terms and per-coordinate weights over the global partition.
    let mut weights = DVector::zeros(n);
    for (g, gr) in model.tails.group_ranges().iter().enumerate() {
        let nu = model.tails.nu()[g];
        let vsq: f64 = gr.clone().map(|i| v[i] * v[i]).sum();
        loglik += convt::group_log_density(nu, gr.len(), vsq);
        let w = convt::tail_weight(nu, gr.len(), vsq);
        for i in gr.clone() {
            weights[i] = w;
        }
    }
    if !loglik.is_finite() {
        return Err(Error::domain("non-finite residual log-density"));
    }

    // Per-cell score matrices and the state gradient.
    let mut grad_eta = DVector::zeros(eta.len());
    for (s, st) in states.iter().enumerate() {
        let cell = &model.cells[s];
        let range = cell.range();
        let q_s = cell.n_state();
        if q_s == 0 {
            continue;
        }
        let off = model.eta_offsets[s];
        let vs = v.rows(range.start, range.len()).clone_owned();
        let ws = weights.rows(range.start, range.len()).clone_owned();
        let p = score_matrix(st, &vs, &ws);
        let ge = state_gradient(st, &p);
        grad_eta.rows_mut(off, q_s).copy_from(&ge);
    }

    let eps_eta = if model.information_scaling && eta.len() > 0 {
        // Global fourth-moment metric: embed each cell's H into the full
        // coordinate space so cross-cell tail coupling is accounted for.
        let mut hs: Vec<DMatrix<f64>> = Vec::with_capacity(eta.len());
        for (s, st) in states.iter().enumerate() {
            let cell = &model.cells[s];
            let range = cell.range();
            for h_local in st.h_state() {
                let mut h = DMatrix::zeros(n, n);
                h.view_mut((range.start, range.start), (range.len(), range.len()))
                    .copy_from(&h_local);
                hs.push(h);
            }
        }
        let info = convt::score_metric_gram(&hs, &model.tails);
        let chol = info.cholesky().ok_or_else(|| Error::IllConditioned {
            what: "residual correlation information",
            detail: "fourth-moment metric is not positive definite".to_string(),
        })?;
        chol.solve(&grad_eta)
    } else {
        grad_eta.clone()
    };
    if eps_eta.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite scaled innovation"));
    }

    Ok(ResidualStepScore {
        loglik,
        grad_eta,
        eps_eta,
    })
}

/// Output of the residual correlation filters.
#[derive(Debug, Clone)]
pub struct ResidualCorrOutput {
    /// Total log-likelihood `ℓ(e)`.
    pub loglik: f64,
    /// Per-observation contributions.
    pub stepwise: DVector<f64>,
    /// State path, row per period, if requested.
    pub eta_path: Option<DMatrix<f64>>,
    /// Dense correlation matrices per period, if requested.
    pub corr_path: Option<Vec<DMatrix<f64>>>,
}

/// Filters the residual correlation over the panel `e` (T×n), pooling tail
/// groups globally when they span correlation cells.
pub fn filter_residual_corr(
    model: &ResidualCorrModel,
    e: &DMatrix<f64>,
    record_paths: bool,
) -> Result<ResidualCorrOutput> {
    let n = model.n();
    if e.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "residual panel columns",
            expected: n,
            got: e.ncols(),
        });
    }
    let t_len = e.nrows();
    let q = model.n_state();
    let mut eta = model.dynamics.init();
    let mut stepwise = DVector::zeros(t_len);
    let mut eta_path = record_paths.then(|| DMatrix::zeros(t_len, q));
    let mut corr_path = record_paths.then(|| Vec::with_capacity(t_len));

    for t in 0..t_len {
        if let Some(ep) = eta_path.as_mut() {
            ep.row_mut(t).copy_from(&eta.transpose());
        }
        if let Some(cp) = corr_path.as_mut() {
            cp.push(dense_corr(model, &eta).map_err(|e| diverged(t, &e))?);
        }
        let row = e.row(t).transpose();
        let step =
            residual_corr_score(model, &eta, row.as_view()).map_err(|e| diverged(t, &e))?;
        stepwise[t] = step.loglik;
        model.dynamics.step(&mut eta, &step.eps_eta);
    }

    Ok(ResidualCorrOutput {
        loglik: stepwise.sum(),
        stepwise,
        eta_path,
        corr_path,
    })
}

/// Factorized stage-2 driver: like [`filter_residual_corr`] but requires
/// every tail group to nest within a correlation cell, so the total
/// likelihood is exactly the sum of independent per-cell likelihoods.
/// A tail group pooled across cells — the arrangement a single
/// multivariate-t over a sparse structure produces — is rejected with an
/// unsupported-factorization error.
pub fn filter_sector_block(
    model: &ResidualCorrModel,
    e: &DMatrix<f64>,
    record_paths: bool,
) -> Result<ResidualCorrOutput> {
    split_tails(&model.tails, &model.cells)?;
    filter_residual_corr(model, e, record_paths)
}

/// Assembles the dense block-diagonal correlation matrix at a state.
fn dense_corr(model: &ResidualCorrModel, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = model.n();
    let mut out = DMatrix::identity(n, n);
    for (s, engine) in model.engines.iter().enumerate() {
        let cell = &model.cells[s];
        let off = model.eta_offsets[s];
        let st = engine.reconstruct(eta.rows(off, cell.n_state()))?;
        let range = cell.range();
        out.view_mut((range.start, range.start), (range.len(), range.len()))
            .copy_from(&st.spectrum.corr());
    }
    Ok(out)
}
