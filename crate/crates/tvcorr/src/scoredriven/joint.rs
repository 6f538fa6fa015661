//! Joint score-driven filter for factor loadings and idiosyncratic
//! correlation.
//!
//! Conditional on the whitened factors `U_t`, asset returns follow
//!
//! ```text
//! Z_t = ρ_t' U_t + Λ_{ω,t} e_t,       e_t ~ convolution-t(0, C_{e,t}),
//! ```
//!
//! where row `i` of `ρ_t` is the loading vector of asset `i` with
//! complement `ω_{i,t} = √(1 − ρ_i'ρ_i)`, and `C_{e,t}` is block-diagonal
//! over the structure's correlation cells. The dynamic state stacks one
//! hyperbolic loading coordinate block `τ_i` per asset and the log-domain
//! correlation coordinates `η`; every channel follows the shared
//! mean-reverting score recursion.
//!
//! The density factorizes over correlation cells, so each tail group must
//! lie inside one cell; a globally pooled tail (one multivariate-t group
//! across cells) cannot be filtered jointly and is rejected at model
//! construction.

use nalgebra::{DMatrix, DVector, DVectorView};

use super::cell::{
    cells_for, evaluate_cell, split_tails, state_gradient, CellEngine, CorrCell,
};
use super::factor::diverged;
use super::{ChannelDynamics, Scaling};
use crate::blockcorr::BlockSpec;
use crate::convt::{self, ConvolutionT};
use crate::error::{Error, Result};
use crate::loadings::LoadingState;

/// Joint dynamic model for loadings and idiosyncratic correlation.
#[derive(Debug, Clone)]
pub struct CoreModel {
    blocks: BlockSpec,
    r: usize,
    loading_dynamics: Vec<ChannelDynamics>,
    corr_dynamics: ChannelDynamics,
    tails: ConvolutionT,
    scaling: Scaling,
    cells: Vec<CorrCell>,
    engines: Vec<CellEngine>,
    cell_tails: Vec<ConvolutionT>,
    eta_offsets: Vec<usize>,
}

impl CoreModel {
    /// Validates dimensions and the cell/tail nesting, and precomputes the
    /// per-cell machinery.
    ///
    /// * `loading_dynamics`: one `r`-channel recursion per asset;
    /// * `corr_dynamics`: one channel per log-domain correlation coordinate
    ///   of the structure (cells concatenated in asset order);
    /// * `tails`: tail partition over the `n` assets — every group must lie
    ///   within a single correlation cell.
    pub fn new(
        blocks: BlockSpec,
        r: usize,
        loading_dynamics: Vec<ChannelDynamics>,
        corr_dynamics: ChannelDynamics,
        tails: ConvolutionT,
        scaling: Scaling,
    ) -> Result<Self> {
        let n = blocks.n();
        if tails.n() != n {
            return Err(Error::DimensionMismatch {
                what: "tail partition dimension",
                expected: n,
                got: tails.n(),
            });
        }
        if loading_dynamics.len() != n {
            return Err(Error::DimensionMismatch {
                what: "per-asset loading dynamics",
                expected: n,
                got: loading_dynamics.len(),
            });
        }
        if r == 0 {
            return Err(Error::domain("factor dimension must be at least 1"));
        }
        for (i, d) in loading_dynamics.iter().enumerate() {
            if d.dim() != r {
                return Err(Error::domain(format!(
                    "asset {i}: loading dynamics must have {r} channels, got {}",
                    d.dim()
                )));
            }
        }
        scaling.validate(n)?;
        let cells = cells_for(&blocks)?;
        let q: usize = cells.iter().map(|c| c.n_state()).sum();
        if corr_dynamics.dim() != q {
            return Err(Error::DimensionMismatch {
                what: "correlation state channels",
                expected: q,
                got: corr_dynamics.dim(),
            });
        }
        let cell_tails = split_tails(&tails, &cells)?;
        let engines = cells.iter().map(|c| CellEngine::new(c.clone())).collect();
        let mut eta_offsets = Vec::with_capacity(cells.len());
        let mut off = 0;
        for c in &cells {
            eta_offsets.push(off);
            off += c.n_state();
        }
        Ok(Self {
            blocks,
            r,
            loading_dynamics,
            corr_dynamics,
            tails,
            scaling,
            cells,
            engines,
            cell_tails,
            eta_offsets,
        })
    }

    /// Number of assets.
    pub fn n(&self) -> usize {
        self.blocks.n()
    }

    /// Number of factors.
    pub fn r(&self) -> usize {
        self.r
    }

    /// Number of correlation state channels.
    pub fn n_corr_state(&self) -> usize {
        self.corr_dynamics.dim()
    }

    /// The block structure.
    pub fn blocks(&self) -> &BlockSpec {
        &self.blocks
    }

    /// The tail partition.
    pub fn tails(&self) -> &ConvolutionT {
        &self.tails
    }

    /// Per-asset loading recursion coefficients.
    pub fn loading_dynamics(&self) -> &[ChannelDynamics] {
        &self.loading_dynamics
    }

    /// Correlation recursion coefficients.
    pub fn corr_dynamics(&self) -> &ChannelDynamics {
        &self.corr_dynamics
    }

    /// The innovation scaling in use.
    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    /// The correlation cells of the structure, in asset order.
    pub fn cells(&self) -> &[CorrCell] {
        &self.cells
    }
}

/// Score and scaled innovation of one observation at a given state.
#[derive(Debug, Clone)]
pub struct CoreStepScore {
    /// Log-likelihood contribution `ℓ_t = −Σ_i log ω_i + ℓ_e(ê_t)`.
    pub loglik: f64,
    /// Standardized residuals `ê_i = (Z_i − ρ_i'U)/ω_i`.
    pub residuals: DVector<f64>,
    /// Raw score per asset loading block, `∇_{τ_i}`.
    pub grad_tau: Vec<DVector<f64>>,
    /// Raw score of the correlation coordinates, `∇_η`.
    pub grad_eta: DVector<f64>,
    /// Scaled innovation per asset loading block.
    pub eps_tau: Vec<DVector<f64>>,
    /// Scaled innovation of the correlation coordinates.
    pub eps_eta: DVector<f64>,
}

/// Scores one observation `(z_t, u_t)` at the state `(τ, η)`: likelihood
/// contribution, raw scores in the dynamic parametrization and scaled
/// innovations under the model's scaling choice.
pub fn joint_score(
    model: &CoreModel,
    tau: &[DVector<f64>],
    eta: &DVector<f64>,
    z_t: DVectorView<'_, f64>,
    u_t: DVectorView<'_, f64>,
) -> Result<CoreStepScore> {
    let n = model.n();
    if tau.len() != n {
        return Err(Error::DimensionMismatch {
            what: "loading state blocks",
            expected: n,
            got: tau.len(),
        });
    }
    if eta.len() != model.n_corr_state() {
        return Err(Error::DimensionMismatch {
            what: "correlation state vector",
            expected: model.n_corr_state(),
            got: eta.len(),
        });
    }
    if z_t.len() != n {
        return Err(Error::DimensionMismatch {
            what: "return observation",
            expected: n,
            got: z_t.len(),
        });
    }
    if u_t.len() != model.r {
        return Err(Error::DimensionMismatch {
            what: "factor observation",
            expected: model.r,
            got: u_t.len(),
        });
    }

    // Loading states and standardized residuals.
    let mut loadings = Vec::with_capacity(n);
    for tau_i in tau {
        loadings.push(LoadingState::from_tau(tau_i.clone())?);
    }
    let mut loglik = 0.0;
    let mut residuals = DVector::zeros(n);
    for (i, ls) in loadings.iter().enumerate() {
        let fitted = ls.rho().dot(&u_t.clone_owned());
        residuals[i] = (z_t[i] - fitted) / ls.omega();
        loglik -= ls.omega().ln();
    }

    let mut grad_tau = Vec::with_capacity(n);
    let mut eps_tau = Vec::with_capacity(n);
    let mut grad_eta = DVector::zeros(eta.len());
    let mut eps_eta = DVector::zeros(eta.len());

    // Per-asset location/scale gradients, filled cell by cell.
    let mut grad_mu = DVector::zeros(n);
    let mut grad_omega = DVector::zeros(n);
    // Information-solved location/scale directions (rescaled scalings only).
    let mut s_mu = DVector::zeros(n);
    let mut s_omega = DVector::zeros(n);
    let rescaled = !matches!(model.scaling, Scaling::Identity);

    for (s, engine) in model.engines.iter().enumerate() {
        let cell = &model.cells[s];
        let range = cell.range();
        let n_s = range.len();
        let q_s = cell.n_state();
        let off = model.eta_offsets[s];
        let state = engine.reconstruct(eta.rows(off, q_s))?;
        let tails_s = &model.cell_tails[s];
        let e_s = residuals.rows(range.start, n_s).clone_owned();
        let eval = evaluate_cell(&state, tails_s, e_s.as_view());
        loglik += eval.loglik;

        // ∇_μ = Λ⁻¹ C^{-1/2} (w∘V): location gradient per asset.
        let wv = DVector::from_fn(n_s, |j, _| eval.weights[j] * eval.v[j]);
        let isw = &state.inv_sqrt * &wv;
        for j in 0..n_s {
            let gi = range.start + j;
            grad_mu[gi] = isw[j] / loadings[gi].omega();
            // ∇_ω_i = (1/ω_i) Σ_j C^{1/2}[i,j] P[i,j].
            let mut acc = 0.0;
            for k in 0..n_s {
                acc += state.sqrt[(j, k)] * eval.p_mat[(j, k)];
            }
            grad_omega[gi] = acc / loadings[gi].omega();
        }
        let ge = state_gradient(&state, &eval.p_mat);
        grad_eta.rows_mut(off, q_s).copy_from(&ge);

        if rescaled {
            // Location block solves in closed form:
            // I_μ⁻¹∇_μ = Λ C^{1/2} D⁻¹ (w∘V) with D the per-coordinate
            // location information scale of the tail partition.
            let mut dinv_wv = wv.clone();
            for (g, gr) in tails_s.group_ranges().iter().enumerate() {
                let scale = convt::location_info_scale(tails_s.nu()[g], gr.len());
                for j in gr.clone() {
                    dinv_wv[j] /= scale;
                }
            }
            let sm = &state.sqrt * &dinv_wv;
            for j in 0..n_s {
                let gi = range.start + j;
                s_mu[gi] = loadings[gi].omega() * sm[j];
            }

            // Scale/correlation block: joint information of (ω_cell, η_cell)
            // via the fourth-moment metric of the scaled square-root
            // directions H = Ξ⁻¹ ∂Ξ/∂θ.
            let mut hs: Vec<DMatrix<f64>> = Vec::with_capacity(n_s + q_s);
            for j in 0..n_s {
                let gi = range.start + j;
                // H_ω = Ξ⁻¹ ∂Ξ/∂ω_i = (1/ω_i)(C^{-1/2}e_i)(e_i'C^{1/2}):
                // rank one, column j of C^{-1/2} times row j of C^{1/2}.
                let col = state.inv_sqrt.column(j).clone_owned();
                let row = state.sqrt.row(j).clone_owned();
                let h = (col * row) / loadings[gi].omega();
                hs.push(h);
            }
            for h in state.h_state() {
                hs.push(h);
            }
            let info = convt::score_metric_gram(&hs, tails_s);
            let mut rhs = DVector::zeros(n_s + q_s);
            for j in 0..n_s {
                rhs[j] = grad_omega[range.start + j];
            }
            for p in 0..q_s {
                rhs[n_s + p] = ge[p];
            }
            let chol = info.cholesky().ok_or_else(|| Error::IllConditioned {
                what: "scale/correlation information block",
                detail: format!("cell covering assets {}..{} is not positive definite",
                    range.start, range.end),
            })?;
            let sol = chol.solve(&rhs);
            for j in 0..n_s {
                s_omega[range.start + j] = sol[j];
            }
            eps_eta.rows_mut(off, q_s).copy_from(&sol.rows(n_s, q_s));
        } else {
            eps_eta.rows_mut(off, q_s).copy_from(&ge);
        }
    }

    // Pull the location/scale directions back to the loading coordinates.
    for (i, ls) in loadings.iter().enumerate() {
        let u_own = u_t.clone_owned();
        let m = ls.sensitivity(&u_own);
        let g2 = DVector::from_vec(vec![grad_mu[i], grad_omega[i]]);
        let gt = m.transpose() * &g2;
        let eps = match &model.scaling {
            Scaling::Identity => gt.clone(),
            Scaling::MoorePenrose => {
                let s2 = DVector::from_vec(vec![s_mu[i], s_omega[i]]);
                ls.sensitivity_pinv(&u_own) * s2
            }
            Scaling::Tikhonov { lambda } => {
                let s2 = DVector::from_vec(vec![s_mu[i], s_omega[i]]);
                ls.sensitivity_tikhonov(&u_own, lambda[i])? * s2
            }
        };
        grad_tau.push(gt);
        eps_tau.push(eps);
    }

    if !loglik.is_finite() {
        return Err(Error::domain("non-finite log-likelihood contribution"));
    }
    for e in eps_tau.iter().chain(std::iter::once(&eps_eta)) {
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite scaled innovation"));
        }
    }

    Ok(CoreStepScore {
        loglik,
        residuals,
        grad_tau,
        grad_eta,
        eps_tau,
        eps_eta,
    })
}

/// Output of [`filter_core_joint`].
#[derive(Debug, Clone)]
pub struct CoreOutput {
    /// Total log-likelihood `ℓ(Z|U)`.
    pub loglik: f64,
    /// Per-observation contributions.
    pub stepwise: DVector<f64>,
    /// Standardized residual panel `ê`, row per period.
    pub residuals: DMatrix<f64>,
    /// Loading state path, row per period, assets concatenated.
    pub tau_path: Option<DMatrix<f64>>,
    /// Correlation state path, row per period.
    pub eta_path: Option<DMatrix<f64>>,
    /// Dense idiosyncratic correlation matrices per period, if requested.
    pub corr_path: Option<Vec<DMatrix<f64>>>,
}

/// Runs the joint filter over panels `z` (T×n) and `u` (T×r).
pub fn filter_core_joint(
    model: &CoreModel,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    record_paths: bool,
) -> Result<CoreOutput> {
    let n = model.n();
    let r = model.r();
    let q = model.n_corr_state();
    if z.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "return panel columns",
            expected: n,
            got: z.ncols(),
        });
    }
    if u.ncols() != r {
        return Err(Error::DimensionMismatch {
            what: "factor panel columns",
            expected: r,
            got: u.ncols(),
        });
    }
    if z.nrows() != u.nrows() {
        return Err(Error::DimensionMismatch {
            what: "panel period counts",
            expected: z.nrows(),
            got: u.nrows(),
        });
    }
    let t_len = z.nrows();

    let mut tau: Vec<DVector<f64>> = model.loading_dynamics.iter().map(|d| d.init()).collect();
    let mut eta = model.corr_dynamics.init();

    let mut stepwise = DVector::zeros(t_len);
    let mut residuals = DMatrix::zeros(t_len, n);
    let mut tau_path = record_paths.then(|| DMatrix::zeros(t_len, n * r));
    let mut eta_path = record_paths.then(|| DMatrix::zeros(t_len, q));
    let mut corr_path = record_paths.then(|| Vec::with_capacity(t_len));

    for t in 0..t_len {
        if let Some(tp) = tau_path.as_mut() {
            for i in 0..n {
                for j in 0..r {
                    tp[(t, i * r + j)] = tau[i][j];
                }
            }
        }
        if let Some(ep) = eta_path.as_mut() {
            ep.row_mut(t).copy_from(&eta.transpose());
        }
        if let Some(cp) = corr_path.as_mut() {
            cp.push(dense_corr(model, &eta).map_err(|e| diverged(t, &e))?);
        }

        let z_t = z.row(t).transpose();
        let u_t = u.row(t).transpose();
        let step = joint_score(model, &tau, &eta, z_t.as_view(), u_t.as_view())
            .map_err(|e| diverged(t, &e))?;
        stepwise[t] = step.loglik;
        residuals.row_mut(t).copy_from(&step.residuals.transpose());

        for i in 0..n {
            model.loading_dynamics[i].step(&mut tau[i], &step.eps_tau[i]);
        }
        model.corr_dynamics.step(&mut eta, &step.eps_eta);
    }

    Ok(CoreOutput {
        loglik: stepwise.sum(),
        stepwise,
        residuals,
        tau_path,
        eta_path,
        corr_path,
    })
}

/// Assembles the dense block-diagonal correlation matrix at a state.
fn dense_corr(model: &CoreModel, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
    dense_corr_fn(model, eta, |state| state.spectrum.corr())
}

fn dense_corr_fn(
    model: &CoreModel,
    eta: &DVector<f64>,
    piece: impl Fn(&super::cell::CellState) -> DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = model.n();
    if eta.len() != model.n_corr_state() {
        return Err(Error::DimensionMismatch {
            what: "idiosyncratic correlation state",
            expected: model.n_corr_state(),
            got: eta.len(),
        });
    }
    let mut out = DMatrix::identity(n, n);
    for (s, engine) in model.engines.iter().enumerate() {
        let cell = &model.cells[s];
        let off = model.eta_offsets[s];
        let state = engine.reconstruct(eta.rows(off, cell.n_state()))?;
        let c = piece(&state);
        let range = cell.range();
        out.view_mut((range.start, range.start), (range.len(), range.len()))
            .copy_from(&c);
    }
    Ok(out)
}

impl CoreModel {
    /// Idiosyncratic correlation matrix at a log-domain state.
    pub fn residual_corr(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        dense_corr(self, eta)
    }

    /// Symmetric square root of the idiosyncratic correlation matrix at a
    /// state (block diagonal, so the root is assembled cell by cell).
    pub fn residual_corr_sqrt(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        dense_corr_fn(self, eta, |state| state.sqrt.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockcorr::Structure;
    use nalgebra::DVector;

    fn small_model(scaling: Scaling) -> CoreModel {
        // n = 4 assets in two groups of two (full block pattern), r = 2.
        let blocks = BlockSpec::single_sector(vec![2, 2], Structure::FullBlock).unwrap();
        let r = 2;
        let loading_dyn: Vec<ChannelDynamics> = (0..4)
            .map(|i| {
                let mean = DVector::from_vec(vec![0.3 + 0.05 * i as f64, -0.2 + 0.04 * i as f64]);
                ChannelDynamics::uniform(mean, 0.95, 0.03).unwrap()
            })
            .collect();
        let corr_dyn =
            ChannelDynamics::uniform(DVector::from_vec(vec![0.4, 0.1, 0.3]), 0.97, 0.04).unwrap();
        let tails = ConvolutionT::new(vec![2, 2], vec![8.0, 11.0]).unwrap();
        CoreModel::new(blocks, r, loading_dyn, corr_dyn, tails, scaling).unwrap()
    }

    fn observation() -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_vec(vec![0.6, -0.9, 1.4, 0.2]),
            DVector::from_vec(vec![0.8, -0.5]),
        )
    }

    fn states(model: &CoreModel) -> (Vec<DVector<f64>>, DVector<f64>) {
        let tau: Vec<DVector<f64>> =
            model.loading_dynamics().iter().map(|d| d.init()).collect();
        let eta = model.corr_dynamics().init();
        (tau, eta)
    }

    fn step_loglik(
        model: &CoreModel,
        tau: &[DVector<f64>],
        eta: &DVector<f64>,
        z: &DVector<f64>,
        u: &DVector<f64>,
    ) -> f64 {
        joint_score(model, tau, eta, z.as_view(), u.as_view())
            .unwrap()
            .loglik
    }

    #[test]
    fn loading_score_matches_finite_differences() {
        let model = small_model(Scaling::Identity);
        let (tau, eta) = states(&model);
        let (z, u) = observation();
        let score = joint_score(&model, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        let h = 1e-6;
        for i in 0..model.n() {
            for j in 0..model.r() {
                let mut up = tau.clone();
                up[i][j] += h;
                let mut dn = tau.clone();
                dn[i][j] -= h;
                let fd = (step_loglik(&model, &up, &eta, &z, &u)
                    - step_loglik(&model, &dn, &eta, &z, &u))
                    / (2.0 * h);
                let diff = (score.grad_tau[i][j] - fd).abs() / fd.abs().max(1.0);
                assert!(
                    diff < 1e-5,
                    "asset {i} channel {j}: analytic {} vs fd {}",
                    score.grad_tau[i][j],
                    fd
                );
            }
        }
    }

    #[test]
    fn correlation_score_matches_finite_differences() {
        let model = small_model(Scaling::Identity);
        let (tau, eta) = states(&model);
        let (z, u) = observation();
        let score = joint_score(&model, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        let h = 1e-6;
        for p in 0..eta.len() {
            let mut up = eta.clone();
            up[p] += h;
            let mut dn = eta.clone();
            dn[p] -= h;
            let fd = (step_loglik(&model, &tau, &up, &z, &u)
                - step_loglik(&model, &tau, &dn, &z, &u))
                / (2.0 * h);
            let diff = (score.grad_eta[p] - fd).abs() / fd.abs().max(1.0);
            assert!(
                diff < 1e-5,
                "channel {p}: analytic {} vs fd {}",
                score.grad_eta[p],
                fd
            );
        }
    }

    #[test]
    fn identity_scaling_returns_raw_score() {
        let model = small_model(Scaling::Identity);
        let (tau, eta) = states(&model);
        let (z, u) = observation();
        let score = joint_score(&model, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        for i in 0..model.n() {
            assert!((&score.eps_tau[i] - &score.grad_tau[i]).norm() < 1e-14);
        }
        assert!((&score.eps_eta - &score.grad_eta).norm() < 1e-14);
    }

    #[test]
    fn tikhonov_zero_equals_moore_penrose() {
        let mp = small_model(Scaling::MoorePenrose);
        let tk = small_model(Scaling::Tikhonov {
            lambda: vec![0.0; 4],
        });
        let (tau, eta) = states(&mp);
        let (z, u) = observation();
        let a = joint_score(&mp, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        let b = joint_score(&tk, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        for i in 0..mp.n() {
            assert!((&a.eps_tau[i] - &b.eps_tau[i]).norm() < 1e-10);
        }
        assert!((&a.eps_eta - &b.eps_eta).norm() < 1e-10);
    }

    #[test]
    fn filter_runs_and_accumulates_finite_likelihood() {
        use rand::SeedableRng;
        let model = small_model(Scaling::MoorePenrose);
        let t_len = 60;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let norm = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        };
        let u = DMatrix::from_fn(t_len, 2, |_, _| norm(&mut rng));
        let z = DMatrix::from_fn(t_len, 4, |_, _| norm(&mut rng));
        let out = filter_core_joint(&model, &z, &u, true).unwrap();
        assert!(out.loglik.is_finite());
        assert_eq!(out.stepwise.len(), t_len);
        assert!((out.loglik - out.stepwise.sum()).abs() < 1e-9);
        let tp = out.tau_path.unwrap();
        assert_eq!(tp.nrows(), t_len);
        // First-period state is the unconditional mean.
        assert!((tp[(0, 0)] - 0.3).abs() < 1e-12);
        // Residual identity at period 0: ê = (z − ρ'u)/ω with mean states.
        let ls = LoadingState::from_tau(DVector::from_vec(vec![0.3, -0.2])).unwrap();
        let expect = (z[(0, 0)] - ls.rho().dot(&u.row(0).transpose())) / ls.omega();
        assert!((out.residuals[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn static_joint_filter_matches_sum_of_static_densities() {
        // alpha = 0 everywhere: every period evaluates the same parameters,
        // so the filter total must equal the direct static sum.
        let blocks = BlockSpec::single_sector(vec![3], Structure::FullBlock).unwrap();
        let loading_dyn: Vec<ChannelDynamics> = (0..3)
            .map(|i| {
                ChannelDynamics::constant(DVector::from_vec(vec![0.25 + 0.1 * i as f64]))
            })
            .collect();
        let corr_dyn = ChannelDynamics::constant(DVector::from_vec(vec![0.35]));
        let tails = ConvolutionT::multivariate_t(3, 9.0).unwrap();
        let model = CoreModel::new(
            blocks,
            1,
            loading_dyn,
            corr_dyn,
            tails.clone(),
            Scaling::Identity,
        )
        .unwrap();
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let norm = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        };
        let t_len = 25;
        let u = DMatrix::from_fn(t_len, 1, |_, _| norm(&mut rng));
        let z = DMatrix::from_fn(t_len, 3, |_, _| norm(&mut rng));
        let out = filter_core_joint(&model, &z, &u, true).unwrap();

        // Direct evaluation: Ξ = Λ_ω C^{1/2} with everything constant.
        let corr = out.corr_path.as_ref().unwrap()[0].clone();
        let cm = crate::matcorr::CorrMatrix::new(corr).unwrap();
        let c_sqrt = crate::matcorr::sym_sqrt(&cm).unwrap();
        let mut lam = DMatrix::zeros(3, 3);
        let mut rho = DMatrix::zeros(3, 1);
        for i in 0..3 {
            let ls =
                LoadingState::from_tau(DVector::from_vec(vec![0.25 + 0.1 * i as f64])).unwrap();
            lam[(i, i)] = ls.omega();
            rho[(i, 0)] = ls.rho()[0];
        }
        let xi = &lam * &c_sqrt;
        let mut direct = 0.0;
        for t in 0..t_len {
            let mu = &rho * u.row(t).transpose();
            direct += convt::loglik(&z.row(t).transpose(), &mu, &xi, &tails).unwrap();
        }
        assert!(
            (out.loglik - direct).abs() < 1e-8,
            "filter {} vs direct {}",
            out.loglik,
            direct
        );
    }
}
