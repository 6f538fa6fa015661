//! Maximum-likelihood drivers for the correlation model family.
//!
//! Two estimation pipelines cover the core model `Z = ρ'U + Λ_ω e`:
//!
//! - [`fit_core_joint`] maximizes the full likelihood `ℓ(Z|U)` over every
//!   loading channel, correlation channel, and distribution parameter at
//!   once. Exact but only practical for moderate panel widths (`n ≤ 30`).
//! - [`fit_core_decoupled`] splits the problem: stage 1 fits each asset's
//!   loading recursion separately against a univariate-t quasi-likelihood
//!   (its own tail parameter `ν*_i` estimated per asset), then stage 2 fits
//!   the correlation dynamics of the standardized residuals
//!   `ê = (Z − ρ'U)/ω`, cell by cell when the tail partition allows it and
//!   globally otherwise. Scales to wide panels; the combined likelihood
//!   `ℓ(Z|U) = −Σ_t log|Λ_{ω,t}| + ℓ(ê)` is reported for comparison with
//!   the joint fit.
//!
//! [`fit_factor_model`] estimates the factor-correlation layer and emits
//! the whitened factor panel `U` both pipelines consume.
//! [`static_block_corr`] is the method-of-moments estimator of a constant
//! block-structured correlation matrix, used both on its own and as the
//! initializer of the dynamic fits. [`evaluate_oos`] filters a panel with
//! frozen parameters and splits the log-likelihood into in-sample and
//! holdout parts.
//!
//! All optimizations run a quasi-Newton search with finite-difference
//! gradients over an unconstrained reparametrization (`β = tanh`,
//! `α = softplus`, `ν = 2 + softplus`, `λ = exp`), multi-started over the
//! tail parameters. The objective is the mean per-observation negative
//! log-likelihood; convergence requires a relative improvement below `1e-8`
//! or a gradient norm below `1e-5` on that scale. Everything is
//! deterministic: the same data produce bit-identical reports.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::blockcorr::{
    eta_of_corr, BlockSpec, CanonicalBlock, CanonicalSpectrum, Structure,
};
use crate::convt::ConvolutionT;
use crate::error::{Error, Result};
use crate::indexmaps::vecl_len;
use crate::loadings::LoadingState;
use crate::matcorr::{gamma_of_corr, sym_eigen, CorrMatrix};
use crate::optim;
use crate::scoredriven::{
    cells_for, filter_core_joint, filter_factor_corr, filter_loading_decoupled,
    filter_residual_corr, CellKind, ChannelDynamics, CoreModel, CorrCell, FactorCorrModel,
    LoadingModel, ResidualCorrModel, Scaling,
};

// ===================================================================
// Requests: innovation family and scaling choice
// ===================================================================

/// Innovation family requested for a fit, before its parameters are known.
///
/// The tail partition this induces depends on the panel it is applied to:
/// [`DistSpec::Gaussian`] places one Gaussian group per correlation cell
/// (the partitions are equivalent, and this one keeps the joint filter's
/// cell factorization valid), [`DistSpec::PooledT`] one t group over all
/// coordinates, [`DistSpec::GroupedT`] one t group per listed cluster, and
/// [`DistSpec::PerCoordT`] an independent t tail per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistSpec {
    /// Gaussian innovations (no tail parameters).
    Gaussian,
    /// One multivariate-t group over every coordinate; a single `ν`.
    PooledT,
    /// Cluster-t: one group per entry of `sizes`, each with its own `ν`.
    GroupedT {
        /// Cluster sizes in coordinate order; must sum to the panel width.
        sizes: Vec<usize>,
    },
    /// Heterogeneous-t: one independent tail parameter per coordinate.
    PerCoordT,
}

impl DistSpec {
    /// Group sizes of the induced tail partition over `n` coordinates.
    /// `cell_sizes` carries the correlation-cell widths used for the
    /// Gaussian placement.
    pub fn group_sizes(&self, n: usize, cell_sizes: &[usize]) -> Result<Vec<usize>> {
        match self {
            DistSpec::Gaussian => {
                if cell_sizes.is_empty() {
                    Ok(vec![n])
                } else {
                    if cell_sizes.iter().sum::<usize>() != n {
                        return Err(Error::domain(
                            "correlation cells do not tile the panel".to_string(),
                        ));
                    }
                    Ok(cell_sizes.to_vec())
                }
            }
            DistSpec::PooledT => Ok(vec![n]),
            DistSpec::GroupedT { sizes } => {
                if sizes.iter().sum::<usize>() != n || sizes.iter().any(|&s| s == 0) {
                    return Err(Error::domain(format!(
                        "cluster sizes {sizes:?} do not tile a width-{n} panel"
                    )));
                }
                Ok(sizes.clone())
            }
            DistSpec::PerCoordT => Ok(vec![1; n]),
        }
    }

    /// Number of free tail parameters on a width-`n` panel.
    pub fn estimated_nu(&self, n: usize) -> usize {
        match self {
            DistSpec::Gaussian => 0,
            DistSpec::PooledT => 1,
            DistSpec::GroupedT { sizes } => sizes.len(),
            DistSpec::PerCoordT => n,
        }
    }

    fn has_nu(&self) -> bool {
        !matches!(self, DistSpec::Gaussian)
    }
}

/// Scaling of the loading-score innovation, before its parameters are
/// known. [`ScalingKind::Tikhonov`] estimates one ridge penalty `λ_i` per
/// asset alongside the other parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    /// Raw information-rescaled score.
    Identity,
    /// Moore–Penrose pseudo-inverse of the factor sensitivity.
    MoorePenrose,
    /// Ridge-regularized inverse with per-asset penalties.
    Tikhonov,
}

// ===================================================================
// Fitted-model representation (serializable)
// ===================================================================

/// Recursion coefficients of one dynamic parameter block, in plain vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsEstimate {
    /// Long-run mean per channel.
    pub mean: Vec<f64>,
    /// Persistence per channel, `|β| < 1`.
    pub beta: Vec<f64>,
    /// Score step size per channel, `α ≥ 0`.
    pub alpha: Vec<f64>,
}

impl DynamicsEstimate {
    fn from_dynamics(d: &ChannelDynamics) -> Self {
        DynamicsEstimate {
            mean: d.mean().iter().copied().collect(),
            beta: d.beta().iter().copied().collect(),
            alpha: d.alpha().iter().copied().collect(),
        }
    }

    /// Rebuilds the recursion, re-validating the coefficient ranges.
    pub fn to_dynamics(&self) -> Result<ChannelDynamics> {
        ChannelDynamics::new(
            DVector::from_vec(self.mean.clone()),
            DVector::from_vec(self.beta.clone()),
            DVector::from_vec(self.alpha.clone()),
        )
    }

    fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Tail partition with `None` marking a Gaussian (infinite-`ν`) group —
/// JSON cannot carry infinities, so absence encodes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    /// Group sizes in coordinate order.
    pub group_sizes: Vec<usize>,
    /// Tail parameter per group; `None` for a Gaussian group.
    pub nu: Vec<Option<f64>>,
}

impl TailEstimate {
    fn from_tails(t: &ConvolutionT) -> Self {
        TailEstimate {
            group_sizes: t.group_sizes().to_vec(),
            nu: t
                .nu()
                .iter()
                .map(|&v| if v.is_finite() { Some(v) } else { None })
                .collect(),
        }
    }

    /// Rebuilds the runtime tail partition.
    pub fn to_tails(&self) -> Result<ConvolutionT> {
        let nu = self
            .nu
            .iter()
            .map(|v| v.unwrap_or(f64::INFINITY))
            .collect::<Vec<_>>();
        ConvolutionT::new(self.group_sizes.clone(), nu)
    }

    fn finite_nu(&self) -> Vec<Option<f64>> {
        self.nu.clone()
    }
}

/// Fitted scaling, with estimated penalties where applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingEstimate {
    /// Raw information-rescaled score.
    Identity,
    /// Moore–Penrose pseudo-inverse scaling.
    MoorePenrose,
    /// Ridge scaling with the estimated log-penalties.
    Tikhonov {
        /// `log λ_i`, one per asset.
        log_lambda: Vec<f64>,
    },
}

impl ScalingEstimate {
    /// Rebuilds the runtime scaling over all assets.
    pub fn to_scaling(&self) -> Scaling {
        match self {
            ScalingEstimate::Identity => Scaling::Identity,
            ScalingEstimate::MoorePenrose => Scaling::MoorePenrose,
            ScalingEstimate::Tikhonov { log_lambda } => Scaling::Tikhonov {
                lambda: log_lambda.iter().map(|l| l.exp()).collect(),
            },
        }
    }

    /// Single-asset view of the scaling (for per-asset loading models).
    pub fn to_scaling_for(&self, asset: usize) -> Scaling {
        match self {
            ScalingEstimate::Identity => Scaling::Identity,
            ScalingEstimate::MoorePenrose => Scaling::MoorePenrose,
            ScalingEstimate::Tikhonov { log_lambda } => Scaling::Tikhonov {
                lambda: vec![log_lambda[asset].exp()],
            },
        }
    }

    fn log_lambda(&self) -> Option<Vec<f64>> {
        match self {
            ScalingEstimate::Tikhonov { log_lambda } => Some(log_lambda.clone()),
            _ => None,
        }
    }
}

/// A complete fitted model, sufficient to rebuild every filter it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedModel {
    /// Factor-correlation layer.
    Factor {
        /// Number of factors.
        r: usize,
        /// Log-domain correlation dynamics (`r(r−1)/2` channels).
        dynamics: DynamicsEstimate,
        /// Tail partition of the factor innovations.
        tails: TailEstimate,
    },
    /// Jointly estimated loadings + idiosyncratic correlation.
    CoreJoint {
        /// Block structure of the idiosyncratic correlation matrix.
        blocks: BlockSpec,
        /// Number of factors.
        r: usize,
        /// Per-asset loading dynamics (`r` channels each).
        loading_dynamics: Vec<DynamicsEstimate>,
        /// Correlation-coordinate dynamics (cells concatenated).
        corr_dynamics: DynamicsEstimate,
        /// Tail partition of the idiosyncratic innovations.
        tails: TailEstimate,
        /// Loading-score scaling.
        scaling: ScalingEstimate,
    },
    /// Decoupled two-stage estimate.
    CoreDecoupled {
        /// Block structure of the idiosyncratic correlation matrix.
        blocks: BlockSpec,
        /// Number of factors.
        r: usize,
        /// Per-asset loading dynamics (`r` channels each).
        loading_dynamics: Vec<DynamicsEstimate>,
        /// Per-asset marginal tail parameter of the stage-1
        /// quasi-likelihood; `None` for a Gaussian marginal.
        loading_nu: Vec<Option<f64>>,
        /// Loading-score scaling.
        scaling: ScalingEstimate,
        /// Residual correlation dynamics (cells concatenated).
        corr_dynamics: DynamicsEstimate,
        /// Tail partition of the residual innovations.
        corr_tails: TailEstimate,
    },
}

impl FittedModel {
    /// Rebuilds the factor filter model (factor fits only).
    pub fn factor_model(&self) -> Result<FactorCorrModel> {
        match self {
            FittedModel::Factor { dynamics, tails, .. } => {
                FactorCorrModel::new(dynamics.to_dynamics()?, tails.to_tails()?)
            }
            _ => Err(Error::Unsupported(
                "not a factor-model fit".to_string(),
            )),
        }
    }

    /// Rebuilds the joint core filter model (joint fits only).
    pub fn core_model(&self) -> Result<CoreModel> {
        match self {
            FittedModel::CoreJoint {
                blocks,
                r,
                loading_dynamics,
                corr_dynamics,
                tails,
                scaling,
            } => CoreModel::new(
                blocks.clone(),
                *r,
                loading_dynamics
                    .iter()
                    .map(|d| d.to_dynamics())
                    .collect::<Result<Vec<_>>>()?,
                corr_dynamics.to_dynamics()?,
                tails.to_tails()?,
                scaling.to_scaling(),
            ),
            _ => Err(Error::Unsupported(
                "not a jointly estimated core fit".to_string(),
            )),
        }
    }

    /// Rebuilds the per-asset loading filters (decoupled fits only).
    pub fn loading_models(&self) -> Result<Vec<LoadingModel>> {
        match self {
            FittedModel::CoreDecoupled {
                loading_dynamics,
                loading_nu,
                scaling,
                ..
            } => loading_dynamics
                .iter()
                .zip(loading_nu)
                .enumerate()
                .map(|(i, (d, nu))| {
                    LoadingModel::new(
                        d.to_dynamics()?,
                        nu.unwrap_or(f64::INFINITY),
                        scaling.to_scaling_for(i),
                    )
                })
                .collect(),
            _ => Err(Error::Unsupported(
                "not a decoupled core fit".to_string(),
            )),
        }
    }

    /// Rebuilds the residual-correlation filter (decoupled fits only).
    pub fn residual_model(&self) -> Result<ResidualCorrModel> {
        match self {
            FittedModel::CoreDecoupled {
                blocks,
                corr_dynamics,
                corr_tails,
                ..
            } => ResidualCorrModel::new(
                blocks.clone(),
                corr_dynamics.to_dynamics()?,
                corr_tails.to_tails()?,
                true,
            ),
            _ => Err(Error::Unsupported(
                "not a decoupled core fit".to_string(),
            )),
        }
    }
}

// ===================================================================
// Reports
// ===================================================================

/// Channel-averaged recursion coefficients, as the summary tables print
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsSummary {
    /// Mean of the channel means.
    pub mu_mean: f64,
    /// Mean persistence.
    pub beta_mean: f64,
    /// Mean step size.
    pub alpha_mean: f64,
}

fn summarize<'a>(dyns: impl IntoIterator<Item = &'a DynamicsEstimate>) -> Option<DynamicsSummary> {
    let mut mu = 0.0;
    let mut beta = 0.0;
    let mut alpha = 0.0;
    let mut count = 0usize;
    for d in dyns {
        for k in 0..d.dim() {
            mu += d.mean[k];
            beta += d.beta[k];
            alpha += d.alpha[k];
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let c = count as f64;
    Some(DynamicsSummary {
        mu_mean: mu / c,
        beta_mean: beta / c,
        alpha_mean: alpha / c,
    })
}

/// Optimizer diagnostics of one fit (stage totals for multi-stage fits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    /// All component optimizations met a tolerance (not a budget).
    pub converged: bool,
    /// Total quasi-Newton iterations.
    pub iterations: usize,
    /// Total objective evaluations.
    pub evals: usize,
    /// Largest final gradient infinity-norm (mean per-observation scale).
    pub grad_norm: f64,
}

/// A maximum-likelihood fit: the model, its likelihood accounting, and the
/// coefficient summaries the comparison tables print.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// The fitted model in rebuildable form.
    pub model: FittedModel,
    /// Number of observations the fit used.
    pub t_len: usize,
    /// Number of free parameters.
    pub n_params: usize,
    /// Maximized log-likelihood (total, not per observation).
    pub loglik: f64,
    /// `−2ℓ + p·log T`.
    pub bic: f64,
    /// Channel-averaged loading dynamics (core fits).
    pub loading_summary: Option<DynamicsSummary>,
    /// Channel-averaged correlation dynamics.
    pub corr_summary: Option<DynamicsSummary>,
    /// Innovation tail parameters per group (`None` = Gaussian).
    pub nu: Vec<Option<f64>>,
    /// Mean of the finite tail parameters.
    pub nu_mean: Option<f64>,
    /// Per-asset marginal tail parameters of the decoupled stage 1.
    pub loading_nu: Option<Vec<Option<f64>>>,
    /// Estimated ridge log-penalties per asset (Tikhonov scaling).
    pub log_lambda: Option<Vec<f64>>,
    /// Optimizer diagnostics.
    pub convergence: Convergence,
}

/// Split log-likelihood of a frozen model filtered through a full panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OosReport {
    /// First holdout row (number of in-sample rows).
    pub split_index: usize,
    /// In-sample length.
    pub t_in: usize,
    /// Holdout length.
    pub t_oos: usize,
    /// Log-likelihood summed over the in-sample rows.
    pub loglik_in: f64,
    /// Log-likelihood summed over the holdout rows; `0` when empty.
    pub loglik_oos: f64,
}

/// Budgets and starting values of the fit drivers. Convergence tolerances
/// are fixed (relative improvement `1e-8`, gradient norm `1e-5` on the
/// mean per-observation scale).
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Quasi-Newton iteration cap per optimization.
    pub max_iters: usize,
    /// Objective-evaluation cap per optimization.
    pub max_evals: usize,
    /// Tail-parameter starting values (multi-start).
    pub nu_starts: Vec<f64>,
    /// Persistence starting value.
    pub beta_start: f64,
    /// Step-size starting value.
    pub alpha_start: f64,
    /// Warm start: resume from a previously fitted model of the same shape.
    pub warm_start: Option<FittedModel>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 300,
            max_evals: 120_000,
            nu_starts: vec![5.0, 8.0, 20.0],
            beta_start: 0.95,
            alpha_start: 0.02,
            warm_start: None,
        }
    }
}

impl FitOptions {
    fn optim_options(&self) -> optim::Options {
        optim::Options {
            max_iters: self.max_iters,
            max_evals: self.max_evals,
            rel_tol: 1e-8,
            grad_tol: 1e-5,
            ..optim::Options::default()
        }
    }
}

/// Bayesian information criterion `−2ℓ + p·log T`.
pub fn bic(loglik: f64, n_params: usize, t_len: usize) -> f64 {
    -2.0 * loglik + (n_params as f64) * (t_len as f64).ln()
}

// ===================================================================
// Unconstrained reparametrization
// ===================================================================

const BETA_CAP: f64 = 1.0 - 1e-8;
const LOG_LAMBDA_CAP: f64 = 40.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).max(f64::MIN_POSITIVE).ln()
    }
}

fn beta_of(raw: f64) -> f64 {
    raw.tanh().clamp(-BETA_CAP, BETA_CAP)
}

fn raw_of_beta(beta: f64) -> f64 {
    beta.clamp(-BETA_CAP, BETA_CAP).atanh()
}

fn alpha_of(raw: f64) -> f64 {
    softplus(raw)
}

fn raw_of_alpha(alpha: f64) -> f64 {
    softplus_inv(alpha.max(1e-8))
}

fn nu_of(raw: f64) -> f64 {
    2.0 + softplus(raw)
}

fn raw_of_nu(nu: f64) -> f64 {
    softplus_inv((nu - 2.0).max(1e-6))
}

/// Appends `[mean…, raw β…, raw α…]` for one dynamics block.
fn push_dynamics(theta: &mut Vec<f64>, mean: &DVector<f64>, beta: f64, alpha: f64) {
    for v in mean.iter() {
        theta.push(*v);
    }
    for _ in 0..mean.len() {
        theta.push(raw_of_beta(beta));
    }
    for _ in 0..mean.len() {
        theta.push(raw_of_alpha(alpha));
    }
}

/// Appends a fitted dynamics block (channel-wise coefficients preserved).
fn push_dynamics_exact(theta: &mut Vec<f64>, d: &DynamicsEstimate) {
    for v in &d.mean {
        theta.push(*v);
    }
    for v in &d.beta {
        theta.push(raw_of_beta(*v));
    }
    for v in &d.alpha {
        theta.push(raw_of_alpha(*v));
    }
}

/// Reads one dynamics block of `d` channels starting at `*pos`.
fn read_dynamics(theta: &DVector<f64>, pos: &mut usize, d: usize) -> Result<ChannelDynamics> {
    let mean = DVector::from_fn(d, |k, _| theta[*pos + k]);
    let beta = DVector::from_fn(d, |k, _| beta_of(theta[*pos + d + k]));
    let alpha = DVector::from_fn(d, |k, _| alpha_of(theta[*pos + 2 * d + k]));
    *pos += 3 * d;
    ChannelDynamics::new(mean, beta, alpha)
}

fn read_nus(theta: &DVector<f64>, pos: &mut usize, count: usize) -> Vec<f64> {
    let out = (0..count).map(|k| nu_of(theta[*pos + k])).collect();
    *pos += count;
    out
}

// ===================================================================
// Parameter accounting
// ===================================================================

/// Correlation state channels of a block structure (cells concatenated).
pub fn corr_state_len(blocks: &BlockSpec) -> Result<usize> {
    Ok(cells_for(blocks)?.iter().map(|c| c.n_state()).sum())
}

/// Free-parameter count of the factor-correlation model: three recursion
/// coefficients per correlation channel plus the tail parameters.
pub fn factor_param_count(r: usize, dist: &DistSpec) -> usize {
    3 * vecl_len(r) + dist.estimated_nu(r)
}

/// Free-parameter count of the jointly estimated core model: three
/// coefficients per loading channel and per correlation channel, the tail
/// parameters, and one ridge penalty per asset under Tikhonov scaling.
pub fn core_param_count(
    blocks: &BlockSpec,
    r: usize,
    dist: &DistSpec,
    scaling: ScalingKind,
) -> Result<usize> {
    let n = blocks.n();
    let q = corr_state_len(blocks)?;
    let lambda = if scaling == ScalingKind::Tikhonov { n } else { 0 };
    Ok(3 * (n * r + q) + dist.estimated_nu(n) + lambda)
}

/// Free-parameter count of one stage-1 loading fit: three coefficients per
/// factor channel, the marginal tail parameter when the innovation family
/// is non-Gaussian, and the ridge penalty under Tikhonov scaling.
pub fn loading_param_count(r: usize, t_marginal: bool, scaling: ScalingKind) -> usize {
    3 * r + usize::from(t_marginal) + usize::from(scaling == ScalingKind::Tikhonov)
}

/// Free-parameter count of the stage-2 residual-correlation fit.
pub fn residual_param_count(blocks: &BlockSpec, dist: &DistSpec) -> Result<usize> {
    Ok(3 * corr_state_len(blocks)? + dist.estimated_nu(blocks.n()))
}

/// Total free-parameter count of the decoupled pipeline (stage-1 fits plus
/// the stage-2 fit).
pub fn decoupled_param_count(
    blocks: &BlockSpec,
    r: usize,
    dist: &DistSpec,
    scaling: ScalingKind,
) -> Result<usize> {
    let per_asset = loading_param_count(r, dist.has_nu(), scaling);
    Ok(blocks.n() * per_asset + residual_param_count(blocks, dist)?)
}

// ===================================================================
// Static method-of-moments estimator
// ===================================================================

/// Sample correlation matrix of a panel (columns are series).
fn sample_corr(panel: &DMatrix<f64>) -> DMatrix<f64> {
    let t_len = panel.nrows();
    let n = panel.ncols();
    let tf = t_len as f64;
    let means = DVector::from_fn(n, |j, _| panel.column(j).sum() / tf);
    let mut cov: DMatrix<f64> = DMatrix::zeros(n, n);
    for t in 0..t_len {
        for i in 0..n {
            let xi = panel[(t, i)] - means[i];
            for j in 0..=i {
                cov[(i, j)] += xi * (panel[(t, j)] - means[j]);
            }
        }
    }
    let mut corr = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let denom = (cov[(i, i)] * cov[(j, j)]).sqrt();
            let v = if denom > 0.0 { cov[(i, j)] / denom } else { 0.0 };
            corr[(i, j)] = v;
            corr[(j, i)] = v;
        }
    }
    corr
}

const EIG_FLOOR: f64 = 1e-6;

/// Projects a sample correlation matrix onto the block pattern by averaging
/// within each block cell, repairing positive definiteness by flooring the
/// canonical-form eigenvalues when needed. Returns the matrix and whether a
/// repair was applied.
pub(crate) fn block_average_corr(
    r_hat: &DMatrix<f64>,
    blocks: &BlockSpec,
) -> Result<(CorrMatrix, bool)> {
    let n = blocks.n();
    if r_hat.nrows() != n || r_hat.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "sample correlation dimension",
            expected: n,
            got: r_hat.nrows(),
        });
    }

    if blocks.structure == Structure::Unrestricted {
        // No averaging: repair the sample matrix itself if necessary.
        let (q, eigs) = sym_eigen(r_hat);
        if eigs.iter().all(|&l| l > EIG_FLOOR) {
            return Ok((CorrMatrix::new(r_hat.clone())?, false));
        }
        let floored = DVector::from_fn(n, |k, _| eigs[k].max(EIG_FLOOR));
        let mut c = &q * DMatrix::from_diagonal(&floored) * q.transpose();
        let d = DVector::from_fn(n, |i, _| c[(i, i)].sqrt());
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] /= d[i] * d[j];
            }
            c[(i, i)] = 1.0;
        }
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (c[(i, j)] + c[(j, i)]);
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        return Ok((CorrMatrix::new(c)?, true));
    }

    // Average the sample correlation within each admitted block cell.
    let k = blocks.n_groups();
    let ranges = blocks.group_ranges();
    let sector = blocks.sector_of_group.clone();
    let mut rho = DMatrix::zeros(k, k);
    for a in 0..k {
        let ra = ranges[a].clone();
        // Within-group average (zero for singleton groups).
        if ra.len() > 1 {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for i in ra.clone() {
                for j in ra.clone() {
                    if i > j {
                        acc += r_hat[(i, j)];
                        cnt += 1.0;
                    }
                }
            }
            rho[(a, a)] = acc / cnt;
        }
        for b in 0..a {
            let admitted = match blocks.structure {
                Structure::FullBlock => true,
                Structure::SparseBlock => sector[a] == sector[b],
                Structure::DiagonalBlock => false,
                Structure::Unrestricted => unreachable!(),
            };
            if !admitted {
                continue;
            }
            let rb = ranges[b].clone();
            let mut acc = 0.0;
            for i in ra.clone() {
                for j in rb.clone() {
                    acc += r_hat[(i, j)];
                }
            }
            let v = acc / (ra.len() * rb.len()) as f64;
            rho[(a, b)] = v;
            rho[(b, a)] = v;
        }
    }

    // Canonical form: A_kk = 1 + (n_k − 1)ϱ_kk, A_kl = ϱ_kl √(n_k n_l),
    // δ_k = 1 − ϱ_kk. Positive definiteness of the block matrix is
    // equivalent to A ≻ 0 and δ_k > 0.
    let sizes: Vec<f64> = blocks.group_sizes.iter().map(|&s| s as f64).collect();
    let mut a_mat = DMatrix::zeros(k, k);
    let mut delta = vec![0.0; k];
    for a in 0..k {
        a_mat[(a, a)] = 1.0 + (sizes[a] - 1.0) * rho[(a, a)];
        delta[a] = 1.0 - rho[(a, a)];
        for b in 0..a {
            let v = rho[(a, b)] * (sizes[a] * sizes[b]).sqrt();
            a_mat[(a, b)] = v;
            a_mat[(b, a)] = v;
        }
    }
    let (q_a, eigs) = sym_eigen(&a_mat);
    let pd = eigs.iter().all(|&l| l > EIG_FLOOR) && delta.iter().all(|&d| d > EIG_FLOOR);
    let repaired = !pd;
    if repaired {
        let floored = DVector::from_fn(k, |i, _| eigs[i].max(EIG_FLOOR));
        a_mat = &q_a * DMatrix::from_diagonal(&floored) * q_a.transpose();
        for d in delta.iter_mut() {
            *d = d.max(EIG_FLOOR);
        }
    }
    let canonical = CanonicalBlock {
        a: a_mat,
        delta,
    };
    let spectrum = CanonicalSpectrum::new(&canonical, blocks)?;
    let mut c = spectrum.corr_dense(blocks);
    if repaired {
        // Flooring can push group diagonals off 1; renormalize per group,
        // which preserves both block constancy and positive definiteness.
        let d = DVector::from_fn(n, |i, _| c[(i, i)].sqrt());
        for i in 0..n {
            for j in 0..n {
                c[(i, j)] /= d[i] * d[j];
            }
        }
    }
    for i in 0..n {
        c[(i, i)] = 1.0;
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok((CorrMatrix::new(c)?, repaired))
}

/// Method-of-moments estimate of a constant block-structured correlation
/// matrix: the sample correlation of the panel, averaged within each block
/// cell admitted by the structure (out-of-pattern cells are zero). The
/// returned flag marks a positive-definiteness repair (canonical-form
/// eigenvalue floor followed by per-group renormalization).
pub fn static_block_corr(
    panel: &DMatrix<f64>,
    blocks: &BlockSpec,
) -> Result<(CorrMatrix, bool)> {
    if panel.ncols() != blocks.n() {
        return Err(Error::DimensionMismatch {
            what: "residual panel columns",
            expected: blocks.n(),
            got: panel.ncols(),
        });
    }
    let max_block = match blocks.structure {
        Structure::Unrestricted => blocks.n(),
        _ => blocks.group_sizes.iter().copied().max().unwrap_or(1),
    };
    if panel.nrows() <= max_block {
        return Err(Error::domain(format!(
            "panel length {} must exceed the largest block size {max_block}",
            panel.nrows()
        )));
    }
    if panel.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("residual panel has non-finite entries"));
    }
    block_average_corr(&sample_corr(panel), blocks)
}

/// Presentation helper: zeroes off-diagonal entries below `threshold` in
/// absolute value. The result is for display only and need not be positive
/// definite.
pub fn display_truncate(c: &CorrMatrix, threshold: f64) -> DMatrix<f64> {
    let mut out = c.values().clone();
    let n = out.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && out[(i, j)].abs() < threshold {
                out[(i, j)] = 0.0;
            }
        }
    }
    out
}

// ===================================================================
// Initializers
// ===================================================================

/// Per-asset least-squares loading fit `ρ̂_i = (U'U)⁻¹U'z_i` (norm-clipped
/// into the admissible ball) and the implied standardized residuals.
fn static_loading_init(
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    let n = z.ncols();
    let r = u.ncols();
    let t_len = z.nrows();
    let gram = u.transpose() * u;
    let chol = gram.clone().cholesky();
    let mut taus = Vec::with_capacity(n);
    let mut resid = DMatrix::zeros(t_len, n);
    for i in 0..n {
        let zi = z.column(i).clone_owned();
        let mut rho = match &chol {
            Some(c) => c.solve(&(u.transpose() * &zi)),
            None => DVector::zeros(r),
        };
        let norm = rho.norm();
        if !norm.is_finite() {
            rho = DVector::zeros(r);
        } else if norm > 0.97 {
            rho *= 0.97 / norm;
        }
        let state = LoadingState::from_rho(rho.clone())?;
        taus.push(state.tau().clone());
        let omega = state.omega();
        for t in 0..t_len {
            resid[(t, i)] = (z[(t, i)] - rho.dot(&u.row(t).transpose())) / omega;
        }
    }
    Ok((taus, resid))
}

/// Per-cell log-domain coordinates of a static correlation matrix, in the
/// cell concatenation order the dynamic state uses.
fn eta_init_from_corr(c: &CorrMatrix, cells: &[CorrCell]) -> Result<DVector<f64>> {
    let mut out = Vec::new();
    for cell in cells {
        let range = cell.range();
        let m = range.len();
        let sub = c.values().view((range.start, range.start), (m, m)).into_owned();
        match &cell.kind {
            CellKind::Dense { .. } => {
                if m > 1 {
                    let gamma = gamma_of_corr(&CorrMatrix::new(sub)?)?;
                    out.extend(gamma.values.iter().copied());
                }
            }
            CellKind::Block { spec } => {
                let eta = eta_of_corr(&CorrMatrix::new(sub)?, spec)?;
                out.extend(eta.iter().copied());
            }
        }
    }
    Ok(DVector::from_vec(out))
}

// ===================================================================
// Shared optimization driver
// ===================================================================

struct RunStats {
    converged: bool,
    iterations: usize,
    evals: usize,
    grad_norm: f64,
}

impl RunStats {
    fn none() -> Self {
        RunStats {
            converged: true,
            iterations: 0,
            evals: 0,
            grad_norm: 0.0,
        }
    }

    fn absorb(&mut self, other: &RunStats) {
        self.converged &= other.converged;
        self.iterations += other.iterations;
        self.evals += other.evals;
        self.grad_norm = self.grad_norm.max(other.grad_norm);
    }
}

/// Minimizes `f` from each start, keeping the best point; totals the
/// bookkeeping across starts. Errors when no start produced a finite value.
fn optimize_starts<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    starts: &[DVector<f64>],
    opts: &optim::Options,
    what: &'static str,
) -> Result<(DVector<f64>, RunStats)> {
    let mut best: Option<optim::Outcome> = None;
    let mut stats = RunStats {
        converged: true,
        iterations: 0,
        evals: 0,
        grad_norm: 0.0,
    };
    for x0 in starts {
        let out = optim::minimize(&mut f, x0, opts);
        stats.iterations += out.iterations;
        stats.evals += out.evals;
        let better = match &best {
            None => true,
            Some(b) => out.value < b.value,
        };
        if better {
            best = Some(out);
        }
    }
    let best = best.expect("at least one start");
    stats.converged = best.converged;
    stats.grad_norm = best.grad_norm;
    if !best.value.is_finite() {
        return Err(Error::NoConvergence {
            what,
            iterations: stats.iterations,
            residual: best.value,
        });
    }
    Ok((best.x, stats))
}

fn nu_start_list(opts: &FitOptions) -> Vec<f64> {
    if opts.nu_starts.is_empty() {
        vec![8.0]
    } else {
        opts.nu_starts.clone()
    }
}

fn check_panel(name: &'static str, panel: &DMatrix<f64>, min_rows: usize) -> Result<()> {
    if panel.nrows() < min_rows {
        return Err(Error::domain(format!(
            "{name}: need at least {min_rows} rows, got {}",
            panel.nrows()
        )));
    }
    if panel.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(format!("{name}: non-finite entries")));
    }
    Ok(())
}

const MIN_FIT_ROWS: usize = 20;

// ===================================================================
// Factor-model fit
// ===================================================================

/// Fits the factor-correlation layer to a standardized factor panel and
/// returns the report together with the whitened panel
/// `U_t = C_{F,t}^{-1/2} F_t`.
pub fn fit_factor_model(
    f: &DMatrix<f64>,
    dist: &DistSpec,
    opts: &FitOptions,
) -> Result<(FitReport, DMatrix<f64>)> {
    check_panel("factor panel", f, MIN_FIT_ROWS)?;
    let r = f.ncols();
    if r == 0 {
        return Err(Error::domain("factor panel has no columns"));
    }
    let t_len = f.nrows();
    let d = vecl_len(r);
    let sizes = dist.group_sizes(r, &[])?;
    let n_nu = dist.estimated_nu(r);

    // Static initialization: log-domain coordinates of the (possibly
    // shrunk) sample correlation matrix.
    let gamma0 = {
        let r_hat = sample_corr(f);
        let mut gamma = DVector::zeros(d);
        for s in [0.0, 0.02, 0.05, 0.1, 0.25, 0.5] {
            let shrunk = &r_hat * (1.0 - s) + DMatrix::<f64>::identity(r, r) * s;
            if let Ok(c) = CorrMatrix::new(shrunk) {
                if let Ok(g) = gamma_of_corr(&c) {
                    gamma = g.values;
                    break;
                }
            }
        }
        gamma
    };

    let mut theta0 = Vec::new();
    match &opts.warm_start {
        Some(FittedModel::Factor { dynamics, tails, .. })
            if dynamics.dim() == d && tails.group_sizes == sizes =>
        {
            push_dynamics_exact(&mut theta0, dynamics);
        }
        _ => push_dynamics(&mut theta0, &gamma0, opts.beta_start, opts.alpha_start),
    }

    let decode = |theta: &DVector<f64>| -> Result<FactorCorrModel> {
        let mut pos = 0;
        let dynamics = read_dynamics(theta, &mut pos, d)?;
        let nus = read_nus(theta, &mut pos, n_nu);
        let tails = match dist {
            DistSpec::Gaussian => ConvolutionT::gaussian(r),
            _ => ConvolutionT::new(sizes.clone(), nus)?,
        };
        FactorCorrModel::new(dynamics, tails)
    };

    let scale = 1.0 / t_len as f64;
    let mut objective = |theta: &DVector<f64>| -> f64 {
        match decode(theta).and_then(|m| filter_factor_corr(&m, f, false)) {
            Ok(out) => -out.loglik * scale,
            Err(_) => f64::INFINITY,
        }
    };

    let starts: Vec<DVector<f64>> = if n_nu == 0 {
        vec![DVector::from_vec(theta0.clone())]
    } else {
        nu_start_list(opts)
            .iter()
            .map(|&nu0| {
                let mut th = theta0.clone();
                th.extend(std::iter::repeat_n(raw_of_nu(nu0), n_nu));
                DVector::from_vec(th)
            })
            .collect()
    };

    let p = factor_param_count(r, dist);
    let (best, stats) = if p == 0 {
        (starts[0].clone(), RunStats::none())
    } else {
        optimize_starts(
            &mut objective,
            &starts,
            &opts.optim_options(),
            "factor-correlation likelihood",
        )?
    };

    let model = decode(&best)?;
    let out = filter_factor_corr(&model, f, false)?;
    let dynamics = DynamicsEstimate::from_dynamics(model.dynamics());
    let tails = TailEstimate::from_tails(model.tails());
    let nu = tails.finite_nu();
    let report = FitReport {
        t_len,
        n_params: p,
        loglik: out.loglik,
        bic: bic(out.loglik, p, t_len),
        loading_summary: None,
        corr_summary: summarize([&dynamics]),
        nu_mean: nu_mean_of(&nu),
        nu,
        loading_nu: None,
        log_lambda: None,
        convergence: Convergence {
            converged: stats.converged,
            iterations: stats.iterations,
            evals: stats.evals,
            grad_norm: stats.grad_norm,
        },
        model: FittedModel::Factor {
            r,
            dynamics,
            tails,
        },
    };
    Ok((report, out.u))
}

fn nu_mean_of(nu: &[Option<f64>]) -> Option<f64> {
    let finite: Vec<f64> = nu.iter().flatten().copied().collect();
    if finite.is_empty() {
        None
    } else {
        Some(finite.iter().sum::<f64>() / finite.len() as f64)
    }
}

// ===================================================================
// Joint core fit
// ===================================================================

/// Dense-work width cap for the joint estimator.
pub const JOINT_N_CAP: usize = 30;

/// Jointly fits every loading recursion, the idiosyncratic correlation
/// dynamics, and the distribution parameters by full maximum likelihood.
///
/// The width guard (`n ≤ `[`JOINT_N_CAP`]) rejects panels too wide for the
/// dense joint optimization; use the decoupled estimator there. The tail
/// partition must nest within the structure's correlation cells, which a
/// globally pooled t family on a multi-cell structure does not — that case
/// is also directed to the decoupled estimator.
pub fn fit_core_joint(
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    blocks: &BlockSpec,
    dist: &DistSpec,
    scaling: ScalingKind,
    opts: &FitOptions,
) -> Result<FitReport> {
    let n = blocks.n();
    if n > JOINT_N_CAP {
        return Err(Error::Unsupported(format!(
            "joint estimation is limited to {JOINT_N_CAP} assets (got {n}); \
             use the decoupled estimator for wide panels"
        )));
    }
    check_panel("return panel", z, MIN_FIT_ROWS)?;
    check_panel("factor panel", u, MIN_FIT_ROWS)?;
    if z.nrows() != u.nrows() {
        return Err(Error::DimensionMismatch {
            what: "panel row counts",
            expected: z.nrows(),
            got: u.nrows(),
        });
    }
    if z.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "return panel columns",
            expected: n,
            got: z.ncols(),
        });
    }
    let r = u.ncols();
    let t_len = z.nrows();
    let cells = cells_for(blocks)?;
    let cell_sizes: Vec<usize> = cells.iter().map(|c| c.n()).collect();
    let q: usize = cells.iter().map(|c| c.n_state()).sum();
    let sizes = dist.group_sizes(n, &cell_sizes)?;
    let n_nu = dist.estimated_nu(n);
    let tikhonov = scaling == ScalingKind::Tikhonov;

    // Starting point: warm start when the shapes line up, otherwise static
    // least-squares loadings and the method-of-moments block matrix.
    let mut theta0 = Vec::new();
    let mut warm = false;
    if let Some(FittedModel::CoreJoint {
        blocks: wb,
        r: wr,
        loading_dynamics,
        corr_dynamics,
        tails,
        scaling: wsc,
    }) = &opts.warm_start
    {
        if wb == blocks && *wr == r && tails.group_sizes == sizes {
            for d in loading_dynamics {
                push_dynamics_exact(&mut theta0, d);
            }
            push_dynamics_exact(&mut theta0, corr_dynamics);
            for nu in tails.nu.iter().flatten() {
                theta0.push(raw_of_nu(*nu));
            }
            if tikhonov {
                let ll = wsc
                    .log_lambda()
                    .unwrap_or_else(|| vec![0.0; n]);
                theta0.extend(ll.iter().map(|l| l.clamp(-LOG_LAMBDA_CAP, LOG_LAMBDA_CAP)));
            }
            warm = true;
        }
    }
    if !warm {
        let (taus, resid) = static_loading_init(z, u)?;
        let (c_static, _) = static_block_corr(&resid, blocks)?;
        let eta0 = eta_init_from_corr(&c_static, &cells)?;
        for tau in &taus {
            push_dynamics(&mut theta0, tau, opts.beta_start, opts.alpha_start);
        }
        push_dynamics(&mut theta0, &eta0, opts.beta_start, opts.alpha_start);
        // ν̂ slots appended per start below.
        if tikhonov {
            theta0.extend(std::iter::repeat_n(0.0, n));
        }
    }

    // Pre-validate the model shape once so structural errors (e.g. a tail
    // group straddling correlation cells) surface as errors rather than as
    // an everywhere-infinite objective.
    let nu_slot = 3 * (n * r + q);
    let decode = |theta: &DVector<f64>| -> Result<CoreModel> {
        let mut pos = 0;
        let mut loading_dyn = Vec::with_capacity(n);
        for _ in 0..n {
            loading_dyn.push(read_dynamics(theta, &mut pos, r)?);
        }
        let corr_dyn = read_dynamics(theta, &mut pos, q)?;
        let nus = read_nus(theta, &mut pos, n_nu);
        let tails = if dist.has_nu() {
            ConvolutionT::new(sizes.clone(), nus)?
        } else {
            ConvolutionT::new(sizes.clone(), vec![f64::INFINITY; sizes.len()])?
        };
        let sc = match scaling {
            ScalingKind::Identity => Scaling::Identity,
            ScalingKind::MoorePenrose => Scaling::MoorePenrose,
            ScalingKind::Tikhonov => Scaling::Tikhonov {
                lambda: (0..n)
                    .map(|i| theta[pos + i].clamp(-LOG_LAMBDA_CAP, LOG_LAMBDA_CAP).exp())
                    .collect(),
            },
        };
        CoreModel::new(blocks.clone(), r, loading_dyn, corr_dyn, tails, sc)
    };

    let p = core_param_count(blocks, r, dist, scaling)?;
    let starts: Vec<DVector<f64>> = if !warm && n_nu > 0 {
        nu_start_list(opts)
            .iter()
            .map(|&nu0| {
                let mut th = theta0.clone();
                let lambda_tail: Vec<f64> = th.split_off(nu_slot);
                th.extend(std::iter::repeat_n(raw_of_nu(nu0), n_nu));
                th.extend(lambda_tail);
                DVector::from_vec(th)
            })
            .collect()
    } else {
        vec![DVector::from_vec(theta0)]
    };
    decode(&starts[0])?;

    let scale = 1.0 / t_len as f64;
    let mut objective = |theta: &DVector<f64>| -> f64 {
        match decode(theta).and_then(|m| filter_core_joint(&m, z, u, false)) {
            Ok(out) => -out.loglik * scale,
            Err(_) => f64::INFINITY,
        }
    };
    let (best, stats) = optimize_starts(
        &mut objective,
        &starts,
        &opts.optim_options(),
        "joint core likelihood",
    )?;

    let model = decode(&best)?;
    let out = filter_core_joint(&model, z, u, false)?;
    let loading_dynamics: Vec<DynamicsEstimate> = model
        .loading_dynamics()
        .iter()
        .map(DynamicsEstimate::from_dynamics)
        .collect();
    let corr_dynamics = DynamicsEstimate::from_dynamics(model.corr_dynamics());
    let tails = TailEstimate::from_tails(model.tails());
    let scaling_est = match model.scaling() {
        Scaling::Identity => ScalingEstimate::Identity,
        Scaling::MoorePenrose => ScalingEstimate::MoorePenrose,
        Scaling::Tikhonov { lambda } => ScalingEstimate::Tikhonov {
            log_lambda: lambda.iter().map(|l| l.ln()).collect(),
        },
    };
    let nu = tails.finite_nu();
    Ok(FitReport {
        t_len,
        n_params: p,
        loglik: out.loglik,
        bic: bic(out.loglik, p, t_len),
        loading_summary: summarize(loading_dynamics.iter()),
        corr_summary: summarize([&corr_dynamics]),
        nu_mean: nu_mean_of(&nu),
        nu,
        loading_nu: None,
        log_lambda: scaling_est.log_lambda(),
        convergence: Convergence {
            converged: stats.converged,
            iterations: stats.iterations,
            evals: stats.evals,
            grad_norm: stats.grad_norm,
        },
        model: FittedModel::CoreJoint {
            blocks: blocks.clone(),
            r,
            loading_dynamics,
            corr_dynamics,
            tails,
            scaling: scaling_est,
        },
    })
}

// ===================================================================
// Decoupled core fit
// ===================================================================

/// Two-stage estimator of the core model.
///
/// Stage 1 fits each asset's loading recursion against a univariate-t
/// quasi-likelihood with its own estimated tail parameter (`ν*_i`; a
/// Gaussian marginal under [`DistSpec::Gaussian`]). Stage 2 fits the
/// correlation dynamics of the stage-1 standardized residuals — one
/// independent optimization per correlation cell when the tail partition
/// nests within cells, one global optimization otherwise (e.g. a pooled t
/// family across cells). Returns the report and the residual panel `ê`.
pub fn fit_core_decoupled(
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    blocks: &BlockSpec,
    dist: &DistSpec,
    scaling: ScalingKind,
    opts: &FitOptions,
) -> Result<(FitReport, DMatrix<f64>)> {
    let n = blocks.n();
    check_panel("return panel", z, MIN_FIT_ROWS)?;
    check_panel("factor panel", u, MIN_FIT_ROWS)?;
    if z.nrows() != u.nrows() {
        return Err(Error::DimensionMismatch {
            what: "panel row counts",
            expected: z.nrows(),
            got: u.nrows(),
        });
    }
    if z.ncols() != n {
        return Err(Error::DimensionMismatch {
            what: "return panel columns",
            expected: n,
            got: z.ncols(),
        });
    }
    let r = u.ncols();
    let t_len = z.nrows();
    let t_marginal = dist.has_nu();
    let opt = opts.optim_options();
    let scale = 1.0 / t_len as f64;

    let warm = match &opts.warm_start {
        Some(FittedModel::CoreDecoupled {
            blocks: wb,
            r: wr,
            loading_dynamics,
            loading_nu,
            corr_dynamics,
            corr_tails,
            scaling: wsc,
            ..
        }) if wb == blocks && *wr == r => Some((
            loading_dynamics.clone(),
            loading_nu.clone(),
            corr_dynamics.clone(),
            corr_tails.clone(),
            wsc.clone(),
        )),
        _ => None,
    };

    // ---------------- Stage 1: per-asset loading fits ----------------
    let (taus0, _) = static_loading_init(z, u)?;
    let mut stats = RunStats::none();
    let mut loading_dynamics = Vec::with_capacity(n);
    let mut loading_nu: Vec<Option<f64>> = Vec::with_capacity(n);
    let mut log_lambda: Vec<f64> = Vec::with_capacity(n);
    let mut resid = DMatrix::zeros(t_len, n);
    let mut omega_logsum: DVector<f64> = DVector::zeros(t_len);

    for i in 0..n {
        let zi = z.column(i).clone_owned();
        let n_nu_i = usize::from(t_marginal);
        let tikhonov = scaling == ScalingKind::Tikhonov;
        let decode = move |theta: &DVector<f64>,
                           r: usize|
              -> Result<LoadingModel> {
            let mut pos = 0;
            let dynamics = read_dynamics(theta, &mut pos, r)?;
            let nu = if n_nu_i == 1 {
                let v = nu_of(theta[pos]);
                pos += 1;
                v
            } else {
                f64::INFINITY
            };
            let sc = match scaling {
                ScalingKind::Identity => Scaling::Identity,
                ScalingKind::MoorePenrose => Scaling::MoorePenrose,
                ScalingKind::Tikhonov => Scaling::Tikhonov {
                    lambda: vec![theta[pos].clamp(-LOG_LAMBDA_CAP, LOG_LAMBDA_CAP).exp()],
                },
            };
            LoadingModel::new(dynamics, nu, sc)
        };

        let mut theta0 = Vec::new();
        match &warm {
            Some((wd, wn, _, _, wsc)) => {
                push_dynamics_exact(&mut theta0, &wd[i]);
                if t_marginal {
                    theta0.push(raw_of_nu(wn[i].unwrap_or(8.0)));
                }
                if tikhonov {
                    let l = wsc
                        .log_lambda()
                        .map(|v| v[i])
                        .unwrap_or(0.0);
                    theta0.push(l.clamp(-LOG_LAMBDA_CAP, LOG_LAMBDA_CAP));
                }
            }
            None => {
                push_dynamics(&mut theta0, &taus0[i], opts.beta_start, opts.alpha_start);
                if t_marginal {
                    theta0.push(raw_of_nu(8.0));
                }
                if tikhonov {
                    theta0.push(0.0);
                }
            }
        }
        let starts: Vec<DVector<f64>> = if t_marginal && warm.is_none() {
            let nu_pos = 3 * r;
            nu_start_list(opts)
                .iter()
                .map(|&nu0| {
                    let mut th = theta0.clone();
                    th[nu_pos] = raw_of_nu(nu0);
                    DVector::from_vec(th)
                })
                .collect()
        } else {
            vec![DVector::from_vec(theta0)]
        };

        let mut objective = |theta: &DVector<f64>| -> f64 {
            match decode(theta, r).and_then(|m| filter_loading_decoupled(&m, &zi, u, false)) {
                Ok(out) => -out.loglik * scale,
                Err(_) => f64::INFINITY,
            }
        };
        let (best, run) = optimize_starts(
            &mut objective,
            &starts,
            &opt,
            "loading quasi-likelihood",
        )?;
        stats.absorb(&run);

        let model = decode(&best, r)?;
        let out = filter_loading_decoupled(&model, &zi, u, false)?;
        resid.column_mut(i).copy_from(&out.residuals);
        for t in 0..t_len {
            omega_logsum[t] += out.omegas[t].ln();
        }
        loading_dynamics.push(DynamicsEstimate::from_dynamics(model.dynamics()));
        loading_nu.push(if model.nu().is_finite() {
            Some(model.nu())
        } else {
            None
        });
        if let Scaling::Tikhonov { lambda } = model.scaling() {
            log_lambda.push(lambda[0].ln());
        }
    }

    let scaling_est = match scaling {
        ScalingKind::Identity => ScalingEstimate::Identity,
        ScalingKind::MoorePenrose => ScalingEstimate::MoorePenrose,
        ScalingKind::Tikhonov => ScalingEstimate::Tikhonov {
            log_lambda: log_lambda.clone(),
        },
    };

    // ---------------- Stage 2: residual correlation ----------------
    let cells = cells_for(blocks)?;
    let cell_sizes: Vec<usize> = cells.iter().map(|c| c.n()).collect();
    let sizes = dist.group_sizes(n, &cell_sizes)?;
    let warm_stage2 = warm
        .as_ref()
        .and_then(|(_, _, cd, ct, _)| {
            (ct.group_sizes == sizes).then(|| (cd.clone(), ct.clone()))
        });
    let (corr_dynamics, corr_tails, stage2_loglik, stage2_stats) = fit_residual_corr(
        &resid, blocks, &cells, &sizes, dist, warm_stage2, opts, &opt,
    )?;
    stats.absorb(&stage2_stats);

    let loglik = -omega_logsum.sum() + stage2_loglik;
    let p = decoupled_param_count(blocks, r, dist, scaling)?;
    let nu = corr_tails.finite_nu();
    let report = FitReport {
        t_len,
        n_params: p,
        loglik,
        bic: bic(loglik, p, t_len),
        loading_summary: summarize(loading_dynamics.iter()),
        corr_summary: summarize([&corr_dynamics]),
        nu_mean: nu_mean_of(&nu),
        nu,
        loading_nu: Some(loading_nu.clone()),
        log_lambda: scaling_est.log_lambda(),
        convergence: Convergence {
            converged: stats.converged,
            iterations: stats.iterations,
            evals: stats.evals,
            grad_norm: stats.grad_norm,
        },
        model: FittedModel::CoreDecoupled {
            blocks: blocks.clone(),
            r,
            loading_dynamics,
            loading_nu,
            scaling: scaling_est,
            corr_dynamics,
            corr_tails,
        },
    };
    Ok((report, resid))
}

/// Stage-2 driver: fits the residual-correlation dynamics cell by cell
/// when the tail partition nests in the cells, globally otherwise.
#[allow(clippy::too_many_arguments)]
fn fit_residual_corr(
    resid: &DMatrix<f64>,
    blocks: &BlockSpec,
    cells: &[CorrCell],
    sizes: &[usize],
    dist: &DistSpec,
    warm: Option<(DynamicsEstimate, TailEstimate)>,
    opts: &FitOptions,
    opt: &optim::Options,
) -> Result<(DynamicsEstimate, TailEstimate, f64, RunStats)> {
    let (c_static, _) = static_block_corr(resid, blocks)?;

    // Group start offsets of the tail partition.
    let mut group_ranges = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        group_ranges.push(off..off + s);
        off += s;
    }
    let nests = cells.iter().all(|cell| {
        let cr = cell.range();
        group_ranges
            .iter()
            .all(|gr| gr.start >= cr.end || gr.end <= cr.start || (gr.start >= cr.start && gr.end <= cr.end))
    });

    let mut stats = RunStats::none();

    if nests && cells.len() > 1 {
        // Independent per-cell fits; the concatenation in cell order is the
        // global state layout.
        let mut mean = Vec::new();
        let mut beta = Vec::new();
        let mut alpha = Vec::new();
        let mut nus: Vec<f64> = vec![0.0; sizes.len()];
        let mut loglik = 0.0;
        for cell in cells {
            let cr = cell.range();
            let m = cr.len();
            let sub_blocks = cell_block_spec(cell)?;
            let sub_panel = resid.columns(cr.start, m).into_owned();
            let groups_in: Vec<usize> = group_ranges
                .iter()
                .enumerate()
                .filter(|(_, gr)| gr.start >= cr.start && gr.end <= cr.end)
                .map(|(g, _)| g)
                .collect();
            let sub_sizes: Vec<usize> = groups_in.iter().map(|&g| sizes[g]).collect();
            let sub_dist = match dist {
                DistSpec::Gaussian => DistSpec::Gaussian,
                _ => DistSpec::GroupedT { sizes: sub_sizes.clone() },
            };
            let warm_cell = warm.as_ref().map(|(cd, ct)| {
                let q_off = cells
                    .iter()
                    .take_while(|c| c.first < cell.first)
                    .map(|c| c.n_state())
                    .sum::<usize>();
                let qc = cell.n_state();
                (
                    DynamicsEstimate {
                        mean: cd.mean[q_off..q_off + qc].to_vec(),
                        beta: cd.beta[q_off..q_off + qc].to_vec(),
                        alpha: cd.alpha[q_off..q_off + qc].to_vec(),
                    },
                    TailEstimate {
                        group_sizes: sub_sizes.clone(),
                        nu: groups_in.iter().map(|&g| ct.nu[g]).collect(),
                    },
                )
            });
            let sub_static = {
                let sub = c_static
                    .values()
                    .view((cr.start, cr.start), (m, m))
                    .into_owned();
                CorrMatrix::new(sub)?
            };
            let (dyn_c, tails_c, ll, run) = fit_residual_cell(
                &sub_panel, &sub_blocks, &sub_dist, &sub_static, warm_cell, opts, opt,
            )?;
            stats.absorb(&run);
            loglik += ll;
            mean.extend(dyn_c.mean);
            beta.extend(dyn_c.beta);
            alpha.extend(dyn_c.alpha);
            for (slot, &g) in groups_in.iter().enumerate() {
                nus[g] = tails_c.nu[slot].unwrap_or(f64::INFINITY);
            }
        }
        let corr_dynamics = DynamicsEstimate { mean, beta, alpha };
        let corr_tails = TailEstimate {
            group_sizes: sizes.to_vec(),
            nu: nus
                .iter()
                .map(|&v| if v.is_finite() { Some(v) } else { None })
                .collect(),
        };
        return Ok((corr_dynamics, corr_tails, loglik, stats));
    }

    // Global fit (single cell, or tails pooled across cells).
    let sub_dist = match dist {
        DistSpec::Gaussian => DistSpec::Gaussian,
        _ => DistSpec::GroupedT { sizes: sizes.to_vec() },
    };
    let (dynamics, tails, loglik, run) = fit_residual_cell(
        resid, blocks, &sub_dist, &c_static, warm, opts, opt,
    )?;
    stats.absorb(&run);
    Ok((dynamics, tails, loglik, stats))
}

/// Stand-alone block structure of one correlation cell.
fn cell_block_spec(cell: &CorrCell) -> Result<BlockSpec> {
    match &cell.kind {
        CellKind::Dense { n } => BlockSpec::new(vec![*n], vec![0], Structure::Unrestricted),
        CellKind::Block { spec } => Ok(spec.clone()),
    }
}

/// Fits one residual-correlation unit (a cell or the whole panel) with a
/// global filter over its own block structure.
fn fit_residual_cell(
    panel: &DMatrix<f64>,
    blocks: &BlockSpec,
    dist: &DistSpec,
    c_static: &CorrMatrix,
    warm: Option<(DynamicsEstimate, TailEstimate)>,
    opts: &FitOptions,
    opt: &optim::Options,
) -> Result<(DynamicsEstimate, TailEstimate, f64, RunStats)> {
    let n = blocks.n();
    let t_len = panel.nrows();
    let scale = 1.0 / t_len as f64;
    let cells = cells_for(blocks)?;
    let cell_sizes: Vec<usize> = cells.iter().map(|c| c.n()).collect();
    let sizes = dist.group_sizes(n, &cell_sizes)?;
    let n_nu = dist.estimated_nu(n);
    let q: usize = cells.iter().map(|c| c.n_state()).sum();

    let mut theta0 = Vec::new();
    match &warm {
        Some((wd, wt)) if wd.dim() == q && wt.group_sizes == sizes => {
            push_dynamics_exact(&mut theta0, wd);
            for nu in wt.nu.iter() {
                if dist.has_nu() {
                    theta0.push(raw_of_nu(nu.unwrap_or(8.0)));
                }
            }
        }
        _ => {
            let eta0 = eta_init_from_corr(c_static, &cells)?;
            push_dynamics(&mut theta0, &eta0, opts.beta_start, opts.alpha_start);
        }
    }

    let sizes_cl = sizes.clone();
    let decode = |theta: &DVector<f64>| -> Result<ResidualCorrModel> {
        let mut pos = 0;
        let dynamics = read_dynamics(theta, &mut pos, q)?;
        let tails = if n_nu > 0 {
            ConvolutionT::new(sizes_cl.clone(), read_nus(theta, &mut pos, n_nu))?
        } else {
            ConvolutionT::new(sizes_cl.clone(), vec![f64::INFINITY; sizes_cl.len()])?
        };
        ResidualCorrModel::new(blocks.clone(), dynamics, tails, true)
    };

    let starts: Vec<DVector<f64>> = if n_nu > 0 && theta0.len() == 3 * q {
        nu_start_list(opts)
            .iter()
            .map(|&nu0| {
                let mut th = theta0.clone();
                th.extend(std::iter::repeat_n(raw_of_nu(nu0), n_nu));
                DVector::from_vec(th)
            })
            .collect()
    } else {
        vec![DVector::from_vec(theta0)]
    };
    decode(&starts[0])?;

    let p = 3 * q + n_nu;
    let mut objective = |theta: &DVector<f64>| -> f64 {
        match decode(theta).and_then(|m| filter_residual_corr(&m, panel, false)) {
            Ok(out) => -out.loglik * scale,
            Err(_) => f64::INFINITY,
        }
    };
    let (best, stats) = if p == 0 {
        (starts[0].clone(), RunStats::none())
    } else {
        optimize_starts(
            &mut objective,
            &starts,
            opt,
            "residual correlation likelihood",
        )?
    };

    let model = decode(&best)?;
    let out = filter_residual_corr(&model, panel, false)?;
    Ok((
        DynamicsEstimate::from_dynamics(model.dynamics()),
        TailEstimate::from_tails(model.tails()),
        out.loglik,
        stats,
    ))
}

// ===================================================================
// Evaluation with frozen parameters
// ===================================================================

/// Per-period log-likelihood of a fitted model filtered through full
/// panels with frozen parameters.
///
/// For a [`FittedModel::Factor`] fit, `z` is the factor panel and `u` is
/// ignored. For core fits, `z` is the asset panel and `u` the whitened
/// factor panel. The decoupled variant reports the combined contribution
/// `ℓ_t(Z|U) = −Σ_i log ω_{i,t} + ℓ_t(ê)`.
pub fn stepwise_loglik(
    model: &FittedModel,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    match model {
        FittedModel::Factor { .. } => {
            let m = model.factor_model()?;
            Ok(filter_factor_corr(&m, z, false)?.stepwise)
        }
        FittedModel::CoreJoint { .. } => {
            let m = model.core_model()?;
            Ok(filter_core_joint(&m, z, u, false)?.stepwise)
        }
        FittedModel::CoreDecoupled { .. } => {
            let loadings = model.loading_models()?;
            let t_len = z.nrows();
            let n = z.ncols();
            if loadings.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "panel columns",
                    expected: loadings.len(),
                    got: n,
                });
            }
            let mut combined = DVector::zeros(t_len);
            let mut resid = DMatrix::zeros(t_len, n);
            for (i, lm) in loadings.iter().enumerate() {
                let zi = z.column(i).clone_owned();
                let out = filter_loading_decoupled(lm, &zi, u, false)?;
                for t in 0..t_len {
                    combined[t] -= out.omegas[t].ln();
                }
                resid.column_mut(i).copy_from(&out.residuals);
            }
            let rm = model.residual_model()?;
            let out = filter_residual_corr(&rm, &resid, false)?;
            combined += out.stepwise;
            Ok(combined)
        }
    }
}

/// Filters the full panel with frozen parameters and splits the
/// log-likelihood at `split` (the number of in-sample rows). The holdout
/// filtering continues from the last in-sample state; `split == T` leaves
/// an empty holdout with zero out-of-sample log-likelihood.
pub fn evaluate_oos(
    model: &FittedModel,
    z: &DMatrix<f64>,
    u: &DMatrix<f64>,
    split: usize,
) -> Result<OosReport> {
    let t_len = z.nrows();
    if split == 0 || split > t_len {
        return Err(Error::domain(format!(
            "split {split} outside the sample 1..={t_len}"
        )));
    }
    let stepwise = stepwise_loglik(model, z, u)?;
    let loglik_in = stepwise.rows(0, split).sum();
    let loglik_oos = if split < t_len {
        stepwise.rows(split, t_len - split).sum()
    } else {
        0.0
    };
    Ok(OosReport {
        split_index: split,
        t_in: split,
        t_oos: t_len - split,
        loglik_in,
        loglik_oos,
    })
}
