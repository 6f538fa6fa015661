//! Univariate AR(1)-EGARCH standardization.
//!
//! Raw return series enter the multivariate model only after each series
//! is reduced to (approximately) unit-variance innovations:
//!
//! ```text
//! R_t = a_0 + a_1 R_{t−1} + σ_t Z_t,
//! log σ_{t+1} = b_0 + b_1 log σ_t + b_2 Z_t + b_3 |Z_t|,
//! ```
//!
//! with `σ` initialized at its unconditional level
//! `exp((b_0 + b_3√(2/π))/(1 − b_1))` (the Gaussian `E|Z|` convention).
//! The log-volatility recursion keeps `σ_t > 0` by construction and is
//! stationary for `|b_1| < 1`.
//!
//! Estimation is Gaussian quasi-maximum-likelihood: consistent for the
//! variance dynamics whatever the true innovation law, and the innovation
//! law is estimated downstream on the standardized panel anyway. The
//! quasi-likelihood gradient is accumulated analytically alongside the
//! recursion, so fits are polished to tight gradient tolerances instead of
//! stopping at the finite-difference noise floor.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optim::{self, Options};

/// `E|Z|` for standard-normal `Z`, used by the unconditional start.
const MEAN_ABS_NORMAL: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Parameters of the AR(1)-EGARCH model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgarchParams {
    /// Conditional-mean intercept.
    pub a0: f64,
    /// Conditional-mean AR(1) coefficient, `|a1| < 1`.
    pub a1: f64,
    /// Log-volatility intercept.
    pub b0: f64,
    /// Log-volatility persistence, `|b1| < 1`.
    pub b1: f64,
    /// Signed innovation impact (leverage).
    pub b2: f64,
    /// Absolute innovation impact.
    pub b3: f64,
}

impl EgarchParams {
    /// Validates stationarity (`|a1| < 1`, `|b1| < 1`) and finiteness.
    pub fn new(a0: f64, a1: f64, b0: f64, b1: f64, b2: f64, b3: f64) -> Result<Self> {
        for (name, v) in [
            ("a0", a0),
            ("a1", a1),
            ("b0", b0),
            ("b1", b1),
            ("b2", b2),
            ("b3", b3),
        ] {
            if !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite, got {v}")));
            }
        }
        if a1.abs() >= 1.0 {
            return Err(Error::domain(format!("|a1| < 1 required, got {a1}")));
        }
        if b1.abs() >= 1.0 {
            return Err(Error::domain(format!("|b1| < 1 required, got {b1}")));
        }
        Ok(Self {
            a0,
            a1,
            b0,
            b1,
            b2,
            b3,
        })
    }

    /// Unconditional mean of `log σ` under Gaussian innovations.
    pub fn log_sigma_uncond(&self) -> f64 {
        (self.b0 + self.b3 * MEAN_ABS_NORMAL) / (1.0 - self.b1)
    }
}

/// Output of [`fit`]: estimated parameters, the standardized series, the
/// fitted volatility path, and optimizer diagnostics.
#[derive(Debug, Clone)]
pub struct EgarchFit {
    /// Estimated parameters.
    pub params: EgarchParams,
    /// Standardized innovations `Z_t`, one per observation from the second
    /// onward (the first return only conditions the AR part).
    pub z: DVector<f64>,
    /// Fitted conditional volatilities aligned with `z`.
    pub sigma: DVector<f64>,
    /// Maximized Gaussian quasi-log-likelihood.
    pub loglik: f64,
    /// Infinity norm, at the estimate, of the gradient of the
    /// *per-observation average* quasi-log-likelihood. (The total's
    /// gradient scales with the sample size, which would put a fixed
    /// tolerance below floating-point evaluation noise for long series.)
    pub grad_norm: f64,
    /// BFGS iterations consumed (across polishing restarts).
    pub iterations: usize,
}

/// Runs the volatility recursion over `returns` at fixed parameters and
/// returns the standardized series and the volatility path, both of length
/// `T − 1` (observation `t` is standardized using information through
/// `t − 1`; the first return has no predecessor and is consumed by the AR
/// term only).
pub fn filter(returns: &DVector<f64>, params: &EgarchParams) -> (DVector<f64>, DVector<f64>) {
    let t_len = returns.len().saturating_sub(1);
    let mut z = DVector::zeros(t_len);
    let mut sigma = DVector::zeros(t_len);
    let mut log_sig = params.log_sigma_uncond();
    for k in 0..t_len {
        let s = log_sig.exp();
        sigma[k] = s;
        let zk = (returns[k + 1] - params.a0 - params.a1 * returns[k]) / s;
        z[k] = zk;
        log_sig = params.b0 + params.b1 * log_sig + params.b2 * zk + params.b3 * zk.abs();
    }
    (z, sigma)
}

/// Gaussian quasi-log-likelihood of `returns` at `params`, with its
/// gradient in `(a0, a1, b0, b1, b2, b3)` accumulated forward along the
/// recursion.
pub fn quasi_loglik_grad(returns: &DVector<f64>, params: &EgarchParams) -> (f64, [f64; 6]) {
    const LN_2PI: f64 = 1.837_877_066_409_345_3;
    let t_len = returns.len().saturating_sub(1);
    let mut loglik = 0.0;
    let mut grad = [0.0; 6];

    // State: L = log σ and its parameter sensitivities dL.
    let denom = 1.0 - params.b1;
    let mut l = params.log_sigma_uncond();
    let mut dl = [0.0; 6];
    dl[2] = 1.0 / denom; // ∂L₁/∂b0
    dl[3] = l / denom; // ∂L₁/∂b1
    dl[5] = MEAN_ABS_NORMAL / denom; // ∂L₁/∂b3

    for k in 0..t_len {
        let inv_s = (-l).exp();
        let zk = (returns[k + 1] - params.a0 - params.a1 * returns[k]) * inv_s;
        loglik += -0.5 * LN_2PI - l - 0.5 * zk * zk;

        // dz/dp = −(∂μ/∂p)/σ − z ∂L/∂p with μ = a0 + a1 R_{t−1}.
        let mut dz = [0.0; 6];
        for p in 0..6 {
            dz[p] = -zk * dl[p];
        }
        dz[0] -= inv_s;
        dz[1] -= returns[k] * inv_s;

        for p in 0..6 {
            grad[p] += -dl[p] - zk * dz[p];
        }

        // Advance L and its sensitivities.
        let sgn = if zk > 0.0 {
            1.0
        } else if zk < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut dl_next = [0.0; 6];
        for p in 0..6 {
            dl_next[p] = params.b1 * dl[p] + (params.b2 + params.b3 * sgn) * dz[p];
        }
        dl_next[2] += 1.0;
        dl_next[3] += l;
        dl_next[4] += zk;
        dl_next[5] += zk.abs();
        dl = dl_next;
        l = params.b0 + params.b1 * l + params.b2 * zk + params.b3 * zk.abs();
    }
    (loglik, grad)
}

/// Gaussian quasi-log-likelihood at fixed parameters.
pub fn quasi_loglik(returns: &DVector<f64>, params: &EgarchParams) -> f64 {
    quasi_loglik_grad(returns, params).0
}

fn params_of_theta(theta: &DVector<f64>) -> EgarchParams {
    EgarchParams {
        a0: theta[0],
        a1: theta[1].tanh(),
        b0: theta[2],
        b1: theta[3].tanh(),
        b2: theta[4],
        b3: theta[5],
    }
}

/// Estimates AR(1)-EGARCH parameters by Gaussian quasi-maximum-likelihood.
///
/// The stationarity constraints are enforced through a `tanh`
/// reparametrization of `a1` and `b1`, and the fit is polished until the
/// per-observation average quasi-likelihood gradient has infinity norm
/// below `1e-6`.
pub fn fit(returns: &DVector<f64>) -> Result<EgarchFit> {
    let t = returns.len();
    if t < 100 {
        return Err(Error::domain(format!(
            "volatility fit needs at least 100 observations, got {t}"
        )));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("returns must be finite"));
    }
    let mean = returns.mean();
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (t as f64 - 1.0);
    if !(var > 0.0) {
        return Err(Error::domain("returns have zero variance"));
    }
    let log_sd = 0.5 * var.ln();

    // Start: no mean dynamics, persistent volatility, small asymmetric
    // response, unconditional level matched to the sample.
    let b1_start: f64 = 0.9;
    let b3_start = 0.05;
    let start = DVector::from_vec(vec![
        mean,
        0.0,
        (1.0 - b1_start) * log_sd - b3_start * MEAN_ABS_NORMAL,
        b1_start.atanh(),
        0.0,
        b3_start,
    ]);

    // Optimize the per-observation average so both the Armijo tests and the
    // gradient tolerance operate on an O(1) scale regardless of T.
    let m = (t - 1) as f64;
    let objective =
        |theta: &DVector<f64>| -quasi_loglik_grad(returns, &params_of_theta(theta)).0 / m;
    let gradient = |theta: &DVector<f64>| {
        let p = params_of_theta(theta);
        let (_, g) = quasi_loglik_grad(returns, &p);
        // Chain through the tanh maps; negate for minimization.
        DVector::from_vec(vec![
            -g[0] / m,
            -g[1] * (1.0 - p.a1 * p.a1) / m,
            -g[2] / m,
            -g[3] * (1.0 - p.b1 * p.b1) / m,
            -g[4] / m,
            -g[5] / m,
        ])
    };
    let opts = Options {
        max_iters: 600,
        max_evals: 60_000,
        rel_tol: 1e-15,
        grad_tol: 1e-6,
        ..Options::default()
    };
    let mut out = optim::minimize_with_grad(objective, gradient, &start, &opts);
    let mut iterations = out.iterations;
    // A restart resets the quasi-Newton metric, which usually polishes a
    // stalled gradient the rest of the way.
    for _ in 0..3 {
        if out.grad_norm < opts.grad_tol {
            break;
        }
        out = optim::minimize_with_grad(objective, gradient, &out.x, &opts);
        iterations += out.iterations;
    }
    if !out.value.is_finite() || !(out.grad_norm < opts.grad_tol) {
        return Err(Error::NoConvergence {
            what: "volatility quasi-likelihood",
            iterations,
            residual: out.grad_norm,
        });
    }

    let params = params_of_theta(&out.x);
    let (z, sigma) = filter(returns, &params);
    let loglik = quasi_loglik(returns, &params);
    Ok(EgarchFit {
        params,
        z,
        sigma,
        loglik,
        grad_norm: out.grad_norm,
        iterations,
    })
}

/// Builds a return series from a given standardized-innovation series.
///
/// The first return is set to the unconditional mean `a0/(1 − a1)` and the
/// volatility starts at its unconditional level, so `z[k]` drives the step
/// from return `k` to return `k+1`; the output has length `z.len() + 1`.
/// This is the generative counterpart of [`filter`]: filtering the output
/// with the same parameters returns `z` exactly.
pub fn returns_from_innovations(params: &EgarchParams, z: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(z.len() + 1);
    let mut log_sig = params.log_sigma_uncond();
    out[0] = params.a0 / (1.0 - params.a1);
    for (k, &zk) in z.iter().enumerate() {
        let s = log_sig.exp();
        out[k + 1] = params.a0 + params.a1 * out[k] + s * zk;
        log_sig = params.b0 + params.b1 * log_sig + params.b2 * zk + params.b3 * zk.abs();
    }
    out
}

/// Simulates a return series of length `t_len` from the model with
/// standard-normal innovations, after discarding `burn` initial steps.
pub fn simulate<R: Rng + ?Sized>(
    params: &EgarchParams,
    t_len: usize,
    burn: usize,
    rng: &mut R,
) -> DVector<f64> {
    let mut out = DVector::zeros(t_len);
    let mut log_sig = params.log_sigma_uncond();
    let mut prev_r = params.a0 / (1.0 - params.a1);
    for k in 0..burn + t_len {
        let z: f64 = StandardNormal.sample(rng);
        let s = log_sig.exp();
        let r = params.a0 + params.a1 * prev_r + s * z;
        if k >= burn {
            out[k - burn] = r;
        }
        log_sig = params.b0 + params.b1 * log_sig + params.b2 * z + params.b3 * z.abs();
        prev_r = r;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn innovation_construction_round_trips_through_the_filter() {
        let params = EgarchParams::new(0.02, 0.1, -0.3, 0.95, -0.06, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = DVector::from_fn(300, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let returns = returns_from_innovations(&params, &z);
        assert_eq!(returns.len(), 301);
        let (z_back, _) = filter(&returns, &params);
        assert!((z_back - &z).abs().max() < 1e-12);
    }

    #[test]
    fn constant_volatility_case_standardizes_by_a_constant() {
        // b2 = b3 = 0, a1 = 0: σ = exp(b0/(1−b1)) at every step and
        // Z is the demeaned series over that constant.
        let p = EgarchParams::new(0.3, 0.0, -0.5, 0.4, 0.0, 0.0).unwrap();
        let s = (-0.5f64 / 0.6).exp();
        let r = DVector::from_vec(vec![1.0, 0.2, -0.7, 1.4]);
        let (z, sigma) = filter(&r, &p);
        assert_eq!(z.len(), 3);
        for k in 0..3 {
            assert!((sigma[k] - s).abs() < 1e-15);
            assert!((z[k] - (r[k + 1] - 0.3) / s).abs() < 1e-14);
        }
    }

    #[test]
    fn three_step_recursion_matches_hand_computation() {
        let p = EgarchParams::new(0.1, 0.2, -0.05, 0.9, -0.1, 0.15).unwrap();
        let r = DVector::from_vec(vec![0.5, -0.3, 0.8, 0.1]);
        let (z, sigma) = filter(&r, &p);

        let c = MEAN_ABS_NORMAL;
        let l1 = (-0.05 + 0.15 * c) / 0.1;
        let s1 = l1.exp();
        let z1 = (-0.3 - 0.1 - 0.2 * 0.5) / s1;
        let l2 = -0.05 + 0.9 * l1 - 0.1 * z1 + 0.15 * z1.abs();
        let s2 = l2.exp();
        let z2 = (0.8 - 0.1 - 0.2 * (-0.3)) / s2;
        let l3 = -0.05 + 0.9 * l2 - 0.1 * z2 + 0.15 * z2.abs();
        let s3 = l3.exp();
        let z3 = (0.1 - 0.1 - 0.2 * 0.8) / s3;

        for (got, want) in [
            (sigma[0], s1),
            (sigma[1], s2),
            (sigma[2], s3),
            (z[0], z1),
            (z[1], z2),
            (z[2], z3),
        ] {
            assert!((got - want).abs() < 1e-14, "got {got} want {want}");
        }
        assert!(sigma.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let true_p = EgarchParams::new(0.05, 0.15, -0.2, 0.8, -0.1, 0.2).unwrap();
        let r = simulate(&true_p, 300, 50, &mut rng);
        let at = [0.02, 0.1, -0.15, 0.85, -0.05, 0.12];
        let p = EgarchParams::new(at[0], at[1], at[2], at[3], at[4], at[5]).unwrap();
        let (_, g) = quasi_loglik_grad(&r, &p);
        for i in 0..6 {
            let h = 1e-6;
            let mut up = at;
            up[i] += h;
            let mut dn = at;
            dn[i] -= h;
            let pu = EgarchParams::new(up[0], up[1], up[2], up[3], up[4], up[5]).unwrap();
            let pd = EgarchParams::new(dn[0], dn[1], dn[2], dn[3], dn[4], dn[5]).unwrap();
            let fd = (quasi_loglik(&r, &pu) - quasi_loglik(&r, &pd)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() < 2e-4 * fd.abs().max(1.0),
                "param {i}: analytic {} vs fd {}",
                g[i],
                fd
            );
        }
    }

    #[test]
    fn fit_on_iid_data_standardizes_to_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = DVector::from_fn(2000, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        });
        let fit = fit(&r).unwrap();
        assert!(fit.grad_norm < 1e-6, "grad norm {}", fit.grad_norm);
        let m = fit.z.mean();
        let var = fit.z.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / (fit.z.len() as f64 - 1.0);
        assert!((0.9..=1.1).contains(&var), "variance {var}");
    }

    #[test]
    fn simulated_parameters_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let true_p = EgarchParams::new(0.02, 0.1, -0.01, 0.95, -0.08, 0.12).unwrap();
        let r = simulate(&true_p, 20_000, 500, &mut rng);
        let f = fit(&r).unwrap();
        assert!(f.grad_norm < 1e-6);
        assert!(
            (f.params.b1 - true_p.b1).abs() < 0.05,
            "b1 {} vs {}",
            f.params.b1,
            true_p.b1
        );
        assert!(
            (f.params.b2 - true_p.b2).abs() < 0.02,
            "b2 {} vs {}",
            f.params.b2,
            true_p.b2
        );
        assert!(
            (f.params.b3 - true_p.b3).abs() < 0.02,
            "b3 {} vs {}",
            f.params.b3,
            true_p.b3
        );
        // The standardized series should carry no volatility dynamics:
        // refitting it drives the innovation-impact terms to zero.
        let refit = fit(&f.z).unwrap();
        assert!(refit.params.b2.abs() < 0.03, "refit b2 {}", refit.params.b2);
        assert!(refit.params.b3.abs() < 0.03, "refit b3 {}", refit.params.b3);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(EgarchParams::new(0.0, 1.0, 0.0, 0.5, 0.0, 0.0).is_err());
        assert!(EgarchParams::new(0.0, 0.0, 0.0, -1.0, 0.0, 0.0).is_err());
        assert!(EgarchParams::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        let short = DVector::from_element(50, 0.1);
        assert!(fit(&short).is_err());
    }
}
