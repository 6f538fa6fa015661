//! Quasi-Newton minimization for the estimation drivers.
//!
//! Likelihoods in this crate are smooth but their analytic derivatives with
//! respect to the *static* parameters (means, persistences, step sizes,
//! tail indices) would require differentiating through the whole filter
//! recursion, so most drivers minimize with BFGS on finite-difference
//! gradients: forward differences while searching, optionally central
//! differences for a final refinement. [`minimize_with_grad`] accepts an
//! analytic gradient for objectives that have one (the univariate
//! volatility fits), which allows much tighter gradient tolerances than
//! the finite-difference noise floor permits. Objective evaluations that
//! return a non-finite value are treated as out-of-domain and rejected by
//! the line search, which is how filter divergence and parameter-domain
//! errors are handled without special casing.

use nalgebra::{DMatrix, DVector};

/// Tuning knobs for [`minimize`].
#[derive(Debug, Clone)]
pub struct Options {
    /// Maximum BFGS iterations.
    pub max_iters: usize,
    /// Hard cap on objective evaluations (gradients included).
    pub max_evals: usize,
    /// Declare convergence when the relative objective decrease over one
    /// iteration falls below this.
    pub rel_tol: f64,
    /// Declare convergence when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Forward finite-difference step (scaled by `max(1, |x_i|)`).
    pub fd_forward: f64,
    /// Central finite-difference step (scaled likewise).
    pub fd_central: f64,
    /// Use central differences for every gradient (slower, more accurate).
    pub central: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iters: 200,
            max_evals: 20_000,
            rel_tol: 1e-8,
            grad_tol: 1e-5,
            fd_forward: 1e-6,
            fd_central: 1e-5,
            central: false,
        }
    }
}

/// Result of a minimization run.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Best point found.
    pub x: DVector<f64>,
    /// Objective value there.
    pub value: f64,
    /// Iterations performed.
    pub iterations: usize,
    /// Objective evaluations consumed.
    pub evals: usize,
    /// Whether a convergence test (not a budget) stopped the run.
    pub converged: bool,
    /// Infinity norm of the last gradient.
    pub grad_norm: f64,
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&DVector<f64>) -> f64> Counted<F> {
    fn eval(&mut self, x: &DVector<f64>) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }
}

/// Finite-difference gradient of `f` at `x` (`fx` is `f(x)`, reused by the
/// forward scheme).
fn fd_gradient<F: FnMut(&DVector<f64>) -> f64>(
    counted: &mut Counted<F>,
    x: &DVector<f64>,
    fx: f64,
    opts: &Options,
) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut probe = x.clone();
    for i in 0..n {
        let scale = x[i].abs().max(1.0);
        if opts.central {
            let h = opts.fd_central * scale;
            probe[i] = x[i] + h;
            let up = counted.eval(&probe);
            probe[i] = x[i] - h;
            let dn = counted.eval(&probe);
            probe[i] = x[i];
            g[i] = (up - dn) / (2.0 * h);
        } else {
            let h = opts.fd_forward * scale;
            probe[i] = x[i] + h;
            let up = counted.eval(&probe);
            probe[i] = x[i];
            g[i] = (up - fx) / h;
        }
    }
    g
}

/// Standalone finite-difference gradient (used by tests and diagnostics).
pub fn gradient_fd<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    x: &DVector<f64>,
    step: f64,
    central: bool,
) -> DVector<f64> {
    let mut counted = Counted { f: &mut f, evals: 0 };
    let opts = Options {
        fd_forward: step,
        fd_central: step,
        central,
        ..Options::default()
    };
    let fx = if central { f64::NAN } else { counted.eval(x) };
    fd_gradient(&mut counted, x, fx, &opts)
}

/// Minimizes `f` from `x0` by BFGS with finite-difference gradients and a
/// backtracking Armijo line search. Non-finite objective values act as an
/// infinite barrier. The returned point is always the best one evaluated.
pub fn minimize<F: FnMut(&DVector<f64>) -> f64>(
    f: F,
    x0: &DVector<f64>,
    opts: &Options,
) -> Outcome {
    minimize_impl(
        f,
        |c: &mut Counted<F>, x: &DVector<f64>, fx: f64| fd_gradient(c, x, fx, opts),
        x0,
        opts,
    )
}

/// Like [`minimize`] but with a caller-supplied analytic gradient, which
/// sidesteps the finite-difference noise floor when tight gradient
/// tolerances are required. Gradient calls are not counted as objective
/// evaluations.
pub fn minimize_with_grad<F, G>(f: F, mut grad: G, x0: &DVector<f64>, opts: &Options) -> Outcome
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    minimize_impl(
        f,
        move |_c: &mut Counted<F>, x: &DVector<f64>, _fx: f64| grad(x),
        x0,
        opts,
    )
}

fn minimize_impl<F, G>(f: F, mut gradient: G, x0: &DVector<f64>, opts: &Options) -> Outcome
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&mut Counted<F>, &DVector<f64>, f64) -> DVector<f64>,
{
    let n = x0.len();
    let mut counted = Counted { f, evals: 0 };
    let mut x = x0.clone();
    let mut fx = counted.eval(&x);
    if !fx.is_finite() {
        return Outcome {
            x,
            value: fx,
            iterations: 0,
            evals: counted.evals,
            converged: false,
            grad_norm: f64::INFINITY,
        };
    }
    let mut g = gradient(&mut counted, &x, fx);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iters && counted.evals < opts.max_evals {
        iterations += 1;
        let grad_norm = g.amax();
        if grad_norm < opts.grad_tol {
            converged = true;
            break;
        }

        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) || !dir.iter().all(|v| v.is_finite()) {
            // Curvature information went bad; restart from steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
            if !(slope < 0.0) {
                break; // gradient is zero or non-finite
            }
        }

        // Backtracking Armijo search.
        let mut t = 1.0;
        let c1 = 1e-4;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &x + &dir * t;
            let fc = counted.eval(&cand);
            if fc.is_finite() && fc <= fx + c1 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
            if counted.evals >= opts.max_evals {
                break;
            }
        }
        let Some((x_new, f_new)) = accepted else {
            // No acceptable step along this direction: treat as converged
            // only if the gradient is small, otherwise report the stall.
            converged = grad_norm < opts.grad_tol * 10.0;
            break;
        };

        let g_new = gradient(&mut counted, &x_new, f_new);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if iterations == 1 {
                // Scale the initial metric to the first curvature estimate.
                let yy = y.norm_squared();
                if yy > 0.0 {
                    h_inv *= sy / yy;
                }
            }
            // Standard BFGS inverse update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let shy = &s * hy.transpose();
            h_inv -= &shy * rho;
            h_inv -= shy.transpose() * rho;
            h_inv += &s * s.transpose() * (rho * rho * yhy + rho);
        }

        let rel_drop = (fx - f_new) / fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if rel_drop >= 0.0 && rel_drop < opts.rel_tol {
            converged = true;
            break;
        }
    }

    Outcome {
        grad_norm: g.amax(),
        x,
        value: fx,
        iterations,
        evals: counted.evals,
        converged,
    }
}

/// Runs [`minimize`] from several starting points and keeps the best
/// finite outcome.
pub fn minimize_multistart<F: FnMut(&DVector<f64>) -> f64>(
    mut f: F,
    starts: &[DVector<f64>],
    opts: &Options,
) -> Outcome {
    assert!(!starts.is_empty(), "at least one starting point required");
    let mut best: Option<Outcome> = None;
    for x0 in starts {
        let outcome = minimize(&mut f, x0, opts);
        let better = match &best {
            None => true,
            Some(b) => outcome.value < b.value,
        };
        if better {
            best = Some(outcome);
        }
    }
    best.expect("at least one start evaluated")
}
