//! Acceptance gate for the library: one numbered check per release
//! requirement, each with an explicit tolerance and wall-clock budget.
//! Every check prints a single summary line on success; a failed
//! assertion fails the corresponding test and nothing else.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tvcorr::blockcorr::{
    canonical_of_corr, corr_of_eta, equicorr_rho, eta_of_corr, BlockSpec, CanonicalSpectrum,
    Structure,
};
use tvcorr::convt::{self, ConvolutionT};
use tvcorr::estimate::{
    bic, evaluate_oos, fit_core_decoupled, fit_core_joint, stepwise_loglik, DistSpec, FitOptions,
    FittedModel, ScalingEstimate, ScalingKind,
};
use tvcorr::loadings::LoadingState;
use tvcorr::matcorr::{corr_of_gamma, gamma_of_corr, sym_eigen, CorrMatrix, GammaVec};
use tvcorr::scoredriven::{
    equicorr_ht_score, equicorr_mt_score, filter_core_joint, filter_equicorr_mt,
    filter_loading_decoupled, filter_residual_corr, joint_score, loading_score,
    residual_corr_score, ChannelDynamics, CoreModel, LoadingModel, ResidualCorrModel, Scaling,
};
use tvcorr::sim::simulate_core;

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for t in 0..rows {
        for j in 0..cols {
            m[(t, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn uniform_vector(len: usize, half_width: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * half_width)
}

fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Symmetric matrix square root through the eigendecomposition.
fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (q, lam) = sym_eigen(m);
    let mut scaled = q.clone();
    for j in 0..lam.len() {
        let f = lam[j].max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(f);
    }
    &scaled * q.transpose()
}

/// Dense matrix logarithm through the eigendecomposition.
fn sym_log(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (q, lam) = sym_eigen(m);
    let mut scaled = q.clone();
    for j in 0..lam.len() {
        let f = lam[j].ln();
        scaled.column_mut(j).scale_mut(f);
    }
    &scaled * q.transpose()
}

/// Relative error with a unit floor on the denominator, the scale used by
/// all derivative checks here.
fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(1.0)
}

/// Five-point-free central difference: `(f(x+h) − f(x−h)) / 2h` with a
/// magnitude-scaled step.
fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 3e-6 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Carries the stage-1 scaling estimate of a decoupled fit over to a joint
/// warm start.
fn dec_scaling(model: &FittedModel) -> ScalingEstimate {
    match model {
        FittedModel::CoreDecoupled { scaling, .. } => scaling.clone(),
        _ => unreachable!(),
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

// ---------------------------------------------------------------------------
// a01 — log-coordinate extraction on the 3×3 reference matrix
// ---------------------------------------------------------------------------

#[test]
fn a01_log_coordinates_of_the_three_by_three_reference() {
    let c = CorrMatrix::new(DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.7, 0.4, 0.7, 1.0, 0.6, 0.4, 0.6, 1.0],
    ))
    .unwrap();
    // Warm pass so the timed call measures the map, not first-touch costs.
    let _ = gamma_of_corr(&c).unwrap();

    let t0 = Instant::now();
    let g = gamma_of_corr(&c).unwrap();
    let elapsed = t0.elapsed();

    let reference = [0.825, 0.223, 0.642];
    let mut worst = 0.0f64;
    for (k, want) in reference.iter().enumerate() {
        worst = worst.max((g.values[k] - want).abs());
    }
    assert!(
        worst < 5e-3,
        "log coordinates {:?} deviate from the reference {:?} by {worst:.3e}",
        g.values.as_slice(),
        reference
    );
    assert!(
        elapsed < Duration::from_millis(1),
        "single 3×3 extraction took {elapsed:?}"
    );
    eprintln!(
        "ACCEPT a01 three-by-three log coordinates: max err {worst:.2e} vs reference, {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// a02 — block-patterned logarithm of the 4×4 two-group reference matrix
// ---------------------------------------------------------------------------

#[test]
fn a02_block_log_of_the_four_by_four_reference() {
    let c = CorrMatrix::new(DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, 0.8, 0.4, 0.4, //
            0.8, 1.0, 0.4, 0.4, //
            0.4, 0.4, 1.0, 0.6, //
            0.4, 0.4, 0.6, 1.0,
        ],
    ))
    .unwrap();
    let spec = BlockSpec::single_sector(vec![2, 2], Structure::FullBlock).unwrap();
    let canonical = canonical_of_corr(&c, &spec).unwrap();
    let spectrum = CanonicalSpectrum::new(&canonical, &spec).unwrap();
    let logc = spectrum.log_dense(&spec);

    // The block-structured computation must agree with the dense
    // eigendecomposition logarithm to near machine precision.
    let oracle = sym_log(c.values());
    let dense_err = max_abs_diff_mat(&logc, &oracle);
    assert!(
        dense_err < 1e-9,
        "block log deviates from the dense logarithm by {dense_err:.3e}"
    );

    // Five distinct entries: group-1 diagonal, group-1 off-diagonal,
    // cross-group, group-2 diagonal, group-2 off-diagonal.
    let distinct = [
        logc[(0, 0)],
        logc[(1, 0)],
        logc[(2, 0)],
        logc[(2, 2)],
        logc[(3, 2)],
    ];
    let printed = [-0.57, 1.02, 0.256, -0.29, 0.628];
    let mut within = 0;
    for (got, want) in distinct.iter().zip(printed.iter()) {
        if (got - want).abs() < 5e-3 {
            within += 1;
        }
    }
    // The historical reference rounds the group-1 off-diagonal to 1.02; the
    // dense oracle puts it at 1.0383, so four of the five printed values
    // match and the fifth is pinned to the oracle instead.
    assert!(
        within >= 4,
        "only {within} of 5 distinct entries match the printed references; got {distinct:?}"
    );
    assert!(
        (distinct[1] - 1.0383).abs() < 5e-4,
        "group-1 off-diagonal {} should sit at 1.0383 per the dense oracle",
        distinct[1]
    );
    eprintln!(
        "ACCEPT a02 four-by-four block log: {within}/5 printed refs within 5e-3, dense err {dense_err:.2e}"
    );
}

// ---------------------------------------------------------------------------
// a03 — information-criterion arithmetic on the reference model size
// ---------------------------------------------------------------------------

#[test]
fn a03_information_criterion_arithmetic() {
    let value = bic(-36124.0, 85, 4278);
    let rounded = value.round() as i64;
    assert_eq!(
        rounded, 72959,
        "bic(-36124, 85, 4278) = {value}, rounds to {rounded}"
    );
    eprintln!("ACCEPT a03 information criterion: {value:.1} rounds to {rounded}");
}

// ---------------------------------------------------------------------------
// a04 — coordinate maps round-trip at scale
// ---------------------------------------------------------------------------

#[test]
fn a04_coordinate_maps_round_trip_at_scale() {
    let t0 = Instant::now();

    // Dense log-coordinates: vector -> correlation -> vector.
    let mut rng = ChaCha8Rng::seed_from_u64(41_001);
    let mut worst_gamma = 0.0f64;
    for k in 0..1000 {
        let n = 2 + k % 29; // 2..=30
        let len = n * (n - 1) / 2;
        let gamma = GammaVec::new(n, uniform_vector(len, 1.0, &mut rng)).unwrap();
        let c = corr_of_gamma(&gamma).unwrap();
        let back = gamma_of_corr(&c).unwrap();
        worst_gamma = worst_gamma.max(max_abs_diff_vec(&back.values, &gamma.values));
    }
    assert!(
        worst_gamma < 1e-8,
        "dense log-coordinate round trip err {worst_gamma:.3e}"
    );

    // Loading coordinates: unconstrained vector <-> open-ball vector.
    let mut rng = ChaCha8Rng::seed_from_u64(41_002);
    let mut worst_tau = 0.0f64;
    for k in 0..1000 {
        let r = 1 + k % 15; // 1..=15
        let tau = uniform_vector(r, 3.0, &mut rng);
        let state = LoadingState::from_tau(tau.clone()).unwrap();
        let norm = state.rho().norm();
        assert!(norm < 1.0, "mapped loadings left the open unit ball");
        let budget = state.omega() * state.omega() + state.rho().dot(state.rho());
        assert!(
            (budget - 1.0).abs() < 1e-12,
            "scale identity violated by {:.3e}",
            (budget - 1.0).abs()
        );
        let back = LoadingState::from_rho(state.rho().clone()).unwrap();
        worst_tau = worst_tau.max(max_abs_diff_vec(back.tau(), &tau));
    }
    assert!(
        worst_tau < 1e-8,
        "loading coordinate round trip err {worst_tau:.3e}"
    );

    // Block log-coordinates: vector -> block correlation -> vector, over
    // all three block structures with up to eight groups.
    let mut rng = ChaCha8Rng::seed_from_u64(41_003);
    let structures = [
        Structure::FullBlock,
        Structure::SparseBlock,
        Structure::DiagonalBlock,
    ];
    let mut worst_eta = 0.0f64;
    let mut done = 0;
    let mut k = 0usize;
    while done < 1000 {
        let n_groups = 1 + k % 8; // 1..=8
        let sizes: Vec<usize> = (0..n_groups).map(|_| 1 + rng.random_range(0..3usize)).collect();
        let sectors: Vec<usize> = (0..n_groups)
            .map(|g| if g < n_groups.div_ceil(2) { 0 } else { 1 })
            .collect();
        let structure = structures[k % 3];
        k += 1;
        let spec = BlockSpec::new(sizes, sectors, structure).unwrap();
        let q = spec.eta_len();
        if q == 0 {
            continue; // all-singleton draws carry no free coordinates
        }
        let eta = uniform_vector(q, 0.8, &mut rng);
        let c = corr_of_eta(&eta, &spec).unwrap();
        let back = eta_of_corr(&c, &spec).unwrap();
        worst_eta = worst_eta.max(max_abs_diff_vec(&back, &eta));
        done += 1;
    }
    assert!(
        worst_eta < 1e-8,
        "block log-coordinate round trip err {worst_eta:.3e}"
    );

    let elapsed = t0.elapsed();
    assert!(
        elapsed < Duration::from_secs(30),
        "round-trip battery took {elapsed:?}"
    );
    eprintln!(
        "ACCEPT a04 round trips: dense {worst_gamma:.2e}, loading {worst_tau:.2e}, block {worst_eta:.2e}, {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// a05 — analytic scores match central finite differences
// ---------------------------------------------------------------------------

#[test]
fn a05_analytic_scores_match_central_differences() {
    let t0 = Instant::now();
    let tol = 1e-5;
    let mut worst = [0.0f64; 5];

    // (i) Location/transform score of the convolution-t density.
    let mut rng = ChaCha8Rng::seed_from_u64(42_001);
    let ct = ConvolutionT::new(vec![2, 2], vec![5.0, 9.0]).unwrap();
    for _ in 0..20 {
        let mu = uniform_vector(4, 1.0, &mut rng);
        let mut xi = DMatrix::from_fn(4, 4, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * 0.4);
        for i in 0..4 {
            xi[(i, i)] += 1.5;
        }
        let x = uniform_vector(4, 2.0, &mut rng);
        let (grad_mu, grad_xi) = convt::score_mu_xi(&x, &mu, &xi, &ct).unwrap();
        for j in 0..4 {
            let fd = central_diff(
                |v| {
                    let mut m = mu.clone();
                    m[j] = v;
                    convt::loglik(&x, &m, &xi, &ct).unwrap()
                },
                mu[j],
            );
            worst[0] = worst[0].max(rel_err(grad_mu[j], fd));
        }
        for a in 0..4 {
            for b in 0..4 {
                let fd = central_diff(
                    |v| {
                        let mut m = xi.clone();
                        m[(a, b)] = v;
                        convt::loglik(&x, &mu, &m, &ct).unwrap()
                    },
                    xi[(a, b)],
                );
                worst[0] = worst[0].max(rel_err(grad_xi[(a, b)], fd));
            }
        }
    }

    // (ii) Joint core score in the loading and correlation coordinates.
    let mut rng = ChaCha8Rng::seed_from_u64(42_002);
    let blocks = BlockSpec::new(vec![2, 2], vec![0, 1], Structure::SparseBlock).unwrap();
    let r = 2;
    let loading_dyn: Vec<ChannelDynamics> = (0..4)
        .map(|_| ChannelDynamics::uniform(DVector::zeros(r), 0.9, 0.02).unwrap())
        .collect();
    let corr_dyn = ChannelDynamics::uniform(DVector::zeros(2), 0.9, 0.02).unwrap();
    let tails = ConvolutionT::new(vec![2, 2], vec![6.0, 10.0]).unwrap();
    let model = CoreModel::new(
        blocks,
        r,
        loading_dyn,
        corr_dyn,
        tails,
        Scaling::Identity,
    )
    .unwrap();
    for _ in 0..20 {
        let tau: Vec<DVector<f64>> = (0..4).map(|_| uniform_vector(r, 0.8, &mut rng)).collect();
        let eta = uniform_vector(2, 0.5, &mut rng);
        let z = uniform_vector(4, 1.5, &mut rng);
        let u = uniform_vector(r, 1.0, &mut rng);
        let s = joint_score(&model, &tau, &eta, z.as_view(), u.as_view()).unwrap();
        for i in 0..4 {
            for kdx in 0..r {
                let fd = central_diff(
                    |v| {
                        let mut tt = tau.clone();
                        tt[i][kdx] = v;
                        joint_score(&model, &tt, &eta, z.as_view(), u.as_view())
                            .unwrap()
                            .loglik
                    },
                    tau[i][kdx],
                );
                worst[1] = worst[1].max(rel_err(s.grad_tau[i][kdx], fd));
            }
        }
        for j in 0..2 {
            let fd = central_diff(
                |v| {
                    let mut ee = eta.clone();
                    ee[j] = v;
                    joint_score(&model, &tau, &ee, z.as_view(), u.as_view())
                        .unwrap()
                        .loglik
                },
                eta[j],
            );
            worst[1] = worst[1].max(rel_err(s.grad_eta[j], fd));
        }
    }

    // (iii) Marginal loading-channel score.
    let mut rng = ChaCha8Rng::seed_from_u64(42_003);
    for case in 0..20 {
        let r = 3;
        let nu = if case % 2 == 0 { 6.0 } else { f64::INFINITY };
        let lm = LoadingModel::new(
            ChannelDynamics::uniform(DVector::zeros(r), 0.9, 0.02).unwrap(),
            nu,
            Scaling::Identity,
        )
        .unwrap();
        let tau = uniform_vector(r, 1.0, &mut rng);
        let u = uniform_vector(r, 1.5, &mut rng);
        let z = rng.random::<f64>() * 3.0 - 1.5;
        let s = loading_score(&lm, &tau, z, u.as_view()).unwrap();
        for j in 0..r {
            let fd = central_diff(
                |v| {
                    let mut tt = tau.clone();
                    tt[j] = v;
                    loading_score(&lm, &tt, z, u.as_view()).unwrap().loglik
                },
                tau[j],
            );
            worst[2] = worst[2].max(rel_err(s.grad_tau[j], fd));
        }
    }

    // (iv) Pooled-tail equicorrelation score in both parametrizations.
    let mut rng = ChaCha8Rng::seed_from_u64(42_004);
    for _ in 0..20 {
        let n = 5;
        let rho = rng.random::<f64>() * 0.9 - 0.15;
        let x = uniform_vector(n, 2.0, &mut rng);
        let s = equicorr_mt_score(x.as_view(), rho, 7.0).unwrap();
        let fd_rho = central_diff(
            |v| equicorr_mt_score(x.as_view(), v, 7.0).unwrap().loglik,
            rho,
        );
        worst[3] = worst[3].max(rel_err(s.grad_rho, fd_rho));
        let eta = tvcorr::blockcorr::equicorr_eta(rho, n).unwrap();
        let fd_eta = central_diff(
            |v| {
                equicorr_mt_score(x.as_view(), equicorr_rho(v, n), 7.0)
                    .unwrap()
                    .loglik
            },
            eta,
        );
        worst[3] = worst[3].max(rel_err(s.grad_eta, fd_eta));
    }

    // (v) Per-member-tail equicorrelation and the general block-residual
    // score.
    let mut rng = ChaCha8Rng::seed_from_u64(42_005);
    let nus = [4.0, 6.0, 8.0, 12.0, 20.0];
    for _ in 0..20 {
        let n = 5;
        let rho = rng.random::<f64>() * 0.8 - 0.1;
        let x = uniform_vector(n, 2.0, &mut rng);
        let s = equicorr_ht_score(x.as_view(), rho, &nus).unwrap();
        let fd_rho = central_diff(
            |v| equicorr_ht_score(x.as_view(), v, &nus).unwrap().loglik,
            rho,
        );
        worst[4] = worst[4].max(rel_err(s.grad_rho, fd_rho));
        let eta = tvcorr::blockcorr::equicorr_eta(rho, n).unwrap();
        let fd_eta = central_diff(
            |v| {
                equicorr_ht_score(x.as_view(), equicorr_rho(v, n), &nus)
                    .unwrap()
                    .loglik
            },
            eta,
        );
        worst[4] = worst[4].max(rel_err(s.grad_eta, fd_eta));
    }
    let spec = BlockSpec::single_sector(vec![2, 3], Structure::FullBlock).unwrap();
    let q = spec.eta_len();
    let rmodel = ResidualCorrModel::new(
        spec,
        ChannelDynamics::uniform(DVector::zeros(q), 0.9, 0.02).unwrap(),
        ConvolutionT::new(vec![2, 3], vec![5.0, 8.0]).unwrap(),
        false,
    )
    .unwrap();
    for _ in 0..20 {
        let eta = uniform_vector(q, 0.5, &mut rng);
        let e = uniform_vector(5, 2.0, &mut rng);
        let s = residual_corr_score(&rmodel, &eta, e.as_view()).unwrap();
        for j in 0..q {
            let fd = central_diff(
                |v| {
                    let mut ee = eta.clone();
                    ee[j] = v;
                    residual_corr_score(&rmodel, &ee, e.as_view()).unwrap().loglik
                },
                eta[j],
            );
            worst[4] = worst[4].max(rel_err(s.grad_eta[j], fd));
        }
    }

    let elapsed = t0.elapsed();
    for (label, w) in ["mu-xi", "joint", "loading", "pooled-equi", "per-member"]
        .iter()
        .zip(worst.iter())
    {
        assert!(*w < tol, "{label} score vs central difference: rel err {w:.3e}");
    }
    assert!(
        elapsed < Duration::from_secs(60),
        "derivative battery took {elapsed:?}"
    );
    eprintln!(
        "ACCEPT a05 analytic scores: worst rel errs {:?}, {elapsed:?}",
        worst.map(|w| format!("{w:.1e}"))
    );
}

// ---------------------------------------------------------------------------
// a06 — analytic information matrices match Monte Carlo second moments
// ---------------------------------------------------------------------------

#[test]
fn a06_analytic_informations_match_monte_carlo_moments() {
    let t0 = Instant::now();
    let n_draws = 100_000usize;
    let tol = 0.02;

    // (i) Location and transform information of the convolution-t density.
    let mut rng = ChaCha8Rng::seed_from_u64(43_001);
    let ct = ConvolutionT::new(vec![2, 2], vec![6.0, 10.0]).unwrap();
    let mu = uniform_vector(4, 0.5, &mut rng);
    let mut xi = DMatrix::from_fn(4, 4, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * 0.3);
    for i in 0..4 {
        xi[(i, i)] += 1.5;
    }
    let mut mc_mu = DMatrix::zeros(4, 4);
    let mut mc_xi = DMatrix::zeros(16, 16);
    for _ in 0..n_draws {
        let x = convt::sample(&mu, &xi, &ct, &mut rng);
        let (gm, gx) = convt::score_mu_xi(&x, &mu, &xi, &ct).unwrap();
        mc_mu += &gm * gm.transpose();
        let gv = DVector::from_column_slice(gx.as_slice());
        mc_xi += &gv * gv.transpose();
    }
    mc_mu /= n_draws as f64;
    mc_xi /= n_draws as f64;
    let info_mu = convt::information_mu(&xi, &ct).unwrap();
    let info_xi = convt::information_xi_dense(&xi, &ct).unwrap();
    let err_mu = (&mc_mu - &info_mu).norm() / info_mu.norm();
    let err_xi = (&mc_xi - &info_xi).norm() / info_xi.norm();
    assert!(err_mu < tol, "location information: rel Frobenius err {err_mu:.3e}");
    assert!(err_xi < tol, "transform information: rel Frobenius err {err_xi:.3e}");

    // (ii) Marginal loading-channel information, conditional on the factor.
    let mut rng = ChaCha8Rng::seed_from_u64(43_002);
    let r = 3;
    let nu = 6.0;
    let lm = LoadingModel::new(
        ChannelDynamics::uniform(DVector::zeros(r), 0.9, 0.02).unwrap(),
        nu,
        Scaling::Identity,
    )
    .unwrap();
    let tau = DVector::from_vec(vec![0.5, -0.3, 0.2]);
    let state = LoadingState::from_tau(tau.clone()).unwrap();
    let u = DVector::from_vec(vec![0.8, -0.5, 1.1]);
    let mean = state.rho().dot(&u);
    let omega = state.omega();
    let ct1 = ConvolutionT::new(vec![1], vec![nu]).unwrap();
    let mut mc = DMatrix::zeros(2, 2);
    let mut info = (0.0, 0.0);
    for _ in 0..n_draws {
        let e = convt::sample_v(&ct1, &mut rng)[0];
        let z = mean + omega * e;
        let s = loading_score(&lm, &tau, z, u.as_view()).unwrap();
        let g = DVector::from_vec(vec![s.grad_xi.0, s.grad_xi.1]);
        mc += &g * g.transpose();
        info = s.info_xi;
    }
    mc /= n_draws as f64;
    let analytic = DMatrix::from_diagonal(&DVector::from_vec(vec![info.0, info.1]));
    let err_load = (&mc - &analytic).norm() / analytic.norm();
    assert!(
        err_load < tol,
        "loading-channel information: rel Frobenius err {err_load:.3e}"
    );

    // (iii) Pooled-tail equicorrelation information in both coordinates.
    let mut rng = ChaCha8Rng::seed_from_u64(43_003);
    let n = 5;
    let rho = 0.4;
    let nu = 8.0;
    let mut c = DMatrix::from_element(n, n, rho);
    for i in 0..n {
        c[(i, i)] = 1.0;
    }
    let root = sym_sqrt(&c);
    let ct_pooled = ConvolutionT::multivariate_t(n, nu).unwrap();
    let mut mc_rho = 0.0;
    let mut mc_eta = 0.0;
    let mut info_rho = 0.0;
    let mut info_eta = 0.0;
    for _ in 0..n_draws {
        let v = convt::sample_v(&ct_pooled, &mut rng);
        let x = &root * v;
        let s = equicorr_mt_score(x.as_view(), rho, nu).unwrap();
        mc_rho += s.grad_rho * s.grad_rho;
        mc_eta += s.grad_eta * s.grad_eta;
        info_rho = s.info_rho;
        info_eta = s.info_eta;
    }
    mc_rho /= n_draws as f64;
    mc_eta /= n_draws as f64;
    let err_equi = ((mc_rho - info_rho).abs() / info_rho)
        .max((mc_eta - info_eta).abs() / info_eta);
    assert!(
        err_equi < tol,
        "pooled equicorrelation information: rel err {err_equi:.3e}"
    );

    // (iv) Per-member-tail equicorrelation information.
    let mut rng = ChaCha8Rng::seed_from_u64(43_004);
    let n = 4;
    let rho = 0.3;
    let nus = vec![4.0, 6.0, 9.0, 15.0];
    let mut c = DMatrix::from_element(n, n, rho);
    for i in 0..n {
        c[(i, i)] = 1.0;
    }
    let root = sym_sqrt(&c);
    let ct_members = ConvolutionT::heterogeneous_t(nus.clone()).unwrap();
    let mut mc_rho = 0.0;
    let mut mc_eta = 0.0;
    let mut info_rho = 0.0;
    let mut info_eta = 0.0;
    for _ in 0..n_draws {
        let v = convt::sample_v(&ct_members, &mut rng);
        let x = &root * v;
        let s = equicorr_ht_score(x.as_view(), rho, &nus).unwrap();
        mc_rho += s.grad_rho * s.grad_rho;
        mc_eta += s.grad_eta * s.grad_eta;
        info_rho = s.info_rho;
        info_eta = s.info_eta;
    }
    mc_rho /= n_draws as f64;
    mc_eta /= n_draws as f64;
    let err_members = ((mc_rho - info_rho).abs() / info_rho)
        .max((mc_eta - info_eta).abs() / info_eta);
    assert!(
        err_members < tol,
        "per-member equicorrelation information: rel err {err_members:.3e}"
    );

    let elapsed = t0.elapsed();
    assert!(
        elapsed < Duration::from_secs(300),
        "information battery took {elapsed:?}"
    );
    eprintln!(
        "ACCEPT a06 informations vs Monte Carlo: mu {err_mu:.1e}, xi {err_xi:.1e}, loading {err_load:.1e}, pooled {err_equi:.1e}, members {err_members:.1e}, {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// a07 — family and structure specializations agree with their dense forms
// ---------------------------------------------------------------------------

#[test]
fn a07_specializations_agree_with_dense_forms() {
    // Single-group convolution form is the pooled-t form exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(44_001);
    let n = 5;
    let ct_single = ConvolutionT::new(vec![n], vec![7.5]).unwrap();
    let ct_pooled = ConvolutionT::multivariate_t(n, 7.5).unwrap();
    let mu = DVector::zeros(n);
    let mut xi = DMatrix::from_fn(n, n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * 0.3);
    for i in 0..n {
        xi[(i, i)] += 1.4;
    }
    for _ in 0..100 {
        let x = uniform_vector(n, 2.5, &mut rng);
        let a = convt::loglik(&x, &mu, &xi, &ct_single).unwrap();
        let b = convt::loglik(&x, &mu, &xi, &ct_pooled).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "single-group vs pooled: {a} vs {b}");
    }

    // Pooled-t with an enormous tail parameter collapses to the Gaussian
    // form to within 1e-4 per observation.
    let ct_heavy = ConvolutionT::multivariate_t(n, 1e8).unwrap();
    let ct_gauss = ConvolutionT::gaussian(n);
    let mut worst_gauss = 0.0f64;
    for _ in 0..200 {
        let x = uniform_vector(n, 2.5, &mut rng);
        let a = convt::loglik(&x, &mu, &xi, &ct_heavy).unwrap();
        let b = convt::loglik(&x, &mu, &xi, &ct_gauss).unwrap();
        worst_gauss = worst_gauss.max((a - b).abs());
    }
    assert!(
        worst_gauss < 1e-4,
        "pooled-t at nu=1e8 vs Gaussian: max diff {worst_gauss:.3e}"
    );

    // Block-structured residual densities equal the dense computation.
    let mut rng = ChaCha8Rng::seed_from_u64(44_002);
    let cases: [(Structure, Vec<usize>, Vec<usize>, Vec<usize>); 3] = [
        (
            Structure::FullBlock,
            vec![2, 3, 2],
            vec![0, 0, 0],
            vec![7],
        ),
        (
            Structure::SparseBlock,
            vec![2, 3, 2],
            vec![0, 0, 1],
            vec![5, 2],
        ),
        (
            Structure::DiagonalBlock,
            vec![2, 3, 2],
            vec![0, 0, 0],
            vec![2, 3, 2],
        ),
    ];
    let mut worst_block = 0.0f64;
    for (structure, sizes, sectors, tail_sizes) in cases {
        let spec = BlockSpec::new(sizes, sectors, structure).unwrap();
        let q = spec.eta_len();
        let nus: Vec<f64> = (0..tail_sizes.len()).map(|g| 5.0 + 2.0 * g as f64).collect();
        let tails = ConvolutionT::new(tail_sizes, nus.clone()).unwrap();
        let model = ResidualCorrModel::new(
            spec.clone(),
            ChannelDynamics::uniform(DVector::zeros(q), 0.9, 0.02).unwrap(),
            tails.clone(),
            false,
        )
        .unwrap();
        for _ in 0..50 {
            let eta = uniform_vector(q, 0.5, &mut rng);
            let e = uniform_vector(7, 2.0, &mut rng);
            let block = residual_corr_score(&model, &eta, e.as_view()).unwrap().loglik;
            let c = corr_of_eta(&eta, &spec).unwrap();
            let root = sym_sqrt(c.values());
            let dense = convt::loglik(&e, &DVector::zeros(7), &root, &tails).unwrap();
            worst_block = worst_block.max((block - dense).abs());
        }
    }
    assert!(
        worst_block < 1e-10,
        "block-structured vs dense density: max diff {worst_block:.3e}"
    );

    // The closed-form equicorrelation filter matches the general
    // block-structured filter on a single-group panel.
    let mut rng = ChaCha8Rng::seed_from_u64(44_003);
    let n = 4;
    let t_len = 200;
    let x = standard_normal_matrix(t_len, n, &mut rng);
    let dyn1 = ChannelDynamics::uniform(DVector::from_vec(vec![0.4]), 0.95, 0.04).unwrap();
    let fast = filter_equicorr_mt(&x, &dyn1, 9.0).unwrap();
    let spec = BlockSpec::single_sector(vec![n], Structure::DiagonalBlock).unwrap();
    // The closed-form filter drives the state with information-rescaled
    // innovations, so the general model must do the same.
    let general_model = ResidualCorrModel::new(
        spec,
        dyn1,
        ConvolutionT::multivariate_t(n, 9.0).unwrap(),
        true,
    )
    .unwrap();
    let general = filter_residual_corr(&general_model, &x, false).unwrap();
    let worst_filter = max_abs_diff_vec(&fast.stepwise, &general.stepwise);
    assert!(
        worst_filter < 1e-10,
        "equicorrelation fast path vs general filter: max step diff {worst_filter:.3e}"
    );

    eprintln!(
        "ACCEPT a07 specializations: pooled exact, gauss limit {worst_gauss:.1e}, block vs dense {worst_block:.1e}, fast filter {worst_filter:.1e}"
    );
}

// ---------------------------------------------------------------------------
// a08 — ridge scaling tames ill-conditioned innovations
// ---------------------------------------------------------------------------

#[test]
fn a08_ridge_scaling_tames_ill_conditioned_innovations() {
    // Agreement at lambda = 0 on well-conditioned draws.
    let mut rng = ChaCha8Rng::seed_from_u64(45_001);
    let r = 4;
    let mut checked = 0;
    let mut worst_eq = 0.0f64;
    while checked < 50 {
        let tau = uniform_vector(r, 1.0, &mut rng);
        let state = LoadingState::from_tau(tau).unwrap();
        let u = uniform_vector(r, 2.0, &mut rng);
        let m = state.sensitivity(&u);
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin < 1e-3 * smax {
            continue; // keep the agreement check on well-conditioned draws
        }
        let pinv = state.sensitivity_pinv(&u);
        let ridge0 = state.sensitivity_tikhonov(&u, 0.0).unwrap();
        worst_eq = worst_eq.max(max_abs_diff_mat(&pinv, &ridge0));
        checked += 1;
    }
    assert!(
        worst_eq < 1e-10,
        "ridge at lambda=0 vs pseudo-inverse: max diff {worst_eq:.3e}"
    );

    // Near-parallel sweep: factor draws aligned with the loading direction
    // degrade the pseudo-inverse without bound while the ridge stays tame.
    let tau = {
        let mut t = DVector::zeros(r);
        t[0] = 1.2;
        t
    };
    let state = LoadingState::from_tau(tau).unwrap();
    let s2 = DVector::from_vec(vec![1.2, -0.8]);
    let lambda = std::f64::consts::E.powi(3);
    let mut raw_norms = Vec::new();
    let mut ridge_norms = Vec::new();
    for k in 0..41 {
        let xi = 10f64.powf(-8.0 + 8.0 * k as f64 / 40.0);
        let mut u = DVector::zeros(r);
        u[0] = 1.0;
        u[1] = xi;
        let eps0 = state.sensitivity_pinv(&u) * &s2;
        let epsl = state.sensitivity_tikhonov(&u, lambda).unwrap() * &s2;
        raw_norms.push(eps0.norm());
        ridge_norms.push(epsl.norm());
    }
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[s.len() / 2]
    };
    let raw_ratio = raw_norms.iter().cloned().fold(0.0, f64::max) / median(&raw_norms);
    let ridge_ratio = ridge_norms.iter().cloned().fold(0.0, f64::max) / median(&ridge_norms);
    assert!(
        raw_ratio > 1e3,
        "pseudo-inverse innovations should blow up near parallel draws, ratio {raw_ratio:.3e}"
    );
    assert!(
        ridge_ratio < 10.0,
        "ridge innovations should stay level near parallel draws, ratio {ridge_ratio:.3e}"
    );
    eprintln!(
        "ACCEPT a08 ridge scaling: lambda-0 agreement {worst_eq:.1e}, raw spread {raw_ratio:.1e}, ridge spread {ridge_ratio:.2}"
    );
}

// ---------------------------------------------------------------------------
// a09 — simulation recovery of dynamics and tails by both estimators
// ---------------------------------------------------------------------------

#[test]
fn a09_simulation_recovery_of_dynamics_and_tails() {
    let t0 = Instant::now();
    let blocks = BlockSpec::new(vec![3, 3, 3, 3], vec![0, 0, 1, 1], Structure::SparseBlock)
        .unwrap();
    let n = 12;
    let r = 4;
    let t_len = 4000;
    let beta_true = 0.97;
    let corr_beta_true = 0.96;
    let nu_true = [5.0, 7.0, 9.0, 11.0];
    let nu_mean_true = nu_true.iter().sum::<f64>() / 4.0;
    let loading_dyn: Vec<ChannelDynamics> = (0..n)
        .map(|i| {
            let mean = DVector::from_fn(r, |j, _| match j {
                0 => 0.55 - 0.02 * i as f64,
                1 => 0.18,
                2 => -0.12,
                _ => 0.08,
            });
            ChannelDynamics::uniform(mean, beta_true, 0.02).unwrap()
        })
        .collect();
    let q = blocks.eta_len();
    let corr_dyn = ChannelDynamics::uniform(
        DVector::from_fn(q, |j, _| 0.45 - 0.05 * j as f64),
        corr_beta_true,
        0.03,
    )
    .unwrap();
    let tails = ConvolutionT::new(vec![3, 3, 3, 3], nu_true.to_vec()).unwrap();
    // Ridge-scaled innovations keep the heavy-tailed recursion stable over
    // a long simulation horizon; the raw-score recursion is explosive here.
    let model = CoreModel::new(
        blocks.clone(),
        r,
        loading_dyn,
        corr_dyn,
        tails,
        Scaling::Tikhonov {
            lambda: vec![1.0; n],
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let u = standard_normal_matrix(t_len, r, &mut rng);
    let sim = simulate_core(&model, &u, &mut rng).unwrap();
    let z = sim.z;

    let dist = DistSpec::GroupedT {
        sizes: vec![3, 3, 3, 3],
    };
    let opts = FitOptions {
        nu_starts: vec![5.0, 10.0],
        ..FitOptions::default()
    };
    let (dec, _) =
        fit_core_decoupled(&z, &u, &blocks, &dist, ScalingKind::Tikhonov, &opts).unwrap();

    // Mean persistence across every score-driven channel and mean tail
    // parameter, both estimators.
    let summarize = |model: &FittedModel| -> (f64, f64) {
        let (load, corr, nus): (&Vec<_>, _, Vec<f64>) = match model {
            FittedModel::CoreDecoupled {
                loading_dynamics,
                corr_dynamics,
                corr_tails,
                ..
            } => (
                loading_dynamics,
                corr_dynamics,
                corr_tails.nu.iter().flatten().copied().collect(),
            ),
            FittedModel::CoreJoint {
                loading_dynamics,
                corr_dynamics,
                tails,
                ..
            } => (
                loading_dynamics,
                corr_dynamics,
                tails.nu.iter().flatten().copied().collect(),
            ),
            _ => unreachable!(),
        };
        let mut betas: Vec<f64> = Vec::new();
        for d in load {
            betas.extend(d.beta.iter().copied());
        }
        betas.extend(corr.beta.iter().copied());
        let beta_mean = betas.iter().sum::<f64>() / betas.len() as f64;
        let nu_mean = nus.iter().sum::<f64>() / nus.len() as f64;
        (beta_mean, nu_mean)
    };
    let beta_target = (beta_true * (n * r) as f64 + corr_beta_true * q as f64)
        / (n * r + q) as f64;

    let (beta_dec, nu_dec) = summarize(&dec.model);
    assert!(
        (beta_dec - beta_target).abs() < 0.05,
        "decoupled mean persistence {beta_dec:.4} vs target {beta_target:.4}"
    );
    assert!(
        (nu_dec / nu_mean_true - 1.0).abs() < 0.20,
        "decoupled mean tail {nu_dec:.2} vs target {nu_mean_true:.2}"
    );

    // Joint refinement warm-started from the decoupled estimate.
    let warm_model = match &dec.model {
        FittedModel::CoreDecoupled {
            blocks,
            r,
            loading_dynamics,
            corr_dynamics,
            corr_tails,
            ..
        } => FittedModel::CoreJoint {
            blocks: blocks.clone(),
            r: *r,
            loading_dynamics: loading_dynamics.clone(),
            corr_dynamics: corr_dynamics.clone(),
            tails: corr_tails.clone(),
            scaling: dec_scaling(&dec.model),
        },
        _ => unreachable!(),
    };
    let joint_opts = FitOptions {
        max_iters: 30,
        warm_start: Some(warm_model),
        ..FitOptions::default()
    };
    let joint =
        fit_core_joint(&z, &u, &blocks, &dist, ScalingKind::Tikhonov, &joint_opts).unwrap();
    let (beta_joint, nu_joint) = summarize(&joint.model);
    assert!(
        (beta_joint - beta_target).abs() < 0.05,
        "joint mean persistence {beta_joint:.4} vs target {beta_target:.4}"
    );
    assert!(
        (nu_joint / nu_mean_true - 1.0).abs() < 0.20,
        "joint mean tail {nu_joint:.2} vs target {nu_mean_true:.2}"
    );

    // Filtered loading paths from the two estimators track each other.
    let mut dec_path = Vec::with_capacity(t_len * n * r);
    let loading_models = dec.model.loading_models().unwrap();
    let mut per_asset = Vec::with_capacity(n);
    for (i, lm) in loading_models.iter().enumerate() {
        let zi = z.column(i).clone_owned();
        let out = filter_loading_decoupled(lm, &zi, &u, true).unwrap();
        per_asset.push(out.tau_path.unwrap());
    }
    let joint_core = joint.model.core_model().unwrap();
    let joint_out = filter_core_joint(&joint_core, &z, &u, true).unwrap();
    let joint_tau = joint_out.tau_path.unwrap();
    let mut joint_path = Vec::with_capacity(t_len * n * r);
    for t in 0..t_len {
        for i in 0..n {
            for j in 0..r {
                dec_path.push(per_asset[i][(t, j)]);
                joint_path.push(joint_tau[(t, i * r + j)]);
            }
        }
    }
    let path_corr = pearson(&dec_path, &joint_path);
    assert!(
        path_corr > 0.95,
        "joint vs decoupled loading paths correlate at {path_corr:.4}"
    );

    let elapsed = t0.elapsed();
    assert!(
        elapsed < Duration::from_secs(900),
        "recovery study took {elapsed:?}"
    );
    eprintln!(
        "ACCEPT a09 recovery: beta {beta_dec:.3}/{beta_joint:.3} (target {beta_target:.3}), nu {nu_dec:.1}/{nu_joint:.1} (target {nu_mean_true:.1}), path corr {path_corr:.4}, {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// a10 — out-of-sample ranking identifies the generating model
// ---------------------------------------------------------------------------

#[test]
fn a10_out_of_sample_ranking_identifies_the_generating_model() {
    let t0 = Instant::now();
    let blocks_true =
        BlockSpec::new(vec![2, 2, 2, 2], vec![0, 0, 1, 1], Structure::SparseBlock).unwrap();
    let n = 8;
    let r = 2;
    let t_len = 1500;
    let split = 1050; // 70/30
    let nu_true = vec![4.0, 4.0, 25.0, 25.0];

    let structures = [
        Structure::FullBlock,
        Structure::SparseBlock,
        Structure::DiagonalBlock,
    ];
    let dists = [
        DistSpec::Gaussian,
        DistSpec::PooledT,
        DistSpec::GroupedT {
            sizes: vec![2, 2, 2, 2],
        },
        DistSpec::PerCoordT,
    ];
    let opts = FitOptions {
        max_iters: 60,
        nu_starts: vec![8.0],
        ..FitOptions::default()
    };

    let mut wins = 0;
    let n_seeds = 10;
    for seed in 0..n_seeds {
        let loading_dyn: Vec<ChannelDynamics> = (0..n)
            .map(|i| {
                let mean = DVector::from_vec(vec![0.5 - 0.03 * i as f64, 0.15]);
                ChannelDynamics::uniform(mean, 0.97, 0.02).unwrap()
            })
            .collect();
        let q = blocks_true.eta_len();
        let corr_dyn = ChannelDynamics::uniform(
            DVector::from_element(q, 0.35),
            0.96,
            0.04,
        )
        .unwrap();
        let tails = ConvolutionT::new(vec![2, 2, 2, 2], nu_true.clone()).unwrap();
        let model = CoreModel::new(
            blocks_true.clone(),
            r,
            loading_dyn,
            corr_dyn,
            tails,
            Scaling::Identity,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let u = standard_normal_matrix(t_len, r, &mut rng);
        let sim = simulate_core(&model, &u, &mut rng).unwrap();
        let z = sim.z;
        let z_in = z.rows(0, split).clone_owned();
        let u_in = u.rows(0, split).clone_owned();

        let mut best = f64::NEG_INFINITY;
        let mut best_is_true = false;
        for structure in &structures {
            let blocks = BlockSpec::new(
                blocks_true.group_sizes.clone(),
                blocks_true.sector_of_group.clone(),
                *structure,
            )
            .unwrap();
            for dist in &dists {
                let fitted = fit_core_decoupled(
                    &z_in,
                    &u_in,
                    &blocks,
                    dist,
                    ScalingKind::Identity,
                    &opts,
                );
                let oos = match fitted {
                    Ok((report, _)) => {
                        match evaluate_oos(&report.model, &z, &u, split) {
                            Ok(o) => o.loglik_oos,
                            Err(_) => f64::NEG_INFINITY,
                        }
                    }
                    Err(_) => f64::NEG_INFINITY,
                };
                let is_true = *structure == Structure::SparseBlock
                    && matches!(dist, DistSpec::GroupedT { .. });
                if oos > best {
                    best = oos;
                    best_is_true = is_true;
                }
            }
        }
        if best_is_true {
            wins += 1;
        }
        eprintln!(
            "  a10 seed {seed}: generating spec {} (best oos {best:.2})",
            if best_is_true { "won" } else { "lost" }
        );
    }

    let elapsed = t0.elapsed();
    assert!(
        wins >= 8,
        "generating specification won only {wins}/{n_seeds} holdout comparisons"
    );
    assert!(
        elapsed < Duration::from_secs(1800),
        "ranking study took {elapsed:?}"
    );
    eprintln!("ACCEPT a10 holdout ranking: {wins}/{n_seeds} wins, {elapsed:?}");
}

// ---------------------------------------------------------------------------
// a11 — the decoupled likelihood decomposition is exact
// ---------------------------------------------------------------------------

#[test]
fn a11_decoupled_likelihood_decomposition_is_exact() {
    let blocks = BlockSpec::new(vec![3, 3], vec![0, 1], Structure::SparseBlock).unwrap();
    let r = 2;
    let t_len = 500;
    let loading_dyn: Vec<ChannelDynamics> = (0..6)
        .map(|i| {
            let mean = DVector::from_vec(vec![0.45 - 0.03 * i as f64, 0.12]);
            ChannelDynamics::uniform(mean, 0.97, 0.02).unwrap()
        })
        .collect();
    let corr_dyn =
        ChannelDynamics::uniform(DVector::from_vec(vec![0.35, 0.25]), 0.96, 0.03).unwrap();
    let tails = ConvolutionT::new(vec![3, 3], vec![5.0, 9.0]).unwrap();
    let model = CoreModel::new(
        blocks.clone(),
        r,
        loading_dyn,
        corr_dyn,
        tails,
        Scaling::Identity,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let u = standard_normal_matrix(t_len, r, &mut rng);
    let sim = simulate_core(&model, &u, &mut rng).unwrap();
    let z = sim.z;

    let opts = FitOptions {
        max_iters: 40,
        nu_starts: vec![6.0, 15.0],
        ..FitOptions::default()
    };
    let (report, _) = fit_core_decoupled(
        &z,
        &u,
        &blocks,
        &DistSpec::GroupedT { sizes: vec![3, 3] },
        ScalingKind::Identity,
        &opts,
    )
    .unwrap();

    // Reported likelihood equals the stepwise filter sum.
    let stepwise = stepwise_loglik(&report.model, &z, &u).unwrap();
    let total_err = (report.loglik - stepwise.sum()).abs() / t_len as f64;
    assert!(
        total_err < 1e-10,
        "report vs stepwise filter: {total_err:.3e} per observation"
    );

    // Per observation, the panel likelihood given the factors decomposes
    // into the log idiosyncratic scales plus the residual density.
    let loading_models = report.model.loading_models().unwrap();
    let mut scale_terms: DVector<f64> = DVector::zeros(t_len);
    let mut resid = DMatrix::zeros(t_len, 6);
    for (i, lm) in loading_models.iter().enumerate() {
        let zi = z.column(i).clone_owned();
        let out = filter_loading_decoupled(lm, &zi, &u, false).unwrap();
        for t in 0..t_len {
            scale_terms[t] -= out.omegas[t].ln();
        }
        resid.column_mut(i).copy_from(&out.residuals);
    }
    let residual_model = report.model.residual_model().unwrap();
    let resid_out = filter_residual_corr(&residual_model, &resid, false).unwrap();
    let mut worst = 0.0f64;
    for t in 0..t_len {
        let rhs = scale_terms[t] + resid_out.stepwise[t];
        worst = worst.max((stepwise[t] - rhs).abs());
    }
    assert!(
        worst < 1e-10,
        "stepwise decomposition: max per-observation gap {worst:.3e}"
    );
    eprintln!(
        "ACCEPT a11 decoupled decomposition: report gap {total_err:.1e}/obs, stepwise gap {worst:.1e}"
    );
}
