use std::collections::HashMap;

use claimcraft_core::model::{ModelConfig, ModelState};
use claimcraft_core::rwe::*;
use claimcraft_core::seed::rng_for;
use claimcraft_core::stats::auc_delong;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist, Poisson};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unpenalized logistic regression by plain Newton iterations on the full
/// Hessian, intercept in column 0.
fn newton_logistic(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let n = x.len();
    let p = x[0].len() + 1;
    let xm = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yv = DVector::from_fn(n, |i, _| y[i] as u8 as f64);
    let mut b = DVector::zeros(p);
    for _ in 0..100 {
        let mu = (&xm * &b).map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let h = xm.transpose() * DMatrix::from_diagonal(&w) * &xm;
        let g = xm.transpose() * (&yv - &mu);
        let step = h.lu().solve(&g).unwrap();
        b += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    b.iter().copied().collect()
}

fn logistic_data(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = rng_for(seed, 0);
    let beta: Vec<f64> = (0..p).map(|j| 0.8 - 0.3 * j as f64).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eta = 0.2 + r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        y.push(rng.random::<f64>() < sigmoid(eta));
        x.push(r);
    }
    (x, y)
}

fn tight() -> LassoConfig {
    LassoConfig { tol: 1e-13, max_outer: 200, max_inner: 20_000, ..Default::default() }
}

#[test]
fn lasso_at_zero_penalty_matches_newton() {
    let (x, y) = logistic_data(300, 4, 1);
    let fit = fit_lasso_logistic_at(&x, &y, 0.0, &tight()).unwrap();
    let oracle = newton_logistic(&x, &y);
    assert!((fit.intercept - oracle[0]).abs() < 1e-4, "{} vs {}", fit.intercept, oracle[0]);
    for (a, b) in fit.coef.iter().zip(&oracle[1..]) {
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn large_penalty_zeroes_every_coefficient() {
    let (x, y) = logistic_data(200, 5, 2);
    let lmax = lambda_max(&x, &y);
    for l in [lmax, 2.0 * lmax, 1e3] {
        let fit = fit_lasso_logistic_at(&x, &y, l, &tight()).unwrap();
        assert!(fit.coef.iter().all(|b| *b == 0.0), "{l}: {:?}", fit.coef);
        let ybar = y.iter().filter(|v| **v).count() as f64 / y.len() as f64;
        assert!((sigmoid(fit.intercept) - ybar).abs() < 1e-8);
    }
    // just below the threshold something enters
    let fit = fit_lasso_logistic_at(&x, &y, 0.9 * lmax, &tight()).unwrap();
    assert!(fit.n_selected() > 0);
}

#[test]
fn duplicated_column_keeps_fitted_probabilities() {
    let (x, y) = logistic_data(250, 3, 3);
    let dup: Vec<Vec<f64>> = x.iter().map(|r| [r.as_slice(), &r[..1]].concat()).collect();
    for l in [0.0, 0.005, 0.02] {
        let a = fit_lasso_logistic_at(&x, &y, l, &tight()).unwrap();
        let b = fit_lasso_logistic_at(&dup, &y, l, &tight()).unwrap();
        let combined = b.coef[0] + b.coef[3];
        assert!((combined - a.coef[0]).abs() < 1e-5, "lambda {l}");
        for (ra, rb) in x.iter().zip(&dup) {
            assert!((a.prob(ra) - b.prob(rb)).abs() < 1e-6, "lambda {l}");
        }
    }
}

#[test]
fn cross_validation_is_seed_deterministic_and_picks_from_path() {
    let (x, y) = logistic_data(300, 6, 4);
    let cfg = LassoConfig { seed: 9, ..Default::default() };
    let a = fit_lasso_logistic(&x, &y, None, &cfg).unwrap();
    let b = fit_lasso_logistic(&x, &y, None, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lambdas.len(), 30);
    assert!(a.lambdas.windows(2).all(|w| w[0] > w[1]));
    assert!(a.lambdas.contains(&a.selected.lambda));
    let best = a.cv_deviance.iter().copied().fold(f64::INFINITY, f64::min);
    let i = a.lambdas.iter().position(|l| *l == a.selected.lambda).unwrap();
    assert_eq!(a.cv_deviance[i], best);
}

#[test]
fn lasso_reports_non_convergence() {
    let (x, y) = logistic_data(100, 3, 5);
    let cfg = LassoConfig { max_outer: 1, tol: 1e-15, ..Default::default() };
    match fit_lasso_logistic_at(&x, &y, 0.0, &cfg) {
        Err(RweError::NoConvergence { iterations, .. }) => assert_eq!(iterations, 1),
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

fn frame_from(covs: Vec<Vec<f64>>, arms: Vec<Arm>) -> StudyFrame {
    let p = covs[0].len();
    StudyFrame {
        covariate_names: (0..p).map(|j| format!("x{j}")).collect(),
        outcomes: vec![],
        units: covs
            .into_iter()
            .zip(arms)
            .enumerate()
            .map(|(i, (c, arm))| StudyUnit { id: i as u64, arm, covariates: c, embedding: None, outcomes: vec![], exposure: 1.0 })
            .collect(),
    }
}

fn ps_auc(frame: &StudyFrame, fit: &PsFit) -> f64 {
    let a: Vec<f64> = frame.units.iter().zip(&fit.ps).filter(|(u, _)| u.arm == Arm::A).map(|(_, p)| *p).collect();
    let b: Vec<f64> = frame.units.iter().zip(&fit.ps).filter(|(u, _)| u.arm == Arm::B).map(|(_, p)| *p).collect();
    auc_delong(&a, &b).unwrap().auc
}

#[test]
fn propensity_randomized_and_threshold_assignment() {
    let mut rng = rng_for(11, 0);
    let covs: Vec<Vec<f64>> = (0..2000).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
    let random: Vec<Arm> = (0..2000).map(|_| if rng.random::<bool>() { Arm::A } else { Arm::B }).collect();
    let thresh: Vec<Arm> = covs.iter().map(|c| if c[0] > 0.5 { Arm::A } else { Arm::B }).collect();
    let fr = frame_from(covs.clone(), random);
    let fit = estimate_ps(&fr, false, &LassoConfig::default()).unwrap();
    assert!((ps_auc(&fr, &fit) - 0.5).abs() < 0.05, "{}", ps_auc(&fr, &fit));
    assert!(fit.ps.iter().all(|p| *p > 0.0 && *p < 1.0));
    let ft = frame_from(covs, thresh);
    let fit = estimate_ps(&ft, false, &LassoConfig::default()).unwrap();
    assert!(ps_auc(&ft, &fit) > 0.9);
    assert!((fit.auc - ps_auc(&ft, &fit)).abs() < 1e-12);
}

#[test]
fn zero_embeddings_leave_scores_unchanged() {
    let mut rng = rng_for(12, 0);
    let covs: Vec<Vec<f64>> = (0..400).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let arms: Vec<Arm> = covs.iter().map(|c| if rng.random::<f64>() < sigmoid(2.0 * c[1] - 1.0) { Arm::A } else { Arm::B }).collect();
    let mut fr = frame_from(covs, arms);
    for u in &mut fr.units {
        u.embedding = Some(vec![0.0; 4]);
    }
    let a = estimate_ps(&fr, false, &LassoConfig::default()).unwrap();
    let b = estimate_ps(&fr, true, &LassoConfig::default()).unwrap();
    for (x, y) in a.ps.iter().zip(&b.ps) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn invalid_frames_are_rejected() {
    let mut fr = frame_from(vec![vec![0.0], vec![1.0]], vec![Arm::A, Arm::B]);
    fr.units[0].exposure = 0.0;
    assert!(matches!(fr.validate(), Err(RweError::Frame(_))));
    let mut fr = frame_from(vec![vec![0.0], vec![1.0]], vec![Arm::A, Arm::B]);
    fr.units[1].covariates[0] = f64::NAN;
    assert!(fr.validate().is_err());
}

#[test]
fn greedy_matching_examples() {
    let m = match_1to1(&[0.2, 0.8], &[0.25, 0.5, 0.9], None);
    assert_eq!(m.pairs, vec![(1, 2), (0, 0)]);
    assert!(m.unmatched_treated.is_empty());
    let m = match_1to1(&[0.2, 0.8], &[0.25, 0.85], Some(0.01));
    assert!(m.pairs.is_empty());
    assert_eq!(m.unmatched_treated, vec![1, 0]);
    let t = [0.1, 0.4, 0.4, 0.7];
    let c = [0.7, 0.3, 0.4, 0.1, 0.4, 0.9];
    let m = match_1to1(&t, &c, Some(0.0));
    assert_eq!(m.pairs.len(), 4);
    assert!(m.pairs.iter().all(|&(a, b)| t[a] == c[b]));
    // equal distances go to the lower control index
    let m = match_1to1(&[0.5], &[0.6, 0.4], None);
    assert_eq!(m.pairs, vec![(0, 0)]);
    // more treated than controls: the highest score matches first
    let m = match_1to1(&[0.3, 0.6, 0.9], &[0.5], None);
    assert_eq!(m.pairs, vec![(2, 0)]);
    assert_eq!(m.unmatched_treated, vec![1, 0]);
}

/// Brute-force greedy reference: scan every available control.
fn greedy_reference(t: &[f64], c: &[f64]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| t[b].partial_cmp(&t[a]).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; c.len()];
    let mut out = Vec::new();
    for i in order {
        let best = (0..c.len()).filter(|&j| !used[j]).min_by(|&a, &b| (c[a] - t[i]).abs().partial_cmp(&(c[b] - t[i]).abs()).unwrap().then(a.cmp(&b)));
        if let Some(j) = best {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

proptest! {
    #[test]
    fn matching_agrees_with_brute_force(
        t in prop::collection::vec(0u32..40, 1..15),
        c in prop::collection::vec(0u32..40, 1..15),
    ) {
        let t: Vec<f64> = t.iter().map(|v| *v as f64 / 40.0).collect();
        let c: Vec<f64> = c.iter().map(|v| *v as f64 / 40.0).collect();
        prop_assert_eq!(match_1to1(&t, &c, None).pairs, greedy_reference(&t, &c));
    }

    #[test]
    fn matching_is_translation_invariant(
        t in prop::collection::vec(0u32..64, 1..12),
        c in prop::collection::vec(0u32..64, 1..12),
        shift in -8i32..8,
    ) {
        // dyadic values keep the shifted distances exact
        let t: Vec<f64> = t.iter().map(|v| *v as f64 / 64.0).collect();
        let c: Vec<f64> = c.iter().map(|v| *v as f64 / 64.0).collect();
        let s = shift as f64 / 4.0;
        let ts: Vec<f64> = t.iter().map(|v| v + s).collect();
        let cs: Vec<f64> = c.iter().map(|v| v + s).collect();
        prop_assert_eq!(match_1to1(&t, &c, Some(0.1)), match_1to1(&ts, &cs, Some(0.1)));
    }
}

#[test]
fn poisson_rate_ratio_closed_form() {
    let treated = vec![true, true, true, false, false, false];
    let counts = vec![4.0, 6.0, 2.0, 2.0, 3.0, 1.0];
    let exposure = vec![1.0; 6];
    let EstimateStatus::Estimated(e) = poisson_rr("o", &treated, &counts, &exposure).unwrap() else { panic!() };
    assert!((e.rr - 2.0).abs() < 1e-6);
    // unequal exposure: ratio of rates
    let exposure = vec![2.0, 1.0, 1.0, 0.5, 1.0, 2.0];
    let EstimateStatus::Estimated(e) = poisson_rr("o", &treated, &counts, &exposure).unwrap() else { panic!() };
    assert!((e.rr - (12.0 / 4.0) / (6.0 / 3.5)).abs() < 1e-9);
    assert!(e.se > 0.0);
    let same = vec![1.0, 2.0, 3.0, 3.0, 2.0, 1.0];
    let EstimateStatus::Estimated(e) = poisson_rr("o", &treated, &same, &[1.0; 6]).unwrap() else { panic!() };
    assert!(e.log_rr.abs() < 1e-10);
}

#[test]
fn poisson_zero_event_arms_are_excluded() {
    let t = vec![true, false];
    assert!(matches!(poisson_rr("o", &t, &[0.0, 0.0], &[1.0, 1.0]).unwrap(), EstimateStatus::Excluded(_)));
    assert!(matches!(poisson_rr("o", &t, &[3.0, 0.0], &[1.0, 1.0]).unwrap(), EstimateStatus::Excluded(_)));
    assert!(poisson_rr("o", &t, &[-1.0, 1.0], &[1.0, 1.0]).is_err());
}

#[test]
fn sandwich_matches_dense_formula_under_overdispersion() {
    let mut rng = rng_for(21, 0);
    let n = 400;
    let treated: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let exposure: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    // gamma-mixed Poisson counts: variance well above the mean
    let counts: Vec<f64> = (0..n)
        .map(|i| {
            let frailty: f64 = rand_distr::Gamma::new(0.5, 2.0).unwrap().sample(&mut rng);
            let rate = if treated[i] { 1.5 } else { 1.0 } * frailty * exposure[i];
            Poisson::new(rate.max(1e-9)).unwrap().sample(&mut rng)
        })
        .collect();
    let EstimateStatus::Estimated(e) = poisson_rr("o", &treated, &counts, &exposure).unwrap() else { panic!() };

    // closed-form MLE for the two-group model
    let rate = |arm: bool| {
        let (c, t) = (0..n).filter(|&i| treated[i] == arm).fold((0.0, 0.0), |(c, t), i| (c + counts[i], t + exposure[i]));
        c / t
    };
    let (ra, rb) = (rate(true), rate(false));
    assert!((e.log_rr - (ra / rb).ln()).abs() < 1e-10);
    // independent sandwich: bread from the 2x2 information, meat from
    // score outer products
    let mut info = DMatrix::<f64>::zeros(2, 2);
    let mut meat = DMatrix::<f64>::zeros(2, 2);
    for i in 0..n {
        let x = DVector::from_vec(vec![1.0, treated[i] as u8 as f64]);
        let mu = exposure[i] * if treated[i] { ra } else { rb };
        info += &x * x.transpose() * mu;
        meat += &x * x.transpose() * (counts[i] - mu).powi(2);
    }
    let bread = info.try_inverse().unwrap();
    let v = &bread * meat * &bread;
    assert!((e.se - v[(1, 1)].sqrt()).abs() < 1e-8, "{} vs {}", e.se, v[(1, 1)].sqrt());
    assert!((e.se_model - bread[(1, 1)].sqrt()).abs() < 1e-8);
    assert!(e.se > 1.3 * e.se_model, "overdispersion should inflate the robust se");
}

#[test]
fn poisson_irls_matches_newton_with_covariate() {
    let mut rng = rng_for(22, 0);
    let n = 300;
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => (i % 2) as f64,
        _ => ((i * 7919) % 100) as f64 / 100.0,
    });
    let off: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| Poisson::new((0.2 + 0.4 * x[(i, 1)] - 0.7 * x[(i, 2)] + off[i]).exp()).unwrap().sample(&mut rng))
        .collect();
    let fit = poisson_irls(&x, &y, &off, 100, 1e-12).unwrap();
    // score equations hold at the optimum
    for j in 0..3 {
        let s: f64 = (0..n).map(|i| x[(i, j)] * (y[i] - (x.row(i).dot(&fit.beta.transpose()) + off[i]).exp())).sum();
        assert!(s.abs() < 1e-8, "score {j} = {s}");
    }
}

/// Composite Simpson over mu +- 12 sigma.
fn abs_normal_quadrature(mu: f64, sigma: f64) -> f64 {
    let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let n = 200_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| x.abs() * (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn ease_matches_quadrature_on_a_grid() {
    assert_eq!(ease(&EmpiricalNull { mu: 0.0, sigma: 0.0 }), 0.0);
    assert_eq!(ease(&EmpiricalNull { mu: 0.1, sigma: 0.0 }), 0.1);
    assert_eq!(ease(&EmpiricalNull { mu: -0.1, sigma: 0.0 }), 0.1);
    for mu in [-1.0, -0.3, 0.0, 0.1, 0.5, 1.2] {
        for sigma in [0.01, 0.05, 0.3, 1.0] {
            let e = ease(&EmpiricalNull { mu, sigma });
            let q = abs_normal_quadrature(mu, sigma);
            assert!((e - q).abs() < 1e-6, "({mu}, {sigma}): {e} vs {q}");
        }
    }
}

proptest! {
    #[test]
    fn ease_is_monotone_in_sigma(mu in -2.0f64..2.0, s1 in 0.0f64..2.0, s2 in 0.0f64..2.0) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let a = ease(&EmpiricalNull { mu, sigma: lo });
        let b = ease(&EmpiricalNull { mu, sigma: hi });
        prop_assert!(a <= b + 1e-12);
        prop_assert!(a >= mu.abs() - 1e-12);
    }
}

#[test]
fn empirical_null_degenerate_and_too_few() {
    let n = fit_empirical_null(&[0.0; 8], &[0.1; 8]).unwrap();
    assert_eq!((n.mu, n.sigma), (0.0, 0.0));
    assert!(matches!(fit_empirical_null(&[0.1; 4], &[0.1; 4]), Err(RweError::TooFewControls(4))));
    // non-finite estimates do not count toward the minimum
    let mut t = vec![0.1; 5];
    t[0] = f64::NAN;
    assert!(matches!(fit_empirical_null(&t, &[0.1; 5]), Err(RweError::TooFewControls(4))));
}

#[test]
fn empirical_null_recovers_known_parameters() {
    let reps = 200;
    let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
    for r in 0..reps {
        let mut rng = rng_for(31, r);
        let se: Vec<f64> = (0..200).map(|_| rng.random_range(0.005..0.015)).collect();
        let theta: Vec<f64> = se
            .iter()
            .map(|s| NormalDist::new(0.1, (0.05f64.powi(2) + s * s).sqrt()).unwrap().sample(&mut rng))
            .collect();
        let n = fit_empirical_null(&theta, &se).unwrap();
        mus.push(n.mu);
        sigmas.push(n.sigma);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    // Monte-Carlo spread of a single fit is the reference scale
    assert!((mus[0] - 0.1).abs() < 2.0 * sd(&mus), "mu {} sd {}", mus[0], sd(&mus));
    assert!((sigmas[0] - 0.05).abs() < 2.0 * sd(&sigmas), "sigma {} sd {}", sigmas[0], sd(&sigmas));
    // and the estimators are close to unbiased
    assert!((mean(&mus) - 0.1).abs() < 3.0 * sd(&mus) / (reps as f64).sqrt());
    assert!((mean(&sigmas) - 0.05).abs() < 0.005);
}

/// Two-parameter log-likelihood evaluated directly.
fn loglik(theta: &[f64], se: &[f64], mu: f64, sigma: f64) -> f64 {
    theta
        .iter()
        .zip(se)
        .map(|(t, s)| {
            let v = sigma * sigma + s * s;
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (t - mu).powi(2) / v)
        })
        .sum()
}

#[test]
fn empirical_null_with_outlier_maximizes_likelihood() {
    let mut theta = vec![0.02, -0.01, 0.03, 0.0, -0.02, 0.01, 0.015, -0.005];
    theta.push(3.0);
    let se = vec![0.05; theta.len()];
    let n = fit_empirical_null(&theta, &se).unwrap();
    assert!(n.mu.is_finite() && n.sigma > 0.0);
    assert!(n.mu > -1.0 && n.mu < 3.0);
    // no point on a dense 2-D grid beats the fit
    let best = loglik(&theta, &se, n.mu, n.sigma);
    for i in 0..=400 {
        for k in 0..=200 {
            let mu = -2.0 + 5.0 * i as f64 / 400.0;
            let sigma = (-6.0 + 7.0 * k as f64 / 200.0).exp();
            assert!(loglik(&theta, &se, mu, sigma) <= best + 1e-6, "({mu}, {sigma})");
        }
    }
}

#[test]
fn calibration_examples() {
    let zero = EmpiricalNull { mu: 0.0, sigma: 0.0 };
    let c = calibrate_estimate(0.3, 0.1, &zero, 0.95);
    let z = 1.959963984540054;
    assert!((c.lo - (0.3 - z * 0.1)).abs() < 1e-12 && (c.hi - (0.3 + z * 0.1)).abs() < 1e-12);
    let e = EffectEstimate { outcome: "o".into(), log_rr: 0.3, se: 0.1, se_model: 0.1, rr: 0.3f64.exp(), events_a: 1.0, events_b: 1.0, calibrated: None };
    let (lo, hi) = e.ci(0.95);
    assert!((lo - c.lo).abs() < 1e-12 && (hi - c.hi).abs() < 1e-12);
    let w = calibrate_estimate(0.3, 0.1, &EmpiricalNull { mu: 0.0, sigma: 0.2 }, 0.95);
    assert!(w.lo < c.lo && w.hi > c.hi);
    assert!(w.p > c.p);
    // a shifted null moves the interval toward zero
    let s = calibrate_estimate(0.3, 0.1, &EmpiricalNull { mu: 0.25, sigma: 0.05 }, 0.95);
    assert!(s.lo < 0.0 && s.hi > 0.0 && s.p > 0.05);
}

fn embedding_model(vocab_size: usize) -> ModelState<f64> {
    ModelState::new(ModelConfig { d_model: 12, max_positions: 32, seed: 3, ..ModelConfig::tiny(vocab_size) }).unwrap()
}

#[test]
fn embeddings_are_deterministic_and_truncation_first() {
    let spec = ConfoundedSpec { n_units: 12, ..Default::default() };
    let v = confounded_vocabulary(&spec);
    let st = embedding_model(v.len());
    let sim = simulate_confounded_study(&spec, &v, 1).unwrap();
    let s = &sim.sequences[&0];
    let short = &s[..20.min(s.len())];
    let a = extract_embedding(&st, &v, short, Pooling::LastToken).unwrap();
    let b = extract_embedding(&st, &v, short, Pooling::LastToken).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    // appending later tokens then cutting back gives the same vector
    let mut longer = short.to_vec();
    longer.extend_from_slice(&s[..5]);
    assert_eq!(extract_embedding(&st, &v, &longer[..short.len()], Pooling::LastToken).unwrap(), a);
    assert_eq!(extract_embedding(&st, &v, short, Pooling::Mean).unwrap().len(), 12);
    assert!(matches!(extract_embedding(&st, &v, &[], Pooling::Mean), Err(RweError::Empty(_))));
    // histories beyond the context are clipped rather than rejected
    assert!(s.len() > 32);
    assert_eq!(extract_embedding(&st, &v, s, Pooling::LastToken).unwrap().len(), 12);
}

#[test]
fn simulated_study_is_seeded_and_confounded() {
    let spec = ConfoundedSpec { n_units: 1500, ..Default::default() };
    let v = confounded_vocabulary(&spec);
    let a = simulate_confounded_study(&spec, &v, 5).unwrap();
    let b = simulate_confounded_study(&spec, &v, 5).unwrap();
    assert_eq!(a, b);
    a.frame.validate().unwrap();
    let share = |u: bool| {
        let idx: Vec<usize> = (0..a.confounded.len()).filter(|&i| a.confounded[i] == u).collect();
        idx.iter().filter(|&&i| a.frame.units[i].arm == Arm::A).count() as f64 / idx.len() as f64
    };
    assert!(share(true) > share(false) + 0.2);
    // covariate-only analysis sees the confounding as negative-control bias
    let r = run_study(&a.frame, &StudyConfig::default()).unwrap();
    let null = r.null.unwrap();
    assert!(null.mu > 0.1, "{null:?}");
    assert!(r.ease.unwrap() > 0.1);
}

#[test]
fn study_on_unconfounded_data_has_small_bias() {
    let spec = ConfoundedSpec { n_units: 2000, treatment_effect_of_confounder: 0.0, ..Default::default() };
    let v = confounded_vocabulary(&spec);
    let sim = simulate_confounded_study(&spec, &v, 6).unwrap();
    let r = run_study(&sim.frame, &StudyConfig::default()).unwrap();
    assert!(r.ease.unwrap() < 0.1, "{:?}", r.null);
    let primary: Vec<&EffectEstimate> = r.estimates(OutcomeRole::Primary).collect();
    assert_eq!(primary.len(), 3);
    // true log rate ratios 0, 0.4, -0.4 fall inside the calibrated intervals
    for (e, truth) in primary.iter().zip([0.0, 0.4, -0.4]) {
        let c = e.calibrated.as_ref().unwrap();
        assert!(c.lo < truth && truth < c.hi, "{} [{}, {}] vs {truth}", e.outcome, c.lo, c.hi);
    }
    let mut csv = Vec::new();
    write_results_csv(&mut csv, &r, 0.95).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + sim.frame.outcomes.len());
    assert!(text.starts_with("outcome,role,status,rr,"));
}

#[test]
fn rare_outcomes_are_screened() {
    let mut fr = frame_from((0..400).map(|i| vec![(i % 7) as f64]).collect(), (0..400).map(|i| if i % 2 == 0 { Arm::A } else { Arm::B }).collect());
    fr.outcomes = vec![OutcomeDef { id: "rare".into(), role: OutcomeRole::Primary }];
    for (i, u) in fr.units.iter_mut().enumerate() {
        u.outcomes = vec![(i == 3) as u8 as f64];
    }
    let r = run_study(&fr, &StudyConfig::default()).unwrap();
    assert!(matches!(&r.outcomes[0].status, EstimateStatus::Excluded(w) if w.contains("prevalence")));
    assert!(r.null.is_none());
}

#[test]
fn attach_embeddings_requires_every_sequence() {
    let spec = ConfoundedSpec { n_units: 10, ..Default::default() };
    let v = confounded_vocabulary(&spec);
    let st = embedding_model(v.len());
    let mut sim = simulate_confounded_study(&spec, &v, 2).unwrap();
    let mut partial: HashMap<u64, Vec<u32>> = sim.sequences.clone();
    partial.remove(&3);
    assert!(attach_embeddings(&mut sim.frame.clone(), &st, &v, &partial, Pooling::LastToken).is_err());
    attach_embeddings(&mut sim.frame, &st, &v, &sim.sequences, Pooling::LastToken).unwrap();
    assert!(sim.frame.units.iter().all(|u| u.embedding.as_ref().map(Vec::len) == Some(12)));
}
