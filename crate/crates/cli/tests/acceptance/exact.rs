//! Fixture and oracle-equivalence criteria.

use claimcraft_core::calendar::YearMonth;
use claimcraft_core::eval_expenditure::{expenditure_metrics as metrics, Thresholds};
use claimcraft_core::eval_onset::pi_of_j;
use claimcraft_core::model::{batch_loss, gradients, loss, ModelConfig, TrainExample, Z_LOSS_LAMBDA};
use claimcraft_core::money::Cents;
use claimcraft_core::rwe::{
    ease, fit_empirical_null, fit_lasso_logistic_at, lambda_max, poisson_rr, EmpiricalNull, EstimateStatus, LassoConfig,
};
use claimcraft_core::seed::rng_for;
use claimcraft_core::stats::{auc_delong, holm_adjust, wilcoxon_signed_rank};
use claimcraft_core::synthgen::{generate_cohort, CohortSpec};
use claimcraft_core::tokenizer::{assemble_sequence, assemble_tokens, detokenize, monthly_view};
use claimcraft_core::vocab::{build_vocabulary, decode_cost, encode_cost};
use claimcraft_core::ModelF64;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

use crate::{ensure, fixture, oracles, Check};

pub fn cost_codec() -> Check {
    for (dollars, code) in [(2400, 23), (859, 92), (0, 0)] {
        let got = encode_cost(Cents::from_dollars(dollars));
        ensure!(got == code, "encode({dollars}) = {got}, expected {code}");
    }
    let mut rng = rng_for(1, 0);
    let n = 1_000_000;
    for _ in 0..n {
        // log-uniform over one dollar to just under the largest code
        let cents = 10f64.powf(rng.random_range(2.0..11.97)) as i64;
        let code = encode_cost(Cents(cents));
        let (d, e) = oracles::one_digit(cents);
        ensure!(code as i64 == 10 * d + e, "{cents} cents: code {code}, oracle {}", 10 * d + e);
        let back = decode_cost(code).map_err(|e| e.to_string())?;
        let ratio = back.0 as f64 / cents as f64;
        ensure!((0.5..=1.5).contains(&ratio), "{cents} cents decodes to {}", back.0);
        ensure!(encode_cost(back) == code, "code {code} is not a fixpoint");
    }
    Ok(format!("3 fixtures, {n} random amounts"))
}

pub fn worked_example() -> Check {
    let r = fixture::fixture();
    let cw = fixture::crosswalk();
    let v = build_vocabulary(std::slice::from_ref(&r), &cw).map_err(|e| e.to_string())?;
    let seq = assemble_sequence(&r, &cw, &v).map_err(|e| e.to_string())?;
    let text = seq.texts.join(" ");
    ensure!(text == fixture::EXPECTED, "token string differs:\n{text}");
    let mut back = detokenize(&seq.texts).map_err(|e| e.to_string())?;
    back.enrollee_id = r.enrollee_id;
    ensure!(back == monthly_view(&r, &cw, Some(&v)).map_err(|e| e.to_string())?, "detokenized view differs from the record");
    let again = assemble_tokens(&back).map_err(|e| e.to_string())?;
    ensure!(again == seq.texts, "detokenize then assemble is not a fixpoint");
    Ok(format!("{} tokens byte-identical", seq.texts.len()))
}

pub fn shuffle_determinism() -> Check {
    let spec = CohortSpec {
        seed: 3,
        n_enrollees: 400,
        date_range: (YearMonth::new(2018, 1), YearMonth::new(2022, 12)),
        ..Default::default()
    };
    let c = generate_cohort(&spec).map_err(|e| e.to_string())?;
    let cw = &c.universe.crosswalk;
    let v = build_vocabulary(&c.records, cw).map_err(|e| e.to_string())?;
    let base: Vec<Vec<u32>> =
        c.records.iter().map(|r| assemble_sequence(r, cw, &v).map(|s| s.ids)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut rng = rng_for(3, 1);
    let shuffles = 10_000;
    let mut moved = 0usize;
    for k in 0..shuffles {
        let i = k % c.records.len();
        let mut r = c.records[i].clone();
        // permute claims within each calendar month, months kept in place
        let mut start = 0;
        while start < r.events.len() {
            let m = r.events[start].month();
            let end = start + r.events[start..].iter().take_while(|e| e.month() == m).count();
            r.events[start..end].shuffle(&mut rng);
            start = end;
        }
        moved += (r.events != c.records[i].events) as usize;
        let got = assemble_sequence(&r, cw, &v).map_err(|e| e.to_string())?;
        ensure!(got.ids == base[i], "enrollee {} changed after shuffle {k}", r.enrollee_id);
    }
    ensure!(moved > shuffles / 2, "only {moved} shuffles reordered anything");
    Ok(format!("{shuffles} shuffles ({moved} reordered claims), identical sequences"))
}

/// Tiny model with weights large enough that every gradient sits well above
/// the finite-difference noise floor.
fn rough_model() -> ModelF64 {
    let mut st = ModelF64::new(ModelConfig { seed: 1, ..ModelConfig::tiny(11) }).expect("tiny config");
    let mut rng = rng_for(0xABCD, 0);
    for p in st.params_mut() {
        *p = 0.6 * (rng.random::<f64>() - 0.5) + if *p == 1.0 { 1.0 } else { 0.0 };
    }
    st
}

pub fn gradient_check() -> Check {
    let st = rough_model();
    let batch = vec![
        TrainExample::full(vec![0, 3, 7, 3, 10, 1, 4, 4, 9]),
        TrainExample { ids: vec![2, 2, 9, 4, 5, 8, 6], loss_mask: vec![false, false, true, false, true, true, true] },
    ];
    let (g, _) = gradients(&st, &batch, Z_LOSS_LAMBDA).map_err(|e| e.to_string())?;
    let eps = 1e-4;
    let fd = |i: usize| {
        let eval = |delta: f64| {
            let mut s = st.clone();
            s.params_mut()[i] += delta;
            batch_loss(&s, &batch, Z_LOSS_LAMBDA).expect("loss").total
        };
        (eval(eps) - eval(-eps)) / (2.0 * eps)
    };
    let mut rng = rng_for(77, 0);
    let (mut worst, mut checked) = (0f64, 0usize);
    for spec in st.layout().tensors() {
        let n = spec.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(100);
        for k in idx {
            let i = spec.offset + k;
            let (a, b) = (g.data[i], fd(i));
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            ensure!(rel <= 1e-4, "{}[{k}]: analytic {a:e}, numeric {b:e}, rel {rel:e}", spec.name);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(format!("{checked} coordinates over {} tensors, worst rel err {worst:.2e}", st.layout().tensors().len()))
}

pub fn z_loss_uniform() -> Check {
    for v in [2usize, 11, 101, 892, 4096] {
        let lnv = (v as f64).ln();
        let want = lnv + Z_LOSS_LAMBDA * lnv * lnv;
        let logits = Array2::<f64>::zeros((5, v));
        let l = loss(logits.view(), &[0, 1, (v - 1) as u32, 1, 0], &[true; 5]).map_err(|e| e.to_string())?;
        ensure!((l.total - want).abs() <= 1e-10, "|V|={v}: total {} vs {want}", l.total);
        // all-zero weights make the whole model emit uniform logits
        let st = ModelF64::zeros(ModelConfig::tiny(v)).map_err(|e| e.to_string())?;
        let ex = TrainExample::full((0..8).map(|i| (i * 7 % v) as u32).collect());
        let l = batch_loss(&st, &[ex], Z_LOSS_LAMBDA).map_err(|e| e.to_string())?;
        ensure!((l.total - want).abs() <= 1e-10, "model |V|={v}: total {} vs {want}", l.total);
    }
    Ok("5 vocabulary sizes, direct and through the model".into())
}

pub fn pi_and_delong() -> Check {
    // every non-decreasing vector over the grid, i.e. every multiset
    let grid = [0.0, 15.0, 30.0, 400.0];
    let deltas = [0.0, 15.0, 30.0, 370.0, 385.0, 400.0, 1000.0];
    let mut vectors = 0usize;
    for len in 1..=12usize {
        for a in 0..=len {
            for b in 0..=len - a {
                for c in 0..=len - a - b {
                    let counts = [a, b, c, len - a - b - c];
                    let ages: Vec<f64> = grid.iter().zip(counts).flat_map(|(&g, k)| std::iter::repeat_n(g, k)).collect();
                    vectors += 1;
                    for j in 0..len {
                        for &d in &deltas {
                            ensure!(pi_of_j(&ages, j, d) == oracles::pi_scan(&ages, j, d), "{ages:?} j={j} d={d}");
                        }
                    }
                }
            }
        }
    }
    let mut rng = rng_for(11, 0);
    for k in 0..1000 {
        let m = rng.random_range(1..=200);
        let n = rng.random_range(1..=200);
        // a coarse grid on a third of the instances makes ties common
        let grid = if k % 3 == 0 { 7.0 } else { 1e9 };
        let mut draw = |shift: f64| ((rng.random::<f64>() + shift) * grid).round() / grid;
        let x: Vec<f64> = (0..m).map(|_| draw(0.2)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(0.0)).collect();
        let got = auc_delong(&x, &y).map_err(|e| e.to_string())?;
        let (auc, var) = oracles::delong(&x, &y);
        ensure!((got.auc - auc).abs() <= 1e-12, "instance {k}: auc {} vs {auc}", got.auc);
        ensure!((got.variance - var).abs() <= 1e-12, "instance {k}: variance {} vs {var}", got.variance);
    }
    Ok(format!("{vectors} age vectors x every j x 7 horizons; 1000 DeLong instances"))
}

pub fn wilcoxon_and_holm() -> Check {
    let mut rng = rng_for(5, 0);
    let mut cases = 0;
    while cases < 100 {
        let n = 1 + cases % 12;
        let tied = cases % 4 == 0;
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random::<f64>() * 2.0 - 0.8;
                if tied {
                    (v * 3.0).round()
                } else {
                    v
                }
            })
            .collect();
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        let got = wilcoxon_signed_rank(&d).map_err(|e| e.to_string())?;
        let want = oracles::wilcoxon_exact(&d);
        ensure!(got.exact, "n={n} should use the exact distribution");
        ensure!((got.p - want).abs() < 1e-12, "{d:?}: p {} vs {want}", got.p);
        cases += 1;
    }
    for k in 0..1000 {
        let m = rng.random_range(1..=15);
        let p: Vec<f64> = (0..m)
            .map(|_| {
                let v: f64 = rng.random::<f64>().powi(3);
                if k % 5 == 0 {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let got = holm_adjust(&p).map_err(|e| e.to_string())?;
        let want = oracles::holm(&p);
        ensure!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-15), "{p:?}: {got:?} vs {want:?}");
    }
    Ok("100 enumeration cases, 1000 Holm vectors".into())
}

pub fn expenditure_metrics() -> Check {
    let th = Thresholds::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    let targets = [500.0, 1_500.0, 10_000.0, 15_000.0, 40_000.0, 29_999.99];
    let preds = [1_499.99, 800.0, 15_000.0, 31_000.0, 30_000.0, 14_999.0];
    let m = metrics(&preds, &targets, &th).map_err(|e| e.to_string())?;
    ensure!(m.confusion == [[1, 0, 0], [1, 0, 1], [0, 1, 2]], "confusion {:?}", m.confusion);
    ensure!(m.accuracy == 0.5, "accuracy {}", m.accuracy);
    ensure!(close(m.macro_precision, 7.0 / 18.0) && close(m.macro_recall, 5.0 / 9.0) && close(m.macro_f1, 4.0 / 9.0), "macro {m:?}");
    ensure!(close(m.hnhc.precision, 0.5) && close(m.hnhc.recall, 1.0) && close(m.hnhc.f1, 2.0 / 3.0), "hnhc {:?}", m.hnhc);
    ensure!(close(m.mae, (999.99 + 700.0 + 5_000.0 + 16_000.0 + 10_000.0 + 15_000.99) / 6.0), "mae {}", m.mae);

    let t = [100.0, 2_000.0, 20_000.0, 50_000.0, 0.0];
    let perfect = metrics(&t, &t, &th).map_err(|e| e.to_string())?;
    ensure!(perfect.r2 == Some(1.0) && perfect.mae == 0.0, "perfect predictor {perfect:?}");
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let flat = metrics(&[mean; 5], &t, &th).map_err(|e| e.to_string())?;
    ensure!(flat.r2.is_some_and(|r| r.abs() < 1e-12), "mean predictor r2 {:?}", flat.r2);

    let edges = [1_500.0, 15_000.0, 30_000.0];
    let m = metrics(&edges, &edges, &th).map_err(|e| e.to_string())?;
    ensure!(m.confusion == [[0, 0, 0], [0, 1, 0], [0, 0, 2]], "boundaries {:?}", m.confusion);
    ensure!(m.hnhc.recall == 1.0, "30000 should be high-need");
    let below = [1_499.999, 14_999.999, 29_999.999];
    let m = metrics(&below, &edges, &th).map_err(|e| e.to_string())?;
    ensure!(m.confusion == [[0, 0, 0], [1, 0, 0], [0, 1, 1]], "just below boundaries {:?}", m.confusion);
    Ok("confusion, macro and HNHC scores, R² extremes, half-open boundaries".into())
}

fn logistic_data(n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = rng_for(seed, 0);
    let beta: Vec<f64> = (0..p).map(|j| 0.8 - 0.3 * j as f64).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let r: Vec<f64> = (0..p).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eta = 0.2 + r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        y.push(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()));
        x.push(r);
    }
    (x, y)
}

pub fn poisson_and_lasso() -> Check {
    let estimated = |s: EstimateStatus| match s {
        EstimateStatus::Estimated(e) => Ok(e),
        EstimateStatus::Excluded(w) => Err(format!("excluded: {w}")),
    };
    let treated = [true, true, true, false, false, false];
    let counts = [4.0, 6.0, 2.0, 2.0, 3.0, 1.0];
    let exposure = [2.0, 1.0, 1.0, 0.5, 1.0, 2.0];
    let e = estimated(poisson_rr("o", &treated, &counts, &exposure).map_err(|e| e.to_string())?)?;
    let want = (12.0 / 4.0) / (6.0 / 3.5);
    ensure!((e.rr - want).abs() < 1e-6, "rate ratio {} vs {want}", e.rr);

    let mut rng = rng_for(21, 0);
    let n = 400;
    let treated: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let exposure: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let frailty = Gamma::new(0.5, 2.0).map_err(|e| e.to_string())?;
    let counts: Vec<f64> = (0..n)
        .map(|i| {
            let rate = if treated[i] { 1.5 } else { 1.0 } * frailty.sample(&mut rng) * exposure[i];
            Poisson::new(rate.max(1e-9)).expect("positive rate").sample(&mut rng)
        })
        .collect();
    let e = estimated(poisson_rr("o", &treated, &counts, &exposure).map_err(|e| e.to_string())?)?;
    let (log_rr, se, se_model) = oracles::two_group_sandwich(&treated, &counts, &exposure);
    ensure!((e.log_rr - log_rr).abs() < 1e-8, "log rr {} vs {log_rr}", e.log_rr);
    ensure!((e.se - se).abs() < 1e-8, "robust se {} vs {se}", e.se);
    ensure!((e.se_model - se_model).abs() < 1e-8, "model se {} vs {se_model}", e.se_model);

    let tight = LassoConfig { tol: 1e-13, max_outer: 200, max_inner: 20_000, ..Default::default() };
    let (x, y) = logistic_data(300, 4, 1);
    let fit = fit_lasso_logistic_at(&x, &y, 0.0, &tight).map_err(|e| e.to_string())?;
    let newton = oracles::newton_logistic(&x, &y);
    let got: Vec<f64> = [fit.intercept].into_iter().chain(fit.coef.iter().copied()).collect();
    let gap = got.iter().zip(&newton).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(gap < 1e-4, "lambda 0: {got:?} vs Newton {newton:?}");

    let (x, y) = logistic_data(200, 5, 2);
    let lmax = lambda_max(&x, &y);
    for l in [lmax, 10.0 * lmax, 1e6] {
        let fit = fit_lasso_logistic_at(&x, &y, l, &tight).map_err(|e| e.to_string())?;
        ensure!(fit.coef.iter().all(|b| *b == 0.0), "lambda {l}: {:?}", fit.coef);
    }
    Ok(format!("robust se {se:.6}, Newton gap {gap:.1e}"))
}

pub fn ease_and_null() -> Check {
    let mut worst = 0f64;
    for mu in [-1.0, -0.3, 0.0, 0.1, 0.5, 1.2] {
        for sigma in [0.01, 0.05, 0.3, 1.0] {
            let e = ease(&EmpiricalNull { mu, sigma });
            let q = oracles::abs_normal_mean(mu, sigma);
            ensure!((e - q).abs() < 1e-6, "({mu}, {sigma}): {e} vs {q}");
            worst = worst.max((e - q).abs());
        }
    }
    let reps = 200;
    let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
    for r in 0..reps {
        let mut rng = rng_for(31, r);
        let se: Vec<f64> = (0..200).map(|_| rng.random_range(0.005..0.015)).collect();
        let theta: Vec<f64> =
            se.iter().map(|s| Normal::new(0.1, (0.05f64.powi(2) + s * s).sqrt()).expect("finite").sample(&mut rng)).collect();
        let n = fit_empirical_null(&theta, &se).map_err(|e| e.to_string())?;
        mus.push(n.mu);
        sigmas.push(n.sigma);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let sd = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    // one fit at n = 200 against the Monte-Carlo spread of such fits
    let (sm, ss) = (sd(&mus), sd(&sigmas));
    ensure!((mus[0] - 0.1).abs() < 2.0 * sm, "mu {} outside 0.1 ± 2 × {sm}", mus[0]);
    ensure!((sigmas[0] - 0.05).abs() < 2.0 * ss, "sigma {} outside 0.05 ± 2 × {ss}", sigmas[0]);
    // and the average over replications within two standard errors
    let k = (reps as f64).sqrt();
    ensure!((mean(&mus) - 0.1).abs() < 2.0 * sm / k, "mean mu {}", mean(&mus));
    ensure!((mean(&sigmas) - 0.05).abs() < 2.0 * ss / k, "mean sigma {}", mean(&sigmas));
    Ok(format!("quadrature gap {worst:.1e}; mean fit ({:.4}, {:.4})", mean(&mus), mean(&sigmas)))
}
