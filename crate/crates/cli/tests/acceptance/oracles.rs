//! Slow, obviously-correct reference computations.

use nalgebra::{DMatrix, DVector};

/// Half-up rounding of a cent amount to one significant digit of dollars,
/// worked on the decimal string. Returns `(d, e)` with value `d × 10^e`.
pub fn one_digit(cents: i64) -> (i64, i64) {
    let s = cents.to_string();
    let k = s.len() as i64;
    let lead = (s.as_bytes()[0] - b'0') as i64;
    let next = s.as_bytes().get(1).map_or(0, |b| (b - b'0') as i64);
    let d = if next >= 5 { lead + 1 } else { lead };
    if d == 10 {
        (1, k - 2)
    } else {
        (d, k - 3)
    }
}

/// Latest index before `j` whose age is at least `delta` below age `j`.
pub fn pi_scan(ages: &[f64], j: usize, delta: f64) -> Option<usize> {
    (0..j).filter(|&i| ages[i] <= ages[j] - delta).last()
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// AUC by counting every pair and DeLong variance from the structural
/// components.
pub fn delong(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (m, n) = (x.len() as f64, y.len() as f64);
    let v10: Vec<f64> = x.iter().map(|&a| y.iter().map(|&b| psi(a, b)).sum::<f64>() / n).collect();
    let v01: Vec<f64> = y.iter().map(|&b| x.iter().map(|&a| psi(a, b)).sum::<f64>() / m).collect();
    let auc = x.iter().flat_map(|&a| y.iter().map(move |&b| psi(a, b))).sum::<f64>() / (m * n);
    let s = |v: &[f64]| {
        if v.len() < 2 {
            return 0.0;
        }
        v.iter().map(|t| (t - auc) * (t - auc)).sum::<f64>() / (v.len() - 1) as f64
    };
    (auc, s(&v10) / m + s(&v01) / n)
}

/// Two-sided signed-rank p-value by enumerating all 2^n sign assignments.
pub fn wilcoxon_exact(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    let ranks: Vec<f64> = nz
        .iter()
        .map(|d| {
            let below = nz.iter().filter(|e| e.abs() < d.abs()).count() as f64;
            let equal = nz.iter().filter(|e| e.abs() == d.abs()).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let obs: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (w <= obs + 1e-9) as u64;
        ge += (w >= obs - 1e-9) as u64;
    }
    (2.0 * le.min(ge) as f64 / (1u64 << n) as f64).min(1.0)
}

/// adj_i = min(1, max over p_j <= p_i of (m - #{p_k < p_j}) p_j)
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    p.iter()
        .map(|&pi| {
            p.iter()
                .filter(|&&pj| pj <= pi)
                .map(|&pj| (m - p.iter().filter(|&&pk| pk < pj).count()) as f64 * pj)
                .fold(0.0, f64::max)
                .min(1.0)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unpenalized logistic regression by full Newton steps; intercept first.
pub fn newton_logistic(x: &[Vec<f64>], y: &[bool]) -> Vec<f64> {
    let (n, p) = (x.len(), x[0].len() + 1);
    let xm = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let yv = DVector::from_fn(n, |i, _| y[i] as u8 as f64);
    let mut b = DVector::zeros(p);
    for _ in 0..100 {
        let mu = (&xm * &b).map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let h = xm.transpose() * DMatrix::from_diagonal(&w) * &xm;
        let step = h.lu().solve(&(xm.transpose() * (&yv - &mu))).expect("non-singular Hessian");
        b += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    b.iter().copied().collect()
}

/// Robust and model-based standard errors of the arm coefficient in the
/// two-group Poisson model, from dense bread and meat matrices.
pub fn two_group_sandwich(treated: &[bool], counts: &[f64], exposure: &[f64]) -> (f64, f64, f64) {
    let rate = |arm: bool| {
        let (c, t) = (0..counts.len()).filter(|&i| treated[i] == arm).fold((0.0, 0.0), |(c, t), i| (c + counts[i], t + exposure[i]));
        c / t
    };
    let (ra, rb) = (rate(true), rate(false));
    let mut info = DMatrix::<f64>::zeros(2, 2);
    let mut meat = DMatrix::<f64>::zeros(2, 2);
    for i in 0..counts.len() {
        let x = DVector::from_vec(vec![1.0, treated[i] as u8 as f64]);
        let mu = exposure[i] * if treated[i] { ra } else { rb };
        info += &x * x.transpose() * mu;
        meat += &x * x.transpose() * (counts[i] - mu).powi(2);
    }
    let bread = info.try_inverse().expect("invertible information");
    let v = &bread * meat * &bread;
    ((ra / rb).ln(), v[(1, 1)].sqrt(), bread[(1, 1)].sqrt())
}

/// E|X| for X ~ N(mu, sigma²) by composite Simpson over mu ± 12 sigma.
pub fn abs_normal_mean(mu: f64, sigma: f64) -> f64 {
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
