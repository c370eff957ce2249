//! DeLong AUC, Wilcoxon signed-rank, Holm adjustment and percentile
//! bootstrap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::seed::rng_for;

/// Largest sample size that gets the exact signed-rank distribution.
pub const WILCOXON_EXACT_MAX: usize = 25;

pub const DEFAULT_RESAMPLES: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("misaligned table: {0}")]
    Misaligned(String),
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite(what))
    }
}

/// 1-based mid-ranks of `xs`.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    pub variance: f64,
}

impl AucEstimate {
    /// Normal-approximation interval.
    pub fn ci(&self, level: f64) -> (f64, f64) {
        let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
        let h = z * self.variance.max(0.0).sqrt();
        (self.auc - h, self.auc + h)
    }
}

/// Mann-Whitney AUC (ties count one half) with the DeLong variance.
pub fn auc_delong(cases: &[f64], controls: &[f64]) -> Result<AucEstimate, StatsError> {
    if cases.is_empty() {
        return Err(StatsError::Empty("case scores"));
    }
    if controls.is_empty() {
        return Err(StatsError::Empty("control scores"));
    }
    check_finite(cases, "case scores")?;
    check_finite(controls, "control scores")?;
    let (m, n) = (cases.len(), controls.len());
    let all: Vec<f64> = cases.iter().chain(controls).copied().collect();
    let r_all = midranks(&all);
    let r_case = midranks(cases);
    let r_ctrl = midranks(controls);
    // v10[i]: fraction of controls below case i; v01[j]: fraction of cases above control j
    let v10: Vec<f64> = (0..m).map(|i| (r_all[i] - r_case[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n).map(|j| 1.0 - (r_all[m + j] - r_ctrl[j]) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    let var_of = |v: &[f64]| {
        if v.len() < 2 {
            return 0.0;
        }
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64
    };
    Ok(AucEstimate { auc, variance: var_of(&v10) / m as f64 + var_of(&v01) / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Two-sided p-value.
    pub p: f64,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub exact: bool,
    /// All differences were zero; `p` is 1.
    pub degenerate: bool,
}

/// Two-sided paired signed-rank test. Zeros are dropped and tied magnitudes
/// get mid-ranks. Exact for up to [`WILCOXON_EXACT_MAX`] differences (over
/// the observed mid-ranks), tie-corrected normal approximation above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult, StatsError> {
    if diffs.is_empty() {
        return Err(StatsError::Empty("differences"));
    }
    check_finite(diffs, "differences")?;
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(WilcoxonResult { p: 1.0, w_plus: 0.0, n: 0, exact: true, degenerate: true });
    }
    let mags: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&mags);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    if n <= WILCOXON_EXACT_MAX {
        // mid-ranks are multiples of 1/2, so doubled ranks are integers
        let r2: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = r2.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &r2 {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(WilcoxonResult { p, w_plus, n, exact: true, degenerate: false });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie = 0.0;
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = (2.0 * (1.0 - Normal::standard().cdf(z))).min(1.0);
    Ok(WilcoxonResult { p, w_plus, n, exact: false, degenerate: false })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>, StatsError> {
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(StatsError::Invalid("p-values must lie in [0, 1]".into()));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut run = 0f64;
    for (i, &k) in order.iter().enumerate() {
        run = run.max(((m - i) as f64 * p[k]).min(1.0));
        out[k] = run;
    }
    Ok(out)
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap interval for the mean. Resample `b` draws from its
/// own generator, so intervals do not depend on scheduling.
pub fn bootstrap_mean_ci(diffs: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<MeanCi, StatsError> {
    if diffs.is_empty() {
        return Err(StatsError::Empty("differences"));
    }
    if !(level > 0.0 && level < 1.0) || n_resamples == 0 {
        return Err(StatsError::Invalid("level must lie in (0, 1) and n_resamples be positive".into()));
    }
    check_finite(diffs, "differences")?;
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, b);
            (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok(MeanCi { mean, lo: quantile_sorted(&means, a), hi: quantile_sorted(&means, 1.0 - a) })
}

/// Per-label metrics of several models, aligned by label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTable {
    pub labels: Vec<String>,
    pub models: Vec<(String, Vec<f64>)>,
}

impl PairedTable {
    pub fn new(labels: Vec<String>, models: Vec<(String, Vec<f64>)>) -> Result<Self, StatsError> {
        let t = PairedTable { labels, models };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        for (name, v) in &self.models {
            if v.len() != self.labels.len() {
                return Err(StatsError::Misaligned(format!("{name} has {} values for {} labels", v.len(), self.labels.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(StatsError::Misaligned(format!("{name} has missing cells")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(l) = self.labels.iter().find(|l| !seen.insert(*l)) {
            return Err(StatsError::Misaligned(format!("duplicate label {l}")));
        }
        Ok(())
    }

    pub fn column(&self, model: &str) -> Option<&[f64]> {
        self.models.iter().find(|(n, _)| n == model).map(|(_, v)| v.as_slice())
    }

    /// Restricts to labels present in every input table, in the first table's order.
    pub fn harmonize(tables: &[(String, Vec<(String, f64)>)]) -> Result<Self, StatsError> {
        let Some((_, first)) = tables.first() else {
            return Err(StatsError::Empty("tables"));
        };
        let maps: Vec<std::collections::HashMap<&str, f64>> =
            tables.iter().map(|(_, rows)| rows.iter().map(|(l, v)| (l.as_str(), *v)).collect()).collect();
        let labels: Vec<String> = first
            .iter()
            .map(|(l, _)| l.clone())
            .filter(|l| maps.iter().all(|m| m.get(l.as_str()).is_some_and(|v| v.is_finite())))
            .collect();
        let models = tables
            .iter()
            .zip(&maps)
            .map(|((name, _), m)| (name.clone(), labels.iter().map(|l| m[l.as_str()]).collect()))
            .collect();
        PairedTable::new(labels, models)
    }
}
