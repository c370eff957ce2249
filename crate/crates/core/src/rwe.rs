//! Observational effect estimation with negative-control calibration.
//!
//! Pipeline: per-unit features (baseline covariates, optionally a sequence
//! embedding) feed a LASSO logistic propensity model; arms are matched 1:1
//! on the score; each outcome gets a Poisson rate ratio with a robust
//! standard error; negative-control outcomes fit an empirical null whose
//! mean absolute value is the expected absolute systematic error (EASE) and
//! which widens every interval.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::calendar::YearMonth;
use crate::eval_expenditure::token_months;
use crate::model::{ModelError, ModelState};
use crate::seed::{labeled_seed, rng_for, sub_seed};
use crate::stats::auc_delong;
use crate::synthgen::EnrolleeRecord;
use crate::training::clip_history;
use crate::vocab::{decompose_dx, Vocabulary};
use crate::Scalar;

/// Outcomes seen in fewer than this share of matched units are screened out.
pub const MIN_OUTCOME_PREVALENCE: f64 = 0.005;
pub const MIN_NEGATIVE_CONTROLS: usize = 5;

#[derive(Debug, Error)]
pub enum RweError {
    #[error("invalid study frame: {0}")]
    Frame(String),
    #[error("solver did not converge after {iterations} iterations (last change {last_change:.3e}, lambda {lambda:.3e})")]
    NoConvergence { iterations: usize, last_change: f64, lambda: f64 },
    #[error("need at least {MIN_NEGATIVE_CONTROLS} negative-control estimates, got {0}")]
    TooFewControls(usize),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T, E = RweError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Embeddings

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final-layer hidden state at the last position.
    #[default]
    LastToken,
    Mean,
}

/// Representation of a pre-index sequence; histories longer than the
/// context keep their most recent part.
pub fn extract_embedding<T: Scalar>(state: &ModelState<T>, vocab: &Vocabulary, ids: &[u32], pooling: Pooling) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(RweError::Empty("sequence".into()));
    }
    let max = state.config().max_positions;
    let clipped;
    let ids = if ids.len() > max {
        clipped = clip_history(ids, max, vocab);
        &clipped[..]
    } else {
        ids
    };
    let h = state.hidden_states(ids)?;
    Ok(match pooling {
        Pooling::LastToken => h.row(h.nrows() - 1).iter().map(|v| v.f64()).collect(),
        Pooling::Mean => {
            let n = h.nrows() as f64;
            (0..h.ncols()).map(|j| h.column(j).iter().map(|v| v.f64()).sum::<f64>() / n).collect()
        }
    })
}

// ---------------------------------------------------------------------------
// Standardization and LASSO logistic regression

/// Column centering and scaling learned on one matrix. Constant columns map
/// to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..p)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { v.sqrt() } else { 0.0 }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct LassoConfig {
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub n_folds: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { n_lambda: 30, lambda_min_ratio: 1e-3, n_folds: 5, max_outer: 100, max_inner: 20_000, tol: 1e-9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
}

impl LassoFit {
    pub fn linear(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(x, b)| x * b).sum::<f64>()
    }

    pub fn prob(&self, row: &[f64]) -> f64 {
        sigmoid(self.linear(row))
    }

    pub fn n_selected(&self) -> usize {
        self.coef.iter().filter(|b| **b != 0.0).count()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Column-major copy of a row matrix.
struct Design {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Design {
    fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(RweError::Invalid("ragged design matrix".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RweError::Invalid("non-finite design entry".into()));
        }
        Ok(Design { n, cols: (0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect() })
    }

    fn subset(&self, idx: &[usize]) -> Design {
        Design { n: idx.len(), cols: self.cols.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect() }
    }

    fn eta(&self, b0: f64, b: &[f64]) -> Vec<f64> {
        let mut eta = vec![b0; self.n];
        for (c, &bj) in self.cols.iter().zip(b) {
            if bj != 0.0 {
                for (e, x) in eta.iter_mut().zip(c) {
                    *e += bj * x;
                }
            }
        }
        eta
    }
}

fn penalized_objective(d: &Design, y: &[f64], b0: f64, b: &[f64], lambda: f64) -> f64 {
    let eta = d.eta(b0, b);
    let nll: f64 = eta.iter().zip(y).map(|(&e, &yi)| softplus(e) - yi * e).sum::<f64>() / d.n as f64;
    nll + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Minimizes `mean(logistic loss) + lambda * |b|_1` with the intercept
/// unpenalized: proximal Newton outer steps (with step halving), cyclic
/// coordinate descent on each quadratic model.
fn fit_design(d: &Design, y: &[f64], lambda: f64, warm: Option<&LassoFit>, cfg: &LassoConfig) -> Result<LassoFit> {
    let p = d.cols.len();
    let nf = d.n as f64;
    let (mut b0, mut b) = match warm {
        Some(w) => (w.intercept, w.coef.clone()),
        None => {
            let m = (y.iter().sum::<f64>() / nf).clamp(1e-6, 1.0 - 1e-6);
            ((m / (1.0 - m)).ln(), vec![0.0; p])
        }
    };
    let mut obj = penalized_objective(d, y, b0, &b, lambda);
    let mut last_change = f64::INFINITY;
    for outer in 0..cfg.max_outer {
        let eta = d.eta(b0, &b);
        let w: Vec<f64> = eta.iter().map(|&e| {
            let q = sigmoid(e);
            (q * (1.0 - q)).max(1e-5)
        }).collect();
        let z: Vec<f64> = eta.iter().zip(y).zip(&w).map(|((&e, &yi), &wi)| e + (yi - sigmoid(e)) / wi).collect();
        let (n0, nb) = solve_weighted_lasso(d, &w, &z, lambda, b0, b.clone(), cfg);
        // step halving keeps the penalized objective monotone
        let mut t = 1.0;
        let (mut c0, mut cb) = (n0, nb.clone());
        let mut new_obj = penalized_objective(d, y, c0, &cb, lambda);
        while new_obj > obj + 1e-15 * obj.abs().max(1.0) && t > 1e-6 {
            t *= 0.5;
            c0 = b0 + t * (n0 - b0);
            cb = b.iter().zip(&nb).map(|(o, n)| o + t * (n - o)).collect();
            new_obj = penalized_objective(d, y, c0, &cb, lambda);
        }
        last_change = (c0 - b0).abs().max(b.iter().zip(&cb).map(|(o, n)| (o - n).abs()).fold(0.0, f64::max));
        b0 = c0;
        b = cb;
        let improved = obj - new_obj;
        obj = new_obj;
        if last_change < cfg.tol.sqrt() || (outer > 0 && improved.abs() < cfg.tol * obj.abs().max(1.0)) {
            return Ok(LassoFit { intercept: b0, coef: b, lambda, iterations: outer + 1 });
        }
    }
    Err(RweError::NoConvergence { iterations: cfg.max_outer, last_change, lambda })
}

/// Minimizes `(1/2n) sum w (z - b0 - X b)^2 + lambda |b|_1` from a warm
/// start, working on the weighted Gram matrix (intercept as coordinate 0).
/// Coordinate descent finds the active set; an exact solve on that set,
/// walking back to the first sign change when needed, finishes it, since
/// plain coordinate descent crawls on collinear columns.
fn solve_weighted_lasso(d: &Design, w: &[f64], z: &[f64], lambda: f64, b0: f64, b: Vec<f64>, cfg: &LassoConfig) -> (f64, Vec<f64>) {
    let p = d.cols.len() + 1;
    let nf = d.n as f64;
    let ones = vec![1.0; d.n];
    let col = |j: usize| if j == 0 { &ones } else { &d.cols[j - 1] };
    let wcols: Vec<Vec<f64>> = (0..p).map(|j| col(j).iter().zip(w).map(|(x, wi)| x * wi).collect()).collect();
    let mut h = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = wcols[i].iter().zip(col(j)).map(|(a, x)| a * x).sum::<f64>() / nf;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let c: Vec<f64> = wcols.iter().map(|wc| wc.iter().zip(z).map(|(a, zi)| a * zi).sum::<f64>() / nf).collect();
    let mut beta: Vec<f64> = std::iter::once(b0).chain(b).collect();
    let pen = |j: usize| if j == 0 { 0.0 } else { lambda };
    // g = c - H beta
    let mut g: Vec<f64> = (0..p).map(|i| c[i] - (0..p).map(|j| h[(i, j)] * beta[j]).sum::<f64>()).collect();
    let usable: Vec<bool> = (0..p).map(|j| h[(j, j)] > 1e-14).collect();
    let mut since_refine = 0;
    for _ in 0..cfg.max_inner {
        let mut delta: f64 = 0.0;
        for j in 0..p {
            if !usable[j] {
                continue;
            }
            let hjj = h[(j, j)];
            let zj = g[j] + hjj * beta[j];
            // ties at the threshold (e.g. lambda = lambda_max) stay exactly zero
            let new = if zj.abs() <= pen(j) * (1.0 + 1e-10) { 0.0 } else { soft(zj, pen(j)) / hjj };
            let step = new - beta[j];
            if step != 0.0 {
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi -= h[(i, j)] * step;
                }
                beta[j] = new;
                delta = delta.max(step.abs() * hjj.sqrt());
            }
        }
        since_refine += 1;
        if delta >= cfg.tol && since_refine < 25 {
            continue;
        }
        since_refine = 0;
        let active: Vec<usize> = (0..p).filter(|&j| usable[j] && (j == 0 || beta[j] != 0.0)).collect();
        let k = active.len();
        let ha = DMatrix::from_fn(k, k, |a, b| h[(active[a], active[b])]);
        let rhs = DVector::from_fn(k, |a, _| c[active[a]] - pen(active[a]) * beta[active[a]].signum());
        let cand = match ha.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None if delta < cfg.tol => break,
            None => continue,
        };
        if cand.iter().any(|v| !v.is_finite()) {
            if delta < cfg.tol {
                break;
            }
            continue;
        }
        // largest step toward the candidate that keeps every sign
        let mut t = 1.0f64;
        let mut hit = None;
        for (a, &j) in active.iter().enumerate() {
            if j != 0 && cand[a].signum() != beta[j].signum() {
                let tj = beta[j] / (beta[j] - cand[a]);
                if tj < t {
                    t = tj;
                    hit = Some(j);
                }
            }
        }
        for (a, &j) in active.iter().enumerate() {
            beta[j] += t * (cand[a] - beta[j]);
        }
        if let Some(j) = hit {
            beta[j] = 0.0;
        }
        g = (0..p).map(|i| c[i] - (0..p).map(|j| h[(i, j)] * beta[j]).sum::<f64>()).collect();
        if hit.is_some() {
            continue;
        }
        let kkt_ok = (1..p).filter(|&j| usable[j] && beta[j] == 0.0).all(|j| g[j].abs() <= lambda * (1.0 + 1e-9) + 1e-12);
        if kkt_ok {
            break;
        }
    }
    (beta[0], beta[1..].to_vec())
}

fn binary_targets(y: &[bool]) -> Vec<f64> {
    y.iter().map(|&v| v as u8 as f64).collect()
}

/// Fit at a single penalty.
pub fn fit_lasso_logistic_at(x: &[Vec<f64>], y: &[bool], lambda: f64, cfg: &LassoConfig) -> Result<LassoFit> {
    if x.len() != y.len() || x.is_empty() {
        return Err(RweError::Invalid("design and response lengths differ or are empty".into()));
    }
    fit_design(&Design::new(x)?, &binary_targets(y), lambda, None, cfg)
}

/// Smallest penalty at which every coefficient is zero.
pub fn lambda_max(x: &[Vec<f64>], y: &[bool]) -> f64 {
    let n = x.len() as f64;
    let ybar = y.iter().filter(|v| **v).count() as f64 / n;
    let p = x.first().map_or(0, Vec::len);
    (0..p)
        .map(|j| x.iter().zip(y).map(|(r, &yi)| r[j] * (yi as u8 as f64 - ybar)).sum::<f64>().abs() / n)
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub lambdas: Vec<f64>,
    pub cv_deviance: Vec<f64>,
    pub selected: LassoFit,
}

fn deviance(fit: &LassoFit, d: &Design, y: &[f64]) -> f64 {
    let eta = d.eta(fit.intercept, &fit.coef);
    2.0 * eta.iter().zip(y).map(|(&e, &yi)| softplus(e) - yi * e).sum::<f64>() / d.n as f64
}

fn fit_path(d: &Design, y: &[f64], lambdas: &[f64], cfg: &LassoConfig) -> Result<Vec<LassoFit>> {
    let mut out: Vec<LassoFit> = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        let f = fit_design(d, y, l, out.last(), cfg)?;
        out.push(f);
    }
    Ok(out)
}

/// Fits the penalty path (decreasing) and selects the penalty with the
/// lowest cross-validated deviance. Folds come from a seeded shuffle.
pub fn fit_lasso_logistic(x: &[Vec<f64>], y: &[bool], lambdas: Option<&[f64]>, cfg: &LassoConfig) -> Result<LassoPath> {
    if x.len() != y.len() || x.is_empty() {
        return Err(RweError::Invalid("design and response lengths differ or are empty".into()));
    }
    if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
        return Err(RweError::Invalid("response has a single class".into()));
    }
    let d = Design::new(x)?;
    let yf = binary_targets(y);
    let lambdas: Vec<f64> = match lambdas {
        Some(l) => {
            let mut l = l.to_vec();
            l.sort_by(|a, b| b.total_cmp(a));
            l
        }
        None => {
            let hi = lambda_max(x, y).max(1e-12);
            let k = cfg.n_lambda.max(2);
            (0..k).map(|i| hi * cfg.lambda_min_ratio.powf(i as f64 / (k - 1) as f64)).collect()
        }
    };
    let folds = cfg.n_folds.clamp(2, d.n);
    let mut order: Vec<usize> = (0..d.n).collect();
    order.shuffle(&mut rng_for(labeled_seed(cfg.seed, "lasso-folds"), 0));
    let fold_of: Vec<usize> = {
        let mut f = vec![0; d.n];
        for (k, &i) in order.iter().enumerate() {
            f[i] = k % folds;
        }
        f
    };
    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..d.n).filter(|&i| fold_of[i] != k).collect();
            let test: Vec<usize> = (0..d.n).filter(|&i| fold_of[i] == k).collect();
            let (dt, dv) = (d.subset(&train), d.subset(&test));
            let (yt, yv): (Vec<f64>, Vec<f64>) = (train.iter().map(|&i| yf[i]).collect(), test.iter().map(|&i| yf[i]).collect());
            let fits = fit_path(&dt, &yt, &lambdas, cfg)?;
            Ok(fits.iter().map(|f| deviance(f, &dv, &yv)).collect())
        })
        .collect::<Result<_>>()?;
    let cv: Vec<f64> = (0..lambdas.len()).map(|i| per_fold.iter().map(|f| f[i]).sum::<f64>() / folds as f64).collect();
    let best = (0..cv.len()).min_by(|&a, &b| cv[a].total_cmp(&cv[b])).unwrap_or(0);
    let mut fits = fit_path(&d, &yf, &lambdas[..=best], cfg)?;
    Ok(LassoPath { lambdas, cv_deviance: cv, selected: fits.pop().expect("non-empty path") })
}

// ---------------------------------------------------------------------------
// Study frame

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeRole {
    Primary,
    NegativeControl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDef {
    pub id: String,
    pub role: OutcomeRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyUnit {
    pub id: u64,
    pub arm: Arm,
    pub covariates: Vec<f64>,
    pub embedding: Option<Vec<f64>>,
    /// Event count per outcome, aligned with `StudyFrame::outcomes`.
    pub outcomes: Vec<f64>,
    /// Follow-up time in years.
    pub exposure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyFrame {
    pub covariate_names: Vec<String>,
    pub outcomes: Vec<OutcomeDef>,
    pub units: Vec<StudyUnit>,
}

impl StudyFrame {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RweError::Frame(m));
        let p = self.covariate_names.len();
        let emb = self.units.first().and_then(|u| u.embedding.as_ref().map(Vec::len));
        for u in &self.units {
            if u.covariates.len() != p {
                return bad(format!("unit {} has {} covariates, expected {p}", u.id, u.covariates.len()));
            }
            if u.covariates.iter().any(|v| !v.is_finite()) {
                return bad(format!("unit {} has a missing covariate", u.id));
            }
            if u.embedding.as_ref().map(Vec::len) != emb {
                return bad(format!("unit {} embedding shape differs", u.id));
            }
            if !(u.exposure > 0.0 && u.exposure.is_finite()) {
                return bad(format!("unit {} has non-positive exposure", u.id));
            }
            if u.outcomes.len() != self.outcomes.len() || u.outcomes.iter().any(|c| !(*c >= 0.0)) {
                return bad(format!("unit {} outcome counts malformed", u.id));
            }
        }
        let ids: BTreeSet<&str> = self.outcomes.iter().map(|o| o.id.as_str()).collect();
        if ids.len() != self.outcomes.len() {
            return bad("duplicate outcome id".into());
        }
        Ok(())
    }

    pub fn arm_counts(&self) -> (usize, usize) {
        let a = self.units.iter().filter(|u| u.arm == Arm::A).count();
        (a, self.units.len() - a)
    }
}

/// Fills each unit's embedding from its pre-index sequence.
pub fn attach_embeddings<T: Scalar>(
    frame: &mut StudyFrame,
    state: &ModelState<T>,
    vocab: &Vocabulary,
    sequences: &HashMap<u64, Vec<u32>>,
    pooling: Pooling,
) -> Result<()> {
    let embs: Vec<Vec<f64>> = frame
        .units
        .par_iter()
        .map(|u| {
            let s = sequences.get(&u.id).ok_or_else(|| RweError::Frame(format!("no sequence for unit {}", u.id)))?;
            extract_embedding(state, vocab, s, pooling)
        })
        .collect::<Result<_>>()?;
    for (u, e) in frame.units.iter_mut().zip(embs) {
        u.embedding = Some(e);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsFit {
    /// Probability of arm A per unit, in frame order.
    pub ps: Vec<f64>,
    pub lambda: f64,
    pub n_features: usize,
    pub n_selected: usize,
    /// AUC of the score for separating the arms.
    pub auc: f64,
}

/// Propensity of arm A from standardized covariates, with the embedding
/// appended when requested.
pub fn estimate_ps(frame: &StudyFrame, use_embeddings: bool, cfg: &LassoConfig) -> Result<PsFit> {
    frame.validate()?;
    if use_embeddings && frame.units.iter().any(|u| u.embedding.is_none()) {
        return Err(RweError::Frame("embeddings requested but missing".into()));
    }
    let raw: Vec<Vec<f64>> = frame
        .units
        .iter()
        .map(|u| {
            let mut r = u.covariates.clone();
            if use_embeddings {
                r.extend_from_slice(u.embedding.as_ref().expect("checked"));
            }
            r
        })
        .collect();
    let st = Standardizer::fit(&raw);
    let x: Vec<Vec<f64>> = raw.iter().map(|r| st.apply(r)).collect();
    let y: Vec<bool> = frame.units.iter().map(|u| u.arm == Arm::A).collect();
    let path = fit_lasso_logistic(&x, &y, None, cfg)?;
    let ps: Vec<f64> = x.iter().map(|r| path.selected.prob(r).clamp(1e-12, 1.0 - 1e-12)).collect();
    let (a, b): (Vec<f64>, Vec<f64>) = {
        let a = ps.iter().zip(&y).filter(|(_, &t)| t).map(|(p, _)| *p).collect();
        let b = ps.iter().zip(&y).filter(|(_, &t)| !t).map(|(p, _)| *p).collect();
        (a, b)
    };
    let auc = auc_delong(&a, &b).map(|e| e.auc).unwrap_or(f64::NAN);
    Ok(PsFit { ps, lambda: path.selected.lambda, n_features: x.first().map_or(0, Vec::len), n_selected: path.selected.n_selected(), auc })
}

// ---------------------------------------------------------------------------
// Matching

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// (treated index, control index) into the input score slices.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_treated: Vec<usize>,
}

/// Greedy nearest-neighbour matching without replacement, visiting treated
/// units by descending score. Ties in distance go to the lower control
/// index. With a caliper, pairs further apart are refused.
pub fn match_1to1(treated: &[f64], control: &[f64], caliper: Option<f64>) -> Matching {
    let mut order: Vec<usize> = (0..treated.len()).collect();
    order.sort_by(|&a, &b| treated[b].total_cmp(&treated[a]).then(a.cmp(&b)));
    // available controls sorted by score
    let mut avail: Vec<usize> = (0..control.len()).collect();
    avail.sort_by(|&a, &b| control[a].total_cmp(&control[b]).then(a.cmp(&b)));
    let mut out = Matching::default();
    for t in order {
        let s = treated[t];
        let pos = avail.partition_point(|&c| control[c] < s);
        let mut best: Option<(f64, usize, usize)> = None;
        // scan outwards over equal-distance runs on both sides
        let consider = |k: usize, best: &mut Option<(f64, usize, usize)>| {
            let c = avail[k];
            let dist = (control[c] - s).abs();
            let better = match *best {
                None => true,
                Some((bd, bc, _)) => dist < bd || (dist == bd && c < bc),
            };
            if better {
                *best = Some((dist, c, k));
            }
        };
        let mut k = pos;
        while k < avail.len() {
            consider(k, &mut best);
            if k + 1 < avail.len() && control[avail[k + 1]] == control[avail[k]] {
                k += 1;
            } else {
                break;
            }
        }
        let mut k = pos;
        while k > 0 {
            k -= 1;
            consider(k, &mut best);
            if k > 0 && control[avail[k - 1]] == control[avail[k]] {
                continue;
            }
            break;
        }
        match best {
            Some((dist, c, k)) if caliper.is_none_or(|cal| dist <= cal) => {
                out.pairs.push((t, c));
                avail.remove(k);
            }
            _ => out.unmatched_treated.push(t),
        }
    }
    out
}

/// `mult` standard deviations of the score logit: the conventional caliper
/// when matching on the logit scale.
pub fn logit_sd_caliper(ps: &[f64], mult: f64) -> f64 {
    let l: Vec<f64> = ps.iter().map(|p| (p / (1.0 - p)).ln()).collect();
    let n = l.len() as f64;
    let m = l.iter().sum::<f64>() / n;
    mult * (l.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

// ---------------------------------------------------------------------------
// Poisson regression

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonFit {
    pub beta: DVector<f64>,
    /// Inverse Fisher information.
    pub cov_model: DMatrix<f64>,
    /// Huber-White sandwich.
    pub cov_robust: DMatrix<f64>,
    pub iterations: usize,
}

/// Log-link Poisson regression by IRLS with an offset.
pub fn poisson_irls(x: &DMatrix<f64>, y: &[f64], offset: &[f64], max_iter: usize, tol: f64) -> Result<PoissonFit> {
    let (n, p) = x.shape();
    if y.len() != n || offset.len() != n || n == 0 {
        return Err(RweError::Invalid("Poisson design, response and offset lengths differ".into()));
    }
    let ybar = y.iter().sum::<f64>() / offset.iter().map(|o| o.exp()).sum::<f64>();
    let mut beta = DVector::zeros(p);
    if ybar > 0.0 && p > 0 {
        beta[0] = ybar.ln();
    }
    let mut info = DMatrix::zeros(p, p);
    for it in 0..max_iter {
        let eta = x * &beta + DVector::from_column_slice(offset);
        let mu = eta.map(f64::exp);
        // Fisher scoring step: (X' W X) d = X'(y - mu)
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * mu[i]);
        info = x.transpose() * &xw;
        let resid = DVector::from_fn(n, |i, _| y[i] - mu[i]);
        let score = x.transpose() * resid;
        let step = info.clone().cholesky().ok_or_else(|| RweError::Invalid("singular Poisson information".into()))?.solve(&score);
        beta += &step;
        if step.amax() < tol {
            let mu = (x * &beta + DVector::from_column_slice(offset)).map(f64::exp);
            let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * mu[i]);
            info = x.transpose() * &xw;
            let bread = info.clone().try_inverse().ok_or_else(|| RweError::Invalid("singular Poisson information".into()))?;
            let mut meat = DMatrix::zeros(p, p);
            for i in 0..n {
                let r2 = (y[i] - mu[i]).powi(2);
                let xi = x.row(i);
                meat += xi.transpose() * xi * r2;
            }
            let cov_robust = &bread * meat * &bread;
            return Ok(PoissonFit { beta, cov_model: bread, cov_robust, iterations: it + 1 });
        }
    }
    let _ = info;
    Err(RweError::NoConvergence { iterations: max_iter, last_change: f64::NAN, lambda: 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedCi {
    pub lo: f64,
    pub hi: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub outcome: String,
    pub log_rr: f64,
    /// Robust standard error.
    pub se: f64,
    pub se_model: f64,
    pub rr: f64,
    pub events_a: f64,
    pub events_b: f64,
    /// Calibrated interval on the log scale, once a null is available.
    pub calibrated: Option<CalibratedCi>,
}

impl EffectEstimate {
    /// Uncalibrated interval on the log scale.
    pub fn ci(&self, level: f64) -> (f64, f64) {
        let z = z_for(level);
        (self.log_rr - z * self.se, self.log_rr + z * self.se)
    }
}

fn z_for(level: f64) -> f64 {
    std_normal().inverse_cdf(0.5 + level / 2.0)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Estimated(EffectEstimate),
    Excluded(String),
}

/// Rate ratio of arm A versus arm B from `count ~ arm` with a log-exposure
/// offset.
pub fn poisson_rr(outcome: &str, treated: &[bool], counts: &[f64], exposure: &[f64]) -> Result<EstimateStatus> {
    let n = treated.len();
    if counts.len() != n || exposure.len() != n {
        return Err(RweError::Invalid("misaligned outcome vectors".into()));
    }
    if n == 0 {
        return Err(RweError::Empty("matched cohort".into()));
    }
    if exposure.iter().any(|t| !(*t > 0.0)) || counts.iter().any(|c| !(*c >= 0.0)) {
        return Err(RweError::Invalid("exposure must be positive and counts non-negative".into()));
    }
    let events = |arm: bool| treated.iter().zip(counts).filter(|(t, _)| **t == arm).map(|(_, c)| c).sum::<f64>();
    let (ea, eb) = (events(true), events(false));
    if ea == 0.0 && eb == 0.0 {
        return Ok(EstimateStatus::Excluded("no events in either arm".into()));
    }
    if ea == 0.0 || eb == 0.0 {
        return Ok(EstimateStatus::Excluded("no events in one arm".into()));
    }
    if treated.iter().all(|t| *t) || treated.iter().all(|t| !*t) {
        return Ok(EstimateStatus::Excluded("single arm".into()));
    }
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { treated[i] as u8 as f64 });
    let off: Vec<f64> = exposure.iter().map(|t| t.ln()).collect();
    let fit = poisson_irls(&x, counts, &off, 100, 1e-12)?;
    let log_rr = fit.beta[1];
    Ok(EstimateStatus::Estimated(EffectEstimate {
        outcome: outcome.to_string(),
        log_rr,
        se: fit.cov_robust[(1, 1)].sqrt(),
        se_model: fit.cov_model[(1, 1)].sqrt(),
        rr: log_rr.exp(),
        events_a: ea,
        events_b: eb,
        calibrated: None,
    }))
}

// ---------------------------------------------------------------------------
// Empirical null, EASE and calibration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalNull {
    pub mu: f64,
    pub sigma: f64,
}

fn null_loglik(theta: &[f64], se: &[f64], mu: f64, sigma: f64) -> f64 {
    theta
        .iter()
        .zip(se)
        .map(|(t, s)| {
            let v = sigma * sigma + s * s;
            -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (t - mu).powi(2) / v)
        })
        .sum()
}

/// Profile maximizer in `mu` for fixed `sigma`: the precision-weighted mean.
fn profile_mu(theta: &[f64], se: &[f64], sigma: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (t, s) in theta.iter().zip(se) {
        let w = 1.0 / (sigma * sigma + s * s);
        num += w * t;
        den += w;
    }
    num / den
}

/// Maximum-likelihood `(mu, sigma)` under `theta_i ~ N(mu, sigma^2 + se_i^2)`.
///
/// `mu` is profiled out exactly; `sigma` is searched on a log grid over
/// `[e^-6, e^1]` plus the boundary `sigma = 0`, then refined by golden
/// section between the neighbours of the best grid point.
pub fn fit_empirical_null(log_rr: &[f64], se: &[f64]) -> Result<EmpiricalNull> {
    if log_rr.len() != se.len() {
        return Err(RweError::Invalid("estimates and standard errors differ in length".into()));
    }
    let keep: Vec<(f64, f64)> = log_rr.iter().zip(se).filter(|(t, s)| t.is_finite() && s.is_finite() && **s > 0.0).map(|(t, s)| (*t, *s)).collect();
    if keep.len() < MIN_NEGATIVE_CONTROLS {
        return Err(RweError::TooFewControls(keep.len()));
    }
    let (theta, se): (Vec<f64>, Vec<f64>) = keep.into_iter().unzip();
    let prof = |sigma: f64| null_loglik(&theta, &se, profile_mu(&theta, &se, sigma), sigma);
    let mut grid: Vec<f64> = vec![0.0];
    grid.extend((0..201).map(|i| (-6.0 + 7.0 * i as f64 / 200.0).exp()));
    let vals: Vec<f64> = grid.iter().map(|&s| prof(s)).collect();
    let best = (0..grid.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("grid");
    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (prof(a), prof(b));
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = prof(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = prof(b);
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    // keep the exact boundary when it is at least as likely
    if prof(0.0) >= prof(sigma) {
        sigma = 0.0;
    }
    if vals[best] > prof(sigma) {
        sigma = grid[best];
    }
    Ok(EmpiricalNull { mu: profile_mu(&theta, &se, sigma), sigma })
}

/// Expected absolute systematic error `E|X|` for `X ~ N(mu, sigma^2)`.
pub fn ease(null: &EmpiricalNull) -> f64 {
    let (mu, s) = (null.mu, null.sigma);
    if s == 0.0 {
        return mu.abs();
    }
    s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp() + mu.abs() * (1.0 - 2.0 * std_normal().cdf(-mu.abs() / s))
}

/// Interval for `theta - mu` with variance `sigma^2 + se^2`, and the
/// matching two-sided p-value.
pub fn calibrate_estimate(log_rr: f64, se: f64, null: &EmpiricalNull, level: f64) -> CalibratedCi {
    let sd = (null.sigma * null.sigma + se * se).sqrt();
    let c = log_rr - null.mu;
    let z = z_for(level);
    CalibratedCi { lo: c - z * sd, hi: c + z * sd, p: 2.0 * std_normal().cdf(-c.abs() / sd) }
}

// ---------------------------------------------------------------------------
// Full analysis

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Caliper {
    None,
    /// Absolute distance on the probability scale.
    Absolute(f64),
    /// Multiple of the logit standard deviation; matching then runs on logits.
    LogitSd(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub use_embeddings: bool,
    pub caliper: Caliper,
    pub lasso: LassoConfig,
    pub min_prevalence: f64,
    pub level: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig { use_embeddings: false, caliper: Caliper::None, lasso: LassoConfig::default(), min_prevalence: MIN_OUTCOME_PREVALENCE, level: 0.95 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeResult {
    pub id: String,
    pub role: OutcomeRole,
    pub status: EstimateStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub use_embeddings: bool,
    pub ps: PsFit,
    pub n_pairs: usize,
    pub n_unmatched: usize,
    pub outcomes: Vec<OutcomeResult>,
    pub null: Option<EmpiricalNull>,
    pub ease: Option<f64>,
}

impl StudyResult {
    pub fn estimates(&self, role: OutcomeRole) -> impl Iterator<Item = &EffectEstimate> {
        self.outcomes.iter().filter(move |o| o.role == role).filter_map(|o| match &o.status {
            EstimateStatus::Estimated(e) => Some(e),
            EstimateStatus::Excluded(_) => None,
        })
    }
}

/// Propensity model, matching, per-outcome rate ratios, empirical null over
/// the negative controls, and calibrated intervals for every estimate.
pub fn run_study(frame: &StudyFrame, cfg: &StudyConfig) -> Result<StudyResult> {
    let ps = estimate_ps(frame, cfg.use_embeddings, &cfg.lasso)?;
    let (ta, tb): (Vec<usize>, Vec<usize>) = {
        let a = (0..frame.units.len()).filter(|&i| frame.units[i].arm == Arm::A).collect();
        let b = (0..frame.units.len()).filter(|&i| frame.units[i].arm == Arm::B).collect();
        (a, b)
    };
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let (score_a, score_b, cal): (Vec<f64>, Vec<f64>, Option<f64>) = match cfg.caliper {
        Caliper::None => (ta.iter().map(|&i| ps.ps[i]).collect(), tb.iter().map(|&i| ps.ps[i]).collect(), None),
        Caliper::Absolute(c) => (ta.iter().map(|&i| ps.ps[i]).collect(), tb.iter().map(|&i| ps.ps[i]).collect(), Some(c)),
        Caliper::LogitSd(m) => (
            ta.iter().map(|&i| logit(ps.ps[i])).collect(),
            tb.iter().map(|&i| logit(ps.ps[i])).collect(),
            Some(logit_sd_caliper(&ps.ps, m)),
        ),
    };
    let m = match_1to1(&score_a, &score_b, cal);
    if m.pairs.is_empty() {
        return Err(RweError::Empty("no matched pairs".into()));
    }
    let units: Vec<&StudyUnit> = m.pairs.iter().flat_map(|&(a, b)| [&frame.units[ta[a]], &frame.units[tb[b]]]).collect();
    let treated: Vec<bool> = units.iter().map(|u| u.arm == Arm::A).collect();
    let exposure: Vec<f64> = units.iter().map(|u| u.exposure).collect();
    let mut outcomes: Vec<OutcomeResult> = frame
        .outcomes
        .par_iter()
        .enumerate()
        .map(|(k, def)| {
            let counts: Vec<f64> = units.iter().map(|u| u.outcomes[k]).collect();
            let prevalence = counts.iter().filter(|c| **c > 0.0).count() as f64 / counts.len() as f64;
            let status = if prevalence < cfg.min_prevalence {
                EstimateStatus::Excluded(format!("prevalence {prevalence:.4} below {}", cfg.min_prevalence))
            } else {
                poisson_rr(&def.id, &treated, &counts, &exposure)?
            };
            Ok(OutcomeResult { id: def.id.clone(), role: def.role, status })
        })
        .collect::<Result<_>>()?;
    let (theta, se): (Vec<f64>, Vec<f64>) = outcomes
        .iter()
        .filter(|o| o.role == OutcomeRole::NegativeControl)
        .filter_map(|o| match &o.status {
            EstimateStatus::Estimated(e) => Some((e.log_rr, e.se)),
            _ => None,
        })
        .unzip();
    let null = fit_empirical_null(&theta, &se).ok();
    if let Some(n) = &null {
        for o in &mut outcomes {
            if let EstimateStatus::Estimated(e) = &mut o.status {
                e.calibrated = Some(calibrate_estimate(e.log_rr, e.se, n, cfg.level));
            }
        }
    }
    Ok(StudyResult {
        use_embeddings: cfg.use_embeddings,
        ps,
        n_pairs: m.pairs.len(),
        n_unmatched: m.unmatched_treated.len(),
        outcomes,
        ease: null.as_ref().map(ease),
        null,
    })
}

/// `outcome,role,status,rr,ci_lo,ci_hi,cal_lo,cal_hi,cal_p,log_rr,se` with
/// intervals on the rate-ratio scale.
pub fn write_results_csv<W: Write>(mut w: W, r: &StudyResult, level: f64) -> std::io::Result<()> {
    writeln!(w, "outcome,role,status,rr,ci_lo,ci_hi,cal_lo,cal_hi,cal_p,log_rr,se")?;
    for o in &r.outcomes {
        let role = match o.role {
            OutcomeRole::Primary => "primary",
            OutcomeRole::NegativeControl => "nco",
        };
        match &o.status {
            EstimateStatus::Estimated(e) => {
                let (lo, hi) = e.ci(level);
                let (cl, ch, cp) = e.calibrated.as_ref().map_or((String::new(), String::new(), String::new()), |c| {
                    (format!("{:.6}", c.lo.exp()), format!("{:.6}", c.hi.exp()), format!("{:.6e}", c.p))
                });
                writeln!(w, "{},{role},ok,{:.6},{:.6},{:.6},{cl},{ch},{cp},{:.6},{:.6}", o.id, e.rr, lo.exp(), hi.exp(), e.log_rr, e.se)?;
            }
            EstimateStatus::Excluded(why) => writeln!(w, "{},{role},excluded: {},,,,,,,,", o.id, why.replace(',', ";"))?,
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Study frames from claims

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutcome {
    pub id: String,
    /// Diagnosis code prefixes, e.g. `E11`.
    pub dx_prefixes: Vec<String>,
    pub role: OutcomeRole,
}

/// Study definition file: two drug arms indexed at first fill, a baseline
/// window for covariates and a follow-up window for outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyDefinition {
    pub arm_a: Vec<String>,
    pub arm_b: Vec<String>,
    #[serde(default = "default_window")]
    pub baseline_window_days: i64,
    #[serde(default = "default_window")]
    pub follow_up_days: i64,
    /// Number of most frequent diagnosis stems used as baseline indicators.
    #[serde(default = "default_covariates")]
    pub n_covariates: usize,
    pub outcomes: Vec<StudyOutcome>,
}

fn default_window() -> i64 {
    365
}

fn default_covariates() -> usize {
    50
}

fn dx_stem(code: &str) -> &str {
    code.split('.').next().unwrap_or(code)
}

fn first_fill(r: &EnrolleeRecord, drugs: &[String]) -> Option<NaiveDate> {
    r.events.iter().filter(|e| e.rx_codes.iter().any(|c| drugs.contains(c))).map(|e| e.date).min()
}

/// Derives a study from the cohort itself: the two drugs filled by the most
/// enrollees are the arms, the `n_primary` most prevalent diagnosis stems
/// are primary outcomes and the next `n_nco` are negative controls.
pub fn derive_study(records: &[EnrolleeRecord], n_primary: usize, n_nco: usize) -> Result<StudyDefinition> {
    let mut drug_users: BTreeMap<&str, usize> = BTreeMap::new();
    let mut dx_users: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let drugs: BTreeSet<&str> = r.events.iter().flat_map(|e| e.rx_codes.iter().map(String::as_str)).collect();
        for d in drugs {
            *drug_users.entry(d).or_default() += 1;
        }
        let dx: BTreeSet<&str> = r.events.iter().flat_map(|e| e.dx_codes.iter().map(|c| dx_stem(&c.code))).collect();
        for d in dx {
            *dx_users.entry(d).or_default() += 1;
        }
    }
    let ranked = |m: BTreeMap<&str, usize>| {
        let mut v: Vec<(&str, usize)> = m.into_iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v.into_iter().map(|(k, _)| k.to_string()).collect::<Vec<_>>()
    };
    let drugs = ranked(drug_users);
    if drugs.len() < 2 {
        return Err(RweError::Empty("fewer than two drugs in the cohort".into()));
    }
    let dx = ranked(dx_users);
    let outcomes = dx
        .iter()
        .take(n_primary + n_nco)
        .enumerate()
        .map(|(i, s)| StudyOutcome {
            id: s.clone(),
            dx_prefixes: vec![s.clone()],
            role: if i < n_primary { OutcomeRole::Primary } else { OutcomeRole::NegativeControl },
        })
        .collect();
    Ok(StudyDefinition {
        arm_a: vec![drugs[0].clone()],
        arm_b: vec![drugs[1].clone()],
        baseline_window_days: default_window(),
        follow_up_days: default_window(),
        n_covariates: default_covariates(),
        outcomes,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameBuild {
    pub frame: StudyFrame,
    /// Pre-index token ids per unit, for embeddings.
    pub sequences: HashMap<u64, Vec<u32>>,
    pub excluded: BTreeMap<String, usize>,
}

impl Default for StudyFrame {
    fn default() -> Self {
        StudyFrame { covariate_names: Vec::new(), outcomes: Vec::new(), units: Vec::new() }
    }
}

/// Builds the study frame from claims: index at the first fill of either
/// arm, baseline indicators of frequent diagnosis stems plus age and sex,
/// outcome event counts in the follow-up window and the token sequence
/// before the index month.
pub fn build_study_frame(records: &[EnrolleeRecord], sequences: &[(u64, Vec<u32>)], vocab: &Vocabulary, def: &StudyDefinition) -> Result<FrameBuild> {
    let seqs: HashMap<u64, &Vec<u32>> = sequences.iter().map(|(i, s)| (*i, s)).collect();
    let mut stems: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let s: BTreeSet<&str> = r.events.iter().flat_map(|e| e.dx_codes.iter().map(|c| dx_stem(&c.code))).collect();
        for x in s {
            *stems.entry(x).or_default() += 1;
        }
    }
    let mut stems: Vec<(&str, usize)> = stems.into_iter().collect();
    stems.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let cov_stems: Vec<String> = stems.iter().take(def.n_covariates).map(|(s, _)| s.to_string()).collect();
    let mut names: Vec<String> = cov_stems.iter().map(|s| format!("dx_{s}")).collect();
    names.extend(["age".to_string(), "female".to_string()]);
    let outcomes: Vec<OutcomeDef> = def.outcomes.iter().map(|o| OutcomeDef { id: o.id.clone(), role: o.role }).collect();
    let mut out = FrameBuild { frame: StudyFrame { covariate_names: names, outcomes, units: Vec::new() }, ..Default::default() };
    let mut exclude = |why: &str| *out.excluded.entry(why.to_string()).or_default() += 1;
    let mut units = Vec::new();
    let mut pre = HashMap::new();
    for r in records {
        let (fa, fb) = (first_fill(r, &def.arm_a), first_fill(r, &def.arm_b));
        let (index, arm) = match (fa, fb) {
            (None, None) => {
                exclude("no arm drug");
                continue;
            }
            (Some(a), Some(b)) if a == b => {
                exclude("both arms on index date");
                continue;
            }
            (Some(a), Some(b)) => if a < b { (a, Arm::A) } else { (b, Arm::B) },
            (Some(a), None) => (a, Arm::A),
            (None, Some(b)) => (b, Arm::B),
        };
        let base_start = index - chrono::Duration::days(def.baseline_window_days);
        let im = YearMonth::of(index);
        let Some(ep) = r.enrollment_episodes.iter().find(|e| e.covers(im)) else {
            exclude("index outside enrollment");
            continue;
        };
        if ep.start > YearMonth::of(base_start) {
            exclude("short baseline");
            continue;
        }
        let fu_end = (index + chrono::Duration::days(def.follow_up_days)).min(ep.end.last_day());
        let days = (fu_end - index).num_days();
        if days <= 0 {
            exclude("no follow-up");
            continue;
        }
        let Some(ids) = seqs.get(&r.enrollee_id) else {
            exclude("no sequence");
            continue;
        };
        let months = token_months(ids, vocab).map_err(|e| RweError::Frame(format!("enrollee {}: {e}", r.enrollee_id)))?;
        let cut = (0..ids.len()).find(|&i| months[i] >= im && i >= 4).unwrap_or(ids.len());
        if cut <= 4 {
            exclude("no pre-index history");
            continue;
        }
        let in_base = |d: NaiveDate| d >= base_start && d < index;
        let mut cov: Vec<f64> = cov_stems
            .iter()
            .map(|s| r.events.iter().any(|e| in_base(e.date) && e.dx_codes.iter().any(|c| dx_stem(&c.code) == s)) as u8 as f64)
            .collect();
        cov.push((index.year() - r.birth_year) as f64);
        cov.push((r.sex == 2) as u8 as f64);
        let counts: Vec<f64> = def
            .outcomes
            .iter()
            .map(|o| {
                r.events
                    .iter()
                    .filter(|e| e.date > index && e.date <= fu_end)
                    .filter(|e| e.dx_codes.iter().any(|c| o.dx_prefixes.iter().any(|p| c.code.starts_with(p.as_str()))))
                    .count() as f64
            })
            .collect();
        pre.insert(r.enrollee_id, ids[..cut].to_vec());
        units.push(StudyUnit { id: r.enrollee_id, arm, covariates: cov, embedding: None, outcomes: counts, exposure: days as f64 / 365.25 });
    }
    out.frame.units = units;
    out.sequences = pre;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic confounded study

/// A study whose confounder shows up only in the sequence history before
/// the baseline window: arm choice and every outcome depend on it, baseline
/// covariates do not see it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfoundedSpec {
    pub n_units: usize,
    pub confounder_rate: f64,
    /// Log-odds of arm A for a confounded unit.
    pub treatment_effect_of_confounder: f64,
    pub treatment_intercept: f64,
    /// Mean log rate multiplier of the confounder on each outcome.
    pub outcome_effect_of_confounder: f64,
    pub n_nco: usize,
    /// True log rate ratios of the primary outcomes.
    pub primary_effects: Vec<f64>,
    pub n_background_codes: usize,
    pub history_months: u32,
}

impl Default for ConfoundedSpec {
    fn default() -> Self {
        ConfoundedSpec {
            n_units: 3000,
            confounder_rate: 0.4,
            treatment_effect_of_confounder: 1.6,
            treatment_intercept: -1.2,
            outcome_effect_of_confounder: 0.7,
            n_nco: 40,
            primary_effects: vec![0.0, 0.4, -0.4],
            n_background_codes: 20,
            history_months: 36,
        }
    }
}

pub const CONFOUNDER_CODE: &str = "F32";

fn background_code(i: usize) -> String {
    format!("B{i:02}")
}

/// Token texts shared by every simulated study.
pub fn confounded_vocabulary(spec: &ConfoundedSpec) -> Vocabulary {
    let mut t: Vec<String> = ["<sos>", "<eos>", "<NY>", "<INSTRUCT-DX>", "<SEX-1>", "<SEX-2>", "<VT-outpatient>", "<DX-PRINCIPAL>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend((1930..=2000).map(|y| format!("<DOBYR-{y}>")));
    t.extend((18..=95).map(|a| format!("<AGE-{a}>")));
    t.extend((0..=12).map(|n| format!("<ATT-{n}>")));
    t.extend([10u8, 12, 22, 32, 13].iter().map(|c| format!("<COST-{c}>")));
    t.push(decompose_dx(CONFOUNDER_CODE).remove(0));
    t.extend((0..spec.n_background_codes).map(|i| decompose_dx(&background_code(i)).remove(0)));
    Vocabulary::from_texts(t).expect("fixed vocabulary")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedStudy {
    pub frame: StudyFrame,
    /// Pre-index token ids per unit id.
    pub sequences: HashMap<u64, Vec<u32>>,
    pub confounded: Vec<bool>,
}

/// Draws one replication. The confounder raises the monthly rate of its
/// diagnosis during the months before the baseline window only.
pub fn simulate_confounded_study(spec: &ConfoundedSpec, vocab: &Vocabulary, seed: u64) -> Result<SimulatedStudy> {
    if spec.history_months < 14 || spec.n_units < 10 {
        return Err(RweError::Invalid("history must exceed the baseline year and units must number at least 10".into()));
    }
    let base = labeled_seed(seed, "confounded-study");
    let mut grng = rng_for(base, u64::MAX);
    let nb = spec.n_background_codes;
    let bg_rate: Vec<f64> = (0..nb).map(|_| grng.random_range(0.02..0.12)).collect();
    let n_out = spec.primary_effects.len() + spec.n_nco;
    let out_rate: Vec<f64> = (0..n_out).map(|_| (grng.random_range(0.1f64..0.6)).ln()).collect();
    let out_conf: Vec<f64> = (0..n_out).map(|_| spec.outcome_effect_of_confounder * grng.random_range(0.6..1.4)).collect();
    let hm = spec.history_months as usize;
    let window_start = hm - 12;
    let id = |s: &str| vocab.id(s).ok_or_else(|| RweError::Invalid(format!("vocabulary lacks {s}")));
    let conf_tok = id(&decompose_dx(CONFOUNDER_CODE)[0])?;
    let bg_tok: Vec<u32> = (0..nb).map(|i| id(&decompose_dx(&background_code(i))[0])).collect::<Result<_>>()?;
    let (vt, dxp, ny) = (id("<VT-outpatient>")?, id("<DX-PRINCIPAL>")?, vocab.ny());
    let costs: Vec<u32> = [10u8, 12, 22, 32].iter().map(|c| id(&format!("<COST-{c}>"))).collect::<Result<_>>()?;
    let att: Vec<u32> = (0..=12).map(|n| id(&format!("<ATT-{n}>"))).collect::<Result<_>>()?;

    let sims: Vec<(StudyUnit, Vec<u32>, bool)> = (0..spec.n_units)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(base, i as u64);
            let u = rng.random::<f64>() < spec.confounder_rate;
            let female = rng.random::<bool>();
            let age: i32 = rng.random_range(25..=80);
            let birth = 2020 - age;
            let mut ids = vec![vocab.sos(), id(&format!("<SEX-{}>", if female { 2 } else { 1 }))?];
            ids.push(id(&format!("<DOBYR-{}>", birth.clamp(1930, 2000)))?);
            ids.push(id(&format!("<AGE-{}>", (age - (hm as i32 / 12)).clamp(18, 95)))?);
            let mut window = vec![false; nb];
            let mut last = 0usize;
            for m in 0..hm {
                if m > 0 && m % 12 == 0 {
                    ids.push(att[m - last]);
                    ids.push(ny);
                    last = m;
                }
                let mut codes = Vec::new();
                let conf_rate = if u && m < window_start { 0.35 } else { 0.01 };
                if rng.random::<f64>() < conf_rate && m < window_start {
                    codes.push(conf_tok);
                }
                for (k, &r) in bg_rate.iter().enumerate() {
                    if rng.random::<f64>() < r {
                        codes.push(bg_tok[k]);
                        if m >= window_start {
                            window[k] = true;
                        }
                    }
                }
                if codes.is_empty() {
                    continue;
                }
                ids.push(att[m - last]);
                last = m;
                ids.push(vt);
                ids.push(dxp);
                ids.extend(&codes);
                ids.push(costs[rng.random_range(0..costs.len())]);
            }
            let mut cov: Vec<f64> = window.iter().map(|&w| w as u8 as f64).collect();
            cov.push(age as f64);
            cov.push(female as u8 as f64);
            let lin = spec.treatment_intercept + spec.treatment_effect_of_confounder * u as u8 as f64 + 0.4 * cov[0] - 0.3 * cov[1];
            let arm = if rng.random::<f64>() < sigmoid(lin) { Arm::A } else { Arm::B };
            let exposure = rng.random_range(0.5..2.0);
            let outcomes: Vec<f64> = (0..n_out)
                .map(|k| {
                    let effect = spec.primary_effects.get(k).copied().unwrap_or(0.0);
                    let log_rate = out_rate[k] + out_conf[k] * u as u8 as f64 + effect * (arm == Arm::A) as u8 as f64 + 0.1 * cov[2 % nb.max(1)];
                    let mean = exposure * log_rate.exp();
                    Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
                })
                .collect();
            let unit = StudyUnit { id: i as u64, arm, covariates: cov, embedding: None, outcomes, exposure };
            Ok((unit, ids, u))
        })
        .collect::<Result<_>>()?;
    let mut names: Vec<String> = (0..nb).map(|k| format!("dx_{}", background_code(k))).collect();
    names.extend(["age".to_string(), "female".to_string()]);
    let outcomes = (0..n_out)
        .map(|k| {
            if k < spec.primary_effects.len() {
                OutcomeDef { id: format!("primary_{k}"), role: OutcomeRole::Primary }
            } else {
                OutcomeDef { id: format!("nco_{}", k - spec.primary_effects.len()), role: OutcomeRole::NegativeControl }
            }
        })
        .collect();
    let mut frame = StudyFrame { covariate_names: names, outcomes, units: Vec::with_capacity(sims.len()) };
    let mut sequences = HashMap::new();
    let mut confounded = Vec::new();
    for (unit, ids, u) in sims {
        sequences.insert(unit.id, ids);
        frame.units.push(unit);
        confounded.push(u);
    }
    Ok(SimulatedStudy { frame, sequences, confounded })
}

/// Training sequences for a sequence model over the simulated vocabulary:
/// full histories (with `<eos>`) from an independent replication.
pub fn confounded_corpus(spec: &ConfoundedSpec, vocab: &Vocabulary, seed: u64) -> Result<Vec<Vec<u32>>> {
    let sim = simulate_confounded_study(spec, vocab, sub_seed(seed, 0xC0FFEE))?;
    let mut ids: Vec<(u64, Vec<u32>)> = sim.sequences.into_iter().collect();
    ids.sort_by_key(|(k, _)| *k);
    Ok(ids
        .into_iter()
        .map(|(_, mut s)| {
            s.push(vocab.eos());
            s
        })
        .collect())
}
