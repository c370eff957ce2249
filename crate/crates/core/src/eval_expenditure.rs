//! Next-year expenditure forecasting.
//!
//! An instance is a trajectory cut at the end of a calendar year with the
//! following year's total gross payments as target. Forecasts come from
//! sampled continuations: the `<COST-*>` tokens between the first and second
//! generated `<NY>` are decoded and summed, then averaged over samples.

use std::cell::Cell;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::YearMonth;
use crate::model::{continue_sampling, KvCache, ModelError, ModelState, SamplingConfig};
use crate::money::Cents;
use crate::seed::{rng_for, sub_seed};
use crate::synthgen::EnrolleeRecord;
use crate::stats::quantile_sorted;
use crate::training::clip_history;
use crate::vocab::{decode_cost_token, token_value, Category, Vocabulary};
use crate::Scalar;

pub const DEFAULT_SAMPLES: usize = 20;
pub const DEFAULT_MAX_NEW: usize = 384;

#[derive(Debug, Error)]
pub enum ExpenditureError {
    #[error("sequence {0}: {1}")]
    Sequence(u64, String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("instance file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A trajectory cut at the last token of `year`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpenditureInstance {
    pub enrollee_id: u64,
    /// Context (prediction) year; the target covers `year + 1`.
    pub year: i32,
    pub prediction_index: usize,
    /// Dollars, clamped at zero.
    pub target: f64,
    pub context: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoSequence,
    ShortHistory,
    NoFollowUp,
    NoContext,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceBuild {
    pub instances: Vec<ExpenditureInstance>,
    pub skipped: Vec<(u64, SkipReason)>,
}

impl InstanceBuild {
    pub fn skip_counts(&self) -> HashMap<SkipReason, usize> {
        let mut m = HashMap::new();
        for (_, r) in &self.skipped {
            *m.entry(*r).or_default() += 1;
        }
        m
    }
}

/// Calendar month of every token: the anchor January (birth year plus the
/// `<AGE-*>` value) advanced by each `<ATT-*>`.
pub fn token_months(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<YearMonth>, String> {
    let value = |id: u32| vocab.text(id).ok().and_then(token_value).and_then(|v| v.parse::<i32>().ok());
    let birth = ids.iter().find(|&&t| vocab.category(t) == Some(Category::Dobyr)).and_then(|&t| value(t));
    let age = ids.iter().find(|&&t| vocab.category(t) == Some(Category::Age)).and_then(|&t| value(t));
    let (Some(b), Some(a)) = (birth, age) else {
        return Err("missing birth-year or age anchor".into());
    };
    let mut cur = YearMonth::january(b + a);
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if let Some(n) = vocab.att_value(id) {
            cur = cur.plus(n as i64);
        }
        out.push(cur);
    }
    Ok(out)
}

/// Sum of raw payments dated in `year`, clamped at zero.
pub fn annual_payments(record: &EnrolleeRecord, year: i32) -> Cents {
    let total: i64 = record.events.iter().filter(|e| YearMonth::of(e.date).year == year).map(|e| e.gross_payment.0).sum();
    Cents(total.max(0))
}

/// One instance per eligible enrollee, at the latest year `Y` such that all
/// twelve months of `Y + 1` are enrolled and enrollment began no later than
/// January of `Y`.
pub fn build_expenditure_instances(
    records: &[EnrolleeRecord],
    sequences: &[(u64, Vec<u32>)],
    vocab: &Vocabulary,
) -> Result<InstanceBuild, ExpenditureError> {
    let by_id: HashMap<u64, &Vec<u32>> = sequences.iter().map(|(id, s)| (*id, s)).collect();
    let eos = vocab.eos();
    let mut out = InstanceBuild::default();
    for r in records {
        let Some(ids) = by_id.get(&r.enrollee_id) else {
            out.skipped.push((r.enrollee_id, SkipReason::NoSequence));
            continue;
        };
        let covered = r.covered_months();
        let Some(&first) = covered.iter().min() else {
            out.skipped.push((r.enrollee_id, SkipReason::ShortHistory));
            continue;
        };
        let last_full_year = covered
            .iter()
            .map(|m| m.year)
            .filter(|&y| (1..=12).all(|mo| r.covers(YearMonth::new(y, mo))))
            .max();
        let Some(follow) = last_full_year.filter(|&y| YearMonth::january(y - 1) >= first) else {
            let reason = if last_full_year.is_none() { SkipReason::NoFollowUp } else { SkipReason::ShortHistory };
            out.skipped.push((r.enrollee_id, reason));
            continue;
        };
        let year = follow - 1;
        let months = token_months(ids, vocab).map_err(|e| ExpenditureError::Sequence(r.enrollee_id, e))?;
        let Some(p) = (0..ids.len()).rev().find(|&i| ids[i] != eos && months[i].year <= year) else {
            out.skipped.push((r.enrollee_id, SkipReason::NoContext));
            continue;
        };
        if p < 4 {
            out.skipped.push((r.enrollee_id, SkipReason::NoContext));
            continue;
        }
        out.instances.push(ExpenditureInstance {
            enrollee_id: r.enrollee_id,
            year,
            prediction_index: p,
            target: annual_payments(r, follow).dollars(),
            context: ids[..=p].to_vec(),
        });
    }
    Ok(out)
}

/// Decoded cost of the span between the first and second `<NY>` in a
/// generated continuation. `complete` is false when the continuation ends
/// before the span is closed by a second `<NY>` or `<eos>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YearCost {
    pub dollars: f64,
    pub complete: bool,
}

pub fn next_year_cost(generated: &[u32], vocab: &Vocabulary) -> YearCost {
    let (ny, eos) = (vocab.ny(), vocab.eos());
    let mut seen_ny = 0;
    let mut sum = 0i64;
    for &t in generated {
        if t == eos {
            return YearCost { dollars: Cents(sum).dollars(), complete: true };
        }
        if t == ny {
            seen_ny += 1;
            if seen_ny == 2 {
                return YearCost { dollars: Cents(sum).dollars(), complete: true };
            }
            continue;
        }
        if seen_ny == 1 {
            if let Some(c) = vocab.text(t).ok().and_then(decode_cost_token) {
                sum += c.0;
            }
        }
    }
    YearCost { dollars: Cents(sum).dollars(), complete: false }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleAggregation {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastSpec {
    pub n_samples: usize,
    pub max_new: usize,
    pub aggregation: SampleAggregation,
    pub sampling: SamplingConfig,
}

impl Default for ForecastSpec {
    fn default() -> Self {
        ForecastSpec {
            n_samples: DEFAULT_SAMPLES,
            max_new: DEFAULT_MAX_NEW,
            aggregation: SampleAggregation::Mean,
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub estimate: f64,
    pub samples: Vec<f64>,
    /// Samples that hit the generation limit inside the target year.
    pub partial: usize,
    pub prompt_clipped: bool,
}

/// Forecast for one context. Sample `s` draws from `rng_for(seed, s)`, so
/// the result does not depend on scheduling.
pub fn predict_expenditure<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    context: &[u32],
    spec: &ForecastSpec,
    seed: u64,
) -> Result<Forecast, ExpenditureError> {
    if spec.n_samples == 0 {
        return Err(ExpenditureError::Invalid("n_samples must be at least 1".into()));
    }
    let max_pos = state.config().max_positions;
    let max_new = spec.max_new.min(max_pos / 2).max(1);
    let budget = max_pos - max_new;
    let prompt_clipped = context.len() > budget;
    let prompt = if prompt_clipped { clip_history(context, budget, vocab) } else { context.to_vec() };
    if prompt.is_empty() {
        return Err(ExpenditureError::Invalid("empty context".into()));
    }
    let mut base = KvCache::new(state);
    let logits = base.extend_last(state, &prompt)?;
    let (ny, eos) = (vocab.ny(), vocab.eos());
    let costs: Vec<YearCost> = (0..spec.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut cache = base.clone();
            let mut rng = rng_for(seed, s as u64);
            let seen = Cell::new(0usize);
            let stop = |t: u32| {
                if t == ny {
                    seen.set(seen.get() + 1);
                }
                t == eos || seen.get() >= 2
            };
            let gen = continue_sampling(state, &mut cache, logits.clone(), &spec.sampling, max_new, &stop, &mut rng)?;
            Ok(next_year_cost(&gen, vocab))
        })
        .collect::<Result<_, ModelError>>()?;
    let samples: Vec<f64> = costs.iter().map(|c| c.dollars).collect();
    let estimate = match spec.aggregation {
        SampleAggregation::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
        SampleAggregation::Median => {
            let mut s = samples.clone();
            s.sort_by(f64::total_cmp);
            quantile_sorted(&s, 0.5)
        }
    };
    Ok(Forecast { estimate, samples, partial: costs.iter().filter(|c| !c.complete).count(), prompt_clipped })
}

/// Forecasts for every instance; instance `i` uses seed `sub_seed(seed, i)`.
pub fn predict_all<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    instances: &[ExpenditureInstance],
    spec: &ForecastSpec,
    seed: u64,
) -> Result<Vec<Forecast>, ExpenditureError> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| predict_expenditure(state, vocab, &inst.context, spec, sub_seed(seed, i as u64)))
        .collect()
}

/// Class cut-offs in dollars. Classes are half-open: a value equal to a
/// cut-off belongs to the class above it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub low_mid: f64,
    pub mid_high: f64,
    pub hnhc: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { low_mid: 1_500.0, mid_high: 15_000.0, hnhc: 30_000.0 }
    }
}

impl Thresholds {
    /// Cut-offs at target quantiles, for cohorts whose payment scale differs.
    pub fn from_percentiles(targets: &[f64], low_mid: f64, mid_high: f64, hnhc: f64) -> Result<Self, ExpenditureError> {
        if targets.is_empty() {
            return Err(ExpenditureError::Invalid("no targets".into()));
        }
        let mut t = targets.to_vec();
        t.sort_by(f64::total_cmp);
        Ok(Thresholds { low_mid: quantile_sorted(&t, low_mid), mid_high: quantile_sorted(&t, mid_high), hnhc: quantile_sorted(&t, hnhc) })
    }

    /// 0 = low, 1 = middle, 2 = high.
    pub fn class(&self, dollars: f64) -> usize {
        if dollars < self.low_mid {
            0
        } else if dollars < self.mid_high {
            1
        } else {
            2
        }
    }

    pub fn is_hnhc(&self, dollars: f64) -> bool {
        dollars >= self.hnhc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> BinaryScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    BinaryScores { precision, recall, f1 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpenditureMetrics {
    pub n: usize,
    pub mae: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; 3]; 3],
    pub accuracy: f64,
    pub per_class: [BinaryScores; 3],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub hnhc: BinaryScores,
}

impl ExpenditureMetrics {
    /// `(name, value)` rows in a fixed order; an undefined R² is NaN.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("n", self.n as f64),
            ("mae", self.mae),
            ("r2", self.r2.unwrap_or(f64::NAN)),
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("hnhc_precision", self.hnhc.precision),
            ("hnhc_recall", self.hnhc.recall),
            ("hnhc_f1", self.hnhc.f1),
        ]
    }
}

pub fn expenditure_metrics(preds: &[f64], targets: &[f64], th: &Thresholds) -> Result<ExpenditureMetrics, ExpenditureError> {
    if preds.len() != targets.len() {
        return Err(ExpenditureError::Invalid(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(ExpenditureError::Invalid("no instances".into()));
    }
    if preds.iter().chain(targets).any(|x| !x.is_finite()) {
        return Err(ExpenditureError::Invalid("non-finite value".into()));
    }
    let n = preds.len();
    let nf = n as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / nf;
    let mean = targets.iter().sum::<f64>() / nf;
    let sst: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (t - p).powi(2)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);

    let mut confusion = [[0usize; 3]; 3];
    for (p, t) in preds.iter().zip(targets) {
        confusion[th.class(*t)][th.class(*p)] += 1;
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let per_class: [BinaryScores; 3] = std::array::from_fn(|c| {
        let tp = confusion[c][c];
        let fp = (0..3).map(|r| confusion[r][c]).sum::<usize>() - tp;
        let fn_ = confusion[c].iter().sum::<usize>() - tp;
        prf(tp, fp, fn_)
    });
    let avg = |f: fn(&BinaryScores) -> f64| per_class.iter().map(f).sum::<f64>() / 3.0;

    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, t) in preds.iter().zip(targets) {
        match (th.is_hnhc(*p), th.is_hnhc(*t)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(ExpenditureMetrics {
        n,
        mae,
        r2,
        confusion,
        accuracy: correct as f64 / nf,
        per_class,
        macro_precision: avg(|s| s.precision),
        macro_recall: avg(|s| s.recall),
        macro_f1: avg(|s| s.f1),
        hnhc: prf(tp, fp, fn_),
    })
}

pub fn write_instances_jsonl<W: Write>(mut w: W, instances: &[ExpenditureInstance]) -> Result<(), ExpenditureError> {
    for i in instances {
        serde_json::to_writer(&mut w, i).map_err(|e| ExpenditureError::Invalid(e.to_string()))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_instances_jsonl<R: BufRead>(r: R) -> Result<Vec<ExpenditureInstance>, ExpenditureError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ExpenditureError::Parse { line: k + 1, reason: e.to_string() })?);
    }
    Ok(out)
}

/// `cohort,model,metric,value`.
pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[(String, String, ExpenditureMetrics)]) -> std::io::Result<()> {
    writeln!(w, "cohort,model,metric,value")?;
    for (cohort, model, m) in rows {
        for (name, v) in m.rows() {
            writeln!(w, "{cohort},{model},{name},{v:.6}")?;
        }
    }
    Ok(())
}
