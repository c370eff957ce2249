//! Disease-onset evaluation.
//!
//! For an endpoint token `k` and horizon Δ, each case is scored at the latest
//! position at least Δ days before its first `k`; controls never contain `k`
//! and are scored at a sampled position in a matching (age decade, sex)
//! stratum. Scores are the final-position logit of `k` after the prompt
//! suffix `<NY> <INSTRUCT-DX>`; AUCs are computed per stratum and averaged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::DAYS_PER_YEAR;
use crate::model::{ModelError, ModelState};
use crate::seed::{labeled_seed, rng_for, sub_seed};
use crate::stats::{auc_delong, bootstrap_mean_ci, holm_adjust, wilcoxon_signed_rank, AucEstimate, PairedTable, StatsError};
use crate::tokenizer::{reconstruct_ages_ids, AgeStep, TokenizeError};
use crate::training::clip_history;
use crate::vocab::{Category, Vocabulary};
use crate::Scalar;

/// The four standard horizons: 1, 6, 12 and 60 months in days.
pub const DEFAULT_HORIZONS: [f64; 4] = [30.0, 182.0, 365.25, 1826.25];

pub const DEFAULT_CONTROL_RATIO: usize = 4;

/// Rare-endpoint prevalence cut-off (5 per 10,000).
pub const RARE_PREVALENCE: f64 = 5e-4;

const AGE_BIN_LO: u32 = 20;
const AGE_BIN_HI: u32 = 100;

#[derive(Debug, Error)]
pub enum OnsetError {
    #[error("endpoint {0} is not a major diagnosis token in the vocabulary")]
    UnknownEndpoint(String),
    #[error("every stratum is degenerate (no case or no control)")]
    AllDegenerate,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Latest position strictly before `j` whose age is at least `delta` days
/// earlier than `ages[j]`.
pub fn pi_of_j(ages: &[f64], j: usize, delta: f64) -> Option<usize> {
    if j >= ages.len() {
        return None;
    }
    let cut = ages[j] - delta;
    let c = ages[..j].partition_point(|&a| a <= cut);
    c.checked_sub(1)
}

/// A tokenized trajectory with per-token ages.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSequence {
    pub id: u64,
    pub ids: Vec<u32>,
    pub ages: Vec<f64>,
    /// Id of the `<SEX-*>` token, if present.
    pub sex: Option<u32>,
}

impl EvalSequence {
    pub fn new(id: u64, ids: Vec<u32>, vocab: &Vocabulary, steps: &[AgeStep]) -> Result<Self, OnsetError> {
        let ages = reconstruct_ages_ids(&ids, steps)?;
        let sex = ids.iter().copied().find(|&t| vocab.category(t) == Some(Category::Sex));
        Ok(EvalSequence { id, ids, ages, sex })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    /// Lower edge of the 10-year age bin.
    pub age_bin: u32,
    pub sex: Option<u32>,
}

impl Stratum {
    pub fn of(age_days: f64, sex: Option<u32>) -> Option<Stratum> {
        let years = age_days / DAYS_PER_YEAR;
        if !(years >= AGE_BIN_LO as f64 && years < AGE_BIN_HI as f64) {
            return None;
        }
        Some(Stratum { age_bin: (years as u32) / 10 * 10, sex })
    }

    pub fn label(&self, vocab: &Vocabulary) -> String {
        let sex = self.sex.and_then(|s| vocab.text(s).ok()).unwrap_or("<SEX-MISSING>");
        format!("{}-{}|{}", self.age_bin, self.age_bin + 9, sex.trim_start_matches("<SEX-").trim_end_matches('>'))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortMember {
    /// Index into the evaluated sequence list.
    pub seq: usize,
    pub pred_index: usize,
    pub stratum: Stratum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointCohort {
    pub endpoint: u32,
    pub delta_days: f64,
    pub cases: Vec<CohortMember>,
    pub controls: Vec<CohortMember>,
}

impl EndpointCohort {
    /// No eligible case.
    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

fn check_endpoint(vocab: &Vocabulary, k: u32) -> Result<(), OnsetError> {
    match vocab.text(k) {
        Ok(t) if t.starts_with("<DX-MAJOR_") => Ok(()),
        Ok(t) => Err(OnsetError::UnknownEndpoint(t.to_string())),
        Err(_) => Err(OnsetError::UnknownEndpoint(format!("id {k}"))),
    }
}

/// Positions a prediction may be made at: after the header, excluding `<eos>`.
fn scorable(seq: &EvalSequence, i: usize, eos: u32) -> bool {
    i >= 3 && seq.ids[i] != eos
}

/// Incident cases at their π-rule prediction index, and up to `ratio`
/// controls per case in each stratum. Controls get one uniformly sampled
/// prediction position among those landing in a case stratum.
pub fn build_endpoint_cohort(
    seqs: &[EvalSequence],
    vocab: &Vocabulary,
    k: u32,
    delta_days: f64,
    ratio: usize,
    seed: u64,
) -> Result<EndpointCohort, OnsetError> {
    check_endpoint(vocab, k)?;
    if !(delta_days >= 0.0) {
        return Err(OnsetError::Invalid("horizon must be non-negative".into()));
    }
    let eos = vocab.eos();
    let mut cases = Vec::new();
    for (s, seq) in seqs.iter().enumerate() {
        let Some(j) = seq.ids.iter().position(|&t| t == k) else { continue };
        let Some(p) = pi_of_j(&seq.ages, j, delta_days) else { continue };
        if !scorable(seq, p, eos) {
            continue;
        }
        if let Some(stratum) = Stratum::of(seq.ages[p], seq.sex) {
            cases.push(CohortMember { seq: s, pred_index: p, stratum });
        }
    }
    let mut per_stratum: BTreeMap<Stratum, usize> = BTreeMap::new();
    for c in &cases {
        *per_stratum.entry(c.stratum).or_default() += 1;
    }
    let base = sub_seed(labeled_seed(seed, "controls"), k as u64);
    let mut pool: BTreeMap<Stratum, Vec<CohortMember>> = BTreeMap::new();
    for (s, seq) in seqs.iter().enumerate() {
        if seq.ids.contains(&k) {
            continue;
        }
        let eligible: Vec<(usize, Stratum)> = (0..seq.ids.len())
            .filter(|&i| scorable(seq, i, eos))
            .filter_map(|i| Stratum::of(seq.ages[i], seq.sex).filter(|st| per_stratum.contains_key(st)).map(|st| (i, st)))
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let mut rng = rng_for(base, s as u64);
        let (i, st) = eligible[rng.random_range(0..eligible.len())];
        pool.entry(st).or_default().push(CohortMember { seq: s, pred_index: i, stratum: st });
    }
    let mut controls = Vec::new();
    for (st, mut members) in pool {
        let cap = ratio * per_stratum[&st];
        if members.len() > cap {
            let mut rng = rng_for(base ^ 0x5EED, st.age_bin as u64 * 1009 + st.sex.unwrap_or(u32::MAX) as u64);
            members.shuffle(&mut rng);
            members.truncate(cap);
            members.sort_by_key(|m| m.seq);
        }
        controls.extend(members);
    }
    Ok(EndpointCohort { endpoint: k, delta_days, cases, controls })
}

/// Prompt for scoring: tokens through `pred_index`, then `<NY> <INSTRUCT-DX>`,
/// clipped from the left to `max_len`. The flag reports clipping.
pub fn risk_prompt(ids: &[u32], pred_index: usize, vocab: &Vocabulary, max_len: usize) -> (Vec<u32>, bool) {
    let hist = &ids[..=pred_index];
    let budget = max_len.saturating_sub(2);
    let clipped = hist.len() > budget;
    let mut p = if clipped { clip_history(hist, budget, vocab) } else { hist.to_vec() };
    p.push(vocab.ny());
    p.push(vocab.instruct_dx());
    (p, clipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskScore {
    pub value: f64,
    pub truncated: bool,
}

/// Final-position logit of `k` after the scoring suffix.
pub fn score_risk<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    ids: &[u32],
    pred_index: usize,
    k: u32,
) -> Result<RiskScore, OnsetError> {
    if pred_index >= ids.len() {
        return Err(OnsetError::Invalid(format!("prediction index {pred_index} beyond sequence of {}", ids.len())));
    }
    let logits = prompt_logits(state, vocab, ids, pred_index)?;
    Ok(RiskScore { value: logits.0[k as usize], truncated: logits.1 })
}

fn prompt_logits<T: Scalar>(state: &ModelState<T>, vocab: &Vocabulary, ids: &[u32], pred: usize) -> Result<(Vec<f64>, bool), OnsetError> {
    let (prompt, truncated) = risk_prompt(ids, pred, vocab, state.config().max_positions);
    let h = state.hidden_states(&prompt)?;
    let last = h.row(h.nrows() - 1).to_vec();
    Ok((state.logits_from_hidden(&last).into_iter().map(Scalar::f64).collect(), truncated))
}

/// Case and control scores for one cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortScores {
    pub cases: Vec<f64>,
    pub controls: Vec<f64>,
    pub truncated: usize,
}

/// Scores several cohorts at once, running the model once per distinct
/// (sequence, prediction index) prompt.
pub fn score_cohorts<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    seqs: &[EvalSequence],
    cohorts: &[EndpointCohort],
) -> Result<Vec<CohortScores>, OnsetError> {
    let keys: BTreeSet<(usize, usize)> =
        cohorts.iter().flat_map(|c| c.cases.iter().chain(&c.controls)).map(|m| (m.seq, m.pred_index)).collect();
    let keys: Vec<(usize, usize)> = keys.into_iter().collect();
    let logits: Vec<(Vec<f64>, bool)> =
        keys.par_iter().map(|&(s, p)| prompt_logits(state, vocab, &seqs[s].ids, p)).collect::<Result<_, _>>()?;
    let index: HashMap<(usize, usize), usize> = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    Ok(cohorts
        .iter()
        .map(|c| {
            let mut truncated = 0;
            let mut get = |m: &CohortMember| {
                let (l, t) = &logits[index[&(m.seq, m.pred_index)]];
                truncated += *t as usize;
                l[c.endpoint as usize]
            };
            let cases = c.cases.iter().map(&mut get).collect();
            let controls = c.controls.iter().map(&mut get).collect();
            CohortScores { cases, controls, truncated }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Unweighted,
    CaseWeighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumResult {
    pub stratum: Stratum,
    pub cases: usize,
    pub controls: usize,
    /// `None` for a degenerate stratum.
    pub auc: Option<AucEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointResult {
    pub endpoint: u32,
    pub delta_days: f64,
    pub strata: Vec<StratumResult>,
    pub auc: f64,
    /// Variance of the aggregate, treating strata as independent.
    pub variance: f64,
}

impl EndpointResult {
    pub fn n_cases(&self) -> usize {
        self.strata.iter().map(|s| s.cases).sum()
    }

    pub fn n_controls(&self) -> usize {
        self.strata.iter().map(|s| s.controls).sum()
    }
}

/// Per-stratum DeLong AUCs and their average over non-degenerate strata.
pub fn evaluate_scores(cohort: &EndpointCohort, scores: &CohortScores, mode: Aggregation) -> Result<EndpointResult, OnsetError> {
    if scores.cases.len() != cohort.cases.len() || scores.controls.len() != cohort.controls.len() {
        return Err(OnsetError::Invalid("scores do not match cohort".into()));
    }
    let mut by: BTreeMap<Stratum, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (m, &s) in cohort.cases.iter().zip(&scores.cases) {
        by.entry(m.stratum).or_default().0.push(s);
    }
    for (m, &s) in cohort.controls.iter().zip(&scores.controls) {
        by.entry(m.stratum).or_default().1.push(s);
    }
    let mut strata = Vec::new();
    for (stratum, (x, y)) in by {
        let auc = if x.is_empty() || y.is_empty() { None } else { Some(auc_delong(&x, &y)?) };
        strata.push(StratumResult { stratum, cases: x.len(), controls: y.len(), auc });
    }
    let used: Vec<(f64, &AucEstimate)> = strata
        .iter()
        .filter_map(|s| s.auc.as_ref().map(|a| (if mode == Aggregation::CaseWeighted { s.cases as f64 } else { 1.0 }, a)))
        .collect();
    if used.is_empty() {
        return Err(OnsetError::AllDegenerate);
    }
    let wsum: f64 = used.iter().map(|(w, _)| w).sum();
    let auc = used.iter().map(|(w, a)| w * a.auc).sum::<f64>() / wsum;
    let variance = used.iter().map(|(w, a)| w * w * a.variance).sum::<f64>() / (wsum * wsum);
    Ok(EndpointResult { endpoint: cohort.endpoint, delta_days: cohort.delta_days, strata, auc, variance })
}

pub fn evaluate_endpoint<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    seqs: &[EvalSequence],
    cohort: &EndpointCohort,
    mode: Aggregation,
) -> Result<EndpointResult, OnsetError> {
    let scores = score_cohorts(state, vocab, seqs, std::slice::from_ref(cohort))?;
    evaluate_scores(cohort, &scores[0], mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub endpoint: String,
    pub delta_days: f64,
    pub cases: usize,
    pub controls: usize,
    pub auc: Option<f64>,
    pub variance: Option<f64>,
    /// `ok`, `empty` (no eligible case) or `degenerate`.
    pub status: String,
    pub result: Option<EndpointResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub horizons: Vec<f64>,
    pub control_ratio: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec { horizons: DEFAULT_HORIZONS.to_vec(), control_ratio: DEFAULT_CONTROL_RATIO, aggregation: Aggregation::Unweighted, seed: 0 }
    }
}

/// One row per (endpoint, horizon), endpoints in input order.
pub fn horizon_sweep<T: Scalar>(
    state: &ModelState<T>,
    vocab: &Vocabulary,
    seqs: &[EvalSequence],
    endpoints: &[u32],
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>, OnsetError> {
    if spec.horizons.iter().any(|d| !(*d > 0.0)) {
        return Err(OnsetError::Invalid("horizons must be positive".into()));
    }
    let mut cohorts = Vec::new();
    for &k in endpoints {
        for &d in &spec.horizons {
            cohorts.push(build_endpoint_cohort(seqs, vocab, k, d, spec.control_ratio, spec.seed)?);
        }
    }
    let scores = score_cohorts(state, vocab, seqs, &cohorts)?;
    let mut rows = Vec::with_capacity(cohorts.len());
    for (c, s) in cohorts.iter().zip(&scores) {
        let endpoint = vocab.text(c.endpoint).unwrap_or("?").to_string();
        let base = SweepRow {
            endpoint,
            delta_days: c.delta_days,
            cases: c.cases.len(),
            controls: c.controls.len(),
            auc: None,
            variance: None,
            status: "empty".into(),
            result: None,
        };
        if c.is_empty() {
            rows.push(base);
            continue;
        }
        rows.push(match evaluate_scores(c, s, spec.aggregation) {
            Ok(r) => SweepRow { auc: Some(r.auc), variance: Some(r.variance), status: "ok".into(), result: Some(r), ..base },
            Err(OnsetError::AllDegenerate) => SweepRow { status: "degenerate".into(), ..base },
            Err(e) => return Err(e),
        });
    }
    Ok(rows)
}

/// Fraction of sequences containing `k` anywhere.
pub fn prevalence(seqs: &[EvalSequence], k: u32) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    seqs.iter().filter(|s| s.ids.contains(&k)).count() as f64 / seqs.len() as f64
}

/// Endpoints worth evaluating: major diagnosis tokens that occur in at
/// least `min_count` sequences, most frequent first.
pub fn frequent_endpoints(seqs: &[EvalSequence], vocab: &Vocabulary, min_count: usize) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in seqs {
        let uniq: BTreeSet<u32> = s.ids.iter().copied().collect();
        for k in uniq {
            if vocab.text(k).is_ok_and(|t| t.starts_with("<DX-MAJOR_")) {
                *counts.entry(k).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(u32, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(k, _)| k).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub model: String,
    pub reference: String,
    pub n: usize,
    pub mean_delta: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p: f64,
    pub p_holm: f64,
    /// Share of endpoints where `model` beats `reference`.
    pub fraction_above: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub all: Vec<ModelComparison>,
    /// Same comparisons restricted to endpoints with prevalence below the threshold.
    pub rare: Vec<ModelComparison>,
    pub rare_labels: Vec<String>,
}

fn compare_subset(table: &PairedTable, reference: &str, idx: &[usize], n_resamples: usize, seed: u64) -> Result<Vec<ModelComparison>, OnsetError> {
    let r = table.column(reference).ok_or_else(|| OnsetError::Invalid(format!("unknown reference model {reference}")))?;
    let mut out = Vec::new();
    for (name, col) in table.models.iter().filter(|(n, _)| n != reference) {
        let d: Vec<f64> = idx.iter().map(|&i| col[i] - r[i]).collect();
        if d.is_empty() {
            continue;
        }
        let ci = bootstrap_mean_ci(&d, n_resamples, 0.95, sub_seed(seed, out.len() as u64))?;
        let w = wilcoxon_signed_rank(&d)?;
        out.push(ModelComparison {
            model: name.clone(),
            reference: reference.to_string(),
            n: d.len(),
            mean_delta: ci.mean,
            ci_lo: ci.lo,
            ci_hi: ci.hi,
            p: w.p,
            p_holm: w.p,
            fraction_above: d.iter().filter(|&&x| x > 0.0).count() as f64 / d.len() as f64,
        });
    }
    let adj = holm_adjust(&out.iter().map(|c| c.p).collect::<Vec<_>>())?;
    for (c, a) in out.iter_mut().zip(adj) {
        c.p_holm = a;
    }
    Ok(out)
}

/// Every other model against `reference`: mean paired difference with a
/// bootstrap interval over endpoints, Wilcoxon p (Holm-adjusted across
/// models) and the share of endpoints above the diagonal; repeated on the
/// rare subset.
pub fn compare_models(
    table: &PairedTable,
    reference: &str,
    prevalence: &[f64],
    rare_threshold: f64,
    n_resamples: usize,
    seed: u64,
) -> Result<ComparisonReport, OnsetError> {
    table.validate()?;
    if prevalence.len() != table.labels.len() {
        return Err(OnsetError::Stats(StatsError::Misaligned("prevalence does not match labels".into())));
    }
    let all_idx: Vec<usize> = (0..table.labels.len()).collect();
    let rare_idx: Vec<usize> = all_idx.iter().copied().filter(|&i| prevalence[i] < rare_threshold).collect();
    Ok(ComparisonReport {
        all: compare_subset(table, reference, &all_idx, n_resamples, seed)?,
        rare: compare_subset(table, reference, &rare_idx, n_resamples, seed)?,
        rare_labels: rare_idx.iter().map(|&i| table.labels[i].clone()).collect(),
    })
}

/// `endpoint,delta_days,stratum,cases,controls,auc,variance`; the aggregate
/// appears with stratum `all`.
pub fn write_endpoint_csv<W: Write>(mut w: W, rows: &[SweepRow], vocab: &Vocabulary) -> std::io::Result<()> {
    writeln!(w, "endpoint,delta_days,stratum,cases,controls,auc,variance,status")?;
    let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        writeln!(w, "{},{},all,{},{},{},{},{}", r.endpoint, r.delta_days, r.cases, r.controls, f(r.auc), f(r.variance), r.status)?;
        if let Some(res) = &r.result {
            for s in &res.strata {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    r.endpoint,
                    r.delta_days,
                    s.stratum.label(vocab),
                    s.cases,
                    s.controls,
                    f(s.auc.map(|a| a.auc)),
                    f(s.auc.map(|a| a.variance)),
                    if s.auc.is_some() { "ok" } else { "degenerate" }
                )?;
            }
        }
    }
    Ok(())
}

/// Per-endpoint values of each model followed by the summary rows.
pub fn write_comparison_csv<W: Write>(mut w: W, table: &PairedTable, report: &ComparisonReport) -> std::io::Result<()> {
    let names: Vec<&str> = table.models.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(w, "endpoint,{}", names.join(","))?;
    for (i, l) in table.labels.iter().enumerate() {
        let vals: Vec<String> = table.models.iter().map(|(_, v)| format!("{:.6}", v[i])).collect();
        writeln!(w, "{l},{}", vals.join(","))?;
    }
    writeln!(w)?;
    writeln!(w, "subset,model,reference,n,mean_delta,ci_lo,ci_hi,p,p_holm,fraction_above")?;
    for (subset, rows) in [("all", &report.all), ("rare", &report.rare)] {
        for c in rows {
            writeln!(
                w,
                "{subset},{},{},{},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.4}",
                c.model, c.reference, c.n, c.mean_delta, c.ci_lo, c.ci_hi, c.p, c.p_holm, c.fraction_above
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pi_fixtures() {
        assert_eq!(pi_of_j(&[100.0, 200.0, 400.0, 800.0], 3, 365.0), Some(2));
        assert_eq!(pi_of_j(&[1.0, 2.0, 3.0, 4.0], 3, 0.0), Some(2));
        assert_eq!(pi_of_j(&[1.0, 2.0], 0, 0.0), None);
        assert_eq!(pi_of_j(&[100.0, 200.0], 1, 150.0), None);
    }

    #[test]
    fn strata_bins() {
        assert_eq!(Stratum::of(19.99 * DAYS_PER_YEAR, None), None);
        assert_eq!(Stratum::of(20.0 * DAYS_PER_YEAR, Some(1)).unwrap().age_bin, 20);
        assert_eq!(Stratum::of(99.5 * DAYS_PER_YEAR, None).unwrap().age_bin, 90);
        assert_eq!(Stratum::of(100.0 * DAYS_PER_YEAR, None), None);
    }
}
