//! Seeded synthetic claims cohorts with planted precursor → disease rules.
//!
//! Each enrollee is generated from its own sub-seed, so the cohort is a pure
//! function of the [`CohortSpec`] and generation parallelizes without
//! affecting output.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calendar::YearMonth;
use crate::money::Cents;
use crate::seed::{labeled_seed, rng_for, sub_seed};
use crate::vocab::Crosswalk;

pub const COHORT_SCHEMA: &str = "claimcraft.cohort";
pub const COHORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("record {enrollee_id}: {reason}")]
    Record { enrollee_id: u64, reason: String },
    #[error("cohort file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(field: &str, reason: impl Into<String>) -> SynthError {
    SynthError::Config { field: field.to_string(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Payer {
    CCAE,
    MDCR,
    MDCD,
}

impl Payer {
    pub const ALL: [Payer; 3] = [Payer::CCAE, Payer::MDCR, Payer::MDCD];

    pub fn as_str(self) -> &'static str {
        match self {
            Payer::CCAE => "CCAE",
            Payer::MDCR => "MDCR",
            Payer::MDCD => "MDCD",
        }
    }

    pub fn parse(s: &str) -> Option<Payer> {
        Payer::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisitType {
    Outpatient,
    Pharmacy,
    Inpatient,
}

impl VisitType {
    pub const ALL: [VisitType; 3] = [VisitType::Outpatient, VisitType::Pharmacy, VisitType::Inpatient];

    pub fn as_str(self) -> &'static str {
        match self {
            VisitType::Outpatient => "outpatient",
            VisitType::Pharmacy => "pharmacy",
            VisitType::Inpatient => "inpatient",
        }
    }

    pub fn parse(s: &str) -> Option<VisitType> {
        VisitType::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentEpisode {
    pub start: YearMonth,
    pub end: YearMonth,
    pub payer: Payer,
    pub plan_type: Option<u8>,
    pub capitated: Option<bool>,
    pub geo_code: Option<String>,
}

impl EnrollmentEpisode {
    pub fn covers(&self, m: YearMonth) -> bool {
        self.start <= m && m <= self.end
    }

    pub fn days(&self) -> i64 {
        (self.end.last_day() - self.start.first_day()).num_days() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedEntry {
    pub code: String,
    pub principal: bool,
}

impl CodedEntry {
    pub fn principal(code: impl Into<String>) -> Self {
        Self { code: code.into(), principal: true }
    }

    pub fn secondary(code: impl Into<String>) -> Self {
        Self { code: code.into(), principal: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimEvent {
    pub date: NaiveDate,
    pub visit_type: VisitType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dx_codes: Vec<CodedEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proc_codes: Vec<CodedEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rx_codes: Vec<String>,
    pub gross_payment: Cents,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discharge_status: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_of_stay_days: Option<u32>,
}

impl ClaimEvent {
    pub fn month(&self) -> YearMonth {
        YearMonth::of(self.date)
    }

    fn check(&self) -> Result<(), String> {
        match self.visit_type {
            VisitType::Pharmacy => {
                if !self.dx_codes.is_empty() || !self.proc_codes.is_empty() {
                    return Err(format!("pharmacy claim on {} carries dx/proc codes", self.date));
                }
            }
            VisitType::Outpatient => {
                if !self.rx_codes.is_empty() {
                    return Err(format!("outpatient claim on {} carries rx codes", self.date));
                }
                if self.discharge_status.is_some() || self.length_of_stay_days.is_some() {
                    return Err(format!("outpatient claim on {} carries inpatient fields", self.date));
                }
            }
            VisitType::Inpatient => {
                if !self.rx_codes.is_empty() {
                    return Err(format!("inpatient claim on {} carries rx codes", self.date));
                }
            }
        }
        for (name, list) in [("dx", &self.dx_codes), ("proc", &self.proc_codes)] {
            if list.windows(2).any(|w| !w[0].principal && w[1].principal) {
                return Err(format!("{name} list on {} has a secondary code before a principal one", self.date));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrolleeRecord {
    pub enrollee_id: u64,
    /// 1 = male, 2 = female.
    pub sex: u8,
    pub birth_year: i32,
    pub enrollment_episodes: Vec<EnrollmentEpisode>,
    pub events: Vec<ClaimEvent>,
}

impl EnrolleeRecord {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |reason: String| SynthError::Record { enrollee_id: self.enrollee_id, reason };
        if self.sex != 1 && self.sex != 2 {
            return Err(err(format!("sex must be 1 or 2, got {}", self.sex)));
        }
        for ep in &self.enrollment_episodes {
            if ep.start > ep.end {
                return Err(err(format!("episode {}..{} ends before it starts", ep.start, ep.end)));
            }
        }
        for w in self.enrollment_episodes.windows(2) {
            if w[1].start <= w[0].end {
                return Err(err(format!("episodes {}..{} and {}..{} overlap or are unsorted", w[0].start, w[0].end, w[1].start, w[1].end)));
            }
        }
        for ev in &self.events {
            if !self.enrollment_episodes.iter().any(|e| e.covers(ev.month())) {
                return Err(err(format!("{} claim on {} is outside every enrollment episode", ev.visit_type.as_str(), ev.date)));
            }
            ev.check().map_err(err)?;
        }
        if let Some(first) = self.first_event_date() {
            if self.birth_year >= chrono::Datelike::year(&first) {
                return Err(err(format!("birth year {} does not precede first event {}", self.birth_year, first)));
            }
        }
        Ok(())
    }

    pub fn first_event_date(&self) -> Option<NaiveDate> {
        self.events.iter().map(|e| e.date).min()
    }

    pub fn last_event_date(&self) -> Option<NaiveDate> {
        self.events.iter().map(|e| e.date).max()
    }

    pub fn enrollment_days(&self) -> i64 {
        self.enrollment_episodes.iter().map(EnrollmentEpisode::days).sum()
    }

    pub fn covers(&self, m: YearMonth) -> bool {
        self.enrollment_episodes.iter().any(|e| e.covers(m))
    }

    pub fn covered_months(&self) -> Vec<YearMonth> {
        self.enrollment_episodes
            .iter()
            .flat_map(|e| (0..=e.start.months_until(e.end)).map(move |k| e.start.plus(k)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodeDomain {
    Dx,
    Proc,
    Rx,
}

/// A raw (source-system) code.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeRef {
    pub domain: CodeDomain,
    pub code: String,
}

impl CodeRef {
    pub fn dx(code: impl Into<String>) -> Self {
        Self { domain: CodeDomain::Dx, code: code.into() }
    }
    pub fn rx(code: impl Into<String>) -> Self {
        Self { domain: CodeDomain::Rx, code: code.into() }
    }
    pub fn proc(code: impl Into<String>) -> Self {
        Self { domain: CodeDomain::Proc, code: code.into() }
    }
}

/// Ground-truth causal structure: enrollees exposed to `precursor` develop
/// `target_dx` after a lag with probability `hazard_given_precursor`;
/// unexposed enrollees develop it with probability `background_hazard`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRule {
    pub precursor: Vec<CodeRef>,
    /// Diagnosis code; its major stem is the evaluation endpoint.
    pub target_dx: String,
    /// Inclusive month range.
    pub lag_months: (u32, u32),
    pub hazard_given_precursor: f64,
    pub background_hazard: f64,
    /// Probability that an enrollee is exposed to the precursor.
    #[serde(default = "default_precursor_rate")]
    pub precursor_rate: f64,
}

fn default_precursor_rate() -> f64 {
    0.2
}

/// Monthly event hazards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct BackgroundRates {
    pub outpatient: f64,
    /// Added to the outpatient hazard per active chronic condition.
    pub outpatient_per_condition: f64,
    /// Monthly fill probability for each active chronic condition with a drug.
    pub pharmacy_per_condition: f64,
    pub inpatient: f64,
    pub chronic_conditions_mean: f64,
    /// Probability that a chronic condition is present at enrollment rather
    /// than arising later.
    pub chronic_prevalent_fraction: f64,
    /// Fraction of source procedure/drug codes without a crosswalk entry.
    pub unmapped_rate: f64,
}

impl Default for BackgroundRates {
    fn default() -> Self {
        Self {
            outpatient: 0.12,
            outpatient_per_condition: 0.06,
            pharmacy_per_condition: 0.3,
            inpatient: 0.006,
            chronic_conditions_mean: 1.5,
            chronic_prevalent_fraction: 0.7,
            unmapped_rate: 0.02,
        }
    }
}

/// Log-normal payment distribution, parameterized by its median in dollars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaymentDist {
    pub median: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct PaymentModel {
    pub outpatient: PaymentDist,
    pub pharmacy: PaymentDist,
    pub inpatient: PaymentDist,
    /// Probability that a claim is a reversal with a non-positive payment.
    pub reversal_probability: f64,
}

impl Default for PaymentModel {
    fn default() -> Self {
        Self {
            outpatient: PaymentDist { median: 180.0, sigma: 1.0 },
            pharmacy: PaymentDist { median: 35.0, sigma: 1.3 },
            inpatient: PaymentDist { median: 14_000.0, sigma: 0.8 },
            reversal_probability: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct Demographics {
    /// Inclusive age range at first enrollment.
    pub age_at_entry: (u32, u32),
    pub female_fraction: f64,
}

impl Default for Demographics {
    fn default() -> Self {
        Self { age_at_entry: (18, 89), female_fraction: 0.54 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct EnrollmentModel {
    pub max_episodes: u32,
    pub min_episode_months: u32,
    pub max_episode_months: u32,
    pub max_gap_months: u32,
    pub medicaid_fraction: f64,
    pub missing_attribute_rate: f64,
}

impl Default for EnrollmentModel {
    fn default() -> Self {
        Self {
            max_episodes: 3,
            min_episode_months: 8,
            max_episode_months: 60,
            max_gap_months: 6,
            medicaid_fraction: 0.15,
            missing_attribute_rate: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub seed: u64,
    pub n_enrollees: usize,
    /// Inclusive calendar-month range.
    pub date_range: (YearMonth, YearMonth),
    pub dx_universe: usize,
    pub proc_universe: usize,
    pub rx_universe: usize,
    #[serde(default)]
    pub planted_rules: Vec<PlantedRule>,
    #[serde(default)]
    pub background_rates: BackgroundRates,
    #[serde(default)]
    pub payment_model: PaymentModel,
    #[serde(default)]
    pub demographics: Demographics,
    #[serde(default)]
    pub enrollment: EnrollmentModel,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_enrollees: 2000,
            date_range: (YearMonth::new(2016, 1), YearMonth::new(2023, 12)),
            dx_universe: 120,
            proc_universe: 150,
            rx_universe: 60,
            planted_rules: Vec::new(),
            background_rates: BackgroundRates::default(),
            payment_model: PaymentModel::default(),
            demographics: Demographics::default(),
            enrollment: EnrollmentModel::default(),
        }
    }
}

fn check_probability(field: &str, p: f64) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(config_err(field, format!("must lie in [0, 1], got {p}")));
    }
    Ok(())
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (start, end) = self.date_range;
        if start.months_until(end) + 1 < 6 {
            return Err(config_err("date_range", format!("{start}..{end} spans fewer than 6 calendar months")));
        }
        if self.dx_universe == 0 {
            return Err(config_err("dx_universe", "must be positive"));
        }
        if self.proc_universe == 0 {
            return Err(config_err("proc_universe", "must be positive"));
        }
        if self.rx_universe == 0 {
            return Err(config_err("rx_universe", "must be positive"));
        }
        let b = &self.background_rates;
        for (f, p) in [
            ("background_rates.outpatient", b.outpatient),
            ("background_rates.outpatient_per_condition", b.outpatient_per_condition),
            ("background_rates.pharmacy_per_condition", b.pharmacy_per_condition),
            ("background_rates.inpatient", b.inpatient),
            ("background_rates.chronic_prevalent_fraction", b.chronic_prevalent_fraction),
            ("background_rates.unmapped_rate", b.unmapped_rate),
            ("payment_model.reversal_probability", self.payment_model.reversal_probability),
            ("demographics.female_fraction", self.demographics.female_fraction),
            ("enrollment.medicaid_fraction", self.enrollment.medicaid_fraction),
            ("enrollment.missing_attribute_rate", self.enrollment.missing_attribute_rate),
        ] {
            check_probability(f, p)?;
        }
        if !(b.chronic_conditions_mean >= 0.0) {
            return Err(config_err("background_rates.chronic_conditions_mean", "must be non-negative"));
        }
        for (name, d) in [
            ("payment_model.outpatient", &self.payment_model.outpatient),
            ("payment_model.pharmacy", &self.payment_model.pharmacy),
            ("payment_model.inpatient", &self.payment_model.inpatient),
        ] {
            if !(d.median > 0.0) || !(d.sigma >= 0.0) {
                return Err(config_err(name, "median must be positive and sigma non-negative"));
            }
        }
        let (lo, hi) = self.demographics.age_at_entry;
        if lo == 0 || lo > hi {
            return Err(config_err("demographics.age_at_entry", format!("invalid range ({lo}, {hi})")));
        }
        let e = &self.enrollment;
        if e.max_episodes == 0 || e.min_episode_months == 0 || e.min_episode_months > e.max_episode_months {
            return Err(config_err("enrollment", "need max_episodes ≥ 1 and 1 ≤ min_episode_months ≤ max_episode_months"));
        }
        for (i, r) in self.planted_rules.iter().enumerate() {
            let f = |s: &str| format!("planted_rules[{i}].{s}");
            check_probability(&f("hazard_given_precursor"), r.hazard_given_precursor)?;
            check_probability(&f("background_hazard"), r.background_hazard)?;
            check_probability(&f("precursor_rate"), r.precursor_rate)?;
            if !(r.hazard_given_precursor > r.background_hazard) {
                return Err(config_err(&f("hazard_given_precursor"), "must exceed background_hazard"));
            }
            if r.lag_months.0 > r.lag_months.1 {
                return Err(config_err(&f("lag_months"), "empty lag range"));
            }
            if r.precursor.is_empty() {
                return Err(config_err(&f("precursor"), "must name at least one code"));
            }
            if crate::vocab::decompose_dx_parts(&r.target_dx).is_none() {
                return Err(config_err(&f("target_dx"), format!("{:?} is not a diagnosis code", r.target_dx)));
            }
        }
        Ok(())
    }

    /// Diagnosis major stems that only planted rules may emit.
    fn reserved_majors(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for r in &self.planted_rules {
            if let Some(p) = crate::vocab::decompose_dx_parts(&r.target_dx) {
                out.insert(p.major.to_string());
            }
            for c in &r.precursor {
                if c.domain == CodeDomain::Dx {
                    match crate::vocab::decompose_dx_parts(&c.code) {
                        Some(p) => out.insert(p.major.to_string()),
                        None => out.insert(c.code.clone()),
                    };
                }
            }
        }
        out
    }
}

/// The synthetic code universe: diagnosis codes and source procedure/drug
/// codes with their crosswalk to standardized concepts.
#[derive(Clone, Debug)]
pub struct CodeUniverse {
    pub dx: Vec<String>,
    pub proc_sources: Vec<String>,
    pub rx_sources: Vec<String>,
    pub crosswalk: Crosswalk,
    /// Drug (index into `rx_sources`) used to treat each diagnosis, if any.
    pub dx_drug: Vec<Option<usize>>,
}

fn zipf_pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T], cumulative: &[f64]) -> &'a T {
    let total = *cumulative.last().expect("non-empty");
    let u = rng.random::<f64>() * total;
    let i = cumulative.partition_point(|&c| c <= u).min(items.len() - 1);
    &items[i]
}

fn zipf_cumulative(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (0..n)
        .map(|i| {
            acc += 1.0 / (i as f64 + 2.0);
            acc
        })
        .collect()
}

impl CodeUniverse {
    pub fn generate(spec: &CohortSpec) -> Self {
        let mut rng = rng_for(labeled_seed(spec.seed, "universe"), 0);
        let reserved = spec.reserved_majors();
        let letters: Vec<char> = ('A'..='Z').filter(|&c| c != 'U').collect();

        let mut majors = BTreeSet::new();
        let mut dx = Vec::new();
        let mut guard = 0;
        while majors.len() < spec.dx_universe && guard < 1_000_000 {
            guard += 1;
            let major = format!("{}{:02}", letters.choose(&mut rng).unwrap(), rng.random_range(0..100));
            if reserved.contains(&major) || !majors.insert(major.clone()) {
                continue;
            }
            let roll = rng.random::<f64>();
            if roll < 0.3 {
                dx.push(major);
            } else if roll < 0.95 {
                let n = rng.random_range(1..=2);
                let mut minors = BTreeSet::new();
                while minors.len() < n {
                    let m = if rng.random_bool(0.5) {
                        format!("{}", rng.random_range(0..10))
                    } else {
                        format!("{}", rng.random_range(10..100))
                    };
                    minors.insert(m);
                }
                dx.extend(minors.into_iter().map(|m| format!("{major}.{m}")));
            } else {
                let suffix = ['A', 'D', 'S'][rng.random_range(0..3)];
                dx.push(format!("{major}.{:03}{suffix}", rng.random_range(0..1000)));
            }
        }

        let mut crosswalk = Crosswalk::default();
        let mut used_concepts = BTreeSet::new();
        let mut fresh_concept = |rng: &mut ChaCha8Rng, lo: u64, hi: u64| loop {
            let c = rng.random_range(lo..hi).to_string();
            if used_concepts.insert(c.clone()) {
                return c;
            }
        };

        let mut proc_sources = Vec::with_capacity(spec.proc_universe);
        let mut seen = BTreeSet::new();
        while proc_sources.len() < spec.proc_universe {
            let src = format!("{:05}", rng.random_range(10_000..100_000));
            if !seen.insert(src.clone()) {
                continue;
            }
            let roll = rng.random::<f64>();
            if roll < spec.background_rates.unmapped_rate {
                // no crosswalk entry
            } else if roll < 0.12 {
                crosswalk.insert(CodeDomain::Proc, &src, vec![format!("CPT4{src}")]);
            } else if roll < 0.85 {
                crosswalk.insert(CodeDomain::Proc, &src, vec![fresh_concept(&mut rng, 1_000_000, 999_999_999)]);
            } else {
                let k = rng.random_range(2..=3);
                let targets = (0..k).map(|_| fresh_concept(&mut rng, 1_000_000, 999_999_999)).collect();
                crosswalk.insert(CodeDomain::Proc, &src, targets);
            }
            proc_sources.push(src);
        }

        let mut rx_sources = Vec::with_capacity(spec.rx_universe);
        while rx_sources.len() < spec.rx_universe {
            let src = format!("{:011}", rng.random_range(10_000_000_000u64..99_999_999_999));
            if !seen.insert(src.clone()) {
                continue;
            }
            let roll = rng.random::<f64>();
            if roll < spec.background_rates.unmapped_rate {
                // no crosswalk entry
            } else if roll < 0.9 {
                crosswalk.insert(CodeDomain::Rx, &src, vec![fresh_concept(&mut rng, 100, 2_000_000)]);
            } else {
                let targets = (0..2).map(|_| fresh_concept(&mut rng, 100, 2_000_000)).collect();
                crosswalk.insert(CodeDomain::Rx, &src, targets);
            }
            rx_sources.push(src);
        }

        // Planted proc/rx codes are standardized as themselves.
        for r in &spec.planted_rules {
            for c in &r.precursor {
                if c.domain != CodeDomain::Dx && crosswalk.map(c.domain, &c.code).is_none() {
                    crosswalk.insert(c.domain, &c.code, vec![c.code.clone()]);
                }
            }
        }

        let dx_drug = (0..dx.len())
            .map(|_| if rng.random_bool(0.6) { Some(rng.random_range(0..rx_sources.len())) } else { None })
            .collect();

        Self { dx, proc_sources, rx_sources, crosswalk, dx_drug }
    }
}

struct EnrolleeGen<'a> {
    spec: &'a CohortSpec,
    universe: &'a CodeUniverse,
    dx_cum: Vec<f64>,
    proc_cum: Vec<f64>,
}

fn random_day(rng: &mut ChaCha8Rng, m: YearMonth) -> NaiveDate {
    let d = rng.random_range(1..=m.days());
    NaiveDate::from_ymd_opt(m.year, m.month, d).expect("valid day")
}

fn payment(rng: &mut ChaCha8Rng, dist: &PaymentDist, reversal: f64) -> Cents {
    if rng.random_bool(reversal) {
        return Cents(-(rng.random_range(0..5_000)));
    }
    let ln = LogNormal::new(dist.median.ln(), dist.sigma.max(1e-9)).expect("valid log-normal");
    Cents::from_dollars_f64(ln.sample(rng)).unwrap_or(Cents::ZERO).max(Cents(1))
}

impl<'a> EnrolleeGen<'a> {
    fn new(spec: &'a CohortSpec, universe: &'a CodeUniverse) -> Self {
        Self {
            spec,
            universe,
            dx_cum: zipf_cumulative(universe.dx.len()),
            proc_cum: zipf_cumulative(universe.proc_sources.len()),
        }
    }

    fn acute_dx(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.dx_cum.last().unwrap();
        let u = rng.random::<f64>() * total;
        self.dx_cum.partition_point(|&c| c <= u).min(self.universe.dx.len() - 1)
    }

    fn proc_code(&self, rng: &mut ChaCha8Rng) -> String {
        zipf_pick(rng, &self.universe.proc_sources, &self.proc_cum).clone()
    }

    fn episodes(&self, rng: &mut ChaCha8Rng, age: u32, birth_year: i32) -> Vec<EnrollmentEpisode> {
        let (range_start, range_end) = self.spec.date_range;
        let e = &self.spec.enrollment;
        let total = range_start.months_until(range_end) + 1;
        let min_len = (e.min_episode_months as i64).min(total);
        let first = range_start.plus(rng.random_range(0..=(total - min_len)));
        let _ = age;
        let missing = e.missing_attribute_rate;
        let geo = if rng.random_bool(missing) { None } else { Some(format!("{:02}", rng.random_range(0..67))) };
        let n_eps = rng.random_range(1..=e.max_episodes);
        let mut out = Vec::new();
        let mut start = first;
        for _ in 0..n_eps {
            let remaining = start.months_until(range_end) + 1;
            if remaining < min_len {
                break;
            }
            let hi = (e.max_episode_months as i64).min(remaining);
            let len = rng.random_range(min_len..=hi.max(min_len));
            let end = start.plus(len - 1);
            let age_then = start.year - birth_year;
            let payer = if rng.random_bool(e.medicaid_fraction) {
                Payer::MDCD
            } else if age_then >= 65 {
                Payer::MDCR
            } else {
                Payer::CCAE
            };
            out.push(EnrollmentEpisode {
                start,
                end,
                payer,
                plan_type: if rng.random_bool(missing) { None } else { Some(rng.random_range(1..=9)) },
                capitated: if rng.random_bool(missing) { None } else { Some(rng.random_bool(0.1)) },
                geo_code: geo.clone(),
            });
            start = end.plus(1 + rng.random_range(1..=e.max_gap_months.max(1) as i64));
        }
        out
    }

    fn outpatient_claim(&self, rng: &mut ChaCha8Rng, date: NaiveDate, principal_dx: String) -> ClaimEvent {
        let mut dx = vec![CodedEntry::principal(principal_dx)];
        if rng.random_bool(0.2) {
            dx.push(CodedEntry::principal(self.universe.dx[self.acute_dx(rng)].clone()));
        }
        for _ in 0..rng.random_range(0..=1) {
            dx.push(CodedEntry::secondary(self.universe.dx[self.acute_dx(rng)].clone()));
        }
        let mut procs: Vec<CodedEntry> = (0..rng.random_range(1..=2)).map(|_| CodedEntry::principal(self.proc_code(rng))).collect();
        if rng.random_bool(0.15) {
            procs.push(CodedEntry::secondary(self.proc_code(rng)));
        }
        ClaimEvent {
            date,
            visit_type: VisitType::Outpatient,
            dx_codes: dx,
            proc_codes: procs,
            rx_codes: Vec::new(),
            gross_payment: payment(rng, &self.spec.payment_model.outpatient, self.spec.payment_model.reversal_probability),
            discharge_status: None,
            length_of_stay_days: None,
        }
    }

    fn generate(&self, index: usize) -> EnrolleeRecord {
        let spec = self.spec;
        let mut rng = rng_for(spec.seed, index as u64);
        let sex = if rng.random_bool(spec.demographics.female_fraction) { 2 } else { 1 };
        let (alo, ahi) = spec.demographics.age_at_entry;
        let age = rng.random_range(alo..=ahi);
        // birth year is fixed relative to the first enrollment month below
        let placeholder_birth = spec.date_range.0.year - age as i32;
        let episodes = self.episodes(&mut rng, age, placeholder_birth);
        let first_month = episodes.first().map(|e| e.start).unwrap_or(spec.date_range.0);
        let birth_year = first_month.year - age as i32;

        let months: Vec<YearMonth> = episodes
            .iter()
            .flat_map(|e| (0..=e.start.months_until(e.end)).map(move |k| e.start.plus(k)))
            .collect();

        // chronic conditions: (dx index, onset month)
        let b = &spec.background_rates;
        let n_chronic = if b.chronic_conditions_mean > 0.0 {
            Poisson::new(b.chronic_conditions_mean).map(|p| p.sample(&mut rng) as usize).unwrap_or(0).min(6)
        } else {
            0
        };
        let mut chronic: Vec<(usize, YearMonth)> = Vec::new();
        for _ in 0..n_chronic {
            let dx = self.acute_dx(&mut rng);
            if chronic.iter().any(|&(d, _)| d == dx) || months.is_empty() {
                continue;
            }
            let onset = if rng.random_bool(b.chronic_prevalent_fraction) {
                months[0]
            } else {
                months[rng.random_range(0..months.len())]
            };
            chronic.push((dx, onset));
        }

        let pm = &spec.payment_model;
        let mut events = Vec::new();
        for &m in &months {
            let active: Vec<usize> = chronic.iter().filter(|&&(_, on)| on <= m).map(|&(d, _)| d).collect();
            let p_out = (b.outpatient + b.outpatient_per_condition * active.len() as f64).min(0.95);
            if rng.random_bool(p_out) {
                let n_claims = if rng.random_bool(0.15) { 2 } else { 1 };
                for _ in 0..n_claims {
                    let principal = if !active.is_empty() && rng.random_bool(0.6) {
                        active[rng.random_range(0..active.len())]
                    } else {
                        self.acute_dx(&mut rng)
                    };
                    let date = random_day(&mut rng, m);
                    events.push(self.outpatient_claim(&mut rng, date, self.universe.dx[principal].clone()));
                }
            }
            let fills: Vec<String> = active
                .iter()
                .filter_map(|&d| self.universe.dx_drug[d])
                .filter(|_| rng.random_bool(b.pharmacy_per_condition))
                .map(|r| self.universe.rx_sources[r].clone())
                .collect();
            if !fills.is_empty() {
                let split = fills.len() > 1 && rng.random_bool(0.3);
                let chunks: Vec<Vec<String>> = if split {
                    fills.iter().map(|f| vec![f.clone()]).collect()
                } else {
                    vec![fills]
                };
                for rx in chunks {
                    events.push(ClaimEvent {
                        date: random_day(&mut rng, m),
                        visit_type: VisitType::Pharmacy,
                        dx_codes: Vec::new(),
                        proc_codes: Vec::new(),
                        rx_codes: rx,
                        gross_payment: payment(&mut rng, &pm.pharmacy, pm.reversal_probability),
                        discharge_status: None,
                        length_of_stay_days: None,
                    });
                }
            }
            if rng.random_bool((b.inpatient * (1.0 + active.len() as f64)).min(1.0)) {
                let principal = if !active.is_empty() && rng.random_bool(0.5) {
                    active[rng.random_range(0..active.len())]
                } else {
                    self.acute_dx(&mut rng)
                };
                let mut dx = vec![CodedEntry::principal(self.universe.dx[principal].clone())];
                for _ in 0..rng.random_range(1..=3) {
                    dx.push(CodedEntry::secondary(self.universe.dx[self.acute_dx(&mut rng)].clone()));
                }
                let mut procs = Vec::new();
                if rng.random_bool(0.4) {
                    procs.push(CodedEntry::principal(self.proc_code(&mut rng)));
                }
                for _ in 0..rng.random_range(0..=2) {
                    procs.push(CodedEntry::secondary(self.proc_code(&mut rng)));
                }
                events.push(ClaimEvent {
                    date: random_day(&mut rng, m),
                    visit_type: VisitType::Inpatient,
                    dx_codes: dx,
                    proc_codes: procs,
                    rx_codes: Vec::new(),
                    gross_payment: payment(&mut rng, &pm.inpatient, pm.reversal_probability),
                    discharge_status: if rng.random_bool(0.9) { Some(rng.random_range(1..=5).to_string()) } else { None },
                    length_of_stay_days: if rng.random_bool(0.9) { Some(rng.random_range(1..=12)) } else { None },
                });
            }
        }

        let covered: BTreeSet<YearMonth> = months.iter().copied().collect();
        for (r_idx, rule) in spec.planted_rules.iter().enumerate() {
            let mut rr = rng_for(sub_seed(spec.seed, (1u64 << 40) + r_idx as u64), index as u64);
            let exposed = rr.random_bool(rule.precursor_rate);
            let lag = rr.random_range(rule.lag_months.0..=rule.lag_months.1) as i64;
            let eligible: Vec<YearMonth> = months.iter().copied().filter(|m| covered.contains(&m.plus(lag))).collect();
            if exposed && !eligible.is_empty() {
                let m = eligible[rr.random_range(0..eligible.len())];
                let date = random_day(&mut rr, m);
                events.extend(self.precursor_claims(&mut rr, date, &rule.precursor));
                if rr.random_bool(rule.hazard_given_precursor) {
                    let tdate = random_day(&mut rr, m.plus(lag));
                    let tdate = if lag == 0 { tdate.max(date) } else { tdate };
                    events.push(self.target_claim(&mut rr, tdate, &rule.target_dx));
                }
            } else if !months.is_empty() && rr.random_bool(rule.background_hazard) {
                let m = months[rr.random_range(0..months.len())];
                let tdate = random_day(&mut rr, m);
                events.push(self.target_claim(&mut rr, tdate, &rule.target_dx));
            }
        }

        events.sort_by(|a, b| a.date.cmp(&b.date).then(a.visit_type.cmp(&b.visit_type)));
        EnrolleeRecord {
            enrollee_id: index as u64 + 1,
            sex,
            birth_year,
            enrollment_episodes: episodes,
            events,
        }
    }

    fn precursor_claims(&self, rng: &mut ChaCha8Rng, date: NaiveDate, precursor: &[CodeRef]) -> Vec<ClaimEvent> {
        let pm = &self.spec.payment_model;
        let dx: Vec<CodedEntry> = precursor.iter().filter(|c| c.domain == CodeDomain::Dx).map(|c| CodedEntry::principal(c.code.clone())).collect();
        let procs: Vec<CodedEntry> = precursor.iter().filter(|c| c.domain == CodeDomain::Proc).map(|c| CodedEntry::principal(c.code.clone())).collect();
        let rx: Vec<String> = precursor.iter().filter(|c| c.domain == CodeDomain::Rx).map(|c| c.code.clone()).collect();
        let mut out = Vec::new();
        if !dx.is_empty() || !procs.is_empty() {
            out.push(ClaimEvent {
                date,
                visit_type: VisitType::Outpatient,
                dx_codes: dx,
                proc_codes: procs,
                rx_codes: Vec::new(),
                gross_payment: payment(rng, &pm.outpatient, 0.0),
                discharge_status: None,
                length_of_stay_days: None,
            });
        }
        if !rx.is_empty() {
            out.push(ClaimEvent {
                date,
                visit_type: VisitType::Pharmacy,
                dx_codes: Vec::new(),
                proc_codes: Vec::new(),
                rx_codes: rx,
                gross_payment: payment(rng, &pm.pharmacy, 0.0),
                discharge_status: None,
                length_of_stay_days: None,
            });
        }
        out
    }

    fn target_claim(&self, rng: &mut ChaCha8Rng, date: NaiveDate, target: &str) -> ClaimEvent {
        ClaimEvent {
            date,
            visit_type: VisitType::Outpatient,
            dx_codes: vec![CodedEntry::principal(target)],
            proc_codes: vec![CodedEntry::principal(self.proc_code(rng))],
            rx_codes: Vec::new(),
            gross_payment: payment(rng, &self.spec.payment_model.outpatient, 0.0),
            discharge_status: None,
            length_of_stay_days: None,
        }
    }
}

/// A generated cohort together with the code universe it was drawn from.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub records: Vec<EnrolleeRecord>,
    pub universe: CodeUniverse,
}

/// Generates the cohort described by `spec`.
///
/// Output is a pure function of `spec`; an `n_enrollees` of zero yields an
/// empty cohort.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let universe = CodeUniverse::generate(spec);
    let gen = EnrolleeGen::new(spec, &universe);
    let records: Vec<EnrolleeRecord> = (0..spec.n_enrollees).into_par_iter().map(|i| gen.generate(i)).collect();
    Ok(Cohort { records, universe })
}

/// True when `record` carries every code of `precursor`.
pub fn has_precursor(record: &EnrolleeRecord, precursor: &[CodeRef]) -> bool {
    precursor.iter().all(|c| {
        record.events.iter().any(|e| match c.domain {
            CodeDomain::Dx => e.dx_codes.iter().any(|d| d.code == c.code),
            CodeDomain::Proc => e.proc_codes.iter().any(|d| d.code == c.code),
            CodeDomain::Rx => e.rx_codes.iter().any(|d| d == &c.code),
        })
    })
}

pub fn has_dx(record: &EnrolleeRecord, code: &str) -> bool {
    record.events.iter().any(|e| e.dx_codes.iter().any(|d| d.code == code))
}

// ---------------------------------------------------------------------------
// Inclusion / exclusion

/// Exclusion criteria in the order they are applied and attributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ValidEnrolleeId,
    MinEnrollmentDuration,
    MinClaimsSpan,
    AgeRestriction,
}

impl Criterion {
    pub const ORDER: [Criterion; 4] = [
        Criterion::ValidEnrolleeId,
        Criterion::MinEnrollmentDuration,
        Criterion::MinClaimsSpan,
        Criterion::AgeRestriction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::ValidEnrolleeId => "valid_enrollee_id",
            Criterion::MinEnrollmentDuration => "min_enrollment_duration",
            Criterion::MinClaimsSpan => "min_claims_span",
            Criterion::AgeRestriction => "age_restriction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct InclusionCriteria {
    pub require_valid_id: bool,
    pub min_enrollment_days: Option<u32>,
    pub min_claims_span_days: Option<u32>,
    /// Inclusive age range at the first observed event.
    pub age_at_first_event: Option<(u32, u32)>,
}

impl Default for InclusionCriteria {
    fn default() -> Self {
        Self {
            require_valid_id: true,
            min_enrollment_days: Some(180),
            min_claims_span_days: Some(30),
            age_at_first_event: Some((10, 110)),
        }
    }
}

impl InclusionCriteria {
    pub fn none() -> Self {
        Self { require_valid_id: false, min_enrollment_days: None, min_claims_span_days: None, age_at_first_event: None }
    }

    /// First criterion the record fails, in table order.
    pub fn first_failure(&self, r: &EnrolleeRecord) -> Option<Criterion> {
        if self.require_valid_id && r.enrollee_id == 0 {
            return Some(Criterion::ValidEnrolleeId);
        }
        if let Some(min) = self.min_enrollment_days {
            if r.enrollment_days() < min as i64 {
                return Some(Criterion::MinEnrollmentDuration);
            }
        }
        if let Some(min) = self.min_claims_span_days {
            let span = match (r.first_event_date(), r.last_event_date()) {
                (Some(a), Some(b)) => (b - a).num_days(),
                _ => -1,
            };
            if span < min as i64 {
                return Some(Criterion::MinClaimsSpan);
            }
        }
        if let Some((lo, hi)) = self.age_at_first_event {
            let ok = r
                .first_event_date()
                .map(|d| {
                    let age = chrono::Datelike::year(&d) - r.birth_year;
                    age >= lo as i32 && age <= hi as i32
                })
                .unwrap_or(false);
            if !ok {
                return Some(Criterion::AgeRestriction);
            }
        }
        None
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExclusionTally {
    pub input: usize,
    pub retained: usize,
    pub excluded: BTreeMap<Criterion, usize>,
}

impl ExclusionTally {
    pub fn total_excluded(&self) -> usize {
        self.excluded.values().sum()
    }
}

/// Filters `records`, attributing each exclusion to the first failing
/// criterion. Order of retained records is preserved.
pub fn apply_inclusion_criteria(records: Vec<EnrolleeRecord>, criteria: &InclusionCriteria) -> (Vec<EnrolleeRecord>, ExclusionTally) {
    let mut tally = ExclusionTally { input: records.len(), ..Default::default() };
    for c in Criterion::ORDER {
        tally.excluded.insert(c, 0);
    }
    let kept: Vec<EnrolleeRecord> = records
        .into_iter()
        .filter(|r| match criteria.first_failure(r) {
            Some(c) => {
                *tally.excluded.get_mut(&c).unwrap() += 1;
                false
            }
            None => true,
        })
        .collect();
    tally.retained = kept.len();
    (kept, tally)
}

// ---------------------------------------------------------------------------
// JSON Lines

#[derive(Serialize, Deserialize)]
struct CohortHeader {
    schema: String,
    version: u32,
    n_records: usize,
}

pub fn write_cohort_jsonl<W: Write>(mut w: W, records: &[EnrolleeRecord]) -> Result<(), SynthError> {
    let header = CohortHeader { schema: COHORT_SCHEMA.into(), version: COHORT_SCHEMA_VERSION, n_records: records.len() };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_cohort_jsonl<R: BufRead>(r: R) -> Result<Vec<EnrolleeRecord>, SynthError> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(SynthError::Parse { line: 1, reason: "missing header".into() })??;
    let header: CohortHeader = serde_json::from_str(&first).map_err(|e| SynthError::Parse { line: 1, reason: e.to_string() })?;
    if header.schema != COHORT_SCHEMA || header.version != COHORT_SCHEMA_VERSION {
        return Err(SynthError::Parse {
            line: 1,
            reason: format!("unsupported schema {} v{}", header.schema, header.version),
        });
    }
    let mut out = Vec::with_capacity(header.n_records);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EnrolleeRecord = serde_json::from_str(&line).map_err(|e| SynthError::Parse { line: i + 2, reason: e.to_string() })?;
        out.push(rec);
    }
    if out.len() != header.n_records {
        return Err(SynthError::Parse {
            line: 0,
            reason: format!("header announces {} records, found {}", header.n_records, out.len()),
        });
    }
    Ok(out)
}
