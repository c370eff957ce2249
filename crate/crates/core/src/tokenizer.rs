//! Assembly of enrollee records into monthly-resolution token sequences, and
//! the inverse parse.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::ops::Range;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::NaiveDate;
use rayon::prelude::*;
use thiserror::Error;

use crate::calendar::{YearMonth, DAYS_PER_MONTH, DAYS_PER_YEAR};
use crate::money::Cents;
use crate::synthgen::{ClaimEvent, CodeDomain, EnrolleeRecord, VisitType};
use crate::vocab::{
    self, category_of, decompose_dx, decode_cost_token, encode_cost, marker, nomap, tok, token_value, Category, Crosswalk,
    VocabError, Vocabulary, EOS, MISSING, NY, SOS,
};

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("enrollee {enrollee_id}: {reason}")]
    DataIntegrity { enrollee_id: u64, reason: String },
    #[error("enrollee {0} has no events or enrollment")]
    Empty(u64),
    #[error("token {index}: {reason}")]
    Parse { index: usize, reason: String },
    #[error("sequence has no <DOBYR-*> anchor")]
    MissingDobyr,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("sequence file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Event kinds in within-month order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Anchor,
    EnrollmentStart,
    Outpatient,
    Pharmacy,
    Inpatient,
    EnrollmentEnd,
}

impl EventKind {
    fn of_visit(v: VisitType) -> EventKind {
        match v {
            VisitType::Outpatient => EventKind::Outpatient,
            VisitType::Pharmacy => EventKind::Pharmacy,
            VisitType::Inpatient => EventKind::Inpatient,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonthlyGroup {
    pub month: YearMonth,
    pub kind: EventKind,
    /// Ordered payload, e.g. `<VT-outpatient> <DX-PRINCIPAL> ... <COST-32>`.
    pub tokens: Vec<String>,
    /// Claim dates behind the group; empty after [`detokenize`].
    pub source_dates: Vec<NaiveDate>,
}

impl MonthlyGroup {
    /// Decoded cost of the group, if it carries a cost token.
    pub fn cost(&self) -> Option<Cents> {
        self.tokens.iter().find_map(|t| decode_cost_token(t))
    }
}

/// Monthly view of one enrollee: what a token sequence can represent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MonthlyRecord {
    pub enrollee_id: u64,
    /// 1, 2, or 0 when missing.
    pub sex: u8,
    pub birth_year: i32,
    /// Data groups sorted by (month, kind). Anchors are implied.
    pub groups: Vec<MonthlyGroup>,
}

impl MonthlyRecord {
    pub fn without_dates(mut self) -> Self {
        for g in &mut self.groups {
            g.source_dates.clear();
        }
        self
    }

    pub fn first_month(&self) -> Option<YearMonth> {
        self.groups.first().map(|g| g.month)
    }
}

/// Maps raw codes to tokens, falling back to NOMAP for codes the vocabulary
/// does not know.
#[derive(Clone, Copy)]
pub struct CodeMapper<'a> {
    pub crosswalk: &'a Crosswalk,
    pub vocab: Option<&'a Vocabulary>,
}

impl<'a> CodeMapper<'a> {
    pub fn new(crosswalk: &'a Crosswalk, vocab: Option<&'a Vocabulary>) -> Self {
        Self { crosswalk, vocab }
    }

    fn known(&self, toks: Vec<String>, domain: CodeDomain) -> Vec<String> {
        match self.vocab {
            Some(v) if !toks.iter().all(|t| v.contains(t)) => vec![nomap(domain)],
            _ => toks,
        }
    }

    pub fn dx(&self, code: &str) -> Vec<String> {
        self.known(decompose_dx(code), CodeDomain::Dx)
    }

    pub fn code(&self, domain: CodeDomain, code: &str) -> Vec<String> {
        match domain {
            CodeDomain::Dx => self.dx(code),
            _ => self.known(self.crosswalk.tokens(domain, code), domain),
        }
    }

    /// Structural token, or the category's MISSING token when unknown.
    fn structural(&self, cat: Category, value: Option<String>) -> Result<String, TokenizeError> {
        let t = match value {
            Some(v) => tok(cat, v),
            None => tok(cat, MISSING),
        };
        match self.vocab {
            Some(v) if !v.contains(&t) => {
                let m = tok(cat, MISSING);
                if v.contains(&m) {
                    Ok(m)
                } else {
                    Err(VocabError::UnknownToken(t).into())
                }
            }
            _ => Ok(t),
        }
    }
}

struct Occurrence {
    date: NaiveDate,
    pos: usize,
    tokens: Vec<String>,
    principal: bool,
}

/// First-occurrence deduplication, then (principal, secondary) lists in
/// date order.
fn dedup_occurrences(mut occ: Vec<Occurrence>) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    occ.sort_by(|a, b| {
        a.date
            .cmp(&b.date)
            .then(a.pos.cmp(&b.pos))
            .then_with(|| a.tokens.cmp(&b.tokens))
            .then(b.principal.cmp(&a.principal))
    });
    let mut seen = std::collections::HashSet::new();
    let (mut p, mut s) = (Vec::new(), Vec::new());
    for o in occ {
        if seen.insert(o.tokens.clone()) {
            if o.principal {
                p.push(o.tokens);
            } else {
                s.push(o.tokens);
            }
        }
    }
    (p, s)
}

fn push_subgroup(out: &mut Vec<String>, domain: CodeDomain, name: &str, codes: Vec<Vec<String>>) {
    if codes.is_empty() {
        return;
    }
    out.push(marker(domain, name));
    out.extend(codes.into_iter().flatten());
}

fn clinical_group(claims: &[&ClaimEvent], kind: VisitType, mapper: &CodeMapper) -> Result<Vec<String>, TokenizeError> {
    let mut out = vec![mapper.structural(Category::Vt, Some(kind.as_str().into()))?];
    if kind == VisitType::Pharmacy {
        let occ = claims
            .iter()
            .flat_map(|c| {
                c.rx_codes.iter().enumerate().map(move |(pos, x)| Occurrence {
                    date: c.date,
                    pos,
                    tokens: mapper.code(CodeDomain::Rx, x),
                    principal: true,
                })
            })
            .collect();
        out.extend(dedup_occurrences(occ).0.into_iter().flatten());
    } else {
        for domain in [CodeDomain::Dx, CodeDomain::Proc] {
            let occ = claims
                .iter()
                .flat_map(|c| {
                    let list = if domain == CodeDomain::Dx { &c.dx_codes } else { &c.proc_codes };
                    list.iter().enumerate().map(move |(pos, e)| Occurrence {
                        date: c.date,
                        pos,
                        tokens: mapper.code(domain, &e.code),
                        principal: e.principal,
                    })
                })
                .collect();
            let (p, s) = dedup_occurrences(occ);
            push_subgroup(&mut out, domain, "PRINCIPAL", p);
            push_subgroup(&mut out, domain, "SECONDARY", s);
        }
        if kind == VisitType::Inpatient {
            let latest = claims.iter().max_by(|a, b| a.date.cmp(&b.date).then_with(|| a.discharge_status.cmp(&b.discharge_status)));
            let ds = latest.and_then(|c| c.discharge_status.clone());
            out.push(mapper.structural(Category::Ds, ds)?);
            let stays: Vec<u32> = claims.iter().filter_map(|c| c.length_of_stay_days).collect();
            let ls = if stays.is_empty() {
                None
            } else if stays.iter().any(|&d| d >= vocab::LONG_STAY_DAYS) {
                Some("1".to_string())
            } else {
                Some("0".to_string())
            };
            out.push(mapper.structural(Category::Ls, ls)?);
        }
    }
    let total: Cents = claims.iter().map(|c| c.gross_payment).sum();
    out.push(vocab::cost_token(encode_cost(total)));
    Ok(out)
}

/// Collapses a record into monthly groups per claim type, with enrollment
/// start/end groups for each episode.
pub fn aggregate_monthly(record: &EnrolleeRecord, mapper: &CodeMapper) -> Result<MonthlyRecord, TokenizeError> {
    let mut groups = Vec::new();
    for ep in &record.enrollment_episodes {
        let start_tokens = vec![
            mapper.structural(Category::Erlst, Some(ep.payer.as_str().into()))?,
            mapper.structural(Category::Plantyp, ep.plan_type.map(|p| p.to_string()))?,
            mapper.structural(Category::Cap, ep.capitated.map(|c| if c { "1" } else { "0" }.to_string()))?,
            mapper.structural(Category::Egeoloc, ep.geo_code.clone())?,
        ];
        groups.push(MonthlyGroup { month: ep.start, kind: EventKind::EnrollmentStart, tokens: start_tokens, source_dates: vec![ep.start.first_day()] });
        groups.push(MonthlyGroup {
            month: ep.end,
            kind: EventKind::EnrollmentEnd,
            tokens: vec![mapper.structural(Category::Erled, Some(ep.payer.as_str().into()))?],
            source_dates: vec![ep.end.last_day()],
        });
    }
    let mut buckets: BTreeMap<(YearMonth, VisitType), Vec<&ClaimEvent>> = BTreeMap::new();
    for ev in &record.events {
        let m = ev.month();
        if !record.covers(m) {
            return Err(TokenizeError::DataIntegrity {
                enrollee_id: record.enrollee_id,
                reason: format!("{} claim on {} lies outside every enrollment episode", ev.visit_type.as_str(), ev.date),
            });
        }
        buckets.entry((m, ev.visit_type)).or_default().push(ev);
    }
    for ((month, vt), claims) in buckets {
        let tokens = clinical_group(&claims, vt, mapper)?;
        let mut dates: Vec<NaiveDate> = claims.iter().map(|c| c.date).collect();
        dates.sort();
        groups.push(MonthlyGroup { month, kind: EventKind::of_visit(vt), tokens, source_dates: dates });
    }
    groups.sort_by(|a, b| (a.month, a.kind).cmp(&(b.month, b.kind)));
    Ok(MonthlyRecord { enrollee_id: record.enrollee_id, sex: record.sex, birth_year: record.birth_year, groups })
}

/// Orders the groups of one month by event kind and joins them with
/// `<ATT-0>`.
pub fn order_tokens(groups: &[MonthlyGroup]) -> Vec<String> {
    let mut g: Vec<&MonthlyGroup> = groups.iter().collect();
    g.sort_by(|a, b| a.kind.cmp(&b.kind).then_with(|| a.tokens.cmp(&b.tokens)));
    let mut out = Vec::new();
    for (i, grp) in g.iter().enumerate() {
        if i > 0 {
            out.push(vocab::att(0));
        }
        out.extend(grp.tokens.iter().cloned());
    }
    out
}

fn sex_token(sex: u8) -> String {
    match sex {
        1 | 2 => tok(Category::Sex, sex),
        _ => tok(Category::Sex, MISSING),
    }
}

/// Token texts of a monthly record: header, anchor, groups separated by ATT
/// tokens with a NY group at every January after the anchor year, `<eos>`.
pub fn assemble_tokens(rec: &MonthlyRecord) -> Result<Vec<String>, TokenizeError> {
    let first = rec.first_month().ok_or(TokenizeError::Empty(rec.enrollee_id))?;
    let anchor = YearMonth::january(first.year);
    let mut out = vec![
        SOS.to_string(),
        sex_token(rec.sex),
        tok(Category::Dobyr, rec.birth_year),
        tok(Category::Age, first.year - rec.birth_year),
    ];
    let mut prev = anchor;
    let mut i = 0;
    while i < rec.groups.len() {
        let month = rec.groups[i].month;
        let mut ny = YearMonth::january(prev.year + 1);
        while ny <= month {
            out.push(vocab::att(prev.months_until(ny) as u32));
            out.push(NY.to_string());
            prev = ny;
            ny = YearMonth::january(ny.year + 1);
        }
        let j = i + rec.groups[i..].iter().take_while(|g| g.month == month).count();
        out.push(vocab::att(prev.months_until(month) as u32));
        out.extend(order_tokens(&rec.groups[i..j]));
        prev = month;
        i = j;
    }
    out.push(EOS.to_string());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub enrollee_id: u64,
    pub ids: Vec<u32>,
    pub texts: Vec<String>,
    pub age_days: Vec<f64>,
}

impl TokenSequence {
    pub fn from_texts(enrollee_id: u64, texts: Vec<String>, vocab: &Vocabulary) -> Result<Self, TokenizeError> {
        let ids = vocab.encode(&texts)?;
        let age_days = reconstruct_ages(&texts)?;
        Ok(Self { enrollee_id, ids, texts, age_days })
    }

    pub fn from_ids(enrollee_id: u64, ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self, TokenizeError> {
        let texts = vocab.decode(&ids)?;
        let age_days = reconstruct_ages(&texts)?;
        Ok(Self { enrollee_id, ids, texts, age_days })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn assemble_sequence(record: &EnrolleeRecord, crosswalk: &Crosswalk, vocab: &Vocabulary) -> Result<TokenSequence, TokenizeError> {
    let monthly = aggregate_monthly(record, &CodeMapper::new(crosswalk, Some(vocab)))?;
    let texts = assemble_tokens(&monthly)?;
    TokenSequence::from_texts(record.enrollee_id, texts, vocab)
}

/// Tokenizes a cohort in parallel; output order follows input order.
pub fn tokenize_cohort(records: &[EnrolleeRecord], crosswalk: &Crosswalk, vocab: &Vocabulary) -> Result<Vec<TokenSequence>, TokenizeError> {
    records.par_iter().map(|r| assemble_sequence(r, crosswalk, vocab)).collect()
}

// ---------------------------------------------------------------------------
// Ages

/// Effect of a token on the running age clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AgeStep {
    Dobyr,
    /// Sets the clock to the given age in years.
    Age(u32),
    /// Advances the clock by the given number of months.
    Att(u32),
    Keep,
}

pub fn age_step(text: &str) -> AgeStep {
    match category_of(text) {
        Some(Category::Dobyr) => AgeStep::Dobyr,
        Some(Category::Age) => token_value(text).and_then(|v| v.parse().ok()).map(AgeStep::Age).unwrap_or(AgeStep::Keep),
        Some(Category::Att) => token_value(text).and_then(|v| v.parse().ok()).map(AgeStep::Att).unwrap_or(AgeStep::Keep),
        _ => AgeStep::Keep,
    }
}

/// Per-id age steps, for reconstructing ages directly from ids.
pub fn age_steps(vocab: &Vocabulary) -> Vec<AgeStep> {
    vocab.texts().iter().map(|t| age_step(t)).collect()
}

/// Ages in days from per-token steps. Tokens up to and including the birth
/// year anchor are at age 0; an AGE token sets the clock; each `<ATT-N>`
/// advances it by N months and carries the new group's age.
pub fn ages_from_steps<I: IntoIterator<Item = AgeStep>>(steps: I) -> Result<Vec<f64>, TokenizeError> {
    let mut clock = 0.0;
    let mut seen_dobyr = false;
    let mut out = Vec::new();
    for s in steps {
        match s {
            AgeStep::Dobyr => {
                seen_dobyr = true;
                clock = 0.0;
            }
            AgeStep::Age(n) => clock = n as f64 * DAYS_PER_YEAR,
            AgeStep::Att(n) => clock += n as f64 * DAYS_PER_MONTH,
            AgeStep::Keep => {}
        }
        out.push(clock);
    }
    if !seen_dobyr {
        return Err(TokenizeError::MissingDobyr);
    }
    Ok(out)
}

pub fn reconstruct_ages(texts: &[String]) -> Result<Vec<f64>, TokenizeError> {
    ages_from_steps(texts.iter().map(|t| age_step(t)))
}

pub fn reconstruct_ages_ids(ids: &[u32], steps: &[AgeStep]) -> Result<Vec<f64>, TokenizeError> {
    ages_from_steps(ids.iter().map(|&i| steps.get(i as usize).copied().unwrap_or(AgeStep::Keep)))
}

// ---------------------------------------------------------------------------
// Parsing

struct Cursor<'a> {
    t: &'a [String],
    i: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: impl Into<String>) -> TokenizeError {
        TokenizeError::Parse { index: self.i, reason: reason.into() }
    }

    fn peek(&self) -> Option<&'a str> {
        self.t.get(self.i).map(String::as_str)
    }

    fn next(&mut self) -> Result<&'a str, TokenizeError> {
        let t = self.peek().ok_or_else(|| self.err("unexpected end of sequence"))?;
        self.i += 1;
        Ok(t)
    }

    fn expect_cat(&mut self, cat: Category) -> Result<&'a str, TokenizeError> {
        let t = self.peek().ok_or_else(|| self.err(format!("expected {cat} token, found end")))?;
        if category_of(t) != Some(cat) {
            return Err(self.err(format!("expected {cat} token, found {t}")));
        }
        self.i += 1;
        Ok(t)
    }

    fn value(&mut self, cat: Category) -> Result<&'a str, TokenizeError> {
        let t = self.expect_cat(cat)?;
        Ok(token_value(t).unwrap_or(""))
    }

    fn at_boundary(&self) -> bool {
        match self.peek() {
            None => true,
            Some(t) => t == EOS || category_of(t) == Some(Category::Att),
        }
    }

    fn is(&self, text: &str) -> bool {
        self.peek() == Some(text)
    }

    /// One code item: a DX code (major + minor/suffix), a combination group
    /// or a single token.
    fn code_item(&mut self, cat: Category) -> Result<(), TokenizeError> {
        let t = self.expect_cat(cat)?;
        let v = token_value(t).unwrap_or("");
        match v {
            "PRINCIPAL" | "SECONDARY" | "COMBEND" => Err(TokenizeError::Parse { index: self.i - 1, reason: format!("unexpected {t}") }),
            "COMBSTART" => {
                let mut n = 0;
                loop {
                    let start = self.i;
                    let t = self.next().map_err(|_| TokenizeError::Parse { index: start, reason: "unbalanced combination group".into() })?;
                    if category_of(t) != Some(cat) {
                        return Err(TokenizeError::Parse { index: start, reason: "unbalanced combination group".into() });
                    }
                    match token_value(t).unwrap_or("") {
                        "COMBEND" if n >= 2 => return Ok(()),
                        "COMBEND" => return Err(TokenizeError::Parse { index: start, reason: "combination with fewer than two codes".into() }),
                        "COMBSTART" | "PRINCIPAL" | "SECONDARY" | "NOMAP" => {
                            return Err(TokenizeError::Parse { index: start, reason: "unbalanced combination group".into() })
                        }
                        _ => n += 1,
                    }
                }
            }
            _ if cat == Category::Dx && v.starts_with("MINOR_") || v.starts_with("SUFFIX_") => {
                Err(TokenizeError::Parse { index: self.i - 1, reason: format!("{t} without a major code") })
            }
            _ if cat == Category::Dx && v.starts_with("MAJOR_") => {
                if self.peek().and_then(token_value).is_some_and(|v| v.starts_with("MINOR_")) {
                    self.i += 1;
                }
                if self.peek().and_then(token_value).is_some_and(|v| v.starts_with("SUFFIX_")) {
                    self.i += 1;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn subgroup(&mut self, domain: CodeDomain, cat: Category, name: &str) -> Result<(), TokenizeError> {
        if self.is(&marker(domain, name)) {
            self.i += 1;
            let start = self.i;
            while let Some(t) = self.peek() {
                let v = token_value(t).unwrap_or("");
                if category_of(t) != Some(cat) || v == "PRINCIPAL" || v == "SECONDARY" {
                    break;
                }
                self.code_item(cat)?;
            }
            if self.i == start {
                return Err(self.err(format!("empty {name} subgroup")));
            }
        }
        Ok(())
    }
}

/// Parses an assembled token sequence back into its monthly view.
///
/// Day resolution within a month and duplicate occurrences are not
/// recoverable; `source_dates` are left empty.
pub fn detokenize(texts: &[String]) -> Result<MonthlyRecord, TokenizeError> {
    let mut c = Cursor { t: texts, i: 0 };
    if c.next()? != SOS {
        return Err(TokenizeError::Parse { index: 0, reason: "sequence must start with <sos>".into() });
    }
    let sex = match c.value(Category::Sex)? {
        "1" => 1,
        "2" => 2,
        MISSING => 0,
        v => return Err(c.err(format!("bad sex value {v}"))),
    };
    let birth_year: i32 = c.value(Category::Dobyr)?.parse().map_err(|_| c.err("bad birth year"))?;
    let age: i32 = c.value(Category::Age)?.parse().map_err(|_| c.err("bad age"))?;
    let mut prev = YearMonth::january(birth_year + age);
    let mut prev_kind = EventKind::Anchor;
    let mut groups = Vec::new();
    loop {
        let t = c.peek().ok_or_else(|| c.err("missing <eos>"))?;
        if t == EOS {
            c.i += 1;
            if c.i != texts.len() {
                return Err(c.err("tokens after <eos>"));
            }
            break;
        }
        let n: u32 = c.value(Category::Att)?.parse().map_err(|_| c.err("bad ATT value"))?;
        if n > vocab::MAX_ATT {
            return Err(TokenizeError::Parse { index: c.i - 1, reason: format!("ATT value {n} outside 0..=12") });
        }
        let month = prev.plus(n as i64);
        let start = c.i;
        let head = c.peek().ok_or_else(|| c.err("sequence ends after ATT"))?;
        let kind = match category_of(head) {
            Some(Category::Ny) => EventKind::Anchor,
            Some(Category::Erlst) => EventKind::EnrollmentStart,
            Some(Category::Erled) => EventKind::EnrollmentEnd,
            Some(Category::Vt) => match token_value(head) {
                Some("outpatient") => EventKind::Outpatient,
                Some("pharmacy") => EventKind::Pharmacy,
                Some("inpatient") => EventKind::Inpatient,
                _ => return Err(c.err(format!("unknown visit type {head}"))),
            },
            _ => return Err(c.err(format!("unexpected {head} at start of group"))),
        };
        if n == 0 && kind <= prev_kind {
            return Err(c.err(format!("{head} out of within-month order")));
        }
        if month.year > prev.year && !(kind == EventKind::Anchor && month.year == prev.year + 1) {
            return Err(c.err(format!("missing <NY> before {month}")));
        }
        match kind {
            EventKind::Anchor => {
                c.i += 1;
                if month.month != 1 {
                    return Err(TokenizeError::Parse { index: start, reason: format!("<NY> in {month}, not January") });
                }
            }
            EventKind::EnrollmentStart => {
                for cat in [Category::Erlst, Category::Plantyp, Category::Cap, Category::Egeoloc] {
                    c.expect_cat(cat)?;
                }
            }
            EventKind::EnrollmentEnd => {
                c.expect_cat(Category::Erled)?;
            }
            EventKind::Pharmacy => {
                c.i += 1;
                while c.peek().is_some_and(|t| category_of(t) == Some(Category::Rx)) {
                    c.code_item(Category::Rx)?;
                }
                c.expect_cat(Category::Cost)?;
            }
            EventKind::Outpatient | EventKind::Inpatient => {
                c.i += 1;
                c.subgroup(CodeDomain::Dx, Category::Dx, "PRINCIPAL")?;
                c.subgroup(CodeDomain::Dx, Category::Dx, "SECONDARY")?;
                c.subgroup(CodeDomain::Proc, Category::Proc, "PRINCIPAL")?;
                c.subgroup(CodeDomain::Proc, Category::Proc, "SECONDARY")?;
                if kind == EventKind::Inpatient {
                    c.expect_cat(Category::Ds)?;
                    c.expect_cat(Category::Ls)?;
                }
                c.expect_cat(Category::Cost)?;
            }
        }
        if !c.at_boundary() {
            return Err(c.err(format!("unexpected {} inside group", c.peek().unwrap_or(""))));
        }
        if kind != EventKind::Anchor {
            groups.push(MonthlyGroup { month, kind, tokens: texts[start..c.i].to_vec(), source_dates: Vec::new() });
        }
        prev = month;
        prev_kind = kind;
    }
    Ok(MonthlyRecord { enrollee_id: 0, sex, birth_year, groups })
}

/// Monthly view of `record`, as recovered by [`detokenize`].
pub fn monthly_view(record: &EnrolleeRecord, crosswalk: &Crosswalk, vocab: Option<&Vocabulary>) -> Result<MonthlyRecord, TokenizeError> {
    Ok(aggregate_monthly(record, &CodeMapper::new(crosswalk, vocab))?.without_dates())
}

// ---------------------------------------------------------------------------
// Windows

/// Splits a sequence of length `n` into windows of at most `len` tokens that
/// start at group boundaries and overlap by roughly half a window.
pub fn windows(n: usize, len: usize, is_boundary: impl Fn(usize) -> bool) -> Vec<Range<usize>> {
    assert!(len >= 2, "window length must be at least 2");
    if n <= len {
        return vec![0..n];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + len).min(n);
        out.push(start..end);
        if end == n {
            break;
        }
        let half = start + len / 2;
        let next = (start + 1..=half).rev().find(|&b| is_boundary(b)).or_else(|| (half + 1..end).find(|&b| is_boundary(b))).unwrap_or(half);
        start = next;
    }
    out
}

/// Start of the most recent window ending at `end` with at most `budget`
/// tokens, snapped forward to a group boundary when one exists.
pub fn tail_window_start(end: usize, budget: usize, is_boundary: impl Fn(usize) -> bool) -> usize {
    if end <= budget {
        return 0;
    }
    let lo = end - budget;
    (lo..end).find(|&b| is_boundary(b)).unwrap_or(lo)
}

/// True at positions holding an `<ATT-*>` token (group starts).
pub fn att_boundary<'a>(ids: &'a [u32], vocab: &'a Vocabulary) -> impl Fn(usize) -> bool + 'a {
    let r = vocab.range(Category::Att);
    move |i| ids.get(i).is_some_and(|id| r.contains(id))
}

// ---------------------------------------------------------------------------
// Files

pub const SEQ_MAGIC: &[u8; 8] = b"CCSEQ\0\0\0";
pub const SEQ_VERSION: u32 = 1;

/// Writes `(enrollee_id, ids)` pairs to the binary container.
pub fn write_sequences_bin<W: Write>(mut w: W, seqs: &[(u64, &[u32])]) -> Result<(), TokenizeError> {
    w.write_all(SEQ_MAGIC)?;
    w.write_u32::<LittleEndian>(SEQ_VERSION)?;
    w.write_u64::<LittleEndian>(seqs.len() as u64)?;
    for (id, ids) in seqs {
        w.write_u64::<LittleEndian>(*id)?;
        w.write_u32::<LittleEndian>(ids.len() as u32)?;
        for &t in *ids {
            w.write_u32::<LittleEndian>(t)?;
        }
    }
    Ok(())
}

pub fn read_sequences_bin<R: Read>(mut r: R) -> Result<Vec<(u64, Vec<u32>)>, TokenizeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SEQ_MAGIC {
        return Err(TokenizeError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SEQ_VERSION {
        return Err(TokenizeError::Format(format!("unsupported version {version}")));
    }
    let n = r.read_u64::<LittleEndian>()?;
    let mut out = Vec::with_capacity(n.min(1 << 20) as usize);
    for _ in 0..n {
        let id = r.read_u64::<LittleEndian>()?;
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut ids = vec![0u32; len];
        r.read_u32_into::<LittleEndian>(&mut ids)?;
        out.push((id, ids));
    }
    Ok(out)
}

pub fn write_sequences_text<W: Write>(mut w: W, seqs: &[TokenSequence]) -> std::io::Result<()> {
    for s in seqs {
        writeln!(w, "{}", s.texts.join(" "))?;
    }
    Ok(())
}

pub fn read_sequences_text<R: BufRead>(r: R) -> std::io::Result<Vec<Vec<String>>> {
    r.lines().map(|l| l.map(|l| l.split_whitespace().map(str::to_string).collect())).collect()
}
