//! Token grammar, code-level codecs and the vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Cents;
use crate::synthgen::{CodeDomain, EnrolleeRecord, Payer, VisitType};

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} out of range")]
    UnknownId(u32),
    #[error("malformed token {0:?}")]
    Malformed(String),
    #[error("invalid cost code {0}")]
    InvalidCostCode(u8),
    #[error("non-finite currency amount")]
    NonFinite,
    #[error("empty combination group")]
    EmptyCombo,
    #[error("vocabulary file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("crosswalk file line {line}: {reason}")]
    Crosswalk { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token categories in vocabulary id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Special,
    Sex,
    Instruct,
    Dobyr,
    Age,
    Ny,
    Att,
    Erlst,
    Plantyp,
    Cap,
    Egeoloc,
    Erled,
    Dx,
    Proc,
    Rx,
    Cost,
    Vt,
    Ds,
    Ls,
}

impl Category {
    pub const ALL: [Category; 19] = [
        Category::Special,
        Category::Sex,
        Category::Instruct,
        Category::Dobyr,
        Category::Age,
        Category::Ny,
        Category::Att,
        Category::Erlst,
        Category::Plantyp,
        Category::Cap,
        Category::Egeoloc,
        Category::Erled,
        Category::Dx,
        Category::Proc,
        Category::Rx,
        Category::Cost,
        Category::Vt,
        Category::Ds,
        Category::Ls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Special => "SPECIAL",
            Category::Sex => "SEX",
            Category::Instruct => "INSTRUCT",
            Category::Dobyr => "DOBYR",
            Category::Age => "AGE",
            Category::Ny => "NY",
            Category::Att => "ATT",
            Category::Erlst => "ERLST",
            Category::Plantyp => "PLANTYP",
            Category::Cap => "CAP",
            Category::Egeoloc => "EGEOLOC",
            Category::Erled => "ERLED",
            Category::Dx => "DX",
            Category::Proc => "PROC",
            Category::Rx => "RX",
            Category::Cost => "COST",
            Category::Vt => "VT",
            Category::Ds => "DS",
            Category::Ls => "LS",
        }
    }

    pub fn from_name(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == s)
    }

    fn for_domain(d: CodeDomain) -> Category {
        match d {
            CodeDomain::Dx => Category::Dx,
            CodeDomain::Proc => Category::Proc,
            CodeDomain::Rx => Category::Rx,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const NY: &str = "<NY>";
pub const INSTRUCT_DX: &str = "<INSTRUCT-DX>";
pub const MISSING: &str = "MISSING";
pub const NOMAP: &str = "NOMAP";

/// A token: its exact text and the category derived from it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Token {
    pub text: String,
    pub category: Category,
}

impl Token {
    pub fn parse(text: &str) -> Result<Token, VocabError> {
        let category = category_of(text).ok_or_else(|| VocabError::Malformed(text.to_string()))?;
        Ok(Token { text: text.to_string(), category })
    }

    /// The part after `<CATEGORY-`, without the closing bracket.
    pub fn value(&self) -> &str {
        token_value(&self.text).unwrap_or("")
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl FromStr for Token {
    type Err = VocabError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Token::parse(s)
    }
}

pub fn category_of(text: &str) -> Option<Category> {
    match text {
        SOS | EOS => return Some(Category::Special),
        NY => return Some(Category::Ny),
        _ => {}
    }
    let inner = text.strip_prefix('<')?.strip_suffix('>')?;
    let (head, rest) = inner.split_once('-')?;
    if rest.is_empty() || rest.contains(char::is_whitespace) {
        return None;
    }
    match Category::from_name(head)? {
        Category::Special | Category::Ny => None,
        c => Some(c),
    }
}

/// Value part of a `<CAT-value>` token.
pub fn token_value(text: &str) -> Option<&str> {
    text.strip_prefix('<')?.strip_suffix('>')?.split_once('-').map(|(_, v)| v)
}

pub fn tok(cat: Category, value: impl fmt::Display) -> String {
    format!("<{}-{}>", cat.name(), value)
}

pub fn att(n: u32) -> String {
    tok(Category::Att, n)
}

pub fn cost_token(code: u8) -> String {
    tok(Category::Cost, code)
}

pub fn vt_token(v: VisitType) -> String {
    tok(Category::Vt, v.as_str())
}

pub fn marker(domain: CodeDomain, name: &str) -> String {
    tok(Category::for_domain(domain), name)
}

pub fn nomap(domain: CodeDomain) -> String {
    marker(domain, NOMAP)
}

// ---------------------------------------------------------------------------
// Cost codec

/// Largest code; also the clamp for overflowing amounts.
pub const MAX_COST_CODE: u8 = 99;

/// Encodes a payment as `10·d + e` where `d × 10^e` dollars is the amount
/// rounded half-up to one significant digit.
///
/// Non-positive amounts encode to 0. Positive amounts below one dollar encode
/// to 10 (one dollar), the smallest positive value the codec represents.
pub fn encode_cost(amount: Cents) -> u8 {
    let c = amount.0;
    if c <= 0 {
        return 0;
    }
    if c < 100 {
        return 10;
    }
    let k = c.ilog10(); // digits - 1
    let unit = 10i64.pow(k);
    let mut d = (c + unit / 2) / unit;
    let mut e = k as i64 - 2;
    if d == 10 {
        d = 1;
        e += 1;
    }
    if e > 9 {
        return MAX_COST_CODE;
    }
    (10 * d + e) as u8
}

/// Encodes a dollar amount given as a float.
pub fn encode_cost_dollars(dollars: f64) -> Result<u8, VocabError> {
    if !dollars.is_finite() {
        return Err(VocabError::NonFinite);
    }
    // saturate far beyond the codec range
    let cents = Cents::from_dollars_f64(dollars.clamp(-1e15, 1e15)).ok_or(VocabError::NonFinite)?;
    Ok(encode_cost(cents))
}

/// Representative amount of a cost code.
pub fn decode_cost(code: u8) -> Result<Cents, VocabError> {
    if code == 0 {
        return Ok(Cents::ZERO);
    }
    if code > MAX_COST_CODE || code < 10 {
        return Err(VocabError::InvalidCostCode(code));
    }
    let d = (code / 10) as i64;
    let e = (code % 10) as u32;
    Ok(Cents(d * 10i64.pow(e + 2)))
}

/// Decodes the value of a `<COST-n>` token.
pub fn decode_cost_token(text: &str) -> Option<Cents> {
    if category_of(text)? != Category::Cost {
        return None;
    }
    let code: u8 = token_value(text)?.parse().ok()?;
    decode_cost(code).ok()
}

// ---------------------------------------------------------------------------
// Diagnosis decomposition

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DxParts<'a> {
    pub major: &'a str,
    pub minor: Option<&'a str>,
    pub suffix: Option<char>,
}

/// Splits a diagnosis code of the form `A00[.000[A]]`.
pub fn decompose_dx_parts(code: &str) -> Option<DxParts<'_>> {
    let b = code.as_bytes();
    if b.len() < 3 || !b[0].is_ascii_uppercase() || !b[1].is_ascii_digit() || !(b[2].is_ascii_digit() || b[2].is_ascii_uppercase()) {
        return None;
    }
    let major = &code[..3];
    if b.len() == 3 {
        return Some(DxParts { major, minor: None, suffix: None });
    }
    let rest = code[3..].strip_prefix('.')?;
    let (digits, suffix) = match rest.chars().last() {
        Some(c) if c.is_ascii_uppercase() => (&rest[..rest.len() - 1], Some(c)),
        _ => (rest, None),
    };
    if digits.is_empty() || digits.len() > 3 || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(DxParts { major, minor: Some(digits), suffix })
}

/// Major, minor and suffix tokens of a diagnosis code, or the NOMAP token.
pub fn decompose_dx(code: &str) -> Vec<String> {
    match decompose_dx_parts(code) {
        None => vec![nomap(CodeDomain::Dx)],
        Some(p) => {
            let mut out = vec![tok(Category::Dx, format!("MAJOR_{}", p.major))];
            if let Some(m) = p.minor {
                out.push(tok(Category::Dx, format!("MINOR_{m}")));
            }
            if let Some(s) = p.suffix {
                out.push(tok(Category::Dx, format!("SUFFIX_{s}")));
            }
            out
        }
    }
}

/// Inverse of [`decompose_dx`] on one code's tokens.
pub fn compose_dx(tokens: &[String]) -> Option<String> {
    let mut it = tokens.iter().map(|t| token_value(t).unwrap_or(""));
    let major = it.next()?.strip_prefix("MAJOR_")?;
    let mut code = major.to_string();
    for v in it {
        if let Some(m) = v.strip_prefix("MINOR_") {
            code.push('.');
            code.push_str(m);
        } else if let Some(s) = v.strip_prefix("SUFFIX_") {
            code.push_str(s);
        } else {
            return None;
        }
    }
    Some(code)
}

/// Canonical tokens of one source code's mapped targets: the bare token for
/// a single target, otherwise the sorted targets inside COMBSTART/COMBEND.
pub fn canonicalize_combo(domain: CodeDomain, codes: &[String]) -> Result<Vec<String>, VocabError> {
    let cat = Category::for_domain(domain);
    let set: BTreeSet<String> = codes.iter().map(|c| tok(cat, c)).collect();
    match set.len() {
        0 => Err(VocabError::EmptyCombo),
        1 => Ok(set.into_iter().collect()),
        _ => {
            let mut out = vec![marker(domain, "COMBSTART")];
            out.extend(set);
            out.push(marker(domain, "COMBEND"));
            Ok(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Crosswalk

/// Source → standardized code mapping for procedures and drugs. Sources
/// absent from the table map to NOMAP.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Crosswalk {
    map: BTreeMap<(CodeDomain, String), Vec<String>>,
}

fn domain_name(d: CodeDomain) -> &'static str {
    match d {
        CodeDomain::Dx => "dx",
        CodeDomain::Proc => "proc",
        CodeDomain::Rx => "rx",
    }
}

impl Crosswalk {
    pub fn insert(&mut self, domain: CodeDomain, source: &str, targets: Vec<String>) {
        self.map.insert((domain, source.to_string()), targets);
    }

    pub fn map(&self, domain: CodeDomain, source: &str) -> Option<&[String]> {
        self.map.get(&(domain, source.to_string())).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Tokens for a raw procedure or drug code.
    pub fn tokens(&self, domain: CodeDomain, source: &str) -> Vec<String> {
        match self.map(domain, source) {
            Some(t) if !t.is_empty() => canonicalize_combo(domain, t).expect("non-empty"),
            _ => vec![nomap(domain)],
        }
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ((d, src), targets) in &self.map {
            writeln!(w, "{}\t{}\t{}", domain_name(*d), src, targets.join("|"))?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Crosswalk, VocabError> {
        let mut out = Crosswalk::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |reason: &str| VocabError::Crosswalk { line: i + 1, reason: reason.to_string() };
            let mut f = line.split('\t');
            let domain = match f.next() {
                Some("dx") => CodeDomain::Dx,
                Some("proc") => CodeDomain::Proc,
                Some("rx") => CodeDomain::Rx,
                _ => return Err(err("unknown domain")),
            };
            let src = f.next().filter(|s| !s.is_empty()).ok_or_else(|| err("missing source code"))?;
            let targets: Vec<String> = f
                .next()
                .ok_or_else(|| err("missing targets"))?
                .split('|')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            if targets.is_empty() || f.next().is_some() {
                return Err(err("expected domain<TAB>source<TAB>target[|target...]"));
            }
            out.insert(domain, src, targets);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Vocabulary

pub const DOBYR_RANGE: (i32, i32) = (1910, 2025);
pub const AGE_RANGE: (i32, i32) = (10, 110);
pub const MAX_ATT: u32 = 12;
pub const LONG_STAY_DAYS: u32 = 7;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    texts: Vec<String>,
    categories: Vec<Category>,
    index: HashMap<String, u32>,
}

/// Tokens of the exhaustively enumerated categories.
fn enumerated_tokens() -> Vec<String> {
    let mut v = vec![SOS.to_string(), EOS.to_string(), NY.to_string(), INSTRUCT_DX.to_string()];
    for s in ["1", "2", MISSING] {
        v.push(tok(Category::Sex, s));
    }
    for y in DOBYR_RANGE.0..=DOBYR_RANGE.1 {
        v.push(tok(Category::Dobyr, y));
    }
    for a in AGE_RANGE.0..=AGE_RANGE.1 {
        v.push(tok(Category::Age, a));
    }
    for n in 0..=MAX_ATT {
        v.push(att(n));
    }
    for cat in [Category::Erlst, Category::Erled] {
        for p in Payer::ALL {
            v.push(tok(cat, p.as_str()));
        }
        v.push(tok(cat, MISSING));
    }
    for p in 1..=9 {
        v.push(tok(Category::Plantyp, p));
    }
    v.push(tok(Category::Plantyp, MISSING));
    for c in ["0", "1", MISSING] {
        v.push(tok(Category::Cap, c));
        v.push(tok(Category::Ls, c));
    }
    for g in 0..=66 {
        v.push(tok(Category::Egeoloc, format!("{g:02}")));
    }
    v.push(tok(Category::Egeoloc, MISSING));
    for m in ["PRINCIPAL", "SECONDARY", NOMAP] {
        v.push(marker(CodeDomain::Dx, m));
    }
    for m in ["PRINCIPAL", "SECONDARY", "COMBSTART", "COMBEND", NOMAP] {
        v.push(marker(CodeDomain::Proc, m));
    }
    for m in ["COMBSTART", "COMBEND", NOMAP] {
        v.push(marker(CodeDomain::Rx, m));
    }
    for c in 0..=MAX_COST_CODE {
        v.push(cost_token(c));
    }
    v.push(tok(Category::Cost, MISSING));
    for t in VisitType::ALL {
        v.push(vt_token(t));
    }
    v.push(tok(Category::Vt, MISSING));
    for d in 1..=5 {
        v.push(tok(Category::Ds, d));
    }
    v.push(tok(Category::Ds, MISSING));
    v
}

/// Tokens contributed by one record's observed values.
pub fn observed_tokens(r: &EnrolleeRecord, crosswalk: &Crosswalk, out: &mut BTreeSet<String>) {
    out.insert(tok(Category::Dobyr, r.birth_year));
    let first = r
        .enrollment_episodes
        .iter()
        .map(|e| e.start.year)
        .chain(r.events.iter().map(|e| chrono::Datelike::year(&e.date)))
        .min();
    if let Some(y) = first {
        out.insert(tok(Category::Age, y - r.birth_year));
    }
    for ep in &r.enrollment_episodes {
        if let Some(p) = ep.plan_type {
            out.insert(tok(Category::Plantyp, p));
        }
        if let Some(g) = &ep.geo_code {
            out.insert(tok(Category::Egeoloc, g));
        }
    }
    for e in &r.events {
        for d in &e.dx_codes {
            out.extend(decompose_dx(&d.code));
        }
        for p in &e.proc_codes {
            out.extend(crosswalk.tokens(CodeDomain::Proc, &p.code));
        }
        for x in &e.rx_codes {
            out.extend(crosswalk.tokens(CodeDomain::Rx, x));
        }
        if let Some(ds) = &e.discharge_status {
            out.insert(tok(Category::Ds, ds));
        }
    }
}

/// Builds the vocabulary: enumerated categories in full, clinical codes only
/// as observed. Ids follow category order, then token text.
pub fn build_vocabulary(corpus: &[EnrolleeRecord], crosswalk: &Crosswalk) -> Result<Vocabulary, VocabError> {
    if corpus.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut all: BTreeSet<String> = enumerated_tokens().into_iter().collect();
    for r in corpus {
        observed_tokens(r, crosswalk, &mut all);
    }
    Vocabulary::from_texts(all)
}

impl Vocabulary {
    /// Orders `texts` by category then text and assigns dense ids.
    pub fn from_texts<I: IntoIterator<Item = String>>(texts: I) -> Result<Vocabulary, VocabError> {
        let mut keyed: Vec<(Category, String)> = texts
            .into_iter()
            .map(|t| category_of(&t).map(|c| (c, t.clone())).ok_or(VocabError::Malformed(t)))
            .collect::<Result<_, _>>()?;
        keyed.sort();
        keyed.dedup();
        let mut v = Vocabulary { texts: Vec::new(), categories: Vec::new(), index: HashMap::new() };
        for (c, t) in keyed {
            v.index.insert(t.clone(), v.texts.len() as u32);
            v.texts.push(t);
            v.categories.push(c);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn id(&self, text: &str) -> Option<u32> {
        self.index.get(text).copied()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.index.contains_key(text)
    }

    pub fn require(&self, text: &str) -> Result<u32, VocabError> {
        self.id(text).ok_or_else(|| VocabError::UnknownToken(text.to_string()))
    }

    pub fn text(&self, id: u32) -> Result<&str, VocabError> {
        self.texts.get(id as usize).map(String::as_str).ok_or(VocabError::UnknownId(id))
    }

    pub fn category(&self, id: u32) -> Option<Category> {
        self.categories.get(id as usize).copied()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    /// Half-open id range of a category.
    pub fn range(&self, cat: Category) -> std::ops::Range<u32> {
        let lo = self.categories.partition_point(|&c| c < cat) as u32;
        let hi = self.categories.partition_point(|&c| c <= cat) as u32;
        lo..hi
    }

    pub fn count(&self, cat: Category) -> usize {
        self.range(cat).len()
    }

    pub fn encode(&self, texts: &[String]) -> Result<Vec<u32>, VocabError> {
        texts.iter().map(|t| self.require(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, VocabError> {
        ids.iter().map(|&i| self.text(i).map(str::to_string)).collect()
    }

    pub fn sos(&self) -> u32 {
        self.id(SOS).expect("vocabulary has <sos>")
    }

    pub fn eos(&self) -> u32 {
        self.id(EOS).expect("vocabulary has <eos>")
    }

    pub fn ny(&self) -> u32 {
        self.id(NY).expect("vocabulary has <NY>")
    }

    pub fn instruct_dx(&self) -> u32 {
        self.id(INSTRUCT_DX).expect("vocabulary has <INSTRUCT-DX>")
    }

    /// Value of an `<ATT-n>` id.
    pub fn att_value(&self, id: u32) -> Option<u32> {
        if self.category(id)? != Category::Att {
            return None;
        }
        token_value(self.text(id).ok()?)?.parse().ok()
    }

    /// Ids of `<DX-MAJOR_*>` tokens.
    pub fn dx_major_ids(&self) -> Vec<u32> {
        self.range(Category::Dx).filter(|&i| self.texts[i as usize].starts_with("<DX-MAJOR_")).collect()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, (t, c)) in self.texts.iter().zip(&self.categories).enumerate() {
            writeln!(w, "{t}\t{i}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Vocabulary, VocabError> {
        let mut v = Vocabulary { texts: Vec::new(), categories: Vec::new(), index: HashMap::new() };
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| VocabError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(err("expected text<TAB>id<TAB>category".into()));
            }
            let id: u32 = f[1].parse().map_err(|_| err(format!("bad id {:?}", f[1])))?;
            if id as usize != v.texts.len() {
                return Err(err(format!("id {id} out of sequence")));
            }
            let cat = Category::from_name(f[2]).ok_or_else(|| err(format!("unknown category {:?}", f[2])))?;
            if category_of(f[0]) != Some(cat) {
                return Err(err(format!("token {:?} does not belong to {cat}", f[0])));
            }
            if v.index.insert(f[0].to_string(), id).is_some() {
                return Err(err(format!("duplicate token {:?}", f[0])));
            }
            v.texts.push(f[0].to_string());
            v.categories.push(cat);
        }
        Ok(v)
    }
}
