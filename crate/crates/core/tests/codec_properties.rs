use std::collections::BTreeSet;

use claimcraft_core::calendar::YearMonth;
use claimcraft_core::money::Cents;
use claimcraft_core::synthgen::{generate_cohort, CodeDomain, CohortSpec};
use claimcraft_core::tokenizer::{assemble_sequence, assemble_tokens, detokenize, monthly_view};
use claimcraft_core::vocab::{
    build_vocabulary, canonicalize_combo, category_of, decode_cost, encode_cost, Category, Vocabulary,
};
use proptest::prelude::*;

/// Half-up rounding to one significant digit, computed on the decimal string.
fn one_digit_oracle(cents: i64) -> (i64, i64) {
    let s = cents.to_string();
    let k = s.len() as i64;
    let lead = (s.as_bytes()[0] - b'0') as i64;
    let next = if s.len() > 1 { (s.as_bytes()[1] - b'0') as i64 } else { 0 };
    let (d, e) = if next >= 5 { (lead + 1, k - 3) } else { (lead, k - 3) };
    if d == 10 {
        (1, e + 1)
    } else {
        (d, e)
    }
}

proptest! {
    #[test]
    fn cost_matches_oracle(cents in 100i64..949_999_999_999) {
        let (d, e) = one_digit_oracle(cents);
        prop_assert_eq!(encode_cost(Cents(cents)) as i64, 10 * d + e);
    }

    #[test]
    fn cost_relative_error_bounded(cents in 100i64..=949_000_000_000) {
        let back = decode_cost(encode_cost(Cents(cents))).unwrap();
        let r = back.0 as f64 / cents as f64;
        prop_assert!((0.5..=1.5).contains(&r), "ratio {r}");
    }

    #[test]
    fn cost_non_positive_is_zero(cents in i64::MIN / 2..=0) {
        prop_assert_eq!(encode_cost(Cents(cents)), 0);
    }

    #[test]
    fn combo_is_permutation_invariant_and_idempotent(mut codes in prop::collection::vec("[0-9]{3,9}", 1..6), seed in any::<u64>()) {
        let a = canonicalize_combo(CodeDomain::Proc, &codes).unwrap();
        let n = codes.len();
        codes.rotate_left((seed as usize) % n);
        codes.reverse();
        prop_assert_eq!(&canonicalize_combo(CodeDomain::Proc, &codes).unwrap(), &a);
        // feeding the canonical codes back gives the same tokens
        let inner: Vec<String> = a.iter()
            .filter(|t| !t.contains("COMB"))
            .map(|t| t.trim_start_matches("<PROC-").trim_end_matches('>').to_string())
            .collect();
        prop_assert_eq!(canonicalize_combo(CodeDomain::Proc, &inner).unwrap(), a);
    }
}

#[test]
fn distinct_cost_values() {
    let mut codes: BTreeSet<u8> = (0..14).flat_map(|k| (1..=99).map(move |m| encode_cost(Cents(m * 10i64.pow(k))))).collect();
    codes.insert(encode_cost(Cents::ZERO));
    assert_eq!(codes.len(), 91);
    assert!(codes.iter().all(|&c| c == 0 || (10..=99).contains(&c)));
}

fn cohort(seed: u64, n: usize) -> (claimcraft_core::synthgen::Cohort, Vocabulary) {
    let spec = CohortSpec {
        seed,
        n_enrollees: n,
        date_range: (YearMonth::new(2017, 1), YearMonth::new(2022, 12)),
        ..Default::default()
    };
    let c = generate_cohort(&spec).unwrap();
    let v = build_vocabulary(&c.records, &c.universe.crosswalk).unwrap();
    (c, v)
}

#[test]
fn vocabulary_is_bijective_and_stable() {
    let (c, v) = cohort(3, 120);
    for i in 0..v.len() as u32 {
        assert_eq!(v.id(v.text(i).unwrap()), Some(i));
        assert_eq!(category_of(v.text(i).unwrap()), v.category(i));
    }
    assert_eq!(v.count(Category::Cost), 101);
    assert_eq!(v.count(Category::Att), 13);
    assert_eq!(v.count(Category::Sex), 3);
    let mut buf = Vec::new();
    v.write_tsv(&mut buf).unwrap();
    assert_eq!(Vocabulary::read_tsv(&buf[..]).unwrap(), v);

    let mut shuffled = c.records.clone();
    shuffled.reverse();
    assert_eq!(build_vocabulary(&shuffled, &c.universe.crosswalk).unwrap(), v);
}

#[test]
fn vocabulary_only_has_observed_majors() {
    let (mut c, _) = cohort(5, 1);
    let r = &mut c.records[0];
    for e in &mut r.events {
        for d in &mut e.dx_codes {
            d.code = "E11".into();
        }
    }
    let v = build_vocabulary(&c.records, &c.universe.crosswalk).unwrap();
    let majors: Vec<&str> = v.dx_major_ids().iter().map(|&i| v.text(i).unwrap()).collect();
    assert!(majors.is_empty() || majors == ["<DX-MAJOR_E11>"], "{majors:?}");
}

#[test]
fn empty_corpus_is_an_error() {
    assert!(build_vocabulary(&[], &Default::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, .. ProptestConfig::default() })]

    #[test]
    fn sequences_satisfy_invariants(seed in 0u64..10_000) {
        let (c, v) = cohort(seed, 25);
        let cw = &c.universe.crosswalk;
        for r in &c.records {
            let seq = assemble_sequence(r, cw, &v).unwrap();
            let t = &seq.texts;
            prop_assert_eq!(t[0].as_str(), "<sos>");
            prop_assert!(t[1].starts_with("<SEX-"));
            prop_assert_eq!(t.last().unwrap().as_str(), "<eos>");
            prop_assert!(seq.age_days.windows(2).all(|w| w[0] <= w[1]));

            // NY at every January strictly after the anchor year up to the last group
            let m = detokenize(t).unwrap();
            let first = m.groups.first().unwrap().month;
            let last = m.groups.last().unwrap().month;
            let n_ny = t.iter().filter(|x| *x == "<NY>").count() as i32;
            prop_assert_eq!(n_ny, last.year - first.year);
            for x in t.iter().filter(|x| x.starts_with("<ATT-")) {
                let n: u32 = x[5..x.len() - 1].parse().unwrap();
                prop_assert!(n <= 12);
            }

            // assemble ∘ detokenize ∘ assemble = assemble
            prop_assert_eq!(&assemble_tokens(&m).unwrap(), t);
            let mut m2 = m.clone();
            m2.enrollee_id = r.enrollee_id;
            prop_assert_eq!(m2, monthly_view(r, cw, Some(&v)).unwrap());

            // shuffling events never changes the sequence
            let mut s = r.clone();
            s.events.reverse();
            let k = s.events.len();
            if k > 2 {
                s.events.swap(0, k / 2);
            }
            prop_assert_eq!(&assemble_sequence(&s, cw, &v).unwrap().texts, t);
        }
    }
}
