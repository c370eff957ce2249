//! The worked-example enrollee: one CCAE episode, 2018-01 to 2023-12.

use chrono::NaiveDate;
use claimcraft_core::calendar::YearMonth;
use claimcraft_core::money::Cents;
use claimcraft_core::synthgen::{ClaimEvent, CodeDomain, CodedEntry, EnrolleeRecord, EnrollmentEpisode, Payer, VisitType};
use claimcraft_core::vocab::Crosswalk;

pub const EXPECTED: &str = "<sos> <SEX-1> <DOBYR-1974> <AGE-44> \
<ATT-0> <ERLST-CCAE> <PLANTYP-6> <CAP-0> <EGEOLOC-04> \
<ATT-12> <NY> \
<ATT-12> <NY> \
<ATT-10> <VT-outpatient> <DX-PRINCIPAL> <DX-MAJOR_R07> <DX-MINOR_9> <DX-MAJOR_E11> <DX-MINOR_9> <PROC-PRINCIPAL> <PROC-COMBSTART> <PROC-268400002> <PROC-29303009> <PROC-308561006> <PROC-COMBEND> <PROC-165102003> <PROC-16254007> <PROC-COMBSTART> <PROC-408254005> <PROC-43396009> <PROC-COMBEND> <PROC-CPT499214> <COST-32> \
<ATT-0> <VT-pharmacy> <RX-6809> <COST-51> \
<ATT-2> <NY> \
<ATT-5> <VT-outpatient> <DX-PRINCIPAL> <DX-MAJOR_I10> <PROC-PRINCIPAL> <PROC-165102003> <PROC-16254007> <PROC-COMBSTART> <PROC-408254005> <PROC-43396009> <PROC-COMBEND> <PROC-45896001> <PROC-34608000> <PROC-CPT499213> <COST-12> \
<ATT-0> <VT-pharmacy> <RX-18867> <RX-5487> <COST-51> \
<ATT-1> <VT-outpatient> <DX-PRINCIPAL> <DX-MAJOR_E11> <DX-MINOR_9> <DX-MAJOR_E78> <DX-MINOR_2> <PROC-PRINCIPAL> <PROC-165102003> <PROC-16254007> <PROC-COMBSTART> <PROC-408254005> <PROC-43396009> <PROC-COMBEND> <PROC-63476009> <PROC-45896001> <PROC-34608000> <COST-22> \
<ATT-0> <VT-pharmacy> <RX-1991302> <RX-4018> <COST-23> \
<ATT-6> <NY> \
<ATT-3> <VT-inpatient> <DX-PRINCIPAL> <DX-MAJOR_R11> <DX-MINOR_2> <DX-SECONDARY> <DX-MAJOR_R10> <DX-MINOR_9> <DX-MAJOR_R13> <DX-MINOR_0> <DX-MAJOR_R13> <DX-MINOR_10> <DX-MAJOR_Z98> <DX-MINOR_84> <PROC-SECONDARY> <PROC-168702005> <PROC-241157000> <PROC-COMBSTART> <PROC-315639002> <PROC-86181006> <PROC-COMBEND> <DS-MISSING> <LS-0> <COST-43> \
<ATT-9> <NY> \
<ATT-3> <VT-outpatient> <DX-PRINCIPAL> <DX-MAJOR_E11> <DX-MINOR_9> <PROC-PRINCIPAL> <PROC-165102003> <PROC-16254007> <PROC-COMBSTART> <PROC-408254005> <PROC-43396009> <PROC-COMBEND> <PROC-45896001> <PROC-COMBSTART> <PROC-117356000> <PROC-43789009> <PROC-COMBEND> <PROC-104154005> <PROC-CPT499214> <COST-22> \
<ATT-8> <ERLED-CCAE> <eos>";

pub fn crosswalk() -> Crosswalk {
    let mut cw = Crosswalk::default();
    let procs: &[(&str, &[&str])] = &[
        ("P01", &["268400002", "29303009", "308561006"]),
        ("P02", &["165102003"]),
        ("P03", &["16254007"]),
        ("P04", &["43396009", "408254005"]),
        ("99214", &["CPT499214"]),
        ("99213", &["CPT499213"]),
        ("P05", &["45896001"]),
        ("P06", &["34608000"]),
        ("P07", &["63476009"]),
        ("P08", &["168702005"]),
        ("P09", &["241157000"]),
        ("P10", &["86181006", "315639002"]),
        ("P11", &["43789009", "117356000"]),
        ("P12", &["104154005"]),
    ];
    for (src, t) in procs {
        cw.insert(CodeDomain::Proc, src, t.iter().map(|s| s.to_string()).collect());
    }
    for (src, t) in [("N1", "6809"), ("N2", "18867"), ("N3", "5487"), ("N4", "1991302"), ("N5", "4018")] {
        cw.insert(CodeDomain::Rx, src, vec![t.to_string()]);
    }
    cw
}

fn d(y: i32, m: u32, day: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, day).unwrap()
}

fn outpatient(date: NaiveDate, dx: &[&str], procs: &[&str], dollars: i64) -> ClaimEvent {
    ClaimEvent {
        date,
        visit_type: VisitType::Outpatient,
        dx_codes: dx.iter().map(|c| CodedEntry::principal(*c)).collect(),
        proc_codes: procs.iter().map(|c| CodedEntry::principal(*c)).collect(),
        rx_codes: vec![],
        gross_payment: Cents::from_dollars(dollars),
        discharge_status: None,
        length_of_stay_days: None,
    }
}

fn pharmacy(date: NaiveDate, rx: &[&str], cents: i64) -> ClaimEvent {
    ClaimEvent {
        date,
        visit_type: VisitType::Pharmacy,
        dx_codes: vec![],
        proc_codes: vec![],
        rx_codes: rx.iter().map(|s| s.to_string()).collect(),
        gross_payment: Cents(cents),
        discharge_status: None,
        length_of_stay_days: None,
    }
}

pub fn fixture() -> EnrolleeRecord {
    let events = vec![
        outpatient(d(2020, 11, 10), &["R07.9", "E11.9"], &["P01", "P02", "P03", "P04", "99214"], 300),
        pharmacy(d(2020, 11, 12), &["N1"], 5_000),
        outpatient(d(2021, 6, 3), &["I10"], &["P02", "P03", "P04", "P05", "P06", "99213"], 100),
        pharmacy(d(2021, 6, 5), &["N2", "N3"], 3_000),
        pharmacy(d(2021, 6, 20), &["N2"], 2_000),
        outpatient(d(2021, 7, 8), &["E11.9", "E78.2"], &["P02", "P03", "P04", "P07", "P05", "P06"], 200),
        outpatient(d(2021, 7, 21), &["E11.9"], &["P02"], 0),
        pharmacy(d(2021, 7, 9), &["N4", "N5"], 240_000),
        ClaimEvent {
            date: d(2022, 4, 2),
            visit_type: VisitType::Inpatient,
            dx_codes: vec![
                CodedEntry::principal("R11.2"),
                CodedEntry::secondary("R10.9"),
                CodedEntry::secondary("R13.0"),
                CodedEntry::secondary("R13.10"),
                CodedEntry::secondary("Z98.84"),
            ],
            proc_codes: vec![CodedEntry::secondary("P08"), CodedEntry::secondary("P09"), CodedEntry::secondary("P10")],
            rx_codes: vec![],
            gross_payment: Cents::from_dollars(4000),
            discharge_status: None,
            length_of_stay_days: Some(3),
        },
        outpatient(d(2023, 4, 11), &["E11.9"], &["P02", "P03", "P04", "P05", "P11", "P12", "99214"], 200),
    ];
    EnrolleeRecord {
        enrollee_id: 42,
        sex: 1,
        birth_year: 1974,
        enrollment_episodes: vec![EnrollmentEpisode {
            start: YearMonth::new(2018, 1),
            end: YearMonth::new(2023, 12),
            payer: Payer::CCAE,
            plan_type: Some(6),
            capitated: Some(false),
            geo_code: Some("04".into()),
        }],
        events,
    }
}

