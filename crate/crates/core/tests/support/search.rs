//! Random case records and filters with a linear-scan query oracle.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsdcase_core::annotate::Zone;
use rsdcase_core::casebase::*;
use rsdcase_core::outcome::OutcomeLabel;

pub const TRIBUNALS: &[&str] = &["Refugee Protection Division", "refugee appeal division", "IRB"];
pub const JUDGES: &[&str] = &["jane doe", "J. Smith", "a. kumar", "M. Tremblay"];
pub const COUNTRIES: &[&str] = &["iran", "Nigeria", "colombia", "haiti", "sri lanka"];
pub const PHRASES: &[&str] =
    &["passport", "Birth Certificate", "fled by bus", "not credible", "rejects the claim", "police summons"];
pub const CITES: &[&str] = &["Geneva Convention", "IRPA s. 96", "Ward v. Canada", "Amnesty report 2016"];

pub fn mention(rng: &mut ChaCha8Rng) -> Mention {
    let text = PHRASES[rng.random_range(0..PHRASES.len())].to_string();
    let start = rng.random_range(0..500);
    Mention { end: start + text.chars().count(), text, zone: Zone::Main, start }
}

pub fn pick(rng: &mut ChaCha8Rng, xs: &[&str]) -> Option<String> {
    (rng.random::<f64>() < 0.8).then(|| xs[rng.random_range(0..xs.len())].to_string())
}

pub fn date(rng: &mut ChaCha8Rng) -> Option<String> {
    (rng.random::<f64>() < 0.85).then(|| {
        format!("{}-{:02}-{:02}", rng.random_range(1995..2000), rng.random_range(1..13), rng.random_range(1..29))
    })
}

pub fn random_record(i: usize, rng: &mut ChaCha8Rng) -> CaseRecord {
    let mut r = CaseRecord::empty(format!("case{i:03}"));
    r.decision_date = date(rng);
    r.hearing_date = date(rng);
    r.tribunal = pick(rng, TRIBUNALS);
    r.judge_name = pick(rng, JUDGES);
    r.gender = pick(rng, &["female", "male"]);
    r.age = (rng.random::<f64>() < 0.7).then(|| rng.random_range(16..70));
    r.citizenship = pick(rng, COUNTRIES);
    r.hearing_mode = [HearingMode::Virtual, HearingMode::InPerson, HearingMode::Unknown][rng.random_range(0..3)];
    r.outcome = OutcomeLabel::from_code(rng.random_range(0..3)).unwrap();
    let list = |rng: &mut ChaCha8Rng| (0..rng.random_range(0..3)).map(|_| mention(rng)).collect::<Vec<_>>();
    r.claimant_events = list(rng);
    r.credibility_mentions = list(rng);
    r.doc_evidence = list(rng);
    r.procedure_events = list(rng);
    r.explanations = list(rng);
    r.determination_text = list(rng);
    let cites = |rng: &mut ChaCha8Rng| {
        (0..rng.random_range(0..2))
            .map(|_| {
                let text = CITES[rng.random_range(0..CITES.len())].to_string();
                Mention { end: text.chars().count(), text, zone: Zone::Main, start: 0 }
            })
            .collect::<Vec<_>>()
    };
    r.citations.conventions = cites(rng);
    r.citations.national_law = cites(rng);
    r.citations.cases = cites(rng);
    r.citations.reports = cites(rng);
    r
}

pub fn random_filter(rng: &mut ChaCha8Rng) -> QueryFilter {
    let mut f = QueryFilter::default();
    let p = 0.25;
    let case_twist = |s: String, rng: &mut ChaCha8Rng| if rng.random::<bool>() { s.to_uppercase() } else { s };
    if rng.random::<f64>() < p {
        f.tribunal = pick(rng, TRIBUNALS).map(|s| case_twist(s, rng));
    }
    if rng.random::<f64>() < p {
        f.judge = pick(rng, JUDGES).map(|s| case_twist(s, rng));
    }
    if rng.random::<f64>() < p {
        f.outcome = OutcomeLabel::from_code(rng.random_range(0..3));
    }
    if rng.random::<f64>() < p {
        f.gender = pick(rng, &["female", "male"]);
    }
    if rng.random::<f64>() < p {
        f.citizenship = pick(rng, COUNTRIES).map(|s| case_twist(s, rng));
    }
    if rng.random::<f64>() < p {
        f.hearing_mode = Some(["virtual", "in_person", "unknown"][rng.random_range(0..3)].into());
    }
    if rng.random::<f64>() < p {
        let a = date(rng).unwrap_or_else(|| "1996-01-01".into());
        let b = date(rng).unwrap_or_else(|| "1998-12-31".into());
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        f.decision_date = Some(DateRange { from: rng.random::<bool>().then_some(a), to: Some(b) });
    }
    if rng.random::<f64>() < p {
        f.hearing_date = Some(DateRange { from: date(rng).or(Some("1997-06-01".into())), to: None });
    }
    if rng.random::<f64>() < p {
        let lo = rng.random_range(16..50);
        f.age = Some(AgeRange { min: Some(lo), max: rng.random::<bool>().then(|| lo + rng.random_range(0..25)) });
    }
    if rng.random::<f64>() < p {
        let fields = [
            ListField::ClaimantEvents,
            ListField::CredibilityMentions,
            ListField::DocEvidence,
            ListField::ProcedureEvents,
            ListField::Explanations,
            ListField::DeterminationText,
            ListField::Any,
        ];
        let phrase = PHRASES[rng.random_range(0..PHRASES.len())];
        let a = rng.random_range(0..phrase.len() - 3);
        f.contains.push(Containment {
            field: fields[rng.random_range(0..fields.len())],
            term: case_twist(phrase[a..a + 4].to_string(), rng),
        });
    }
    if rng.random::<f64>() < p {
        let kinds = [
            None,
            Some(CitationKind::Convention),
            Some(CitationKind::NationalLaw),
            Some(CitationKind::Case),
            Some(CitationKind::Report),
        ];
        let c = CITES[rng.random_range(0..CITES.len())];
        f.citations.push(CitationMatch {
            kind: kinds[rng.random_range(0..kinds.len())],
            term: c.split_whitespace().next().unwrap().to_lowercase(),
        });
    }
    if f == QueryFilter::default() {
        f.match_all = true;
    }
    f
}

/// Linear scan over in-memory records, written from the filter semantics.
pub fn oracle(records: &[CaseRecord], f: &QueryFilter) -> Vec<String> {
    let eq = |want: &Option<String>, have: &Option<String>| match want {
        None => true,
        Some(w) => have.as_ref().is_some_and(|h| h.to_lowercase() == w.to_lowercase()),
    };
    let in_dates = |r: &Option<DateRange>, v: &Option<String>| match r {
        None => true,
        Some(r) => {
            v.as_ref().is_some_and(|v| r.from.as_ref().is_none_or(|a| v >= a) && r.to.as_ref().is_none_or(|b| v <= b))
        }
    };
    let has = |ms: &[&Mention], term: &str| ms.iter().any(|m| m.text.to_lowercase().contains(&term.to_lowercase()));
    let mut hits: Vec<&CaseRecord> = records
        .iter()
        .filter(|r| {
            eq(&f.tribunal, &r.tribunal)
                && eq(&f.judge, &r.judge_name)
                && eq(&f.gender, &r.gender)
                && eq(&f.citizenship, &r.citizenship)
                && eq(&f.hearing_mode, &Some(r.hearing_mode.as_str().to_string()))
                && f.outcome.is_none_or(|o| o == r.outcome)
                && in_dates(&f.decision_date, &r.decision_date)
                && in_dates(&f.hearing_date, &r.hearing_date)
                && f.age
                    .as_ref()
                    .is_none_or(|a| r.age.is_some_and(|x| a.min.is_none_or(|m| x >= m) && a.max.is_none_or(|m| x <= m)))
                && f.contains.iter().all(|c| has(&r.list(c.field), &c.term))
                && f.citations.iter().all(|c| {
                    r.citations
                        .by_kind()
                        .iter()
                        .filter(|(k, _)| c.kind.is_none_or(|want| want == *k))
                        .any(|(_, ms)| has(&ms.iter().collect::<Vec<_>>(), &c.term))
                })
        })
        .collect();
    hits.sort_by(|a, b| match (&a.decision_date, &b.decision_date) {
        (Some(x), Some(y)) => y.cmp(x).then(a.doc_id.cmp(&b.doc_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.doc_id.cmp(&b.doc_id),
    });
    hits.into_iter().map(|r| r.doc_id.clone()).collect()
}

pub fn fixture(n: usize, seed: u64) -> Vec<CaseRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_record(i, &mut rng)).collect()
}
