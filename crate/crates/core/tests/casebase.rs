mod support;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsdcase_core::annotate::Zone;
use rsdcase_core::casebase::*;
use rsdcase_core::outcome::OutcomeLabel;
use support::search::{fixture, oracle, random_filter};

#[test]
fn query_matches_linear_scan_on_random_filters() {
    let records = fixture(100, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cases.sqlite");
    assert_eq!(persist(&records, &path).unwrap(), 100);
    let store = Store::open_read_only(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nonempty = 0;
    for _ in 0..200 {
        let f = random_filter(&mut rng);
        let want = oracle(&records, &f);
        let got = store.query(&f, 0, MAX_PAGE).unwrap();
        let ids: Vec<String> = got.records.iter().map(|r| r.doc_id.clone()).collect();
        assert_eq!(ids, want, "{}", serde_json::to_string(&f).unwrap());
        assert_eq!(got.total, want.len());
        assert_eq!(got.filter, f);
        nonempty += usize::from(!want.is_empty() && want.len() < 100);
    }
    assert!(nonempty > 50, "filters too degenerate: {nonempty}");
}

#[test]
fn outcome_and_citizenship_filter() {
    let records = fixture(100, 3);
    let mut store = Store::in_memory().unwrap();
    store.persist(&records).unwrap();
    let f = QueryFilter {
        outcome: Some(OutcomeLabel::Granted),
        citizenship: Some("iran".into()),
        ..QueryFilter::default()
    };
    let got: Vec<String> = store.query(&f, 0, 100).unwrap().records.into_iter().map(|r| r.doc_id).collect();
    assert!(!got.is_empty());
    assert_eq!(got, oracle(&records, &f));
}

#[test]
fn paging_preserves_total_and_order() {
    let records = fixture(40, 8);
    let mut store = Store::in_memory().unwrap();
    store.persist(&records).unwrap();
    let all = store.query(&QueryFilter::match_all(), 0, 100).unwrap();
    let mut stitched = Vec::new();
    for offset in (0..40).step_by(7) {
        let page = store.query(&QueryFilter::match_all(), offset, 7).unwrap();
        assert_eq!(page.total, 40);
        stitched.extend(page.records);
    }
    assert_eq!(stitched, all.records);
    assert!(store.query(&QueryFilter::match_all(), 0, 0).is_err());
    assert!(store.query(&QueryFilter::match_all(), 0, MAX_PAGE + 1).is_err());
}

#[test]
fn persist_is_idempotent_and_order_free() {
    let records = fixture(30, 4);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.sqlite");
    let b = dir.path().join("b.sqlite");
    persist(&records, &a).unwrap();
    let once = Store::open_read_only(&a).unwrap().dump().unwrap();
    persist(&records, &a).unwrap();
    assert_eq!(Store::open_read_only(&a).unwrap().dump().unwrap(), once);

    let mut reversed = records.clone();
    reversed.reverse();
    persist(&reversed[..10], &b).unwrap();
    persist(&reversed, &b).unwrap();
    assert_eq!(Store::open_read_only(&b).unwrap().dump().unwrap(), once);
    assert_eq!(Store::open_read_only(&b).unwrap().count().unwrap(), 30);
}

#[test]
fn upsert_replaces_entities() {
    let mut records = fixture(3, 9);
    let mut store = Store::in_memory().unwrap();
    store.persist(&records).unwrap();
    records[0].doc_evidence = vec![Mention { text: "visa".into(), zone: Zone::Main, start: 3, end: 7 }];
    records[0].claimant_events.clear();
    records[0].credibility_mentions.clear();
    records[0].procedure_events.clear();
    records[0].explanations.clear();
    records[0].determination_text.clear();
    records[0].citations = Citations::default();
    store.persist(&records[..1]).unwrap();
    let ents = store.entities(&records[0].doc_id).unwrap();
    assert_eq!(ents.len(), 1);
    assert_eq!(ents[0].mention.text, "visa");
    assert_eq!(store.get(&records[0].doc_id).unwrap().unwrap(), records[0]);
}

#[test]
fn missing_store_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = query(&dir.path().join("nope.sqlite"), &QueryFilter::match_all(), 0, 10);
    assert!(matches!(err, Err(CasebaseError::StoreMissing(_))));
}

#[test]
fn stored_schema_has_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.sqlite");
    persist(&fixture(2, 1), &path).unwrap();
    let conn = rusqlite::Connection::open(&path).unwrap();
    let cols = |t: &str| -> Vec<String> {
        let mut st = conn.prepare(&format!("PRAGMA table_info({t})")).unwrap();
        st.query_map([], |r| r.get::<_, String>(1)).unwrap().map(Result::unwrap).collect()
    };
    assert_eq!(
        cols("cases"),
        [
            "doc_id",
            "decision_date",
            "hearing_date",
            "tribunal",
            "judge",
            "gender",
            "age",
            "citizenship",
            "dependents",
            "multiple_applicants",
            "hearing_mode",
            "hearing_privacy",
            "outcome"
        ]
    );
    assert_eq!(&cols("entities")[..5], ["doc_id", "label", "text", "start", "end"]);
    assert_eq!(cols("citations"), ["doc_id", "kind", "text"]);
}

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![Just(String::new()), "[a-z ;\\[\\]SEP]{1,8}"]
}

fn arb_record() -> impl Strategy<Value = CaseRecord> {
    (
        proptest::option::of(arb_text()),
        proptest::option::of(arb_text()),
        proptest::option::of(0u32..100),
        proptest::option::of(any::<bool>()),
        proptest::collection::vec(arb_text(), 0..3),
        0u8..3,
    )
        .prop_map(|(tribunal, judge, age, dep, docs, mode)| {
            let mut r = CaseRecord::empty("x");
            r.tribunal = tribunal;
            r.judge_name = judge;
            r.age = age;
            r.dependents = dep;
            r.doc_evidence = docs
                .into_iter()
                .map(|t| Mention { end: t.chars().count(), text: t, zone: Zone::Main, start: 0 })
                .collect();
            r.hearing_mode = [HearingMode::Virtual, HearingMode::InPerson, HearingMode::Unknown][mode as usize];
            r
        })
}

proptest! {
    #[test]
    fn feature_string_separates_rendered_fields(a in arb_record(), b in arb_record()) {
        let render = |r: &CaseRecord| -> Vec<String> {
            feature_values(r).iter().map(|v| v.to_lowercase().replace("[sep]", "(sep)")).collect()
        };
        let (sa, sb) = (feature_string(&a), feature_string(&b));
        prop_assert_eq!(sa.split(SEP).count(), FEATURE_FIELDS.len());
        prop_assert_eq!(render(&a) == render(&b), sa == sb);
        let fields: Vec<&str> = sa.split(SEP).collect();
        prop_assert_eq!(fields, render(&a));
    }
}
