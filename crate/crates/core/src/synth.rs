//! Seeded generator of small synthetic decision corpora with gold spans and
//! gold outcomes, used as the bundled mini-corpus and in tests.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{write_annotations, AnnotatedSentence, Label, Provenance, Span, Zone};
use crate::casebase::{assemble_record, resolve_mentions, CaseRecord, Lexicons};
use crate::corpus::{io_err, split_cover_main, CorpusError, CorpusManifest, DelimiterRules, RawDocument};
use crate::outcome::{CaseOutcome, OutcomeLabel, VoteDetail};
use crate::textprep::{char_len, parse_case_cover, split_sentences, CoverRules};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCase {
    pub doc_id: String,
    pub text: String,
    pub outcome: OutcomeLabel,
    /// Gold units: the cover first, then every main-text sentence.
    pub units: Vec<AnnotatedSentence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldOutcome {
    pub doc_id: String,
    pub label: OutcomeLabel,
}

/// Text under construction with char-offset spans.
#[derive(Default)]
struct Builder {
    text: String,
    len: usize,
    spans: Vec<(usize, usize, Label)>,
}

impl Builder {
    fn push(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self.len += char_len(s);
        self
    }

    fn span(&mut self, s: &str, label: Label) -> &mut Self {
        let start = self.len;
        self.push(s);
        self.spans.push((start, self.len, label));
        self
    }
}

const JUDGES: &[&str] = &["Jane Doe", "Paul Tremblay", "Maria Santos", "David Chen", "Anne Kowalski"];
const COUNSEL: &[&str] = &["Robert Singh", "Claire Dubois", "Ahmed Hassan", "Laura Rossi"];
const PLACES: &[&str] = &["Toronto", "Montreal", "Vancouver", "Calgary", "Ottawa"];
const COUNTRIES: &[&str] = &["Iran", "Nigeria", "Colombia", "Haiti", "Sri Lanka", "Mexico", "Somalia", "China"];
const GROUPS: &[&str] = &["Tamil", "Kurdish", "Roma", "Hazara", "Christian"];
const MONTHS: &[&str] = &[
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];
const EVENTS: &[&str] = &[
    "was detained by the police for three weeks",
    "received death threats from a local gang",
    "was beaten by soldiers at a checkpoint",
    "was forced to leave the family village",
    "was arrested after a political rally",
    "fled the country by bus",
];
const DOCS: &[&str] = &[
    "passport",
    "birth certificate",
    "medical report",
    "police summons",
    "national identity card",
    "psychological assessment",
];
const CREDIBLE: &[&str] =
    &["testified in a straightforward and credible manner", "gave consistent and credible testimony"];
const NOT_CREDIBLE: &[&str] = &["testimony was vague and not credible", "testimony contained major contradictions"];
const EXPLAIN_GRANT: &[&str] =
    &["the documentary evidence corroborates the allegations", "state protection would not be forthcoming"];
const EXPLAIN_DENY: &[&str] = &[
    "the claimant could not explain the delay in claiming protection",
    "an internal flight alternative exists in the capital",
];
const NATIONAL_LAW: &[&str] = &[
    "section 96 of the Immigration and Refugee Protection Act",
    "section 97 of the Immigration and Refugee Protection Act",
];
const CONVENTIONS: &[&str] = &["the 1951 Geneva Convention", "the Convention relating to the Status of Refugees"];
const CASES: &[&str] = &["Canada v Ward", "Rasaratnam v Canada", "Maldonado v Canada"];
const REPORTS: &[&str] = &["the Amnesty International country report", "the Human Rights Watch World Report"];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn date(rng: &mut ChaCha8Rng, year: i32) -> String {
    format!("{} {}, {year}", pick(rng, MONTHS), rng.random_range(1..29))
}

fn cover(rng: &mut ChaCha8Rng, year: i32, mode_virtual: bool) -> Builder {
    let mut b = Builder::default();
    b.push("IMMIGRATION AND REFUGEE BOARD\n")
        .span("REFUGEE PROTECTION DIVISION", Label::Org)
        .push("\n")
        .push(&format!("File No.: TA{}-{:05}\n", year % 100, rng.random_range(0..100_000)))
        .push("Date of hearing: ")
        .span(&date(rng, year), Label::Date)
        .push("\nPlace of hearing: ")
        .span(pick(rng, PLACES), Label::Gpe)
        .push(", Canada\nDate of decision: ")
        .span(&date(rng, year), Label::Date)
        .push("\nPanel: ")
        .span(pick(rng, JUDGES), Label::Person)
        .push("\nCounsel for the claimant: ")
        .span(pick(rng, COUNSEL), Label::Person)
        .push("\n");
    if mode_virtual {
        b.push("Hearing held by videoconference\n");
    }
    b
}

fn main_text(rng: &mut ChaCha8Rng, year: i32, granted: bool, mode_virtual: bool) -> Builder {
    let mut b = Builder::default();
    let multiple = rng.random::<f64>() < 0.2;
    let claimant = if multiple { "The principal claimant" } else { "The claimant" };
    b.push("REASONS AND DECISION\n\n").push(claimant).push(", a ");
    let woman = rng.random::<bool>();
    b.span(
        &format!("{} year old {}", rng.random_range(18..70), if woman { "woman" } else { "man" }),
        Label::ClaimantInfo,
    )
    .push(", is a ")
    .span(&format!("citizen of {}", pick(rng, COUNTRIES)), Label::ClaimantInfo)
    .push(". ");
    if rng.random::<f64>() < 0.5 {
        b.push("The claimant is of ").span(pick(rng, GROUPS), Label::Norp).push(" ethnicity. ");
    }
    if rng.random::<f64>() < 0.3 {
        b.push("The claimant is ").span("accompanied by two minor children", Label::ClaimantInfo).push(". ");
    }
    b.push("The claimant alleges that the claimant ")
        .span(pick(rng, EVENTS), Label::ClaimantEvent)
        .push(". The claimant later ")
        .span(pick(rng, EVENTS), Label::ClaimantEvent)
        .push(". The claimant arrived in ")
        .span("Canada", Label::Gpe)
        .push(" on ")
        .span(&date(rng, year - 1), Label::Date)
        .push(".\n\n");
    b.push("The ")
        .span(
            if mode_virtual { "hearing was held by videoconference" } else { "hearing was held in person" },
            Label::Procedure,
        )
        .push(". The claim is assessed under ")
        .span(pick(rng, NATIONAL_LAW), Label::Law)
        .push(" and ")
        .span(pick(rng, CONVENTIONS), Label::Law)
        .push(". The claimant provided a ")
        .span(pick(rng, DOCS), Label::DocEvidence)
        .push(" and a ")
        .span(pick(rng, DOCS), Label::DocEvidence)
        .push(".\n\n");
    let credible = if rng.random::<f64>() < 0.85 { granted } else { !granted };
    if credible {
        b.push("The panel finds that the claimant ").span(pick(rng, CREDIBLE), Label::Credibility);
    } else {
        b.push("The panel finds that the claimant's ").span(pick(rng, NOT_CREDIBLE), Label::Credibility);
    }
    b.push(". The panel notes that ")
        .span(pick(rng, if granted { EXPLAIN_GRANT } else { EXPLAIN_DENY }), Label::Explanation)
        .push(". The panel relies on ")
        .span(pick(rng, CASES), Label::LawCase)
        .push(" and on ")
        .span(pick(rng, REPORTS), Label::LawReport)
        .push(".\n\n");
    let verb = match (granted, rng.random::<bool>()) {
        (true, true) => "allows",
        (true, false) => "accepts",
        (false, true) => "rejects",
        (false, false) => "dismisses",
    };
    b.push("For these reasons, the panel ")
        .span(&format!("{verb} the claim"), Label::Determination)
        .push(". The panel determines that the ")
        .span(
            if granted { "claimant is a Convention refugee" } else { "claimant is not a Convention refugee" },
            Label::Determination,
        )
        .push(".\n");
    b
}

fn units(doc_id: &str, cover: &Builder, main: &Builder) -> Vec<AnnotatedSentence> {
    let mut out = Vec::new();
    let mut cu = AnnotatedSentence::new(doc_id, 0, cover.text.clone());
    cu.zone = Zone::Cover;
    cu.spans = cover
        .spans
        .iter()
        .map(|&(start, end, label)| Span { start, end, label, provenance: Provenance::Gold })
        .collect();
    out.push(cu);
    for s in split_sentences(&main.text) {
        let mut u = AnnotatedSentence::new(doc_id, s.sent_id, s.text.clone());
        u.spans = main
            .spans
            .iter()
            .filter(|&&(a, b, _)| a >= s.start && b <= s.end)
            .map(|&(a, b, label)| Span { start: a - s.start, end: b - s.start, label, provenance: Provenance::Gold })
            .collect();
        out.push(u);
    }
    out
}

/// `n` cases, about half granted.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<SynthCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let doc_id = format!("case{:03}", i + 1);
            let year = rng.random_range(1996..2000);
            let granted = rng.random::<bool>();
            let mode_virtual = rng.random::<f64>() < 0.3;
            let c = cover(&mut rng, year, mode_virtual);
            let m = main_text(&mut rng, year, granted, mode_virtual);
            SynthCase {
                units: units(&doc_id, &c, &m),
                text: format!("{}{}", c.text, m.text),
                outcome: if granted { OutcomeLabel::Granted } else { OutcomeLabel::Denied },
                doc_id,
            }
        })
        .collect()
}

/// Seed terms per label for termbase construction.
pub fn synth_seeds() -> BTreeMap<Label, Vec<String>> {
    let mut seeds: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    let mut add =
        |label, terms: &[&str]| seeds.entry(label).or_default().extend(terms.iter().map(|t| t.to_lowercase()));
    add(Label::Gpe, &["Canada", "Iran", "Nigeria", "Toronto"]);
    add(Label::DocEvidence, &["passport", "birth certificate", "medical report"]);
    add(Label::Determination, &["rejects the claim", "allows the claim"]);
    add(Label::Norp, &["Tamil", "Kurdish"]);
    seeds
}

/// Writes `docs/<id>.txt`, `manifest.jsonl`, `gold.jsonl` and
/// `outcomes.jsonl` (the latter two for the first `annotated` cases only)
/// and `seeds.json`.
pub fn write_synth_corpus(dir: &Path, cases: &[SynthCase], annotated: usize) -> Result<CorpusManifest, CorpusError> {
    let write = |rel: &str, bytes: &[u8]| {
        let path = dir.join(rel);
        std::fs::write(&path, bytes).map_err(io_err(&path))
    };
    let docs = dir.join("docs");
    std::fs::create_dir_all(&docs).map_err(io_err(&docs))?;
    let mut files = Vec::new();
    for c in cases {
        let rel = format!("docs/{}.txt", c.doc_id);
        write(&rel, c.text.as_bytes())?;
        files.push((c.doc_id.clone(), rel));
    }
    let manifest = CorpusManifest::from_files(dir, &files)?;
    manifest.write_jsonl(&dir.join("manifest.jsonl"))?;

    let gold: Vec<AnnotatedSentence> = cases.iter().take(annotated).flat_map(|c| c.units.clone()).collect();
    let mut buf = Vec::new();
    write_annotations(&mut buf, &gold).expect("writing to memory");
    write("gold.jsonl", &buf)?;

    let mut buf = Vec::new();
    for c in cases.iter().take(annotated) {
        serde_json::to_writer(&mut buf, &GoldOutcome { doc_id: c.doc_id.clone(), label: c.outcome })
            .expect("serializes");
        buf.push(b'\n');
    }
    write("outcomes.jsonl", &buf)?;
    write("seeds.json", (serde_json::to_string_pretty(&synth_seeds()).expect("serializes") + "\n").as_bytes())?;
    Ok(manifest)
}

/// The document and record a perfect extractor would produce for a case.
pub fn gold_record(c: &SynthCase, lex: &Lexicons) -> Result<(RawDocument, CaseRecord), CorpusError> {
    let split = split_cover_main(&c.text, &DelimiterRules::default())?;
    let doc = RawDocument {
        doc_id: c.doc_id.clone(),
        source_uri: None,
        cover_text: split.cover_text,
        main_text: split.main_text,
        year: None,
        split_warning: !split.delimiter_found,
    };
    let cover = parse_case_cover(&doc.cover_text, &CoverRules::default());
    let mentions = resolve_mentions(&doc, &c.units);
    let outcome = CaseOutcome {
        doc_id: c.doc_id.clone(),
        label: c.outcome,
        vote_detail: VoteDetail::default(),
        flags: Vec::new(),
    };
    let record = assemble_record(&doc, &cover, &mentions, &outcome, lex);
    Ok((doc, record))
}

/// Checks that a generated case splits and re-tiles like a loaded document.
pub fn check_case(c: &SynthCase) -> Result<(), String> {
    let split = split_cover_main(&c.text, &DelimiterRules::default()).map_err(|e| e.to_string())?;
    if !split.delimiter_found || split.cover_text != c.units[0].text {
        return Err(format!("{}: cover does not split where expected", c.doc_id));
    }
    let joined: String = c.units[1..].iter().map(|u| u.text.as_str()).collect();
    if joined != split.main_text {
        return Err(format!("{}: sentences do not tile the main text", c.doc_id));
    }
    for u in &c.units {
        u.validate().map_err(|e| format!("{} unit {}: {e}", c.doc_id, u.sent_id))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_are_valid_and_deterministic() {
        let a = synth_corpus(50, 7);
        assert_eq!(a, synth_corpus(50, 7));
        for c in &a {
            check_case(c).unwrap();
        }
        let spans: usize = a.iter().flat_map(|c| &c.units).map(|u| u.spans.len()).sum();
        let expected: usize = 50 * 20;
        assert!(spans >= expected, "{spans}");
        let granted = a.iter().filter(|c| c.outcome == OutcomeLabel::Granted).count();
        assert!((15..=35).contains(&granted));
    }

    #[test]
    fn gold_records_fill_the_case_fields() {
        let lex = Lexicons::default();
        for c in synth_corpus(20, 3) {
            let (doc, r) = gold_record(&c, &lex).unwrap();
            assert!(!doc.split_warning);
            assert_eq!(r.outcome, c.outcome);
            assert!(r.decision_date.is_some() && r.hearing_date.is_some(), "{r:?}");
            assert!(r.tribunal.is_some() && r.judge_name.is_some(), "{r:?}");
            assert!(r.age.is_some() && r.gender.is_some() && r.citizenship.is_some(), "{r:?}");
            assert_eq!(r.determination_text.len(), 2);
            assert_eq!(r.citations.cases.len(), 1);
            assert!(r.flags.is_empty(), "{:?}", r.flags);
            let bare: Vec<_> = c.units.iter().map(|u| AnnotatedSentence { spans: Vec::new(), ..u.clone() }).collect();
            assert_eq!(crate::casebase::document_units(&doc), bare);
        }
    }
}
