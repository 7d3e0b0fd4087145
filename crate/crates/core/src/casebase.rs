//! Structured case records, their feature string, and the SQLite-backed
//! search store.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::{Regex, RegexBuilder};
use rusqlite::types::{Value, ValueRef};
use rusqlite::{params, Connection, OpenFlags, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{AnnotatedSentence, Label, Zone};
use crate::corpus::RawDocument;
use crate::outcome::{CaseOutcome, OutcomeLabel};
use crate::textprep::{char_len, char_slice, split_sentences, CoverFields, CoverValue};

pub const SEP: &str = "[SEP]";
pub const LIST_JOIN: &str = " ; ";
pub const MAX_PAGE: usize = 1000;

/// Field names in feature-string order.
pub const FEATURE_FIELDS: [&str; 21] = [
    "decision_date",
    "hearing_date",
    "tribunal",
    "judge_name",
    "claimant_events",
    "gender",
    "age",
    "citizenship",
    "dependents",
    "multiple_applicants",
    "credibility_mentions",
    "doc_evidence",
    "procedure_events",
    "explanations",
    "hearing_mode",
    "hearing_privacy",
    "determination_text",
    "conventions",
    "national_law",
    "cases",
    "reports",
];

#[derive(Debug, Error)]
pub enum CasebaseError {
    #[error("store {0} does not exist")]
    StoreMissing(String),
    #[error("invalid filter: {}", .0.join("; "))]
    InvalidFilter(Vec<String>),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error(transparent)]
    Sql(#[from] rusqlite::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Records

/// Text located in one zone of a document, offsets in chars.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub text: String,
    pub zone: Zone,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub label: Label,
    #[serde(flatten)]
    pub mention: Mention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HearingMode {
    Virtual,
    InPerson,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HearingPrivacy {
    Public,
    Private,
    #[default]
    Unknown,
}

impl HearingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HearingMode::Virtual => "virtual",
            HearingMode::InPerson => "in_person",
            HearingMode::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [HearingMode::Virtual, HearingMode::InPerson, HearingMode::Unknown].into_iter().find(|m| m.as_str() == s)
    }
}

impl HearingPrivacy {
    pub fn as_str(self) -> &'static str {
        match self {
            HearingPrivacy::Public => "public",
            HearingPrivacy::Private => "private",
            HearingPrivacy::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitationKind {
    Convention,
    NationalLaw,
    Case,
    Report,
}

impl CitationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CitationKind::Convention => "convention",
            CitationKind::NationalLaw => "national_law",
            CitationKind::Case => "case",
            CitationKind::Report => "report",
        }
    }

    fn label(self) -> Label {
        match self {
            CitationKind::Convention | CitationKind::NationalLaw => Label::Law,
            CitationKind::Case => Label::LawCase,
            CitationKind::Report => Label::LawReport,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citations {
    pub conventions: Vec<Mention>,
    pub national_law: Vec<Mention>,
    pub cases: Vec<Mention>,
    pub reports: Vec<Mention>,
}

impl Citations {
    pub fn by_kind(&self) -> [(CitationKind, &Vec<Mention>); 4] {
        [
            (CitationKind::Convention, &self.conventions),
            (CitationKind::NationalLaw, &self.national_law),
            (CitationKind::Case, &self.cases),
            (CitationKind::Report, &self.reports),
        ]
    }
}

/// List-valued record fields and the span label feeding each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListField {
    ClaimantEvents,
    CredibilityMentions,
    DocEvidence,
    ProcedureEvents,
    Explanations,
    DeterminationText,
    /// Any of the above.
    Any,
}

impl ListField {
    pub const FIELDS: [ListField; 6] = [
        ListField::ClaimantEvents,
        ListField::CredibilityMentions,
        ListField::DocEvidence,
        ListField::ProcedureEvents,
        ListField::Explanations,
        ListField::DeterminationText,
    ];

    pub fn labels(self) -> Vec<Label> {
        match self {
            ListField::ClaimantEvents => vec![Label::ClaimantEvent],
            ListField::CredibilityMentions => vec![Label::Credibility],
            ListField::DocEvidence => vec![Label::DocEvidence],
            ListField::ProcedureEvents => vec![Label::Procedure],
            ListField::Explanations => vec![Label::Explanation],
            ListField::DeterminationText => vec![Label::Determination],
            ListField::Any => Self::FIELDS.iter().flat_map(|f| f.labels()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub doc_id: String,
    pub decision_date: Option<String>,
    pub hearing_date: Option<String>,
    pub tribunal: Option<String>,
    pub judge_name: Option<String>,
    pub claimant_events: Vec<Mention>,
    pub gender: Option<String>,
    pub age: Option<u32>,
    pub citizenship: Option<String>,
    pub dependents: Option<bool>,
    pub multiple_applicants: Option<bool>,
    pub credibility_mentions: Vec<Mention>,
    pub doc_evidence: Vec<Mention>,
    pub procedure_events: Vec<Mention>,
    pub explanations: Vec<Mention>,
    pub hearing_mode: HearingMode,
    pub hearing_privacy: HearingPrivacy,
    pub determination_text: Vec<Mention>,
    pub outcome: OutcomeLabel,
    pub citations: Citations,
    /// Mentions of labels that have no list field of their own.
    #[serde(default)]
    pub other_entities: Vec<EntityMention>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl CaseRecord {
    pub fn empty(doc_id: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            decision_date: None,
            hearing_date: None,
            tribunal: None,
            judge_name: None,
            claimant_events: Vec::new(),
            gender: None,
            age: None,
            citizenship: None,
            dependents: None,
            multiple_applicants: None,
            credibility_mentions: Vec::new(),
            doc_evidence: Vec::new(),
            procedure_events: Vec::new(),
            explanations: Vec::new(),
            hearing_mode: HearingMode::Unknown,
            hearing_privacy: HearingPrivacy::Unknown,
            determination_text: Vec::new(),
            outcome: OutcomeLabel::Uncertain,
            citations: Citations::default(),
            other_entities: Vec::new(),
            flags: Vec::new(),
        }
    }

    pub fn list(&self, field: ListField) -> Vec<&Mention> {
        match field {
            ListField::ClaimantEvents => self.claimant_events.iter().collect(),
            ListField::CredibilityMentions => self.credibility_mentions.iter().collect(),
            ListField::DocEvidence => self.doc_evidence.iter().collect(),
            ListField::ProcedureEvents => self.procedure_events.iter().collect(),
            ListField::Explanations => self.explanations.iter().collect(),
            ListField::DeterminationText => self.determination_text.iter().collect(),
            ListField::Any => ListField::FIELDS.iter().flat_map(|&f| self.list(f)).collect(),
        }
    }

    /// Every located mention with its label, list fields first.
    pub fn entities(&self) -> Vec<EntityMention> {
        let mut out = Vec::new();
        for f in ListField::FIELDS {
            let label = f.labels()[0];
            out.extend(self.list(f).into_iter().map(|m| EntityMention { label, mention: m.clone() }));
        }
        for (kind, ms) in self.citations.by_kind() {
            out.extend(ms.iter().map(|m| EntityMention { label: kind.label(), mention: m.clone() }));
        }
        out.extend(self.other_entities.iter().cloned());
        out
    }
}

fn render_list(ms: &[Mention]) -> String {
    ms.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join(LIST_JOIN)
}

fn render_flag(b: Option<bool>) -> String {
    match b {
        Some(true) => "yes".into(),
        Some(false) => "no".into(),
        None => String::new(),
    }
}

/// Field values in [`FEATURE_FIELDS`] order, before lowercasing.
pub fn feature_values(r: &CaseRecord) -> [String; 21] {
    let opt = |s: &Option<String>| s.clone().unwrap_or_default();
    let mode = match r.hearing_mode {
        HearingMode::Unknown => String::new(),
        m => m.as_str().replace('_', " "),
    };
    let privacy = match r.hearing_privacy {
        HearingPrivacy::Unknown => String::new(),
        p => p.as_str().to_string(),
    };
    [
        opt(&r.decision_date),
        opt(&r.hearing_date),
        opt(&r.tribunal),
        opt(&r.judge_name),
        render_list(&r.claimant_events),
        opt(&r.gender),
        r.age.map(|a| a.to_string()).unwrap_or_default(),
        opt(&r.citizenship),
        render_flag(r.dependents),
        render_flag(r.multiple_applicants),
        render_list(&r.credibility_mentions),
        render_list(&r.doc_evidence),
        render_list(&r.procedure_events),
        render_list(&r.explanations),
        mode,
        privacy,
        render_list(&r.determination_text),
        render_list(&r.citations.conventions),
        render_list(&r.citations.national_law),
        render_list(&r.citations.cases),
        render_list(&r.citations.reports),
    ]
}

/// One lowercase string per case: the fields in fixed order joined by
/// `[SEP]`. A literal separator inside a value is rewritten so the field
/// count never changes.
pub fn feature_string(record: &CaseRecord) -> String {
    feature_values(record).iter().map(|v| v.to_lowercase().replace("[sep]", "(sep)")).collect::<Vec<_>>().join(SEP)
}

/// What the outcome predictor reads for a case.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The full feature string.
    #[default]
    FeatureString,
    /// Only the determination spans, joined with spaces.
    Determination,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::FeatureString => "feature_string",
            InputMode::Determination => "determination",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feature_string" => Some(InputMode::FeatureString),
            "determination" => Some(InputMode::Determination),
            _ => None,
        }
    }
}

pub fn predictor_input(record: &CaseRecord, mode: InputMode) -> String {
    match mode {
        InputMode::FeatureString => feature_string(record),
        InputMode::Determination => {
            record.determination_text.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join(" ")
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly

#[derive(Debug, Clone, Deserialize)]
struct LexiconSpec {
    age_patterns: Vec<String>,
    gender: BTreeMap<String, Vec<String>>,
    citizenship_patterns: Vec<String>,
    demonyms: BTreeMap<String, String>,
    dependents: Vec<String>,
    multiple_applicants: Vec<String>,
    hearing_mode: BTreeMap<String, Vec<String>>,
    hearing_privacy: BTreeMap<String, Vec<String>>,
    conventions: Vec<String>,
}

/// Rule lexicons for demographic and hearing fields.
#[derive(Debug, Clone)]
pub struct Lexicons {
    age: Vec<Regex>,
    gender: Vec<(String, Regex)>,
    citizenship: Vec<Regex>,
    demonyms: BTreeMap<String, String>,
    dependents: Regex,
    multiple_applicants: Regex,
    virtual_terms: Regex,
    in_person_terms: Regex,
    private_terms: Regex,
    public_terms: Regex,
    conventions: Regex,
}

pub const DEFAULT_LEXICONS: &str = include_str!("../data/lexicons.json");

fn ci(pattern: &str) -> Result<Regex, CasebaseError> {
    RegexBuilder::new(pattern).case_insensitive(true).build().map_err(|e| CasebaseError::Lexicon(e.to_string()))
}

fn any_term(terms: &[String]) -> Result<Regex, CasebaseError> {
    if terms.is_empty() {
        return ci("$^");
    }
    let alts: Vec<String> = terms.iter().map(|t| regex::escape(t)).collect();
    ci(&format!(r"\b(?:{})\b", alts.join("|")))
}

impl Lexicons {
    pub fn from_json(s: &str) -> Result<Self, CasebaseError> {
        let spec: LexiconSpec = serde_json::from_str(s)?;
        let get = |m: &BTreeMap<String, Vec<String>>, k: &str| m.get(k).cloned().unwrap_or_default();
        Ok(Self {
            age: spec.age_patterns.iter().map(|p| ci(p)).collect::<Result<_, _>>()?,
            gender: spec
                .gender
                .iter()
                .map(|(g, terms)| Ok((g.clone(), any_term(terms)?)))
                .collect::<Result<_, CasebaseError>>()?,
            citizenship: spec.citizenship_patterns.iter().map(|p| ci(p)).collect::<Result<_, _>>()?,
            demonyms: spec.demonyms,
            dependents: any_term(&spec.dependents)?,
            multiple_applicants: any_term(&spec.multiple_applicants)?,
            virtual_terms: any_term(&get(&spec.hearing_mode, "virtual"))?,
            in_person_terms: any_term(&get(&spec.hearing_mode, "in_person"))?,
            private_terms: any_term(&get(&spec.hearing_privacy, "private"))?,
            public_terms: any_term(&get(&spec.hearing_privacy, "public"))?,
            conventions: any_term(&spec.conventions)?,
        })
    }

    pub fn age(&self, text: &str) -> Option<u32> {
        self.age.iter().find_map(|re| {
            re.captures(text)
                .and_then(|c| c.name("age"))
                .and_then(|m| m.as_str().parse().ok())
                .filter(|&a: &u32| a <= 120)
        })
    }

    pub fn gender(&self, text: &str) -> Option<String> {
        // Earliest match in the text decides.
        self.gender.iter().filter_map(|(g, re)| re.find(text).map(|m| (m.start(), g))).min().map(|(_, g)| g.clone())
    }

    pub fn citizenship(&self, text: &str) -> Option<String> {
        let lower = text.to_lowercase();
        for re in &self.citizenship {
            if let Some(c) = re.captures(&lower).and_then(|c| c.name("country")) {
                let country = c.as_str().trim();
                return Some(self.demonyms.get(country).cloned().unwrap_or_else(|| country.to_string()));
            }
        }
        self.demonyms.iter().filter(|(d, _)| lower.trim() == d.as_str()).map(|(_, c)| c.clone()).next()
    }

    pub fn is_convention(&self, text: &str) -> bool {
        self.conventions.is_match(text)
    }
}

impl Default for Lexicons {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICONS).expect("bundled lexicons parse")
    }
}

/// Annotation units of a document without spans: the whole cover (when
/// present) followed by the main-text sentences.
pub fn document_units(doc: &RawDocument) -> Vec<AnnotatedSentence> {
    let mut out = Vec::new();
    if !doc.cover_text.trim().is_empty() {
        let mut cover = AnnotatedSentence::new(doc.doc_id.clone(), 0, doc.cover_text.clone());
        cover.zone = Zone::Cover;
        out.push(cover);
    }
    out.extend(
        split_sentences(&doc.main_text)
            .into_iter()
            .map(|s| AnnotatedSentence::new(doc.doc_id.clone(), s.sent_id, s.text)),
    );
    out
}

/// Maps units (covers and main-text sentences) back to document offsets.
/// Units whose text does not match the document are skipped with a warning.
pub fn resolve_mentions(doc: &RawDocument, units: &[AnnotatedSentence]) -> Vec<EntityMention> {
    let sentences = split_sentences(&doc.main_text);
    let mut out = Vec::new();
    for u in units {
        let (zone_text, base) = match u.zone {
            Zone::Cover => (&doc.cover_text, 0),
            Zone::Main => match sentences.get(u.sent_id) {
                Some(s) => (&doc.main_text, s.start),
                None => {
                    log::warn!("{}: sentence {} not in document", doc.doc_id, u.sent_id);
                    continue;
                }
            },
        };
        if char_slice(zone_text, base, base + char_len(&u.text)) != u.text {
            log::warn!("{}: unit {} text does not match the document", doc.doc_id, u.sent_id);
            continue;
        }
        for s in &u.spans {
            out.push(EntityMention {
                label: s.label,
                mention: Mention {
                    text: u.span_text(s).to_string(),
                    zone: u.zone,
                    start: base + s.start,
                    end: base + s.end,
                },
            });
        }
    }
    out.sort_by_key(|e| (e.mention.zone == Zone::Main, e.mention.start, e.mention.end));
    out
}

static DECISION_CUE: LazyLock<Regex> = LazyLock::new(|| ci(r"\b(?:decision|decided|reasons)\b").expect("static"));
static HEARING_CUE: LazyLock<Regex> = LazyLock::new(|| ci(r"\b(?:hearing|heard)\b").expect("static"));

fn context_before(doc: &RawDocument, m: &Mention, width: usize) -> String {
    let text = match m.zone {
        Zone::Cover => &doc.cover_text,
        Zone::Main => &doc.main_text,
    };
    let line_start = {
        let prefix = char_slice(text, 0, m.start);
        let cut = prefix.rfind(['\n', '.']).map_or(0, |b| prefix[..b].chars().count() + 1);
        cut.max(m.start.saturating_sub(width))
    };
    char_slice(text, line_start, m.start).to_string()
}

fn cover_scalar(v: &Option<CoverValue>, field: &str, flags: &mut Vec<String>) -> Option<String> {
    let v = v.as_ref()?;
    if v.warning.is_some() {
        flags.push(format!("unparsed_date:{field}"));
        return None;
    }
    Some(v.value.clone())
}

/// Builds a record from cover fields, located mentions and the case outcome.
/// Cover values win over main-text values; disagreements are flagged.
pub fn assemble_record(
    doc: &RawDocument,
    cover: &CoverFields,
    mentions: &[EntityMention],
    outcome: &CaseOutcome,
    lex: &Lexicons,
) -> CaseRecord {
    let mut r = CaseRecord::empty(doc.doc_id.clone());
    r.outcome = outcome.label;
    let mut flags = Vec::new();

    let mut main_decision = None;
    let mut main_hearing = None;
    let mut info_texts = Vec::new();
    for e in mentions {
        let m = e.mention.clone();
        match e.label {
            Label::ClaimantEvent => r.claimant_events.push(m),
            Label::Credibility => r.credibility_mentions.push(m),
            Label::DocEvidence => r.doc_evidence.push(m),
            Label::Procedure => r.procedure_events.push(m),
            Label::Explanation => r.explanations.push(m),
            Label::Determination => r.determination_text.push(m),
            Label::LawCase => r.citations.cases.push(m),
            Label::LawReport => r.citations.reports.push(m),
            Label::Law if lex.is_convention(&m.text) => r.citations.conventions.push(m),
            Label::Law => r.citations.national_law.push(m),
            label => {
                if label == Label::Date {
                    if let Some(iso) = crate::textprep::normalize_date(&m.text) {
                        let ctx = context_before(doc, &m, 80);
                        if HEARING_CUE.is_match(&ctx) {
                            main_hearing.get_or_insert(iso);
                        } else if DECISION_CUE.is_match(&ctx) {
                            main_decision.get_or_insert(iso);
                        }
                    }
                }
                if matches!(label, Label::ClaimantInfo | Label::Norp) {
                    info_texts.push(m.text.clone());
                }
                r.other_entities.push(EntityMention { label, mention: m });
            }
        }
    }

    let resolve =
        |field: &str, cover_v: Option<String>, main_v: Option<String>, flags: &mut Vec<String>| match (cover_v, main_v)
        {
            (Some(c), Some(m)) => {
                if c != m {
                    log::info!("{}: {field} cover {c} overrides main text {m}", doc.doc_id);
                    flags.push(format!("date_conflict:{field}"));
                }
                Some(c)
            }
            (c, m) => c.or(m),
        };
    let cover_decision = cover_scalar(&cover.decision_date, "decision_date", &mut flags);
    let cover_hearing = cover_scalar(&cover.hearing_date, "hearing_date", &mut flags);
    r.decision_date = resolve("decision_date", cover_decision, main_decision, &mut flags);
    r.hearing_date = resolve("hearing_date", cover_hearing, main_hearing, &mut flags);

    let first_cover = |label: Label| {
        mentions
            .iter()
            .find(|e| e.label == label && e.mention.zone == Zone::Cover)
            .map(|e| e.mention.text.to_lowercase())
    };
    r.tribunal = cover.tribunal.as_ref().map(|v| v.value.clone()).or_else(|| first_cover(Label::Org));
    r.judge_name = cover.panel_names.first().map(|v| v.value.clone()).or_else(|| first_cover(Label::Person));

    r.age = info_texts.iter().find_map(|t| lex.age(t));
    r.gender = info_texts.iter().find_map(|t| lex.gender(t));
    r.citizenship = info_texts.iter().find_map(|t| lex.citizenship(t));

    if !doc.main_text.trim().is_empty() {
        r.dependents = Some(lex.dependents.is_match(&doc.main_text));
        r.multiple_applicants = Some(lex.multiple_applicants.is_match(&doc.main_text));
    }

    let hearing_texts: Vec<&str> =
        r.procedure_events.iter().map(|m| m.text.as_str()).chain(std::iter::once(doc.cover_text.as_str())).collect();
    let any = |re: &Regex| hearing_texts.iter().any(|t| re.is_match(t));
    r.hearing_mode = match (any(&lex.virtual_terms), any(&lex.in_person_terms)) {
        (true, false) => HearingMode::Virtual,
        (false, true) => HearingMode::InPerson,
        _ => HearingMode::Unknown,
    };
    r.hearing_privacy = match (any(&lex.private_terms), any(&lex.public_terms)) {
        (true, false) => HearingPrivacy::Private,
        (false, true) => HearingPrivacy::Public,
        _ => HearingPrivacy::Unknown,
    };

    flags.extend(outcome.flags.iter().cloned());
    if mentions.is_empty() && cover.is_empty() {
        flags.push("low_quality".into());
    }
    r.flags = flags;
    r
}

// ---------------------------------------------------------------------------
// Filters

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub to: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeRange {
    #[serde(default)]
    pub min: Option<u32>,
    #[serde(default)]
    pub max: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Containment {
    pub field: ListField,
    pub term: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CitationMatch {
    #[serde(default)]
    pub kind: Option<CitationKind>,
    pub term: String,
}

/// Conjunction of predicates. Text equality ignores ASCII case; containment
/// is an ASCII-case-insensitive substring test. Ranges are inclusive and a
/// missing value never satisfies a range.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryFilter {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub match_all: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tribunal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<OutcomeLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub citizenship: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hearing_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_date: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hearing_date: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<AgeRange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<Containment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub citations: Vec<CitationMatch>,
}

fn iso_date_ok(s: &str) -> bool {
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").is_ok() && s.len() == 10
}

impl QueryFilter {
    pub fn match_all() -> Self {
        Self { match_all: true, ..Self::default() }
    }

    fn predicate_count(&self) -> usize {
        [
            self.tribunal.is_some(),
            self.judge.is_some(),
            self.outcome.is_some(),
            self.gender.is_some(),
            self.citizenship.is_some(),
            self.hearing_mode.is_some(),
            self.decision_date.is_some(),
            self.hearing_date.is_some(),
            self.age.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
            + self.contains.len()
            + self.citations.len()
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Result<(), CasebaseError> {
        let mut bad = Vec::new();
        if !self.match_all && self.predicate_count() == 0 {
            bad.push("no predicates given; set match_all to select every case".to_string());
        }
        for (name, v) in [
            ("tribunal", &self.tribunal),
            ("judge", &self.judge),
            ("gender", &self.gender),
            ("citizenship", &self.citizenship),
        ] {
            if v.as_deref().is_some_and(|s| s.trim().is_empty()) {
                bad.push(format!("{name}: empty value"));
            }
        }
        if let Some(m) = &self.hearing_mode {
            if HearingMode::parse(m).is_none() {
                bad.push(format!("hearing_mode: {m:?} is not one of virtual, in_person, unknown"));
            }
        }
        for (name, range) in [("decision_date", &self.decision_date), ("hearing_date", &self.hearing_date)] {
            let Some(r) = range else { continue };
            if r.from.is_none() && r.to.is_none() {
                bad.push(format!("{name}: range has neither from nor to"));
            }
            for d in [&r.from, &r.to].into_iter().flatten() {
                if !iso_date_ok(d) {
                    bad.push(format!("{name}: {d:?} is not a YYYY-MM-DD date"));
                }
            }
            if let (Some(a), Some(b)) = (&r.from, &r.to) {
                if a > b {
                    bad.push(format!("{name}: from {a} is after to {b}"));
                }
            }
        }
        if let Some(r) = &self.age {
            if r.min.is_none() && r.max.is_none() {
                bad.push("age: range has neither min nor max".into());
            }
            if let (Some(a), Some(b)) = (r.min, r.max) {
                if a > b {
                    bad.push(format!("age: min {a} exceeds max {b}"));
                }
            }
        }
        for (i, c) in self.contains.iter().enumerate() {
            if c.term.trim().is_empty() {
                bad.push(format!("contains[{i}]: empty term"));
            }
        }
        for (i, c) in self.citations.iter().enumerate() {
            if c.term.trim().is_empty() {
                bad.push(format!("citations[{i}]: empty term"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CasebaseError::InvalidFilter(bad))
        }
    }
}

// ---------------------------------------------------------------------------
// Store

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS cases (
    doc_id TEXT PRIMARY KEY,
    decision_date TEXT,
    hearing_date TEXT,
    tribunal TEXT,
    judge TEXT,
    gender TEXT,
    age INTEGER,
    citizenship TEXT,
    dependents INTEGER,
    multiple_applicants INTEGER,
    hearing_mode TEXT,
    hearing_privacy TEXT,
    outcome INTEGER NOT NULL CHECK (outcome IN (0, 1, 2))
);
CREATE TABLE IF NOT EXISTS entities (
    doc_id TEXT NOT NULL REFERENCES cases(doc_id),
    label TEXT NOT NULL,
    text TEXT NOT NULL,
    start INTEGER NOT NULL,
    \"end\" INTEGER NOT NULL,
    zone TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS entities_doc ON entities(doc_id);
CREATE TABLE IF NOT EXISTS citations (
    doc_id TEXT NOT NULL REFERENCES cases(doc_id),
    kind TEXT NOT NULL,
    text TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS citations_doc ON citations(doc_id);
CREATE TABLE IF NOT EXISTS case_meta (
    doc_id TEXT PRIMARY KEY REFERENCES cases(doc_id),
    record TEXT NOT NULL,
    feature_string TEXT NOT NULL,
    flags TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS documents (
    doc_id TEXT PRIMARY KEY,
    cover_text TEXT NOT NULL,
    main_text TEXT NOT NULL
);
";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub doc_id: String,
    pub decision_date: Option<String>,
    pub hearing_date: Option<String>,
    pub tribunal: Option<String>,
    pub judge: Option<String>,
    pub citizenship: Option<String>,
    pub outcome: OutcomeLabel,
}

impl From<&CaseRecord> for CaseSummary {
    fn from(r: &CaseRecord) -> Self {
        Self {
            doc_id: r.doc_id.clone(),
            decision_date: r.decision_date.clone(),
            hearing_date: r.hearing_date.clone(),
            tribunal: r.tribunal.clone(),
            judge: r.judge_name.clone(),
            citizenship: r.citizenship.clone(),
            outcome: r.outcome,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub records: Vec<CaseSummary>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub filter: QueryFilter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredDocument {
    pub doc_id: String,
    pub cover_text: String,
    pub main_text: String,
}

pub struct Store {
    conn: Connection,
}

fn opt_bool(b: Option<bool>) -> Option<i64> {
    b.map(i64::from)
}

impl Store {
    /// Opens or creates a writable store with the schema in place.
    pub fn create(path: &Path) -> Result<Self, CasebaseError> {
        let conn = Connection::open(path)?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    pub fn in_memory() -> Result<Self, CasebaseError> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self { conn })
    }

    pub fn open_read_only(path: &Path) -> Result<Self, CasebaseError> {
        if !path.is_file() {
            return Err(CasebaseError::StoreMissing(path.display().to_string()));
        }
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI,
        )?;
        Ok(Self { conn })
    }

    /// Upserts records by doc_id, replacing their entity and citation rows.
    pub fn persist(&mut self, records: &[CaseRecord]) -> Result<usize, CasebaseError> {
        let tx = self.conn.transaction()?;
        {
            let mut del_e = tx.prepare("DELETE FROM entities WHERE doc_id = ?1")?;
            let mut del_c = tx.prepare("DELETE FROM citations WHERE doc_id = ?1")?;
            let mut up_case = tx.prepare(
                "INSERT OR REPLACE INTO cases VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13)",
            )?;
            let mut up_meta = tx.prepare("INSERT OR REPLACE INTO case_meta VALUES (?1, ?2, ?3, ?4)")?;
            let mut ins_e = tx.prepare("INSERT INTO entities VALUES (?1, ?2, ?3, ?4, ?5, ?6)")?;
            let mut ins_c = tx.prepare("INSERT INTO citations VALUES (?1, ?2, ?3)")?;
            for r in records {
                del_e.execute([&r.doc_id])?;
                del_c.execute([&r.doc_id])?;
                up_case.execute(params![
                    r.doc_id,
                    r.decision_date,
                    r.hearing_date,
                    r.tribunal,
                    r.judge_name,
                    r.gender,
                    r.age,
                    r.citizenship,
                    opt_bool(r.dependents),
                    opt_bool(r.multiple_applicants),
                    r.hearing_mode.as_str(),
                    r.hearing_privacy.as_str(),
                    r.outcome.code(),
                ])?;
                up_meta.execute(params![
                    r.doc_id,
                    serde_json::to_string(r)?,
                    feature_string(r),
                    serde_json::to_string(&r.flags)?,
                ])?;
                for e in r.entities() {
                    let zone = match e.mention.zone {
                        Zone::Cover => "cover",
                        Zone::Main => "main",
                    };
                    ins_e.execute(params![
                        r.doc_id,
                        e.label.as_str(),
                        e.mention.text,
                        e.mention.start as i64,
                        e.mention.end as i64,
                        zone
                    ])?;
                }
                for (kind, ms) in r.citations.by_kind() {
                    for m in ms {
                        ins_c.execute(params![r.doc_id, kind.as_str(), m.text])?;
                    }
                }
            }
        }
        tx.commit()?;
        Ok(records.len())
    }

    pub fn persist_documents(&mut self, docs: &[RawDocument]) -> Result<usize, CasebaseError> {
        let tx = self.conn.transaction()?;
        {
            let mut st = tx.prepare("INSERT OR REPLACE INTO documents VALUES (?1, ?2, ?3)")?;
            for d in docs {
                st.execute(params![d.doc_id, d.cover_text, d.main_text])?;
            }
        }
        tx.commit()?;
        Ok(docs.len())
    }

    fn where_clause(filter: &QueryFilter) -> (String, Vec<Value>) {
        let mut conds: Vec<String> = Vec::new();
        let mut args: Vec<Value> = Vec::new();
        let eq = |col: &str, v: &Option<String>, conds: &mut Vec<String>, args: &mut Vec<Value>| {
            if let Some(v) = v {
                conds.push(format!("c.{col} = ? COLLATE NOCASE"));
                args.push(Value::Text(v.clone()));
            }
        };
        eq("tribunal", &filter.tribunal, &mut conds, &mut args);
        eq("judge", &filter.judge, &mut conds, &mut args);
        eq("gender", &filter.gender, &mut conds, &mut args);
        eq("citizenship", &filter.citizenship, &mut conds, &mut args);
        eq("hearing_mode", &filter.hearing_mode, &mut conds, &mut args);
        if let Some(o) = filter.outcome {
            conds.push("c.outcome = ?".into());
            args.push(Value::Integer(o.code() as i64));
        }
        for (col, range) in [("decision_date", &filter.decision_date), ("hearing_date", &filter.hearing_date)] {
            let Some(r) = range else { continue };
            conds.push(format!("c.{col} IS NOT NULL"));
            if let Some(f) = &r.from {
                conds.push(format!("c.{col} >= ?"));
                args.push(Value::Text(f.clone()));
            }
            if let Some(t) = &r.to {
                conds.push(format!("c.{col} <= ?"));
                args.push(Value::Text(t.clone()));
            }
        }
        if let Some(r) = &filter.age {
            conds.push("c.age IS NOT NULL".into());
            if let Some(a) = r.min {
                conds.push("c.age >= ?".into());
                args.push(Value::Integer(a.into()));
            }
            if let Some(b) = r.max {
                conds.push("c.age <= ?".into());
                args.push(Value::Integer(b.into()));
            }
        }
        for c in &filter.contains {
            let labels: Vec<String> = c.field.labels().iter().map(|l| format!("'{}'", l.as_str())).collect();
            conds.push(format!(
                "EXISTS (SELECT 1 FROM entities e WHERE e.doc_id = c.doc_id AND e.label IN ({}) AND instr(lower(e.text), ?) > 0)",
                labels.join(", ")
            ));
            args.push(Value::Text(c.term.to_ascii_lowercase()));
        }
        for c in &filter.citations {
            let mut sql = "EXISTS (SELECT 1 FROM citations t WHERE t.doc_id = c.doc_id".to_string();
            if let Some(k) = c.kind {
                sql.push_str(" AND t.kind = ?");
                args.push(Value::Text(k.as_str().into()));
            }
            sql.push_str(" AND instr(lower(t.text), ?) > 0)");
            args.push(Value::Text(c.term.to_ascii_lowercase()));
            conds.push(sql);
        }
        let clause = if conds.is_empty() { String::new() } else { format!(" WHERE {}", conds.join(" AND ")) };
        (clause, args)
    }

    /// Matching cases ordered by decision date (newest first, undated last),
    /// then doc_id.
    pub fn query(&self, filter: &QueryFilter, offset: usize, limit: usize) -> Result<SearchResult, CasebaseError> {
        filter.validate()?;
        if limit == 0 || limit > MAX_PAGE {
            return Err(CasebaseError::InvalidFilter(vec![format!("limit must be between 1 and {MAX_PAGE}")]));
        }
        let (clause, args) = Self::where_clause(filter);
        let total: i64 = self.conn.query_row(
            &format!("SELECT COUNT(*) FROM cases c{clause}"),
            rusqlite::params_from_iter(args.iter()),
            |row| row.get(0),
        )?;
        let mut page_args = args.clone();
        page_args.push(Value::Integer(limit as i64));
        page_args.push(Value::Integer(offset as i64));
        let mut st = self.conn.prepare(&format!(
            "SELECT c.doc_id, c.decision_date, c.hearing_date, c.tribunal, c.judge, c.citizenship, c.outcome \
             FROM cases c{clause} ORDER BY c.decision_date DESC NULLS LAST, c.doc_id ASC LIMIT ? OFFSET ?"
        ))?;
        let records = st
            .query_map(rusqlite::params_from_iter(page_args.iter()), |row| {
                let code: u8 = row.get(6)?;
                Ok(CaseSummary {
                    doc_id: row.get(0)?,
                    decision_date: row.get(1)?,
                    hearing_date: row.get(2)?,
                    tribunal: row.get(3)?,
                    judge: row.get(4)?,
                    citizenship: row.get(5)?,
                    outcome: OutcomeLabel::from_code(code).unwrap_or(OutcomeLabel::Uncertain),
                })
            })?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SearchResult { records, total: total as usize, offset, limit, filter: filter.clone() })
    }

    pub fn get(&self, doc_id: &str) -> Result<Option<CaseRecord>, CasebaseError> {
        let json: Option<String> =
            self.conn.query_row("SELECT record FROM case_meta WHERE doc_id = ?1", [doc_id], |r| r.get(0)).optional()?;
        json.map(|j| serde_json::from_str(&j).map_err(CasebaseError::from)).transpose()
    }

    pub fn feature_string(&self, doc_id: &str) -> Result<Option<String>, CasebaseError> {
        Ok(self
            .conn
            .query_row("SELECT feature_string FROM case_meta WHERE doc_id = ?1", [doc_id], |r| r.get(0))
            .optional()?)
    }

    pub fn entities(&self, doc_id: &str) -> Result<Vec<EntityMention>, CasebaseError> {
        let mut st = self.conn.prepare(
            "SELECT label, text, start, \"end\", zone FROM entities WHERE doc_id = ?1 ORDER BY zone, start, \"end\", label",
        )?;
        let rows = st.query_map([doc_id], |row| {
            let label: String = row.get(0)?;
            let zone: String = row.get(4)?;
            Ok((label, row.get::<_, String>(1)?, row.get::<_, i64>(2)?, row.get::<_, i64>(3)?, zone))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (label, text, start, end, zone) = row?;
            let Ok(label) = label.parse::<Label>() else { continue };
            out.push(EntityMention {
                label,
                mention: Mention {
                    text,
                    zone: if zone == "cover" { Zone::Cover } else { Zone::Main },
                    start: start as usize,
                    end: end as usize,
                },
            });
        }
        Ok(out)
    }

    pub fn document(&self, doc_id: &str) -> Result<Option<StoredDocument>, CasebaseError> {
        Ok(self
            .conn
            .query_row("SELECT doc_id, cover_text, main_text FROM documents WHERE doc_id = ?1", [doc_id], |r| {
                Ok(StoredDocument { doc_id: r.get(0)?, cover_text: r.get(1)?, main_text: r.get(2)? })
            })
            .optional()?)
    }

    pub fn count(&self) -> Result<usize, CasebaseError> {
        let n: i64 = self.conn.query_row("SELECT COUNT(*) FROM cases", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    /// Canonical text dump of every table, rows sorted. Two stores with the
    /// same content dump identically regardless of insertion history.
    pub fn dump(&self) -> Result<String, CasebaseError> {
        let mut out = String::new();
        for table in ["cases", "entities", "citations", "case_meta", "documents"] {
            out.push_str(&format!("## {table}\n"));
            let mut st = self.conn.prepare(&format!("SELECT * FROM {table}"))?;
            let n = st.column_count();
            let mut rows: Vec<String> = st
                .query_map([], |row| {
                    let cells: Vec<String> = (0..n)
                        .map(|i| match row.get_ref(i) {
                            Ok(v) => match v {
                                ValueRef::Null => "NULL".to_string(),
                                ValueRef::Integer(x) => x.to_string(),
                                ValueRef::Real(x) => format!("{x:?}"),
                                ValueRef::Text(t) => {
                                    serde_json::to_string(&String::from_utf8_lossy(t)).expect("string serializes")
                                }
                                ValueRef::Blob(b) => format!("x'{}'", hex::encode(b)),
                            },
                            Err(_) => "?".to_string(),
                        })
                        .collect();
                    Ok(cells.join("\t"))
                })?
                .collect::<Result<_, _>>()?;
            rows.sort();
            for r in rows {
                out.push_str(&r);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

pub fn persist(records: &[CaseRecord], store_path: &Path) -> Result<usize, CasebaseError> {
    Store::create(store_path)?.persist(records)
}

pub fn query(
    store_path: &Path,
    filter: &QueryFilter,
    offset: usize,
    limit: usize,
) -> Result<SearchResult, CasebaseError> {
    Store::open_read_only(store_path)?.query(filter, offset, limit)
}
