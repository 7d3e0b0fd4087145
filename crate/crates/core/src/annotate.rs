//! Label inventory, terminology base, pattern suggestions, the annotation
//! JSONL format and dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{nearest_neighbors, EmbeddingTable};
use crate::textprep::{char_len, char_slice, normalize, tokenize, Token};

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate label {0} in schema")]
    DuplicateLabel(Label),
    #[error("pattern {pattern:?} is assigned to both {first} and {second}")]
    PatternConflict { pattern: String, first: Label, second: Label },
    #[error("empty pattern under {0}")]
    EmptyPattern(Label),
    #[error("need at least 3 ids to split, got {0}")]
    TooFewIds(usize),
    #[error("duplicate id {0:?} in split input")]
    DuplicateId(String),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Date,
    Gpe,
    Org,
    Person,
    Norp,
    Law,
    LawCase,
    LawReport,
    ClaimantInfo,
    ClaimantEvent,
    Procedure,
    DocEvidence,
    Explanation,
    Determination,
    Credibility,
}

/// Where a label is annotated: the case cover, the main text, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Zones {
    pub cover: bool,
    pub main: bool,
}

impl Label {
    pub const ALL: [Label; 15] = [
        Label::Date,
        Label::Gpe,
        Label::Org,
        Label::Person,
        Label::Norp,
        Label::Law,
        Label::LawCase,
        Label::LawReport,
        Label::ClaimantInfo,
        Label::ClaimantEvent,
        Label::Procedure,
        Label::DocEvidence,
        Label::Explanation,
        Label::Determination,
        Label::Credibility,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Date => "DATE",
            Label::Gpe => "GPE",
            Label::Org => "ORG",
            Label::Person => "PERSON",
            Label::Norp => "NORP",
            Label::Law => "LAW",
            Label::LawCase => "LAW_CASE",
            Label::LawReport => "LAW_REPORT",
            Label::ClaimantInfo => "CLAIMANT_INFO",
            Label::ClaimantEvent => "CLAIMANT_EVENT",
            Label::Procedure => "PROCEDURE",
            Label::DocEvidence => "DOC_EVIDENCE",
            Label::Explanation => "EXPLANATION",
            Label::Determination => "DETERMINATION",
            Label::Credibility => "CREDIBILITY",
        }
    }

    pub fn zones(self) -> Zones {
        let cover = matches!(self, Label::Date | Label::Gpe | Label::Org | Label::Person);
        Zones { cover, main: true }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = AnnotateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL.into_iter().find(|l| l.as_str() == s).ok_or_else(|| AnnotateError::UnknownLabel(s.to_string()))
    }
}

/// Ordered, duplicate-free label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    labels: Vec<Label>,
}

impl LabelSchema {
    /// The full fifteen-label inventory.
    pub fn full() -> Self {
        Self { labels: Label::ALL.to_vec() }
    }

    pub fn new(labels: impl IntoIterator<Item = Label>) -> Result<Self, AnnotateError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for l in labels {
            if !seen.insert(l) {
                return Err(AnnotateError::DuplicateLabel(l));
            }
            out.push(l);
        }
        Ok(Self { labels: out })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn contains(&self, label: Label) -> bool {
        self.labels.contains(&label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gold,
    Suggested,
    Silver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Cover,
    #[default]
    Main,
}

impl Zone {
    fn is_main(&self) -> bool {
        *self == Zone::Main
    }
}

/// Labeled character range inside one annotation unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub provenance: Provenance,
}

/// One line of the annotation JSONL: a main-text sentence, or a whole cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub doc_id: String,
    pub sent_id: usize,
    #[serde(default, skip_serializing_if = "Zone::is_main")]
    pub zone: Zone,
    pub text: String,
    #[serde(default)]
    pub spans: Vec<Span>,
}

/// Flat view of a span with its unit coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub doc_id: String,
    pub sent_id: usize,
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("span {start}..{end} is empty or exceeds the text length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("span {start}..{end} does not align with token boundaries")]
    Misaligned { start: usize, end: usize },
    #[error("spans {a:?} and {b:?} overlap")]
    Overlap { a: (usize, usize), b: (usize, usize) },
}

impl AnnotatedSentence {
    pub fn new(doc_id: impl Into<String>, sent_id: usize, text: impl Into<String>) -> Self {
        Self { doc_id: doc_id.into(), sent_id, zone: Zone::Main, text: text.into(), spans: Vec::new() }
    }

    pub fn tokens(&self) -> Vec<Token> {
        tokenize(&self.text)
    }

    pub fn span_text(&self, span: &Span) -> &str {
        char_slice(&self.text, span.start, span.end)
    }

    pub fn annotations(&self) -> Vec<SpanAnnotation> {
        self.spans
            .iter()
            .map(|s| SpanAnnotation {
                doc_id: self.doc_id.clone(),
                sent_id: self.sent_id,
                start: s.start,
                end: s.end,
                label: s.label,
                provenance: s.provenance,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), SpanError> {
        validate_spans(&self.text, &self.tokens(), &self.spans)
    }
}

pub fn validate_spans(text: &str, tokens: &[Token], spans: &[Span]) -> Result<(), SpanError> {
    let len = char_len(text);
    let starts: BTreeSet<usize> = tokens.iter().map(|t| t.start).collect();
    let ends: BTreeSet<usize> = tokens.iter().map(|t| t.end).collect();
    for s in spans {
        if s.start >= s.end || s.end > len {
            return Err(SpanError::OutOfRange { start: s.start, end: s.end, len });
        }
        if !starts.contains(&s.start) || !ends.contains(&s.end) {
            return Err(SpanError::Misaligned { start: s.start, end: s.end });
        }
    }
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(SpanError::Overlap { a: (w[0].start, w[0].end), b: (w[1].start, w[1].end) });
        }
    }
    Ok(())
}

/// Reads annotation JSONL, validating every span. Errors carry the 1-based
/// line number.
pub fn import_gold(path: &Path) -> Result<Vec<AnnotatedSentence>, AnnotateError> {
    let file = std::fs::File::open(path)?;
    read_annotations(BufReader::new(file))
}

pub fn read_annotations(reader: impl BufRead) -> Result<Vec<AnnotatedSentence>, AnnotateError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| AnnotateError::Line { line: i + 1, message };
        let unit: AnnotatedSentence = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        unit.validate().map_err(|e| at(e.to_string()))?;
        out.push(unit);
    }
    Ok(out)
}

pub fn write_annotations(mut writer: impl Write, units: &[AnnotatedSentence]) -> Result<(), AnnotateError> {
    for u in units {
        serde_json::to_writer(&mut writer, u)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn export_gold(units: &[AnnotatedSentence], path: &Path) -> Result<(), AnnotateError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_annotations(&mut f, units)?;
    f.flush()?;
    Ok(())
}

pub fn label_counts(units: &[AnnotatedSentence]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for u in units {
        for s in &u.spans {
            *counts.entry(s.label).or_default() += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Terminology base

/// Label → lowercase token-sequence patterns. Each pattern belongs to exactly
/// one label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TermBase {
    entries: BTreeMap<Label, Vec<Vec<String>>>,
}

/// Tokenizes a surface term the way sentences are tokenized.
pub fn pattern_tokens(term: &str) -> Vec<String> {
    tokenize(&normalize(term)).into_iter().map(|t| t.text).collect()
}

impl TermBase {
    pub fn new(entries: BTreeMap<Label, Vec<Vec<String>>>) -> Result<Self, AnnotateError> {
        let mut owner: HashMap<&[String], Label> = HashMap::new();
        for (&label, patterns) in &entries {
            for p in patterns {
                if p.is_empty() {
                    return Err(AnnotateError::EmptyPattern(label));
                }
                if let Some(&first) = owner.get(p.as_slice()) {
                    if first != label {
                        return Err(AnnotateError::PatternConflict { pattern: p.join(" "), first, second: label });
                    }
                }
                owner.insert(p, label);
            }
        }
        let entries = entries
            .into_iter()
            .map(|(l, mut ps)| {
                ps.sort();
                ps.dedup();
                (l, ps)
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn from_terms(terms: &BTreeMap<Label, Vec<String>>) -> Result<Self, AnnotateError> {
        Self::new(terms.iter().map(|(l, ts)| (*l, ts.iter().map(|t| pattern_tokens(t)).collect())).collect())
    }

    pub fn entries(&self) -> &BTreeMap<Label, Vec<Vec<String>>> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label_of(&self, pattern: &[String]) -> Option<Label> {
        self.entries.iter().find(|(_, ps)| ps.iter().any(|p| p == pattern)).map(|(l, _)| *l)
    }

    /// JSON form: label → list of patterns, tokens joined by single spaces.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<Label, Vec<String>> =
            self.entries.iter().map(|(l, ps)| (*l, ps.iter().map(|p| p.join(" ")).collect())).collect();
        serde_json::to_string_pretty(&map).expect("termbase serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AnnotateError> {
        let map: BTreeMap<Label, Vec<String>> = serde_json::from_str(s)?;
        Self::from_terms(&map)
    }

    pub fn matcher(&self) -> PatternMatcher {
        PatternMatcher::new(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermConflict {
    pub word: String,
    pub labels: Vec<Label>,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermbaseLog {
    /// Seeds with no vector (or multi-token seeds), kept but not expanded.
    pub unexpanded_seeds: Vec<(Label, String)>,
    pub conflicts: Vec<TermConflict>,
    pub added: Vec<(Label, String, f64)>,
}

/// Seeds plus up to `k` embedding neighbors per seed with cosine similarity
/// `≥ threshold`. A neighbor claimed by several labels goes to the label with
/// the higher similarity; an exact tie drops it and logs the conflict.
pub fn build_termbase(
    seeds: &BTreeMap<Label, Vec<String>>,
    table: &EmbeddingTable,
    k: usize,
    threshold: f64,
) -> Result<(TermBase, TermbaseLog), AnnotateError> {
    let mut log = TermbaseLog::default();
    let base = TermBase::from_terms(seeds)?;
    let seed_words: BTreeSet<String> =
        base.entries.values().flatten().filter(|p| p.len() == 1).map(|p| p[0].clone()).collect();

    let mut claims: BTreeMap<String, BTreeMap<Label, f64>> = BTreeMap::new();
    for (&label, patterns) in &base.entries {
        for p in patterns {
            if p.len() != 1 || !table.contains(&p[0]) {
                log.unexpanded_seeds.push((label, p.join(" ")));
                continue;
            }
            if k == 0 {
                continue;
            }
            let neighbors = nearest_neighbors(table, &p[0], k).expect("seed checked in vocabulary");
            for (word, sim) in neighbors {
                if sim < threshold || seed_words.contains(&word) {
                    continue;
                }
                let best = claims.entry(word).or_default().entry(label).or_insert(sim);
                *best = best.max(sim);
            }
        }
    }

    let mut entries = base.entries.clone();
    for (word, by_label) in claims {
        let mut ranked: Vec<(Label, f64)> = by_label.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (top_label, top_sim) = ranked[0];
        let tied: Vec<Label> = ranked.iter().filter(|(_, s)| *s == top_sim).map(|(l, _)| *l).collect();
        if tied.len() > 1 {
            log::info!("termbase: {word:?} tied between {tied:?}, excluded");
            log.conflicts.push(TermConflict { word, labels: tied, similarity: top_sim });
            continue;
        }
        entries.entry(top_label).or_default().push(vec![word.clone()]);
        log.added.push((top_label, word, top_sim));
    }
    Ok((TermBase::new(entries)?, log))
}

/// Token-sequence matcher over a [`TermBase`].
#[derive(Debug, Clone)]
pub struct PatternMatcher {
    /// First token → (pattern, label), longest patterns first.
    by_first: HashMap<String, Vec<(Vec<String>, Label)>>,
}

impl PatternMatcher {
    pub fn new(tb: &TermBase) -> Self {
        let mut by_first: HashMap<String, Vec<(Vec<String>, Label)>> = HashMap::new();
        for (&label, patterns) in &tb.entries {
            for p in patterns {
                by_first.entry(p[0].clone()).or_default().push((p.clone(), label));
            }
        }
        for v in by_first.values_mut() {
            v.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Self { by_first }
    }

    /// Leftmost-longest, non-overlapping matches as
    /// `(first token, end token exclusive, label)`.
    pub fn find(&self, tokens: &[Token]) -> Vec<(usize, usize, Label)> {
        let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let hit = self.by_first.get(&lower[i]).and_then(|cands| {
                cands.iter().find(|(p, _)| i + p.len() <= lower.len() && lower[i..i + p.len()] == p[..])
            });
            match hit {
                Some((p, label)) => {
                    out.push((i, i + p.len(), *label));
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }

    /// Pattern matches over a tokenized text as suggested spans.
    pub fn suggest(&self, tokens: &[Token]) -> Vec<Span> {
        self.find(tokens)
            .into_iter()
            .map(|(a, b, label)| Span {
                start: tokens[a].start,
                end: tokens[b - 1].end,
                label,
                provenance: Provenance::Suggested,
            })
            .collect()
    }
}

pub fn suggest_spans(sentence: &AnnotatedSentence, termbase: &TermBase) -> Vec<SpanAnnotation> {
    let spans = termbase.matcher().suggest(&sentence.tokens());
    AnnotatedSentence { spans, ..sentence.clone() }.annotations()
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
    pub ratios: (f64, f64, f64),
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// `train = ⌊0.8·N⌋` (leaving at least one id each for dev and test); the
/// remainder goes to dev and test, dev taking the extra one when odd.
pub fn split_sizes(n: usize) -> SplitSizes {
    let train = (n * 8 / 10).min(n.saturating_sub(2));
    let rest = n - train;
    let dev = rest.div_ceil(2);
    SplitSizes { train, dev, test: rest - dev }
}

pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit, AnnotateError> {
    if ids.len() < 3 {
        return Err(AnnotateError::TooFewIds(ids.len()));
    }
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(AnnotateError::DuplicateId(id.clone()));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = split_sizes(ids.len());
    let test = shuffled.split_off(sizes.train + sizes.dev);
    let dev = shuffled.split_off(sizes.train);
    Ok(DatasetSplit { train: shuffled, dev, test, ratios: (0.8, 0.1, 0.1), seed })
}
