//! Normalization, tokenization, sentence splitting and case-cover parsing.
//!
//! All offsets in this module are character (Unicode scalar) offsets, never
//! byte offsets, so they survive the trip to JSON consumers unchanged.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use chrono::NaiveDate;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::canonical_combining_class;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Normalized text plus, for every output character, the character offset of
/// the source character it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalized {
    pub text: String,
    pub source_offsets: Vec<usize>,
}

impl Normalized {
    /// Maps a normalized `[start, end)` range back onto the source text.
    pub fn source_range(&self, start: usize, end: usize, source_len: usize) -> (usize, usize) {
        let s = self.source_offsets.get(start).copied().unwrap_or(source_len);
        let e = self.source_offsets.get(end).copied().unwrap_or(source_len);
        (s, e)
    }
}

pub fn normalize(text: &str) -> String {
    normalize_with_offsets(text).text
}

/// Lowercase, NFC, and whitespace runs collapsed to one ASCII space.
///
/// NFC is applied per cluster (a starter plus its trailing combining marks),
/// which is what keeps the offset map exact.
pub fn normalize_with_offsets(text: &str) -> Normalized {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut offsets = Vec::with_capacity(chars.len());
    let mut i = 0;
    let mut in_space = false;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            if !in_space {
                out.push(' ');
                offsets.push(i);
                in_space = true;
            }
            i += 1;
            continue;
        }
        in_space = false;
        let mut j = i + 1;
        while j < chars.len() && canonical_combining_class(chars[j]) != 0 {
            j += 1;
        }
        let cluster: String = chars[i..j].iter().collect();
        for composed in cluster.nfc() {
            for lower in composed.to_lowercase() {
                out.push(lower);
                offsets.push(i);
            }
        }
        i = j;
    }
    Normalized { text: out, source_offsets: offsets }
}

/// Slices `text` by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut indices = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b_start = indices.nth(start).unwrap_or(text.len());
    let b_end = if end > start { indices.nth(end - start - 1).unwrap_or(text.len()) } else { b_start };
    &text[b_start..b_end]
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Whitespace separates tokens; alphanumeric runs form word tokens and every
/// other character stands alone.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut word = String::new();
    let flush = |tokens: &mut Vec<Token>, word: &mut String, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            tokens.push(Token { text: std::mem::take(word), start: s, end });
        }
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            word.push(c);
        } else {
            flush(&mut tokens, &mut word, &mut word_start, i);
            if !c.is_whitespace() {
                tokens.push(Token { text: c.to_string(), start: i, end: i + 1 });
            }
        }
    }
    let n = char_len(text);
    flush(&mut tokens, &mut word, &mut word_start, n);
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Tokens with offsets into the text the sentence was split from.
    pub tokens: Vec<Token>,
}

/// Tokens before a period that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "no", "nos", "v", "vs", "mr", "mrs", "ms", "dr", "st", "art", "arts", "para", "paras", "sec", "s", "ss", "cf",
    "etc", "p", "pp", "vol", "ch", "inc", "ltd", "jr", "sr", "prof", "hon", "ref", "fig", "al", "e", "i", "g",
];

const CLOSERS: &[&str] = &["\"", "'", ")", "]", "\u{201d}", "\u{2019}"];

/// Splits after `.`, `?` or `!` (plus any closing quotes or brackets) when
/// whitespace follows and the next token starts with a letter. Sentences
/// tile the whole input: inter-sentence whitespace belongs to the earlier
/// sentence.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut starts = vec![0usize];
    let mut first_tok = vec![0usize];
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        let is_term = matches!(t.text.as_str(), "." | "?" | "!");
        if !is_term {
            i += 1;
            continue;
        }
        if t.text == "." && i > 0 {
            let prev = &tokens[i - 1];
            if prev.end == t.start && ABBREVIATIONS.contains(&prev.text.to_lowercase().as_str()) {
                i += 1;
                continue;
            }
        }
        let mut last = i;
        while last + 1 < tokens.len()
            && tokens[last + 1].start == tokens[last].end
            && CLOSERS.contains(&tokens[last + 1].text.as_str())
        {
            last += 1;
        }
        if let Some(next) = tokens.get(last + 1) {
            let gap = next.start > tokens[last].end;
            let alpha = next.text.chars().next().is_some_and(char::is_alphabetic);
            if gap && alpha {
                starts.push(next.start);
                first_tok.push(last + 1);
            }
        }
        i = last + 1;
    }
    let n = char_len(text);
    let mut out = Vec::with_capacity(starts.len());
    for k in 0..starts.len() {
        let start = starts[k];
        let end = starts.get(k + 1).copied().unwrap_or(n);
        let tok_end = first_tok.get(k + 1).copied().unwrap_or(tokens.len());
        out.push(Sentence {
            sent_id: k,
            start,
            end,
            text: char_slice(text, start, end).to_string(),
            tokens: tokens[first_tok[k]..tok_end].to_vec(),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// Case cover parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverField {
    HearingDate,
    DecisionDate,
    Place,
    Tribunal,
    PanelNames,
    CounselNames,
}

impl CoverField {
    fn is_list(self) -> bool {
        matches!(self, CoverField::PanelNames | CoverField::CounselNames)
    }

    fn is_date(self) -> bool {
        matches!(self, CoverField::HearingDate | CoverField::DecisionDate)
    }
}

/// A value lifted out of a cover, with its character range in the cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverValue {
    pub value: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverFields {
    pub hearing_date: Option<CoverValue>,
    pub decision_date: Option<CoverValue>,
    pub place: Option<CoverValue>,
    pub tribunal: Option<CoverValue>,
    #[serde(default)]
    pub panel_names: Vec<CoverValue>,
    #[serde(default)]
    pub counsel_names: Vec<CoverValue>,
}

impl CoverFields {
    pub fn is_empty(&self) -> bool {
        self.hearing_date.is_none()
            && self.decision_date.is_none()
            && self.place.is_none()
            && self.tribunal.is_none()
            && self.panel_names.is_empty()
            && self.counsel_names.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("field {field:?}: pattern {pattern:?} is invalid: {source}")]
    BadPattern { field: CoverField, pattern: String, source: regex::Error },
    #[error("field {field:?}: pattern {pattern:?} has no `value` capture group")]
    NoValueGroup { field: CoverField, pattern: String },
    #[error("cannot read rules: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse rules: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Field name → ordered pattern list, as stored in a rules file.
///
/// Every pattern is a case-insensitive, multi-line regex with a named group
/// `value`. For scalar fields the first pattern that matches wins; for name
/// lists every match of the first matching pattern is split on `,`, `;` and
/// ` and `.
pub type CoverRuleSpec = BTreeMap<CoverField, Vec<String>>;

#[derive(Debug, Clone)]
pub struct CoverRules {
    rules: Vec<(CoverField, Vec<Regex>)>,
}

pub fn default_cover_rule_spec() -> CoverRuleSpec {
    let date_line = |key: &str| format!(r"^[ \t]*{key}[ \t]*:?[ \t]*(?P<value>[^\n]*\S)");
    let mut spec = CoverRuleSpec::new();
    spec.insert(CoverField::HearingDate, vec![date_line(r"date(?:\(s\)|s)? of (?:the )?hearing")]);
    spec.insert(
        CoverField::DecisionDate,
        vec![date_line(r"date(?:\(s\)|s)? of (?:the )?decision"), date_line(r"date of (?:the )?reasons")],
    );
    spec.insert(CoverField::Place, vec![date_line(r"place of (?:the )?hearing")]);
    spec.insert(
        CoverField::Tribunal,
        vec![
            r"(?P<value>(?:immigration appeal|refugee protection|refugee appeal|immigration) division)".into(),
            r"(?P<value>immigration and refugee board)".into(),
        ],
    );
    spec.insert(CoverField::PanelNames, vec![date_line(r"(?:panel|presiding member|members?|tribunal members?)")]);
    spec.insert(
        CoverField::CounselNames,
        vec![date_line(r"(?:counsel|representatives?) for the (?:claimants?|appellants?|applicants?|minister)")],
    );
    spec
}

impl Default for CoverRules {
    fn default() -> Self {
        Self::compile(&default_cover_rule_spec()).expect("built-in cover rules compile")
    }
}

impl CoverRules {
    pub fn compile(spec: &CoverRuleSpec) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (&field, patterns) in spec {
            let mut compiled = Vec::new();
            for p in patterns {
                let re = RegexBuilder::new(p)
                    .case_insensitive(true)
                    .multi_line(true)
                    .build()
                    .map_err(|source| RuleError::BadPattern { field, pattern: p.clone(), source })?;
                if !re.capture_names().any(|n| n == Some("value")) {
                    return Err(RuleError::NoValueGroup { field, pattern: p.clone() });
                }
                compiled.push(re);
            }
            rules.push((field, compiled));
        }
        Ok(Self { rules })
    }

    pub fn from_json_str(s: &str) -> Result<Self, RuleError> {
        Self::compile(&serde_json::from_str(s)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, RuleError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

/// Byte offset → char offset over one string.
struct CharIndex {
    bytes: Vec<usize>,
}

impl CharIndex {
    fn new(s: &str) -> Self {
        let mut bytes: Vec<usize> = s.char_indices().map(|(b, _)| b).collect();
        bytes.push(s.len());
        Self { bytes }
    }

    fn char_at(&self, byte: usize) -> usize {
        self.bytes.partition_point(|&b| b < byte)
    }
}

pub fn parse_case_cover(cover_text: &str, rules: &CoverRules) -> CoverFields {
    let idx = CharIndex::new(cover_text);
    let mut fields = CoverFields::default();
    for (field, patterns) in &rules.rules {
        let field = *field;
        for re in patterns {
            let mut values = Vec::new();
            for caps in re.captures_iter(cover_text) {
                let m = caps.name("value").expect("checked at compile");
                if field.is_list() {
                    values.extend(split_names(m.as_str(), m.start(), &idx));
                } else {
                    values.push(make_value(field, m.as_str(), m.start(), &idx));
                    break;
                }
            }
            if values.is_empty() {
                continue;
            }
            match field {
                CoverField::HearingDate => fields.hearing_date = values.into_iter().next(),
                CoverField::DecisionDate => fields.decision_date = values.into_iter().next(),
                CoverField::Place => fields.place = values.into_iter().next(),
                CoverField::Tribunal => fields.tribunal = values.into_iter().next(),
                CoverField::PanelNames => fields.panel_names = values,
                CoverField::CounselNames => fields.counsel_names = values,
            }
            break;
        }
    }
    fields
}

fn make_value(field: CoverField, raw: &str, byte_start: usize, idx: &CharIndex) -> CoverValue {
    let trimmed = raw.trim();
    let lead = raw.len() - raw.trim_start().len();
    let b0 = byte_start + lead;
    let b1 = b0 + trimmed.len();
    if field.is_date() {
        if let Some((date, db0, db1)) = find_date(trimmed) {
            return CoverValue {
                value: date.format("%Y-%m-%d").to_string(),
                start: idx.char_at(b0 + db0),
                end: idx.char_at(b0 + db1),
                warning: None,
            };
        }
        return CoverValue {
            value: normalize(trimmed),
            start: idx.char_at(b0),
            end: idx.char_at(b1),
            warning: Some("unparsed_date".into()),
        };
    }
    CoverValue { value: normalize(trimmed), start: idx.char_at(b0), end: idx.char_at(b1), warning: None }
}

static NAME_SPLIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\s*(?:,|;|\band\b)\s*").expect("static regex"));

fn split_names(raw: &str, byte_start: usize, idx: &CharIndex) -> Vec<CoverValue> {
    let mut out = Vec::new();
    let mut last = 0;
    let mut push = |a: usize, b: usize| {
        let piece = &raw[a..b];
        if piece.trim().is_empty() {
            return;
        }
        let lead = piece.len() - piece.trim_start().len();
        let t = piece.trim();
        let s = byte_start + a + lead;
        out.push(CoverValue {
            value: normalize(t),
            start: idx.char_at(s),
            end: idx.char_at(s + t.len()),
            warning: None,
        });
    };
    for m in NAME_SPLIT.find_iter(raw) {
        push(last, m.start());
        last = m.end();
    }
    push(last, raw.len());
    out
}

const MONTHS: &[&str] = &[
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

fn month_number(name: &str) -> Option<u32> {
    let name = name.to_lowercase();
    MONTHS.iter().position(|m| *m == name || (name.len() >= 3 && m.starts_with(&name))).map(|i| i as u32 + 1)
}

static DATE_FORMS: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    let month = r"(?P<m>jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sept?(?:ember)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)";
    [
        r"(?P<y>\d{4})-(?P<mn>\d{1,2})-(?P<d>\d{1,2})".to_string(),
        r"(?P<y>\d{4})/(?P<mn>\d{1,2})/(?P<d>\d{1,2})".to_string(),
        format!(r"\b{month}\.?,?\s+(?P<d>\d{{1,2}})(?:st|nd|rd|th)?,?\s+(?P<y>\d{{4}})"),
        format!(r"\b(?P<d>\d{{1,2}})(?:st|nd|rd|th)?\s+(?:of\s+)?{month}\.?,?\s+(?P<y>\d{{4}})"),
    ]
    .iter()
    .map(|p| RegexBuilder::new(p).case_insensitive(true).build().expect("static regex"))
    .collect()
});

/// Finds the earliest date in `s`. Accepted forms: `1996-06-04`,
/// `1996/06/04`, `june 4, 1996`, `june, 4th 1996`, `jun 4 1996`,
/// `4 june 1996`, `4th of june, 1996`. Returns the date and its byte range.
pub fn find_date(s: &str) -> Option<(NaiveDate, usize, usize)> {
    let mut best: Option<(NaiveDate, usize, usize)> = None;
    for re in DATE_FORMS.iter() {
        for caps in re.captures_iter(s) {
            let whole = caps.get(0).expect("group 0");
            let y: i32 = caps["y"].parse().ok()?;
            let d: u32 = caps["d"].parse().ok()?;
            let m = match (caps.name("m"), caps.name("mn")) {
                (Some(name), _) => month_number(name.as_str()),
                (_, Some(num)) => num.as_str().parse().ok(),
                _ => None,
            };
            let Some(date) = m.and_then(|m| NaiveDate::from_ymd_opt(y, m, d)) else {
                continue;
            };
            if best.is_none_or(|(_, b, _)| whole.start() < b) {
                best = Some((date, whole.start(), whole.end()));
            }
            break;
        }
    }
    best
}

/// Parses a date string into ISO-8601, if one of the accepted forms is present.
pub fn normalize_date(s: &str) -> Option<String> {
    find_date(s).map(|(d, _, _)| d.format("%Y-%m-%d").to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Toronto,  Ontario"), "toronto, ontario");
        assert_eq!(normalize(""), "");
        assert_eq!(normalize("A\u{00A0}B"), "a b");
    }

    #[test]
    fn nbsp_is_whitespace_by_character_class() {
        // every char the normalizer folds to a space must be White_Space
        for c in ['\u{00A0}', '\u{2003}', '\t', '\n', '\u{3000}'] {
            assert!(c.is_whitespace());
            assert_eq!(normalize(&format!("x{c}y")), "x y");
        }
    }

    #[test]
    fn normalize_composes_and_maps_offsets() {
        let src = "Cafe\u{0301}  Noir";
        let n = normalize_with_offsets(src);
        assert_eq!(n.text, "caf\u{e9} noir");
        assert_eq!(n.source_offsets, vec![0, 1, 2, 3, 5, 7, 8, 9, 10]);
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("the panel rejects the claim").len(), 5);
        assert!(tokenize("").is_empty());
        assert_eq!(
            texts(&tokenize("xxx v. minister of canada, 1994")),
            ["xxx", "v", ".", "minister", "of", "canada", ",", "1994"]
        );
    }

    #[test]
    fn sentence_examples() {
        let s = split_sentences("a. b.");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "a. ");
        assert_eq!(s[1].text, "b.");
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   ").is_empty());
    }

    #[test]
    fn abbreviation_does_not_split() {
        // stop-list oracle: every abbreviation followed by a lowercase word
        for abbr in ABBREVIATIONS {
            let text = format!("see {abbr}. next word here.");
            assert_eq!(split_sentences(&text).len(), 1, "{abbr}");
        }
        assert_eq!(split_sentences("file no. 123 was heard. the panel sat.").len(), 2);
        assert_eq!(split_sentences("xxx v. minister of canada, 1994.").len(), 1);
    }

    #[test]
    fn closing_quote_stays_with_sentence() {
        let s = split_sentences("he said \"yes.\" then left.");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "he said \"yes.\" ");
    }

    #[test]
    fn cover_decision_date() {
        let cover = "IMMIGRATION AND REFUGEE BOARD\nRefugee Protection Division\nDate of decision: June 4, 1996\n";
        let f = parse_case_cover(cover, &CoverRules::default());
        let d = f.decision_date.unwrap();
        assert_eq!(d.value, "1996-06-04");
        assert_eq!(char_slice(cover, d.start, d.end), "June 4, 1996");
        assert_eq!(f.tribunal.unwrap().value, "refugee protection division");
    }

    #[test]
    fn cover_tribunal_from_mention() {
        let f = parse_case_cover("appeal heard before the immigration appeal division", &CoverRules::default());
        assert_eq!(f.tribunal.unwrap().value, "immigration appeal division");
    }

    #[test]
    fn empty_cover_has_no_fields() {
        assert!(parse_case_cover("", &CoverRules::default()).is_empty());
    }

    #[test]
    fn malformed_date_is_flagged() {
        let f = parse_case_cover("date of hearing: sometime in spring", &CoverRules::default());
        let h = f.hearing_date.unwrap();
        assert_eq!(h.value, "sometime in spring");
        assert_eq!(h.warning.as_deref(), Some("unparsed_date"));
    }

    #[test]
    fn names_are_split_with_offsets() {
        let cover = "Panel: A. Smith and B. Jones\nCounsel for the claimant: C. Doe";
        let f = parse_case_cover(cover, &CoverRules::default());
        let names: Vec<_> = f.panel_names.iter().map(|v| v.value.as_str()).collect();
        assert_eq!(names, ["a. smith", "b. jones"]);
        for v in f.panel_names.iter().chain(&f.counsel_names) {
            assert_eq!(normalize(char_slice(cover, v.start, v.end)), v.value);
        }
        assert_eq!(f.counsel_names[0].value, "c. doe");
    }

    #[test]
    fn date_forms() {
        for s in [
            "june, 4th 1996",
            "June 4, 1996",
            "4 June 1996",
            "1996-06-04",
            "1996/6/4",
            "4th of june, 1996",
            "jun 4 1996",
        ] {
            assert_eq!(normalize_date(s).as_deref(), Some("1996-06-04"), "{s}");
        }
        assert_eq!(normalize_date("june 31, 1996"), None);
    }

    #[test]
    fn rules_require_value_group() {
        let mut spec = CoverRuleSpec::new();
        spec.insert(CoverField::Place, vec!["place: (.*)".into()]);
        assert!(matches!(CoverRules::compile(&spec), Err(RuleError::NoValueGroup { .. })));
    }

    proptest! {
        #[test]
        fn token_offsets_round_trip(s in "[a-zA-Z0-9 ,.!?'\u{e9}\u{a0}\n-]{0,60}") {
            let tokens = tokenize(&s);
            let mut rebuilt = String::new();
            let mut pos = 0;
            for t in &tokens {
                prop_assert!(t.start < t.end);
                prop_assert!(t.start >= pos);
                prop_assert_eq!(char_slice(&s, t.start, t.end), t.text.as_str());
                rebuilt.push_str(char_slice(&s, pos, t.start));
                rebuilt.push_str(&t.text);
                pos = t.end;
            }
            rebuilt.push_str(char_slice(&s, pos, char_len(&s)));
            prop_assert_eq!(rebuilt, s);
        }

        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            prop_assert_eq!(normalize(&once), once.clone());
            prop_assert_eq!(tokenize(&normalize(&once)), tokenize(&once));
        }

        #[test]
        fn sentences_tile_input(s in "[a-zA-Z .!?\"]{0,80}") {
            let sents = split_sentences(&s);
            let joined: String = sents.iter().map(|x| x.text.as_str()).collect();
            if sents.is_empty() {
                prop_assert!(tokenize(&s).is_empty());
            } else {
                prop_assert_eq!(joined, s.clone());
            }
            let n_tokens = tokenize(&s).len();
            prop_assert!(sents.len() <= n_tokens);
            for x in &sents {
                prop_assert!(!x.tokens.is_empty());
                for t in &x.tokens {
                    prop_assert!(t.start >= x.start && t.end <= x.end);
                }
            }
        }
    }
}
