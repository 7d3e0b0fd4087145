//! Sentence-level outcome classification, the uncertainty band, per-case
//! majority vote and distribution reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotate::{AnnotatedSentence, Label};
use crate::metrics::{binary_eval, BinaryEval, MetricsError};
use crate::ner::{decode, SequenceModel};
use crate::textprep::tokenize;

pub const CLASSIFIER_VERSION: u32 = 1;
pub const BAND_LOW: f64 = 0.4;
pub const BAND_HIGH: f64 = 0.6;
pub const NO_EVIDENCE: &str = "no_evidence";

#[derive(Debug, Error)]
pub enum OutcomeError {
    #[error("training data must contain both classes (got {positives} positive of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported classifier version {0}")]
    Version(u32),
    #[error("classifier is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Outcome label; serialized as its integer code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutcomeLabel {
    Denied = 0,
    Granted = 1,
    Uncertain = 2,
}

impl OutcomeLabel {
    pub const ALL: [OutcomeLabel; 3] = [OutcomeLabel::Denied, OutcomeLabel::Granted, OutcomeLabel::Uncertain];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeLabel::Denied => "denied",
            OutcomeLabel::Granted => "granted",
            OutcomeLabel::Uncertain => "uncertain",
        }
    }
}

impl fmt::Display for OutcomeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for OutcomeLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for OutcomeLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(d)?;
        Self::from_code(code).ok_or_else(|| serde::de::Error::custom(format!("invalid outcome code {code}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterminationSentence {
    pub doc_id: String,
    pub sent_id: usize,
    pub text: String,
    pub source: SentenceSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceSource {
    Ner,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeScore {
    pub doc_id: String,
    pub sent_id: usize,
    pub p_granted: f64,
}

/// `p > 0.6` granted, `p < 0.4` denied, the closed band in between uncertain.
pub fn band(p: f64) -> OutcomeLabel {
    if p > BAND_HIGH {
        OutcomeLabel::Granted
    } else if p < BAND_LOW {
        OutcomeLabel::Denied
    } else {
        OutcomeLabel::Uncertain
    }
}

pub fn band_sentence(score: &OutcomeScore) -> OutcomeLabel {
    band(score.p_granted)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteDetail {
    pub granted: usize,
    pub denied: usize,
    pub uncertain: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub doc_id: String,
    pub label: OutcomeLabel,
    pub vote_detail: VoteDetail,
    #[serde(default)]
    pub flags: Vec<String>,
}

/// Majority vote over banded sentence labels. Uncertain sentences abstain;
/// a tie, or no votes at all, is uncertain.
pub fn vote(labels: &[OutcomeLabel]) -> (OutcomeLabel, VoteDetail) {
    let mut d = VoteDetail { total: labels.len(), ..VoteDetail::default() };
    for l in labels {
        match l {
            OutcomeLabel::Granted => d.granted += 1,
            OutcomeLabel::Denied => d.denied += 1,
            OutcomeLabel::Uncertain => d.uncertain += 1,
        }
    }
    let label = match d.granted.cmp(&d.denied) {
        std::cmp::Ordering::Greater => OutcomeLabel::Granted,
        std::cmp::Ordering::Less => OutcomeLabel::Denied,
        std::cmp::Ordering::Equal => OutcomeLabel::Uncertain,
    };
    (label, d)
}

pub fn case_outcome(doc_id: &str, scores: &[OutcomeScore]) -> CaseOutcome {
    let banded: Vec<OutcomeLabel> = scores.iter().map(band_sentence).collect();
    let (label, vote_detail) = vote(&banded);
    CaseOutcome { doc_id: doc_id.to_string(), label, vote_detail, flags: Vec::new() }
}

// ---------------------------------------------------------------------------
// Distribution reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportUnit {
    Sentence,
    Case,
}

/// `100·count/total` rounded half-up to two decimals, computed in integers.
pub fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let (c, t) = (count as u128, total as u128);
    ((20_000 * c + t) / (2 * t)) as f64 / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub label: OutcomeLabel,
    pub name: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub unit: ReportUnit,
    pub rows: Vec<DistributionRow>,
    pub total: usize,
    /// Cases with no determination sentence (a subset of the uncertain row).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub no_evidence: Option<usize>,
}

impl DistributionReport {
    pub fn from_counts(unit: ReportUnit, counts: &BTreeMap<OutcomeLabel, usize>) -> Self {
        let total = counts.values().sum();
        let rows = OutcomeLabel::ALL
            .into_iter()
            .map(|label| {
                let count = counts.get(&label).copied().unwrap_or(0);
                DistributionRow { label, name: label.name().to_string(), count, percent: percent(count, total) }
            })
            .collect();
        Self { unit, rows, total, no_evidence: None }
    }

    pub fn from_labels(unit: ReportUnit, labels: impl IntoIterator<Item = OutcomeLabel>) -> Self {
        let mut counts = BTreeMap::new();
        for l in labels {
            *counts.entry(l).or_default() += 1;
        }
        Self::from_counts(unit, &counts)
    }

    pub fn row(&self, label: OutcomeLabel) -> &DistributionRow {
        self.rows.iter().find(|r| r.label == label).expect("every label has a row")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let unit = match self.unit {
            ReportUnit::Sentence => "sentences",
            ReportUnit::Case => "cases",
        };
        let mut out = format!("{:<10} {:>5} {:>10} {:>8}\n", "label", "code", unit, "%");
        for r in &self.rows {
            out.push_str(&format!("{:<10} {:>5} {:>10} {:>8.2}\n", r.name, r.label.code(), r.count, r.percent));
        }
        out.push_str(&format!("{:<10} {:>5} {:>10} {:>8.2}\n", "total", "", self.total, 100.0));
        if let Some(n) = self.no_evidence {
            out.push_str(&format!("no determination sentence: {n}\n"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Classifier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeTrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OutcomeTrainConfig {
    fn default() -> Self {
        Self { l2: 1e-3, learning_rate: 0.5, epochs: 30, batch_size: 32, seed: 42 }
    }
}

/// Lowercase unigrams and adjacent-pair bigrams, deduplicated.
pub fn ngram_features(text: &str) -> Vec<String> {
    let toks: Vec<String> = tokenize(text).into_iter().map(|t| t.text.to_lowercase()).collect();
    let mut out: Vec<String> = toks.iter().map(|t| format!("u:{t}")).collect();
    out.extend(toks.windows(2).map(|w| format!("b:{} {}", w[0], w[1])));
    out.sort();
    out.dedup();
    out
}

/// Logistic regression over binary n-gram indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeClassifier {
    pub version: u32,
    pub features: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub config: OutcomeTrainConfig,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl OutcomeClassifier {
    fn reindex(&mut self) {
        self.index = self.features.iter().enumerate().map(|(i, f)| (f.clone(), i)).collect();
    }

    fn ids(&self, text: &str) -> Vec<usize> {
        ngram_features(text).iter().filter_map(|f| self.index.get(f).copied()).collect()
    }

    pub fn predict_proba(&self, text: &str) -> f64 {
        sigmoid(self.bias + self.ids(text).iter().map(|&i| self.weights[i]).sum::<f64>())
    }

    pub fn predict(&self, text: &str) -> u8 {
        u8::from(self.predict_proba(text) > 0.5)
    }

    pub fn evaluate(&self, data: &[(String, u8)]) -> Result<BinaryEval, OutcomeError> {
        let truth: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
        let pred: Vec<u8> = data.par_iter().map(|(t, _)| self.predict(t)).collect();
        Ok(binary_eval(&truth, &pred)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("classifier serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, OutcomeError> {
        let mut c: OutcomeClassifier = serde_json::from_str(s)?;
        if c.version != CLASSIFIER_VERSION {
            return Err(OutcomeError::Version(c.version));
        }
        if c.weights.len() != c.features.len() {
            return Err(OutcomeError::Corrupt("weights and features differ in length".into()));
        }
        if !c.bias.is_finite() || c.weights.iter().any(|w| !w.is_finite()) {
            return Err(OutcomeError::Corrupt("non-finite weight".into()));
        }
        c.reindex();
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), OutcomeError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OutcomeError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Minibatch AdaGrad on mean log-loss plus `l2/2·‖w‖²` (bias unpenalized).
pub fn train_outcome_classifier(
    labeled: &[(String, u8)],
    cfg: &OutcomeTrainConfig,
) -> Result<OutcomeClassifier, OutcomeError> {
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(OutcomeError::Config(format!("{cfg:?}")));
    }
    let positives = labeled.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == labeled.len() {
        return Err(OutcomeError::SingleClass { positives, total: labeled.len() });
    }
    let feats: Vec<Vec<String>> = labeled.par_iter().map(|(t, _)| ngram_features(t)).collect();
    let mut features: Vec<String> = feats.iter().flatten().cloned().collect();
    features.sort();
    features.dedup();
    let mut clf = OutcomeClassifier {
        version: CLASSIFIER_VERSION,
        weights: vec![0.0; features.len()],
        features,
        bias: 0.0,
        config: cfg.clone(),
        index: HashMap::new(),
    };
    clf.reindex();
    let rows: Vec<(Vec<usize>, f64)> = feats
        .iter()
        .zip(labeled)
        .map(|(fs, (_, y))| (fs.iter().map(|f| clf.index[f]).collect(), f64::from(*y)))
        .collect();

    let mut accum = vec![0.0; clf.weights.len()];
    let mut accum_b = 0.0;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad: BTreeMap<usize, f64> = BTreeMap::new();
            let mut grad_b = 0.0;
            for &r in batch {
                let (ids, y) = &rows[r];
                let p = sigmoid(clf.bias + ids.iter().map(|&i| clf.weights[i]).sum::<f64>());
                let e = (p - y) / batch.len() as f64;
                grad_b += e;
                for &i in ids {
                    *grad.entry(i).or_default() += e;
                }
            }
            // Lazy L2: only weights active in the batch are shrunk.
            for (i, g) in grad {
                let g = g + cfg.l2 * clf.weights[i];
                accum[i] += g * g;
                clf.weights[i] -= cfg.learning_rate * g / (accum[i].sqrt() + 1e-8);
            }
            accum_b += grad_b * grad_b;
            clf.bias -= cfg.learning_rate * grad_b / (accum_b.sqrt() + 1e-8);
        }
    }
    Ok(clf)
}

// ---------------------------------------------------------------------------
// Corpus labeling

/// Main-text sentences of one case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseSentences {
    pub doc_id: String,
    pub sentences: Vec<AnnotatedSentence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLabels {
    pub cases: Vec<CaseOutcome>,
    pub sentences: Vec<(OutcomeScore, OutcomeLabel)>,
    pub sentence_report: DistributionReport,
    pub case_report: DistributionReport,
}

/// Sentences carrying a DETERMINATION span under `ner`.
pub fn determination_sentences(case: &CaseSentences, ner: &SequenceModel) -> Vec<DeterminationSentence> {
    case.sentences
        .iter()
        .filter(|s| decode(ner, s).iter().any(|a| a.label == Label::Determination))
        .map(|s| DeterminationSentence {
            doc_id: case.doc_id.clone(),
            sent_id: s.sent_id,
            text: s.text.clone(),
            source: SentenceSource::Ner,
        })
        .filter(|d| !d.text.trim().is_empty())
        .collect()
}

/// Aggregates already-scored sentences, grouped per case in input order.
pub fn label_scored(cases: &[(String, Vec<OutcomeScore>)]) -> CorpusLabels {
    let mut outcomes = Vec::with_capacity(cases.len());
    let mut sentences = Vec::new();
    let mut no_evidence = 0;
    for (doc_id, scores) in cases {
        let mut out = case_outcome(doc_id, scores);
        if scores.is_empty() {
            out.flags.push(NO_EVIDENCE.to_string());
            no_evidence += 1;
        }
        sentences.extend(scores.iter().map(|s| (s.clone(), band_sentence(s))));
        outcomes.push(out);
    }
    let sentence_report = DistributionReport::from_labels(ReportUnit::Sentence, sentences.iter().map(|(_, l)| *l));
    let mut case_report = DistributionReport::from_labels(ReportUnit::Case, outcomes.iter().map(|c| c.label));
    case_report.no_evidence = Some(no_evidence);
    CorpusLabels { cases: outcomes, sentences, sentence_report, case_report }
}

pub fn label_corpus(cases: &[CaseSentences], ner: &SequenceModel, clf: &OutcomeClassifier) -> CorpusLabels {
    let scored: Vec<(String, Vec<OutcomeScore>)> = cases
        .par_iter()
        .map(|c| {
            let scores = determination_sentences(c, ner)
                .into_iter()
                .map(|d| OutcomeScore { p_granted: clf.predict_proba(&d.text), doc_id: d.doc_id, sent_id: d.sent_id })
                .collect();
            (c.doc_id.clone(), scores)
        })
        .collect();
    label_scored(&scored)
}

pub fn write_silver(path: &Path, cases: &[CaseOutcome]) -> Result<(), OutcomeError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in cases {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_silver(path: &Path) -> Result<Vec<CaseOutcome>, OutcomeError> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(OutcomeError::from)).collect()
}
