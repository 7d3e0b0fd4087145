//! Linear-chain CRF over BIO tags.
//!
//! A schema with `L` labels has `1 + 2L` tags: `O` at index 0, then
//! `B-label`/`I-label` pairs in schema order. Decoding is unconstrained
//! Viterbi; invalid BIO transitions in the output are repaired by
//! [`decode_bio`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::annotate::{
    AnnotatedSentence, Label, LabelSchema, PatternMatcher, Provenance, Span, SpanAnnotation, SpanError, TermBase,
};
use crate::metrics::{precision_recall_f1, Prf};
use crate::textprep::{tokenize, Token};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NerError {
    #[error("label {label} in {doc_id}#{sent_id} is not in the schema")]
    LabelNotInSchema { label: Label, doc_id: String, sent_id: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{doc_id}#{sent_id}: {source}")]
    InvalidSpans { doc_id: String, sent_id: usize, source: SpanError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("model is inconsistent: {0}")]
    Corrupt(String),
    #[error("invalid tag {0:?}")]
    BadTag(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// BIO encoding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BioTag {
    O,
    B(Label),
    I(Label),
}

impl BioTag {
    pub fn label(self) -> Option<Label> {
        match self {
            BioTag::O => None,
            BioTag::B(l) | BioTag::I(l) => Some(l),
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(l) => write!(f, "B-{l}"),
            BioTag::I(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for BioTag {
    type Err = NerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(BioTag::O);
        }
        let bad = || NerError::BadTag(s.to_string());
        let (prefix, label) = s.split_once('-').ok_or_else(bad)?;
        let label: Label = label.parse().map_err(|_| bad())?;
        match prefix {
            "B" => Ok(BioTag::B(label)),
            "I" => Ok(BioTag::I(label)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for BioTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Index ↔ tag mapping for one schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSet {
    tags: Vec<BioTag>,
}

impl TagSet {
    pub fn new(schema: &LabelSchema) -> Self {
        let mut tags = vec![BioTag::O];
        for &l in schema.labels() {
            tags.push(BioTag::B(l));
            tags.push(BioTag::I(l));
        }
        Self { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, i: usize) -> BioTag {
        self.tags[i]
    }

    pub fn tags(&self) -> &[BioTag] {
        &self.tags
    }

    pub fn index(&self, tag: BioTag) -> Option<usize> {
        self.tags.iter().position(|&t| t == tag)
    }
}

/// Tags for `tokens` given token-aligned, non-overlapping `spans`.
pub fn encode_bio(tokens: &[Token], spans: &[Span]) -> Vec<BioTag> {
    let mut tags = vec![BioTag::O; tokens.len()];
    for s in spans {
        let mut first = true;
        for (i, t) in tokens.iter().enumerate() {
            if t.start >= s.start && t.end <= s.end {
                tags[i] = if first { BioTag::B(s.label) } else { BioTag::I(s.label) };
                first = false;
            }
        }
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioDecoding {
    /// `(first token, end token exclusive, label)`.
    pub token_spans: Vec<(usize, usize, Label)>,
    /// Token positions where an `I-` tag had to open a new span.
    pub repairs: Vec<usize>,
}

pub fn decode_bio_tokens(tags: &[BioTag]) -> BioDecoding {
    let mut out = BioDecoding { token_spans: Vec::new(), repairs: Vec::new() };
    let mut open: Option<(usize, Label)> = None;
    let close = |open: &mut Option<(usize, Label)>, end: usize, out: &mut BioDecoding| {
        if let Some((s, l)) = open.take() {
            out.token_spans.push((s, end, l));
        }
    };
    for (i, &tag) in tags.iter().enumerate() {
        match tag {
            BioTag::O => close(&mut open, i, &mut out),
            BioTag::B(l) => {
                close(&mut open, i, &mut out);
                open = Some((i, l));
            }
            BioTag::I(l) => match open {
                Some((_, cur)) if cur == l => {}
                _ => {
                    close(&mut open, i, &mut out);
                    log::debug!("bio repair: I-{l} at token {i} opens a new span");
                    out.repairs.push(i);
                    open = Some((i, l));
                }
            },
        }
    }
    close(&mut open, tags.len(), &mut out);
    out
}

/// Character-offset spans for `tags` over `tokens`, plus the repair log.
pub fn decode_bio(tags: &[BioTag], tokens: &[Token], provenance: Provenance) -> (Vec<Span>, Vec<usize>) {
    let d = decode_bio_tokens(tags);
    let spans = d
        .token_spans
        .iter()
        .map(|&(a, b, label)| Span { start: tokens[a].start, end: tokens[b - 1].end, label, provenance })
        .collect();
    (spans, d.repairs)
}

// ---------------------------------------------------------------------------
// Chain algorithms over dense score tables

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Score of one tag path: start + emissions + transitions.
pub fn path_score(emissions: &[Vec<f64>], transitions: &[Vec<f64>], start: &[f64], path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += emissions[t][y];
        s += if t == 0 { start[y] } else { transitions[path[t - 1]][y] };
    }
    s
}

/// Highest-scoring path and its score. Ties go to the lower tag index.
pub fn viterbi(emissions: &[Vec<f64>], transitions: &[Vec<f64>], start: &[f64]) -> (Vec<usize>, f64) {
    let n = emissions.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let k = start.len();
    let mut delta: Vec<f64> = (0..k).map(|y| start[y] + emissions[0][y]).collect();
    let mut back = vec![vec![0usize; k]; n];
    for t in 1..n {
        let mut next = vec![0.0; k];
        for y in 0..k {
            let mut best = (f64::NEG_INFINITY, 0);
            for (p, d) in delta.iter().enumerate() {
                let v = d + transitions[p][y];
                if v > best.0 {
                    best = (v, p);
                }
            }
            next[y] = best.0 + emissions[t][y];
            back[t][y] = best.1;
        }
        delta = next;
    }
    let mut last = 0;
    for y in 1..k {
        if delta[y] > delta[last] {
            last = y;
        }
    }
    let score = delta[last];
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    (path, score)
}

/// Forward and backward tables in log space.
pub struct ForwardBackward {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub log_z: f64,
}

pub fn forward_backward(emissions: &[Vec<f64>], transitions: &[Vec<f64>], start: &[f64]) -> ForwardBackward {
    let n = emissions.len();
    let k = start.len();
    if n == 0 {
        return ForwardBackward { alpha: Vec::new(), beta: Vec::new(), log_z: 0.0 };
    }
    let mut alpha = vec![vec![0.0; k]; n];
    for y in 0..k {
        alpha[0][y] = start[y] + emissions[0][y];
    }
    for t in 1..n {
        for y in 0..k {
            let prev = &alpha[t - 1];
            alpha[t][y] = log_sum_exp((0..k).map(|p| prev[p] + transitions[p][y])) + emissions[t][y];
        }
    }
    let mut beta = vec![vec![0.0; k]; n];
    for t in (0..n - 1).rev() {
        for y in 0..k {
            let next = &beta[t + 1];
            beta[t][y] = log_sum_exp((0..k).map(|q| transitions[y][q] + emissions[t + 1][q] + next[q]));
        }
    }
    let log_z = log_sum_exp(alpha[n - 1].iter().copied());
    ForwardBackward { alpha, beta, log_z }
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureToggles {
    pub termbase: bool,
    pub clusters: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        Self { termbase: true, clusters: true }
    }
}

/// External resources feeding the termbase and cluster templates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureResources {
    pub termbase: Option<TermBase>,
    pub clusters: Option<BTreeMap<String, u32>>,
}

fn shape(word: &str) -> String {
    let mut out = String::new();
    for c in word.chars() {
        let class = if c.is_ascii_digit() || c.is_numeric() {
            'd'
        } else if c.is_uppercase() {
            'X'
        } else if c.is_alphabetic() {
            'x'
        } else {
            'p'
        };
        if !out.ends_with(class) {
            out.push(class);
        }
    }
    out
}

struct FeatureExtractor<'a> {
    matcher: Option<PatternMatcher>,
    clusters: Option<&'a BTreeMap<String, u32>>,
}

impl<'a> FeatureExtractor<'a> {
    fn new(resources: &'a FeatureResources, toggles: FeatureToggles) -> Self {
        Self {
            matcher: resources.termbase.as_ref().filter(|_| toggles.termbase).map(TermBase::matcher),
            clusters: resources.clusters.as_ref().filter(|_| toggles.clusters),
        }
    }

    fn extract(&self, tokens: &[Token]) -> Vec<Vec<String>> {
        let lower: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
        let n = tokens.len();
        let mut tb_flags: Vec<Option<Label>> = vec![None; n];
        if let Some(m) = &self.matcher {
            for (a, b, l) in m.find(tokens) {
                tb_flags[a..b].iter_mut().for_each(|f| *f = Some(l));
            }
        }
        let word_at = |i: isize| -> &str {
            if i < 0 {
                "<s>"
            } else if i as usize >= n {
                "</s>"
            } else {
                &lower[i as usize]
            }
        };
        let cluster_of = |i: isize| -> String {
            if i < 0 || i as usize >= n {
                return "-".into();
            }
            self.clusters.and_then(|c| c.get(&lower[i as usize])).map_or_else(|| "?".into(), u32::to_string)
        };
        (0..n)
            .map(|i| {
                let w = &lower[i];
                let chars: Vec<char> = w.chars().collect();
                let mut f = vec!["bias".to_string(), format!("w={w}"), format!("shape={}", shape(&tokens[i].text))];
                for len in 1..=3.min(chars.len()) {
                    f.push(format!("pre{len}={}", chars[..len].iter().collect::<String>()));
                    f.push(format!("suf{len}={}", chars[chars.len() - len..].iter().collect::<String>()));
                }
                let ii = i as isize;
                for off in [-2isize, -1, 1, 2] {
                    f.push(format!("w[{off}]={}", word_at(ii + off)));
                }
                if self.matcher.is_some() {
                    if let Some(l) = tb_flags[i] {
                        f.push(format!("tb={l}"));
                    }
                }
                if self.clusters.is_some() {
                    for off in [-1isize, 0, 1] {
                        f.push(format!("c[{off}]={}", cluster_of(ii + off)));
                    }
                }
                f
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerTrainConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_feature_count: usize,
    pub features: FeatureToggles,
}

impl Default for NerTrainConfig {
    fn default() -> Self {
        Self {
            l2: 0.1,
            learning_rate: 0.1,
            max_epochs: 40,
            patience: 5,
            batch_size: 16,
            seed: 42,
            min_feature_count: 1,
            features: FeatureToggles::default(),
        }
    }
}

impl NerTrainConfig {
    pub fn validate(&self) -> Result<(), NerError> {
        let bad = |m: &str| Err(NerError::Config(m.into()));
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be a finite non-negative number");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub l2: f64,
    pub dev_macro_f1: Option<f64>,
    pub features: FeatureToggles,
}

/// Serialized form of a trained labeler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub version: u32,
    pub schema: LabelSchema,
    pub tags: Vec<BioTag>,
    /// Feature alphabet, index order.
    pub features: Vec<String>,
    /// Row-major `[feature][tag]`.
    pub feature_weights: Vec<f64>,
    /// Row-major `[previous tag][tag]`.
    pub transition_weights: Vec<f64>,
    pub start_weights: Vec<f64>,
    pub train_meta: TrainMeta,
    /// Termbase patterns as `label → "tok tok"`, when the termbase template is on.
    #[serde(default)]
    pub termbase: Option<BTreeMap<Label, Vec<String>>>,
    #[serde(default)]
    pub clusters: Option<BTreeMap<String, u32>>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    #[serde(skip)]
    resources: FeatureResources,
}

impl SequenceModel {
    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    fn prepare(&mut self) -> Result<(), NerError> {
        let k = self.tags.len();
        if self.tags != TagSet::new(&self.schema).tags {
            return Err(NerError::Corrupt("tags do not match the schema".into()));
        }
        if self.feature_weights.len() != self.features.len() * k
            || self.transition_weights.len() != k * k
            || self.start_weights.len() != k
        {
            return Err(NerError::Corrupt("weight dimensions".into()));
        }
        let all = self.feature_weights.iter().chain(&self.transition_weights).chain(&self.start_weights);
        if all.into_iter().any(|w| !w.is_finite()) {
            return Err(NerError::Corrupt("non-finite weight".into()));
        }
        self.index = self.features.iter().enumerate().map(|(i, f)| (f.clone(), i as u32)).collect();
        let termbase = match &self.termbase {
            Some(t) => Some(TermBase::from_terms(t).map_err(|e| NerError::Corrupt(e.to_string()))?),
            None => None,
        };
        self.resources = FeatureResources { termbase, clusters: self.clusters.clone() };
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NerError> {
        let mut m: SequenceModel = serde_json::from_str(s)?;
        if m.version != MODEL_VERSION {
            return Err(NerError::Version(m.version));
        }
        m.prepare()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), NerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn feature_ids(&self, tokens: &[Token]) -> Vec<Vec<u32>> {
        FeatureExtractor::new(&self.resources, self.train_meta.features)
            .extract(tokens)
            .into_iter()
            .map(|fs| fs.iter().filter_map(|f| self.index.get(f).copied()).collect())
            .collect()
    }

    /// Per-token tag scores for `tokens`.
    pub fn emission_scores(&self, tokens: &[Token]) -> Vec<Vec<f64>> {
        let k = self.n_tags();
        emissions(&self.feature_ids(tokens), &self.feature_weights, k)
    }

    pub fn transitions(&self) -> Vec<Vec<f64>> {
        let k = self.n_tags();
        self.transition_weights.chunks(k).map(<[f64]>::to_vec).collect()
    }

    /// Viterbi tags for `tokens`.
    pub fn tag(&self, tokens: &[Token]) -> Vec<BioTag> {
        let (path, _) = viterbi(&self.emission_scores(tokens), &self.transitions(), &self.start_weights);
        path.into_iter().map(|i| self.tags[i]).collect()
    }

    pub fn tag_text(&self, text: &str) -> Vec<Span> {
        let tokens = tokenize(text);
        let tags = self.tag(&tokens);
        decode_bio(&tags, &tokens, Provenance::Silver).0
    }
}

fn emissions(feats: &[Vec<u32>], weights: &[f64], k: usize) -> Vec<Vec<f64>> {
    feats
        .iter()
        .map(|fs| {
            let mut row = vec![0.0; k];
            for &f in fs {
                let w = &weights[f as usize * k..(f as usize + 1) * k];
                row.iter_mut().zip(w).for_each(|(r, x)| *r += x);
            }
            row
        })
        .collect()
}

/// Silver spans for one unit. An empty sentence yields nothing.
pub fn decode(model: &SequenceModel, sentence: &AnnotatedSentence) -> Vec<SpanAnnotation> {
    let spans = model.tag_text(&sentence.text);
    AnnotatedSentence { spans, ..sentence.clone() }.annotations()
}

// ---------------------------------------------------------------------------
// Training

struct Instance {
    feats: Vec<Vec<u32>>,
    gold: Vec<usize>,
}

/// Regularized negative log-likelihood over a fixed feature alphabet.
///
/// Parameters are laid out as `[feature weights | transitions | start]`.
pub struct CrfObjective {
    instances: Vec<Instance>,
    n_features: usize,
    k: usize,
    l2: f64,
}

impl CrfObjective {
    pub fn n_params(&self) -> usize {
        self.n_features * self.k + self.k * self.k + self.k
    }

    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    fn split<'t>(&self, theta: &'t [f64]) -> (&'t [f64], Vec<Vec<f64>>, &'t [f64]) {
        let nf = self.n_features * self.k;
        let trans = theta[nf..nf + self.k * self.k].chunks(self.k).map(<[f64]>::to_vec).collect();
        (&theta[..nf], trans, &theta[nf + self.k * self.k..])
    }

    /// NLL of the selected instances plus `scale · l2/2 · ‖θ‖²`, accumulating
    /// the gradient into `grad`.
    fn accumulate(&self, theta: &[f64], which: &[usize], scale: f64, grad: &mut [f64]) -> f64 {
        let k = self.k;
        let nf = self.n_features * k;
        let (w, trans, start) = self.split(theta);
        let per: Vec<(f64, Vec<(usize, f64)>)> = which
            .par_iter()
            .map(|&i| {
                let inst = &self.instances[i];
                let em = emissions(&inst.feats, w, k);
                let fb = forward_backward(&em, &trans, start);
                let gold = path_score(&em, &trans, start, &inst.gold);
                let mut g: Vec<(usize, f64)> = Vec::new();
                let n = inst.gold.len();
                for t in 0..n {
                    let marg: Vec<f64> = (0..k).map(|y| (fb.alpha[t][y] + fb.beta[t][y] - fb.log_z).exp()).collect();
                    for &f in &inst.feats[t] {
                        for y in 0..k {
                            g.push((f as usize * k + y, marg[y]));
                        }
                        g.push((f as usize * k + inst.gold[t], -1.0));
                    }
                    if t == 0 {
                        for y in 0..k {
                            g.push((nf + k * k + y, marg[y]));
                        }
                        g.push((nf + k * k + inst.gold[0], -1.0));
                    } else {
                        for a in 0..k {
                            for b in 0..k {
                                let p = (fb.alpha[t - 1][a] + trans[a][b] + em[t][b] + fb.beta[t][b] - fb.log_z).exp();
                                g.push((nf + a * k + b, p));
                            }
                        }
                        g.push((nf + inst.gold[t - 1] * k + inst.gold[t], -1.0));
                    }
                }
                (fb.log_z - gold, g)
            })
            .collect();
        let mut loss = 0.0;
        for (l, g) in per {
            loss += l;
            for (i, v) in g {
                grad[i] += v;
            }
        }
        if self.l2 > 0.0 {
            let c = scale * self.l2;
            for (g, t) in grad.iter_mut().zip(theta) {
                *g += c * t;
            }
            loss += 0.5 * c * theta.iter().map(|t| t * t).sum::<f64>();
        }
        loss
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        self.gradient(theta).0
    }

    pub fn gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.n_params()];
        let all: Vec<usize> = (0..self.instances.len()).collect();
        let loss = self.accumulate(theta, &all, 1.0, &mut grad);
        (loss, grad)
    }
}

fn check_units(units: &[AnnotatedSentence], schema: &LabelSchema) -> Result<(), NerError> {
    for u in units {
        u.validate().map_err(|source| NerError::InvalidSpans {
            doc_id: u.doc_id.clone(),
            sent_id: u.sent_id,
            source,
        })?;
        if let Some(s) = u.spans.iter().find(|s| !schema.contains(s.label)) {
            return Err(NerError::LabelNotInSchema { label: s.label, doc_id: u.doc_id.clone(), sent_id: u.sent_id });
        }
    }
    Ok(())
}

/// Builds the feature alphabet from `train` and the objective over it.
/// Returns the untrained model shell alongside.
pub fn build_problem(
    train: &[AnnotatedSentence],
    schema: &LabelSchema,
    resources: &FeatureResources,
    cfg: &NerTrainConfig,
) -> Result<(CrfObjective, SequenceModel), NerError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NerError::EmptyTrainingSet);
    }
    check_units(train, schema)?;
    let tagset = TagSet::new(schema);
    let k = tagset.len();
    let extractor = FeatureExtractor::new(resources, cfg.features);
    let raw: Vec<(Vec<Vec<String>>, Vec<usize>)> = train
        .par_iter()
        .map(|u| {
            let tokens = u.tokens();
            let gold = encode_bio(&tokens, &u.spans)
                .into_iter()
                .map(|t| tagset.index(t).expect("label checked against schema"))
                .collect();
            (extractor.extract(&tokens), gold)
        })
        .collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (fs, _) in &raw {
        for f in fs.iter().flatten() {
            *counts.entry(f.as_str()).or_default() += 1;
        }
    }
    let features: Vec<String> =
        counts.into_iter().filter(|&(_, c)| c >= cfg.min_feature_count.max(1)).map(|(f, _)| f.to_string()).collect();
    let index: HashMap<String, u32> = features.iter().enumerate().map(|(i, f)| (f.clone(), i as u32)).collect();
    let instances = raw
        .into_iter()
        .filter(|(fs, _)| !fs.is_empty())
        .map(|(fs, gold)| Instance {
            feats: fs
                .iter()
                .map(|row| {
                    let mut ids: Vec<u32> = row.iter().filter_map(|f| index.get(f).copied()).collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                })
                .collect(),
            gold,
        })
        .collect();
    let objective = CrfObjective { instances, n_features: features.len(), k, l2: cfg.l2 };
    let termbase = resources
        .termbase
        .as_ref()
        .filter(|_| cfg.features.termbase)
        .map(|tb| tb.entries().iter().map(|(l, ps)| (*l, ps.iter().map(|p| p.join(" ")).collect())).collect());
    let clusters = resources.clusters.clone().filter(|_| cfg.features.clusters);
    let n = features.len();
    let model = SequenceModel {
        version: MODEL_VERSION,
        schema: schema.clone(),
        tags: tagset.tags.clone(),
        features,
        feature_weights: vec![0.0; n * k],
        transition_weights: vec![0.0; k * k],
        start_weights: vec![0.0; k],
        train_meta: TrainMeta {
            seed: cfg.seed,
            epochs: 0,
            best_epoch: 0,
            l2: cfg.l2,
            dev_macro_f1: None,
            features: cfg.features,
        },
        termbase,
        clusters,
        index,
        resources: FeatureResources::default(),
    };
    Ok((objective, model))
}

impl SequenceModel {
    /// Installs a flat parameter vector laid out as in [`CrfObjective`].
    pub fn set_params(&mut self, theta: &[f64]) {
        let k = self.n_tags();
        let nf = self.features.len() * k;
        self.feature_weights = theta[..nf].to_vec();
        self.transition_weights = theta[nf..nf + k * k].to_vec();
        self.start_weights = theta[nf + k * k..].to_vec();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dev_macro_f1: Option<f64>,
}

/// Minibatch AdaGrad on [`CrfObjective`] with a seeded shuffle per epoch.
/// When `dev` is non-empty, the weights with the best dev macro-F1 are kept
/// and training stops after `patience` epochs without improvement.
pub fn train_crf(
    train: &[AnnotatedSentence],
    dev: &[AnnotatedSentence],
    schema: &LabelSchema,
    resources: &FeatureResources,
    cfg: &NerTrainConfig,
) -> Result<(SequenceModel, Vec<EpochLog>), NerError> {
    check_units(dev, schema)?;
    let (objective, mut model) = build_problem(train, schema, resources, cfg)?;
    model.prepare()?;
    let p = objective.n_params();
    let mut theta = vec![0.0; p];
    let mut accum = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut order: Vec<usize> = (0..objective.n_instances()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = order.len().max(1) as f64;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            loss += objective.accumulate(&theta, batch, batch.len() as f64 / n, &mut grad);
            for ((t, g), a) in theta.iter_mut().zip(&grad).zip(accum.iter_mut()) {
                if *g != 0.0 {
                    *a += g * g;
                    *t -= cfg.learning_rate * g / (a.sqrt() + 1e-8);
                }
            }
        }
        let dev_f1 = if dev.is_empty() {
            None
        } else {
            model.set_params(&theta);
            Some(evaluate_ner(&model, dev).macro_avg.f1)
        };
        log::info!("ner epoch {epoch}: loss {loss:.4} dev macro-F1 {dev_f1:?}");
        log.push(EpochLog { epoch, loss, dev_macro_f1: dev_f1 });
        if let Some(f1) = dev_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, theta.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let epochs = log.len();
    let (dev_f1, best_epoch, params) = match best {
        Some((f1, e, t)) => (Some(f1), e, t),
        None => (None, epochs, theta),
    };
    model.set_params(&params);
    model.train_meta.epochs = epochs;
    model.train_meta.best_epoch = best_epoch;
    model.train_meta.dev_macro_f1 = dev_f1;
    if model.feature_weights.iter().any(|w| !w.is_finite()) {
        return Err(NerError::Corrupt("training produced non-finite weights".into()));
    }
    Ok((model, log))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    #[serde(flatten)]
    pub prf: Prf,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerReport {
    /// Labels seen in gold or predictions. Labels absent from both are
    /// omitted rather than scored.
    pub per_label: BTreeMap<Label, LabelScore>,
    pub micro: Prf,
    pub macro_avg: Prf,
}

type SpanKey = (String, usize, usize, usize, Label);

fn key(a: &SpanAnnotation) -> SpanKey {
    (a.doc_id.clone(), a.sent_id, a.start, a.end, a.label)
}

/// Exact-match span scoring on `(doc_id, sent_id, start, end, label)`.
pub fn evaluate_spans(gold: &[SpanAnnotation], predicted: &[SpanAnnotation]) -> NerReport {
    let gold: BTreeSet<SpanKey> = gold.iter().map(key).collect();
    let pred: BTreeSet<SpanKey> = predicted.iter().map(key).collect();
    let mut tallies: BTreeMap<Label, (usize, usize, usize)> = BTreeMap::new();
    for g in &gold {
        tallies.entry(g.4).or_default().0 += 1;
    }
    for p in &pred {
        let t = tallies.entry(p.4).or_default();
        t.1 += 1;
        if gold.contains(p) {
            t.2 += 1;
        }
    }
    let per_label: BTreeMap<Label, LabelScore> = tallies
        .into_iter()
        .map(|(l, (g, p, c))| {
            (l, LabelScore { prf: precision_recall_f1(c, p - c, g - c), gold: g, predicted: p, correct: c })
        })
        .collect();
    let (g, p, c) =
        per_label.values().fold((0, 0, 0), |acc, s| (acc.0 + s.gold, acc.1 + s.predicted, acc.2 + s.correct));
    let micro = precision_recall_f1(c, p - c, g - c);
    let macro_avg = if per_label.is_empty() {
        Prf { precision: 0.0, recall: 0.0, f1: 0.0, by_convention: true }
    } else {
        let m = per_label.len() as f64;
        Prf {
            precision: per_label.values().map(|s| s.prf.precision).sum::<f64>() / m,
            recall: per_label.values().map(|s| s.prf.recall).sum::<f64>() / m,
            f1: per_label.values().map(|s| s.prf.f1).sum::<f64>() / m,
            by_convention: per_label.values().any(|s| s.prf.by_convention),
        }
    };
    NerReport { per_label, micro, macro_avg }
}

pub fn evaluate_ner(model: &SequenceModel, test: &[AnnotatedSentence]) -> NerReport {
    let gold: Vec<SpanAnnotation> = test.iter().flat_map(AnnotatedSentence::annotations).collect();
    let pred: Vec<SpanAnnotation> = test.par_iter().flat_map_iter(|u| decode(model, u)).collect();
    evaluate_spans(&gold, &pred)
}

impl NerReport {
    /// Fixed-width table: one row per label, then micro and macro rows.
    /// Scores are percentages.
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<16} {:>8} {:>8} {:>8} {:>8}\n", "label", "P", "R", "F1", "support");
        let row = |name: &str, p: &Prf, support: usize| {
            format!(
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8}\n",
                name,
                p.precision * 100.0,
                p.recall * 100.0,
                p.f1 * 100.0,
                support
            )
        };
        let total: usize = self.per_label.values().map(|s| s.gold).sum();
        for (l, s) in &self.per_label {
            out.push_str(&row(l.as_str(), &s.prf, s.gold));
        }
        out.push_str(&row("micro", &self.micro, total));
        out.push_str(&row("macro", &self.macro_avg, total));
        out
    }
}
