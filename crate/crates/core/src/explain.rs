//! A differentiable case-outcome predictor over token embeddings and five
//! post-hoc per-token attribution methods.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::casebase::{InputMode, SEP};
use crate::embeddings::EmbeddingTable;
use crate::metrics::{binary_eval, BinaryEval, MetricsError};
use crate::textprep::tokenize;

pub const PREDICTOR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("training data must contain both classes (got {positives} positive of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("label {label} at row {row} is not 0 or 1")]
    NonBinaryLabel { row: usize, label: u8 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown attribution method {0:?}")]
    UnknownMethod(String),
    #[error("unsupported predictor version {0}")]
    Version(u32),
    #[error("predictor is inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How token vectors are combined into one case vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Softmax-weighted average, scores `a·e_i`.
    #[default]
    Attention,
    Mean,
    Sum,
}

/// Output link from the logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Logistic,
    /// Raw logit; only for analytic fixtures, not trainable.
    Identity,
}

/// Splits an input into predictor tokens, lowercased. `[SEP]` survives as a
/// token of its own.
pub fn predictor_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, part) in text.split(SEP).enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        out.extend(tokenize(part).into_iter().map(|t| t.text.to_lowercase()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorTrainConfig {
    pub dim: usize,
    pub pooling: Pooling,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Recorded so the model is always fed the text it was trained on.
    pub input_mode: InputMode,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            pooling: Pooling::Attention,
            epochs: 30,
            learning_rate: 0.1,
            l2: 1e-4,
            batch_size: 16,
            seed: 42,
            input_mode: InputMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub config: PredictorTrainConfig,
    pub n_train: usize,
    pub train_eval: Option<BinaryEval>,
    pub pretrained_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub version: u32,
    pub pooling: Pooling,
    pub link: Link,
    pub dim: usize,
    pub vocab: Vec<String>,
    /// Row-major, `vocab.len() × dim`.
    pub embeddings: Vec<f64>,
    pub attention: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: Option<PredictorMeta>,
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which output an attribution explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Granted,
    Denied,
    /// The raw model output under an identity link.
    Output,
}

impl Target {
    fn value(self, z: f64) -> f64 {
        match self {
            Target::Granted => sigmoid(z),
            Target::Denied => 1.0 - sigmoid(z),
            Target::Output => z,
        }
    }

    fn slope(self, z: f64) -> f64 {
        let s = sigmoid(z);
        match self {
            Target::Granted => s * (1.0 - s),
            Target::Denied => -s * (1.0 - s),
            Target::Output => 1.0,
        }
    }
}

impl PredictorModel {
    /// Builds a model from explicit parameters.
    pub fn from_parts(
        pooling: Pooling,
        link: Link,
        vocab: Vec<String>,
        embeddings: Vec<f64>,
        attention: Vec<f64>,
        weights: Vec<f64>,
        bias: f64,
    ) -> Result<Self, ExplainError> {
        let mut m = Self {
            version: PREDICTOR_VERSION,
            pooling,
            link,
            dim: weights.len(),
            vocab,
            embeddings,
            attention,
            weights,
            bias,
            meta: None,
            index: HashMap::new(),
        };
        m.prepare()?;
        Ok(m)
    }

    fn prepare(&mut self) -> Result<(), ExplainError> {
        if self.version != PREDICTOR_VERSION {
            return Err(ExplainError::Version(self.version));
        }
        let d = self.dim;
        if d == 0
            || self.weights.len() != d
            || self.attention.len() != d
            || self.embeddings.len() != self.vocab.len() * d
        {
            return Err(ExplainError::Corrupt("parameter shapes disagree with dim and vocabulary".into()));
        }
        self.index = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if self.index.len() != self.vocab.len() {
            return Err(ExplainError::Corrupt("duplicate vocabulary entry".into()));
        }
        Ok(())
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Known-token vectors of `tokens`; unknown tokens contribute nothing.
    fn vectors(&self, tokens: &[String]) -> Vec<Option<Vec<f64>>> {
        tokens.iter().map(|t| self.id(t).map(|i| self.vector(i).to_vec())).collect()
    }

    fn pool_weights(&self, vs: &[&[f64]]) -> Vec<f64> {
        let n = vs.len();
        match self.pooling {
            Pooling::Sum => vec![1.0; n],
            Pooling::Mean => vec![1.0 / n as f64; n],
            Pooling::Attention => {
                let s: Vec<f64> = vs.iter().map(|v| dot(&self.attention, v)).collect();
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                e.into_iter().map(|x| x / tot).collect()
            }
        }
    }

    /// Logit of a vector sequence. The empty sequence pools to zero.
    pub fn logit_vectors(&self, vs: &[&[f64]]) -> f64 {
        if vs.is_empty() {
            return self.bias;
        }
        let alpha = self.pool_weights(vs);
        self.bias + vs.iter().zip(&alpha).map(|(v, a)| a * dot(&self.weights, v)).sum::<f64>()
    }

    /// Logit and `∂z/∂v_i` for every vector.
    pub fn logit_grad_vectors(&self, vs: &[&[f64]]) -> (f64, Vec<Vec<f64>>) {
        if vs.is_empty() {
            return (self.bias, Vec::new());
        }
        let alpha = self.pool_weights(vs);
        let u: Vec<f64> = vs.iter().map(|v| dot(&self.weights, v)).collect();
        let uh: f64 = alpha.iter().zip(&u).map(|(a, x)| a * x).sum();
        let grads = (0..vs.len())
            .map(|i| {
                let mut g: Vec<f64> = self.weights.iter().map(|w| alpha[i] * w).collect();
                if self.pooling == Pooling::Attention {
                    let k = alpha[i] * (u[i] - uh);
                    for (gd, ad) in g.iter_mut().zip(&self.attention) {
                        *gd += k * ad;
                    }
                }
                g
            })
            .collect();
        (self.bias + uh, grads)
    }

    pub fn logit(&self, text: &str) -> f64 {
        let vs = self.vectors(&predictor_tokens(text));
        let refs: Vec<&[f64]> = vs.iter().flatten().map(Vec::as_slice).collect();
        self.logit_vectors(&refs)
    }

    /// Probability of a granted outcome (the raw output under an identity link).
    pub fn predict(&self, text: &str) -> f64 {
        let z = self.logit(text);
        match self.link {
            Link::Logistic => sigmoid(z),
            Link::Identity => z,
        }
    }

    /// The text representation the model was trained on.
    pub fn input_mode(&self) -> InputMode {
        self.meta.as_ref().map_or_else(InputMode::default, |m| m.config.input_mode)
    }

    /// The output attributions explain: the predicted class probability, or
    /// the raw output under an identity link.
    pub fn target_for(&self, z: f64) -> Target {
        match self.link {
            Link::Identity => Target::Output,
            Link::Logistic if sigmoid(z) >= 0.5 => Target::Granted,
            Link::Logistic => Target::Denied,
        }
    }

    pub fn evaluate(&self, labeled: &[(String, u8)]) -> Result<BinaryEval, ExplainError> {
        let truth: Vec<u8> = labeled.iter().map(|(_, y)| *y).collect();
        let pred: Vec<u8> = labeled.par_iter().map(|(t, _)| u8::from(self.predict(t) >= 0.5)).collect();
        Ok(binary_eval(&truth, &pred)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("predictor serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ExplainError> {
        let mut m: Self = serde_json::from_str(s)?;
        m.prepare()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), ExplainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExplainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Trains the predictor by minibatch AdaGrad on mean log loss plus
/// `l2/2·‖θ‖²` (bias excluded). Vectors of words found in `pretrained`
/// start from their pretrained values.
pub fn train_predictor(
    labeled: &[(String, u8)],
    cfg: &PredictorTrainConfig,
    pretrained: Option<&EmbeddingTable>,
) -> Result<PredictorModel, ExplainError> {
    if cfg.dim == 0 || cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.l2 >= 0.0) {
        return Err(ExplainError::Config(format!("{cfg:?}")));
    }
    if let Some((row, (_, label))) = labeled.iter().enumerate().find(|(_, (_, y))| *y > 1) {
        return Err(ExplainError::NonBinaryLabel { row, label: *label });
    }
    let positives = labeled.iter().filter(|(_, y)| *y == 1).count();
    if positives == 0 || positives == labeled.len() {
        return Err(ExplainError::SingleClass { positives, total: labeled.len() });
    }
    if let Some(t) = pretrained {
        if t.dim != cfg.dim {
            return Err(ExplainError::Config(format!("pretrained dim {} != {}", t.dim, cfg.dim)));
        }
    }
    let docs: Vec<Vec<String>> = labeled.iter().map(|(t, _)| predictor_tokens(t)).collect();
    let mut vocab: Vec<String> = docs.iter().flatten().cloned().collect();
    vocab.sort();
    vocab.dedup();

    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut embeddings = Vec::with_capacity(vocab.len() * d);
    let mut pretrained_rows = 0;
    for w in &vocab {
        match pretrained.and_then(|t| t.get(w)) {
            Some(v) => {
                embeddings.extend_from_slice(v);
                pretrained_rows += 1;
            }
            None => embeddings.extend((0..d).map(|_| (rng.random::<f64>() - 0.5) * 0.2)),
        }
    }
    let mut m =
        PredictorModel::from_parts(cfg.pooling, Link::Logistic, vocab, embeddings, vec![0.0; d], vec![0.0; d], 0.0)?;
    let ids: Vec<Vec<usize>> = docs.iter().map(|toks| toks.iter().map(|t| m.index[t]).collect()).collect();

    let eps = 1e-8;
    let mut acc_e = vec![0.0; m.embeddings.len()];
    let mut acc_a = vec![0.0; d];
    let mut acc_w = vec![0.0; d];
    let mut acc_b = 0.0;
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut g_e: HashMap<usize, Vec<f64>> = HashMap::new();
            let mut g_a = vec![0.0; d];
            let mut g_w = vec![0.0; d];
            let mut g_b = 0.0;
            for &r in batch {
                let vs: Vec<&[f64]> = ids[r].iter().map(|&i| m.vector(i)).collect();
                let (z, dz_dv) = m.logit_grad_vectors(&vs);
                let err = (sigmoid(z) - f64::from(labeled[r].1)) * scale;
                g_b += err;
                if vs.is_empty() {
                    continue;
                }
                let alpha = m.pool_weights(&vs);
                let u: Vec<f64> = vs.iter().map(|v| dot(&m.weights, v)).collect();
                let uh: f64 = alpha.iter().zip(&u).map(|(a, x)| a * x).sum();
                for (k, v) in vs.iter().enumerate() {
                    for j in 0..d {
                        g_w[j] += err * alpha[k] * v[j];
                        if m.pooling == Pooling::Attention {
                            g_a[j] += err * alpha[k] * (u[k] - uh) * v[j];
                        }
                    }
                }
                for (k, &i) in ids[r].iter().enumerate() {
                    let row = g_e.entry(i).or_insert_with(|| vec![0.0; d]);
                    for j in 0..d {
                        row[j] += err * dz_dv[k][j];
                    }
                }
            }
            let mut keys: Vec<usize> = g_e.keys().copied().collect();
            keys.sort_unstable();
            for i in keys {
                let row = &g_e[&i];
                for j in 0..d {
                    let p = i * d + j;
                    let g = row[j] + cfg.l2 * m.embeddings[p];
                    acc_e[p] += g * g;
                    m.embeddings[p] -= cfg.learning_rate * g / (acc_e[p].sqrt() + eps);
                }
            }
            for j in 0..d {
                let g = g_w[j] + cfg.l2 * m.weights[j];
                acc_w[j] += g * g;
                m.weights[j] -= cfg.learning_rate * g / (acc_w[j].sqrt() + eps);
                if m.pooling == Pooling::Attention {
                    let g = g_a[j] + cfg.l2 * m.attention[j];
                    acc_a[j] += g * g;
                    m.attention[j] -= cfg.learning_rate * g / (acc_a[j].sqrt() + eps);
                }
            }
            acc_b += g_b * g_b;
            m.bias -= cfg.learning_rate * g_b / (acc_b.sqrt() + eps);
        }
    }
    let train_eval = m.evaluate(labeled).ok();
    m.meta = Some(PredictorMeta { config: cfg.clone(), n_train: labeled.len(), train_eval, pretrained_rows });
    Ok(m)
}

// ---------------------------------------------------------------------------
// Attributions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PartitionShap,
    Lime,
    Gradient,
    GradientXInput,
    IntegratedGradients,
}

impl Method {
    /// Table row order.
    pub const ALL: [Method; 5] =
        [Method::PartitionShap, Method::Lime, Method::Gradient, Method::GradientXInput, Method::IntegratedGradients];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PartitionShap => "partition_shap",
            Method::Lime => "lime",
            Method::Gradient => "gradient",
            Method::GradientXInput => "gradient_x_input",
            Method::IntegratedGradients => "integrated_gradients",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::PartitionShap => "Partition SHAP",
            Method::Lime => "LIME",
            Method::Gradient => "Gradient",
            Method::GradientXInput => "Gradient x Input",
            Method::IntegratedGradients => "Integrated gradient",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ExplainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| ExplainError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub lime_samples: usize,
    /// Width of the exponential kernel over cosine distance to the full mask.
    pub lime_kernel_width: f64,
    pub lime_ridge: f64,
    pub ig_steps: usize,
    /// Cap on coalition contexts per partition node; the tree is exact while
    /// the cap is not reached (inputs up to 16 tokens with the default).
    pub shap_max_contexts: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            lime_samples: 1000,
            lime_kernel_width: 1.0,
            lime_ridge: 0.01,
            ig_steps: 200,
            shap_max_contexts: 16,
            seed: 42,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<(), ExplainError> {
        let mut bad = Vec::new();
        if self.lime_samples < 100 {
            bad.push(format!("lime_samples {} < 100", self.lime_samples));
        }
        if self.ig_steps < 20 {
            bad.push(format!("ig_steps {} < 20", self.ig_steps));
        }
        if !(self.lime_kernel_width > 0.0) {
            bad.push("lime_kernel_width must be positive".into());
        }
        if !(self.lime_ridge > 0.0) {
            bad.push("lime_ridge must be positive".into());
        }
        if self.shap_max_contexts == 0 {
            bad.push("shap_max_contexts must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ExplainError::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub target: Target,
    pub samples: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub exact: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub tokens: Vec<String>,
    pub method: Method,
    pub weights: Vec<f64>,
    pub meta: AttributionMeta,
}

/// An input prepared for attribution: tokens, their vectors, and the
/// per-token scalars that make masked evaluation cheap.
struct Prepared<'a> {
    model: &'a PredictorModel,
    tokens: Vec<String>,
    vectors: Vec<Option<Vec<f64>>>,
    score: Vec<f64>,
    value: Vec<f64>,
    target: Target,
}

impl<'a> Prepared<'a> {
    fn new(model: &'a PredictorModel, input: &str) -> Self {
        let tokens = predictor_tokens(input);
        let vectors = model.vectors(&tokens);
        let score = vectors.iter().map(|v| v.as_ref().map_or(0.0, |v| dot(&model.attention, v))).collect();
        let value = vectors.iter().map(|v| v.as_ref().map_or(0.0, |v| dot(&model.weights, v))).collect();
        let refs: Vec<&[f64]> = vectors.iter().flatten().map(Vec::as_slice).collect();
        let target = model.target_for(model.logit_vectors(&refs));
        Self { model, tokens, vectors, score, value, target }
    }

    fn n(&self) -> usize {
        self.tokens.len()
    }

    /// Target output with only the kept tokens present.
    fn masked(&self, keep: &[bool]) -> f64 {
        let m = self.model;
        let idx: Vec<usize> = (0..self.n()).filter(|&i| keep[i] && self.vectors[i].is_some()).collect();
        let z = if idx.is_empty() {
            m.bias
        } else {
            match m.pooling {
                Pooling::Sum => m.bias + idx.iter().map(|&i| self.value[i]).sum::<f64>(),
                Pooling::Mean => m.bias + idx.iter().map(|&i| self.value[i]).sum::<f64>() / idx.len() as f64,
                Pooling::Attention => {
                    let mx = idx.iter().map(|&i| self.score[i]).fold(f64::NEG_INFINITY, f64::max);
                    let (mut num, mut den) = (0.0, 0.0);
                    for &i in &idx {
                        let e = (self.score[i] - mx).exp();
                        num += e * self.value[i];
                        den += e;
                    }
                    m.bias + num / den
                }
            }
        };
        self.target.value(z)
    }

    /// Target output and its gradient for the given vectors (None = unknown).
    fn grad_at(&self, vectors: &[Option<Vec<f64>>]) -> (f64, Vec<Option<Vec<f64>>>) {
        let refs: Vec<&[f64]> = vectors.iter().flatten().map(Vec::as_slice).collect();
        let (z, g) = self.model.logit_grad_vectors(&refs);
        let slope = self.target.slope(z);
        let mut it = g.into_iter();
        let grads = vectors
            .iter()
            .map(|v| {
                v.as_ref().map(|_| it.next().expect("one gradient per vector").into_iter().map(|x| x * slope).collect())
            })
            .collect();
        (self.target.value(z), grads)
    }

    fn finish(self, method: Method, weights: Vec<f64>, meta: AttributionMeta) -> AttributionVector {
        AttributionVector { tokens: self.tokens, method, weights, meta }
    }

    fn meta(&self) -> AttributionMeta {
        AttributionMeta { target: self.target, samples: None, steps: None, seed: None, exact: None }
    }
}

/// L2 norm of the target gradient with respect to each token vector.
pub fn attrib_gradient(model: &PredictorModel, input: &str) -> AttributionVector {
    let p = Prepared::new(model, input);
    let (_, grads) = p.grad_at(&p.vectors);
    let weights = grads.iter().map(|g| g.as_ref().map_or(0.0, |g| dot(g, g).sqrt())).collect();
    let meta = p.meta();
    p.finish(Method::Gradient, weights, meta)
}

/// Target gradient dotted with each token vector.
pub fn attrib_grad_input(model: &PredictorModel, input: &str) -> AttributionVector {
    let p = Prepared::new(model, input);
    let (_, grads) = p.grad_at(&p.vectors);
    let weights = grads
        .iter()
        .zip(&p.vectors)
        .map(|(g, v)| match (g, v) {
            (Some(g), Some(v)) => dot(g, v),
            _ => 0.0,
        })
        .collect();
    let meta = p.meta();
    p.finish(Method::GradientXInput, weights, meta)
}

/// Path integral of the target gradient from the all-zero sequence to the
/// input, midpoint rule.
pub fn attrib_integrated_gradients(model: &PredictorModel, input: &str, cfg: &ExplainConfig) -> AttributionVector {
    let p = Prepared::new(model, input);
    let steps = cfg.ig_steps.max(1);
    let mut total: Vec<Vec<f64>> = p.vectors.iter().map(|v| vec![0.0; v.as_ref().map_or(0, Vec::len)]).collect();
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let scaled: Vec<Option<Vec<f64>>> =
            p.vectors.iter().map(|v| v.as_ref().map(|v| v.iter().map(|x| x * t).collect())).collect();
        let (_, grads) = p.grad_at(&scaled);
        for (acc, g) in total.iter_mut().zip(&grads) {
            if let Some(g) = g {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
    }
    let weights =
        total.iter().zip(&p.vectors).map(|(g, v)| v.as_ref().map_or(0.0, |v| dot(g, v) / steps as f64)).collect();
    let mut meta = p.meta();
    meta.steps = Some(steps);
    p.finish(Method::IntegratedGradients, weights, meta)
}

/// Local surrogate: kernel-weighted ridge regression of the target on binary
/// token-presence masks, masked tokens removed before pooling.
pub fn attrib_lime(model: &PredictorModel, input: &str, cfg: &ExplainConfig) -> AttributionVector {
    let p = Prepared::new(model, input);
    let n = p.n();
    let mut meta = p.meta();
    meta.samples = Some(cfg.lime_samples);
    meta.seed = Some(cfg.seed);
    if n == 0 {
        return p.finish(Method::Lime, Vec::new(), meta);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut positions: Vec<usize> = (0..n).collect();
    let masks: Vec<Vec<bool>> = (0..cfg.lime_samples.max(1))
        .map(|s| {
            let mut keep = vec![true; n];
            if s > 0 {
                let removed = rng.random_range(1..=n);
                positions.shuffle(&mut rng);
                for &i in &positions[..removed] {
                    keep[i] = false;
                }
            }
            keep
        })
        .collect();
    let ys: Vec<f64> = masks.par_iter().map(|k| p.masked(k)).collect();

    // Columns: intercept then one per token; the intercept is not penalized.
    let cols = n + 1;
    let mut xtwx = DMatrix::<f64>::zeros(cols, cols);
    let mut xtwy = DVector::<f64>::zeros(cols);
    for (keep, y) in masks.iter().zip(&ys) {
        let on = keep.iter().filter(|&&b| b).count();
        let distance = if on == 0 { 1.0 } else { 1.0 - (on as f64 / n as f64).sqrt() };
        let w = (-(distance * distance) / (cfg.lime_kernel_width * cfg.lime_kernel_width)).exp();
        let x: Vec<f64> = std::iter::once(1.0).chain(keep.iter().map(|&b| f64::from(u8::from(b)))).collect();
        for a in 0..cols {
            if x[a] == 0.0 {
                continue;
            }
            xtwy[a] += w * x[a] * y;
            for b in 0..cols {
                xtwx[(a, b)] += w * x[a] * x[b];
            }
        }
    }
    for a in 1..cols {
        xtwx[(a, a)] += cfg.lime_ridge;
    }
    let beta = xtwx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xtwy))
        .or_else(|| xtwx.lu().solve(&xtwy))
        .unwrap_or_else(|| DVector::zeros(cols));
    let weights = beta.iter().skip(1).copied().collect();
    p.finish(Method::Lime, weights, meta)
}

/// Owen values over the recursive-halving partition of the token sequence,
/// masked tokens removed. Sibling groups enter as wholes, each present or
/// absent with equal weight; past `shap_max_contexts` contexts a node keeps
/// its parent's contexts and is shifted so children still sum to it.
pub fn attrib_partition_shap(model: &PredictorModel, input: &str, cfg: &ExplainConfig) -> AttributionVector {
    let p = Prepared::new(model, input);
    let n = p.n();
    let mut weights = vec![0.0; n];
    let mut exact = true;
    if n > 0 {
        let full = p.masked(&vec![true; n]);
        let empty = p.masked(&vec![false; n]);
        owen(&p, 0, n, vec![vec![false; n]], full - empty, cfg.shap_max_contexts, &mut weights, &mut exact);
    }
    let mut meta = p.meta();
    meta.exact = Some(exact);
    p.finish(Method::PartitionShap, weights, meta)
}

#[allow(clippy::too_many_arguments)]
fn owen(
    p: &Prepared,
    lo: usize,
    hi: usize,
    contexts: Vec<Vec<bool>>,
    value: f64,
    max_contexts: usize,
    out: &mut [f64],
    exact: &mut bool,
) {
    if hi - lo == 1 {
        out[lo] = value;
        return;
    }
    let mid = lo + (hi - lo) / 2;
    let with = |c: &[bool], a: usize, b: usize| {
        let mut m = c.to_vec();
        m[a..b].iter_mut().for_each(|x| *x = true);
        m
    };
    let (mut v_left, mut v_right) = (0.0, 0.0);
    for c in &contexts {
        let f0 = p.masked(c);
        let fl = p.masked(&with(c, lo, mid));
        let fr = p.masked(&with(c, mid, hi));
        let flr = p.masked(&with(c, lo, hi));
        v_left += 0.5 * ((fl - f0) + (flr - fr));
        v_right += 0.5 * ((fr - f0) + (flr - fl));
    }
    let k = contexts.len() as f64;
    v_left /= k;
    v_right /= k;
    let gap = value - (v_left + v_right);
    v_left += gap / 2.0;
    v_right += gap / 2.0;

    let split = contexts.len() * 2 <= max_contexts;
    let (left_ctx, right_ctx) = if split {
        let l = contexts.iter().cloned().chain(contexts.iter().map(|c| with(c, mid, hi))).collect();
        let r = contexts.iter().cloned().chain(contexts.iter().map(|c| with(c, lo, mid))).collect();
        (l, r)
    } else {
        if mid - lo > 1 || hi - mid > 1 {
            *exact = false;
        }
        (contexts.clone(), contexts)
    };
    owen(p, lo, mid, left_ctx, v_left, max_contexts, out, exact);
    owen(p, mid, hi, right_ctx, v_right, max_contexts, out, exact);
}

pub fn attribute(model: &PredictorModel, input: &str, method: Method, cfg: &ExplainConfig) -> AttributionVector {
    match method {
        Method::PartitionShap => attrib_partition_shap(model, input, cfg),
        Method::Lime => attrib_lime(model, input, cfg),
        Method::Gradient => attrib_gradient(model, input),
        Method::GradientXInput => attrib_grad_input(model, input),
        Method::IntegratedGradients => attrib_integrated_gradients(model, input, cfg),
    }
}

// ---------------------------------------------------------------------------
// Table

pub const TABLE_DECIMALS: usize = 6;

fn round_to(x: f64, decimals: usize) -> f64 {
    format!("{x:.decimals$}").parse().expect("formatted float parses")
}

/// Methods as rows, tokens as columns, values rounded for display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTable {
    pub tokens: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub name: String,
    pub weights: Vec<f64>,
}

pub fn attribution_table(
    model: &PredictorModel,
    input: &str,
    methods: &[Method],
    cfg: &ExplainConfig,
) -> Result<AttributionTable, ExplainError> {
    cfg.validate()?;
    let rows = methods
        .par_iter()
        .map(|&m| {
            let a = attribute(model, input, m, cfg);
            TableRow {
                method: m,
                name: m.display_name().to_string(),
                weights: a.weights.iter().map(|&w| round_to(w, TABLE_DECIMALS)).collect(),
            }
        })
        .collect();
    Ok(AttributionTable { tokens: predictor_tokens(input), rows })
}

impl AttributionTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> =
            std::iter::once(std::iter::once("Token".to_string()).chain(self.tokens.iter().cloned()).collect())
                .chain(self.rows.iter().map(|r| {
                    std::iter::once(r.name.clone())
                        .chain(r.weights.iter().map(|w| format!("{w:.TABLE_DECIMALS$}")))
                        .collect()
                }))
                .collect();
        let cols = self.tokens.len() + 1;
        let widths: Vec<usize> =
            (0..cols).map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (r, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(
                    |(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) },
                )
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if r == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
            }
        }
        out
    }
}
