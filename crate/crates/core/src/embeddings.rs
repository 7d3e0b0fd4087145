//! Static word vectors: co-occurrence counting, the weighted least-squares
//! objective with an optional pull toward pre-existing vectors, and the
//! lookups built on top (neighbors, clusters).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became non-finite ({loss}) at epoch {epoch}; learning rate {learning_rate} is too high")]
    Diverged { epoch: usize, loss: f64, learning_rate: f64 },
    #[error("word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("initial vectors have dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Symmetric, distance-weighted co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    pub vocab: Vec<String>,
    /// Corpus frequency of each vocabulary word.
    pub frequencies: Vec<usize>,
    pub counts: BTreeMap<(usize, usize), f64>,
    pub window: usize,
    pub min_count: usize,
}

impl CooccurrenceMatrix {
    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.vocab.iter().position(|w| w == word)
    }

    pub fn get(&self, a: &str, b: &str) -> f64 {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.counts.get(&(i, j)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }
}

/// Every pair of in-vocabulary tokens `d ≤ window` positions apart inside one
/// sequence adds `1/d` to both `(i, j)` and `(j, i)`. Distances are measured
/// in the original token stream, so rare words still occupy a position.
/// The vocabulary is ordered by descending frequency, then lexicographically.
pub fn build_cooccurrence(
    sequences: &[Vec<String>],
    window: usize,
    min_count: usize,
) -> Result<CooccurrenceMatrix, EmbeddingError> {
    if window == 0 {
        return Err(EmbeddingError::ZeroWindow);
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for w in seq {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();

    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for seq in sequences {
        let ids: Vec<Option<usize>> = seq.iter().map(|w| index.get(w.as_str()).copied()).collect();
        for (p, a) in ids.iter().enumerate() {
            let Some(a) = *a else { continue };
            for d in 1..=window {
                let Some(Some(b)) = ids.get(p + d) else { continue };
                let inc = 1.0 / d as f64;
                *counts.entry((a, *b)).or_default() += inc;
                *counts.entry((*b, a)).or_default() += inc;
            }
        }
    }
    Ok(CooccurrenceMatrix {
        vocab: vocab.iter().map(|(w, _)| w.to_string()).collect(),
        frequencies: vocab.iter().map(|(_, c)| *c).collect(),
        counts,
        window,
        min_count,
    })
}

/// Word → dense vector, all of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    words: Vec<String>,
    vectors: Vec<f64>,
    bias: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, words: Vec::new(), vectors: Vec::new(), bias: Vec::new(), index: HashMap::new() }
    }

    /// Inserts or replaces a word.
    pub fn insert(&mut self, word: &str, vector: &[f64], bias: f64) -> Result<(), EmbeddingError> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch { expected: self.dim, found: vector.len() });
        }
        if let Some(&i) = self.index.get(word) {
            self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector);
            self.bias[i] = bias;
        } else {
            self.index.insert(word.to_string(), self.words.len());
            self.words.push(word.to_string());
            self.vectors.extend_from_slice(vector);
            self.bias.push(bias);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.row(i))
    }

    pub fn bias(&self, word: &str) -> Option<f64> {
        self.index.get(word).map(|&i| self.bias[i])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    /// One line per word: the word, then `dim` space-separated floats.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(w);
            for v in self.row(i) {
                write!(out, " {v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text format. A leading `<count> <dim>` header line, as
    /// written by some tools, is accepted and skipped.
    pub fn from_text(text: &str) -> Result<Self, EmbeddingError> {
        let mut table: Option<Self> = None;
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            if n == 0 && parts.len() == 2 && parts.iter().all(|p| p.parse::<usize>().is_ok()) {
                continue;
            }
            let values = parts[1..]
                .iter()
                .map(|p| p.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Format { line: n + 1, message: e.to_string() })?;
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            if values.len() != t.dim || values.is_empty() {
                return Err(EmbeddingError::Format {
                    line: n + 1,
                    message: format!("expected {} values, found {}", t.dim, values.len()),
                });
            }
            t.insert(parts[0], &values, 0.0)?;
        }
        Ok(table.unwrap_or_else(|| Self::new(0)))
    }

    pub fn read_text(path: &Path) -> Result<Self, EmbeddingError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn write_text(&self, path: &Path) -> Result<(), EmbeddingError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub dim: usize,
    pub x_max: f64,
    pub alpha: f64,
    /// Strength of the pull toward initial vectors; 0 disables it.
    pub mu: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub window: usize,
    pub min_count: usize,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            x_max: 100.0,
            alpha: 0.75,
            mu: 0.0,
            epochs: 100,
            learning_rate: 0.05,
            seed: 42,
            window: 5,
            min_count: 5,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |m: &str| Err(EmbeddingError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.mu >= 0.0) {
            return bad("mu must be non-negative");
        }
        if !(self.x_max > 0.0) {
            return bad("x_max must be positive");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        Ok(())
    }
}

/// Word vectors `w`, context vectors `c` and their biases, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GloveParams {
    pub dim: usize,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub bw: Vec<f64>,
    pub bc: Vec<f64>,
}

impl GloveParams {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self { dim, w: vec![0.0; n * dim], c: vec![0.0; n * dim], bw: vec![0.0; n], bc: vec![0.0; n] }
    }

    /// Flat view of every parameter, for optimizers and finite differences.
    pub fn as_slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w, &mut self.c, &mut self.bw, &mut self.bc]
    }

    pub fn as_slices(&self) -> [&Vec<f64>; 4] {
        [&self.w, &self.c, &self.bw, &self.bc]
    }

    /// Word vector plus context vector.
    pub fn combined(&self, i: usize) -> Vec<f64> {
        let d = self.dim;
        (0..d).map(|k| self.w[i * d + k] + self.c[i * d + k]).collect()
    }
}

/// `J = Σ f(X_ij)(w_i·c_j + b_i + b̃_j − log X_ij)² + μ Σ_{i∈R} ‖w_i + c_i − r_i‖²`
/// with `f(x) = min(1, (x/x_max)^α)`.
pub struct GloveObjective {
    entries: Vec<(usize, usize, f64, f64)>,
    anchors: Vec<Option<Vec<f64>>>,
    mu: f64,
    dim: usize,
}

impl GloveObjective {
    pub fn new(
        cooc: &CooccurrenceMatrix,
        init: Option<&EmbeddingTable>,
        cfg: &EmbedTrainConfig,
    ) -> Result<Self, EmbeddingError> {
        if let Some(t) = init {
            if t.dim != cfg.dim && !t.is_empty() {
                return Err(EmbeddingError::DimensionMismatch { expected: cfg.dim, found: t.dim });
            }
        }
        let entries = cooc
            .counts
            .iter()
            .map(|(&(i, j), &x)| {
                let weight = (x / cfg.x_max).powf(cfg.alpha).min(1.0);
                (i, j, x.ln(), weight)
            })
            .collect();
        let anchors = cooc.vocab.iter().map(|w| init.and_then(|t| t.get(w)).map(<[f64]>::to_vec)).collect();
        Ok(Self { entries, anchors, mu: cfg.mu, dim: cfg.dim })
    }

    pub fn n_words(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchor(&self, i: usize) -> Option<&[f64]> {
        self.anchors[i].as_deref()
    }

    pub fn loss(&self, p: &GloveParams) -> f64 {
        self.evaluate(p, None)
    }

    /// Loss and its gradient.
    pub fn gradient(&self, p: &GloveParams) -> (f64, GloveParams) {
        let mut g = GloveParams::zeros(self.n_words(), self.dim);
        let loss = self.evaluate(p, Some(&mut g));
        (loss, g)
    }

    fn evaluate(&self, p: &GloveParams, mut grad: Option<&mut GloveParams>) -> f64 {
        let d = self.dim;
        let mut loss = 0.0;
        for &(i, j, log_x, weight) in &self.entries {
            let wi = &p.w[i * d..(i + 1) * d];
            let cj = &p.c[j * d..(j + 1) * d];
            let dot: f64 = wi.iter().zip(cj).map(|(a, b)| a * b).sum();
            let diff = dot + p.bw[i] + p.bc[j] - log_x;
            loss += weight * diff * diff;
            if let Some(g) = grad.as_deref_mut() {
                let s = 2.0 * weight * diff;
                for k in 0..d {
                    g.w[i * d + k] += s * cj[k];
                    g.c[j * d + k] += s * wi[k];
                }
                g.bw[i] += s;
                g.bc[j] += s;
            }
        }
        if self.mu > 0.0 {
            for (i, anchor) in self.anchors.iter().enumerate() {
                let Some(r) = anchor else { continue };
                for k in 0..d {
                    let delta = p.w[i * d + k] + p.c[i * d + k] - r[k];
                    loss += self.mu * delta * delta;
                    if let Some(g) = grad.as_deref_mut() {
                        g.w[i * d + k] += 2.0 * self.mu * delta;
                        g.c[i * d + k] += 2.0 * self.mu * delta;
                    }
                }
            }
        }
        loss
    }
}

/// Seeded starting point. Random draws are made for every word before any
/// initial vector is applied, so the draw sequence never depends on `init`.
pub fn init_params(cooc: &CooccurrenceMatrix, init: Option<&EmbeddingTable>, cfg: &EmbedTrainConfig) -> GloveParams {
    let n = cooc.vocab.len();
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = GloveParams::zeros(n, d);
    let scale = 1.0 / d as f64;
    for v in p.w.iter_mut().chain(p.c.iter_mut()) {
        *v = (rng.random::<f64>() - 0.5) * scale;
    }
    if let Some(t) = init {
        for (i, word) in cooc.vocab.iter().enumerate() {
            if let Some(r) = t.get(word) {
                for k in 0..d {
                    p.w[i * d + k] = r[k] / 2.0;
                    p.c[i * d + k] = r[k] / 2.0;
                }
            }
        }
    }
    p
}

#[derive(Debug, Clone)]
pub struct TrainedEmbeddings {
    pub table: EmbeddingTable,
    /// Loss at initialization followed by the loss after each epoch.
    pub loss_history: Vec<f64>,
    pub params: GloveParams,
}

/// Full-batch AdaGrad on [`GloveObjective`]. Accumulators start at 1, as in
/// the reference GloVe trainer. Output vectors are `w_i + c_i`.
pub fn train_embeddings(
    cooc: &CooccurrenceMatrix,
    init: Option<&EmbeddingTable>,
    cfg: &EmbedTrainConfig,
) -> Result<TrainedEmbeddings, EmbeddingError> {
    cfg.validate()?;
    let objective = GloveObjective::new(cooc, init, cfg)?;
    let mut params = init_params(cooc, init, cfg);
    let mut accum = GloveParams::zeros(cooc.vocab.len(), cfg.dim);
    for v in accum.as_slices_mut() {
        v.iter_mut().for_each(|a| *a = 1.0);
    }
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (loss, grad) = objective.gradient(&params);
        if !loss.is_finite() {
            return Err(EmbeddingError::Diverged { epoch, loss, learning_rate: cfg.learning_rate });
        }
        history.push(loss);
        if epoch == cfg.epochs {
            break;
        }
        for ((p, g), a) in params.as_slices_mut().into_iter().zip(grad.as_slices()).zip(accum.as_slices_mut()) {
            for k in 0..p.len() {
                a[k] += g[k] * g[k];
                p[k] -= cfg.learning_rate * g[k] / a[k].sqrt();
            }
        }
    }
    let mut table = EmbeddingTable::new(cfg.dim);
    for (i, word) in cooc.vocab.iter().enumerate() {
        table.insert(word, &params.combined(i), params.bw[i] + params.bc[i])?;
    }
    Ok(TrainedEmbeddings { table, loss_history: history, params })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Top-`k` words by cosine similarity, excluding the query. Ties are broken
/// lexicographically.
pub fn nearest_neighbors(table: &EmbeddingTable, query: &str, k: usize) -> Result<Vec<(String, f64)>, EmbeddingError> {
    if k == 0 {
        return Err(EmbeddingError::ZeroK);
    }
    let q = table.get(query).ok_or_else(|| EmbeddingError::OutOfVocabulary(query.to_string()))?;
    let mut scored: Vec<(String, f64)> = table
        .words()
        .iter()
        .enumerate()
        .filter(|(_, w)| w.as_str() != query)
        .map(|(i, w)| (w.clone(), cosine(q, table.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Seeded k-means (k-means++ start, Lloyd iterations) over unit-normalized
/// vectors. Returns each word's cluster id.
pub fn kmeans_clusters(table: &EmbeddingTable, k: usize, seed: u64, max_iter: usize) -> BTreeMap<String, u32> {
    let n = table.len();
    let d = table.dim;
    if n == 0 || k == 0 {
        return BTreeMap::new();
    }
    let k = k.min(n);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = table.row(i);
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|x| x / norm).collect()
            } else {
                r.to_vec()
            }
        })
        .collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().expect("just pushed");
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist2(p, c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k).min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b]))).expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut sizes = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            sizes[assign[i]] += 1;
            for (s, x) in sums[assign[i]].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            }
        }
    }
    table.words().iter().zip(assign).map(|(w, a)| (w.clone(), a as u32)).collect()
}
