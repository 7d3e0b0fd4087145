//! Declarative pipeline configuration: one TOML file plus flag overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use rsdcase_core::embeddings::EmbedTrainConfig;
use rsdcase_core::explain::{ExplainConfig, PredictorTrainConfig};
use rsdcase_core::ner::NerTrainConfig;
use rsdcase_core::outcome::OutcomeTrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sections whose core config carries its own seed; seeds live in `[seeds]`.
const SEEDED_SECTIONS: [&str; 5] = ["embeddings", "ner", "outcome", "predictor", "explain"];

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Corpus root holding `manifest.jsonl` and the document files.
    pub corpus: PathBuf,
    /// Directory for every artifact the pipeline writes.
    pub work: PathBuf,
    /// Defaults to `<work>/cases.sqlite`.
    #[serde(default)]
    pub store: Option<PathBuf>,
    /// Gold annotation JSONL; defaults to `<corpus>/gold.jsonl`.
    #[serde(default)]
    pub gold: Option<PathBuf>,
    /// Gold case outcomes JSONL; defaults to `<corpus>/outcomes.jsonl`.
    #[serde(default)]
    pub outcomes: Option<PathBuf>,
    /// Termbase seed terms (label → terms); defaults to `<corpus>/seeds.json`.
    #[serde(default)]
    pub seed_terms: Option<PathBuf>,
    /// Pre-existing word vectors to fine-tune toward the corpus.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    /// Cover rule overrides (JSON map field → patterns).
    #[serde(default)]
    pub cover_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub embeddings: u64,
    pub clusters: u64,
    pub split: u64,
    pub ner: u64,
    pub outcome: u64,
    pub predictor: u64,
    pub explain: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { embeddings: 42, clusters: 42, split: 42, ner: 42, outcome: 42, predictor: 42, explain: 42 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Line patterns that start the main text; empty uses the built-in list.
    pub delimiters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermbaseSection {
    /// Neighbors considered per seed.
    pub k: usize,
    pub threshold: f64,
    /// Number of word clusters for the NER cluster features; 0 disables them.
    pub clusters: usize,
    pub cluster_iterations: usize,
}

impl Default for TermbaseSection {
    fn default() -> Self {
        Self { k: 5, threshold: 0.6, clusters: 32, cluster_iterations: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub embeddings: EmbedTrainConfig,
    #[serde(default)]
    pub termbase: TermbaseSection,
    #[serde(default)]
    pub ner: NerTrainConfig,
    #[serde(default)]
    pub outcome: OutcomeTrainConfig,
    #[serde(default)]
    pub predictor: PredictorTrainConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    #[serde(default)]
    pub server: ServerSection,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub work: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

impl PipelineConfig {
    /// Built-in configuration rooted at `base`.
    pub fn with_defaults(base: &Path) -> Self {
        let mut cfg = Self {
            paths: Paths {
                corpus: base.join("corpus"),
                work: base.join("work"),
                store: None,
                gold: None,
                outcomes: None,
                seed_terms: None,
                pretrained: None,
                cover_rules: None,
            },
            seeds: Seeds::default(),
            corpus: CorpusSection::default(),
            embeddings: EmbedTrainConfig::default(),
            termbase: TermbaseSection::default(),
            ner: NerTrainConfig::default(),
            outcome: OutcomeTrainConfig::default(),
            predictor: PredictorTrainConfig::default(),
            explain: ExplainConfig::default(),
            server: ServerSection::default(),
        };
        cfg.apply_seeds();
        cfg
    }

    /// Parses TOML; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: toml::Table = text.parse().map_err(|e| bad(format!("config syntax: {e}")))?;
        for section in SEEDED_SECTIONS {
            if raw.get(section).and_then(|v| v.as_table()).is_some_and(|t| t.contains_key("seed")) {
                return Err(bad(format!("[{section}] must not set seed; seeds belong in [seeds]")));
            }
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| bad(format!("config: {e}")))?;
        cfg.paths.resolve(base);
        cfg.apply_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.corpus {
            self.paths.corpus = p.clone();
        }
        if let Some(p) = &o.work {
            self.paths.work = p.clone();
        }
        if let Some(p) = &o.store {
            self.paths.store = Some(p.clone());
        }
    }

    fn apply_seeds(&mut self) {
        self.embeddings.seed = self.seeds.embeddings;
        self.ner.seed = self.seeds.ner;
        self.outcome.seed = self.seeds.outcome;
        self.predictor.seed = self.seeds.predictor;
        self.explain.seed = self.seeds.explain;
    }

    /// Checks values and that every explicitly named input exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.embeddings.validate() {
            problems.push(format!("[embeddings] {e}"));
        }
        if let Err(e) = self.ner.validate() {
            problems.push(format!("[ner] {e}"));
        }
        if let Err(e) = self.explain.validate() {
            problems.push(format!("[explain] {e}"));
        }
        if self.outcome.epochs == 0
            || self.outcome.batch_size == 0
            || self.outcome.learning_rate.is_nan()
            || self.outcome.learning_rate <= 0.0
        {
            problems.push("[outcome] epochs, batch_size and learning_rate must be positive".into());
        }
        if self.predictor.dim == 0 || self.predictor.epochs == 0 || self.predictor.batch_size == 0 {
            problems.push("[predictor] dim, epochs and batch_size must be positive".into());
        }
        if !(-1.0..=1.0).contains(&self.termbase.threshold) {
            problems.push("[termbase] threshold must be a cosine in [-1, 1]".into());
        }
        if self.server.bind.parse::<SocketAddr>().is_err() {
            problems.push(format!("[server] bind {:?} is not a socket address", self.server.bind));
        }
        for (name, p) in [
            ("paths.gold", &self.paths.gold),
            ("paths.outcomes", &self.paths.outcomes),
            ("paths.seed_terms", &self.paths.seed_terms),
            ("paths.pretrained", &self.paths.pretrained),
            ("paths.cover_rules", &self.paths.cover_rules),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    problems.push(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(bad(problems.join("; ")))
        }
    }

    pub fn store_path(&self) -> PathBuf {
        self.paths.store.clone().unwrap_or_else(|| self.paths.work.join("cases.sqlite"))
    }

    pub fn gold_path(&self) -> PathBuf {
        self.paths.gold.clone().unwrap_or_else(|| self.paths.corpus.join("gold.jsonl"))
    }

    pub fn outcomes_path(&self) -> PathBuf {
        self.paths.outcomes.clone().unwrap_or_else(|| self.paths.corpus.join("outcomes.jsonl"))
    }

    pub fn seed_terms_path(&self) -> PathBuf {
        self.paths.seed_terms.clone().unwrap_or_else(|| self.paths.corpus.join("seeds.json"))
    }

    /// Everything but the paths, as canonical JSON; the paths are covered by
    /// the input checksums instead.
    pub fn settings_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("paths");
        serde_json::to_string(&v).expect("value serializes")
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.corpus);
        abs(&mut self.work);
        for p in [
            &mut self.store,
            &mut self.gold,
            &mut self.outcomes,
            &mut self.seed_terms,
            &mut self.pretrained,
            &mut self.cover_rules,
        ]
        .into_iter()
        .flatten()
        {
            abs(p);
        }
    }
}
