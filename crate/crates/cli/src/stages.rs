//! Pipeline stages. Each reads its inputs from the corpus or the work
//! directory, writes fixed-name artifacts back to the work directory and
//! records both in the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use rsdcase_core::annotate::{
    build_termbase, import_gold, label_counts, split_dataset, suggest_spans, AnnotatedSentence, DatasetSplit, Label,
    LabelSchema, Span, TermBase, Zone,
};
use rsdcase_core::casebase::{
    assemble_record, document_units, predictor_input, resolve_mentions, CaseRecord, Lexicons, QueryFilter, Store,
    MAX_PAGE,
};
use rsdcase_core::corpus::{load_corpus, CorpusManifest, DelimiterRules, RawDocument};
use rsdcase_core::embeddings::{build_cooccurrence, kmeans_clusters, train_embeddings, EmbeddingTable};
use rsdcase_core::explain::{attribution_table, train_predictor, Method, PredictorModel};
use rsdcase_core::metrics::{binary_eval, BinaryEval};
use rsdcase_core::ner::{decode, evaluate_ner, train_crf, FeatureResources, NerReport, SequenceModel};
use rsdcase_core::outcome::{
    label_corpus, train_outcome_classifier, write_silver, CaseOutcome, CaseSentences, DistributionReport,
    OutcomeClassifier, OutcomeLabel, ReportUnit, VoteDetail,
};
use rsdcase_core::synth::GoldOutcome;
use rsdcase_core::textprep::{parse_case_cover, tokenize, CoverRules};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::{Digest, Recorder};

/// Artifact names inside the work directory.
pub mod files {
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const UNITS: &str = "units.jsonl";
    pub const INGEST_REPORT: &str = "ingest-report.json";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const EMBEDDINGS_LOG: &str = "embeddings-log.json";
    pub const TERMBASE: &str = "termbase.json";
    pub const TERMBASE_LOG: &str = "termbase-log.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const SUGGESTIONS: &str = "suggestions.jsonl";
    pub const SPLIT: &str = "split.json";
    pub const NER_MODEL: &str = "ner-model.json";
    pub const NER_LOG: &str = "ner-train-log.json";
    pub const NER_EVAL: &str = "ner-eval.json";
    pub const NER_EVAL_TEXT: &str = "ner-eval.txt";
    pub const EXTRACTIONS: &str = "extractions.jsonl";
    pub const OUTCOME_MODEL: &str = "outcome-model.json";
    pub const OUTCOME_EVAL: &str = "outcome-eval.json";
    pub const GOLD_REPORT: &str = "gold-report.json";
    pub const GOLD_REPORT_TEXT: &str = "gold-report.txt";
    pub const SILVER: &str = "silver.jsonl";
    pub const SILVER_SENTENCES: &str = "silver-sentences.jsonl";
    pub const SILVER_REPORT: &str = "silver-report.json";
    pub const SILVER_REPORT_TEXT: &str = "silver-report.txt";
    pub const INDEX_REPORT: &str = "index-report.json";
    pub const PREDICTOR: &str = "predictor.json";
    pub const PREDICTOR_EVAL: &str = "predictor-eval.json";
    pub const EVAL: &str = "eval.json";
}

/// Stages `pipeline` runs, in order.
pub const PIPELINE: [&str; 9] =
    ["ingest", "termbase", "split", "train-ner", "extract", "train-outcome", "silverlabel", "index", "train-predictor"];

pub struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub rec: Recorder,
}

impl<'a> Ctx<'a> {
    pub fn new(command: &str, cfg: &'a PipelineConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.paths.work)
            .with_context(|| format!("creating work directory {}", cfg.paths.work.display()))?;
        Ok(Self { cfg, rec: Recorder::new(command, cfg) })
    }

    pub fn work(&self, name: &str) -> PathBuf {
        self.cfg.paths.work.join(name)
    }

    fn read_work<T: DeserializeOwned>(&mut self, name: &str) -> Result<Vec<T>> {
        let path = self.work(name);
        if !path.is_file() {
            bail!("{} not found; run the stage that produces it first", path.display());
        }
        self.rec.input_file("work", &path)?;
        read_jsonl(&path)
    }

    fn read_work_json<T: DeserializeOwned>(&mut self, name: &str) -> Result<T> {
        let path = self.work(name);
        if !path.is_file() {
            bail!("{} not found; run the stage that produces it first", path.display());
        }
        self.rec.input_file("work", &path)?;
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<()> {
        let mut buf = Vec::new();
        for it in items {
            serde_json::to_writer(&mut buf, it)?;
            buf.push(b'\n');
        }
        self.write_bytes(name, &buf)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write_bytes(name, text.as_bytes())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.work(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.rec.output_file(&path)
    }

    fn gold(&mut self) -> Result<Vec<AnnotatedSentence>> {
        let path = self.cfg.gold_path();
        let units = import_gold(&path).with_context(|| format!("reading gold annotations {}", path.display()))?;
        self.rec.input_file("gold", &path)?;
        Ok(units)
    }

    fn ner_model(&mut self) -> Result<SequenceModel> {
        let path = self.work(files::NER_MODEL);
        let m = SequenceModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
        self.rec.input_file("work", &path)?;
        Ok(m)
    }

    fn outcome_model(&mut self) -> Result<OutcomeClassifier> {
        let path = self.work(files::OUTCOME_MODEL);
        let m = OutcomeClassifier::load(&path).with_context(|| format!("loading {}", path.display()))?;
        self.rec.input_file("work", &path)?;
        Ok(m)
    }

    /// Opens the store read-only and records its canonical dump.
    pub fn open_store(&mut self) -> Result<Store> {
        let path = self.cfg.store_path();
        let store = Store::open_read_only(&path)?;
        let key = self.store_key();
        self.rec.input(key, Digest::of(store.dump()?.as_bytes()));
        Ok(store)
    }

    /// SQLite files are not byte-stable, so the store is digested through
    /// its canonical dump.
    fn store_key(&self) -> String {
        let path = self.cfg.store_path();
        let name = match path.strip_prefix(&self.cfg.paths.work) {
            Ok(rel) => format!("work:{}", rel.to_string_lossy()),
            Err(_) => format!("store:{}", path.file_name().unwrap_or_default().to_string_lossy()),
        };
        format!("{name}#dump")
    }

    pub fn load_predictor(&mut self, path: Option<&Path>) -> Result<PredictorModel> {
        let path = path.map_or_else(|| self.work(files::PREDICTOR), Path::to_path_buf);
        let m = PredictorModel::load(&path).with_context(|| format!("loading predictor {}", path.display()))?;
        self.rec.input_file("predictor", &path)?;
        Ok(m)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn unit_key(u: &AnnotatedSentence) -> String {
    match u.zone {
        Zone::Cover => format!("{}#cover", u.doc_id),
        Zone::Main => format!("{}#{}", u.doc_id, u.sent_id),
    }
}

fn to_spans(anns: Vec<rsdcase_core::annotate::SpanAnnotation>) -> Vec<Span> {
    anns.into_iter().map(|a| Span { start: a.start, end: a.end, label: a.label, provenance: a.provenance }).collect()
}

pub fn run_stage(ctx: &mut Ctx, stage: &str) -> Result<String> {
    ctx.rec.stage(stage);
    match stage {
        "ingest" => ingest(ctx),
        "termbase" => termbase(ctx),
        "suggest" => suggest(ctx),
        "split" => split(ctx),
        "train-ner" => train_ner(ctx),
        "extract" => extract(ctx),
        "train-outcome" => train_outcome(ctx),
        "silverlabel" => silverlabel(ctx),
        "index" => index(ctx),
        "train-predictor" => train_predictor_stage(ctx),
        "eval" => eval(ctx),
        other => bail!("unknown stage {other}"),
    }
}

// ---------------------------------------------------------------------------
// Stages

#[derive(Debug, Serialize, Deserialize)]
struct IngestReport {
    documents: usize,
    cover_units: usize,
    main_units: usize,
    /// Documents where no delimiter matched and the whole text became main text.
    without_cover: Vec<String>,
}

pub fn ingest(ctx: &mut Ctx) -> Result<String> {
    let root = ctx.cfg.paths.corpus.clone();
    let mpath = root.join("manifest.jsonl");
    if !mpath.is_file() {
        bail!("corpus manifest {} not found", mpath.display());
    }
    let manifest = CorpusManifest::read_jsonl(&mpath)?;
    ctx.rec.input_file("corpus", &mpath)?;
    let rules = if ctx.cfg.corpus.delimiters.is_empty() {
        DelimiterRules::default()
    } else {
        DelimiterRules::new(ctx.cfg.corpus.delimiters.iter().map(String::as_str))?
    };
    let docs = load_corpus(&root, &manifest, &rules)?;
    for e in &manifest.entries {
        ctx.rec.input(format!("corpus:{}", e.path), Digest { bytes: e.bytes, sha256: e.sha256.clone() });
    }
    let units: Vec<AnnotatedSentence> = docs.iter().flat_map(document_units).collect();
    let report = IngestReport {
        documents: docs.len(),
        cover_units: units.iter().filter(|u| u.zone == Zone::Cover).count(),
        main_units: units.iter().filter(|u| u.zone == Zone::Main).count(),
        without_cover: docs.iter().filter(|d| d.split_warning).map(|d| d.doc_id.clone()).collect(),
    };
    ctx.write_jsonl(files::DOCUMENTS, &docs)?;
    ctx.write_jsonl(files::UNITS, &units)?;
    ctx.write_json(files::INGEST_REPORT, &report)?;
    Ok(format!(
        "ingest: {} documents, {} cover units, {} sentences, {} without a cover",
        report.documents,
        report.cover_units,
        report.main_units,
        report.without_cover.len()
    ))
}

#[derive(Debug, Serialize)]
struct EmbeddingsLog {
    vocabulary: usize,
    nonzero_pairs: usize,
    dim: usize,
    pretrained_overlap: usize,
    loss_history: Vec<f64>,
}

fn lower_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().map(|t| t.text.to_lowercase()).collect()
}

pub fn termbase(ctx: &mut Ctx) -> Result<String> {
    let units: Vec<AnnotatedSentence> = ctx.read_work(files::UNITS)?;
    let seqs: Vec<Vec<String>> = units.par_iter().map(|u| lower_tokens(&u.text)).collect();
    let ecfg = ctx.cfg.embeddings.clone();
    let cooc = build_cooccurrence(&seqs, ecfg.window, ecfg.min_count)?;
    let init = match &ctx.cfg.paths.pretrained {
        Some(p) => {
            ctx.rec.input_file("pretrained", p)?;
            Some(EmbeddingTable::read_text(p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let trained = train_embeddings(&cooc, init.as_ref(), &ecfg)?;
    let table = trained.table;
    ctx.write_bytes(files::EMBEDDINGS, table.to_text().as_bytes())?;
    ctx.write_json(
        files::EMBEDDINGS_LOG,
        &EmbeddingsLog {
            vocabulary: table.len(),
            nonzero_pairs: cooc.nnz(),
            dim: table.dim,
            pretrained_overlap: init.as_ref().map_or(0, |t| cooc.vocab.iter().filter(|w| t.contains(w)).count()),
            loss_history: trained.loss_history,
        },
    )?;

    let seeds_path = ctx.cfg.seed_terms_path();
    let text =
        std::fs::read_to_string(&seeds_path).with_context(|| format!("reading seed terms {}", seeds_path.display()))?;
    ctx.rec.input_file("seed_terms", &seeds_path)?;
    let seeds: BTreeMap<Label, Vec<String>> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", seeds_path.display()))?;
    let tcfg = ctx.cfg.termbase.clone();
    let (tb, log) = build_termbase(&seeds, &table, tcfg.k, tcfg.threshold)?;
    ctx.write_bytes(files::TERMBASE, (tb.to_json() + "\n").as_bytes())?;
    ctx.write_json(files::TERMBASE_LOG, &log)?;

    let clusters_path = ctx.work(files::CLUSTERS);
    let n_clusters = if tcfg.clusters > 0 {
        let clusters = kmeans_clusters(&table, tcfg.clusters, ctx.cfg.seeds.clusters, tcfg.cluster_iterations);
        ctx.write_json(files::CLUSTERS, &clusters)?;
        clusters.values().collect::<std::collections::BTreeSet<_>>().len()
    } else {
        if clusters_path.exists() {
            std::fs::remove_file(&clusters_path)?;
        }
        0
    };
    Ok(format!(
        "termbase: {} vectors of dim {}, {} patterns ({} added by neighbors), {} clusters",
        table.len(),
        table.dim,
        tb.len(),
        log.added.len(),
        n_clusters
    ))
}

pub fn suggest(ctx: &mut Ctx) -> Result<String> {
    let units: Vec<AnnotatedSentence> = ctx.read_work(files::UNITS)?;
    let tb_path = ctx.work(files::TERMBASE);
    let tb = TermBase::from_json(
        &std::fs::read_to_string(&tb_path)
            .with_context(|| format!("reading {}; run termbase first", tb_path.display()))?,
    )?;
    ctx.rec.input_file("work", &tb_path)?;
    let out: Vec<AnnotatedSentence> =
        units.par_iter().map(|u| AnnotatedSentence { spans: to_spans(suggest_spans(u, &tb)), ..u.clone() }).collect();
    ctx.write_jsonl(files::SUGGESTIONS, &out)?;
    let n: usize = label_counts(&out).values().sum();
    Ok(format!("suggest: {n} suggested spans over {} units", out.len()))
}

/// Covers and main-text sentences are split separately, each 80/10/10.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub covers: DatasetSplit,
    pub sentences: DatasetSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    Train,
    Dev,
    Test,
}

impl SplitFile {
    fn parts(&self) -> HashMap<&str, Part> {
        let mut m = HashMap::new();
        for s in [&self.covers, &self.sentences] {
            m.extend(s.train.iter().map(|k| (k.as_str(), Part::Train)));
            m.extend(s.dev.iter().map(|k| (k.as_str(), Part::Dev)));
            m.extend(s.test.iter().map(|k| (k.as_str(), Part::Test)));
        }
        m
    }
}

pub fn split(ctx: &mut Ctx) -> Result<String> {
    let gold = ctx.gold()?;
    let keys = |zone: Zone| -> Vec<String> { gold.iter().filter(|u| u.zone == zone).map(unit_key).collect() };
    let seed = ctx.cfg.seeds.split;
    let s = SplitFile {
        covers: split_dataset(&keys(Zone::Cover), seed).context("splitting gold covers")?,
        sentences: split_dataset(&keys(Zone::Main), seed).context("splitting gold sentences")?,
    };
    ctx.write_json(files::SPLIT, &s)?;
    Ok(format!(
        "split: covers {}/{}/{}, sentences {}/{}/{}",
        s.covers.train.len(),
        s.covers.dev.len(),
        s.covers.test.len(),
        s.sentences.train.len(),
        s.sentences.dev.len(),
        s.sentences.test.len()
    ))
}

type Partitioned = (Vec<AnnotatedSentence>, Vec<AnnotatedSentence>, Vec<AnnotatedSentence>);

fn partition(ctx: &mut Ctx, units: Vec<AnnotatedSentence>) -> Result<Partitioned> {
    let split: SplitFile = ctx.read_work_json(files::SPLIT)?;
    let parts = split.parts();
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for u in units {
        match parts.get(unit_key(&u).as_str()) {
            Some(Part::Train) => train.push(u),
            Some(Part::Dev) => dev.push(u),
            Some(Part::Test) => test.push(u),
            None => log::warn!("{} is not in the split; ignored", unit_key(&u)),
        }
    }
    Ok((train, dev, test))
}

fn feature_resources(ctx: &mut Ctx) -> Result<FeatureResources> {
    let mut res = FeatureResources::default();
    let toggles = ctx.cfg.ner.features;
    let tb_path = ctx.work(files::TERMBASE);
    if toggles.termbase && tb_path.is_file() {
        res.termbase = Some(TermBase::from_json(&std::fs::read_to_string(&tb_path)?)?);
        ctx.rec.input_file("work", &tb_path)?;
    }
    let cl_path = ctx.work(files::CLUSTERS);
    if toggles.clusters && cl_path.is_file() {
        res.clusters = Some(serde_json::from_str(&std::fs::read_to_string(&cl_path)?)?);
        ctx.rec.input_file("work", &cl_path)?;
    }
    Ok(res)
}

pub fn train_ner(ctx: &mut Ctx) -> Result<String> {
    let gold = ctx.gold()?;
    let (train, dev, test) = partition(ctx, gold)?;
    let res = feature_resources(ctx)?;
    let (model, log) = train_crf(&train, &dev, &LabelSchema::full(), &res, &ctx.cfg.ner)?;
    let path = ctx.work(files::NER_MODEL);
    model.save(&path)?;
    ctx.rec.output_file(&path)?;
    ctx.write_json(files::NER_LOG, &log)?;
    let report = evaluate_ner(&model, &test);
    ctx.write_json(files::NER_EVAL, &report)?;
    ctx.write_bytes(files::NER_EVAL_TEXT, report.to_text().as_bytes())?;
    Ok(format!(
        "train-ner: {} train / {} dev / {} test units, {} epochs, test micro-F1 {:.4}",
        train.len(),
        dev.len(),
        test.len(),
        model.train_meta.epochs,
        report.micro.f1
    ))
}

pub fn extract(ctx: &mut Ctx) -> Result<String> {
    let model = ctx.ner_model()?;
    let units: Vec<AnnotatedSentence> = ctx.read_work(files::UNITS)?;
    let out: Vec<AnnotatedSentence> =
        units.par_iter().map(|u| AnnotatedSentence { spans: to_spans(decode(&model, u)), ..u.clone() }).collect();
    ctx.write_jsonl(files::EXTRACTIONS, &out)?;
    let counts = label_counts(&out);
    Ok(format!(
        "extract: {} spans over {} units ({} labels seen)",
        counts.values().sum::<usize>(),
        out.len(),
        counts.len()
    ))
}

fn gold_outcomes(ctx: &mut Ctx) -> Result<BTreeMap<String, OutcomeLabel>> {
    let path = ctx.cfg.outcomes_path();
    let rows: Vec<GoldOutcome> =
        read_jsonl(&path).with_context(|| format!("reading gold outcomes {}", path.display()))?;
    ctx.rec.input_file("outcomes", &path)?;
    Ok(rows.into_iter().map(|r| (r.doc_id, r.label)).collect())
}

/// Gold determination sentences labeled with their case outcome.
fn determination_examples(units: &[AnnotatedSentence], outcomes: &BTreeMap<String, OutcomeLabel>) -> Vec<(String, u8)> {
    units
        .iter()
        .filter(|u| u.zone == Zone::Main && u.spans.iter().any(|s| s.label == Label::Determination))
        .filter_map(|u| match outcomes.get(&u.doc_id) {
            Some(OutcomeLabel::Granted) => Some((u.text.clone(), 1)),
            Some(OutcomeLabel::Denied) => Some((u.text.clone(), 0)),
            _ => None,
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifierEval {
    n_train: usize,
    n_test: usize,
    train: BinaryEval,
    test: Option<BinaryEval>,
}

fn evaluate_classifier(clf: &OutcomeClassifier, data: &[(String, u8)]) -> Result<Option<BinaryEval>> {
    if data.is_empty() {
        return Ok(None);
    }
    Ok(Some(clf.evaluate(data)?))
}

pub fn train_outcome(ctx: &mut Ctx) -> Result<String> {
    let gold = ctx.gold()?;
    let outcomes = gold_outcomes(ctx)?;
    let all = determination_examples(&gold, &outcomes);
    let report = DistributionReport::from_labels(
        ReportUnit::Sentence,
        all.iter().map(|(_, y)| OutcomeLabel::from_code(*y).expect("binary label")),
    );
    ctx.write_json(files::GOLD_REPORT, &report)?;
    ctx.write_bytes(files::GOLD_REPORT_TEXT, report.to_text().as_bytes())?;

    let (train_units, _, test_units) = partition(ctx, gold)?;
    let train = determination_examples(&train_units, &outcomes);
    let test = determination_examples(&test_units, &outcomes);
    let clf = train_outcome_classifier(&train, &ctx.cfg.outcome)?;
    let path = ctx.work(files::OUTCOME_MODEL);
    clf.save(&path)?;
    ctx.rec.output_file(&path)?;
    let eval = ClassifierEval {
        n_train: train.len(),
        n_test: test.len(),
        train: clf.evaluate(&train)?,
        test: evaluate_classifier(&clf, &test)?,
    };
    ctx.write_json(files::OUTCOME_EVAL, &eval)?;
    Ok(format!(
        "train-outcome: {} gold determination sentences ({:.2}% granted), test accuracy {}",
        all.len(),
        report.row(OutcomeLabel::Granted).percent,
        eval.test.map_or("n/a".into(), |e| format!("{:.4}", e.accuracy))
    ))
}

fn case_sentences(docs: &[RawDocument], units: Vec<AnnotatedSentence>) -> Vec<CaseSentences> {
    let mut by_doc: HashMap<String, Vec<AnnotatedSentence>> = HashMap::new();
    for u in units.into_iter().filter(|u| u.zone == Zone::Main) {
        by_doc.entry(u.doc_id.clone()).or_default().push(u);
    }
    docs.iter()
        .map(|d| CaseSentences { doc_id: d.doc_id.clone(), sentences: by_doc.remove(&d.doc_id).unwrap_or_default() })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct SilverReport {
    sentences: DistributionReport,
    cases: DistributionReport,
}

pub fn silverlabel(ctx: &mut Ctx) -> Result<String> {
    let ner = ctx.ner_model()?;
    let clf = ctx.outcome_model()?;
    let docs: Vec<RawDocument> = ctx.read_work(files::DOCUMENTS)?;
    let units: Vec<AnnotatedSentence> = ctx.read_work(files::UNITS)?;
    let labels = label_corpus(&case_sentences(&docs, units), &ner, &clf);
    let path = ctx.work(files::SILVER);
    write_silver(&path, &labels.cases)?;
    ctx.rec.output_file(&path)?;
    ctx.write_jsonl(files::SILVER_SENTENCES, &labels.sentences)?;
    let report = SilverReport { sentences: labels.sentence_report, cases: labels.case_report };
    ctx.write_json(files::SILVER_REPORT, &report)?;
    let text = format!("{}\n{}", report.sentences.to_text(), report.cases.to_text());
    ctx.write_bytes(files::SILVER_REPORT_TEXT, text.as_bytes())?;
    let row = |l| report.cases.row(l).percent;
    Ok(format!(
        "silverlabel: {} sentences, {} cases: {:.2}% denied, {:.2}% granted, {:.2}% uncertain",
        report.sentences.total,
        report.cases.total,
        row(OutcomeLabel::Denied),
        row(OutcomeLabel::Granted),
        row(OutcomeLabel::Uncertain)
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexReport {
    cases: usize,
    outcomes: BTreeMap<String, usize>,
    flags: BTreeMap<String, usize>,
}

pub fn build_records(
    docs: &[RawDocument],
    units: Vec<AnnotatedSentence>,
    silver: &[CaseOutcome],
    rules: &CoverRules,
    lex: &Lexicons,
) -> Vec<CaseRecord> {
    let mut by_doc: HashMap<String, Vec<AnnotatedSentence>> = HashMap::new();
    for u in units {
        by_doc.entry(u.doc_id.clone()).or_default().push(u);
    }
    let outcomes: HashMap<&str, &CaseOutcome> = silver.iter().map(|c| (c.doc_id.as_str(), c)).collect();
    docs.par_iter()
        .map(|doc| {
            let cover = parse_case_cover(&doc.cover_text, rules);
            let mentions = resolve_mentions(doc, by_doc.get(&doc.doc_id).map_or(&[][..], Vec::as_slice));
            let outcome = outcomes.get(doc.doc_id.as_str()).map_or_else(
                || CaseOutcome {
                    doc_id: doc.doc_id.clone(),
                    label: OutcomeLabel::Uncertain,
                    vote_detail: VoteDetail::default(),
                    flags: vec!["no_silver_label".into()],
                },
                |c| (*c).clone(),
            );
            assemble_record(doc, &cover, &mentions, &outcome, lex)
        })
        .collect()
}

fn remove_store(path: &Path) -> Result<()> {
    for suffix in ["", "-journal", "-wal", "-shm"] {
        let p = PathBuf::from(format!("{}{suffix}", path.display()));
        if p.exists() {
            std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

pub fn index(ctx: &mut Ctx) -> Result<String> {
    let docs: Vec<RawDocument> = ctx.read_work(files::DOCUMENTS)?;
    let units: Vec<AnnotatedSentence> = ctx.read_work(files::EXTRACTIONS)?;
    let silver: Vec<CaseOutcome> = ctx.read_work(files::SILVER)?;
    let rules = match &ctx.cfg.paths.cover_rules {
        Some(p) => {
            ctx.rec.input_file("cover_rules", p)?;
            CoverRules::from_file(p)?
        }
        None => CoverRules::default(),
    };
    let records = build_records(&docs, units, &silver, &rules, &Lexicons::default());

    let path = ctx.cfg.store_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    remove_store(&path)?;
    let mut store = Store::create(&path)?;
    store.persist(&records)?;
    store.persist_documents(&docs)?;
    let key = ctx.store_key();
    ctx.rec.output(key, Digest::of(store.dump()?.as_bytes()));
    drop(store);

    let mut report = IndexReport { cases: records.len(), outcomes: BTreeMap::new(), flags: BTreeMap::new() };
    for r in &records {
        *report.outcomes.entry(r.outcome.name().to_string()).or_default() += 1;
        for f in &r.flags {
            let name = f.split(':').next().unwrap_or(f).to_string();
            *report.flags.entry(name).or_default() += 1;
        }
    }
    ctx.write_json(files::INDEX_REPORT, &report)?;
    Ok(format!("index: {} cases stored in {}", records.len(), path.display()))
}

/// Every record in the store, in query order.
pub fn all_records(store: &Store) -> Result<Vec<CaseRecord>> {
    let mut out = Vec::new();
    let mut offset = 0;
    loop {
        let page = store.query(&QueryFilter::match_all(), offset, MAX_PAGE)?;
        for s in &page.records {
            out.push(store.get(&s.doc_id)?.context("record listed but missing")?);
        }
        offset += page.records.len();
        if page.records.is_empty() || offset >= page.total {
            return Ok(out);
        }
    }
}

fn predictor_examples(records: &[CaseRecord], mode: rsdcase_core::casebase::InputMode) -> Vec<(String, u8)> {
    records
        .iter()
        .filter(|r| r.outcome != OutcomeLabel::Uncertain)
        .map(|r| (predictor_input(r, mode), r.outcome.code()))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictorReport {
    n_train: usize,
    pretrained_rows: usize,
    train: Option<BinaryEval>,
}

pub fn train_predictor_stage(ctx: &mut Ctx) -> Result<String> {
    let store = ctx.open_store()?;
    let records = all_records(&store)?;
    let pcfg = ctx.cfg.predictor.clone();
    let labeled = predictor_examples(&records, pcfg.input_mode);
    let emb_path = ctx.work(files::EMBEDDINGS);
    let pretrained = if emb_path.is_file() {
        let t = EmbeddingTable::read_text(&emb_path)?;
        if t.dim == pcfg.dim {
            ctx.rec.input_file("work", &emb_path)?;
            Some(t)
        } else {
            log::warn!("embeddings have dim {} but the predictor uses {}; not used", t.dim, pcfg.dim);
            None
        }
    } else {
        None
    };
    let model = train_predictor(&labeled, &pcfg, pretrained.as_ref())
        .context("training the outcome predictor on stored cases")?;
    let path = ctx.work(files::PREDICTOR);
    model.save(&path)?;
    ctx.rec.output_file(&path)?;
    let meta = model.meta.clone().expect("trained models carry metadata");
    ctx.write_json(
        files::PREDICTOR_EVAL,
        &PredictorReport { n_train: meta.n_train, pretrained_rows: meta.pretrained_rows, train: meta.train_eval },
    )?;
    Ok(format!(
        "train-predictor: {} cases ({}), {} pretrained rows, train accuracy {}",
        meta.n_train,
        pcfg.input_mode.as_str(),
        meta.pretrained_rows,
        meta.train_eval.map_or("n/a".into(), |e| format!("{:.4}", e.accuracy))
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub ner_test: Option<NerReport>,
    pub outcome_sentences_test: Option<BinaryEval>,
    /// Silver case labels against gold outcomes on annotated cases.
    pub silver_vs_gold: Option<SilverAgreement>,
    pub predictor_train: Option<BinaryEval>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SilverAgreement {
    pub cases: usize,
    pub agree: usize,
    pub uncertain: usize,
    pub decided: Option<BinaryEval>,
}

pub fn eval(ctx: &mut Ctx) -> Result<String> {
    let gold = ctx.gold()?;
    let outcomes = gold_outcomes(ctx)?;
    let (_, _, test) = partition(ctx, gold)?;
    let mut report =
        EvalReport { ner_test: None, outcome_sentences_test: None, silver_vs_gold: None, predictor_train: None };
    if ctx.work(files::NER_MODEL).is_file() {
        let ner = ctx.ner_model()?;
        report.ner_test = Some(evaluate_ner(&ner, &test));
    }
    if ctx.work(files::OUTCOME_MODEL).is_file() {
        let clf = ctx.outcome_model()?;
        report.outcome_sentences_test = evaluate_classifier(&clf, &determination_examples(&test, &outcomes))?;
    }
    if ctx.work(files::SILVER).is_file() {
        let silver: Vec<CaseOutcome> = ctx.read_work(files::SILVER)?;
        let mut agg = SilverAgreement { cases: 0, agree: 0, uncertain: 0, decided: None };
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for c in &silver {
            let Some(&g) = outcomes.get(&c.doc_id) else { continue };
            agg.cases += 1;
            agg.agree += usize::from(g == c.label);
            if c.label == OutcomeLabel::Uncertain {
                agg.uncertain += 1;
            } else if g != OutcomeLabel::Uncertain {
                truth.push(g.code());
                pred.push(c.label.code());
            }
        }
        if !truth.is_empty() {
            agg.decided = Some(binary_eval(&truth, &pred)?);
        }
        report.silver_vs_gold = Some(agg);
    }
    if ctx.work(files::PREDICTOR).is_file() && ctx.cfg.store_path().is_file() {
        let model = ctx.load_predictor(None)?;
        let store = ctx.open_store()?;
        let labeled = predictor_examples(&all_records(&store)?, model.input_mode());
        if !labeled.is_empty() {
            report.predictor_train = Some(model.evaluate(&labeled)?);
        }
    }
    ctx.write_json(files::EVAL, &report)?;
    Ok(serde_json::to_string_pretty(&report)?)
}

/// Attribution table for one stored case.
pub fn explain(
    ctx: &mut Ctx,
    doc_id: &str,
    methods: &[Method],
    predictor: Option<&Path>,
) -> Result<rsdcase_core::explain::AttributionTable> {
    let model = ctx.load_predictor(predictor)?;
    let store = ctx.open_store()?;
    let record = store.get(doc_id)?.with_context(|| format!("no case with doc_id {doc_id:?} in the store"))?;
    let input = predictor_input(&record, model.input_mode());
    Ok(attribution_table(&model, &input, methods, &ctx.cfg.explain)?)
}
