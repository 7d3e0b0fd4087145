//! The `rsdcase` command line: pipeline stages, search, explanations and the
//! search service.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rsdcase_core::casebase::{
    AgeRange, CasebaseError, CitationKind, CitationMatch, Containment, DateRange, ListField, QueryFilter,
};
use rsdcase_core::corpus::{fetch_documents, FetchJob};
use rsdcase_core::explain::Method;
use rsdcase_core::outcome::OutcomeLabel;
use rsdcase_core::synth::{synth_corpus, write_synth_corpus};
use serde_json::json;

use crate::config::{ConfigError, Overrides, PipelineConfig};
use crate::manifest::Digest;
use crate::stages::{files, Ctx};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rsdcase", version, about = "Build and query a case base of refugee status decisions")]
pub struct Cli {
    /// Pipeline configuration (TOML). Without it, built-in defaults rooted at
    /// the current directory are used.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Corpus root; overrides paths.corpus.
    #[arg(long, global = true, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Work directory; overrides paths.work.
    #[arg(long, global = true, value_name = "DIR")]
    pub work: Option<PathBuf>,
    /// Case store; overrides paths.store.
    #[arg(long, global = true, value_name = "FILE")]
    pub store: Option<PathBuf>,
    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Split corpus documents into cover and main text and segment sentences.
    Ingest,
    /// Train corpus embeddings, expand the seed termbase and cluster words.
    Termbase,
    /// Propose termbase spans for every unit, for annotators.
    Suggest,
    /// Partition the gold units into train, dev and test sets.
    Split,
    /// Train and evaluate the sequence labeler.
    TrainNer,
    /// Label every unit of the corpus with the trained sequence labeler.
    Extract,
    /// Train the determination sentence classifier.
    TrainOutcome,
    /// Silver-label case outcomes by sentence vote.
    Silverlabel,
    /// Assemble case records and write the case store.
    Index,
    /// Train the outcome predictor over stored cases.
    TrainPredictor,
    /// Evaluate the trained models against the gold data.
    Eval,
    /// Run every stage from ingest to train-predictor.
    Pipeline,
    /// Token attributions for one stored case.
    Explain(ExplainArgs),
    /// Query the case store.
    Search(SearchArgs),
    /// Serve the read-only JSON search API.
    Serve(ServeArgs),
    /// Download documents into a corpus directory.
    Fetch(FetchArgs),
    /// Write a synthetic corpus with gold annotations.
    Synth(SynthArgs),
}

impl Command {
    fn stage_name(&self) -> Option<&'static str> {
        Some(match self {
            Command::Ingest => "ingest",
            Command::Termbase => "termbase",
            Command::Suggest => "suggest",
            Command::Split => "split",
            Command::TrainNer => "train-ner",
            Command::Extract => "extract",
            Command::TrainOutcome => "train-outcome",
            Command::Silverlabel => "silverlabel",
            Command::Index => "index",
            Command::TrainPredictor => "train-predictor",
            Command::Eval => "eval",
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Case to explain.
    #[arg(long)]
    pub doc: String,
    /// Attribution method (repeatable); `all` or absent runs all five.
    #[arg(long = "method", value_name = "METHOD")]
    pub methods: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Predictor model; defaults to predictor.json in the work directory.
    #[arg(long, value_name = "FILE")]
    pub predictor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Filter as JSON; the flags below are merged into it.
    #[arg(long, value_name = "JSON")]
    pub filter: Option<String>,
    #[arg(long)]
    pub tribunal: Option<String>,
    #[arg(long)]
    pub judge: Option<String>,
    /// denied, granted, uncertain or their codes 0, 1, 2.
    #[arg(long, value_parser = parse_outcome)]
    pub outcome: Option<OutcomeLabel>,
    #[arg(long)]
    pub gender: Option<String>,
    #[arg(long)]
    pub citizenship: Option<String>,
    #[arg(long)]
    pub hearing_mode: Option<String>,
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub decided_from: Option<String>,
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub decided_to: Option<String>,
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub heard_from: Option<String>,
    #[arg(long, value_name = "YYYY-MM-DD")]
    pub heard_to: Option<String>,
    #[arg(long)]
    pub age_min: Option<u32>,
    #[arg(long)]
    pub age_max: Option<u32>,
    /// FIELD=TERM substring test on a list field (repeatable).
    #[arg(long, value_name = "FIELD=TERM", value_parser = parse_containment)]
    pub contains: Vec<Containment>,
    /// [KIND:]TERM citation match (repeatable).
    #[arg(long = "cites", value_name = "[KIND:]TERM", value_parser = parse_citation)]
    pub cites: Vec<CitationMatch>,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long, default_value_t = rsdcase_server::DEFAULT_LIMIT)]
    pub limit: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address; overrides server.bind.
    #[arg(long, value_name = "ADDR")]
    pub bind: Option<SocketAddr>,
    /// Predictor model for the attribution endpoint; defaults to
    /// predictor.json in the work directory when it exists.
    #[arg(long, value_name = "FILE")]
    pub predictor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// URI with one `{id}` placeholder.
    #[arg(long)]
    pub uri_template: String,
    /// File with one document id per line.
    #[arg(long, value_name = "FILE")]
    pub ids_file: PathBuf,
    /// Directory receiving the documents and manifest.jsonl.
    #[arg(long, value_name = "DIR")]
    pub sink: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub min_delay_ms: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Leading cases that get gold annotations and outcomes.
    #[arg(long, default_value_t = 30)]
    pub annotated: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

fn parse_outcome(s: &str) -> Result<OutcomeLabel, String> {
    OutcomeLabel::ALL
        .into_iter()
        .find(|l| l.name().eq_ignore_ascii_case(s) || l.code().to_string() == s)
        .ok_or_else(|| format!("unknown outcome {s:?}; use denied, granted, uncertain or 0, 1, 2"))
}

fn from_name<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(json!(s)).map_err(|e| e.to_string())
}

fn parse_containment(s: &str) -> Result<Containment, String> {
    let (field, term) = s.split_once('=').ok_or("expected FIELD=TERM")?;
    Ok(Containment { field: from_name::<ListField>(field)?, term: term.into() })
}

fn parse_citation(s: &str) -> Result<CitationMatch, String> {
    match s.split_once(':') {
        Some((kind, term)) => match from_name::<CitationKind>(kind) {
            Ok(kind) => Ok(CitationMatch { kind: Some(kind), term: term.into() }),
            Err(_) => Ok(CitationMatch { kind: None, term: s.into() }),
        },
        None => Ok(CitationMatch { kind: None, term: s.into() }),
    }
}

impl SearchArgs {
    pub fn to_filter(&self) -> Result<QueryFilter> {
        let mut f = match &self.filter {
            Some(text) => serde_json::from_str(text).map_err(|e| ConfigError(format!("--filter: {e}")))?,
            None => QueryFilter::default(),
        };
        let set = |slot: &mut Option<String>, v: &Option<String>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut f.tribunal, &self.tribunal);
        set(&mut f.judge, &self.judge);
        set(&mut f.gender, &self.gender);
        set(&mut f.citizenship, &self.citizenship);
        set(&mut f.hearing_mode, &self.hearing_mode);
        if self.outcome.is_some() {
            f.outcome = self.outcome;
        }
        if self.decided_from.is_some() || self.decided_to.is_some() {
            let r = f.decision_date.get_or_insert_with(DateRange::default);
            set(&mut r.from, &self.decided_from);
            set(&mut r.to, &self.decided_to);
        }
        if self.heard_from.is_some() || self.heard_to.is_some() {
            let r = f.hearing_date.get_or_insert_with(DateRange::default);
            set(&mut r.from, &self.heard_from);
            set(&mut r.to, &self.heard_to);
        }
        if self.age_min.is_some() || self.age_max.is_some() {
            let r = f.age.get_or_insert_with(AgeRange::default);
            r.min = self.age_min.or(r.min);
            r.max = self.age_max.or(r.max);
        }
        f.contains.extend(self.contains.iter().cloned());
        f.citations.extend(self.cites.iter().cloned());
        if f == QueryFilter::default() {
            f.match_all = true;
        }
        Ok(f)
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    if names.is_empty() || names.iter().any(|n| n == "all") {
        return Ok(Method::ALL.to_vec());
    }
    names.iter().map(|n| n.parse::<Method>().map_err(|e| ConfigError(e.to_string()).into())).collect()
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::with_defaults(Path::new(".")),
    };
    cfg.apply(&Overrides { corpus: cli.corpus.clone(), work: cli.work.clone(), store: cli.store.clone() });
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 for usage and configuration errors
/// and 1 for anything that fails while running.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(err, "{}", e.render());
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "{}", json!({ "error": { "kind": "usage", "message": first } }));
            return EXIT_USAGE;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, code) = if e.downcast_ref::<ConfigError>().is_some() {
                ("config", EXIT_USAGE)
            } else {
                ("runtime", EXIT_FAILURE)
            };
            let message = format!("{e:#}");
            let _ = writeln!(err, "{}", json!({ "error": { "kind": kind, "message": message } }));
            code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => return synth(a, out),
        Command::Fetch(a) => return fetch(a, out),
        _ => {}
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Pipeline => {
            let mut ctx = Ctx::new("pipeline", &cfg)?;
            for stage in stages::PIPELINE {
                let summary = stages::run_stage(&mut ctx, stage).with_context(|| format!("stage {stage}"))?;
                writeln!(out, "{summary}")?;
                out.flush()?;
            }
            ctx.rec.write()?;
        }
        Command::Explain(a) => {
            let methods = parse_methods(&a.methods)?;
            let mut ctx = Ctx::new("explain", &cfg)?;
            ctx.rec.stage("explain");
            let table = stages::explain(&mut ctx, &a.doc, &methods, a.predictor.as_deref())?;
            let text = match a.format {
                Format::Json => table.to_json() + "\n",
                Format::Table => table.to_text(),
            };
            out.write_all(text.as_bytes())?;
            ctx.rec.output("stdout".into(), Digest::of(text.as_bytes()));
            ctx.rec.write_query()?;
        }
        Command::Search(a) => {
            let filter = a.to_filter()?;
            let mut ctx = Ctx::new("search", &cfg)?;
            ctx.rec.stage("search");
            let store = ctx.open_store()?;
            let result = store.query(&filter, a.offset, a.limit).map_err(|e| match e {
                CasebaseError::InvalidFilter(p) => {
                    anyhow::Error::new(ConfigError(format!("invalid filter: {}", p.join("; "))))
                }
                e => e.into(),
            })?;
            let text = serde_json::to_string_pretty(&result)? + "\n";
            out.write_all(text.as_bytes())?;
            ctx.rec.output("stdout".into(), Digest::of(text.as_bytes()));
            ctx.rec.write_query()?;
        }
        Command::Serve(a) => serve(&cfg, a, out)?,
        cmd => {
            let stage = cmd.stage_name().expect("remaining commands are stages");
            let mut ctx = Ctx::new(stage, &cfg)?;
            let summary = stages::run_stage(&mut ctx, stage)?;
            writeln!(out, "{summary}")?;
            ctx.rec.write()?;
        }
    }
    Ok(())
}

fn serve(cfg: &PipelineConfig, a: &ServeArgs, out: &mut dyn Write) -> Result<()> {
    let addr = match a.bind {
        Some(addr) => addr,
        None => cfg.server.bind.parse().map_err(|_| ConfigError(format!("bad bind address {}", cfg.server.bind)))?,
    };
    let mut svc = rsdcase_server::ServiceConfig::new(cfg.store_path());
    svc.explain = cfg.explain.clone();
    svc.predictor = match &a.predictor {
        Some(p) => Some(p.clone()),
        None => Some(cfg.paths.work.join(files::PREDICTOR)).filter(|p| p.is_file()),
    };
    rsdcase_server::serve(&svc, addr, |local| {
        let _ = writeln!(out, "listening on http://{local}");
        let _ = out.flush();
    })?;
    Ok(())
}

fn fetch(a: &FetchArgs, out: &mut dyn Write) -> Result<()> {
    let text = std::fs::read_to_string(&a.ids_file).with_context(|| format!("reading {}", a.ids_file.display()))?;
    let id_list: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if id_list.is_empty() {
        bail!(ConfigError(format!("{} lists no ids", a.ids_file.display())));
    }
    let job = FetchJob {
        uri_template: a.uri_template.clone(),
        id_list,
        min_delay: Duration::from_millis(a.min_delay_ms),
        max_retries: a.max_retries,
    };
    job.validate().map_err(|e| ConfigError(e.to_string()))?;
    let report = fetch_documents(&job, &a.sink)?;
    let summary = json!({
        "stored": report.manifest.count(),
        "skipped": report.skipped.len(),
        "failures": report.failures,
        "requests": report.requests.len(),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    if !report.failures.is_empty() {
        bail!("{} documents could not be fetched", report.failures.len());
    }
    Ok(())
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.annotated > a.cases {
        bail!(ConfigError(format!("--annotated {} exceeds --cases {}", a.annotated, a.cases)));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = write_synth_corpus(&a.out, &synth_corpus(a.cases, a.seed), a.annotated)?;
    writeln!(out, "synth: {} documents, {} annotated, in {}", manifest.count(), a.annotated, a.out.display())?;
    Ok(())
}
