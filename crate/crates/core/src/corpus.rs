//! Corpus manifests, document loading, cover/main segmentation and a polite
//! template-driven fetcher.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::textprep;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest line {line}: {message}")]
    ManifestSyntax { line: usize, message: String },
    #[error("manifest entry {doc_id}: file {path} is missing")]
    MissingFile { doc_id: String, path: PathBuf },
    #[error("manifest entry {doc_id}: sha256 mismatch (manifest {expected}, file {actual})")]
    ChecksumMismatch { doc_id: String, expected: String, actual: String },
    #[error("manifest entry {doc_id}: byte length mismatch (manifest {expected}, file {actual})")]
    LengthMismatch { doc_id: String, expected: u64, actual: u64 },
    #[error("manifest entry {doc_id}: duplicate doc_id")]
    DuplicateDocId { doc_id: String },
    #[error("manifest entry has an empty doc_id")]
    EmptyDocId,
    #[error("document {doc_id} is not valid UTF-8")]
    NotUtf8 { doc_id: String },
    #[error("document is empty")]
    EmptyDocument,
    #[error("invalid delimiter pattern {pattern:?}: {source}")]
    BadDelimiter { pattern: String, source: regex::Error },
    #[error("invalid fetch job: {0}")]
    InvalidJob(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
    pub cover_text: String,
    pub main_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    /// No delimiter matched, so the whole file became main text.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub split_warning: bool,
}

impl RawDocument {
    pub fn full_text(&self) -> String {
        format!("{}{}", self.cover_text, self.main_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CorpusManifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| CorpusError::ManifestSyntax { line: i + 1, message: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Builds a manifest for files already on disk, paths relative to `root`.
    pub fn from_files(root: &Path, files: &[(String, String)]) -> Result<Self, CorpusError> {
        let mut entries = Vec::with_capacity(files.len());
        for (doc_id, rel) in files {
            let full = root.join(rel);
            let bytes = fs::read(&full).map_err(io_err(&full))?;
            entries.push(ManifestEntry {
                doc_id: doc_id.clone(),
                path: rel.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(Self { entries })
    }

    /// Checks ids, presence, lengths and checksums against `root`.
    pub fn validate(&self, root: &Path) -> Result<(), CorpusError> {
        self.check_ids()?;
        for e in &self.entries {
            read_entry(root, e)?;
        }
        Ok(())
    }

    fn check_ids(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.doc_id.is_empty() {
                return Err(CorpusError::EmptyDocId);
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId { doc_id: e.doc_id.clone() });
            }
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_entry(root: &Path, e: &ManifestEntry) -> Result<Vec<u8>, CorpusError> {
    let full = root.join(&e.path);
    let bytes = match fs::read(&full) {
        Ok(b) => b,
        Err(err) if err.kind() == std::io::ErrorKind::NotFound => {
            return Err(CorpusError::MissingFile { doc_id: e.doc_id.clone(), path: full })
        }
        Err(err) => return Err(io_err(&full)(err)),
    };
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&e.sha256) {
        return Err(CorpusError::ChecksumMismatch { doc_id: e.doc_id.clone(), expected: e.sha256.clone(), actual });
    }
    if bytes.len() as u64 != e.bytes {
        return Err(CorpusError::LengthMismatch {
            doc_id: e.doc_id.clone(),
            expected: e.bytes,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Line patterns marking where the main text begins. A line matches when the
/// pattern is found anywhere in it (case-insensitive).
#[derive(Debug, Clone)]
pub struct DelimiterRules {
    patterns: Vec<Regex>,
}

pub const DEFAULT_DELIMITERS: &[&str] = &[r"reasons\s+and\s+decision", r"reasons\s+for\s+decision"];

impl Default for DelimiterRules {
    fn default() -> Self {
        Self::new(DEFAULT_DELIMITERS.iter().copied()).expect("default delimiters compile")
    }
}

impl DelimiterRules {
    pub fn new<'a>(patterns: impl IntoIterator<Item = &'a str>) -> Result<Self, CorpusError> {
        let patterns = patterns
            .into_iter()
            .map(|p| {
                RegexBuilder::new(p)
                    .case_insensitive(true)
                    .build()
                    .map_err(|source| CorpusError::BadDelimiter { pattern: p.to_string(), source })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverSplit {
    pub cover_text: String,
    pub main_text: String,
    pub delimiter_found: bool,
}

/// Cover is everything before the first line matching a delimiter rule.
pub fn split_cover_main(raw: &str, rules: &DelimiterRules) -> Result<CoverSplit, CorpusError> {
    if raw.is_empty() {
        return Err(CorpusError::EmptyDocument);
    }
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if rules.patterns.iter().any(|re| re.is_match(line)) {
            return Ok(CoverSplit {
                cover_text: raw[..offset].to_string(),
                main_text: raw[offset..].to_string(),
                delimiter_found: true,
            });
        }
        offset += line.len();
    }
    Ok(CoverSplit { cover_text: String::new(), main_text: raw.to_string(), delimiter_found: false })
}

/// Loads every manifest entry in manifest order. Files are read in parallel.
pub fn load_corpus(
    root: &Path,
    manifest: &CorpusManifest,
    rules: &DelimiterRules,
) -> Result<Vec<RawDocument>, CorpusError> {
    manifest.check_ids()?;
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let bytes = read_entry(root, e)?;
            let text = String::from_utf8(bytes).map_err(|_| CorpusError::NotUtf8 { doc_id: e.doc_id.clone() })?;
            let split = split_cover_main(&text, rules)?;
            let year = textprep::find_date(&split.cover_text).map(|(d, _, _)| chrono::Datelike::year(&d));
            Ok(RawDocument {
                doc_id: e.doc_id.clone(),
                source_uri: None,
                cover_text: split.cover_text,
                main_text: split.main_text,
                year,
                split_warning: !split.delimiter_found,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fetching

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchJob {
    /// URI with exactly one `{id}` placeholder.
    pub uri_template: String,
    pub id_list: Vec<String>,
    #[serde(with = "millis")]
    pub min_delay: Duration,
    pub max_retries: u32,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

pub const ID_PLACEHOLDER: &str = "{id}";

impl FetchJob {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.uri_template.matches(ID_PLACEHOLDER).count() != 1 {
            return Err(CorpusError::InvalidJob(format!(
                "uri template must contain exactly one {ID_PLACEHOLDER} placeholder"
            )));
        }
        if self.min_delay.is_zero() {
            return Err(CorpusError::InvalidJob("min_delay must be positive".into()));
        }
        Ok(())
    }

    pub fn uri_for(&self, id: &str) -> String {
        self.uri_template.replace(ID_PLACEHOLDER, id)
    }

    /// Gap enforced before attempt `attempt` (0 = first try) of an id.
    pub fn gap_before(&self, attempt: u32) -> Duration {
        self.min_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Blocking GET used by the fetcher.
pub trait Transport {
    fn get(&mut self, uri: &str) -> Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn get(&mut self, uri: &str) -> Result<HttpResponse, String> {
        let mut resp = self.agent.get(uri).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().with_config().limit(256 * 1024 * 1024).read_to_vec().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchFailure {
    pub id: String,
    pub attempts: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub id: String,
    pub attempt: u32,
    /// Time since the run started when the request was issued.
    pub at: Duration,
    pub status: Option<u16>,
}

#[derive(Debug, Clone, Default)]
pub struct FetchReport {
    pub manifest: CorpusManifest,
    pub failures: Vec<FetchFailure>,
    pub skipped: Vec<String>,
    pub attempts: BTreeMap<String, u32>,
    pub requests: Vec<RequestRecord>,
}

pub const FETCH_MANIFEST: &str = "manifest.jsonl";
pub const FETCH_FAILURES: &str = "failures.jsonl";

fn file_name_for(id: &str) -> String {
    let safe: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect();
    format!("{safe}.txt")
}

pub fn fetch_documents(job: &FetchJob, sink: &Path) -> Result<FetchReport, CorpusError> {
    fetch_with(job, sink, &mut UreqTransport::default())
}

/// Sequential fetch honoring `min_delay` between any two requests, with
/// exponential backoff on 429, 5xx and transport errors. The manifest is
/// rewritten after every stored document so an interrupted run resumes where
/// it stopped.
pub fn fetch_with(job: &FetchJob, sink: &Path, transport: &mut dyn Transport) -> Result<FetchReport, CorpusError> {
    job.validate()?;
    fs::create_dir_all(sink).map_err(io_err(sink))?;
    let manifest_path = sink.join(FETCH_MANIFEST);
    let mut report = FetchReport::default();
    if manifest_path.exists() {
        let previous = CorpusManifest::read_jsonl(&manifest_path)?;
        for e in previous.entries {
            if read_entry(sink, &e).is_ok() {
                report.manifest.entries.push(e);
            }
        }
    }
    let done: HashSet<String> = report.manifest.entries.iter().map(|e| e.doc_id.clone()).collect();

    let started = Instant::now();
    let mut last_request: Option<Instant> = None;
    for id in &job.id_list {
        if done.contains(id) {
            report.skipped.push(id.clone());
            continue;
        }
        let uri = job.uri_for(id);
        let mut attempt = 0u32;
        let outcome = loop {
            if let Some(last) = last_request {
                let wait = job.gap_before(attempt);
                let elapsed = last.elapsed();
                if elapsed < wait {
                    thread::sleep(wait - elapsed);
                }
            }
            let now = Instant::now();
            last_request = Some(now);
            let result = transport.get(&uri);
            report.requests.push(RequestRecord {
                id: id.clone(),
                attempt,
                at: now - started,
                status: result.as_ref().ok().map(|r| r.status),
            });
            let retryable = match &result {
                Ok(r) if (200..300).contains(&r.status) => break Ok(result.unwrap().body),
                Ok(r) if r.status == 429 || r.status >= 500 => format!("http status {}", r.status),
                Ok(r) => break Err(format!("http status {}", r.status)),
                Err(e) => e.clone(),
            };
            if attempt >= job.max_retries {
                break Err(retryable);
            }
            log::warn!("fetch {id}: {retryable}, retrying");
            attempt += 1;
        };
        report.attempts.insert(id.clone(), attempt + 1);
        match outcome {
            Ok(body) => {
                let name = file_name_for(id);
                let path = sink.join(&name);
                fs::write(&path, &body).map_err(io_err(&path))?;
                report.manifest.entries.push(ManifestEntry {
                    doc_id: id.clone(),
                    path: name,
                    bytes: body.len() as u64,
                    sha256: sha256_hex(&body),
                });
                report.manifest.write_jsonl(&manifest_path)?;
            }
            Err(reason) => report.failures.push(FetchFailure { id: id.clone(), attempts: attempt + 1, reason }),
        }
    }
    report.manifest.write_jsonl(&manifest_path)?;
    let mut failures = String::new();
    for f in &report.failures {
        failures.push_str(&serde_json::to_string(f).expect("failure serializes"));
        failures.push('\n');
    }
    write_atomic(&sink.join(FETCH_FAILURES), failures.as_bytes())?;
    Ok(report)
}
