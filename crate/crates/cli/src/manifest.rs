//! Run manifests: the inputs, seeds and output checksums of one invocation.
//! They carry no timestamps or absolute paths, so identical runs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rsdcase_core::corpus::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Seeds};

pub const RUN_MANIFEST: &str = "run-manifest.json";
pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Digest {
    pub bytes: u64,
    pub sha256: String,
}

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Self { bytes: bytes.len() as u64, sha256: sha256_hex(bytes) }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self::of(&bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub stages: Vec<String>,
    pub settings_sha256: String,
    pub seeds: Seeds,
    /// Keyed `corpus:<path>`, `work:<path>` or `<role>:<file name>`.
    pub inputs: BTreeMap<String, Digest>,
    pub outputs: BTreeMap<String, Digest>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Collects digests while stages run. Outputs of an earlier stage consumed
/// by a later one in the same run stay outputs only.
pub struct Recorder {
    work: PathBuf,
    command: String,
    stages: Vec<String>,
    settings_sha256: String,
    seeds: Seeds,
    inputs: BTreeMap<String, Digest>,
    outputs: BTreeMap<String, Digest>,
}

impl Recorder {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            work: cfg.paths.work.clone(),
            command: command.into(),
            stages: Vec::new(),
            settings_sha256: sha256_hex(cfg.settings_json().as_bytes()),
            seeds: cfg.seeds,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn stage(&mut self, name: &str) {
        self.stages.push(name.into());
    }

    pub fn input(&mut self, key: String, digest: Digest) {
        if !self.outputs.contains_key(&key) {
            self.inputs.insert(key, digest);
        }
    }

    pub fn input_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let key = self.key_for(role, path);
        let d = Digest::of_file(path)?;
        self.input(key, d);
        Ok(())
    }

    pub fn output(&mut self, key: String, digest: Digest) {
        self.outputs.insert(key, digest);
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        let key = self.key_for("out", path);
        let d = Digest::of_file(path)?;
        self.output(key, d);
        Ok(())
    }

    /// Work-directory files are keyed by their relative path; anything else
    /// by role and file name.
    fn key_for(&self, role: &str, path: &Path) -> String {
        match path.strip_prefix(&self.work) {
            Ok(rel) => format!("work:{}", rel.to_string_lossy().replace('\\', "/")),
            Err(_) => {
                format!("{role}:{}", path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            }
        }
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            tool: "rsdcase".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            stages: self.stages,
            settings_sha256: self.settings_sha256,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }

    /// Writes `manifests/<command>.json` in the work directory and, for
    /// commands that produce artifacts, `run-manifest.json` as well.
    pub fn write(self) -> Result<RunManifest> {
        self.write_inner(true)
    }

    /// Query commands leave `run-manifest.json` describing the last build.
    pub fn write_query(self) -> Result<RunManifest> {
        self.write_inner(false)
    }

    fn write_inner(self, latest: bool) -> Result<RunManifest> {
        let work = self.work.clone();
        let m = self.finish();
        let json = m.to_json();
        let dir = work.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut paths = vec![dir.join(format!("{}.json", m.command))];
        if latest {
            paths.push(work.join(RUN_MANIFEST));
        }
        for path in paths {
            std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(m)
    }
}
