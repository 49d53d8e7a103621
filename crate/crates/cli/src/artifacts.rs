//! File layout, self-describing metadata and staleness checks.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Stamp embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Meta {
    pub fn new(cfg: &PipelineConfig, stage: &str, seed: u64) -> Self {
        Meta {
            tool: "peerassign".into(),
            version: VERSION.into(),
            stage: stage.into(),
            config_hash: cfg.hash(),
            seed,
        }
    }

    /// Comment lines for CSV, PGM and text outputs.
    pub fn preamble(&self) -> Vec<String> {
        vec![
            format!("{} {}", self.tool, self.version),
            format!("stage={}", self.stage),
            format!("config_hash={}", self.config_hash),
            format!("seed={}", self.seed),
        ]
    }
}

/// JSON artifact: metadata next to the payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub meta: Meta,
    pub data: T,
}

pub struct Layout {
    pub out: PathBuf,
    cohort_override: Option<PathBuf>,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout {
            out: cfg.paths.out_dir.clone(),
            cohort_override: cfg.paths.cohort.clone(),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Where downstream stages read the cohort from.
    pub fn cohort_in(&self) -> PathBuf {
        self.cohort_override.clone().unwrap_or_else(|| self.file("cohort.csv"))
    }

    pub fn omega_dir(&self) -> PathBuf {
        self.out.join("omega")
    }

    pub fn heatmap_dir(&self) -> PathBuf {
        self.out.join("heatmaps")
    }

    pub fn ensure_dir(path: &Path) -> CliResult<()> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
    }
}

pub fn require(path: &Path, stage: &'static str, needs: &'static str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            stage,
            path: path.to_path_buf(),
            needs,
        })
    }
}

pub fn write_json<T: Serialize>(path: &Path, meta: &Meta, data: &T) -> CliResult<()> {
    let env = Envelope {
        meta: meta.clone(),
        data,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<Envelope<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, meta: &Meta, body: &str) -> CliResult<()> {
    let mut text: String = meta.preamble().iter().map(|l| format!("# {l}\n")).collect();
    text.push_str(body);
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Config hash recorded in a comment preamble or a JSON `meta` block.
pub fn recorded_hash(path: &Path) -> Option<String> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).ok()?;
        let v: serde_json::Value = serde_json::from_str(&text).ok()?;
        return v["meta"]["config_hash"].as_str().map(str::to_string);
    }
    let file = File::open(path).ok()?;
    for line in BufReader::new(file).lines() {
        let line = line.ok()?;
        let Some(comment) = line.strip_prefix("# ") else {
            break;
        };
        if let Some(h) = comment.strip_prefix("config_hash=") {
            return Some(h.to_string());
        }
    }
    None
}

/// Warns when an upstream artifact came from a different configuration.
/// Returns whether the artifact is stale.
pub fn check_fresh(path: &Path, current: &str) -> bool {
    match recorded_hash(path) {
        Some(h) if h != current => {
            log::warn!(
                "{} was produced with config hash {}…, current config is {}…; upstream results may be stale",
                path.display(),
                &h[..h.len().min(12)],
                &current[..current.len().min(12)]
            );
            true
        }
        _ => false,
    }
}
