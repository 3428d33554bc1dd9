//! The run configuration document: every module's settings in one TOML
//! file, `key=value` overrides, validation with field paths, and the config
//! hash stamped into artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::PyramidConfig;
use crate::error::{Error, Result};
use crate::index::{DEFAULT_THRESHOLD, DEFAULT_TOP_K};
use crate::metrics::EvalConfig;
use crate::model::ModelShape;
use crate::synthdata::{ProposalConfig, SceneConfig, SplitSizes};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub bits: usize,
    /// Semantic code length `q`; 0 disables the semantic head.
    pub semantic_bits: usize,
    pub hidden: usize,
    pub pyramid: PyramidConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            semantic_bits: 48,
            hidden: 8,
            pyramid: PyramidConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub threshold: f64,
    pub top_k: usize,
    /// Ranking depth for NDCG and ACG in reports.
    pub eval_depth: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            eval_depth: EvalConfig::default().depth,
        }
    }
}

/// Default artifact locations; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub codes: PathBuf,
    pub index: PathBuf,
    pub results: PathBuf,
    pub report: PathBuf,
    pub trace: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "run/data".into(),
            checkpoint: "run/model.ckpt".into(),
            codes: "run/codes.tsv".into(),
            index: "run/index.txt".into(),
            results: "run/results.tsv".into(),
            report: "run/report.csv".into(),
            trace: "run/trace.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneConfig,
    pub proposals: ProposalConfig,
    pub splits: SplitSizes,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneConfig::default(),
            proposals: ProposalConfig::default(),
            splits: SplitSizes::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            retrieval: RetrievalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn cfg_err(path: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Reports the first key of `doc` that `reference` does not have, as a dotted path.
fn find_unknown_key(doc: &toml::Table, reference: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in doc {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, reference.get(key)) {
            (_, None) => return Some(path),
            (toml::Value::Table(sub), Some(toml::Value::Table(sub_ref))) => {
                if let Some(p) = find_unknown_key(sub, sub_ref, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

/// Sets `a.b.c = value` in `doc`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(cfg_err(key, "empty key segment"));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("nonempty key");
    let mut table = doc;
    let mut walked = String::new();
    for part in parts {
        if !walked.is_empty() {
            walked.push('.');
        }
        walked.push_str(part);
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| cfg_err(walked.clone(), "is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a document, applies overrides and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| cfg_err("<document>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let reference = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        if let Some(path) = find_unknown_key(&doc, &reference, "") {
            return Err(cfg_err(path, "unknown key"));
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| cfg_err("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(self.hash_bytes())
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            categories: self.scene.categories,
            bits: self.model.bits,
            semantic_bits: self.model.semantic_bits,
            in_channels: 1,
            hidden: self.model.hidden,
            pyramid: self.model.pyramid.clone(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            depth: self.retrieval.eval_depth,
            threshold: self.retrieval.threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.proposals.validate()?;
        if self.proposals.count < self.scene.max_objects {
            return Err(cfg_err(
                "proposals.count",
                format!("{} proposals cannot cover {} objects", self.proposals.count, self.scene.max_objects),
            ));
        }
        for (field, n) in [
            ("splits.train", self.splits.train),
            ("splits.database", self.splits.database),
            ("splits.query", self.splits.query),
        ] {
            if n == 0 {
                return Err(cfg_err(field, "must be positive"));
            }
        }
        self.model_shape().validate().map_err(|e| match e {
            Error::Config { path, msg } if path.starts_with("pyramid") => cfg_err(format!("model.{path}"), msg),
            other => other,
        })?;
        self.train.validate()?;
        let r = &self.retrieval;
        if !r.threshold.is_finite() {
            return Err(cfg_err("retrieval.threshold", format!("must be finite, got {}", r.threshold)));
        }
        if r.top_k == 0 {
            return Err(cfg_err("retrieval.top_k", "must be positive"));
        }
        if r.eval_depth == 0 {
            return Err(cfg_err("retrieval.eval_depth", "must be positive"));
        }
        Ok(())
    }
}
