//! Run configuration: a TOML file with `[data]`, `[model]`, `[gate]` and
//! `[train]` tables, overridden by dotted `section.key=value` pairs.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::model::ModelConfig;
use crate::text::NewsFields;
use crate::training::TrainConfig;
use crate::transformer::TransformerConfig;

pub const DATA_DIR_ENV: &str = "GATEFORMER_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Data root; falls back to `$GATEFORMER_DATA_DIR`.
    pub dir: Option<PathBuf>,
    pub news: String,
    pub train: String,
    /// Empty disables evaluation.
    pub dev: String,
    pub vocab: String,
    pub max_tokens: usize,
    pub max_history: usize,
    /// `title_abstract` or `title`.
    pub fields: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            news: "news.tsv".into(),
            train: "behaviors.tsv".into(),
            dev: "behaviors_dev.tsv".into(),
            vocab: "vocab.txt".into(),
            max_tokens: 30,
            max_history: 50,
            fields: "title_abstract".into(),
        }
    }
}

impl DataConfig {
    pub fn news_fields(&self) -> Result<NewsFields> {
        match self.fields.as_str() {
            "title_abstract" => Ok(NewsFields::TitleAbstract),
            "title" => Ok(NewsFields::TitleOnly),
            other => Err(Error::Config(format!("data.fields: unknown value `{other}` (title_abstract|title)"))),
        }
    }

    pub fn root(&self) -> Result<&Path> {
        self.dir
            .as_deref()
            .ok_or_else(|| Error::Config(format!("no data directory: set data.dir, --data or {DATA_DIR_ENV}")))
    }

    pub fn path(&self, file: &str) -> Result<PathBuf> {
        Ok(self.root()?.join(file))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: TransformerConfig,
    pub gate: GateConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, fills the data
    /// directory from the environment when unset, and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_dotted(&mut table, key, value)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if cfg.data.dir.is_none() {
            cfg.data.dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.data.news_fields()?;
        if self.data.max_tokens == 0 || self.data.max_history == 0 {
            return Err(Error::Config("data.max_tokens and data.max_history must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            model: self.model.clone(),
            gate: self.gate.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form. The
    /// data directory and worker count do not enter.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.data.dir = None;
        c.train.threads = 1;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{key}` must look like section.key")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}
