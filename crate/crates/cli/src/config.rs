//! Pipeline configuration.
//!
//! The file is a flat JSON object whose keys are `section.field`, for example
//! `{"decoder.num_queries": 16, "train.learning_rate": 0.001}`. Every key can
//! also be set through an environment variable named `RA_RRG_` followed by the
//! key in upper case with dots replaced by underscores
//! (`RA_RRG_DECODER_NUM_QUERIES`). Precedence, lowest first: built-in
//! defaults, config file, environment, command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rarrg::decoder::DecoderConfig;
use rarrg::losses::LossConfig;
use rarrg::trainer::{SyntheticCorpusConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "RA_RRG_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    pub threshold: f64,
    /// `hash`, `file` or `remote`.
    pub provider: String,
    /// Embedding dimension; defaults to `decoder.d_embed`.
    pub dim: Option<usize>,
    /// Phrase table for the file provider.
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for IndexSettings {
    fn default() -> Self {
        Self {
            threshold: 0.4,
            provider: "hash".into(),
            dim: None,
            path: None,
            endpoint: None,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSettings {
    /// `mock` or `remote`.
    pub backend: String,
    pub endpoint: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub temperature: f64,
    pub max_in_flight: usize,
}

impl Default for ClientSettings {
    fn default() -> Self {
        Self {
            backend: "mock".into(),
            endpoint: None,
            model: "gpt-4o".into(),
            timeout_ms: 60_000,
            temperature: 0.0,
            max_in_flight: rarrg::rag::DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateSettings {
    pub extraction: Option<PathBuf>,
    pub single_view: Option<PathBuf>,
    pub multi_view: Option<PathBuf>,
    pub examples: usize,
}

impl Default for TemplateSettings {
    fn default() -> Self {
        Self {
            extraction: None,
            single_view: None,
            multi_view: None,
            examples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub corpus: SyntheticCorpusConfig,
    pub index: IndexSettings,
    pub client: ClientSettings,
    pub templates: TemplateSettings,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let (section, field) = key.split_once('.').expect("keys are section.field");
        let entry = root.entry(section.to_owned()).or_insert_with(|| Value::Object(Map::new()));
        entry.as_object_mut().expect("sections are objects").insert(field.to_owned(), v.clone());
    }
    Value::Object(root)
}

fn same_kind(default: &Value, given: &Value) -> bool {
    matches!(
        (default, given),
        (Value::Null, _)
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Bool(_), Value::Bool(_))
    )
}

/// Every configurable key with its default value.
pub fn default_keys() -> BTreeMap<String, Value> {
    let mut flat = BTreeMap::new();
    flatten("", &serde_json::to_value(PipelineConfig::default()).expect("serializable"), &mut flat);
    flat
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
}

impl PipelineConfig {
    /// Loads defaults, then the optional file, then environment overrides
    /// looked up through `env`.
    pub fn load(path: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> anyhow::Result<Self> {
        let mut flat = default_keys();
        let defaults = flat.clone();

        let mut set = |key: &str, value: Value, origin: &str| -> anyhow::Result<()> {
            let default = defaults
                .get(key)
                .ok_or_else(|| rarrg::Error::Validation(format!("unknown config key {key:?} in {origin}")))?;
            if value.is_null() && !default.is_null() {
                return Err(rarrg::Error::Validation(format!("config key {key:?} in {origin} is missing a value")).into());
            }
            if !same_kind(default, &value) {
                return Err(rarrg::Error::Validation(format!(
                    "config key {key:?} in {origin} expects a value like {default}, got {value}"
                ))
                .into());
            }
            flat.insert(key.to_owned(), value);
            Ok(())
        };

        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| rarrg::Error::parse(path.display().to_string(), e.to_string()))?;
            let Value::Object(map) = value else {
                bail!(rarrg::Error::Validation(format!("config {} must be a JSON object", path.display())));
            };
            for (k, v) in map {
                set(&k, v, &path.display().to_string())?;
            }
        }

        for key in defaults.keys() {
            let name = env_var_name(key);
            if let Some(raw) = env(&name) {
                let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
                set(key, value, &name)?;
            }
        }

        let cfg: PipelineConfig = serde_json::from_value(unflatten(&flat))
            .map_err(|e| rarrg::Error::Validation(format!("invalid configuration: {e}")))?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> anyhow::Result<()> {
        let paths = [
            ("index.path", &self.index.path),
            ("templates.extraction", &self.templates.extraction),
            ("templates.single_view", &self.templates.single_view),
            ("templates.multi_view", &self.templates.multi_view),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                if !p.is_file() {
                    bail!(rarrg::Error::Validation(format!("{key}: file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.index.dim.unwrap_or(self.decoder.d_embed)
    }
}
