//! The run configuration file and `--set` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use xlprompt_core::backend::transformer::ModelConfig;
use xlprompt_core::data::pipeline::{sha256_hex, PrepareConfig};
use xlprompt_core::eval::{AblationAxis, ExperimentMode, ExperimentSpec, Metric};
use xlprompt_core::prompt::LayoutSpec;
use xlprompt_core::task::decoder::{DecoderConfig, Strategy};
use xlprompt_core::task::TaskKind;
use xlprompt_core::train::TrainConfig;
use xlprompt_core::{Error, Result};

/// Model architecture without the vocabulary size, which comes from the
/// vocabulary built for the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub ffn_dim: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_true")]
    pub tie_mlm_head: bool,
}

impl ArchitectureConfig {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            vocab_size,
            tie_mlm_head: self.tie_mlm_head,
        }
    }
}

fn default_max_seq_len() -> usize {
    ModelConfig::toy(2).max_seq_len
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    #[default]
    Whitespace,
    Wordpiece,
}

/// Exactly one of `config` (fresh weights) or `archive` (a saved backbone).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ArchitectureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerKind,
}

fn default_vocab_size() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    #[serde(default = "default_vocab_size")]
    pub max_size: usize,
    /// Language tags to reserve; empty means every language in the data.
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub reserved: Vec<String>,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            max_size: default_vocab_size(),
            languages: Vec::new(),
            reserved: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `prepare-data` for the source language.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Same for the target language; defaults to `source`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Line-delimited record files whose code fields feed MLM pre-training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pretrain: Vec<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: ExperimentMode,
    pub task: TaskKind,
    pub source_lang: String,
    pub target_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_train_size: Option<usize>,
    #[serde(default)]
    pub few_shot_k: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
}

fn default_mask_rate() -> f64 {
    0.15
}

fn default_held_out() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    /// Fraction of the corpus kept aside for the held-out MLM loss.
    #[serde(default = "default_held_out")]
    pub held_out: f64,
    #[serde(default = "TrainConfig::mlm")]
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            mask_rate: default_mask_rate(),
            held_out: default_held_out(),
            train: TrainConfig::mlm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub axis: AblationAxis,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelSection,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub layout: LayoutSpec,
    /// Label → word; required for classification tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer: Option<BTreeMap<String, String>>,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prepare: Option<PrepareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

/// Parses `key=value`; the value is read as a TOML scalar, falling back to
/// a bare string.
fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{raw}` has an empty key segment")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    if matches!(parsed, toml::Value::Table(_) | toml::Value::Array(_)) {
        return Err(Error::Config(format!("override `{key}` must be a scalar")));
    }
    Ok((key.split('.').map(String::from).collect(), parsed))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut table = root;
    for (i, part) in parents.iter().enumerate() {
        let entry = table
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override path `{}` runs through a non-table value", path[..=i].join(".")))
        })?;
    }
    if let Some(existing) = table.get(last) {
        if matches!(existing, toml::Value::Table(_) | toml::Value::Array(_)) {
            return Err(Error::Config(format!("override `{}` must target a scalar field", path.join("."))));
        }
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn schema_error(e: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let message = inner.message().to_string();
    if path.is_empty() || path == "." {
        Error::Config(format!("config: {message}"))
    } else {
        Error::Config(format!("config field `{path}`: {message}"))
    }
}

impl RunConfig {
    fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::Config(format!("config is not valid TOML: {}", e.message())))?;
        serde_path_to_error::deserialize(de).map_err(schema_error)
    }

    /// Parses `text`, then applies `overrides` on top of the fully
    /// defaulted configuration.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let base = Self::from_toml(text)?;
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut table: toml::Table = base
            .to_toml()?
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            apply_override(&mut table, &path, value)?;
        }
        Self::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the effective configuration.
    pub fn run_id(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes())[..16].to_string())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(self.run_id()?))
    }

    pub fn spec(&self) -> ExperimentSpec {
        let e = &self.experiment;
        ExperimentSpec {
            mode: e.mode,
            task: e.task,
            source_lang: e.source_lang.clone(),
            target_lang: e.target_lang.clone(),
            source_train_size: e.source_train_size,
            few_shot_k: e.few_shot_k,
            layout: self.layout,
            seeds: e.seeds.clone(),
            metrics: e.metrics.clone(),
            test_size: e.test_size,
        }
    }

    pub fn target_dir(&self) -> Option<&Path> {
        self.data.target.as_deref().or(self.data.source.as_deref())
    }

    /// Schema-level checks that do not touch the file system.
    pub fn validate_schema(&self) -> Result<()> {
        match (&self.model.config, &self.model.archive) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("model: give either `config` or `archive`, not both".into()))
            }
            (None, None) => return Err(Error::Config("model: one of `config` or `archive` is required".into())),
            _ => {}
        }
        if self.experiment.task.is_classification() && self.verbalizer.is_none() {
            return Err(Error::Config(format!(
                "verbalizer: a label → word map is required for classification task {}",
                self.experiment.task
            )));
        }
        self.spec().validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        if !(0.0..1.0).contains(&self.pretrain.held_out) {
            return Err(Error::Config(format!("pretrain.held_out {} is outside [0, 1)", self.pretrain.held_out)));
        }
        Ok(())
    }

    /// Full validation: schema plus every referenced path.
    pub fn validate(&self) -> Result<()> {
        self.validate_schema()?;
        let mut missing = Vec::new();
        let mut need = |field: &str, path: &Path| {
            if !path.exists() {
                missing.push(format!("{field} = {}", path.display()));
            }
        };
        if let Some(a) = &self.model.archive {
            need("model.archive", a);
        }
        if let Some(p) = &self.data.source {
            need("data.source", p);
        }
        if let Some(p) = &self.data.target {
            need("data.target", p);
        }
        for (i, p) in self.data.pretrain.iter().enumerate() {
            need(&format!("data.pretrain[{i}]"), p);
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("referenced paths do not exist: {}", missing.join(", "))))
        }
    }
}
