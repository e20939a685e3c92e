//! Directory archives: `manifest.json`, `vocab.json` and one raw
//! little-endian row-major file per named array.
//!
//! The same layout doubles as the import format for externally trained
//! backbones, so an exporter in any ecosystem only has to write a manifest
//! and a handful of `.bin` files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::params::ParameterStore;
use crate::backend::transformer::{ModelConfig, ToyTransformer};
use crate::backend::vocab::{SpecialTokenNames, Vocabulary};
use crate::error::{Error, Result};
use crate::prompt::layout::LayoutSpec;
use crate::tensor::{DType, Float, Matrix};
use crate::train::optim::OptimizerState;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentEntry {
    pub name: String,
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

/// Selection metric of a saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub layout: Option<LayoutSpec>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metric: Option<MetricRecord>,
    #[serde(default)]
    pub decoder_layers: Option<usize>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    #[serde(default)]
    pub version: String,
    pub model_config: ModelConfig,
    #[serde(default)]
    pub vocab_sha256: String,
    #[serde(default)]
    pub prompt_bank_shape: Option<[usize; 2]>,
    pub dtype: DType,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub optimizer: Option<OptimizerManifest>,
    #[serde(default)]
    pub metadata: CheckpointMetadata,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub metadata: CheckpointMetadata,
}

fn prompt_bank_shape<T: Float>(store: &ParameterStore<T>) -> Option<[usize; 2]> {
    store.by_name("prompt.embeddings").map(|m| [m.rows(), m.cols()])
}

fn write_array<T: Float>(path: &Path, m: &Matrix<T>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * T::DTYPE.size_of());
    for &v in m.data() {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_array<T: Float>(path: &Path, shape: [usize; 2], dtype: DType) -> Result<Matrix<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let width = dtype.size_of();
    let expected = shape[0] * shape[1] * width;
    if bytes.len() != expected {
        return Err(Error::Incompatible(vec![format!(
            "{}: {} bytes, expected {expected} for shape {:?} {dtype}",
            path.display(),
            bytes.len(),
            shape
        )]));
    }
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(width)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(width)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    };
    Ok(Matrix::from_vec(shape[0], shape[1], data))
}

/// Writes `checkpoint` into `dir`, creating it if needed. Existing files
/// with the same names are overwritten.
pub fn save_checkpoint<T: Float>(dir: &Path, checkpoint: &Checkpoint<T>) -> Result<()> {
    let arrays_dir = dir.join("arrays");
    fs::create_dir_all(&arrays_dir)
        .map_err(|e| Error::io(format!("creating {}", arrays_dir.display()), e))?;
    let mut arrays = Vec::with_capacity(checkpoint.store.len());
    for (id, name, value) in checkpoint.store.iter() {
        let file = format!("arrays/{id:04}.bin");
        write_array(&dir.join(&file), value)?;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: [value.rows(), value.cols()],
            file,
        });
    }
    let optimizer = match &checkpoint.optimizer {
        Some(state) => {
            let mut moments = Vec::new();
            for (id, (m, v)) in state.first.iter().zip(&state.second).enumerate() {
                if let (Some(m), Some(v)) = (m, v) {
                    let first = format!("arrays/{id:04}.m.bin");
                    let second = format!("arrays/{id:04}.v.bin");
                    write_array(&dir.join(&first), m)?;
                    write_array(&dir.join(&second), v)?;
                    moments.push(MomentEntry {
                        name: checkpoint.store.name(id).to_string(),
                        first,
                        second,
                    });
                }
            }
            Some(OptimizerManifest {
                step: state.step,
                moments,
            })
        }
        None => None,
    };
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        version: version_string(),
        model_config: checkpoint.config.clone(),
        vocab_sha256: checkpoint.vocab.sha256(),
        prompt_bank_shape: prompt_bank_shape(&checkpoint.store),
        dtype: T::DTYPE,
        arrays,
        optimizer,
        metadata: checkpoint.metadata.clone(),
    };
    let vocab_path = dir.join(VOCAB_FILE);
    fs::write(&vocab_path, checkpoint.vocab.to_json()?)
        .map_err(|e| Error::io(format!("writing {}", vocab_path.display()), e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(format!("writing {}", manifest_path.display()), e))?;
    Ok(())
}

fn read_store<T: Float>(dir: &Path, manifest: &Manifest) -> Result<ParameterStore<T>> {
    let mut store = ParameterStore::new();
    for entry in &manifest.arrays {
        let value = read_array(&dir.join(&entry.file), entry.shape, manifest.dtype)?;
        store.insert(entry.name.clone(), value)?;
    }
    Ok(store)
}

fn read_vocab(dir: &Path, manifest: &Manifest) -> Result<Vocabulary> {
    let json = dir.join(VOCAB_FILE);
    let vocab = if json.exists() {
        let text = fs::read_to_string(&json)
            .map_err(|e| Error::io(format!("reading {}", json.display()), e))?;
        Vocabulary::from_json(&text)?
    } else {
        let txt = dir.join("vocab.txt");
        let text = fs::read_to_string(&txt)
            .map_err(|e| Error::io(format!("reading {}", txt.display()), e))?;
        Vocabulary::from_lines(&text, SpecialTokenNames::default(), &[])?
    };
    if !manifest.vocab_sha256.is_empty() && vocab.sha256() != manifest.vocab_sha256 {
        return Err(Error::Incompatible(vec![format!(
            "vocabulary hash {} does not match manifest {}",
            vocab.sha256(),
            manifest.vocab_sha256
        )]));
    }
    Ok(vocab)
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = Manifest::read(dir)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Incompatible(vec![format!(
            "schema_version {} (supported: {SCHEMA_VERSION})",
            manifest.schema_version
        )]));
    }
    let store = read_store::<T>(dir, &manifest)?;
    let vocab = read_vocab(dir, &manifest)?;
    let optimizer = match &manifest.optimizer {
        Some(opt) => {
            let mut state = OptimizerState::new(store.len());
            state.step = opt.step;
            for entry in &opt.moments {
                let id = store.id(&entry.name).ok_or_else(|| {
                    Error::Incompatible(vec![format!("optimizer moment for unknown array {}", entry.name)])
                })?;
                let (rows, cols) = store.get(id).shape();
                state.first[id] = Some(read_array(&dir.join(&entry.first), [rows, cols], manifest.dtype)?);
                state.second[id] = Some(read_array(&dir.join(&entry.second), [rows, cols], manifest.dtype)?);
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        config: manifest.model_config,
        vocab,
        store,
        optimizer,
        metadata: manifest.metadata,
    })
}

/// Loads and checks the archive against what the caller is about to run
/// with, reporting every mismatch at once.
pub fn load_compatible<T: Float>(
    dir: &Path,
    config: &ModelConfig,
    vocab_sha256: &str,
) -> Result<Checkpoint<T>> {
    let manifest = Manifest::read(dir)?;
    let mut problems = Vec::new();
    if manifest.vocab_sha256 != vocab_sha256 {
        problems.push(format!(
            "vocab_sha256: archive {} vs expected {vocab_sha256}",
            manifest.vocab_sha256
        ));
    }
    if &manifest.model_config != config {
        problems.push(format!(
            "model_config: archive {:?} vs expected {:?}",
            manifest.model_config, config
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Incompatible(problems));
    }
    let checkpoint = load_checkpoint::<T>(dir)?;
    ToyTransformer::bind(&checkpoint.store, config)?;
    Ok(checkpoint)
}

/// An externally exported backbone, converted to the training precision.
#[derive(Debug)]
pub struct ImportedBackbone {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore<f32>,
    pub model: ToyTransformer,
    pub source: PathBuf,
}

/// Reads a weight archive written by an external exporter. Arrays may be
/// stored in either precision; names and shapes must match the built-in
/// encoder layout. The vocabulary comes from `vocab.json`, or from a
/// one-token-per-line `vocab.txt` for subword vocabularies.
pub fn import_weights(dir: &Path) -> Result<ImportedBackbone> {
    let manifest = Manifest::read(dir)?;
    manifest.model_config.validate()?;
    let store = read_store::<f32>(dir, &manifest)?;
    let vocab = read_vocab(dir, &manifest)?;
    if vocab.len() != manifest.model_config.vocab_size {
        return Err(Error::Incompatible(vec![format!(
            "vocabulary has {} entries but model_config.vocab_size is {}",
            vocab.len(),
            manifest.model_config.vocab_size
        )]));
    }
    let model = ToyTransformer::bind(&store, &manifest.model_config)?;
    log::info!(
        "imported {} arrays ({} scalars, stored as {}) from {}",
        store.len(),
        store.num_scalars(),
        manifest.dtype,
        dir.display()
    );
    Ok(ImportedBackbone {
        config: manifest.model_config,
        vocab,
        store,
        model,
        source: dir.to_path_buf(),
    })
}
