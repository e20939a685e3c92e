//! Preprocessing: comment removal, length window, negative sampling,
//! balancing and splitting. Every step is a pure function of its inputs
//! and the seed.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::comments::strip_comments;
use crate::data::record::{records_to_jsonl, FieldKind, RawRecord};
use crate::error::{Error, Result};

pub const MIN_CODE_TOKENS: usize = 125;
pub const MAX_CODE_TOKENS: usize = 250;
pub const MAX_NL_TOKENS: usize = 64;
pub const NEGATIVE_ATTEMPTS: usize = 100;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthWindow {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_nl_tokens: usize,
}

impl Default for LengthWindow {
    fn default() -> Self {
        Self {
            min_tokens: MIN_CODE_TOKENS,
            max_tokens: MAX_CODE_TOKENS,
            max_nl_tokens: MAX_NL_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub nl_too_long: usize,
}

/// Keeps a record iff every code field has between `min_tokens` and
/// `max_tokens` tokens (inclusive) and every natural-language field has at
/// most `max_nl_tokens`.
pub fn length_filter(
    records: Vec<RawRecord>,
    window: LengthWindow,
    count: &dyn Fn(&str) -> usize,
) -> (Vec<RawRecord>, FilterStats) {
    let mut stats = FilterStats {
        input: records.len(),
        ..Default::default()
    };
    let kept: Vec<RawRecord> = records
        .into_iter()
        .filter(|r| {
            for (kind, text) in r.fields() {
                let n = count(text);
                match kind {
                    FieldKind::Code if n < window.min_tokens => {
                        stats.too_short += 1;
                        return false;
                    }
                    FieldKind::Code if n > window.max_tokens => {
                        stats.too_long += 1;
                        return false;
                    }
                    FieldKind::NaturalLanguage if n > window.max_nl_tokens => {
                        stats.nl_too_long += 1;
                        return false;
                    }
                    _ => {}
                }
            }
            true
        })
        .collect();
    stats.kept = kept.len();
    (kept, stats)
}

fn pair_key(r: &RawRecord) -> (&str, &str) {
    (r.x1.as_deref().unwrap_or(""), r.x2.as_deref().unwrap_or(""))
}

/// Pairs every positive with one negative made from its own `x1` and the
/// `x2` of another positive of the same language. A draw that recreates a
/// positive pairing (or an already generated negative) is rejected and
/// redrawn, up to [`NEGATIVE_ATTEMPTS`] times.
///
/// Output order: each positive immediately followed by its negative.
pub fn balance_with_negatives(positives: &[RawRecord], seed: u64) -> Result<Vec<RawRecord>> {
    if let Some(bad) = positives.iter().find(|r| r.label != Some(1) || !r.task.is_classification()) {
        return Err(Error::Data(format!("record {} is not a positive pair", bad.id)));
    }
    let mut by_lang: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in positives.iter().enumerate() {
        by_lang.entry(r.lang.as_str()).or_default().push(i);
    }
    let positive_keys: HashSet<(&str, &str)> = positives.iter().map(pair_key).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negative_of: Vec<Option<usize>> = vec![None; positives.len()];
    for (lang, members) in &by_lang {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "language {lang} has {} positive pair(s); at least 2 are needed to sample negatives",
                members.len()
            )));
        }
        let mut generated: HashSet<(&str, &str)> = HashSet::new();
        for &i in members {
            let x1 = pair_key(&positives[i]).0;
            let mut chosen = None;
            for _ in 0..NEGATIVE_ATTEMPTS {
                let j = members[rng.random_range(0..members.len())];
                if j == i {
                    continue;
                }
                let key = (x1, pair_key(&positives[j]).1);
                if positive_keys.contains(&key) || generated.contains(&key) {
                    continue;
                }
                generated.insert(key);
                chosen = Some(j);
                break;
            }
            negative_of[i] = Some(chosen.ok_or_else(|| {
                Error::Data(format!(
                    "could not form a non-colliding negative for {} after {NEGATIVE_ATTEMPTS} attempts",
                    positives[i].id
                ))
            })?);
        }
    }
    let mut out = Vec::with_capacity(2 * positives.len());
    for (i, pos) in positives.iter().enumerate() {
        let j = negative_of[i].expect("every positive was assigned");
        let mut neg = pos.clone();
        neg.id = format!("{}~{}", pos.id, positives[j].id);
        neg.x2 = positives[j].x2.clone();
        neg.label = Some(0);
        out.push(pos.clone());
        out.push(neg);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Seeded shuffle followed by a contiguous cut at the rounded ratios.
pub fn split(records: Vec<RawRecord>, ratios: [f64; 3], seed: u64) -> Result<[Vec<RawRecord>; 3]> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::Config(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut records = records;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n = records.len();
    let n_train = (((n as f64) * ratios[0]).round() as usize).min(n);
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let test = records.split_off(n_train + n_valid);
    let valid = records.split_off(n_train);
    Ok([records, valid, test])
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    #[serde(default)]
    pub window: LengthWindow,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default = "default_true")]
    pub strip_comments: bool,
    /// Regenerate negatives for pair tasks.
    #[serde(default = "default_true")]
    pub balance: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            window: LengthWindow::default(),
            ratios: default_ratios(),
            strip_comments: true,
            balance: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config: PrepareConfig,
    pub inputs: BTreeMap<String, String>,
    pub filter: FilterStats,
    pub discarded_negatives: usize,
    pub positives: usize,
    pub negatives: usize,
    pub counts: SplitCounts,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<RawRecord>,
    pub valid: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
    pub provenance: Provenance,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "valid.jsonl", "test.jsonl"];
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Strip, filter, balance (pair tasks) and split, in that order.
/// `inputs` maps file names to content hashes for the provenance record.
pub fn prepare(
    records: Vec<RawRecord>,
    config: &PrepareConfig,
    count: &dyn Fn(&str) -> usize,
    inputs: BTreeMap<String, String>,
) -> Result<DatasetSplit> {
    let mut records = records;
    if config.strip_comments {
        for r in &mut records {
            let lang = r.lang.clone();
            r.map_code(|code| strip_comments(code, &lang));
        }
    }
    let (kept, filter) = length_filter(records, config.window, count);
    let classification = kept.first().is_some_and(|r| r.task.is_classification());
    if kept.iter().any(|r| r.task.is_classification() != classification) {
        return Err(Error::Data("a corpus may not mix pair and generation tasks".into()));
    }
    let mut discarded_negatives = 0;
    let balanced = if classification && config.balance {
        let (positives, negatives): (Vec<_>, Vec<_>) = kept.into_iter().partition(|r| r.label == Some(1));
        discarded_negatives = negatives.len();
        if discarded_negatives > 0 {
            log::info!("replacing {discarded_negatives} supplied negatives with sampled ones");
        }
        balance_with_negatives(&positives, config.seed)?
    } else {
        kept
    };
    let positives = balanced.iter().filter(|r| r.label == Some(1)).count();
    let negatives = balanced.iter().filter(|r| r.label == Some(0)).count();
    let [train, valid, test] = split(balanced, config.ratios, config.seed)?;
    let mut outputs = BTreeMap::new();
    for (name, part) in SPLIT_FILES.iter().zip([&train, &valid, &test]) {
        outputs.insert(name.to_string(), sha256_hex(records_to_jsonl(part)?.as_bytes()));
    }
    let provenance = Provenance {
        seed: config.seed,
        config: config.clone(),
        inputs,
        filter,
        discarded_negatives,
        positives,
        negatives,
        counts: SplitCounts {
            train: train.len(),
            valid: valid.len(),
            test: test.len(),
        },
        outputs,
    };
    Ok(DatasetSplit {
        train,
        valid,
        test,
        provenance,
    })
}

impl DatasetSplit {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, part) in SPLIT_FILES.iter().zip([&self.train, &self.valid, &self.test]) {
            let path = dir.join(name);
            fs::write(&path, records_to_jsonl(part)?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        let path = dir.join(PROVENANCE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.provenance)? + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str| crate::data::record::load_records(&dir.join(name));
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Self {
            train: load(SPLIT_FILES[0])?,
            valid: load(SPLIT_FILES[1])?,
            test: load(SPLIT_FILES[2])?,
            provenance: serde_json::from_str(&text)?,
        })
    }
}
