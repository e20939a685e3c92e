//! The six subcommands. Every artifact lands under
//! `<output_dir>/<run id>/`, and no artifact carries a timestamp, so a rerun
//! with identical inputs rewrites identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use xlprompt_core::backend::checkpoint::{
    import_weights, load_checkpoint, save_checkpoint, version_string, Checkpoint, CheckpointMetadata, MetricRecord,
};
use xlprompt_core::backend::params::ParameterStore;
use xlprompt_core::backend::transformer::ToyTransformer;
use xlprompt_core::backend::vocab::{split_pieces, Tokenizer, Vocabulary, WhitespaceTokenizer, WordPieceTokenizer};
use xlprompt_core::data::pipeline::{prepare, sha256_hex, DatasetSplit, PrepareConfig};
use xlprompt_core::data::record::{load_records, FieldKind, RawRecord};
use xlprompt_core::eval::{
    ablate, build_report, evaluate, train_seed, AblationAxis, AblationTable, Backbone, Corpus, EvalReport,
    Experiment, SeedRun,
};
use xlprompt_core::task::TaskKind;
use xlprompt_core::train::{continual_mlm_pretrain, derive_seed, MarkedCode, MlmPretraining};
use xlprompt_core::{Error, Result};

use crate::config::{RunConfig, TokenizerKind};

pub const BACKBONE_DIR: &str = "backbone";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train.json";

const TASK_PREFIXES: [&str; 3] = ["prompt.", "decoder.", "head."];

pub fn seed_dir(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("seed-{seed}"))
}

fn io_err(what: &str, path: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err("creating", parent))?;
    }
    fs::write(path, bytes).map_err(io_err("writing", path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Line-delimited JSON event log, truncated when opened.
pub struct RunLog {
    out: BufWriter<fs::File>,
    command: &'static str,
}

impl RunLog {
    pub fn create(run_dir: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(io_err("creating", run_dir))?;
        let path = run_dir.join(format!("{command}.log.jsonl"));
        let file = fs::File::create(&path).map_err(io_err("creating", &path))?;
        Ok(Self {
            out: BufWriter::new(file),
            command,
        })
    }

    pub fn event(&mut self, event: &str, mut fields: serde_json::Value) -> Result<()> {
        if let Some(map) = fields.as_object_mut() {
            map.insert("command".into(), json!(self.command));
            map.insert("event".into(), json!(event));
        }
        let line = serde_json::to_string(&fields)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io("writing run log", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("flushing run log", e))
    }
}

/// Writes the effective configuration and a provenance record for
/// `command` into the run directory.
fn write_provenance(cfg: &RunConfig, overrides: &[String], command: &str, extra: serde_json::Value) -> Result<PathBuf> {
    let run_dir = cfg.run_dir()?;
    write_file(&run_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let record = json!({
        "run_id": cfg.run_id()?,
        "command": command,
        "version": version_string(),
        "overrides": overrides,
        "config": cfg,
        "details": extra,
    });
    write_json(&run_dir.join(format!("{command}.provenance.json")), &record)?;
    Ok(run_dir)
}

fn record_texts(r: &RawRecord) -> impl Iterator<Item = &str> {
    r.fields().into_iter().map(|(_, text)| text)
}

fn load_split(dir: &Path) -> Result<Corpus> {
    Ok(DatasetSplit::read(dir)?.into())
}

struct Inputs {
    source: Corpus,
    target: Corpus,
    pretrain: Vec<RawRecord>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let source = match &cfg.data.source {
        Some(dir) => load_split(dir)?,
        None => Corpus::default(),
    };
    let target = match (&cfg.data.target, &cfg.data.source) {
        (Some(t), Some(s)) if t == s => source.clone(),
        (Some(t), _) => load_split(t)?,
        (None, _) => source.clone(),
    };
    let mut pretrain = Vec::new();
    for path in &cfg.data.pretrain {
        pretrain.extend(load_records(path)?);
    }
    Ok(Inputs {
        source,
        target,
        pretrain,
    })
}

impl Inputs {
    fn records(&self) -> impl Iterator<Item = &RawRecord> {
        [&self.source, &self.target]
            .into_iter()
            .flat_map(|c| c.train.iter().chain(&c.valid).chain(&c.test))
            .chain(&self.pretrain)
    }
}

fn make_tokenizer(kind: TokenizerKind, vocab: Vocabulary) -> Box<dyn Tokenizer> {
    match kind {
        TokenizerKind::Whitespace => Box::new(WhitespaceTokenizer::new(vocab)),
        TokenizerKind::Wordpiece => Box::new(WordPieceTokenizer::new(vocab)),
    }
}

/// The backbone named by `model`: a saved archive with its task arrays
/// removed, or fresh weights over a vocabulary built from the run's data.
fn load_backbone(cfg: &RunConfig, inputs: &Inputs, init_seed: u64) -> Result<(Backbone, Box<dyn Tokenizer>)> {
    if let Some(dir) = &cfg.model.archive {
        let imported = import_weights(dir)?;
        let mut store = imported.store;
        for p in TASK_PREFIXES {
            store.remove_prefix(p);
        }
        let tokenizer = make_tokenizer(cfg.model.tokenizer, imported.vocab.clone());
        let backbone = Backbone {
            config: imported.config,
            vocab: imported.vocab,
            store,
        };
        return Ok((backbone, tokenizer));
    }
    let arch = cfg.model.config.as_ref().expect("validated: config or archive");
    let mut languages: BTreeSet<String> = cfg.vocab.languages.iter().cloned().collect();
    if languages.is_empty() {
        languages.extend(inputs.records().map(|r| r.lang.clone()));
        languages.insert(cfg.experiment.source_lang.clone());
        languages.insert(cfg.experiment.target_lang.clone());
    }
    let languages: Vec<String> = languages.into_iter().collect();
    let mut reserved: Vec<&str> = cfg.vocab.reserved.iter().map(String::as_str).collect();
    if let Some(words) = &cfg.verbalizer {
        reserved.extend(words.values().map(String::as_str));
    }
    let vocab = Vocabulary::build(inputs.records().flat_map(record_texts), &languages, &reserved, cfg.vocab.max_size)?;
    let config = arch.with_vocab(vocab.len());
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    ToyTransformer::init(&mut store, &config, &mut rng)?;
    let tokenizer = make_tokenizer(cfg.model.tokenizer, vocab.clone());
    Ok((Backbone { config, vocab, store }, tokenizer))
}

/// Reads, checks and prepares a raw corpus; writes the three splits and a
/// provenance sidecar into `out_dir`.
pub fn prepare_data(input: &Path, out_dir: &Path, task: TaskKind, config: &PrepareConfig) -> Result<DatasetSplit> {
    let bytes = fs::read(input).map_err(io_err("reading", input))?;
    let records = load_records(input)?;
    let text = String::from_utf8_lossy(&bytes);
    let line_numbers: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (r, &line) in records.iter().zip(&line_numbers) {
        if r.task != task {
            return Err(Error::Validation {
                path: input.to_path_buf(),
                line,
                message: format!("record {} is a {} record, expected {task}", r.id, r.task),
            });
        }
    }
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| input.display().to_string());
    let inputs = BTreeMap::from([(name, sha256_hex(&bytes))]);
    let count = |s: &str| split_pieces(s).len();
    let split = prepare(records, config, &count, inputs)?;
    split.write(out_dir)?;
    Ok(split)
}

/// Continual MLM pre-training on the code fields of `data.pretrain`.
/// Returns the directory of the saved backbone.
pub fn pretrain(cfg: &RunConfig, overrides: &[String]) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.data.pretrain.is_empty() {
        return Err(Error::Config("data.pretrain: at least one corpus file is required".into()));
    }
    let inputs = load_inputs(cfg)?;
    let seed = cfg.pretrain.train.seed;
    let (backbone, tokenizer) = load_backbone(cfg, &inputs, seed)?;
    let mut items: Vec<MarkedCode> = inputs
        .pretrain
        .iter()
        .flat_map(|r| {
            r.fields()
                .into_iter()
                .filter(|(kind, _)| *kind == FieldKind::Code)
                .enumerate()
                .map(|(k, (_, code))| MarkedCode {
                    id: format!("{}#{k}", r.id),
                    language: r.lang.clone(),
                    tokens: tokenizer.tokenize(code),
                })
                .collect::<Vec<_>>()
        })
        .collect();
    if items.len() < 2 {
        return Err(Error::Data("pre-training needs at least two code fields".into()));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
    let n_held = ((items.len() as f64 * cfg.pretrain.held_out).ceil() as usize).clamp(1, items.len() - 1);
    let held_out = items.split_off(items.len() - n_held);
    let model = ToyTransformer::bind(&backbone.store, &backbone.config)?;
    let job = MlmPretraining {
        model: &model,
        vocab: &backbone.vocab,
        corpus: &items,
        held_out: &held_out,
        mask_rate: cfg.pretrain.mask_rate,
        seed,
    };
    let run_dir = write_provenance(
        cfg,
        overrides,
        "pretrain",
        json!({ "corpus_items": items.len(), "held_out_items": held_out.len(), "vocab_sha256": backbone.vocab.sha256() }),
    )?;
    let mut log = RunLog::create(&run_dir, "pretrain")?;
    let mut log_err = Ok(());
    let out = continual_mlm_pretrain(&job, backbone.store.clone(), &cfg.pretrain.train, &mut |e| {
        if log_err.is_ok() {
            log_err = log.event("epoch", json!(e));
        }
    })?;
    log_err?;
    for s in &out.steps {
        log.event("step", json!(s))?;
    }
    let dir = run_dir.join(BACKBONE_DIR);
    let checkpoint = Checkpoint {
        config: backbone.config.clone(),
        vocab: backbone.vocab.clone(),
        store: out.store,
        optimizer: None,
        metadata: CheckpointMetadata {
            task: Some("mlm".into()),
            epoch: Some(out.best_epoch),
            metric: Some(out.metric.clone()),
            ..CheckpointMetadata::default()
        },
    };
    save_checkpoint(&dir, &checkpoint)?;
    log.event("saved", json!({ "path": dir, "sha256": checkpoint.store.content_hash() }))?;
    log.finish()?;
    Ok(dir)
}

struct Prepared {
    backbone: Backbone,
    tokenizer: Box<dyn Tokenizer>,
    inputs: Inputs,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.data.source.is_none() {
            return Err(Error::Config("data.source: a prepared dataset directory is required".into()));
        }
        let inputs = load_inputs(cfg)?;
        let (backbone, tokenizer) = load_backbone(cfg, &inputs, cfg.train.seed)?;
        Ok(Self {
            backbone,
            tokenizer,
            inputs,
        })
    }

    fn experiment<'a>(&'a self, cfg: &RunConfig) -> Experiment<'a> {
        Experiment {
            backbone: &self.backbone,
            tokenizer: self.tokenizer.as_ref(),
            source: &self.inputs.source,
            target: &self.inputs.target,
            train: cfg.train.clone(),
            verbalizer: cfg.verbalizer.clone(),
            decoder: cfg.decoder.clone(),
            strategy: cfg.strategy,
        }
    }

    fn datasets(&self) -> Result<BTreeMap<String, String>> {
        let mut d = self.inputs.source.hashes("source")?;
        d.extend(self.inputs.target.hashes("target")?);
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainedSummary {
    pub seed: u64,
    pub optimizer_steps: usize,
    pub records_seen: usize,
    pub best_epoch: usize,
    pub metric: MetricRecord,
    pub checkpoint_sha256: String,
}

/// Trains every seed and saves one checkpoint per seed.
pub fn train(cfg: &RunConfig, overrides: &[String]) -> Result<Vec<TrainedSummary>> {
    let prepared = Prepared::load(cfg)?;
    let exp = prepared.experiment(cfg);
    let spec = cfg.spec();
    let run_dir = write_provenance(
        cfg,
        overrides,
        "train",
        json!({
            "backbone_sha256": prepared.backbone.store.content_hash(),
            "vocab_sha256": prepared.backbone.vocab.sha256(),
            "datasets": prepared.datasets()?,
        }),
    )?;
    let mut log = RunLog::create(&run_dir, "train")?;
    let mut summaries = Vec::new();
    for &seed in &spec.seeds {
        let mut epochs = Vec::new();
        let trained = train_seed(&spec, &exp, seed, &mut |phase, e| epochs.push((phase.to_string(), e.clone())))?;
        for (phase, e) in &epochs {
            log.event("epoch", json!({ "seed": seed, "phase": phase, "log": e }))?;
        }
        let phases = std::iter::once(("source", &trained.source)).chain(trained.few_shot.iter().map(|f| ("few_shot", f)));
        for (phase, outcome) in phases {
            for s in &outcome.steps {
                log.event("step", json!({ "seed": seed, "phase": phase, "log": s }))?;
            }
        }
        let last = trained.few_shot.as_ref().unwrap_or(&trained.source);
        let summary = TrainedSummary {
            seed,
            optimizer_steps: trained.optimizer_steps(),
            records_seen: trained.seen_ids().len(),
            best_epoch: last.best_epoch,
            metric: last.metric.clone(),
            checkpoint_sha256: trained.store.content_hash(),
        };
        let checkpoint = Checkpoint {
            config: prepared.backbone.config.clone(),
            vocab: prepared.backbone.vocab.clone(),
            store: trained.store,
            optimizer: Some(last.optimizer.clone()),
            metadata: CheckpointMetadata {
                task: Some(spec.task.as_str().into()),
                layout: Some(spec.layout),
                epoch: Some(last.best_epoch),
                metric: Some(last.metric.clone()),
                decoder_layers: (!spec.task.is_classification()).then_some(cfg.decoder.num_layers),
                extra: BTreeMap::from([
                    ("seed".to_string(), seed.to_string()),
                    ("run_id".to_string(), cfg.run_id()?),
                ]),
            },
        };
        save_checkpoint(&seed_dir(&run_dir, seed), &checkpoint)?;
        log.event("saved", json!(summary))?;
        summaries.push(summary);
    }
    write_json(&run_dir.join(TRAIN_SUMMARY_FILE), &summaries)?;
    log.finish()?;
    Ok(summaries)
}

/// Scores saved checkpoints on the target test split without any
/// optimizer step. With `checkpoint = None`, every seed's checkpoint from
/// the run directory is used.
pub fn eval(cfg: &RunConfig, overrides: &[String], checkpoint: Option<&Path>) -> Result<EvalReport> {
    let prepared = Prepared::load(cfg)?;
    let exp = prepared.experiment(cfg);
    let mut spec = cfg.spec();
    let run_dir = cfg.run_dir()?;
    let targets: Vec<(u64, PathBuf)> = match checkpoint {
        Some(dir) => {
            let ckpt_seed = load_checkpoint::<f32>(dir)?
                .metadata
                .extra
                .get("seed")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            spec.seeds = vec![ckpt_seed];
            vec![(ckpt_seed, dir.to_path_buf())]
        }
        None => spec.seeds.iter().map(|&s| (s, seed_dir(&run_dir, s))).collect(),
    };
    write_provenance(
        cfg,
        overrides,
        "eval",
        json!({ "checkpoints": targets.iter().map(|(_, p)| p).collect::<Vec<_>>() }),
    )?;
    let mut log = RunLog::create(&run_dir, "eval")?;
    let mut runs = Vec::new();
    for (seed, dir) in targets {
        if !dir.exists() {
            return Err(Error::Data(format!(
                "no checkpoint for seed {seed} at {}; run `train` with this configuration first",
                dir.display()
            )));
        }
        let ckpt = load_checkpoint::<f32>(&dir)?;
        if ckpt.vocab.sha256() != prepared.backbone.vocab.sha256() {
            return Err(Error::Incompatible(vec![format!(
                "checkpoint {} was trained with a different vocabulary",
                dir.display()
            )]));
        }
        let metrics = evaluate(&spec, &exp, &ckpt.store)?;
        log.event(
            "eval",
            json!({ "seed": seed, "checkpoint": dir, "optimizer_steps": 0, "metrics": metrics }),
        )?;
        runs.push(SeedRun {
            seed,
            metrics,
            checkpoint_sha256: ckpt.store.content_hash(),
            optimizer_steps: 0,
            source_epochs: Vec::new(),
            few_shot_epochs: Vec::new(),
            records_seen: 0,
        });
    }
    let report = build_report(&spec, &exp, runs)?;
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    log.finish()?;
    Ok(report)
}

/// Runs one experiment per axis value; `axis`/`values` override the
/// config's `[ablation]` section.
pub fn run_ablation(
    cfg: &RunConfig,
    overrides: &[String],
    axis: Option<AblationAxis>,
    values: Option<Vec<String>>,
) -> Result<AblationTable> {
    let section = cfg.ablation.as_ref();
    let axis = axis
        .or(section.map(|s| s.axis))
        .ok_or_else(|| Error::Config("ablation.axis: no axis given in the config or on the command line".into()))?;
    let values = values
        .or_else(|| section.map(|s| s.values.clone()))
        .ok_or_else(|| Error::Config("ablation.values: no values given in the config or on the command line".into()))?;
    let prepared = Prepared::load(cfg)?;
    let exp = prepared.experiment(cfg);
    let run_dir = write_provenance(cfg, overrides, "ablate", json!({ "axis": axis, "values": values }))?;
    let mut log = RunLog::create(&run_dir, "ablate")?;
    let table = ablate(&cfg.spec(), &exp, axis, &values)?;
    for row in &table.rows {
        log.event("row", json!(row))?;
    }
    write_json(&run_dir.join(ABLATION_FILE), &table)?;
    write_file(&run_dir.join(ABLATION_CSV), table.to_csv()?.as_bytes())?;
    log.finish()?;
    Ok(table)
}

fn metric_names<'a>(rows: impl Iterator<Item = &'a BTreeMap<String, f64>>) -> Vec<String> {
    let mut names = BTreeSet::new();
    for m in rows {
        names.extend(m.keys().cloned());
    }
    names.into_iter().collect()
}

fn ablation_text(table: &AblationTable) -> String {
    let metrics = metric_names(table.rows.iter().map(|r| &r.metrics));
    let mut out = format!("ablation over {} ({} seeds)\n\n", table.axis, table.seeds.len());
    let _ = write!(out, "{:<16} {:>6}", table.axis.as_str(), "seed");
    for m in &metrics {
        let _ = write!(out, " {m:>12}");
    }
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "{:<16} {:>6}", r.value, r.seed);
        for m in &metrics {
            let _ = write!(out, " {:>12.4}", r.metrics.get(m).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    for m in &metrics {
        let _ = writeln!(out, "\nmean {m}:");
        for (v, s) in table.means(m) {
            let _ = writeln!(out, "  {v:<16} {:.4} ± {:.4}", s.mean, s.std);
        }
    }
    out
}

fn report_text(report: &EvalReport) -> String {
    let spec = &report.spec;
    let metrics = metric_names(report.runs.iter().map(|r| &r.metrics));
    let mut out = format!(
        "{:?} {} {} → {} (layout {} m={}, {} test records)\n\n",
        spec.mode,
        spec.task,
        spec.source_lang,
        spec.target_lang,
        spec.layout.mode,
        spec.layout.m,
        report.provenance.test_size
    );
    let _ = write!(out, "{:>6} {:>8}", "seed", "steps");
    for m in &metrics {
        let _ = write!(out, " {m:>12}");
    }
    out.push('\n');
    for r in &report.runs {
        let _ = write!(out, "{:>6} {:>8}", r.seed, r.optimizer_steps);
        for m in &metrics {
            let _ = write!(out, " {:>12.4}", r.metrics.get(m).copied().unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out.push('\n');
    for (m, s) in &report.summary {
        let _ = writeln!(out, "{m}: {:.4} ± {:.4}", s.mean, s.std);
    }
    out
}

/// Human-readable summary of a run directory: the ablation table when one
/// exists, otherwise the evaluation report.
pub fn report(run_dir: &Path) -> Result<String> {
    let ablation = run_dir.join(ABLATION_FILE);
    let eval = run_dir.join(REPORT_FILE);
    if ablation.exists() {
        let text = fs::read_to_string(&ablation).map_err(io_err("reading", &ablation))?;
        let table: AblationTable = serde_json::from_str(&text)?;
        Ok(ablation_text(&table))
    } else if eval.exists() {
        let text = fs::read_to_string(&eval).map_err(io_err("reading", &eval))?;
        let report: EvalReport = serde_json::from_str(&text)?;
        report.check_summary()?;
        Ok(report_text(&report))
    } else {
        Err(Error::Data(format!(
            "{} holds neither {ABLATION_FILE} nor {REPORT_FILE}",
            run_dir.display()
        )))
    }
}
