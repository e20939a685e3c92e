//! Transfer protocols: zero-shot, cross-language few-shot and monolingual
//! runs over several seeds, plus single-axis ablations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::params::ParameterStore;
use crate::backend::transformer::{ModelConfig, ToyTransformer};
use crate::backend::vocab::{Tokenizer, Vocabulary};
use crate::data::pipeline::{sha256_hex, DatasetSplit};
use crate::data::record::{records_to_jsonl, RawRecord};
use crate::data::{to_classification, to_generative};
use crate::error::{Error, Result};
use crate::eval::metrics::{bleu, mean_rouge_l, summarize, Summary};
use crate::prompt::bank::PromptBank;
use crate::prompt::layout::{build_layout, LayoutSpec, PromptPosition};
use crate::task::decoder::{DecoderConfig, DecoderHeader, Strategy};
use crate::task::verbalizer::Verbalizer;
use crate::task::TaskKind;
use crate::train::classifier::{train_classifier, LabeledInput, PromptClassifier};
use crate::train::config::TrainConfig;
use crate::train::fit::{derive_seed, EpochLog, TrainOutcome};
use crate::train::generator::{train_generator, GenerativeInput, PromptGenerator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    ZeroShot,
    FewShot,
    Monolingual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Bleu,
    RougeL,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Bleu => "bleu",
            Metric::RougeL => "rouge_l",
        }
    }

    pub fn defaults(task: TaskKind) -> Vec<Metric> {
        if task.is_classification() {
            vec![Metric::Accuracy]
        } else {
            vec![Metric::Bleu, Metric::RougeL]
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub mode: ExperimentMode,
    pub task: TaskKind,
    pub source_lang: String,
    pub target_lang: String,
    /// Leading source-language training records to use; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_train_size: Option<usize>,
    #[serde(default)]
    pub few_shot_k: usize,
    #[serde(default)]
    pub layout: LayoutSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Empty means the task's default metrics.
    #[serde(default)]
    pub metrics: Vec<Metric>,
    /// Leading target test records to score; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ExperimentMode::ZeroShot if self.few_shot_k != 0 => {
                return Err(Error::Config("zero_shot experiments must have few_shot_k = 0".into()))
            }
            ExperimentMode::Monolingual if self.source_lang != self.target_lang => {
                return Err(Error::Config(format!(
                    "monolingual experiments need source_lang = target_lang (got {} and {})",
                    self.source_lang, self.target_lang
                )))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for m in &self.metrics {
            if (*m == Metric::Accuracy) != self.task.is_classification() {
                return Err(Error::Config(format!("metric {} does not apply to task {}", m.as_str(), self.task)));
            }
        }
        Ok(())
    }

    pub fn metric_set(&self) -> Vec<Metric> {
        if self.metrics.is_empty() {
            Metric::defaults(self.task)
        } else {
            self.metrics.clone()
        }
    }
}

/// Train/valid/test records for one side of an experiment. Records of
/// other languages may be present; each run selects by language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<RawRecord>,
    pub valid: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
}

impl From<DatasetSplit> for Corpus {
    fn from(s: DatasetSplit) -> Self {
        Self {
            train: s.train,
            valid: s.valid,
            test: s.test,
        }
    }
}

impl Corpus {
    pub fn hashes(&self, side: &str) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for (name, recs) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            out.insert(format!("{side}.{name}"), sha256_hex(records_to_jsonl(recs)?.as_bytes()));
        }
        Ok(out)
    }
}

fn of_language<'a>(records: &'a [RawRecord], lang: &str, task: TaskKind) -> Vec<&'a RawRecord> {
    records.iter().filter(|r| r.lang == lang && r.task == task).collect()
}

/// A pre-trained (or freshly initialized) backbone without task arrays.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParameterStore<f32>,
}

/// Everything a run needs besides the spec.
pub struct Experiment<'a> {
    pub backbone: &'a Backbone,
    pub tokenizer: &'a dyn Tokenizer,
    pub source: &'a Corpus,
    pub target: &'a Corpus,
    pub train: TrainConfig,
    /// Label → word; `None` uses yes/no.
    pub verbalizer: Option<BTreeMap<String, String>>,
    pub decoder: DecoderConfig,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub checkpoint_sha256: String,
    pub optimizer_steps: usize,
    pub source_epochs: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub few_shot_epochs: Vec<EpochLog>,
    /// Number of distinct records that entered an optimizer step.
    pub records_seen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub backbone_sha256: String,
    pub vocab_sha256: String,
    pub datasets: BTreeMap<String, String>,
    pub train_config: TrainConfig,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: ExperimentSpec,
    pub runs: Vec<SeedRun>,
    pub summary: BTreeMap<String, Summary>,
    pub provenance: ReportProvenance,
}

impl EvalReport {
    /// Per-seed values of `metric`, in run order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.metrics.get(metric).copied()).collect()
    }

    /// Recomputes the summary from the per-seed values.
    pub fn check_summary(&self) -> Result<()> {
        for (name, s) in &self.summary {
            if summarize(&self.values(name))? != *s {
                return Err(Error::Numeric(format!("summary of {name} does not match its runs")));
            }
        }
        Ok(())
    }
}

struct Prepared<'a> {
    source_train: Vec<&'a RawRecord>,
    source_valid: Vec<&'a RawRecord>,
    target_train: Vec<&'a RawRecord>,
    target_valid: Vec<&'a RawRecord>,
    target_test: Vec<&'a RawRecord>,
}

fn select<'a>(spec: &ExperimentSpec, exp: &Experiment<'a>) -> Result<Prepared<'a>> {
    let target_test = target_test(spec, exp)?;
    let mut source_train = of_language(&exp.source.train, &spec.source_lang, spec.task);
    if let Some(n) = spec.source_train_size {
        if source_train.len() < n {
            return Err(Error::Data(format!(
                "source_train_size {n} exceeds the {} available {} records",
                source_train.len(),
                spec.source_lang
            )));
        }
        source_train.truncate(n);
    }
    if source_train.is_empty() {
        return Err(Error::Data(format!("no training records for source language {}", spec.source_lang)));
    }
    let source_valid = of_language(&exp.source.valid, &spec.source_lang, spec.task);
    if source_valid.is_empty() {
        return Err(Error::Data(format!("no validation records for source language {}", spec.source_lang)));
    }
    let mut target_train = Vec::new();
    let mut target_valid = Vec::new();
    if spec.mode == ExperimentMode::FewShot && spec.few_shot_k > 0 {
        target_train = of_language(&exp.target.train, &spec.target_lang, spec.task);
        if target_train.len() < spec.few_shot_k {
            return Err(Error::Data(format!(
                "few_shot_k {} exceeds the {} available {} training records",
                spec.few_shot_k,
                target_train.len(),
                spec.target_lang
            )));
        }
        target_train.truncate(spec.few_shot_k);
        target_valid = of_language(&exp.target.valid, &spec.target_lang, spec.task);
        if target_valid.is_empty() {
            return Err(Error::Data(format!("no validation records for target language {}", spec.target_lang)));
        }
    }
    Ok(Prepared {
        source_train,
        source_valid,
        target_train,
        target_valid,
        target_test,
    })
}

/// Fails when a zero-shot run let any target-language or target-test
/// record into an optimizer step.
pub fn check_hygiene(
    spec: &ExperimentSpec,
    seen: &BTreeSet<String>,
    languages: &HashMap<&str, &str>,
    test_ids: &BTreeSet<&str>,
) -> Result<()> {
    if spec.mode != ExperimentMode::ZeroShot {
        return Ok(());
    }
    let leaked: Vec<&String> = seen
        .iter()
        .filter(|id| {
            test_ids.contains(id.as_str())
                || (spec.source_lang != spec.target_lang && languages.get(id.as_str()) == Some(&spec.target_lang.as_str()))
        })
        .collect();
    if !leaked.is_empty() {
        return Err(Error::Data(format!(
            "zero-shot hygiene violated: {} target record(s) reached the optimizer, e.g. {}",
            leaked.len(),
            leaked[0]
        )));
    }
    Ok(())
}

enum TaskModel {
    Classifier(PromptClassifier),
    Generator(PromptGenerator),
}

fn verbalizer_for(exp: &Experiment<'_>) -> Result<Verbalizer> {
    match &exp.verbalizer {
        Some(words) => Verbalizer::from_words(words, &exp.backbone.vocab, Some(exp.tokenizer)),
        None => Verbalizer::yes_no(&exp.backbone.vocab),
    }
}

fn assemble(spec: &ExperimentSpec, exp: &Experiment<'_>, bank: PromptBank, decoder: Option<DecoderHeader>, store: &ParameterStore<f32>) -> Result<TaskModel> {
    let model = ToyTransformer::bind(store, &exp.backbone.config)?;
    Ok(match decoder {
        None => TaskModel::Classifier(PromptClassifier {
            model,
            bank,
            layout: build_layout(spec.layout.mode, spec.layout.m, true)?,
            verbalizer: verbalizer_for(exp)?,
        }),
        Some(decoder) => TaskModel::Generator(PromptGenerator {
            model,
            bank,
            decoder,
            task: spec.task,
            special: exp.backbone.vocab.special(),
        }),
    })
}

/// Backbone plus freshly initialized prompts (and decoder for generation).
fn fresh_model(spec: &ExperimentSpec, exp: &Experiment<'_>, seed: u64) -> Result<(TaskModel, ParameterStore<f32>)> {
    let mut store = exp.backbone.store.clone();
    let d = exp.backbone.config.hidden_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let bank = PromptBank::reinit(&mut store, spec.layout.m, d, &mut rng)?;
    let decoder = if spec.task.is_classification() {
        None
    } else {
        store.remove_prefix("decoder.");
        Some(DecoderHeader::init(&mut store, &exp.decoder, d, exp.backbone.vocab.len(), &mut rng)?)
    };
    let model = assemble(spec, exp, bank, decoder, &store)?;
    Ok((model, store))
}

/// Binds to the prompt and decoder arrays of an already trained store.
fn bound_model(spec: &ExperimentSpec, exp: &Experiment<'_>, store: &ParameterStore<f32>) -> Result<TaskModel> {
    let d = exp.backbone.config.hidden_dim;
    let bank = PromptBank::bind(store, spec.layout.m, d)?;
    let decoder = if spec.task.is_classification() {
        None
    } else {
        Some(DecoderHeader::bind(store, &exp.decoder, d, exp.backbone.vocab.len())?)
    };
    assemble(spec, exp, bank, decoder, store)
}

impl TaskModel {
    fn fit(
        &self,
        exp: &Experiment<'_>,
        store: ParameterStore<f32>,
        train: &[&RawRecord],
        valid: &[&RawRecord],
        config: &TrainConfig,
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainOutcome> {
        let vocab = &exp.backbone.vocab;
        match self {
            TaskModel::Classifier(clf) => {
                let cast = |recs: &[&RawRecord]| -> Result<Vec<LabeledInput>> {
                    recs.iter().map(|r| clf.cast(&to_classification(r, exp.tokenizer)?, vocab)).collect()
                };
                train_classifier(clf, store, &cast(train)?, &cast(valid)?, config, on_epoch)
            }
            TaskModel::Generator(generator) => {
                let cast = |recs: &[&RawRecord]| -> Result<Vec<GenerativeInput>> {
                    recs.iter().map(|r| generator.cast(&to_generative(r, exp.tokenizer)?, vocab)).collect()
                };
                train_generator(generator, store, &cast(train)?, &cast(valid)?, config, on_epoch)
            }
        }
    }

    fn score(
        &self,
        spec: &ExperimentSpec,
        exp: &Experiment<'_>,
        store: &ParameterStore<f32>,
        test: &[&RawRecord],
    ) -> Result<BTreeMap<String, f64>> {
        let vocab = &exp.backbone.vocab;
        match self {
            TaskModel::Classifier(clf) => {
                let test = test
                    .iter()
                    .map(|r| clf.cast(&to_classification(r, exp.tokenizer)?, vocab))
                    .collect::<Result<Vec<_>>>()?;
                let acc = clf.accuracy(store, &test)?;
                Ok(BTreeMap::from([(Metric::Accuracy.as_str().to_string(), acc)]))
            }
            TaskModel::Generator(generator) => {
                let test = test
                    .iter()
                    .map(|r| generator.cast(&to_generative(r, exp.tokenizer)?, vocab))
                    .collect::<Result<Vec<_>>>()?;
                let inputs: Vec<_> = test.iter().map(|t| t.input.clone()).collect();
                let outputs = generator.generate(store, &inputs, exp.decoder.max_target_len, exp.strategy)?;
                let references: Vec<_> = test.iter().map(|t| t.target.clone()).collect();
                let mut metrics = BTreeMap::new();
                for m in spec.metric_set() {
                    let v = match m {
                        Metric::Bleu => bleu(&outputs, &references, 4)?,
                        Metric::RougeL => mean_rouge_l(&outputs, &references)?,
                        Metric::Accuracy => unreachable!("validated against the task"),
                    };
                    metrics.insert(m.as_str().to_string(), v);
                }
                Ok(metrics)
            }
        }
    }
}

fn train_config(exp: &Experiment<'_>, seed: u64, phase: u64) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, &[phase]),
        ..exp.train.clone()
    }
}

/// The outcome of training one seed, before evaluation.
#[derive(Debug, Clone)]
pub struct TrainedSeed {
    pub seed: u64,
    /// Parameters after the last training phase.
    pub store: ParameterStore<f32>,
    pub source: TrainOutcome,
    pub few_shot: Option<TrainOutcome>,
}

impl TrainedSeed {
    pub fn optimizer_steps(&self) -> usize {
        self.source.steps.len() + self.few_shot.as_ref().map_or(0, |f| f.steps.len())
    }

    pub fn seen_ids(&self) -> BTreeSet<String> {
        let mut seen = self.source.seen_ids.clone();
        if let Some(f) = &self.few_shot {
            seen.extend(f.seen_ids.iter().cloned());
        }
        seen
    }

    fn into_run(self, metrics: BTreeMap<String, f64>) -> SeedRun {
        SeedRun {
            seed: self.seed,
            metrics,
            checkpoint_sha256: self.store.content_hash(),
            optimizer_steps: self.optimizer_steps(),
            records_seen: self.seen_ids().len(),
            source_epochs: self.source.epochs,
            few_shot_epochs: self.few_shot.map(|f| f.epochs).unwrap_or_default(),
        }
    }
}

fn train_prepared(
    spec: &ExperimentSpec,
    exp: &Experiment<'_>,
    data: &Prepared<'_>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&str, &EpochLog),
) -> Result<(TaskModel, TrainedSeed)> {
    log::info!("{:?} {} {}→{} seed {seed}", spec.mode, spec.task, spec.source_lang, spec.target_lang);
    let (model, store) = fresh_model(spec, exp, seed)?;
    let source = model.fit(
        exp,
        store,
        &data.source_train,
        &data.source_valid,
        &train_config(exp, seed, 1),
        &mut |e| on_epoch("source", e),
    )?;
    let mut store = source.store.clone();
    let mut few_shot = None;
    if !data.target_train.is_empty() {
        let out = model.fit(
            exp,
            store,
            &data.target_train,
            &data.target_valid,
            &train_config(exp, seed, 2),
            &mut |e| on_epoch("few_shot", e),
        )?;
        store = out.store.clone();
        few_shot = Some(out);
    }
    let trained = TrainedSeed {
        seed,
        store,
        source,
        few_shot,
    };
    let languages: HashMap<&str, &str> = exp
        .source
        .train
        .iter()
        .chain(&exp.target.train)
        .map(|r| (r.id.as_str(), r.lang.as_str()))
        .collect();
    let test_ids: BTreeSet<&str> = data.target_test.iter().map(|r| r.id.as_str()).collect();
    check_hygiene(spec, &trained.seen_ids(), &languages, &test_ids)?;
    Ok((model, trained))
}

/// Trains one seed: source phase, then the few-shot phase when the spec
/// asks for one. `on_epoch` receives the phase name with every epoch log.
pub fn train_seed(
    spec: &ExperimentSpec,
    exp: &Experiment<'_>,
    seed: u64,
    on_epoch: &mut dyn FnMut(&str, &EpochLog),
) -> Result<TrainedSeed> {
    spec.validate()?;
    exp.train.validate()?;
    let data = select(spec, exp)?;
    train_prepared(spec, exp, &data, seed, on_epoch).map(|(_, t)| t)
}

fn target_test<'a>(spec: &ExperimentSpec, exp: &Experiment<'a>) -> Result<Vec<&'a RawRecord>> {
    let test = of_language(&exp.target.test, &spec.target_lang, spec.task);
    if test.is_empty() {
        return Err(Error::Data(format!(
            "no {} test records for target language {}",
            spec.task, spec.target_lang
        )));
    }
    Ok(match spec.test_size {
        Some(n) => test.into_iter().take(n).collect(),
        None => test,
    })
}

/// Scores a trained store on the target test split. Inference only.
pub fn evaluate(spec: &ExperimentSpec, exp: &Experiment<'_>, store: &ParameterStore<f32>) -> Result<BTreeMap<String, f64>> {
    spec.validate()?;
    let test = target_test(spec, exp)?;
    bound_model(spec, exp, store)?.score(spec, exp, store, &test)
}

/// Aggregates per-seed runs into a report.
pub fn build_report(spec: &ExperimentSpec, exp: &Experiment<'_>, runs: Vec<SeedRun>) -> Result<EvalReport> {
    let mut summary = BTreeMap::new();
    for m in spec.metric_set() {
        let values: Vec<f64> = runs
            .iter()
            .map(|r| {
                r.metrics
                    .get(m.as_str())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("seed {} has no {} value", r.seed, m.as_str())))
            })
            .collect::<Result<_>>()?;
        summary.insert(m.as_str().to_string(), summarize(&values)?);
    }
    let mut datasets = exp.source.hashes("source")?;
    datasets.extend(exp.target.hashes("target")?);
    Ok(EvalReport {
        spec: spec.clone(),
        runs,
        summary,
        provenance: ReportProvenance {
            backbone_sha256: exp.backbone.store.content_hash(),
            vocab_sha256: exp.backbone.vocab.sha256(),
            datasets,
            train_config: exp.train.clone(),
            test_size: target_test(spec, exp)?.len(),
        },
    })
}

/// Runs every seed of `spec` and aggregates the metrics.
pub fn run_experiment(spec: &ExperimentSpec, exp: &Experiment<'_>) -> Result<EvalReport> {
    spec.validate()?;
    exp.train.validate()?;
    let data = select(spec, exp)?;
    let mut runs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let (model, trained) = train_prepared(spec, exp, &data, seed, &mut |_, _| {})?;
        let metrics = model.score(spec, exp, &trained.store, &data.target_test)?;
        runs.push(trained.into_run(metrics));
    }
    build_report(spec, exp, runs)
}


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    PromptPosition,
    PromptCount,
    SourceLanguage,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::PromptPosition => "prompt_position",
            AblationAxis::PromptCount => "prompt_count",
            AblationAxis::SourceLanguage => "source_language",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt_position" | "position" => Ok(AblationAxis::PromptPosition),
            "prompt_count" | "count" => Ok(AblationAxis::PromptCount),
            "source_language" | "source" => Ok(AblationAxis::SourceLanguage),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (expected prompt_position, prompt_count or source_language)"
            ))),
        }
    }
}

/// Sort key of an axis value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum AxisValue {
    Position(PromptPosition),
    Count(usize),
    Language(String),
}

impl AxisValue {
    fn parse(axis: AblationAxis, raw: &str) -> Result<Self> {
        match axis {
            AblationAxis::PromptPosition => raw.parse().map(AxisValue::Position),
            AblationAxis::PromptCount => {
                let n: usize = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("prompt count `{raw}` is not an integer")))?;
                if !(1..=20).contains(&n) {
                    return Err(Error::Config(format!("prompt count {n} is outside [1, 20]")));
                }
                Ok(AxisValue::Count(n))
            }
            AblationAxis::SourceLanguage if raw.is_empty() => Err(Error::Config("empty source language".into())),
            AblationAxis::SourceLanguage => Ok(AxisValue::Language(raw.to_string())),
        }
    }

    fn apply(&self, spec: &ExperimentSpec) -> ExperimentSpec {
        let mut s = spec.clone();
        match self {
            AxisValue::Position(p) => s.layout.mode = *p,
            AxisValue::Count(n) => s.layout.m = *n,
            AxisValue::Language(l) => s.source_lang = l.clone(),
        }
        s
    }

    fn label(&self) -> String {
        match self {
            AxisValue::Position(p) => p.to_string(),
            AxisValue::Count(n) => n.to_string(),
            AxisValue::Language(l) => l.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub datasets: BTreeMap<String, String>,
    pub rows: Vec<AblationRow>,
    /// One report per axis value, in row order.
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    /// Mean of `metric` per axis value, in row order.
    pub fn means(&self, metric: &str) -> Vec<(String, Summary)> {
        self.reports
            .iter()
            .zip(self.values())
            .filter_map(|(r, v)| r.summary.get(metric).map(|s| (v, *s)))
            .collect()
    }

    pub fn values(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.value) {
                out.push(r.value.clone());
            }
        }
        out
    }

    /// `value,seed,<metric…>` with one line per row.
    pub fn to_csv(&self) -> Result<String> {
        let metrics: Vec<String> = self
            .rows
            .first()
            .map(|r| r.metrics.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.axis.as_str().to_string(), "seed".to_string()];
        header.extend(metrics.iter().cloned());
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.value.clone(), r.seed.to_string()];
            rec.extend(metrics.iter().map(|m| format!("{:.6}", r.metrics.get(m).copied().unwrap_or(f64::NAN))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("writing CSV: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

/// One experiment per axis value, otherwise identical.
pub fn ablate(spec: &ExperimentSpec, exp: &Experiment<'_>, axis: AblationAxis, values: &[String]) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Config(format!("no values given for ablation axis {axis}")));
    }
    let mut parsed = values
        .iter()
        .map(|v| AxisValue::parse(axis, v))
        .collect::<Result<Vec<_>>>()?;
    parsed.sort();
    parsed.dedup();
    let specs: Vec<ExperimentSpec> = parsed.iter().map(|v| v.apply(spec)).collect();
    for s in &specs {
        s.validate()?;
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (value, s) in parsed.iter().zip(&specs) {
        let report = run_experiment(s, exp)?;
        for run in &report.runs {
            rows.push(AblationRow {
                value: value.label(),
                seed: run.seed,
                metrics: run.metrics.clone(),
            });
        }
        reports.push(report);
    }
    let datasets = reports[0].provenance.datasets.clone();
    Ok(AblationTable {
        axis,
        seeds: spec.seeds.clone(),
        datasets,
        rows,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: ExperimentMode) -> ExperimentSpec {
        ExperimentSpec {
            mode,
            task: TaskKind::Cd,
            source_lang: "alpha".into(),
            target_lang: "beta".into(),
            source_train_size: None,
            few_shot_k: 0,
            layout: LayoutSpec::default(),
            seeds: vec![0],
            metrics: vec![],
            test_size: None,
        }
    }

    #[test]
    fn spec_invariants() {
        assert!(spec(ExperimentMode::ZeroShot).validate().is_ok());
        let mut s = spec(ExperimentMode::ZeroShot);
        s.few_shot_k = 4;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        assert!(spec(ExperimentMode::Monolingual).validate().is_err());
        let mut s = spec(ExperimentMode::FewShot);
        s.metrics = vec![Metric::Bleu];
        assert!(s.validate().is_err());
    }

    #[test]
    fn hygiene_flags_target_records() {
        let s = spec(ExperimentMode::ZeroShot);
        let langs: HashMap<&str, &str> = HashMap::from([("a1", "alpha"), ("b1", "beta")]);
        let tests = BTreeSet::from(["b9"]);
        assert!(check_hygiene(&s, &BTreeSet::from(["a1".to_string()]), &langs, &tests).is_ok());
        assert!(check_hygiene(&s, &BTreeSet::from(["b1".to_string()]), &langs, &tests).is_err());
        assert!(check_hygiene(&s, &BTreeSet::from(["b9".to_string()]), &langs, &tests).is_err());
        let few = spec(ExperimentMode::FewShot);
        assert!(check_hygiene(&few, &BTreeSet::from(["b1".to_string()]), &langs, &tests).is_ok());
    }

    #[test]
    fn axis_values_parse_and_sort() {
        assert!("depth".parse::<AblationAxis>().is_err());
        let mut v: Vec<AxisValue> = ["20", "1", "10", "5", "15"]
            .iter()
            .map(|x| AxisValue::parse(AblationAxis::PromptCount, x).unwrap())
            .collect();
        v.sort();
        let labels: Vec<String> = v.iter().map(AxisValue::label).collect();
        assert_eq!(labels, ["1", "5", "10", "15", "20"]);
        assert!(AxisValue::parse(AblationAxis::PromptCount, "21").is_err());
        assert!(AxisValue::parse(AblationAxis::PromptPosition, "diagonal").is_err());
    }

    #[test]
    fn csv_layout() {
        let table = AblationTable {
            axis: AblationAxis::PromptCount,
            seeds: vec![0, 1],
            datasets: BTreeMap::new(),
            rows: vec![
                AblationRow {
                    value: "1".into(),
                    seed: 0,
                    metrics: BTreeMap::from([("accuracy".into(), 0.5)]),
                },
                AblationRow {
                    value: "1".into(),
                    seed: 1,
                    metrics: BTreeMap::from([("accuracy".into(), 0.75)]),
                },
            ],
            reports: vec![],
        };
        assert_eq!(table.to_csv().unwrap(), "prompt_count,seed,accuracy\n1,0,0.500000\n1,1,0.750000\n");
        assert_eq!(table.values(), vec!["1".to_string()]);
    }
}
