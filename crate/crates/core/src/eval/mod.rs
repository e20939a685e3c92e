//! Metrics and experiment orchestration.

pub mod experiment;
pub mod metrics;

pub use experiment::{
    ablate, build_report, check_hygiene, evaluate, run_experiment, train_seed, AblationAxis, AblationRow,
    AblationTable, Backbone, Corpus, EvalReport, Experiment, ExperimentMode, ExperimentSpec, Metric,
    ReportProvenance, SeedRun, TrainedSeed,
};
pub use metrics::{accuracy, bleu, lcs_len, mean_rouge_l, rouge_l, summarize, Summary};
