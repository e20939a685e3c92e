use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use xlprompt_cli::commands;
use xlprompt_cli::RunConfig;
use xlprompt_core::data::pipeline::PrepareConfig;
use xlprompt_core::eval::AblationAxis;
use xlprompt_core::task::TaskKind;
use xlprompt_core::{Error, Result};

#[derive(Parser)]
#[command(name = "xlprompt", version, about = "Prompt-tuned code models with cross-language transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a scalar field, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Strip comments, filter by length, balance and split a raw corpus.
    PrepareData {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        task: TaskKind,
        /// Optional run configuration whose `[prepare]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Continual masked-language-model pre-training of the backbone.
    Pretrain(ConfigArgs),
    /// Prompt-tune every seed and save one checkpoint per seed.
    Train(ConfigArgs),
    /// Score saved checkpoints on the target test split.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// A single checkpoint directory instead of the run's seeds.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one axis: prompt_position, prompt_count or source_language.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        axis: Option<AblationAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Print a readable summary of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn prepare_config(config: Option<&PathBuf>, seed: Option<u64>) -> Result<PrepareConfig> {
    let mut prepare = match config {
        Some(path) => RunConfig::load(path, &[])?.prepare.unwrap_or_default(),
        None => PrepareConfig::default(),
    };
    if let Some(seed) = seed {
        prepare.seed = seed;
    }
    Ok(prepare)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            input,
            out,
            task,
            config,
            seed,
        } => {
            let prepare = prepare_config(config.as_ref(), seed)?;
            let split = commands::prepare_data(&input, &out, task, &prepare)?;
            let p = &split.provenance;
            println!(
                "{}: kept {}/{} records; {} positive, {} negative; train {}, valid {}, test {}",
                out.display(),
                p.filter.kept,
                p.filter.input,
                p.positives,
                p.negatives,
                p.counts.train,
                p.counts.valid,
                p.counts.test
            );
        }
        Command::Pretrain(args) => {
            let dir = commands::pretrain(&args.load()?, &args.overrides)?;
            println!("backbone saved to {}", dir.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            for s in commands::train(&cfg, &args.overrides)? {
                println!(
                    "seed {}: {} steps, best epoch {} ({} {:.4})",
                    s.seed, s.optimizer_steps, s.best_epoch, s.metric.name, s.metric.value
                );
            }
            println!("checkpoints under {}", cfg.run_dir()?.display());
        }
        Command::Eval { args, checkpoint } => {
            let cfg = args.load()?;
            let report = commands::eval(&cfg, &args.overrides, checkpoint.as_deref())?;
            for (name, s) in &report.summary {
                println!("{name}: {:.4} ± {:.4}", s.mean, s.std);
            }
            println!("report written to {}", cfg.run_dir()?.join(commands::REPORT_FILE).display());
        }
        Command::Ablate { args, axis, values } => {
            let cfg = args.load()?;
            let table = commands::run_ablation(&cfg, &args.overrides, axis, values)?;
            print!("{}", table.to_csv()?);
        }
        Command::Report { run_dir } => print!("{}", commands::report(&run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
