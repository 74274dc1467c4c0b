use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use styleadapt::config::RunConfig;
use styleadapt::error::{codes, CliError, Result};
use styleadapt::pipeline::{self, Paths, DEFAULT_ROOT, ROOT_ENV};

#[derive(Parser)]
#[command(name = "styleadapt", version, about = "Adapter-based multi-attribute text style transfer")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run root holding data and checkpoints [env: STYLEADAPT_ROOT, default: runs].
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (JSONL and TSV layouts).
    GenData,
    /// Pre-train the backbone, classifiers and language model.
    PretrainAux,
    /// Train the adapter banks of the training plan.
    Train,
    /// Transfer sentences through a plan.
    Transfer {
        /// e.g. `Stack(Parallel(future,past,present),Parallel(passive,active))`
        #[arg(long)]
        plan: Option<String>,
        /// e.g. `tense=future,voice=passive` (Stack plans only)
        #[arg(long)]
        directive: Option<String>,
        #[arg(required = true)]
        sentences: Vec<String>,
    },
    /// Evaluate transfers over the test split.
    Evaluate {
        #[arg(long)]
        plan: Option<String>,
    },
    /// Print trainable and frozen parameter counts.
    ParamReport {
        /// Report for the 12+12 layer, 1024-wide backbone with 64-wide adapters.
        #[arg(long)]
        reference_scale: bool,
    },
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string(value).expect("outputs serialize"));
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match (&cli.config, cli.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::with_seed(seed),
        (None, None) => return Err(CliError::config(codes::INVALID, "a seed is required: pass --config or --seed")),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let root = cli.root.clone().or_else(|| std::env::var_os(ROOT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
    let paths = Paths::new(root);
    match &cli.command {
        Command::GenData => print_json(&pipeline::gen_data(&config, &paths)?),
        Command::PretrainAux => print_json(&pipeline::pretrain_aux(&config, &paths)?),
        Command::Train => print_json(&pipeline::train(&config, &paths)?),
        Command::Transfer { plan, directive, sentences } => {
            for line in pipeline::transfer(&config, &paths, sentences, plan.as_deref(), directive.as_deref())? {
                print_json(&line);
            }
        }
        Command::Evaluate { plan } => print_json(&pipeline::summary_line(&pipeline::evaluate(&config, &paths, plan.as_deref())?)),
        Command::ParamReport { reference_scale } => println!("{}", pipeline::param_report(&config, &paths, *reference_scale)?.line()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
