use std::path::PathBuf;
use std::process::ExitCode;

use attrex::pipeline::{self, RunConfig};
use attrex::Error;
use clap::{Args, Parser, Subcommand};

/// Attribute-based explanations of adversarial misclassification.
#[derive(Parser)]
#[command(name = "attrex", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or load the dataset and write it with its split.
    Generate(Common),
    /// Train the attribute (SJE) and general classifiers.
    Train(Common),
    /// Adversarially train both classifiers and compare with the standard ones.
    RobustTrain(Common),
    /// Accuracy under attack over the configured epsilon grid.
    Sweep(Common),
    /// Explain every sample the attack flips and run the distance analyses.
    Explain(Common),
    /// Summarize the run as Markdown.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` in the file.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Global seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> attrex::Result<RunConfig> {
        let text = match &self.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("reading {}: {e}", path.display())))?,
            None => String::new(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(dir) = &self.out_dir {
            overrides.push(format!("out_dir={}", toml::Value::String(dir.display().to_string())));
        }
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::from_toml_with_overrides(&text, &overrides)
    }
}

fn run(cli: Cli) -> attrex::Result<()> {
    let (stage, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Train(c) => ("train", c),
        Command::RobustTrain(c) => ("robust-train", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Explain(c) => ("explain", c),
        Command::Report(c) => ("report", c),
    };
    let cfg = common.load()?;
    let written = match stage {
        "generate" => pipeline::stage_generate(&cfg)?,
        "train" => pipeline::stage_train(&cfg)?,
        "robust-train" => pipeline::stage_robust_train(&cfg)?,
        "sweep" => pipeline::stage_sweep(&cfg)?,
        "explain" => pipeline::stage_explain(&cfg)?,
        _ => {
            let (text, written) = pipeline::stage_report(&cfg)?;
            print!("{text}");
            written
        }
    };
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors are validation failures; clap's own code 2 is
            // reserved here for numerical failure.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
