use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use echoseg::config::PipelineConfig;
use echoseg::pipeline::{Pipeline, PipelineError, RunOptions};

#[derive(Parser)]
#[command(name = "echoseg", version, about = "Prompted echocardiography segmentation experiments")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true, default_value = "echoseg.toml")]
    config: PathBuf,
    /// Run-id patterns, comma separated; `*` matches anything.
    #[arg(long, global = true)]
    run: Option<String>,
    /// Redo work even when outputs look current or inputs look stale.
    #[arg(long, global = true)]
    force: bool,
    /// Parallel runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Scan both datasets and write record manifests.
    Ingest,
    /// Resolve attributes and write prompt triplets.
    Prompts,
    /// Train every selected run of the matrix.
    Train,
    /// Score trained runs on the real test split.
    Evaluate,
    /// Paired strategy comparisons.
    Compare,
    /// Tables and CSVs for the whole matrix.
    Report,
    /// Check configuration and datasets without writing anything.
    Validate,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let pipeline = Pipeline::new(
        config,
        RunOptions {
            force: cli.force,
            selector: cli.run,
            jobs: cli.jobs,
        },
    );
    match cli.command {
        Command::Validate => {
            let s = pipeline.cmd_validate()?;
            let fmt = |m: &std::collections::BTreeMap<String, usize>| {
                m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
            };
            println!("OK real: {} synthetic: {}", fmt(&s.real), fmt(&s.synthetic));
            for d in &s.diagnostics {
                println!("note: {d}");
            }
            for w in &s.warnings {
                println!("warning: {w}");
            }
        }
        Command::Ingest => {
            let s = pipeline.cmd_ingest()?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Prompts => {
            let s = pipeline.cmd_prompts()?;
            println!("{}", serde_json::to_string_pretty(&s).expect("summary serializes"));
        }
        Command::Train | Command::Evaluate => {
            let c = if matches!(cli.command, Command::Train) {
                pipeline.cmd_train()?
            } else {
                pipeline.cmd_evaluate()?
            };
            for id in &c.executed {
                println!("done    {id}");
            }
            for id in &c.skipped {
                println!("current {id}");
            }
        }
        Command::Compare => {
            for row in pipeline.cmd_compare()? {
                println!("{}", serde_json::to_string(&row).expect("row serializes"));
            }
        }
        Command::Report => {
            let (_, files) = pipeline.cmd_report()?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
