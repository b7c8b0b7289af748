use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vitsplit::config::RunConfig;
use vitsplit::pipeline;
use vitsplit::{Error, Result};

/// Decompose, distill, ensemble and simulate a vision transformer.
#[derive(Parser)]
#[command(name = "vitsplit", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, replaces `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory, replaces `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset file from the configured source.
    Ingest,
    /// Split the classes into partitions and write one dataset per partition.
    Partition,
    /// Train the teacher on the full dataset.
    TrainTeacher,
    /// Build partition teachers, score them and shrink them into small models.
    Shrink,
    /// Distill each small model on its partition.
    Distill,
    /// Train the aggregation module and head over the distilled models.
    Ensemble,
    /// Simulate the decomposed and monolithic deployments.
    Simulate,
    /// Compare the simulated plans and summarize accuracy.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        let s = o.to_str().ok_or_else(|| Error::config("--out must be valid UTF-8"))?;
        overrides.push(format!("out_dir={}", toml::Value::String(s.to_string())));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let f = cli.force;
    match cli.command {
        Command::Ingest => drop(pipeline::ingest(&cfg, f)?),
        Command::Partition => drop(pipeline::partition(&cfg, f)?),
        Command::TrainTeacher => drop(pipeline::train_teacher(&cfg, f)?),
        Command::Shrink => drop(pipeline::shrink_stage(&cfg, f)?),
        Command::Distill => drop(pipeline::distill(&cfg, f)?),
        Command::Ensemble => drop(pipeline::ensemble(&cfg, f)?),
        Command::Simulate => {
            let (e, t) = pipeline::simulate(&cfg, f)?;
            println!("ensemble latency {:.6e} s, teacher latency {:.6e} s", e.latency_s, t.latency_s);
        }
        Command::Report | Command::Pipeline => {
            let s = if matches!(cli.command, Command::Report) {
                pipeline::report(&cfg, f)?
            } else {
                pipeline::run_all(&cfg, f)?
            };
            print!("{}", s.comparison.to_table());
            println!(
                "teacher accuracy {:.4}, ensemble accuracy {:.4}, students {:?}",
                s.teacher_test_accuracy, s.ensemble_test_accuracy, s.student_test_accuracy
            );
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VITSPLIT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
