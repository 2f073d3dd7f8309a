//! `vfocus`: drives the sample → filter → simulate → rank → refine pipeline
//! over a run directory and evaluates the result.
//!
//! Exit codes: 0 success, 1 partial (some problems quarantined), 2 fatal.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vfocus_core::pipeline::{
    evaluate_run, run_pipeline, run_status, BackendProvider, Env, EvalSettings, PipelineSummary, Stage,
};
use vfocus_core::store::{ingest_dataset, RunStore};
use vfocus_core::Result;

use config::ConfigArgs;

#[derive(Debug, Parser)]
#[command(name = "vfocus", version, about = "Rank and refine LLM-generated Verilog by simulation consistency")]
struct Cli {
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    run: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a problem manifest into a new or existing run directory.
    Ingest {
        manifest: PathBuf,
    },
    /// Sample candidates.
    Sample,
    /// Sample, then apply the reasoning-length filter.
    Filter,
    /// Run every stage up to simulation (testbench included).
    Simulate,
    /// Run every stage up to consistency ranking.
    Rank,
    /// Run every stage including refinement.
    Refine,
    /// Ingest (optional) and run all stages.
    Pipeline {
        /// Manifest to ingest first.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Verify selections against reference benches and write pass@k reports.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        ks: Vec<usize>,
        /// Selection repeats averaged per problem.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Candidate counts for the sample-size sweep.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Model label for the table; defaults to the configured model.
        #[arg(long)]
        label: Option<String>,
    },
    /// Per-problem stage status and the latest results table.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let stage = match &cli.command {
        Command::Ingest { manifest } => {
            let problems = ingest_dataset(manifest)?;
            let store = RunStore::create(&cli.run)?;
            store.save_problems(&problems)?;
            println!("ingested {} problems into {}", problems.len(), cli.run.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Eval {
            ks,
            repeats,
            sweep,
            label,
        } => {
            let store = RunStore::open(&cli.run)?;
            let env = Env::with_backends(cli.config.resolve(&cli.run)?, BackendProvider::Disabled)?;
            let settings = EvalSettings {
                ks: ks.clone(),
                repeats: *repeats,
                sweep_sizes: sweep.clone(),
                model: label.clone(),
            };
            let out = evaluate_run(&store, &env, &settings)?;
            for row in &out.table {
                println!(
                    "{:<24} {:<10} pass@1 {:.4}  delta {:+.4}",
                    row.dataset, row.method, row.pass_at_1, row.delta_vs_baseline
                );
            }
            for (id, why) in &out.excluded {
                println!("excluded {id}: {why}");
            }
            println!("reports written to {}", store.reports_dir().display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Report => {
            report(&RunStore::open(&cli.run)?)?;
            return Ok(ExitCode::SUCCESS);
        }
        Command::Pipeline { manifest: Some(m) } => {
            let problems = ingest_dataset(m)?;
            RunStore::create(&cli.run)?.save_problems(&problems)?;
            Stage::Refine
        }
        Command::Pipeline { manifest: None } | Command::Refine => Stage::Refine,
        Command::Sample => Stage::Sample,
        Command::Filter => Stage::Filter,
        Command::Simulate => Stage::Simulate,
        Command::Rank => Stage::Rank,
    };
    let store = RunStore::open(&cli.run)?;
    let env = Env::new(cli.config.resolve(&cli.run)?)?;
    let summary = run_pipeline(&store, &env, stage)?;
    print_summary(&summary);
    Ok(if summary.is_partial() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn print_summary(summary: &PipelineSummary) {
    for (id, stages) in &summary.executed {
        let ran: Vec<&str> = stages.iter().map(|s| s.name()).collect();
        let ran = if ran.is_empty() { "up to date".to_string() } else { ran.join(",") };
        println!("{id}: {ran}");
    }
    for (id, q) in &summary.quarantined {
        println!("{id}: quarantined at {}: {}", q.stage, q.error);
    }
    println!(
        "{} completed, {} quarantined",
        summary.completed.len(),
        summary.quarantined.len()
    );
}

fn report(store: &RunStore) -> Result<()> {
    for status in run_status(store)? {
        let done: Vec<&str> = status.done.iter().map(|s| s.name()).collect();
        let mut line = format!("{:<20} [{}]", status.problem_id, done.join(","));
        if let Some(sel) = &status.selected {
            line.push_str(&format!(" selected {sel}"));
        }
        if let Some(q) = &status.quarantine {
            line.push_str(&format!(" quarantined at {}: {}", q.stage, q.error));
        }
        println!("{line}");
    }
    let table = store.reports_dir().join("table.csv");
    if let Ok(text) = std::fs::read_to_string(&table) {
        println!();
        print!("{text}");
    }
    Ok(())
}
