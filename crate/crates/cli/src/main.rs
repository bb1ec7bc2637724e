use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use serde_json::json;

mod config;
mod experiments;

use config::ExperimentConfig;
use experiments::{Context, EXPERIMENTS};

/// Run one numerical experiment and write `summary.json` plus CSV detail files.
#[derive(Debug, Parser)]
#[command(name = "wcalc", version)]
struct Cli {
    /// Experiment id.
    experiment: String,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the quadrature refinement level.
    #[arg(long)]
    grid_level: Option<u32>,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("wcalc: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("WCALC_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => return fail(format!("WCALC_THREADS must be a positive integer, got {n:?}")),
        }
    }
    if !EXPERIMENTS.contains(&cli.experiment.as_str()) {
        return fail(format!("unknown experiment {:?}; expected one of {}", cli.experiment, EXPERIMENTS.join(", ")));
    }
    let config = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => return fail(e),
        },
        None => ExperimentConfig::default(),
    };
    if let Some(e) = &config.experiment {
        if *e != cli.experiment {
            return fail(format!("config is for experiment {e:?}, not {:?}", cli.experiment));
        }
    }

    let start = Instant::now();
    let ctx = Context { config: &config, seed: cli.seed, grid_level: cli.grid_level };
    let outcome = match experiments::run(&cli.experiment, &ctx) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let elapsed = start.elapsed().as_secs_f64();

    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        return fail(format!("cannot create {}: {e}", cli.out.display()));
    }
    let passed = outcome.assertions.iter().all(|a| a.passed);
    let summary = json!({
        "experiment": cli.experiment,
        "seed": cli.seed,
        "grid_level": cli.grid_level,
        "config": config,
        "metrics": outcome.metrics,
        "assertions": outcome.assertions,
        "files": outcome.files.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "passed": passed,
    });
    let timing = json!({ "wall_seconds": elapsed });
    let mut writes = vec![
        ("summary.json".to_string(), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
        ("timing.json".to_string(), serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n"),
    ];
    writes.extend(outcome.files);
    for (name, contents) in writes {
        let path = cli.out.join(&name);
        if let Err(e) = std::fs::write(&path, contents) {
            return fail(format!("cannot write {}: {e}", path.display()));
        }
    }
    if let Some(text) = &outcome.stdout {
        print!("{text}");
    }
    for a in &outcome.assertions {
        eprintln!("{} {}: {}", if a.passed { "ok  " } else { "FAIL" }, a.name, a.detail);
    }
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
