//! Benchmark harness: replicated experiments across algorithms and
//! problems, persisted traces, and plot-ready summaries.
//!
//! Exit codes: 0 success, 1 configuration error, 2 check or run failure.

mod config;
mod selfcheck;
mod trace;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use trace::PersistedRow;

type RepResult = Result<(usize, Vec<PersistedRow>, bool), String>;

#[derive(Parser)]
#[command(
    name = "bqo-bench",
    about = "Benchmark harness for Bayesian quadrature optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated experiment from a JSON config.
    Run {
        /// Path to the experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the replication count.
        #[arg(long)]
        reps: Option<usize>,
        /// Override the acquisition budget N.
        #[arg(long)]
        budget: Option<usize>,
        /// Restrict to one algorithm tag.
        #[arg(long)]
        algo: Option<String>,
        /// Override the problem tag.
        #[arg(long)]
        problem: Option<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast structural checks.
    Selfcheck,
    /// Re-aggregate existing traces into a plot-ready mean/SE table.
    Plotdata {
        /// Directory holding trace_*.csv files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            reps,
            budget,
            algo,
            problem,
            out,
        } => cmd_run(&config, seed, reps, budget, algo, problem, out),
        Command::Selfcheck => cmd_selfcheck(),
        Command::Plotdata { out } => cmd_plotdata(&out),
    }
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    reps: Option<usize>,
    budget: Option<usize>,
    algo: Option<String>,
    problem: Option<String>,
    out: Option<PathBuf>,
) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", path.display());
            return ExitCode::from(1);
        }
    };
    let mut cfg = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = reps {
        cfg.reps = r;
    }
    if let Some(b) = budget {
        cfg.budget = b;
    }
    if let Some(a) = algo {
        cfg.algorithms = vec![a];
    }
    if let Some(p) = problem {
        cfg.problem.tag = p;
    }
    if let Some(o) = out {
        cfg.out = o.display().to_string();
    }
    if let Err(e) = cfg.validate() {
        eprintln!("config error: {e}");
        return ExitCode::from(1);
    }
    match execute(&cfg) {
        Ok(partial) => {
            if partial {
                eprintln!("run finished with partial traces (simulator aborts); see summary");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("run failure: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(cfg: &ExperimentConfig) -> Result<bool, String> {
    let out_dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| format!("cannot create {}: {e}", out_dir.display()))?;
    let workers = if cfg.workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        cfg.workers
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| e.to_string())?;
    let mut all_rows: Vec<PersistedRow> = Vec::new();
    let mut any_partial = false;
    for (alg_idx, alg) in cfg.algorithms.iter().enumerate() {
        let settings = cfg.build_settings(alg).map_err(|e| e.to_string())?;
        // Each replication is independent: its own problem instance (the
        // simulated problems are deterministic in their own seed) and a
        // seed derived from (base, algorithm, replication) only.
        let results: Vec<RepResult> = pool.install(|| {
            (0..cfg.reps)
                .into_par_iter()
                .map(|rep| {
                    let problem = cfg.build_problem().map_err(|e| e.to_string())?;
                    let seed = bqo::normal::derive_seed(
                        bqo::normal::derive_seed(cfg.seed, 7919 + alg_idx as u64),
                        rep as u64,
                    );
                    let outcome =
                        bqo::driver::run(&problem, &settings, seed).map_err(|e| e.to_string())?;
                    let rows: Vec<PersistedRow> = outcome
                        .rows
                        .iter()
                        .map(|r| PersistedRow::from_trace(r, rep, alg))
                        .collect();
                    Ok((rep, rows, outcome.aborted.is_some()))
                })
                .collect()
        });
        let problem = cfg.build_problem().map_err(|e| e.to_string())?;
        let with_true_g = problem.true_g.is_some();
        for res in results {
            let (rep, rows, partial) = res?;
            any_partial |= partial;
            let path = trace::trace_path(&out_dir, alg, rep);
            std::fs::write(&path, trace::to_csv(&rows, with_true_g))
                .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            all_rows.extend(rows);
        }
    }
    let summary = trace::summarize(&all_rows);
    std::fs::write(out_dir.join("summary.csv"), summary)
        .map_err(|e| format!("cannot write summary: {e}"))?;
    Ok(any_partial)
}

fn cmd_selfcheck() -> ExitCode {
    let t = std::time::Instant::now();
    let ok = selfcheck::run_all(|name, result| match result {
        Ok(detail) => println!("check {name}: pass ({detail})"),
        Err(detail) => println!("check {name}: FAIL ({detail})"),
    });
    println!("selfcheck finished in {:.1}s", t.elapsed().as_secs_f64());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn cmd_plotdata(dir: &Path) -> ExitCode {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", dir.display());
            return ExitCode::from(1);
        }
    };
    let mut rows = Vec::new();
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("trace_") && name.ends_with(".csv") {
            match std::fs::read_to_string(entry.path()) {
                Ok(text) => match trace::from_csv(&text) {
                    Ok(mut r) => rows.append(&mut r),
                    Err(e) => {
                        eprintln!("run failure: {name}: {e}");
                        return ExitCode::from(2);
                    }
                },
                Err(e) => {
                    eprintln!("run failure: cannot read {name}: {e}");
                    return ExitCode::from(2);
                }
            }
        }
    }
    if rows.is_empty() {
        eprintln!("run failure: no trace files found in {}", dir.display());
        return ExitCode::from(2);
    }
    let summary = trace::summarize(&rows);
    let path = dir.join("plotdata.csv");
    if let Err(e) = std::fs::write(&path, &summary) {
        eprintln!("run failure: cannot write {}: {e}", path.display());
        return ExitCode::from(2);
    }
    print!("{summary}");
    ExitCode::SUCCESS
}
