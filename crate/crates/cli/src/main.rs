//! Command-line entry point: run experiments from JSON configs, sweep one
//! parameter across values, or run the numerical validation suite.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 invalid
//! configuration or arguments.

use anyhow::Context;
use clap::{Parser, Subcommand};
use lazy_psrl::checks::{run_family_checks, CheckFamily, CheckReport};
use lazy_psrl::config::{apply_sweep_value, ExperimentConfig, SWEEPABLE_PARAMS};
use lazy_psrl::harness::{run_experiment, summarize, ExperimentResult};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lazy-psrl",
    about = "Lazy posterior-sampling control experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on parallel seed workers.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the config once per value of one sweepable parameter.
    Sweep {
        config: PathBuf,
        /// Parameter to sweep: lambda, sigma, t, or resample_factor.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the property suite for one system family.
    Validate {
        /// Family: tabular or linear.
        #[arg(long)]
        family: String,
        /// Random instances per check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Base seed for the suite.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
        } => with_threads(threads, || cmd_run(&config, out.as_deref())),
        Command::Sweep {
            config,
            param,
            values,
            out,
            threads,
        } => with_threads(threads, || cmd_sweep(&config, &param, &values, out.as_deref())),
        Command::Validate {
            family,
            trials,
            seed,
        } => cmd_validate(&family, trials, seed),
    }
}

/// Runs `body` inside a rayon pool capped at `threads` workers.
fn with_threads(threads: Option<usize>, body: impl FnOnce() -> ExitCode + Send) -> ExitCode {
    match threads {
        None => body(),
        Some(n) => {
            if n == 0 {
                eprintln!("config field `--threads`: must be at least 1");
                return ExitCode::from(2);
            }
            #[cfg(feature = "parallel")]
            {
                match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    Ok(pool) => pool.install(body),
                    Err(e) => {
                        eprintln!("failed to build worker pool: {e}");
                        ExitCode::from(1)
                    }
                }
            }
            #[cfg(not(feature = "parallel"))]
            {
                body()
            }
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("config file `{}`: {e}", path.display()))?;
    let cfg = ExperimentConfig::from_json(&text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    // Resolve the environment now so `env` problems surface as config
    // errors, not runtime failures.
    lazy_psrl::config::resolve_env(&cfg).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    std::fs::write(dir.join("regret.csv"), result.regret_csv())?;
    let summary = summarize(cfg, result);
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    for record in &result.records {
        std::fs::write(
            dir.join(format!("trajectory-{}.jsonl", record.seed)),
            record.trajectory_jsonl(),
        )?;
    }
    Ok(())
}

fn cmd_run(config_path: &Path, out: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("invalid config: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match run_experiment(&cfg) {
        Ok(result) => result,
        Err(e) => {
            eprintln!("experiment failed: {e}");
            return ExitCode::from(1);
        }
    };
    let dir = output_dir(&cfg, out);
    if let Err(e) = write_outputs(&dir, &cfg, &result) {
        eprintln!("writing outputs: {e}");
        return ExitCode::from(1);
    }
    println!(
        "wrote {} (final mean regret {:.6}, {} seeds, {:.2}s)",
        dir.display(),
        result.mean_regret.last().copied().unwrap_or(0.0),
        result.records.len(),
        result.wall_time_s
    );
    ExitCode::SUCCESS
}

fn cmd_sweep(config_path: &Path, param: &str, values: &str, out: Option<&Path>) -> ExitCode {
    let cfg = match load_config(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("invalid config: {e}");
            return ExitCode::from(2);
        }
    };
    if !SWEEPABLE_PARAMS.contains(&param) {
        eprintln!(
            "invalid config: parameter `{param}` is not sweepable (choose one of {})",
            SWEEPABLE_PARAMS.join(", ")
        );
        return ExitCode::from(2);
    }
    let parsed: Result<Vec<f64>, _> = values
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect();
    let parsed = match parsed {
        Ok(v) if !v.is_empty() => v,
        _ => {
            eprintln!("invalid config: --values must be a comma-separated list of numbers");
            return ExitCode::from(2);
        }
    };

    // Validate every point before running anything.
    let mut points = Vec::new();
    for &value in &parsed {
        match apply_sweep_value(&cfg, param, value) {
            Ok(point) => points.push((value, point)),
            Err(e) => {
                eprintln!("invalid config: {e}");
                return ExitCode::from(2);
            }
        }
    }

    let dir = output_dir(&cfg, out);
    let mut combined = String::from("param,value,final_mean_regret,final_std_regret\n");
    for (value, point) in &points {
        let result = match run_experiment(point) {
            Ok(result) => result,
            Err(e) => {
                eprintln!("experiment failed at {param}={value}: {e}");
                return ExitCode::from(1);
            }
        };
        let sub = dir.join(format!("{param}-{value}"));
        if let Err(e) = write_outputs(&sub, point, &result) {
            eprintln!("writing outputs: {e}");
            return ExitCode::from(1);
        }
        combined.push_str(&format!(
            "{},{},{},{}\n",
            param,
            value,
            result.mean_regret.last().copied().unwrap_or(0.0),
            result.std_regret.last().copied().unwrap_or(0.0)
        ));
        println!(
            "{param}={value}: final mean regret {:.6}",
            result.mean_regret.last().copied().unwrap_or(0.0)
        );
    }
    if let Err(e) = std::fs::create_dir_all(&dir)
        .map_err(anyhow::Error::from)
        .and_then(|_| std::fs::write(dir.join("sweep.csv"), combined).map_err(Into::into))
    {
        eprintln!("writing outputs: {e}");
        return ExitCode::from(1);
    }
    println!("wrote {}", dir.join("sweep.csv").display());
    ExitCode::SUCCESS
}

fn print_report_table(reports: &[CheckReport]) {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(10);
    for report in reports {
        println!(
            "{:<width$}  {}  {}",
            report.name,
            if report.passed { "PASS" } else { "FAIL" },
            report.detail,
        );
    }
}

fn cmd_validate(family: &str, trials: usize, seed: u64) -> ExitCode {
    let family = match family {
        "tabular" => CheckFamily::Tabular,
        "linear" => CheckFamily::Linear,
        other => {
            eprintln!("invalid config: family must be `tabular` or `linear`, got `{other}`");
            return ExitCode::from(2);
        }
    };
    if trials == 0 {
        eprintln!("invalid config: --trials must be at least 1");
        return ExitCode::from(2);
    }
    let reports = run_family_checks(family, trials, seed);
    print_report_table(&reports);
    if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
