//! Command-line front end: run experiments, redraw plots, solve single
//! scheduling instances and evaluate the error bounds.
//!
//! Failures print one JSON line `{"error": <kind>, "message": <text>}` on
//! stderr and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use obcsaa::bounds::{round_report, BoundParams};
use obcsaa::harness::{emit_plots, run_experiment, ExperimentConfig, MetricsTable};
use obcsaa::scheduler::{
    solve_admm, solve_all_workers, solve_enumeration_capped, AdmmParams, SchedulerInstance, ENUMERATION_CAP,
};

#[derive(Parser)]
#[command(name = "obcsaa", version, about = "One-bit compressive-sensing federated learning over an analog channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.csv, config.resolved.json and plots.
    Run {
        /// JSON experiment config; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Runs only this mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Redraw loss.svg and accuracy.svg from a metrics.csv.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the directory of the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve one scheduling instance given as JSON; prints the result as JSON.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = SolverArg::Auto)]
        solver: SolverArg,
        #[arg(long, default_value_t = ENUMERATION_CAP)]
        cap: usize,
    },
    /// Evaluate the per-round error bounds for JSON bound parameters.
    Bounds {
        #[arg(long)]
        params: PathBuf,
        /// Power scaling factor b.
        #[arg(long)]
        power_scale: f64,
        /// Comma-separated 0/1 selection; defaults to every worker.
        #[arg(long)]
        selected: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Perfect,
    Obcsaa,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SolverArg {
    Auto,
    Enumeration,
    Admm,
    AllWorkers,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<obcsaa::Error>().map_or("cli", obcsaa::Error::kind);
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run { config, seed, mode, out } => run(config.as_deref(), seed, mode, out),
        Command::Plot { metrics, out } => plot(&metrics, out),
        Command::Solve { instance, solver, cap } => solve(&instance, solver, cap),
        Command::Bounds {
            params,
            power_scale,
            selected,
        } => bounds(&params, power_scale, selected.as_deref()),
    }
}

fn read_json(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = fs::read_to_string(path)
        .map_err(obcsaa::Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(obcsaa::Error::from)?)
}

fn run(config: Option<&Path>, seed: Option<u64>, mode: Option<ModeArg>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut value = match config {
        Some(path) => read_json(path)?,
        None => serde_json::json!({}),
    };
    // command-line overrides count as user-set keys
    let Some(object) = value.as_object_mut() else {
        bail!(obcsaa::Error::Config("config must be a JSON object".into()));
    };
    if let Some(seed) = seed {
        object.insert("master_seed".into(), seed.into());
    }
    if let Some(mode) = mode {
        let name = match mode {
            ModeArg::Perfect => "perfect",
            ModeArg::Obcsaa => "obcsaa",
        };
        object.insert("modes".into(), serde_json::json!([name]));
    }
    if let Some(out) = out {
        object.insert("output_dir".into(), serde_json::json!(out));
    }
    let resolved = ExperimentConfig::from_json_str(&value.to_string())?;
    let dir = resolved.config.output_dir.clone();
    let table = run_experiment(&resolved)?;
    let plots = emit_plots(&table, &dir)?;

    let mut last = std::collections::BTreeMap::new();
    for row in &table.rows {
        last.insert((row.mode.clone(), row.seed), row);
    }
    for ((mode, seed), row) in last {
        println!(
            "{mode} seed {seed}: round {} train_loss {:.4} test_acc {:.4}",
            row.round, row.train_loss, row.test_acc
        );
    }
    println!("wrote {}", dir.join("metrics.csv").display());
    for p in plots {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn plot(metrics: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let text = fs::read_to_string(metrics)
        .map_err(obcsaa::Error::from)
        .with_context(|| format!("reading {}", metrics.display()))?;
    let table = MetricsTable::from_csv(&text)?;
    let dir = out.unwrap_or_else(|| metrics.parent().map(Path::to_path_buf).unwrap_or_default());
    for p in emit_plots(&table, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn solve(instance: &Path, solver: SolverArg, cap: usize) -> anyhow::Result<()> {
    let inst: SchedulerInstance = serde_json::from_value(read_json(instance)?).map_err(obcsaa::Error::from)?;
    inst.validate()?;
    let result = match solver {
        SolverArg::Enumeration => solve_enumeration_capped(&inst, cap)?,
        SolverArg::Admm => solve_admm(&inst, &AdmmParams::default())?,
        SolverArg::AllWorkers => solve_all_workers(&inst)?,
        SolverArg::Auto if inst.len() <= cap => solve_enumeration_capped(&inst, cap)?,
        SolverArg::Auto => solve_admm(&inst, &AdmmParams::default())?,
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn parse_selection(text: &str) -> anyhow::Result<Vec<bool>> {
    text.split(',')
        .map(|t| match t.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(obcsaa::Error::Input(format!("selection entries must be 0 or 1, got `{other}`")).into()),
        })
        .collect()
}

fn bounds(params: &Path, power_scale: f64, selected: Option<&str>) -> anyhow::Result<()> {
    let p: BoundParams = serde_json::from_value(read_json(params)?).map_err(obcsaa::Error::from)?;
    p.validate()?;
    let selected = match selected {
        Some(text) => parse_selection(text)?,
        None => vec![true; p.sample_counts.len()],
    };
    let report = round_report(&p, &selected, power_scale)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
