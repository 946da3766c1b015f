use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{debug, info};

use triage_core::config::RunConfig;
use triage_core::metrics::METRICS_CSV_HEADER;
use triage_core::sim_engine::run;
use triage_core::sweep::{run_sweep, SweepSpec};
use triage_core::workload::{generate_synthetic, parse_workload, workload_stats, SyntheticParams};

/// Decoder scheduling simulator.
#[derive(Parser, Debug)]
#[command(name = "triage", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one simulation and print its metrics row.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a parameter sweep and write CSV tables into a directory.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write matrix CSVs (rows M, columns speed).
        #[arg(long)]
        pivot: bool,
    },
    /// Generate a synthetic workload file.
    Gen {
        /// Generator parameters: a TOML file or `key=value,key=value`.
        #[arg(long)]
        params: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Early termination is an outcome, not an error.
enum Outcome {
    Ok,
    Terminated,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TRIAGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Terminated) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Run { config } => cmd_run(&config),
        Command::Sweep {
            spec,
            out,
            workers,
            pivot,
        } => cmd_sweep(&spec, &out, workers, pivot),
        Command::Gen {
            params,
            seed,
            out,
            force,
        } => cmd_gen(&params, seed, &out, force),
        Command::Validate { config } => cmd_validate(&config),
    }
}

fn cmd_run(path: &Path) -> Result<Outcome> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    let workload = cfg.load_workload()?;
    info!("workload {}: {}", workload.name, workload_stats(&workload));
    let sim = cfg.sim_config();
    let result = run(&workload, &sim)?;
    debug!("task counts {:?}", result.task_counts);
    println!("{METRICS_CSV_HEADER}");
    println!("{}", result.csv_row(&cfg.name));
    if let (Some(log_path), Some(log)) = (&cfg.output.event_log, &result.event_log) {
        fs::write(log_path, log)
            .with_context(|| format!("writing event log {}", log_path.display()))?;
    }
    if result.terminated_early {
        info!(
            "terminated: {} idle layers exceed {} x {} original layers",
            result.idle_layers_inserted, cfg.termination_factor, result.original_layers
        );
        return Ok(Outcome::Terminated);
    }
    Ok(Outcome::Ok)
}

fn cmd_sweep(spec_path: &Path, out: &Path, workers: Option<usize>, pivot: bool) -> Result<Outcome> {
    let spec = SweepSpec::load(spec_path)?;
    let n = spec.cells().len();
    info!("sweep: {n} cells x {} repetitions", spec.repetitions);
    let result = run_sweep(&spec, workers)?;
    let files = result
        .write(out, pivot)
        .with_context(|| format!("writing into {}", out.display()))?;
    for f in files {
        println!("{}", out.join(f).display());
    }
    Ok(Outcome::Ok)
}

fn parse_params(arg: &str) -> Result<SyntheticParams> {
    let text = if Path::new(arg).is_file() {
        fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?
    } else {
        arg.split(',')
            .filter(|kv| !kv.trim().is_empty())
            .map(|kv| match kv.split_once('=') {
                Some((k, v)) => Ok(format!("{} = {}\n", k.trim(), v.trim())),
                None => bail!("expected key=value, got `{kv}`"),
            })
            .collect::<Result<String>>()?
    };
    toml::from_str(&text).context("generator parameters")
}

fn cmd_gen(params: &str, seed: u64, out: &Path, force: bool) -> Result<Outcome> {
    if out.exists() && !force {
        bail!("{} exists; pass --force to overwrite", out.display());
    }
    let params = parse_params(params)?;
    let workload = generate_synthetic(&params, seed)?;
    let text = format!("# triage gen --seed {seed}\n{}", workload.to_lli());
    // the written text must read back to the same workload
    let stats = workload_stats(&parse_workload(&text)?);
    fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    println!("{stats}");
    Ok(Outcome::Ok)
}

fn cmd_validate(path: &Path) -> Result<Outcome> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    if let Some(p) = &cfg.workload.path {
        cfg.load_workload().with_context(|| format!("workload {}", p.display()))?;
    }
    println!("ok");
    Ok(Outcome::Ok)
}
