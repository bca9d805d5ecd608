use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pisac::runner::{
    episode_log_name, parse_list, parse_seeds, run_episode, run_sweep, write_aggregates_csv, write_metrics_csv,
    write_step_log, Method, ScenarioConfig,
};
use pisac::validate::{run_all, ValidateSizes};
use pisac::{PisacError, Result};

#[derive(Parser)]
#[command(name = "pisac", version, about = "Closed-loop ISAC planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single episode.
    Run {
        /// Scenario file (TOML or JSON); the built-in scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "pisac")]
        method: Method,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Transmit SNR; overrides the scenario value.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every combination of methods, seeds and SNRs.
    Sweep {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Comma separated, e.g. `pisac,isac,srm`.
        #[arg(long, default_value = "pisac,isac,srm,mmf,rda")]
        methods: String,
        /// Inclusive range `a..b` or a comma list.
        #[arg(long, default_value = "0..19")]
        seeds: String,
        /// Comma separated SNR values in dB.
        #[arg(long)]
        snr_db: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle checks on the estimation, allocation and distance code.
    Validate {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn load(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default_scenario()),
    }
}

fn run(scenario: Option<&Path>, method: Method, seed: u64, snr_db: Option<f64>, out: &Path) -> Result<()> {
    let base = load(scenario)?;
    let config = base.with_run(method, seed, snr_db.unwrap_or(base.isac.snr_db));
    config.validate()?;
    let episode = run_episode(&config)?;
    fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("metrics.csv"), std::slice::from_ref(&episode.metrics))?;
    write_step_log(&out.join(episode_log_name(method, seed)), &episode.log)?;
    let m = &episode.metrics;
    println!(
        "{method} seed {seed} snr {} dB: {} after {} steps, length {:.2} m",
        m.snr_db,
        m.failure_reason.map_or("success".to_string(), |r| r.to_string()),
        m.steps,
        m.traj_length
    );
    Ok(())
}

fn sweep(scenario: Option<&Path>, methods: &str, seeds: &str, snrs: &str, out: &Path) -> Result<()> {
    let config = load(scenario)?;
    config.validate()?;
    let methods: Vec<Method> = parse_list(methods)?;
    let seeds = parse_seeds(seeds)?;
    let snrs: Vec<f64> = parse_list(snrs)?;
    let result = run_sweep(&config, &methods, &seeds, &snrs)?;
    fs::create_dir_all(out)?;
    let metrics: Vec<_> = result.episodes.iter().map(|e| e.metrics.clone()).collect();
    write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    write_aggregates_csv(&out.join("aggregates.csv"), &result.aggregates)?;
    for episode in &result.episodes {
        let m = &episode.metrics;
        let dir = out.join(format!("snr_{}", m.snr_db));
        fs::create_dir_all(&dir)?;
        write_step_log(&dir.join(episode_log_name(m.method, m.seed)), &episode.log)?;
    }
    for row in &result.aggregates {
        println!(
            "{:>6} {:>5} dB: success {:.2}, length {:.2} m, sum rate {:.3}, crb trace {:.3e}",
            row.method.to_string(),
            row.snr_db,
            row.success_rate,
            row.traj_length,
            row.sum_rate,
            row.crb_trace
        );
    }
    Ok(())
}

fn validate(seed: u64) -> Result<bool> {
    let checks = run_all(&ValidateSizes::FULL, seed)?;
    for check in &checks {
        println!("{check}");
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { scenario, method, seed, snr_db, out } => {
            run(scenario.as_deref(), *method, *seed, *snr_db, out).map(|_| true)
        }
        Command::Sweep { scenario, methods, seeds, snr_db, out } => {
            sweep(scenario.as_deref(), methods, seeds, snr_db, out).map(|_| true)
        }
        Command::Validate { seed } => validate(*seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => report(&e),
    }
}

fn report(e: &PisacError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
