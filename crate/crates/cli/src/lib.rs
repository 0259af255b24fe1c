//! Subcommands of the `veto` binary.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use veto_core::data::{load_csv_with, CsvOptions};
use veto_core::evaluation::{
    format_table, hard_assign, random_restarts_baseline, run_simulation, BaselineReport, SessionMode,
    SimulationConfig, DEFAULT_PURITY_THRESHOLD,
};
use veto_core::mixture::{em_fit, EmConfig};
use veto_core::{derive_seed, synth, Dataset, FitConfig};

/// Interactive clustering with accept/reject feedback.
#[derive(Debug, Parser)]
#[command(name = "veto", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a Gaussian mixture by EM and write its parameters as JSON.
    Fit(FitArgs),
    /// Run simulated feedback sessions against gold labels.
    Simulate(SimulateArgs),
    /// Independent EM fits from different seeds, scored like a session.
    Baseline(BaselineArgs),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
    /// Write the four-Gaussian diamond dataset as CSV with a label column.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// Column holding point identifiers.
    #[arg(long)]
    pub id_column: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Column to exclude from the features as gold labels.
    #[arg(long)]
    pub labels_column: Option<String>,
    /// Number of mixture components.
    #[arg(long)]
    pub k: usize,
    /// Output path for the parameters JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Relative change of the log-likelihood that counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value = "label")]
    pub labels_column: String,
    #[arg(long)]
    pub k: usize,
    /// per-cluster or global.
    #[arg(long, value_parser = parse_mode)]
    pub mode: SessionMode,
    /// Per-cluster: cap on feedback rounds. Global: clusterings produced.
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cluster purity at or above which the simulated analyst accepts.
    #[arg(long, default_value_t = DEFAULT_PURITY_THRESHOLD)]
    pub threshold: f64,
    /// Output path for the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Gold label column; purity is omitted without one.
    #[arg(long)]
    pub labels_column: Option<String>,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Give every run the same seed instead of derived ones.
    #[arg(long)]
    pub same_seed: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for dataset and session documents; restored on startup.
    #[arg(long)]
    pub store_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
    /// Distance of each blob centre from the origin.
    #[arg(long, default_value_t = synth::DEFAULT_SEPARATION)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_mode(s: &str) -> Result<SessionMode, String> {
    s.parse()
}

/// Exit code 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn invalid(msg: impl fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

fn failed(msg: impl fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

fn positive(flag: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(invalid(format!("--{flag} must be at least 1")));
    }
    Ok(())
}

fn load(input: &DataArgs, labels: Option<&str>) -> Result<Dataset, CliError> {
    let file = File::open(&input.data).map_err(|e| invalid(format!("cannot read {}: {e}", input.data.display())))?;
    let opts = CsvOptions {
        label_column: labels.map(str::to_owned),
        id_column: input.id_column.clone(),
    };
    load_csv_with(io::BufReader::new(file), &opts).map_err(|e| invalid(format!("{}: {e}", input.data.display())))
}

fn check_k(k: usize, data: &Dataset) -> Result<(), CliError> {
    positive("k", k)?;
    if k > data.n() {
        return Err(invalid(format!("--k {k} exceeds the {} data points", data.n())));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(io::Error::from)
        .and_then(|_| writeln!(w))
        .and_then(|_| w.flush())
        .map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<(), CliError> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a, out),
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Baseline(a) => cmd_baseline(&a, out),
        Command::Serve(a) => cmd_serve(&a),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

fn print(out: &mut impl Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|e| failed(format!("cannot write output: {e}")))
}

pub fn cmd_fit(a: &FitArgs, out: &mut impl Write) -> Result<(), CliError> {
    positive("k", a.k)?;
    positive("max-iters", a.max_iters)?;
    if !(a.tol > 0.0 && a.tol.is_finite()) {
        return Err(invalid("--tol must be a positive number"));
    }
    let data = load(&a.input, a.labels_column.as_deref())?;
    check_k(a.k, &data)?;
    let cfg = EmConfig {
        max_iters: a.max_iters,
        rel_tol: a.tol,
        seed: a.seed,
    };
    let fit = em_fit(&data, a.k, &cfg).map_err(invalid)?;
    write_json(&a.out, &fit.params)?;
    let ll = fit.final_objective().unwrap_or(f64::NAN);
    let sizes = hard_assign(&fit.clustering).sizes();
    let mut text = format!(
        "log-likelihood {ll:.6}\niterations {}{}\n",
        fit.iterations,
        if fit.converged { "" } else { " (not converged)" }
    );
    text.push_str(&format!("{:>7}  {:>8}  {:>8}\n", "cluster", "size", "weight"));
    for (h, size) in sizes.iter().enumerate() {
        text.push_str(&format!("{h:>7}  {size:>8}  {:>8.4}\n", fit.params.weights()[h]));
    }
    print(out, &text)
}

pub fn cmd_simulate(a: &SimulateArgs, out: &mut impl Write) -> Result<(), CliError> {
    positive("k", a.k)?;
    positive("iterations", a.iterations)?;
    positive("repeats", a.repeats)?;
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(invalid("--threshold must lie in [0, 1]"));
    }
    let data = load(&a.input, Some(&a.labels_column))?;
    check_k(a.k, &data)?;
    let cfg = SimulationConfig {
        fit: FitConfig {
            seed: a.seed,
            ..FitConfig::default()
        },
        iterations: a.iterations,
        threshold: a.threshold,
    };
    let report = run_simulation(&data, a.k, a.mode, &cfg, a.repeats).map_err(failed)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    let mut text = format_table(&[report.table_row()]);
    text.push_str(&format!(
        "sessions {}, stabilized {}, mean feedback rounds {:.2}\n",
        report.sessions.len(),
        report.stabilized,
        report.sessions.iter().map(|s| s.iterations as f64).sum::<f64>() / report.sessions.len() as f64
    ));
    print(out, &text)
}

pub fn cmd_baseline(a: &BaselineArgs, out: &mut impl Write) -> Result<(), CliError> {
    positive("k", a.k)?;
    positive("runs", a.runs)?;
    let data = load(&a.input, a.labels_column.as_deref())?;
    check_k(a.k, &data)?;
    let seeds: Vec<u64> = (0..a.runs as u64)
        .map(|r| if a.same_seed { a.seed } else { derive_seed(a.seed, r) })
        .collect();
    let clusterings = random_restarts_baseline(&data, a.k, &seeds, &EmConfig::default()).map_err(failed)?;
    let report = BaselineReport::new(clusterings, data.gold_labels()).map_err(failed)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print(out, &format_table(&[report.table_row()]))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut impl Write) -> Result<(), CliError> {
    positive("n", a.n)?;
    if !a.separation.is_finite() {
        return Err(invalid("--separation must be finite"));
    }
    let data = synth::four_gaussians(a.n, a.separation, a.seed).map_err(invalid)?;
    match &a.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))?;
            data.write_csv(BufWriter::new(file)).map_err(failed)
        }
        None => data.write_csv(out).map_err(failed),
    }
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .try_init();
    let store = veto_service::Store::open(&a.store_dir)
        .map_err(|e| failed(format!("cannot open store {}: {e}", a.store_dir.display())))?;
    let state = veto_service::AppState::open(store)
        .map_err(|e| failed(format!("cannot load store {}: {e}", a.store_dir.display())))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(failed)?;
    rt.block_on(async {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| failed(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(failed)?;
        eprintln!("listening on http://{local} ({} sessions restored)", state.session_count());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        veto_service::serve(listener, state, shutdown).await.map_err(failed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(parse_mode("global"), Ok(SessionMode::Global));
        assert!(parse_mode("Global").unwrap_err().contains("per-cluster"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(invalid("x").exit_code(), 1);
        assert_eq!(failed("x").exit_code(), 2);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["veto", "synth", "--n", "10", "--separation", "2.5"]).unwrap();
        let Command::Synth(a) = cli.command else { panic!() };
        assert_eq!((a.n, a.separation, a.seed), (10, 2.5, 0));
        assert!(Cli::try_parse_from(["veto", "fit", "--k", "2"]).is_err());
    }
}
