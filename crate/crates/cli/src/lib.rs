//! Command-line operation of the pipeline and the HTTP front end.
//!
//! Every subcommand reads its inputs from a content-addressed registry,
//! writes its outputs back, records its resolved configuration beside them
//! and prints a one-line summary (or a JSON object with `--json`).

pub mod commands;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

/// Exit status for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when an upstream artifact is missing from the registry.
pub const EXIT_MISSING_ARTIFACT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "esp", version, about = "Predict-then-prescribe pipeline for epidemic interventions")]
pub struct Cli {
    /// Artifact registry directory.
    #[arg(long, global = true, default_value = "esp-registry", env = "ESP_REGISTRY")]
    pub registry: PathBuf,
    /// Print the summary as one JSON object.
    #[arg(long, global = true)]
    pub json: bool,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a pinned synthetic tracker snapshot and population table.
    SynthSnapshot(SynthArgs),
    /// Ingest a tracker CSV into a dataset artifact.
    Ingest(IngestArgs),
    /// Train the recurrent predictor on a dataset.
    TrainPredictor(TrainArgs),
    /// Compare the predictor with the flat baselines over seeded trials.
    EvalPredictor(EvalArgs),
    /// Fit the residual Gaussian process that calibrates the predictor.
    FitRio(RioArgs),
    /// Evolve prescriptors against the predictor.
    Evolve(EvolveArgs),
    /// Forecast one country under one prescriptor.
    Forecast(ForecastArgs),
    /// Publish a dataset/predictor/calibration/front tuple for serving.
    Publish(PublishArgs),
    /// Serve the published artifacts over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "data")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2020)]
    pub seed: u64,
    #[arg(long, default_value_t = 141)]
    pub days: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub population: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset fingerprint; defaults to the latest ingested dataset.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub max_epochs: usize,
    /// Also write per-trial rows to this CSV file.
    #[arg(long)]
    pub trials_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RioArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub predictor: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Countries whose one-step MAE is below this are used.
    #[arg(long, default_value_t = 0.04)]
    pub mae_threshold: f64,
    /// Only the most affected countries are considered.
    #[arg(long, default_value_t = 30)]
    pub top_countries: usize,
    #[arg(long, default_value_t = 8)]
    pub restarts: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_train: usize,
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub predictor: Option<String>,
    /// Base configuration (JSON or TOML); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pop: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub countries: Option<usize>,
    /// Evaluate against a closed-form stand-in instead of the trained predictor.
    #[arg(long)]
    pub stand_in: bool,
    /// Rollout start date; defaults to each country's last recorded day.
    #[arg(long)]
    pub start_date: Option<chrono::NaiveDate>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub country: String,
    #[arg(long, default_value_t = 0)]
    pub prescriptor: usize,
    #[arg(long, default_value_t = 180)]
    pub horizon: usize,
    #[arg(long)]
    pub start_date: Option<chrono::NaiveDate>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub rollouts: usize,
    /// Output file; `.json` writes the full response, anything else CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Forecast from the published manifest instead of the latest artifacts.
    #[arg(long)]
    pub published: bool,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub predictor: Option<String>,
    #[arg(long)]
    pub gp: Option<String>,
    /// Publish without uncertainty bands.
    #[arg(long, conflicts_with = "gp")]
    pub no_gp: bool,
    #[arg(long)]
    pub front: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML file with bind address, port, registry and cache settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

/// Outcome of a subcommand: a one-line message plus structured fields.
#[derive(Debug, Clone)]
pub struct Summary {
    pub command: &'static str,
    pub message: String,
    pub fields: Value,
}

impl Summary {
    pub fn render(&self, json: bool) -> String {
        if json {
            let mut obj = serde_json::Map::new();
            obj.insert("command".into(), Value::from(self.command));
            obj.insert("ok".into(), Value::from(true));
            if let Value::Object(f) = &self.fields {
                obj.extend(f.clone());
            }
            Value::Object(obj).to_string()
        } else {
            self.message.clone()
        }
    }
}

/// Exit status for an error: 3 when a registry artifact is missing, else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<esp_core::Error>() {
        Some(esp_core::Error::NotFound { kind, .. }) if *kind != "country" => EXIT_MISSING_ARTIFACT,
        _ => 1,
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}

/// Parses `argv`, runs the subcommand and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let json = cli.json;
    match commands::dispatch(cli) {
        Ok(summary) => {
            println!("{}", summary.render(json));
            0
        }
        Err(err) => {
            let code = exit_code(&err);
            let err = match err.downcast_ref::<esp_core::Error>() {
                Some(esp_core::Error::NotFound { kind, id }) if code == EXIT_MISSING_ARTIFACT => {
                    anyhow::anyhow!("missing {kind} artifact {id}")
                }
                _ => err,
            };
            if json {
                println!("{}", serde_json::json!({ "ok": false, "exit_code": code, "error": format!("{err:#}") }));
            }
            eprintln!("error: {err:#}");
            code
        }
    }
}
