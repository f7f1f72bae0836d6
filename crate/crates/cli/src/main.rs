use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;
use p2pgrid::config::{Config, ConfigError, Setup};
use p2pgrid::harness::{config_digest, run_case, HarnessError};
use p2pgrid::metrics::{compare, payoff_table, payoff_table_csv, CaseResult, MetricsError, Timing};
use p2pgrid::scenario::{generate_dataset, read_dataset, split, write_dataset, ScenarioError, DATASET_FILE};
use p2pgrid::surrogate::{self, Metrics, SurrogateError};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const MANIFEST: &str = "run-manifest.json";
const RESULT: &str = "result.json";
const TIMING: &str = "timing.json";
const MODEL: &str = "model.bin";

#[derive(Parser, Debug)]
#[command(name = "p2pgrid", version, about = "Grid-aware P2P energy trading pipeline")]
struct Cli {
    /// Configuration file.
    #[arg(long, short, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Root under which each run gets its own directory.
    #[arg(long, short, global = true, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; defaults to the subcommand and a timestamp.
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// Overrides the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for dataset generation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample scenarios, solve them and write the training dataset.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
    },
    /// Train the surrogate on a dataset.
    Train {
        /// Dataset file or the directory holding it.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: Option<u64>,
        #[command(flatten)]
        holdout: Holdout,
    },
    /// Score a trained model on a dataset.
    EvalModel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        holdout: Holdout,
    },
    /// Run one case study over the configured horizon.
    RunCase {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=3))]
        case: u8,
        /// Trained surrogate, required by case 3.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Tabulate result bundles side by side.
    Compare {
        /// Run directories or result files.
        #[arg(required = true, num_args = 2..)]
        results: Vec<PathBuf>,
    },
    /// Write the feeder summary as JSON.
    ExportNetwork,
    /// Repeat a run from its manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Args, Debug, Clone, Copy)]
struct Holdout {
    /// Fraction held out for testing.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Solver(String),
    Training(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Solver(_) => 4,
            Failure::Training(_) => 5,
        }
    }

    fn class(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Solver(_) => "solver",
            Failure::Training(_) => "training",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Solver(m) | Failure::Training(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } | ConfigError::Parse { .. } | ConfigError::Invalid(_) => Failure::Usage(e.to_string()),
            ConfigError::Network(_) => Failure::Data(e.to_string()),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Market { .. } | ScenarioError::Systematic { .. } => Failure::Solver(e.to_string()),
            ScenarioError::Argument(_) | ScenarioError::Ranges(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<SurrogateError> for Failure {
    fn from(e: SurrogateError) -> Self {
        match e {
            SurrogateError::Divergence { .. } | SurrogateError::NonFinite { .. } | SurrogateError::EmptyDataset => {
                Failure::Training(e.to_string())
            }
            SurrogateError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::UnknownCase(_) | HarnessError::MissingModel => Failure::Usage(e.to_string()),
            HarnessError::Step { .. } => Failure::Solver(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Data(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        })
        .parse_default_env()
        .init();
    match dispatch(cli, argv) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error ({}): {}", f.class(), f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<PathBuf, Failure> {
    if let Cmd::Rerun { manifest } = &cli.cmd {
        return rerun(&cli, manifest);
    }
    let config = Config::load(&cli.config)?;
    execute(cli, config, argv)
}

/// Replays the recorded arguments against the recorded configuration.
fn rerun(outer: &Cli, manifest: &Path) -> Result<PathBuf, Failure> {
    let text = fs::read_to_string(manifest).map_err(io(manifest))?;
    let m: Value = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", manifest.display())))?;
    let bad = || Failure::Data(format!("{} is not a run manifest", manifest.display()));
    let argv: Vec<String> = serde_json::from_value(m["argv"].clone()).map_err(|_| bad())?;
    let toml = m["config_toml"].as_str().ok_or_else(bad)?;
    let mut cli = Cli::try_parse_from(&argv).map_err(|e| Failure::Usage(e.to_string()))?;
    cli.out = outer.out.clone();
    cli.run_name = outer.run_name.clone();
    let config = Config::from_toml(toml, manifest)?;
    execute(cli, config, argv)
}

fn execute(cli: Cli, mut config: Config, argv: Vec<String>) -> Result<PathBuf, Failure> {
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.training.seed = seed;
    }
    if let Cmd::Train { epochs: Some(e), .. } = &cli.cmd {
        config.training.epochs = *e as usize;
    }
    config.validate()?;
    let name = cli.run_name.clone().unwrap_or_else(|| stamp(command_name(&cli.cmd)));
    let dir = cli.out.join(name);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    info!("writing to {}", dir.display());

    let inputs = match &cli.cmd {
        Cmd::GenData { n } => gen_data(&config, *n as usize, cli.workers as usize, &dir)?,
        Cmd::Train { data, holdout, .. } => train(&config, data, *holdout, &dir)?,
        Cmd::EvalModel { model, data, holdout } => eval_model(&config, model, data, *holdout, &dir)?,
        Cmd::RunCase { case, model } => case_study(config.clone(), *case, model.as_deref(), &dir)?,
        Cmd::Compare { results } => compare_results(results, &dir)?,
        Cmd::ExportNetwork => export_network(&config, &dir)?,
        Cmd::Rerun { .. } => unreachable!("handled before execution"),
    };

    let manifest = json!({
        "command": command_name(&cli.cmd),
        "argv": argv,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "config_toml": config.to_toml(),
        "inputs": inputs,
    });
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(dir)
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::GenData { .. } => "gen-data",
        Cmd::Train { .. } => "train",
        Cmd::EvalModel { .. } => "eval-model",
        Cmd::RunCase { .. } => "run-case",
        Cmd::Compare { .. } => "compare",
        Cmd::ExportNetwork => "export-network",
        Cmd::Rerun { .. } => "rerun",
    }
}

fn stamp(cmd: &str) -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{cmd}-{}-{:03}", t.as_secs(), t.subsec_millis())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io(path))
}

/// Path and content hash of an input file.
fn fingerprint(path: &Path) -> Result<Value, Failure> {
    let bytes = fs::read(path).map_err(io(path))?;
    let hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(json!({ "path": path, "sha256": hash }))
}

fn gen_data(config: &Config, n: usize, workers: usize, dir: &Path) -> Result<Value, Failure> {
    let setup = Setup::new(config.clone())?;
    let data = generate_dataset(&setup, n, &config.sampling, config.seed, workers)?;
    let cfg = serde_json::to_value(config).map_err(|e| Failure::Data(e.to_string()))?;
    let m = write_dataset(dir, &data, cfg)?;
    info!(
        "kept {} of {} scenarios ({} dropped)",
        m.retained,
        m.requested,
        m.drops.dropped()
    );
    Ok(json!({ "network": fingerprint(&config.network.path)? }))
}

fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(DATASET_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Train/test partition of a dataset at scenario granularity.
fn holdout_split(
    config: &Config,
    data: &Path,
    holdout: Holdout,
) -> Result<(Vec<surrogate::Sample>, Vec<surrogate::Sample>), Failure> {
    if !(holdout.test_fraction > 0.0 && holdout.test_fraction < 1.0) {
        return Err(Failure::Usage("--test-fraction must lie in (0, 1)".into()));
    }
    let path = dataset_path(data);
    if !path.exists() {
        return Err(Failure::Data(format!("dataset {} not found", path.display())));
    }
    let samples: Vec<_> = read_dataset(&path)?.iter().map(|r| r.sample()).collect();
    let (train, test) = split(&samples, 1.0 - holdout.test_fraction, config.seed)?;
    Ok((train, test))
}

fn metrics_json(m: &Metrics) -> Value {
    json!({
        "mae_mw": m.mae_kw / 1000.0,
        "rmse_mw": m.rmse_kw / 1000.0,
        "r2": m.r2,
        "target_std_mw": m.target_std_kw / 1000.0,
        "n_tokens": m.n_tokens,
    })
}

fn print_metrics(m: &Metrics) {
    println!("{:>12} {:>12} {:>8}", "MAE (MW)", "RMSE (MW)", "R2");
    println!("{:>12.3e} {:>12.3e} {:>8.4}", m.mae_kw / 1000.0, m.rmse_kw / 1000.0, m.r2);
}

fn train(config: &Config, data: &Path, holdout: Holdout, dir: &Path) -> Result<Value, Failure> {
    let (train_set, test_set) = holdout_split(config, data, holdout)?;
    let (model, history) = surrogate::train(&train_set, &config.training)?;
    surrogate::save(&model, dir.join(MODEL))?;
    let hist = dir.join("history.csv");
    fs::write(&hist, history.to_csv()).map_err(io(&hist))?;
    let m = surrogate::evaluate(&model, &test_set)?;
    write_json(&dir.join("metrics.json"), &metrics_json(&m))?;
    print_metrics(&m);
    Ok(json!({ "dataset": fingerprint(&dataset_path(data))? }))
}

fn eval_model(config: &Config, model: &Path, data: &Path, holdout: Holdout, dir: &Path) -> Result<Value, Failure> {
    let (_, test_set) = holdout_split(config, data, holdout)?;
    let model_path = if model.is_dir() { model.join(MODEL) } else { model.to_path_buf() };
    let net = surrogate::load_with_shape(&model_path, &config.training.hyper)?;
    let m = surrogate::evaluate(&net, &test_set)?;
    write_json(&dir.join("metrics.json"), &metrics_json(&m))?;
    print_metrics(&m);
    Ok(json!({
        "dataset": fingerprint(&dataset_path(data))?,
        "model": fingerprint(&model_path)?,
    }))
}

fn case_study(config: Config, case: u8, model: Option<&Path>, dir: &Path) -> Result<Value, Failure> {
    let setup = Setup::new(config)?;
    let (net, model_input) = match model {
        Some(p) => {
            let path = if p.is_dir() { p.join(MODEL) } else { p.to_path_buf() };
            let net = surrogate::load_with_shape(&path, &setup.config.training.hyper)?;
            (Some(net), Some(fingerprint(&path)?))
        }
        None if case == 3 => {
            return Err(Failure::Usage(
                "case 3 needs a trained surrogate: pass --model <model.bin>".into(),
            ))
        }
        None => (None, None),
    };
    let result = run_case(&setup, case, net.as_ref())?;
    write_json(&dir.join(RESULT), &result)?;
    write_json(&dir.join(TIMING), &result.timing)?;

    let mut series = String::from("hour,price");
    for id in &result.mg_ids {
        series += &format!(",proposed_{id},transacted_{id}");
    }
    series.push('\n');
    for h in &result.hours {
        series += &format!("{},{}", h.hour, h.price);
        for (p, t) in h.proposed_kw.iter().zip(&h.transacted_kw) {
            series += &format!(",{p},{t}");
        }
        series.push('\n');
    }
    let path = dir.join("hourly.csv");
    fs::write(&path, series).map_err(io(&path))?;

    let mut volts = String::from("hour");
    for b in &result.bus_ids {
        volts += &format!(",v_{b}");
    }
    volts.push('\n');
    for (h, v) in result.hours.iter().zip(result.audit_profiles()) {
        volts += &h.hour.to_string();
        for x in v {
            volts += &format!(",{x}");
        }
        volts.push('\n');
    }
    let path = dir.join("voltages.csv");
    fs::write(&path, volts).map_err(io(&path))?;

    info!(
        "case {case}: traded {:.2} kW, payoff {:.2}, {} D-OPF solves, {:.3} s",
        result.traded_total(),
        result.payoff_total(),
        result.dopf_calls(),
        result.timing.wall_time_s
    );
    Ok(json!({
        "network": fingerprint(&setup.config.network.path)?,
        "model": model_input,
        "config_digest": config_digest(&setup),
    }))
}

fn load_result(p: &Path) -> Result<CaseResult, Failure> {
    let (file, timing) = if p.is_dir() {
        (p.join(RESULT), p.join(TIMING))
    } else {
        (p.to_path_buf(), p.with_file_name(TIMING))
    };
    let text = fs::read_to_string(&file).map_err(io(&file))?;
    let mut r: CaseResult =
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", file.display())))?;
    if let Ok(t) = fs::read_to_string(&timing) {
        r.timing = serde_json::from_str::<Timing>(&t).map_err(|e| Failure::Data(format!("{}: {e}", timing.display())))?;
    }
    Ok(r)
}

fn compare_results(paths: &[PathBuf], dir: &Path) -> Result<Value, Failure> {
    let results = paths.iter().map(|p| load_result(p)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&CaseResult> = results.iter().collect();
    let cmp = compare(&refs)?;
    let path = dir.join("comparison.csv");
    fs::write(&path, cmp.to_csv()).map_err(io(&path))?;
    let path = dir.join("payoff.csv");
    fs::write(&path, payoff_table_csv(&payoff_table(&refs))).map_err(io(&path))?;
    print!("{}", cmp.to_table());
    let inputs = paths
        .iter()
        .map(|p| fingerprint(&if p.is_dir() { p.join(RESULT) } else { p.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Value::Array(inputs))
}

fn export_network(config: &Config, dir: &Path) -> Result<Value, Failure> {
    let topo = config.topology()?;
    write_json(&dir.join("network.json"), &topo.summary())?;
    Ok(json!({ "network": fingerprint(&config.network.path)? }))
}
