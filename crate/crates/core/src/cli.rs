//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 numerical-guard abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geosgd::{geo_sgd, BoostConfig};
use crate::harness::{run_experiment, save_trace, ExperimentConfig};
use crate::model::{
    prediction_error, random_instance, sample_batch, Instance, InstanceOracle, Parameters, ReplayOracle, SampleBatch,
    SampleOracle,
};
use crate::subspace::{procrustes_distance, Frame};
use crate::trimmed_pca::{trimmed_pca_detailed, TrimConfig};

#[derive(Parser, Debug)]
#[command(name = "lowrank", version, about = "Learn low-rank polynomials over Gaussian covariates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a random instance and a labeled sample batch.
    Generate(GenerateArgs),
    /// Run trimmed PCA and write the recovered frame.
    Warmstart(WarmstartArgs),
    /// Run geodesic SGD from a frame and write the learned parameters.
    Boost(BoostArgs),
    /// Run a full experiment and write its trace CSV.
    Run(RunArgs),
    /// Normalized prediction error of parameters on a batch.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    r: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    seed: u64,
    /// Number of samples in the batch.
    #[arg(long = "N")]
    samples: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha_min: f64,
    #[arg(long, default_value = "instance.json")]
    instance: PathBuf,
    #[arg(long, default_value = "batch.bin")]
    batch: PathBuf,
}

/// Where the learner's samples come from: a stored batch, or fresh draws
/// from an instance file.
#[derive(Args, Debug)]
struct SourceArgs {
    /// Replay samples from this batch file.
    #[arg(long, conflicts_with = "instance")]
    batch: Option<PathBuf>,
    /// Draw fresh samples labeled by this instance file.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Seed for fresh draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instance used only to report distances to the truth.
    #[arg(long)]
    truth: Option<PathBuf>,
}

impl SourceArgs {
    fn oracle(&self) -> Result<Box<dyn SampleOracle>> {
        match (&self.batch, &self.instance) {
            (Some(path), _) => Ok(Box::new(ReplayOracle::new(SampleBatch::load(path)?))),
            (None, Some(path)) => Ok(Box::new(InstanceOracle::new(&read_json::<Instance>(path)?, self.seed))),
            (None, None) => Err(Error::InvalidArgument("one of --batch or --instance is required".into())),
        }
    }

    fn truth(&self) -> Result<Option<Instance>> {
        self.truth.as_deref().or(self.instance.as_deref()).map(read_json).transpose()
    }
}

#[derive(Args, Debug)]
struct WarmstartArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Rank to recover.
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 100_000)]
    samples_per_round: usize,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    quantile: f64,
    /// Choose the quantile by grid search.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value = "frame.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BoostArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    frame: PathBuf,
    /// Degree of the link polynomial.
    #[arg(long)]
    d: usize,
    /// Boost schedule as JSON; defaults are derived from the dimensions otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value = "params.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Trace destination; overrides the config's output_path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    batch: PathBuf,
    /// Normalize by this instance's label variance instead of the batch's.
    #[arg(long)]
    instance: Option<PathBuf>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    if err.is_numerical_guard() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Warmstart(a) => warmstart(a),
        Command::Boost(a) => boost(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
    }
}

fn generate(a: GenerateArgs) -> Result<i32> {
    let inst = random_instance(a.n, a.r, a.d, a.seed, a.alpha_min)?;
    let batch = sample_batch(&inst, a.samples, a.seed.wrapping_add(1));
    write_json(&inst, &a.instance)?;
    batch.save(&a.batch)?;
    println!("alpha {:.6}", inst.alpha);
    Ok(0)
}

fn warmstart(a: WarmstartArgs) -> Result<i32> {
    let config = TrimConfig {
        tau: a.tau,
        samples_per_round: a.samples_per_round,
        quantile: a.quantile,
        quantile_grid: a.grid,
        ..TrimConfig::default()
    };
    let mut oracle = a.source.oracle()?;
    let warm = trimmed_pca_detailed(oracle.as_mut(), a.r, &config)?;
    write_json(&warm.frame, &a.out)?;
    println!("tau {}", warm.tau);
    if let Some(truth) = a.source.truth()? {
        println!("procrustes {}", procrustes_distance(&warm.frame, &truth.truth.frame)?);
    }
    Ok(0)
}

fn boost(a: BoostArgs) -> Result<i32> {
    let frame: Frame = read_json(&a.frame)?;
    let config = match &a.config {
        Some(path) => read_json(path)?,
        None => BoostConfig::defaults(frame.n(), frame.r(), a.d, None, a.eps),
    };
    let mut oracle = a.source.oracle()?;
    let params = geo_sgd(oracle.as_mut(), &frame, a.d, &config)?;
    write_json(&params, &a.out)?;
    println!("samples {}", oracle.samples_drawn());
    if let Some(truth) = a.source.truth()? {
        println!("procrustes {}", procrustes_distance(&params.frame, &truth.truth.frame)?);
        println!("coef_error {}", truth.coef_error(&params)?);
    }
    Ok(0)
}

fn run(a: RunArgs) -> Result<i32> {
    let config = ExperimentConfig::load(&a.config)?;
    let out = match a.out {
        Some(path) => path,
        None if !config.output_path.is_empty() => PathBuf::from(&config.output_path),
        None => return Err(Error::InvalidArgument("no --out given and config has no output_path".into())),
    };
    let outcome = run_experiment(&config)?;
    save_trace(&outcome.records, &out)?;
    for f in &outcome.failures {
        eprintln!("trial {} failed: {}", f.trial, f.error);
    }
    Ok(outcome.failures.iter().map(|f| exit_code(&f.error)).max().unwrap_or(0))
}

fn eval(a: EvalArgs) -> Result<i32> {
    let params: Parameters = read_json(&a.params)?;
    let batch = SampleBatch::load(&a.batch)?;
    let variance = match &a.instance {
        Some(path) => read_json::<Instance>(path)?.y_variance,
        None => label_variance(&batch)?,
    };
    println!("{}", prediction_error(&params, &batch, variance)?);
    Ok(0)
}

fn label_variance(batch: &SampleBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ys = batch.ys();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
    if var > 0.0 {
        Ok(var)
    } else {
        Err(Error::InvalidArgument("batch labels are constant; pass --instance".into()))
    }
}
