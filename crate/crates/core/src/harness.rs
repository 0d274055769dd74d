//! Experiment orchestration: seeded trials of warm start plus boosting, with
//! per-round convergence traces written as CSV.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geosgd::{geo_sgd_observed, BoostConfig};
use crate::model::{phase_retrieval_instance, random_instance, sample_batch, Instance, InstanceOracle, SampleOracle};
use crate::subspace::principal_angles;
use crate::trimmed_pca::{trimmed_pca, TrimConfig};

/// Environment variable capping the number of worker threads (0 or unset = auto).
pub const THREADS_ENV: &str = "LOWRANK_THREADS";

/// Column order of the trace CSV.
pub const TRACE_HEADER: [&str; 9] = [
    "trial",
    "phase",
    "round",
    "procrustes",
    "chordal",
    "coef_error",
    "pred_error",
    "samples_used",
    "wall_ms",
];

/// How each trial's ground truth is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFamily {
    /// Gaussian Hermite coefficients, rejected until `α ≥ alpha_min`.
    #[default]
    Random,
    /// `p(z) ∝ Σ_j φ_2(z_j)`; needs `d = 2`.
    PhaseRetrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub alpha_min: f64,
    pub seed: u64,
    #[serde(default)]
    pub link: LinkFamily,
    #[serde(default)]
    pub warm: TrimConfig,
    /// Boosting schedule; derived from [`BoostConfig::defaults`] per instance when absent.
    #[serde(default)]
    pub boost: Option<BoostConfig>,
    pub trials: usize,
    #[serde(default)]
    pub output_path: String,
    /// Held-out samples used for the prediction error column.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// When false `wall_ms` is written as 0, making traces byte-reproducible.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_eval_samples() -> usize {
    20_000
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Rank-1 phase retrieval `P(x) ∝ ⟨v*, x⟩² − 1` in dimension 50.
    pub fn phase_retrieval(seed: u64, trials: usize) -> Self {
        let n = 50;
        ExperimentConfig {
            n,
            r: 1,
            d: 2,
            alpha_min: 0.5,
            seed,
            link: LinkFamily::PhaseRetrieval,
            warm: TrimConfig {
                samples_per_round: 200_000,
                ..TrimConfig::default()
            },
            boost: Some(BoostConfig {
                eta_coef: 0.1,
                eta_vec: 0.05 / n as f64,
                t_outer: 20,
                t_realign: 200,
                b_realign: 64,
                t_subspace: 20 * n,
                target_eps: 1e-4,
                seed: 0,
            }),
            trials,
            output_path: String::new(),
            eval_samples: default_eval_samples(),
            record_wall_time: true,
        }
    }

    /// Rank-2 cubic links in dimension 30 with `α ≥ 0.3`.
    pub fn rank_two_cubic(seed: u64, trials: usize) -> Self {
        let n = 30;
        ExperimentConfig {
            n,
            r: 2,
            d: 3,
            alpha_min: 0.3,
            seed,
            link: LinkFamily::Random,
            warm: TrimConfig {
                samples_per_round: 200_000,
                ..TrimConfig::default()
            },
            boost: Some(BoostConfig {
                eta_coef: 0.02,
                eta_vec: 0.05 / n as f64,
                t_outer: 20,
                t_realign: 400,
                b_realign: 256,
                t_subspace: 20 * n,
                target_eps: 1e-3,
                seed: 0,
            }),
            trials,
            output_path: String::new(),
            eval_samples: default_eval_samples(),
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.r == 0 || self.d == 0 {
            return Err(Error::InvalidArgument("n, r and d must be positive".into()));
        }
        if self.r > self.n {
            return Err(Error::InvalidArgument(format!("r ({}) exceeds n ({})", self.r, self.n)));
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidArgument("eval_samples must be at least 1".into()));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha_min must lie in (0, 1], got {}", self.alpha_min)));
        }
        if self.link == LinkFamily::PhaseRetrieval && self.d != 2 {
            return Err(Error::InvalidArgument("phase retrieval needs d = 2".into()));
        }
        self.warm.validate(self.n)?;
        if let Some(boost) = &self.boost {
            boost.validate()?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmstart,
    BoostRound,
}

/// One row of the trace. Error columns hold −1 when not evaluable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub trial: usize,
    pub phase: Phase,
    pub round: usize,
    pub procrustes: f64,
    pub chordal: f64,
    pub coef_error: f64,
    pub pred_error: f64,
    pub samples_used: u64,
    pub wall_ms: u64,
}

#[derive(Debug)]
pub struct TrialFailure {
    pub trial: usize,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct ExperimentOutcome {
    /// Sorted by `(trial, phase, round)`.
    pub records: Vec<TraceRecord>,
    /// Trials that aborted; their records up to the failure are kept.
    pub failures: Vec<TrialFailure>,
}

/// Independent `(instance, oracle, evaluation)` seeds for one trial.
pub fn trial_seeds(seed: u64, trial: usize) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    [rng.next_u64(), rng.next_u64(), rng.next_u64()]
}

/// Thread cap from `LOWRANK_THREADS`; 0 means let rayon decide.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Runs every trial, in parallel when threads allow. A failing trial is
/// recorded and does not stop the others.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build thread pool: {e}")))?;
    let results: Vec<(Vec<TraceRecord>, Option<Error>)> =
        pool.install(|| (0..config.trials).into_par_iter().map(|t| run_trial(config, t)).collect());
    let mut outcome = ExperimentOutcome::default();
    for (trial, (records, error)) in results.into_iter().enumerate() {
        outcome.records.extend(records);
        if let Some(error) = error {
            log::warn!("trial {trial} aborted: {error}");
            outcome.failures.push(TrialFailure { trial, error });
        }
    }
    outcome.records.sort_by_key(|r| (r.trial, r.phase, r.round));
    Ok(outcome)
}

/// One trial's trace. On error, returns the records gathered so far.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> (Vec<TraceRecord>, Option<Error>) {
    let mut records = Vec::new();
    let error = trial_body(config, trial, &mut records).err();
    (records, error)
}

fn trial_body(config: &ExperimentConfig, trial: usize, records: &mut Vec<TraceRecord>) -> Result<()> {
    let start = Instant::now();
    let wall_ms = || {
        if config.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let [instance_seed, oracle_seed, eval_seed] = trial_seeds(config.seed, trial);
    let inst = match config.link {
        LinkFamily::Random => random_instance(config.n, config.r, config.d, instance_seed, config.alpha_min)?,
        LinkFamily::PhaseRetrieval => phase_retrieval_instance(config.n, config.r, instance_seed)?,
    };
    let mut oracle = InstanceOracle::new(&inst, oracle_seed);

    let v0 = trimmed_pca(&mut oracle, config.r, &config.warm)?;
    let angles = principal_angles(&v0, &inst.truth.frame)?;
    records.push(TraceRecord {
        trial,
        phase: Phase::Warmstart,
        round: 0,
        procrustes: angles.procrustes(),
        chordal: angles.chordal(),
        coef_error: -1.0,
        pred_error: -1.0,
        samples_used: oracle.samples_drawn(),
        wall_ms: wall_ms(),
    });

    let boost = config.boost.clone().unwrap_or_else(|| default_boost(config, &inst));
    let eval = sample_batch(&inst, config.eval_samples, eval_seed);
    let mut failure = None;
    geo_sgd_observed(&mut oracle, &v0, config.d, &boost, |progress| {
        if failure.is_some() {
            return;
        }
        let row = principal_angles(&progress.params.frame, &inst.truth.frame).and_then(|angles| {
            Ok(TraceRecord {
                trial,
                phase: Phase::BoostRound,
                round: progress.round,
                procrustes: angles.procrustes(),
                chordal: angles.chordal(),
                coef_error: inst.coef_error(progress.params)?,
                pred_error: inst.prediction_error(progress.params, &eval)?,
                samples_used: progress.samples_drawn,
                wall_ms: wall_ms(),
            })
        });
        match row {
            Ok(row) => records.push(row),
            Err(e) => failure = Some(e),
        }
    })?;
    failure.map_or(Ok(()), Err)
}

fn default_boost(config: &ExperimentConfig, inst: &Instance) -> BoostConfig {
    BoostConfig::defaults(config.n, config.r, config.d, Some(inst.alpha), 1e-4)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(TRACE_HEADER)?;
    }
    for record in records {
        w.serialize(record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(records, std::io::BufWriter::new(file))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
