//! Warm start by trimmed PCA.
//!
//! Round `ℓ` estimates
//!
//! ```text
//! M = Π⊥ · E[ 1{|y| > τ  and  |⟨v_i, x⟩| ≤ 1 ∀ i ≤ ℓ} · (xxᵀ − Id) ] · Π⊥
//! ```
//!
//! from fresh samples, where `Π⊥` projects off the directions found so far,
//! and appends the top eigenvector. Conditioning on a large response biases
//! the covariates toward the hidden subspace; the window on the found
//! directions keeps them from dominating later rounds.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SampleBatch, SampleOracle};
use crate::subspace::Frame;

/// Quantiles tried when the threshold is tuned by grid search.
pub const QUANTILE_GRID: [f64; 5] = [0.75, 0.80, 0.85, 0.90, 0.95];

const CHUNK_ROWS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrimConfig {
    /// Fixed threshold on `|y|`; calibrated from the first round's batch when absent.
    pub tau: Option<f64>,
    pub samples_per_round: usize,
    /// Quantile of `|y|` used as `τ` when calibrating.
    pub quantile: f64,
    /// Pick the quantile from [`QUANTILE_GRID`] maximizing the round-0 top eigenvalue.
    pub quantile_grid: bool,
    pub eig_tol: f64,
    pub eig_max_iter: usize,
    /// A round whose top eigenvalue falls below this is a calibration failure.
    pub eig_floor: f64,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig {
            tau: None,
            samples_per_round: 100_000,
            quantile: 0.9,
            quantile_grid: false,
            eig_tol: 1e-12,
            eig_max_iter: 10_000,
            eig_floor: 1e-6,
        }
    }
}

impl TrimConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
            }
        } else if !(self.quantile > 0.5 && self.quantile < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "quantile must lie in (0.5, 1), got {}",
                self.quantile
            )));
        }
        if self.samples_per_round < n {
            return Err(Error::InvalidArgument(format!(
                "samples_per_round ({}) must be at least n ({n})",
                self.samples_per_round
            )));
        }
        if self.eig_max_iter == 0 || !(self.eig_tol > 0.0) {
            return Err(Error::InvalidArgument("eigensolver tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Empirical `quantile` of `|y|` over the batch.
pub fn calibrate_threshold(batch: &SampleBatch, quantile: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(quantile > 0.5 && quantile < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile must lie in (0.5, 1), got {quantile}")));
    }
    let mut abs: Vec<f64> = batch.ys().iter().map(|y| y.abs()).collect();
    let k = ((quantile * abs.len() as f64).ceil() as usize).clamp(1, abs.len()) - 1;
    let (_, kth, _) = abs.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*kth)
}

fn check_partial(partial: &[Vec<f64>], n: usize) -> Result<()> {
    if partial.len() >= n {
        return Err(Error::InvalidArgument(format!(
            "{} partial directions leave no complement in dimension {n}",
            partial.len()
        )));
    }
    for (i, v) in partial.iter().enumerate() {
        if v.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        for (j, w) in partial.iter().enumerate().take(i + 1) {
            let ip: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            if (ip - target).abs() > 1e-8 {
                return Err(Error::NotOrthonormal {
                    defect: (ip - target).abs(),
                });
            }
        }
    }
    Ok(())
}

/// Upper-triangular sum of `xxᵀ` over selected rows, plus the count.
fn accumulate_chunk(batch: &SampleBatch, rows: std::ops::Range<usize>, partial: &[Vec<f64>], tau: f64) -> (Vec<f64>, usize) {
    let n = batch.n();
    let mut acc = vec![0.0; n * n];
    let mut count = 0usize;
    for i in rows {
        if batch.ys()[i].abs() <= tau {
            continue;
        }
        let x = batch.x(i);
        let inside = partial
            .iter()
            .all(|v| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>().abs() <= 1.0);
        if !inside {
            continue;
        }
        count += 1;
        for a in 0..n {
            let xa = x[a];
            let row = &mut acc[a * n..(a + 1) * n];
            for b in a..n {
                row[b] += xa * x[b];
            }
        }
    }
    (acc, count)
}

/// Pairwise reduction in a fixed tree shape, independent of scheduling.
fn pairwise_sum(mut parts: Vec<(Vec<f64>, usize)>) -> (Vec<f64>, usize) {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some((mut a, ca)) = it.next() {
            if let Some((b, cb)) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                next.push((a, ca + cb));
            } else {
                next.push((a, ca));
            }
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Sample estimate of the trimmed, projected second-moment matrix.
pub fn empirical_trimmed_matrix(batch: &SampleBatch, partial: &[Vec<f64>], tau: f64) -> Result<DMatrix<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.n();
    check_partial(partial, n)?;
    let chunks: Vec<std::ops::Range<usize>> = (0..batch.len())
        .step_by(CHUNK_ROWS)
        .map(|s| s..(s + CHUNK_ROWS).min(batch.len()))
        .collect();
    let parts: Vec<(Vec<f64>, usize)> = chunks
        .into_par_iter()
        .map(|rows| accumulate_chunk(batch, rows, partial, tau))
        .collect();
    let (upper, count) = pairwise_sum(parts);
    let total = batch.len() as f64;
    let mut m = DMatrix::<f64>::from_fn(n, n, |a, b| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        upper[lo * n + hi] / total
    });
    let frac = count as f64 / total;
    for a in 0..n {
        m[(a, a)] -= frac;
    }
    if partial.is_empty() {
        return Ok(m);
    }
    let v = DMatrix::from_fn(n, partial.len(), |i, j| partial[j][i]);
    let proj = DMatrix::<f64>::identity(n, n) - &v * v.transpose();
    let sandwiched = &proj * m * &proj;
    Ok((&sandwiched + sandwiched.transpose()) * 0.5)
}

/// Largest (signed) eigenvalue and its unit eigenvector. The sign is fixed
/// so the largest-magnitude entry is positive (ties: lowest index).
pub fn top_eigenpair(a: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<(f64, Vec<f64>)> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::InvalidArgument("top_eigenpair needs a non-empty square matrix".into()));
    }
    let asymmetry = (a - a.transpose()).norm();
    if asymmetry > 1e-9 * a.norm().max(1.0) {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let eig = SymmetricEigen::try_new(a.clone(), tol, max_iter).ok_or(Error::EigenNonConvergence { max_iter })?;
    let lambda = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slack = 1e-12 * lambda.abs().max(1.0);
    let mut best: Option<(usize, Vec<f64>)> = None;
    for k in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[k] < lambda - slack {
            continue;
        }
        let v = canonical_sign(eig.eigenvectors.column(k).iter().copied().collect());
        let lead = leading_index(&v);
        if best.as_ref().is_none_or(|(l, _)| lead < *l) {
            best = Some((lead, v));
        }
    }
    let (_, v) = best.expect("at least one eigenvalue");
    Ok((lambda, v))
}

fn leading_index(v: &[f64]) -> usize {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[idx].abs() {
            idx = i;
        }
    }
    idx
}

fn canonical_sign(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sign = if v[leading_index(&v)] < 0.0 { -1.0 } else { 1.0 };
    for x in v.iter_mut() {
        *x *= sign / norm;
    }
    v
}

/// Diagnostics from a warm-start run.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub frame: Frame,
    pub tau: f64,
    /// Top eigenvalue of each round's matrix.
    pub eigenvalues: Vec<f64>,
}

/// Recovers `r` directions of the hidden subspace, one per round, each from
/// `samples_per_round` fresh samples.
pub fn trimmed_pca<O: SampleOracle + ?Sized>(oracle: &mut O, r: usize, config: &TrimConfig) -> Result<Frame> {
    Ok(trimmed_pca_detailed(oracle, r, config)?.frame)
}

pub fn trimmed_pca_detailed<O: SampleOracle + ?Sized>(oracle: &mut O, r: usize, config: &TrimConfig) -> Result<WarmStart> {
    let n = oracle.dim();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("trimmed_pca needs 1 <= r <= n (n={n}, r={r})")));
    }
    config.validate(n)?;
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(r);
    let mut eigenvalues = Vec::with_capacity(r);
    let mut tau = config.tau;
    for round in 0..r {
        let batch = oracle.draw(config.samples_per_round)?;
        let (t, matrix) = match tau {
            Some(t) => (t, empirical_trimmed_matrix(&batch, &found, t)?),
            None if config.quantile_grid => {
                let mut best: Option<(f64, f64, DMatrix<f64>)> = None;
                for q in QUANTILE_GRID {
                    let t = calibrate_threshold(&batch, q)?;
                    let m = empirical_trimmed_matrix(&batch, &found, t)?;
                    let (lambda, _) = top_eigenpair(&m, config.eig_tol, config.eig_max_iter)?;
                    if best.as_ref().is_none_or(|b| lambda > b.0) {
                        best = Some((lambda, t, m));
                    }
                }
                let (_, t, m) = best.expect("grid is non-empty");
                (t, m)
            }
            None => {
                let t = calibrate_threshold(&batch, config.quantile)?;
                (t, empirical_trimmed_matrix(&batch, &found, t)?)
            }
        };
        tau = Some(t);
        let (lambda, v) = top_eigenpair(&matrix, config.eig_tol, config.eig_max_iter)?;
        if lambda < config.eig_floor {
            log::warn!("trimmed PCA round {round}: top eigenvalue {lambda:.3e} below floor {:.1e}", config.eig_floor);
            return Err(Error::CalibrationFailure {
                round,
                eigenvalue: lambda,
                floor: config.eig_floor,
            });
        }
        eigenvalues.push(lambda);
        found.push(v);
    }
    let m = DMatrix::from_fn(n, r, |i, j| found[j][i]);
    Ok(WarmStart {
        frame: Frame::orthonormalized(&m)?,
        tau: tau.expect("at least one round"),
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_instance, sample_batch, InstanceOracle};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn threshold_examples() {
        let ys: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let batch = SampleBatch::new(1, vec![0.0; 100], ys).unwrap();
        assert_eq!(calibrate_threshold(&batch, 0.9).unwrap(), 1.0);
        assert!(calibrate_threshold(&batch, 0.4).is_err());
        assert!(matches!(calibrate_threshold(&batch.slice(0, 0), 0.9), Err(Error::EmptyBatch)));
    }

    #[test]
    fn threshold_of_gaussian_responses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ys: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
        let batch = SampleBatch::new(0, Vec::new(), ys).unwrap();
        let t90 = calibrate_threshold(&batch, 0.9).unwrap();
        assert!((t90 - 1.6449).abs() < 0.01, "{t90}");
        assert!(calibrate_threshold(&batch, 0.99).unwrap() > t90);
    }

    #[test]
    fn high_threshold_gives_zero_matrix() {
        let inst = random_instance(6, 1, 2, 2, 0.5).unwrap();
        let batch = sample_batch(&inst, 500, 1);
        let big = batch.ys().iter().fold(0.0f64, |m, y| m.max(y.abs())) + 1.0;
        let m = empirical_trimmed_matrix(&batch, &[], big).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn untrimmed_matrix_vanishes() {
        let inst = random_instance(5, 1, 2, 2, 0.5).unwrap();
        let small = empirical_trimmed_matrix(&sample_batch(&inst, 1_000, 1), &[], 0.0).unwrap().norm();
        let large = empirical_trimmed_matrix(&sample_batch(&inst, 100_000, 1), &[], 0.0).unwrap().norm();
        assert!(large < small / 3.0, "{small} -> {large}");
        assert!(large < 0.05);
    }

    #[test]
    fn kernel_and_symmetry() {
        let inst = random_instance(8, 2, 2, 3, 0.3).unwrap();
        let batch = sample_batch(&inst, 20_000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = crate::subspace::random_frame(8, 2, &mut rng).unwrap();
        let partial = vec![v.column(0), v.column(1)];
        let m = empirical_trimmed_matrix(&batch, &partial, 0.5).unwrap();
        for p in &partial {
            let mv = &m * nalgebra::DVector::from_column_slice(p);
            assert!(mv.norm() <= 1e-9 * m.norm());
        }
        assert!((&m - m.transpose()).norm() <= 1e-12 * m.norm());
        let bad = vec![vec![1.0; 8]];
        assert!(empirical_trimmed_matrix(&batch, &bad, 0.5).is_err());
    }

    #[test]
    fn eigenpair_examples() {
        let (l, v) = top_eigenpair(&DMatrix::identity(3, 3), 1e-12, 100).unwrap();
        assert_relative_eq!(l, 1.0);
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 1.0, 0.0]));
        let (l, v) = top_eigenpair(&d, 1e-12, 100).unwrap();
        assert_relative_eq!(l, 3.0);
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
        // largest signed, not largest magnitude
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-5.0, 1.0]));
        let (l, v) = top_eigenpair(&d, 1e-12, 100).unwrap();
        assert_relative_eq!(l, 1.0);
        assert_eq!(v, vec![0.0, 1.0]);
        let mut ns = DMatrix::<f64>::identity(2, 2);
        ns[(0, 1)] = 1.0;
        assert!(matches!(top_eigenpair(&ns, 1e-12, 100), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn pipeline_warm_start_rank_one() {
        let inst = random_instance(20, 1, 2, 11, 1.0).unwrap();
        let mut oracle = InstanceOracle::new(&inst, 5);
        let cfg = TrimConfig {
            samples_per_round: 50_000,
            ..TrimConfig::default()
        };
        let ws = trimmed_pca_detailed(&mut oracle, 1, &cfg).unwrap();
        let mass = crate::subspace::projection_mass(&inst.truth.frame, &ws.frame.column(0)).unwrap();
        assert!(mass > 0.95, "{mass}");
        assert_eq!(oracle.samples_drawn(), 50_000);
    }

    #[test]
    fn fixed_tau_above_all_responses_fails_calibration() {
        let inst = random_instance(10, 1, 2, 11, 1.0).unwrap();
        let mut oracle = InstanceOracle::new(&inst, 5);
        let cfg = TrimConfig {
            tau: Some(1e9),
            samples_per_round: 1_000,
            ..TrimConfig::default()
        };
        let err = trimmed_pca(&mut oracle, 1, &cfg).unwrap_err();
        assert!(matches!(err, Error::CalibrationFailure { round: 0, .. }));
        assert!(err.is_numerical_guard());
    }
}
