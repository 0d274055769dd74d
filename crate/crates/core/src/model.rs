//! Ground-truth instances, the sampling oracle, and evaluation of a
//! hypothesis `F_x(Θ) = Σ_I c_I φ_I(Vᵀx)` with its gradients.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::{dot, hermite_variance, CoefficientVector, HermiteBasis};
use crate::subspace::{align, random_frame, Frame};

/// Default cap on rejection-sampling attempts in [`random_instance`].
pub const DEFAULT_MAX_REJECTIONS: usize = 1000;

/// A hypothesis `Θ = (c, V)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub coef: CoefficientVector,
    pub frame: Frame,
}

impl Parameters {
    pub fn new(coef: CoefficientVector, frame: Frame) -> Result<Self> {
        if coef.r() != frame.r() {
            return Err(Error::DimensionMismatch {
                expected: frame.r(),
                got: coef.r(),
            });
        }
        Ok(Parameters { coef, frame })
    }

    pub fn n(&self) -> usize {
        self.frame.n()
    }

    pub fn r(&self) -> usize {
        self.frame.r()
    }

    pub fn basis(&self) -> Arc<HermiteBasis> {
        HermiteBasis::shared(self.coef.r(), self.coef.d())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `F_x(Θ) = p(Vᵀx)`.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let z = self.frame.project(x)?;
        self.coef.eval(&z)
    }

    /// `∂F_x/∂V = x·∇p(Vᵀx)ᵀ`, an `n × r` matrix.
    pub fn grad_frame(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_x(x)?;
        let z = self.frame.project(x)?;
        let g = self.coef.gradient(&z)?;
        Ok(DMatrix::from_fn(self.n(), self.r(), |i, j| x[i] * g[j]))
    }

    /// `∂F_x/∂c = (φ_I(Vᵀx))_I`.
    pub fn grad_coef(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let z = self.frame.project(x)?;
        self.basis().features(&z)
    }
}

/// `predict(Θ, x)`.
pub fn predict(theta: &Parameters, x: &[f64]) -> Result<f64> {
    theta.predict(x)
}

/// `E_{g~N(0,Id_r)}[∇p(g)∇p(g)ᵀ]`, exact: entry `(i, j)` is the inner product
/// of the Hermite coefficients of `∂_i p` and `∂_j p`.
pub fn gradient_second_moment(c: &CoefficientVector) -> DMatrix<f64> {
    let basis = HermiteBasis::shared(c.r(), c.d());
    let partials: Vec<Vec<f64>> = (0..c.r()).map(|j| basis.derivative_coefficients(c, j)).collect();
    DMatrix::from_fn(c.r(), c.r(), |i, j| dot(&partials[i], &partials[j]))
}

fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// `α = λ_min(M) / λ_max(M)` of the gradient second-moment matrix.
pub fn certify_nondegeneracy(c: &CoefficientVector) -> Result<f64> {
    if hermite_variance(c) == 0.0 {
        return Err(Error::ConstantPolynomial);
    }
    let (min, max) = extreme_eigenvalues(&gradient_second_moment(c));
    Ok((min / max).clamp(0.0, 1.0))
}

/// Coefficients of `w ↦ p(Q·w)`. If `(c, V)` realizes a polynomial then so
/// does `(rotate_coefficients(c, Q), V·Q)`.
pub fn rotate_coefficients(c: &CoefficientVector, q: &DMatrix<f64>) -> Result<CoefficientVector> {
    if q.nrows() != c.r() || q.ncols() != c.r() {
        return Err(Error::DimensionMismatch {
            expected: c.r(),
            got: q.nrows(),
        });
    }
    let basis = HermiteBasis::shared(c.r(), c.d());
    let mut qw = vec![0.0; c.r()];
    Ok(basis.project(|w| {
        for (i, slot) in qw.iter_mut().enumerate() {
            *slot = (0..w.len()).map(|j| q[(i, j)] * w[j]).sum();
        }
        basis.eval(c, &qw).expect("shape checked above")
    }))
}

/// Ground truth `(c*, V*)` with cached metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(flatten)]
    pub truth: Parameters,
    pub alpha: f64,
    pub y_variance: f64,
}

/// Normalizes a raw link polynomial into an instance: drops the constant
/// term and rescales so that `λ_max(E[∇p∇pᵀ]) = 1`.
pub fn make_instance(c_raw: &CoefficientVector, v_star: Frame) -> Result<Instance> {
    if c_raw.r() != v_star.r() {
        return Err(Error::DimensionMismatch {
            expected: v_star.r(),
            got: c_raw.r(),
        });
    }
    let alpha = certify_nondegeneracy(c_raw)?;
    if alpha <= 1e-10 {
        return Err(Error::Degenerate { alpha });
    }
    let mut c = c_raw.clone();
    c.values_mut()[0] = 0.0;
    let (_, lambda_max) = extreme_eigenvalues(&gradient_second_moment(&c));
    let c = c.scaled(1.0 / lambda_max.sqrt());
    let alpha = certify_nondegeneracy(&c)?;
    let y_variance = hermite_variance(&c);
    Ok(Instance {
        truth: Parameters::new(c, v_star)?,
        alpha,
        y_variance,
    })
}

/// Phase retrieval: `p(z) ∝ Σ_j φ_2(z_j)`, i.e. `P(x) ∝ Σ_j (⟨v*_j, x⟩² − 1)`,
/// with a Haar-random frame.
pub fn phase_retrieval_instance(n: usize, r: usize, seed: u64) -> Result<Instance> {
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("need 1 <= r <= n (n={n}, r={r})")));
    }
    let diagonal: Vec<[usize; 2]> = (0..r).map(|j| [j, j]).collect();
    let terms: Vec<(&[usize], f64)> = diagonal.iter().map(|t| (&t[..], 1.0)).collect();
    let c = CoefficientVector::from_terms(r, 2, &terms)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_instance(&c, random_frame(n, r, &mut rng)?)
}

/// Rejection-samples Gaussian coefficients until `α ≥ alpha_min`, then pairs
/// them with a Haar-random frame.
pub fn random_instance(n: usize, r: usize, d: usize, seed: u64, alpha_min: f64) -> Result<Instance> {
    random_instance_with_limit(n, r, d, seed, alpha_min, DEFAULT_MAX_REJECTIONS)
}

pub fn random_instance_with_limit(
    n: usize,
    r: usize,
    d: usize,
    seed: u64,
    alpha_min: f64,
    max_attempts: usize,
) -> Result<Instance> {
    if !(alpha_min > 0.0 && alpha_min <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_min must lie in (0, 1], got {alpha_min}")));
    }
    if r == 0 || d == 0 || r > n {
        return Err(Error::InvalidArgument(format!("need 1 <= r <= n and d >= 1 (n={n}, r={r}, d={d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = crate::hermite::basis_size(r, d);
    for _ in 0..max_attempts {
        let mut values: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        values[0] = 0.0;
        let c = CoefficientVector::from_values(r, d, values)?;
        match certify_nondegeneracy(&c) {
            Ok(alpha) if alpha >= alpha_min => {
                let frame = random_frame(n, r, &mut rng)?;
                return make_instance(&c, frame);
            }
            _ => continue,
        }
    }
    Err(Error::RejectionLimit {
        alpha_min,
        attempts: max_attempts,
    })
}

impl Instance {
    pub fn n(&self) -> usize {
        self.truth.n()
    }

    pub fn r(&self) -> usize {
        self.truth.r()
    }

    pub fn d(&self) -> usize {
        self.truth.coef.d()
    }

    /// Re-checks normalization, the second-moment bounds and the variance
    /// sandwich `α/d ≤ Var[P] ≤ r`.
    pub fn check_invariants(&self) -> Result<()> {
        let c = &self.truth.coef;
        if c.constant_term() != 0.0 {
            return Err(Error::InvalidArgument("constant coefficient must be zero".into()));
        }
        let (min, max) = extreme_eigenvalues(&gradient_second_moment(c));
        if max > 1.0 + 1e-8 {
            return Err(Error::InvalidArgument(format!("λ_max(M) = {max} exceeds 1")));
        }
        if min < self.alpha * max - 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "λ_min(M) = {min} below α·λ_max = {}",
                self.alpha * max
            )));
        }
        let d = c.d() as f64;
        let r = c.r() as f64;
        if self.y_variance < self.alpha / d - 1e-12 || self.y_variance > r + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "Var[y] = {} outside [{}, {r}]",
                self.y_variance,
                self.alpha / d
            )));
        }
        Ok(())
    }

    /// The realization `(c*_O, V*·O)` closest to `frame` in Frobenius norm,
    /// `O = align(frame, V*)`.
    pub fn realization_near(&self, frame: &Frame) -> Result<Parameters> {
        let o = align(frame, &self.truth.frame)?;
        let v = self.truth.frame.rotated(&o)?;
        let c = rotate_coefficients(&self.truth.coef, &o)?;
        Parameters::new(c, v)
    }

    /// `‖c − c*_O‖₂` against the realization nearest to `theta.frame`.
    pub fn coef_error(&self, theta: &Parameters) -> Result<f64> {
        self.realization_near(&theta.frame)?.coef.distance(&theta.coef)
    }

    pub fn prediction_error(&self, theta: &Parameters, batch: &SampleBatch) -> Result<f64> {
        prediction_error(theta, batch, self.y_variance)
    }
}

/// Covariates (row-major, `N × n`) and noiseless responses.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    n: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl SampleBatch {
    pub fn new(n: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != n * ys.len() {
            return Err(Error::DimensionMismatch {
                expected: n * ys.len(),
                got: xs.len(),
            });
        }
        Ok(SampleBatch { n, xs, ys })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.n..(i + 1) * self.n]
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.xs.chunks_exact(self.n.max(1)).zip(self.ys.iter().copied())
    }

    /// Rows `start..end` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> SampleBatch {
        SampleBatch {
            n: self.n,
            xs: self.xs[start * self.n..end * self.n].to_vec(),
            ys: self.ys[start..end].to_vec(),
        }
    }

    /// Largest `|y_i − P(x_i)|` under the instance's ground truth.
    pub fn max_label_error(&self, inst: &Instance) -> Result<f64> {
        let mut worst = 0.0f64;
        for (x, y) in self.iter() {
            worst = worst.max((inst.truth.predict(x)? - y).abs());
        }
        Ok(worst)
    }

    /// Flat binary layout: `N`, `n` as little-endian `u64`, then `xs`
    /// row-major and `ys`, all little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for v in self.xs.iter().chain(&self.ys) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let total = count
            .checked_mul(n + 1)
            .ok_or_else(|| Error::InvalidArgument("batch header overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 8 {
            return Err(Error::InvalidArgument(format!(
                "batch body has {} bytes, header implies {}",
                bytes.len(),
                total * 8
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let (xs, ys) = values.split_at(count * n);
        SampleBatch::new(n, xs.to_vec(), ys.to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        SampleBatch::read_binary(std::io::BufReader::new(file))
    }
}

fn draw_rows<R: Rng + ?Sized>(truth: &Parameters, basis: &HermiteBasis, count: usize, rng: &mut R) -> SampleBatch {
    let n = truth.n();
    let r = truth.r();
    let mut xs = vec![0.0; count * n];
    let mut ys = Vec::with_capacity(count);
    let mut z = vec![0.0; r];
    let mut phi = vec![0.0; basis.len()];
    for row in xs.chunks_exact_mut(n) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        truth.frame.project_into(row, &mut z);
        basis.features_into(&z, &mut phi);
        ys.push(dot(truth.coef.values(), &phi));
    }
    SampleBatch { n, xs, ys }
}

/// `N` iid samples `(x, P(x))`, `x ~ N(0, Id_n)`; deterministic per seed.
pub fn sample_batch(inst: &Instance, count: usize, seed: u64) -> SampleBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_rows(&inst.truth, &inst.truth.basis(), count, &mut rng)
}

/// `(1/N)Σ(F_{x_i}(Θ) − y_i)² / Var[y]`.
pub fn prediction_error(theta: &Parameters, batch: &SampleBatch, y_variance: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.n() != theta.n() {
        return Err(Error::DimensionMismatch {
            expected: theta.n(),
            got: batch.n(),
        });
    }
    let basis = theta.basis();
    let mut z = vec![0.0; theta.r()];
    let mut phi = vec![0.0; basis.len()];
    let mut sse = 0.0;
    for (x, y) in batch.iter() {
        theta.frame.project_into(x, &mut z);
        basis.features_into(&z, &mut phi);
        let e = dot(theta.coef.values(), &phi) - y;
        sse += e * e;
    }
    Ok(sse / batch.len() as f64 / y_variance)
}

/// Sample access to the data distribution. Learners see only `(x, y)`.
pub trait SampleOracle {
    fn dim(&self) -> usize;
    fn draw(&mut self, count: usize) -> Result<SampleBatch>;
    /// Total samples handed out so far.
    fn samples_drawn(&self) -> u64;
}

/// Fresh Gaussian samples labeled by a ground-truth instance.
#[derive(Clone, Debug)]
pub struct InstanceOracle {
    truth: Parameters,
    basis: Arc<HermiteBasis>,
    rng: ChaCha8Rng,
    drawn: u64,
}

impl InstanceOracle {
    pub fn new(inst: &Instance, seed: u64) -> Self {
        InstanceOracle::from_rng(inst, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(inst: &Instance, rng: ChaCha8Rng) -> Self {
        InstanceOracle {
            truth: inst.truth.clone(),
            basis: inst.truth.basis(),
            rng,
            drawn: 0,
        }
    }
}

impl SampleOracle for InstanceOracle {
    fn dim(&self) -> usize {
        self.truth.n()
    }

    fn draw(&mut self, count: usize) -> Result<SampleBatch> {
        self.drawn += count as u64;
        Ok(draw_rows(&self.truth, &self.basis, count, &mut self.rng))
    }

    fn samples_drawn(&self) -> u64 {
        self.drawn
    }
}

/// Replays a stored batch in order; errors once exhausted.
#[derive(Clone, Debug)]
pub struct ReplayOracle {
    batch: SampleBatch,
    cursor: usize,
}

impl ReplayOracle {
    pub fn new(batch: SampleBatch) -> Self {
        ReplayOracle { batch, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.batch.len() - self.cursor
    }
}

impl SampleOracle for ReplayOracle {
    fn dim(&self) -> usize {
        self.batch.n()
    }

    fn draw(&mut self, count: usize) -> Result<SampleBatch> {
        if count > self.remaining() {
            return Err(Error::OracleExhausted {
                requested: count,
                available: self.remaining(),
            });
        }
        let out = self.batch.slice(self.cursor, self.cursor + count);
        self.cursor += count;
        Ok(out)
    }

    fn samples_drawn(&self) -> u64 {
        self.cursor as u64
    }
}

impl<O: SampleOracle + ?Sized> SampleOracle for &mut O {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn draw(&mut self, count: usize) -> Result<SampleBatch> {
        (**self).draw(count)
    }

    fn samples_drawn(&self) -> u64 {
        (**self).samples_drawn()
    }
}
