//! Boosting a warm start with geodesic SGD on the Grassmannian.
//!
//! Two phases alternate. Realignment fixes the frame `V` and runs mini-batch
//! gradient descent on the coefficients from `c = 0`:
//!
//! ```text
//! c ← c − (2η_coef / B) · Σ_i (F_{x_i}(Θ) − y_i) · φ(Vᵀx_i)
//! ```
//!
//! Subspace descent fixes `c` and, for every single fresh sample, follows the
//! Grassmannian geodesic whose initial velocity is the rank-one matrix
//! `h ∇ᵀ = σ ĥ ∇̂ᵀ` with `h = 2(F_x(Θ) − y)(Id − VVᵀ)x` and `∇ = ∇p(Vᵀx)`:
//!
//! ```text
//! V ← V + (cos(ση) − 1)·V∇̂∇̂ᵀ − sin(ση)·ĥ∇̂ᵀ
//! ```
//!
//! Because `ĥ ⊥ span(V)` the update keeps the columns orthonormal without
//! any retraction. Steps must be single-sample: only then is the velocity
//! rank one and the geodesic available in closed form.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermite::{dot, CoefficientVector, HermiteBasis};
use crate::model::{Parameters, SampleOracle};
use crate::subspace::{orthonormality_defect, Frame, REPAIR_TOL};

/// Norms below this make a step direction undefined.
const NORM_FLOOR: f64 = 1e-14;
/// Samples fetched from the oracle at a time inside subspace descent.
const STREAM_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub eta_coef: f64,
    pub eta_vec: f64,
    /// Outer rounds of realign + subspace descent.
    pub t_outer: usize,
    pub t_realign: usize,
    pub b_realign: usize,
    pub t_subspace: usize,
    pub target_eps: f64,
    /// Seed for the sample stream when the learner is run standalone.
    #[serde(default)]
    pub seed: u64,
}

impl BoostConfig {
    /// Defaults following the scalings of the convergence analysis:
    /// `T_subspace = 4n`, `η_vec = ν̂ / (16·n·T_subspace)`,
    /// `η_coef = 0.05 / (d r²)`, `T_realign = 200·ln(1/ε)`, `B = 64`.
    /// `ν̂` is the certified non-degeneracy when known, else 0.5.
    pub fn defaults(n: usize, r: usize, d: usize, alpha_hat: Option<f64>, target_eps: f64) -> Self {
        let nu = alpha_hat.unwrap_or(0.5);
        let log_inv_eps = (1.0 / target_eps).ln().max(1.0);
        let t_subspace = 4 * n;
        BoostConfig {
            eta_coef: 0.05 / (d * r * r) as f64,
            eta_vec: nu / (t_subspace as f64 * n as f64 * 16.0),
            t_outer: (n as f64 * log_inv_eps).ceil() as usize,
            t_realign: (200.0 * log_inv_eps).ceil() as usize,
            b_realign: 64,
            t_subspace,
            target_eps,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rate_ok = |eta: f64| eta.is_finite() && eta >= 0.0;
        if !(rate_ok(self.eta_coef) && rate_ok(self.eta_vec)) {
            return Err(Error::InvalidArgument("learning rates must be finite and non-negative".into()));
        }
        if !(self.target_eps > 0.0) {
            return Err(Error::InvalidArgument("target_eps must be positive".into()));
        }
        if self.b_realign == 0 {
            return Err(Error::InvalidArgument("b_realign must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rank-one geodesic direction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicStep {
    pub h: Vec<f64>,
    pub nabla: Vec<f64>,
    pub sigma: f64,
    /// `h/‖h‖` and `∇/‖∇‖`; present only when `sigma > 0`.
    pub h_hat: Option<Vec<f64>>,
    pub nabla_hat: Option<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `out = x − V(Vᵀx)`, projected twice so `Vᵀout` sits at rounding level.
fn project_out(frame: &Frame, x: &[f64], z: &mut [f64], out: &mut [f64]) {
    let n = frame.n();
    let cols = frame.matrix().as_slice();
    out.copy_from_slice(x);
    for _ in 0..2 {
        frame.project_into(out, z);
        for (j, zj) in z.iter().enumerate() {
            let col = &cols[j * n..(j + 1) * n];
            for (o, v) in out.iter_mut().zip(col) {
                *o -= zj * v;
            }
        }
    }
}

pub fn compute_geodesic_step(theta: &Parameters, x: &[f64], y: f64) -> Result<GeodesicStep> {
    let prediction = theta.predict(x)?;
    let residual = prediction - y;
    let z = theta.frame.project(x)?;
    let nabla = theta.coef.gradient(&z)?;
    let mut h = vec![0.0; theta.n()];
    let mut scratch = vec![0.0; theta.r()];
    project_out(&theta.frame, x, &mut scratch, &mut h);
    for v in h.iter_mut() {
        *v *= 2.0 * residual;
    }
    Ok(step_from_parts(h, nabla))
}

fn step_from_parts(h: Vec<f64>, nabla: Vec<f64>) -> GeodesicStep {
    let hn = norm(&h);
    let gn = norm(&nabla);
    if hn <= NORM_FLOOR || gn <= NORM_FLOOR {
        return GeodesicStep {
            h,
            nabla,
            sigma: 0.0,
            h_hat: None,
            nabla_hat: None,
        };
    }
    GeodesicStep {
        h_hat: Some(h.iter().map(|v| v / hn).collect()),
        nabla_hat: Some(nabla.iter().map(|v| v / gn).collect()),
        sigma: hn * gn,
        h,
        nabla,
    }
}

/// In-place geodesic update of an `n × r` column-major frame.
fn geodesic_update(cols: &mut [f64], n: usize, h_hat: &[f64], nabla_hat: &[f64], angle: f64) {
    let r = nabla_hat.len();
    // u = V∇̂
    let mut u = vec![0.0; n];
    for j in 0..r {
        let w = nabla_hat[j];
        for (ui, v) in u.iter_mut().zip(&cols[j * n..(j + 1) * n]) {
            *ui += w * v;
        }
    }
    let (s, c) = angle.sin_cos();
    let cm1 = c - 1.0;
    for j in 0..r {
        let w = nabla_hat[j];
        for ((v, ui), hi) in cols[j * n..(j + 1) * n].iter_mut().zip(&u).zip(h_hat) {
            *v += w * (cm1 * ui - s * hi);
        }
    }
}

/// Follows the geodesic from `v` along `step` for time `eta_vec`.
pub fn apply_geodesic(v: &Frame, step: &GeodesicStep, eta_vec: f64) -> Frame {
    match (&step.h_hat, &step.nabla_hat) {
        (Some(h_hat), Some(nabla_hat)) if step.sigma > 0.0 && eta_vec != 0.0 => {
            let mut m = v.matrix().clone();
            let n = v.n();
            geodesic_update(m.as_mut_slice(), n, h_hat, nabla_hat, step.sigma * eta_vec);
            Frame::from_matrix_unchecked(m)
        }
        _ => v.clone(),
    }
}

/// Mini-batch gradient descent on the coefficients of a degree-`≤ d` link
/// polynomial for a fixed frame, starting from `c = 0`.
pub fn realign_polynomial<O: SampleOracle + ?Sized>(
    oracle: &mut O,
    frame: &Frame,
    d: usize,
    config: &BoostConfig,
) -> Result<CoefficientVector> {
    config.validate()?;
    if oracle.dim() != frame.n() {
        return Err(Error::DimensionMismatch {
            expected: frame.n(),
            got: oracle.dim(),
        });
    }
    let r = frame.r();
    let basis = HermiteBasis::shared(r, d);
    let m = basis.len();
    let mut c = vec![0.0; m];
    let mut grad = vec![0.0; m];
    let mut z = vec![0.0; r];
    let mut phi = vec![0.0; m];
    let limit = 1e3 * (r as f64).sqrt();
    let scale = 2.0 * config.eta_coef / config.b_realign as f64;
    for _ in 0..config.t_realign {
        let batch = oracle.draw(config.b_realign)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in batch.iter() {
            frame.project_into(x, &mut z);
            basis.features_into(&z, &mut phi);
            let residual = dot(&c, &phi) - y;
            for (g, p) in grad.iter_mut().zip(&phi) {
                *g += residual * p;
            }
        }
        for (ci, g) in c.iter_mut().zip(&grad) {
            *ci -= scale * g;
        }
        let cn = norm(&c);
        if !(cn <= limit) {
            return Err(Error::CoefficientDivergence { norm: cn, limit });
        }
    }
    CoefficientVector::from_values(r, d, c)
}

/// Single-sample geodesic SGD on the frame for fixed coefficients.
pub fn subspace_descent<O: SampleOracle + ?Sized>(
    oracle: &mut O,
    v0: &Frame,
    coef: &CoefficientVector,
    config: &BoostConfig,
) -> Result<Frame> {
    config.validate()?;
    if coef.r() != v0.r() {
        return Err(Error::DimensionMismatch {
            expected: v0.r(),
            got: coef.r(),
        });
    }
    if oracle.dim() != v0.n() {
        return Err(Error::DimensionMismatch {
            expected: v0.n(),
            got: oracle.dim(),
        });
    }
    let n = v0.n();
    let r = v0.r();
    let basis = HermiteBasis::shared(r, coef.d());
    let mut frame = v0.clone();
    let mut z = vec![0.0; r];
    let mut phi = vec![0.0; basis.len()];
    let mut nabla = vec![0.0; r];
    let mut h = vec![0.0; n];
    let mut step = 0usize;
    while step < config.t_subspace {
        let take = STREAM_CHUNK.min(config.t_subspace - step);
        let batch = oracle.draw(take)?;
        for (x, y) in batch.iter() {
            frame.project_into(x, &mut z);
            basis.features_into(&z, &mut phi);
            let residual = dot(coef.values(), &phi) - y;
            basis.gradient_from_features(coef.values(), &phi, &mut nabla);
            project_out(&frame, x, &mut z, &mut h);
            let hn = 2.0 * residual.abs() * norm(&h);
            let gn = norm(&nabla);
            if hn > NORM_FLOOR && gn > NORM_FLOOR {
                let hscale = 2.0 * residual / hn;
                h.iter_mut().for_each(|v| *v *= hscale);
                nabla.iter_mut().for_each(|v| *v /= gn);
                let mut m = frame.into_matrix();
                geodesic_update(m.as_mut_slice(), n, &h, &nabla, hn * gn * config.eta_vec);
                let defect = orthonormality_defect(&m);
                if !(defect <= REPAIR_TOL) {
                    return Err(Error::FrameDrift { step, defect });
                }
                frame = Frame::from_matrix_unchecked(m);
            }
            step += 1;
        }
    }
    Ok(frame)
}

/// Snapshot handed to the observer after each realignment past round 0.
#[derive(Clone, Debug)]
pub struct BoostProgress<'a> {
    pub round: usize,
    pub params: &'a Parameters,
    pub samples_drawn: u64,
}

/// `T_outer` rounds of realign + subspace descent, then a final realign.
pub fn geo_sgd<O: SampleOracle + ?Sized>(oracle: &mut O, v0: &Frame, d: usize, config: &BoostConfig) -> Result<Parameters> {
    geo_sgd_observed(oracle, v0, d, config, |_| {})
}

/// [`geo_sgd`] reporting `(c^(t), V^(t))` for `t = 1..=T_outer`, where
/// `c^(t)` is the realignment computed at `V^(t)` (the last one is the final
/// realignment).
pub fn geo_sgd_observed<O, F>(oracle: &mut O, v0: &Frame, d: usize, config: &BoostConfig, mut observe: F) -> Result<Parameters>
where
    O: SampleOracle + ?Sized,
    F: FnMut(&BoostProgress<'_>),
{
    config.validate()?;
    let mut frame = v0.clone();
    for round in 0..config.t_outer {
        let coef = realign_polynomial(oracle, &frame, d, config)?;
        let params = Parameters::new(coef, frame)?;
        if round > 0 {
            observe(&BoostProgress {
                round,
                params: &params,
                samples_drawn: oracle.samples_drawn(),
            });
        }
        frame = subspace_descent(oracle, &params.frame, &params.coef, config)?;
    }
    let coef = realign_polynomial(oracle, &frame, d, config)?;
    let params = Parameters::new(coef, frame)?;
    if config.t_outer > 0 {
        observe(&BoostProgress {
            round: config.t_outer,
            params: &params,
            samples_drawn: oracle.samples_drawn(),
        });
    }
    Ok(params)
}

/// `‖apply − (V − η·h∇ᵀ)‖_F`: distance of the geodesic step from the raw
/// Euclidean gradient step.
pub fn first_order_gap(v: &Frame, step: &GeodesicStep, eta_vec: f64) -> f64 {
    let moved = apply_geodesic(v, step, eta_vec);
    let raw = v.matrix()
        - DMatrix::from_fn(v.n(), v.r(), |i, j| eta_vec * step.h[i] * step.nabla[j]);
    (moved.matrix() - raw).norm()
}
