//! Orthonormal frames and the subspace distances used to measure progress.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Defect below which a matrix is accepted as-is.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Defect up to which a matrix is silently re-orthonormalized.
pub const REPAIR_TOL: f64 = 1e-6;

/// `‖MᵀM − Id‖_F`.
pub fn orthonormality_defect(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    (gram - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

/// QR orthonormalization with the sign of each column chosen so that
/// `diag(R) ≥ 0`.
pub(crate) fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// An `n × r` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    columns: DMatrix<f64>,
}

impl Frame {
    /// Validates orthonormality. Small defects (≤ 1e-6) are repaired by QR;
    /// anything larger is rejected.
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() == 0 || columns.ncols() > columns.nrows() {
            return Err(Error::InvalidArgument(format!(
                "frame must satisfy 1 <= r <= n (got n={}, r={})",
                columns.nrows(),
                columns.ncols()
            )));
        }
        let defect = orthonormality_defect(&columns);
        if !defect.is_finite() || defect > REPAIR_TOL {
            return Err(Error::NotOrthonormal { defect });
        }
        if defect > ORTHONORMAL_TOL {
            return Ok(Frame {
                columns: orthonormalize(&columns),
            });
        }
        Ok(Frame { columns })
    }

    /// Frame from any full-rank matrix via QR.
    pub fn orthonormalized(m: &DMatrix<f64>) -> Result<Self> {
        if m.ncols() == 0 || m.ncols() > m.nrows() {
            return Err(Error::InvalidArgument("frame must satisfy 1 <= r <= n".into()));
        }
        Frame::new(orthonormalize(m))
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let r = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("ragged frame columns".into()));
        }
        Frame::new(DMatrix::from_fn(n, r, |i, j| columns[j][i]))
    }

    /// The first `r` standard basis vectors of `R^n`.
    pub fn standard(n: usize, r: usize) -> Result<Self> {
        Frame::new(DMatrix::identity(n, r))
    }

    pub(crate) fn from_matrix_unchecked(columns: DMatrix<f64>) -> Self {
        Frame { columns }
    }

    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn r(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.columns
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.columns.column(j).iter().copied().collect()
    }

    pub fn defect(&self) -> f64 {
        orthonormality_defect(&self.columns)
    }

    /// `Vᵀx` into `out`.
    pub fn project_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n();
        debug_assert_eq!(x.len(), n);
        for (j, o) in out.iter_mut().enumerate() {
            let col = &self.columns.as_slice()[j * n..(j + 1) * n];
            *o = col.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `Vᵀx`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.r()];
        self.project_into(x, &mut out);
        Ok(out)
    }

    /// `V·Q` for an `r × r` matrix `Q` (orthogonal for the result to be a frame).
    pub fn rotated(&self, q: &DMatrix<f64>) -> Result<Frame> {
        if q.nrows() != self.r() || q.ncols() != self.r() {
            return Err(Error::DimensionMismatch {
                expected: self.r(),
                got: q.nrows(),
            });
        }
        Frame::new(&self.columns * q)
    }

    fn check_compatible(&self, other: &Frame) -> Result<()> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: other.n(),
            });
        }
        if self.r() != other.r() {
            return Err(Error::DimensionMismatch {
                expected: self.r(),
                got: other.r(),
            });
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRepr {
    n: usize,
    r: usize,
    columns: Vec<Vec<f64>>,
}

impl Serialize for Frame {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FrameRepr {
            n: self.n(),
            r: self.r(),
            columns: (0..self.r()).map(|j| self.column(j)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Frame {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = FrameRepr::deserialize(d)?;
        if repr.columns.len() != repr.r || repr.columns.iter().any(|c| c.len() != repr.n) {
            return Err(D::Error::custom("frame shape does not match n and r"));
        }
        Frame::from_columns(&repr.columns).map_err(D::Error::custom)
    }
}

/// Haar-random frame: QR of an `n × r` standard Gaussian matrix.
pub fn random_frame<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> Result<Frame> {
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!("random_frame needs 1 <= r <= n (n={n}, r={r})")));
    }
    let g = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(Frame::from_matrix_unchecked(orthonormalize(&g)))
}

/// Haar-random `r × r` orthogonal matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(r: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormalize(&g)
}

/// Principal angles in radians, non-decreasing, each in `[0, π/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalAngles {
    angles: Vec<f64>,
}

impl PrincipalAngles {
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn procrustes(&self) -> f64 {
        2.0 * self
            .angles
            .iter()
            .map(|t| (t / 2.0).sin().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn chordal(&self) -> f64 {
        self.angles.iter().map(|t| t.sin().powi(2)).sum::<f64>().sqrt()
    }
}

fn sorted_singular_values(m: DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Principal angles between `span(V)` and `span(W)`.
///
/// Cosines are the singular values of `VᵀW`, sines those of `(Id − VVᵀ)W`.
/// Each angle is recovered from whichever of the two is better conditioned,
/// so angles near zero keep full relative precision.
pub fn principal_angles(v: &Frame, w: &Frame) -> Result<PrincipalAngles> {
    v.check_compatible(w)?;
    let cross = v.matrix().transpose() * w.matrix();
    let residual = w.matrix() - v.matrix() * &cross;
    let cosines = sorted_singular_values(cross);
    let mut sines = sorted_singular_values(residual);
    sines.reverse();
    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| {
            let c = c.clamp(0.0, 1.0);
            let s = s.clamp(0.0, 1.0);
            if c * c < 0.5 {
                c.acos()
            } else {
                s.asin()
            }
        })
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(PrincipalAngles { angles })
}

/// `min_{O ∈ O(r)} ‖V − W·O‖_F = 2(Σ sin²(θ_i/2))^{1/2}`.
pub fn procrustes_distance(v: &Frame, w: &Frame) -> Result<f64> {
    Ok(principal_angles(v, w)?.procrustes())
}

/// `(r − ‖VᵀW‖²_F)^{1/2}`, evaluated as `‖(Id − VVᵀ)W‖_F`.
pub fn chordal_distance(v: &Frame, w: &Frame) -> Result<f64> {
    v.check_compatible(w)?;
    let cross = v.matrix().transpose() * w.matrix();
    let residual = w.matrix() - v.matrix() * &cross;
    Ok(residual.norm())
}

/// Orthogonal `O*` minimizing `‖V − W·O‖_F`: `O* = U·Xᵀ` where
/// `WᵀV = U·Σ·Xᵀ`.
pub fn align(v: &Frame, w: &Frame) -> Result<DMatrix<f64>> {
    v.check_compatible(w)?;
    let m = w.matrix().transpose() * v.matrix();
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    Ok(u * vt)
}

/// `‖Π_V u‖₂ = ‖Vᵀu‖₂` for a unit vector `u`.
pub fn projection_mass(v: &Frame, u: &[f64]) -> Result<f64> {
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("projection_mass needs a unit vector (norm {norm})")));
    }
    let p = v.project(u)?;
    Ok(DVector::from_vec(p).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    fn e(n: usize, k: usize, sign: f64) -> Frame {
        let mut m = DMatrix::zeros(n, 1);
        m[(k, 0)] = sign;
        Frame::new(m).unwrap()
    }

    #[test]
    fn random_frame_deterministic() {
        let a = random_frame(5, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = random_frame(5, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.defect() < 1e-12);
        assert!(random_frame(2, 3, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn square_frame_is_orthogonal() {
        let a = random_frame(6, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let det = a.matrix().determinant();
        assert_relative_eq!(det.abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn haar_projector_mean() {
        // E[VVᵀ] = (r/n)·Id for Haar V.
        let (n, r, draws) = (50, 3, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = DMatrix::<f64>::zeros(n, n);
        let mut sumsq = DMatrix::<f64>::zeros(n, n);
        for _ in 0..draws {
            let v = random_frame(n, r, &mut rng).unwrap();
            let p = v.matrix() * v.matrix().transpose();
            sumsq += p.component_mul(&p);
            sum += p;
        }
        let mean = &sum / draws as f64;
        // 2500 entries: nearly all within 3 SE, none beyond 5 SE.
        let mut within = 0usize;
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { r as f64 / n as f64 } else { 0.0 };
                let var = sumsq[(i, j)] / draws as f64 - mean[(i, j)].powi(2);
                let se = (var / draws as f64).sqrt();
                let dev = (mean[(i, j)] - expect).abs();
                assert!(dev <= 5.0 * se, "entry ({i},{j}) off by {dev:.2e}, se {se:.2e}");
                if dev <= 3.0 * se {
                    within += 1;
                }
            }
        }
        assert!(within as f64 >= 0.99 * (n * n) as f64, "{within} of {} within 3 SE", n * n);
    }

    #[test]
    fn constructor_repairs_small_defects_and_rejects_large() {
        let mut m = DMatrix::<f64>::identity(4, 2);
        m[(2, 0)] = 1e-8;
        let f = Frame::new(m.clone()).unwrap();
        assert!(f.defect() < 1e-12);
        m[(2, 0)] = 1e-2;
        assert!(matches!(Frame::new(m), Err(Error::NotOrthonormal { .. })));
    }

    #[test]
    fn angle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_frame(7, 3, &mut rng).unwrap();
        let pa = principal_angles(&v, &v).unwrap();
        assert!(pa.angles().iter().all(|t| t.abs() < 1e-7));
        let pa = principal_angles(&e(3, 0, 1.0), &e(3, 1, 1.0)).unwrap();
        assert_relative_eq!(pa.angles()[0], FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn small_angles_keep_precision() {
        let theta = 1e-9f64;
        let mut m = DMatrix::zeros(3, 1);
        m[(0, 0)] = theta.cos();
        m[(1, 0)] = theta.sin();
        let w = Frame::new(m).unwrap();
        let d = procrustes_distance(&e(3, 0, 1.0), &w).unwrap();
        assert_relative_eq!(d, 2.0 * (theta / 2.0).sin(), max_relative = 1e-6);
    }

    #[test]
    fn distance_examples() {
        let e1 = e(3, 0, 1.0);
        assert!(procrustes_distance(&e1, &e1).unwrap() < 1e-12);
        assert!(procrustes_distance(&e1, &e(3, 0, -1.0)).unwrap() < 1e-12);
        assert_relative_eq!(procrustes_distance(&e1, &e(3, 1, 1.0)).unwrap(), SQRT_2, epsilon = 1e-12);
        assert!(chordal_distance(&e1, &e1).unwrap() < 1e-12);
        assert_relative_eq!(chordal_distance(&e1, &e(3, 1, 1.0)).unwrap(), 1.0, epsilon = 1e-12);
        assert!(procrustes_distance(&e1, &e(4, 0, 1.0)).is_err());
    }

    #[test]
    fn align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_frame(8, 3, &mut rng).unwrap();
        let o = align(&v, &v).unwrap();
        assert!((o - DMatrix::<f64>::identity(3, 3)).norm() < 1e-9);
        let q = random_orthogonal(3, &mut rng);
        let w = v.rotated(&q).unwrap();
        let o = align(&v, &w).unwrap();
        assert!((o - q.transpose()).norm() < 1e-9);
    }

    #[test]
    fn projection_mass_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = random_frame(6, 2, &mut rng).unwrap();
        assert_relative_eq!(projection_mass(&v, &v.column(0)).unwrap(), 1.0, epsilon = 1e-12);
        let alpha = 0.7f64;
        let m = projection_mass(&e(2, 0, 1.0), &[alpha.cos(), alpha.sin()]).unwrap();
        assert_relative_eq!(m, alpha.cos().abs(), epsilon = 1e-14);
        assert!(projection_mass(&v, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        // orthogonal complement
        let p = v.matrix() * v.matrix().transpose();
        let x = DVector::from_fn(6, |i, _| (i as f64 + 1.0).sin());
        let perp = &x - &p * &x;
        let perp = perp.normalize();
        assert!(projection_mass(&v, perp.as_slice()).unwrap() < 1e-12);
    }

    #[test]
    fn json_column_major() {
        let f = Frame::standard(3, 2).unwrap();
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, r#"{"n":3,"r":2,"columns":[[1.0,0.0,0.0],[0.0,1.0,0.0]]}"#);
        let back: Frame = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        assert!(serde_json::from_str::<Frame>(r#"{"n":3,"r":1,"columns":[[1.0,1.0,0.0]]}"#).is_err());
    }
}
