//! Normalized probabilist's Hermite oscillators and their tensor products.
//!
//! The oscillator `φ_ℓ(z) = He_ℓ(z) / √(ℓ!)` is evaluated with the normalized
//! three-term recurrence
//!
//! ```text
//! z·φ_k(z) = √(k+1)·φ_{k+1}(z) + √k·φ_{k-1}(z)
//! ```
//!
//! so no factorial is ever formed. An `r`-variate basis function `φ_I` is
//! indexed by a multiset `I` over `[r]` and equals `∏_i φ_{a_i}(z_i)` where
//! `a_i` is the multiplicity of `i` in `I`. Under `N(0, Id_r)` the family is
//! orthonormal.
//!
//! The canonical ordering of the degree-`≤ d` basis is graded (by degree),
//! then lexicographic on the sorted entries. Serialized coefficient vectors
//! depend on this ordering, so it must not change.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `φ_ℓ(z)` by the normalized recurrence.
pub fn oscillator_eval(ell: usize, z: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..ell {
        let kf = k as f64;
        let next = (z * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Fills `out[ℓ] = φ_ℓ(z)` for `ℓ = 0..out.len()`.
pub fn oscillators_into(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = z;
    }
    for k in 1..out.len().saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = (z * out[k] - kf.sqrt() * out[k - 1]) / (kf + 1.0).sqrt();
    }
}

/// A multiset of variable indices identifying one tensor-product basis
/// function. Entries are kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    entries: Vec<usize>,
}

impl MultiIndex {
    pub fn new(mut entries: Vec<usize>) -> Self {
        entries.sort_unstable();
        MultiIndex { entries }
    }

    pub fn empty() -> Self {
        MultiIndex { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[usize] {
        &self.entries
    }

    pub fn degree(&self) -> usize {
        self.entries.len()
    }

    /// Multiplicity of every variable in `[r]`.
    pub fn exponents(&self, r: usize) -> Result<Vec<usize>> {
        let mut a = vec![0usize; r];
        for &e in &self.entries {
            if e >= r {
                return Err(Error::DimensionMismatch {
                    expected: r,
                    got: e + 1,
                });
            }
            a[e] += 1;
        }
        Ok(a)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, e) in self.entries.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, "}}")
    }
}

/// All multisets of size `≤ d` over `[r]`, graded then lexicographic.
pub fn multi_index_space(r: usize, d: usize) -> Vec<MultiIndex> {
    fn extend(r: usize, remaining: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<MultiIndex>) {
        if remaining == 0 {
            out.push(MultiIndex { entries: cur.clone() });
            return;
        }
        for i in start..r {
            cur.push(i);
            extend(r, remaining - 1, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::with_capacity(basis_size(r, d));
    let mut cur = Vec::with_capacity(d);
    for degree in 0..=d {
        extend(r, degree, 0, &mut cur, &mut out);
    }
    out
}

/// `C(r + d, d)`.
pub fn basis_size(r: usize, d: usize) -> usize {
    let mut acc: u128 = 1;
    for k in 1..=d as u128 {
        acc = acc * (r as u128 + k) / k;
    }
    acc as usize
}

/// `φ_I(z) = ∏_i φ_{a_i}(z_i)`.
pub fn phi_eval(index: &MultiIndex, z: &[f64]) -> Result<f64> {
    let a = index.exponents(z.len())?;
    Ok(a.iter()
        .zip(z)
        .map(|(&ai, &zi)| oscillator_eval(ai, zi))
        .product())
}

/// Dense coefficients over the canonical basis of `r`-variate polynomials of
/// degree at most `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CoefficientRepr")]
pub struct CoefficientVector {
    r: usize,
    d: usize,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct CoefficientRepr {
    r: usize,
    d: usize,
    values: Vec<f64>,
}

impl TryFrom<CoefficientRepr> for CoefficientVector {
    type Error = Error;
    fn try_from(repr: CoefficientRepr) -> Result<Self> {
        CoefficientVector::from_values(repr.r, repr.d, repr.values)
    }
}

impl CoefficientVector {
    pub fn zeros(r: usize, d: usize) -> Self {
        CoefficientVector {
            r,
            d,
            values: vec![0.0; basis_size(r, d)],
        }
    }

    pub fn from_values(r: usize, d: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("r must be positive".into()));
        }
        let m = basis_size(r, d);
        if values.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: values.len(),
            });
        }
        Ok(CoefficientVector { r, d, values })
    }

    /// Builds a vector from `(entries, value)` pairs; unspecified entries are 0.
    pub fn from_terms(r: usize, d: usize, terms: &[(&[usize], f64)]) -> Result<Self> {
        let basis = HermiteBasis::shared(r, d);
        let mut c = CoefficientVector::zeros(r, d);
        for (entries, value) in terms {
            let idx = basis
                .position(&MultiIndex::new(entries.to_vec()))
                .ok_or_else(|| Error::InvalidArgument(format!("multi-index {entries:?} outside basis")))?;
            c.values[idx] += value;
        }
        Ok(c)
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn constant_term(&self) -> f64 {
        self.values[0]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CoefficientVector {
            r: self.r,
            d: self.d,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Euclidean distance; both vectors must share `(r, d)`.
    pub fn distance(&self, other: &CoefficientVector) -> Result<f64> {
        if self.r != other.r || self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn eval(&self, z: &[f64]) -> Result<f64> {
        HermiteBasis::shared(self.r, self.d).eval(self, z)
    }

    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        HermiteBasis::shared(self.r, self.d).gradient(self, z)
    }
}

/// `Σ_I c_I φ_I(z)`.
pub fn poly_eval(c: &CoefficientVector, z: &[f64]) -> Result<f64> {
    c.eval(z)
}

/// `∇p(z)`.
pub fn poly_gradient(c: &CoefficientVector, z: &[f64]) -> Result<Vec<f64>> {
    c.gradient(z)
}

/// `Var[p(g)]` for `g ~ N(0, Id_r)`: the squared norm of the non-constant part.
pub fn hermite_variance(c: &CoefficientVector) -> f64 {
    c.values[1..].iter().map(|v| v * v).sum()
}

/// One nonzero entry of the derivative operator `∂/∂z_j`:
/// `∂_j φ_src = scale · φ_dst`.
#[derive(Clone, Copy, Debug)]
struct DerivativeTerm {
    src: usize,
    dst: usize,
    scale: f64,
}

/// Precomputed canonical basis for fixed `(r, d)`: enumeration, lookup and
/// the sparse derivative maps. Immutable after construction.
#[derive(Debug)]
pub struct HermiteBasis {
    r: usize,
    d: usize,
    indices: Vec<MultiIndex>,
    exponents: Vec<Vec<usize>>,
    lookup: HashMap<MultiIndex, usize>,
    derivatives: Vec<Vec<DerivativeTerm>>,
}

impl HermiteBasis {
    pub fn new(r: usize, d: usize) -> Self {
        let indices = multi_index_space(r, d);
        let exponents: Vec<Vec<usize>> = indices
            .iter()
            .map(|i| i.exponents(r).expect("enumerated index within range"))
            .collect();
        let lookup: HashMap<MultiIndex, usize> = indices
            .iter()
            .cloned()
            .enumerate()
            .map(|(k, i)| (i, k))
            .collect();
        let derivatives = (0..r)
            .map(|j| {
                indices
                    .iter()
                    .enumerate()
                    .filter_map(|(src, idx)| {
                        let a = exponents[src][j];
                        if a == 0 {
                            return None;
                        }
                        // φ_a' = √a · φ_{a-1}
                        let mut lowered = idx.entries.clone();
                        let pos = lowered.iter().position(|&e| e == j)?;
                        lowered.remove(pos);
                        let dst = lookup[&MultiIndex { entries: lowered }];
                        Some(DerivativeTerm {
                            src,
                            dst,
                            scale: (a as f64).sqrt(),
                        })
                    })
                    .collect()
            })
            .collect();
        HermiteBasis {
            r,
            d,
            indices,
            exponents,
            lookup,
            derivatives,
        }
    }

    /// Process-wide cached basis for `(r, d)`.
    pub fn shared(r: usize, d: usize) -> Arc<HermiteBasis> {
        type Cache = Mutex<HashMap<(usize, usize), Arc<HermiteBasis>>>;
        static CACHE: OnceLock<Cache> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((r, d))
            .or_insert_with(|| Arc::new(HermiteBasis::new(r, d)))
            .clone()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn exponents(&self, k: usize) -> &[usize] {
        &self.exponents[k]
    }

    pub fn position(&self, index: &MultiIndex) -> Option<usize> {
        self.lookup.get(index).copied()
    }

    fn check(&self, c: &CoefficientVector, z: &[f64]) -> Result<()> {
        if c.r != self.r || c.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: c.len(),
            });
        }
        if z.len() != self.r {
            return Err(Error::DimensionMismatch {
                expected: self.r,
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Writes `φ_I(z)` for every basis element into `out` (length `M`).
    pub fn features_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.r);
        debug_assert_eq!(out.len(), self.len());
        let width = self.d + 1;
        let mut table = vec![0.0; self.r * width];
        for (i, &zi) in z.iter().enumerate() {
            oscillators_into(zi, &mut table[i * width..(i + 1) * width]);
        }
        for (slot, a) in out.iter_mut().zip(&self.exponents) {
            *slot = a
                .iter()
                .enumerate()
                .map(|(i, &ai)| table[i * width + ai])
                .product();
        }
    }

    pub fn features(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.r {
            return Err(Error::DimensionMismatch {
                expected: self.r,
                got: z.len(),
            });
        }
        let mut out = vec![0.0; self.len()];
        self.features_into(z, &mut out);
        Ok(out)
    }

    pub fn eval(&self, c: &CoefficientVector, z: &[f64]) -> Result<f64> {
        self.check(c, z)?;
        let mut phi = vec![0.0; self.len()];
        self.features_into(z, &mut phi);
        Ok(dot(&c.values, &phi))
    }

    pub fn gradient(&self, c: &CoefficientVector, z: &[f64]) -> Result<Vec<f64>> {
        self.check(c, z)?;
        let mut phi = vec![0.0; self.len()];
        self.features_into(z, &mut phi);
        let mut grad = vec![0.0; self.r];
        self.gradient_from_features(c.values(), &phi, &mut grad);
        Ok(grad)
    }

    /// `∇p(z)` given precomputed features `φ(z)`.
    pub fn gradient_from_features(&self, coef: &[f64], phi: &[f64], grad: &mut [f64]) {
        for (g, terms) in grad.iter_mut().zip(&self.derivatives) {
            *g = terms
                .iter()
                .map(|t| coef[t.src] * t.scale * phi[t.dst])
                .sum();
        }
    }

    /// Coefficients of `∂p/∂z_j`, expressed in the same `(r, d)` basis
    /// (the top-degree entries are zero).
    pub fn derivative_coefficients(&self, c: &CoefficientVector, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for t in &self.derivatives[j] {
            out[t.dst] += c.values[t.src] * t.scale;
        }
        out
    }

    /// Hermite coefficients of `f` by tensor Gauss–Hermite projection with
    /// `2d + 2` nodes per coordinate; exact when `f` is a polynomial of
    /// degree at most `2d + 3`.
    pub fn project<F>(&self, mut f: F) -> CoefficientVector
    where
        F: FnMut(&[f64]) -> f64,
    {
        let rule = gauss_hermite(2 * self.d + 2);
        let mut values = vec![0.0; self.len()];
        let mut phi = vec![0.0; self.len()];
        for (point, weight) in rule.tensor(self.r) {
            let fz = f(&point);
            self.features_into(&point, &mut phi);
            for (v, p) in values.iter_mut().zip(&phi) {
                *v += weight * fz * p;
            }
        }
        CoefficientVector {
            r: self.r,
            d: self.d,
            values,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// `E[φ_a(g) φ_b(g) φ_c(g)]` for `g ~ N(0, 1)`.
///
/// Nonzero only when `a + b + c` is even and `(a, b, c)` satisfies the
/// triangle inequalities.
pub fn linearization_coeff(a: usize, b: usize, c: usize) -> f64 {
    let sum = a + b + c;
    if sum % 2 == 1 {
        return 0.0;
    }
    let s = sum / 2;
    if s < a || s < b || s < c {
        return 0.0;
    }
    let num = (factorial(a) * factorial(b) * factorial(c)).sqrt();
    num / (factorial(s - c) * factorial(s - b) * factorial(s - a))
}

/// Gauss–Hermite rule for the standard normal weight; weights sum to 1.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Golub–Welsch: nodes are eigenvalues of the Jacobi matrix of the
/// probabilist's Hermite recurrence, weights are squared first components.
pub fn gauss_hermite(points: usize) -> GaussHermite {
    assert!(points >= 1, "need at least one node");
    let mut jacobi = DMatrix::<f64>::zeros(points, points);
    for k in 1..points {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..points)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

impl GaussHermite {
    /// `E[f(g)]` under the rule.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Tensor-product grid over `r` coordinates: `(point, weight)` pairs.
    pub fn tensor(&self, r: usize) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        let k = self.nodes.len();
        let total = k.pow(r as u32);
        (0..total).map(move |mut flat| {
            let mut point = Vec::with_capacity(r);
            let mut weight = 1.0;
            for _ in 0..r {
                let i = flat % k;
                flat /= k;
                point.push(self.nodes[i]);
                weight *= self.weights[i];
            }
            (point, weight)
        })
    }
}
