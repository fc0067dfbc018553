//! POVMs, tuples of POVMs, and their perturbations.
//!
//! Extremality and boundary membership are decided by exact linear algebra:
//! a POVM is extremal iff no nonzero zero-sum Hermitian tuple lives inside
//! the supports of its effects, and it lies on the boundary iff some effect
//! has a nontrivial kernel. For tuples both properties reduce to the
//! elements (conjunction for extremality, disjunction for the boundary).

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::herm::{self, hermitian_basis, CMatrix, HermitianOperator};
use crate::{EPS_EQ, EPS_RANK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPovm")]
pub struct Povm {
    dim: usize,
    effects: Vec<HermitianOperator>,
}

#[derive(Deserialize)]
struct RawPovm {
    dim: usize,
    effects: Vec<HermitianOperator>,
}

impl TryFrom<RawPovm> for Povm {
    type Error = Error;

    fn try_from(raw: RawPovm) -> Result<Self> {
        let povm = validate_povm(raw.effects, EPS_EQ)?;
        if povm.dim != raw.dim {
            return Err(Error::DimensionMismatch { expected: raw.dim, found: povm.dim });
        }
        Ok(povm)
    }
}

/// Checks positivity and normalization, collecting every violation.
pub fn validate_povm(effects: Vec<HermitianOperator>, tol: f64) -> Result<Povm> {
    let Some(first) = effects.first() else {
        return Err(Error::InvalidPovm(vec![Violation::Empty]));
    };
    let dim = first.dim();
    let mut violations = Vec::new();
    for (k, e) in effects.iter().enumerate() {
        if e.dim() != dim {
            violations.push(Violation::DimensionMismatch { effect: k, expected: dim, found: e.dim() });
        }
    }
    if !violations.is_empty() {
        return Err(Error::InvalidPovm(violations));
    }
    for (k, e) in effects.iter().enumerate() {
        let eigenvalue = e.min_eigenvalue();
        if eigenvalue < -tol {
            violations.push(Violation::NotPsd { effect: k, eigenvalue });
        }
    }
    let residual = (herm::sum(&effects, dim) - HermitianOperator::identity(dim)).frobenius_norm();
    if residual > tol {
        violations.push(Violation::NotNormalized { residual });
    }
    if violations.is_empty() {
        Ok(Povm { dim, effects })
    } else {
        Err(Error::InvalidPovm(violations))
    }
}

impl Povm {
    pub fn new(effects: Vec<HermitianOperator>) -> Result<Self> {
        validate_povm(effects, EPS_EQ)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.effects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effects.is_empty()
    }

    pub fn effects(&self) -> &[HermitianOperator] {
        &self.effects
    }

    pub fn effect(&self, i: usize) -> &HermitianOperator {
        &self.effects[i]
    }

    /// Trivial POVM `(p_1 I, …, p_n I)`.
    pub fn trivial(probs: &[f64], dim: usize) -> Result<Self> {
        check_probability_vector(probs)?;
        Ok(Self { dim, effects: probs.iter().map(|&p| HermitianOperator::identity(dim).scale(p)).collect() })
    }

    /// Dichotomic `((I + σ)/2, (I − σ)/2)` for a Hermitian `σ` with `σ² = I`.
    pub fn dichotomic(observable: &HermitianOperator) -> Result<Self> {
        let id = HermitianOperator::identity(observable.dim());
        Self::new(vec![(&id + observable).scale(0.5), (&id - observable).scale(0.5)])
    }

    /// Largest Frobenius distance between corresponding effects.
    pub fn distance(&self, other: &Povm) -> Result<f64> {
        if self.dim != other.dim || self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "POVMs with {}x{} and {}x{} effects",
                self.len(),
                self.dim,
                other.len(),
                other.dim
            )));
        }
        Ok(self.effects.iter().zip(&other.effects).map(|(a, b)| (a - b).frobenius_norm()).fold(0.0, f64::max))
    }

    pub fn is_trivial(&self, tol: f64) -> bool {
        self.effects.iter().all(|e| {
            (e - &HermitianOperator::identity(self.dim).scale(e.trace() / self.dim as f64)).frobenius_norm() <= tol
        })
    }
}

pub(crate) fn check_probability_vector(probs: &[f64]) -> Result<()> {
    if probs.is_empty() || probs.iter().any(|&p| p.is_nan() || p < 0.0) {
        return Err(Error::InvalidParameter(format!("not a probability vector: {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParameter(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Hermitian blocks that sum to zero: a direction that keeps normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Perturbation {
    dim: usize,
    blocks: Vec<HermitianOperator>,
}

impl Perturbation {
    pub fn new(blocks: Vec<HermitianOperator>, tol: f64) -> Result<Self> {
        let dim = blocks.first().ok_or_else(|| Error::InvalidPerturbation("no blocks".into()))?.dim();
        if blocks.iter().any(|b| b.dim() != dim) {
            return Err(Error::InvalidPerturbation("blocks have different dimensions".into()));
        }
        let residual = herm::sum(&blocks, dim).frobenius_norm();
        if residual > tol {
            return Err(Error::InvalidPerturbation(format!("blocks sum to nonzero (Frobenius {residual:e})")));
        }
        Ok(Self { dim, blocks })
    }

    pub fn blocks(&self) -> &[HermitianOperator] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { dim: self.dim, blocks: self.blocks.iter().map(|b| b.scale(factor)).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.frobenius_norm().powi(2)).sum::<f64>().sqrt()
    }

    /// `A + D`, validated.
    pub fn apply(&self, povm: &Povm, tol: f64) -> Result<Povm> {
        if povm.len() != self.blocks.len() || povm.dim != self.dim {
            return Err(Error::ShapeMismatch("perturbation does not match POVM shape".into()));
        }
        validate_povm(povm.effects.iter().zip(&self.blocks).map(|(a, d)| a + d).collect(), tol)
    }
}

/// `Φ_t: A_i ↦ t A_i + (1 − t) tr(A_i)/d I`, for `t ∈ [0, 1]`.
pub fn depolarize(povm: &Povm, t: f64) -> Result<Povm> {
    depolarize_with(povm, t, false)
}

/// As [`depolarize`]; `allow_above_one` admits `t > 1`, re-validating the result.
pub fn depolarize_with(povm: &Povm, t: f64, allow_above_one: bool) -> Result<Povm> {
    if !t.is_finite() || t < 0.0 || (t > 1.0 && !allow_above_one) {
        return Err(Error::InvalidParameter(format!("visibility t = {t} outside [0, 1]")));
    }
    let d = povm.dim as f64;
    let effects: Vec<_> = povm
        .effects
        .iter()
        .map(|a| a.scale(t) + HermitianOperator::identity(povm.dim).scale((1.0 - t) * a.trace() / d))
        .collect();
    if t > 1.0 {
        validate_povm(effects, EPS_EQ)
    } else {
        Ok(Povm { dim: povm.dim, effects })
    }
}

/// The trivial POVM with the same outcome statistics on `I/d`, and the
/// depolarizing perturbation `D_i = tr(A_i)/d I − A_i` reaching it.
pub fn trivial_counterpart(povm: &Povm) -> (Povm, Perturbation) {
    let d = povm.dim as f64;
    let trivial: Vec<_> =
        povm.effects.iter().map(|a| HermitianOperator::identity(povm.dim).scale(a.trace() / d)).collect();
    let blocks = trivial.iter().zip(&povm.effects).map(|(t, a)| t - a).collect();
    (Povm { dim: povm.dim, effects: trivial }, Perturbation { dim: povm.dim, blocks })
}

pub fn is_projective(povm: &Povm, tol: f64) -> bool {
    povm.effects.iter().all(|e| (e.square() - e).frobenius_norm() <= tol)
}

#[derive(Debug, Clone)]
pub struct Extremality {
    pub extremal: bool,
    /// `A ± witness` are both valid POVMs; the tightest PSD margin is zero.
    pub witness: Option<Perturbation>,
    /// Dimension of the space of symmetric perturbation directions.
    pub null_dimension: usize,
}

pub fn is_extremal_povm(povm: &Povm, tol: f64) -> Extremality {
    let groups = vec![(0..povm.len()).collect::<Vec<_>>()];
    let found = symmetric_directions(&povm.effects, &groups, tol);
    Extremality {
        extremal: found.dimension == 0,
        witness: found.witness.map(|blocks| Perturbation { dim: povm.dim, blocks }),
        null_dimension: found.dimension,
    }
}

pub fn is_boundary_povm(povm: &Povm, tol: f64) -> bool {
    povm.effects.iter().any(|e| e.support_rank(tol) < povm.dim)
}

/// Reorders outcomes: effect `k` of the result is effect `perm[k]` of `povm`.
pub fn relabel(povm: &Povm, perm: &[usize]) -> Result<Povm> {
    check_permutation(perm, povm.len())?;
    Ok(Povm { dim: povm.dim, effects: perm.iter().map(|&k| povm.effects[k].clone()).collect() })
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidParameter(format!("permutation has length {}, expected {n}", perm.len())));
    }
    for &k in perm {
        if k >= n || std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidParameter(format!("{perm:?} is not a permutation of 0..{n}")));
        }
    }
    Ok(())
}

/// Result of the support-compressed null-space computation.
pub(crate) struct SymmetricDirections {
    pub dimension: usize,
    pub witness: Option<Vec<HermitianOperator>>,
}

/// Finds nonzero Hermitian blocks `D_b` with `supp D_b ⊆ supp E_b` such that,
/// for every group, `Σ_{b ∈ group} D_b = 0`. Such blocks are exactly the
/// directions in which `E ± εD` stays PSD and keeps the group sums.
///
/// The witness is scaled so that `E ± D` is PSD with zero margin at the
/// tightest block.
pub(crate) fn symmetric_directions(
    effects: &[HermitianOperator],
    groups: &[Vec<usize>],
    tol: f64,
) -> SymmetricDirections {
    let dim = effects[0].dim();
    let out_basis = hermitian_basis(dim);
    let d2 = out_basis.len();

    // Support of each effect: isometry V_b and positive eigenvalues.
    let supports: Vec<(CMatrix, Vec<f64>)> = effects.iter().map(|e| positive_support(e, tol)).collect();
    let block_bases: Vec<_> = supports.iter().map(|(v, _)| hermitian_basis(v.ncols().max(1))).collect();
    let mut offsets = Vec::with_capacity(effects.len());
    let mut n = 0;
    for (v, _) in &supports {
        offsets.push(n);
        n += v.ncols() * v.ncols();
    }
    if n == 0 {
        return SymmetricDirections { dimension: 0, witness: None };
    }

    let mut membership: Vec<Vec<usize>> = vec![Vec::new(); effects.len()];
    for (g, members) in groups.iter().enumerate() {
        for &b in members {
            membership[b].push(g);
        }
    }
    let rows = (groups.len() * d2).max(n);
    let mut l = DMatrix::<f64>::zeros(rows, n);
    for (b, (v, _)) in supports.iter().enumerate() {
        let r = v.ncols();
        for k in 0..r * r {
            let image = block_bases[b].elements()[k].expand(v);
            let coords = out_basis.coordinates(&image);
            for &g in &membership[b] {
                for (c, val) in coords.iter().enumerate() {
                    l[(g * d2 + c, offsets[b] + k)] += val;
                }
            }
        }
    }

    let svd = SVD::new(l, false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = EPS_RANK * sigma_max.max(f64::MIN_POSITIVE);
    let null: Vec<usize> = (0..svd.singular_values.len()).filter(|&k| svd.singular_values[k] <= cutoff).collect();
    if null.is_empty() {
        return SymmetricDirections { dimension: 0, witness: None };
    }
    let pick = *null
        .iter()
        .min_by(|&&a, &&b| svd.singular_values[a].total_cmp(&svd.singular_values[b]).then(b.cmp(&a)))
        .expect("non-empty");
    let mut x: Vec<f64> = v_t.row(pick).iter().copied().collect();
    let lead = x.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
    if lead < 0.0 {
        x.iter_mut().for_each(|v| *v = -*v);
    }

    let mut blocks = Vec::with_capacity(effects.len());
    let mut epsilon = f64::INFINITY;
    for (b, (v, lambda)) in supports.iter().enumerate() {
        let r = v.ncols();
        if r == 0 {
            blocks.push(HermitianOperator::zeros(dim));
            continue;
        }
        let inner = block_bases[b].reconstruct(&x[offsets[b]..offsets[b] + r * r]);
        // ρ(Λ^{-1/2} X Λ^{-1/2}) bounds how far we can move inside this block.
        let whitened = CMatrix::from_fn(r, r, |i, j| inner.entry(i, j) / (lambda[i] * lambda[j]).sqrt());
        let rho = HermitianOperator::from_matrix(whitened).expect("square").spectral_norm();
        if rho > 0.0 {
            epsilon = epsilon.min(1.0 / rho);
        }
        blocks.push(inner.expand(v));
    }
    let blocks = blocks.into_iter().map(|b| b.scale(epsilon)).collect();
    SymmetricDirections { dimension: null.len(), witness: Some(blocks) }
}

fn positive_support(e: &HermitianOperator, tol: f64) -> (CMatrix, Vec<f64>) {
    let (values, vectors) = e.eigh();
    let cutoff = tol * values.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > cutoff).collect();
    (CMatrix::from_fn(e.dim(), keep.len(), |i, j| vectors[(i, keep[j])]), keep.iter().map(|&k| values[k]).collect())
}

/// An ordered tuple of POVMs acting on the same space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTuple")]
pub struct MeasurementTuple {
    dim: usize,
    measurements: Vec<Povm>,
}

#[derive(Deserialize)]
struct RawTuple {
    dim: usize,
    measurements: Vec<Povm>,
}

impl TryFrom<RawTuple> for MeasurementTuple {
    type Error = Error;

    fn try_from(raw: RawTuple) -> Result<Self> {
        let t = MeasurementTuple::new(raw.measurements)?;
        if t.dim != raw.dim {
            return Err(Error::DimensionMismatch { expected: raw.dim, found: t.dim });
        }
        Ok(t)
    }
}

impl MeasurementTuple {
    pub fn new(measurements: Vec<Povm>) -> Result<Self> {
        let dim = measurements
            .first()
            .ok_or_else(|| Error::InvalidParameter("a tuple needs at least one measurement".into()))?
            .dim;
        if let Some(bad) = measurements.iter().find(|m| m.dim != dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: bad.dim });
        }
        Ok(Self { dim, measurements })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn measurements(&self) -> &[Povm] {
        &self.measurements
    }

    pub fn measurement(&self, j: usize) -> &Povm {
        &self.measurements[j]
    }

    pub fn outcome_counts(&self) -> Vec<usize> {
        self.measurements.iter().map(Povm::len).collect()
    }

    pub fn depolarize(&self, t: f64) -> Result<Self> {
        self.depolarize_with(t, false)
    }

    pub fn depolarize_with(&self, t: f64, allow_above_one: bool) -> Result<Self> {
        let measurements =
            self.measurements.iter().map(|m| depolarize_with(m, t, allow_above_one)).collect::<Result<_>>()?;
        Ok(Self { dim: self.dim, measurements })
    }

    pub fn trivial_counterpart(&self) -> Self {
        Self { dim: self.dim, measurements: self.measurements.iter().map(|m| trivial_counterpart(m).0).collect() }
    }

    /// Largest per-effect Frobenius distance.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!("tuples of {} and {} measurements", self.len(), other.len())));
        }
        self.measurements.iter().zip(&other.measurements).try_fold(0.0, |acc, (a, b)| Ok(f64::max(acc, a.distance(b)?)))
    }
}

/// Extremality in `P^m`, decided on the whole tuple: symmetric perturbations
/// with each measurement's blocks summing to zero.
pub fn tuple_is_extremal(tuple: &MeasurementTuple, tol: f64) -> bool {
    let effects: Vec<HermitianOperator> = tuple.measurements.iter().flat_map(|m| m.effects.iter().cloned()).collect();
    let mut groups = Vec::with_capacity(tuple.len());
    let mut offset = 0;
    for m in &tuple.measurements {
        groups.push((offset..offset + m.len()).collect());
        offset += m.len();
    }
    symmetric_directions(&effects, &groups, tol).dimension == 0
}

/// Boundary of `P^m` by a step away from the interior point `C` (uniform
/// trivial tuple): `T` is on the boundary iff `T − ε(C − T)` leaves the set.
/// `ε` is matched to `tol` so the step fails exactly when some effect has an
/// eigenvalue below `tol`.
pub fn tuple_is_boundary(tuple: &MeasurementTuple, tol: f64) -> bool {
    let identity = HermitianOperator::identity(tuple.dim);
    tuple.measurements.iter().any(|m| {
        let n = m.len() as f64;
        if n * tol >= 1.0 {
            return true;
        }
        let eps = n * tol / (1.0 - n * tol);
        m.effects.iter().any(|e| (e.scale(1.0 + eps) - identity.scale(eps / n)).min_eigenvalue() < 0.0)
    })
}
