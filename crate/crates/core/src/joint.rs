//! Joint measurements: marginals, feasibility, critical visibility and the
//! max-min-eigenvalue joint that decides the boundary of the compatible set.
//!
//! Joint effects are stored densely in lexicographic multi-index order, last
//! index fastest.
//!
//! Every joint effect satisfies `supp M_a ⊆ ∩_j supp A^(j)_{a_j}` because the
//! effects summing to a marginal effect are PSD. The SDPs below restrict the
//! variables to that face up front, which removes the degeneracy of tuples
//! with rank-deficient effects without changing the feasible set.

use serde::{Deserialize, Serialize};

use crate::conic::{self, solve_sdp, AffineExpr, SdpProblem, SdpSolution, SdpStatus, Sense, SolverSettings, VarId};
use crate::error::{Error, Result};
use crate::herm::{self, CMatrix, HermitianOperator};
use crate::povm::{check_probability_vector, validate_povm, MeasurementTuple, Povm};
use crate::{EPS_EQ, EPS_PSD, EPS_RANK, S_STAR_TOL};

pub type MultiIndex = Vec<usize>;

/// All multi-indices for the given outcome counts, last index fastest.
pub fn multi_indices(counts: &[usize]) -> Vec<MultiIndex> {
    let total: usize = counts.iter().product();
    (0..total).map(|flat| unflatten(flat, counts)).collect()
}

pub fn flat_index(a: &[usize], counts: &[usize]) -> usize {
    a.iter().zip(counts).fold(0, |acc, (&x, &n)| acc * n + x)
}

pub(crate) fn unflatten(mut flat: usize, counts: &[usize]) -> MultiIndex {
    let mut a = vec![0; counts.len()];
    for j in (0..counts.len()).rev() {
        a[j] = flat % counts[j];
        flat /= counts[j];
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawJoint")]
pub struct JointMeasurement {
    dim: usize,
    outcomes: Vec<usize>,
    effects: Vec<HermitianOperator>,
}

#[derive(Deserialize)]
struct RawJoint {
    dim: usize,
    outcomes: Vec<usize>,
    effects: Vec<HermitianOperator>,
}

impl TryFrom<RawJoint> for JointMeasurement {
    type Error = Error;

    fn try_from(raw: RawJoint) -> Result<Self> {
        let joint = JointMeasurement::new(raw.outcomes, raw.effects)?;
        if joint.dim != raw.dim {
            return Err(Error::DimensionMismatch { expected: raw.dim, found: joint.dim });
        }
        Ok(joint)
    }
}

impl JointMeasurement {
    /// Validates shape, positivity and normalization.
    pub fn new(outcomes: Vec<usize>, effects: Vec<HermitianOperator>) -> Result<Self> {
        check_shape(&outcomes, effects.len())?;
        let povm = validate_povm(effects, EPS_EQ).map_err(|e| Error::InvalidJoint(e.to_string()))?;
        Ok(Self { dim: povm.dim(), outcomes, effects: povm.effects().to_vec() })
    }

    pub(crate) fn from_parts(dim: usize, outcomes: Vec<usize>, effects: Vec<HermitianOperator>) -> Self {
        debug_assert_eq!(effects.len(), outcomes.iter().product::<usize>());
        Self { dim, outcomes, effects }
    }

    /// Views an `∏ n_j`-outcome POVM as a joint with the given outcome counts.
    pub fn from_povm(povm: &Povm, outcomes: Vec<usize>) -> Result<Self> {
        check_shape(&outcomes, povm.len())?;
        Ok(Self { dim: povm.dim(), outcomes, effects: povm.effects().to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    pub fn parties(&self) -> usize {
        self.outcomes.len()
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

    pub fn effect(&self, a: &[usize]) -> &HermitianOperator {
        &self.effects[flat_index(a, &self.outcomes)]
    }

    /// The joint as a single POVM over all multi-indices.
    pub fn as_povm(&self) -> Result<Povm> {
        validate_povm(self.effects.clone(), EPS_EQ)
    }

    /// Largest per-effect Frobenius distance.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other.dim, &other.outcomes)?;
        Ok(self.effects.iter().zip(&other.effects).map(|(a, b)| (a - b).frobenius_norm()).fold(0.0, f64::max))
    }

    /// `(1 − w)·self + w·other`.
    pub fn mix(&self, other: &Self, w: f64) -> Result<Self> {
        self.check_same_shape(other.dim, &other.outcomes)?;
        let effects = self.effects.iter().zip(&other.effects).map(|(a, b)| a.scale(1.0 - w) + b.scale(w)).collect();
        Ok(Self { dim: self.dim, outcomes: self.outcomes.clone(), effects })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.effects.iter().map(HermitianOperator::min_eigenvalue).fold(f64::INFINITY, f64::min)
    }

    /// Frobenius distance of the summed effects from the identity.
    pub fn normalization_residual(&self) -> f64 {
        (herm::sum(&self.effects, self.dim) - HermitianOperator::identity(self.dim)).frobenius_norm()
    }

    fn check_same_shape(&self, dim: usize, outcomes: &[usize]) -> Result<()> {
        if self.dim != dim || self.outcomes != outcomes {
            return Err(Error::ShapeMismatch(format!(
                "joint with outcomes {:?} on dimension {} vs {:?} on dimension {}",
                self.outcomes, self.dim, outcomes, dim
            )));
        }
        Ok(())
    }
}

fn check_shape(outcomes: &[usize], len: usize) -> Result<()> {
    if outcomes.is_empty() || outcomes.contains(&0) {
        return Err(Error::InvalidJoint(format!("invalid outcome counts {outcomes:?}")));
    }
    let expected: usize = outcomes.iter().product();
    if expected != len {
        return Err(Error::InvalidJoint(format!("outcomes {outcomes:?} need {expected} effects, found {len}")));
    }
    Ok(())
}

/// A perturbation of a joint measurement whose single-party marginals all vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPerturbation {
    dim: usize,
    outcomes: Vec<usize>,
    blocks: Vec<HermitianOperator>,
}

impl Serialize for MarginalPerturbation {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Layout<'a> {
            dim: usize,
            outcomes: &'a [usize],
            effects: &'a [HermitianOperator],
        }
        Layout { dim: self.dim, outcomes: &self.outcomes, effects: &self.blocks }.serialize(serializer)
    }
}

impl MarginalPerturbation {
    pub fn new(outcomes: Vec<usize>, blocks: Vec<HermitianOperator>, tol: f64) -> Result<Self> {
        check_shape(&outcomes, blocks.len()).map_err(|e| Error::InvalidPerturbation(e.to_string()))?;
        let dim = blocks[0].dim();
        if blocks.iter().any(|b| b.dim() != dim) {
            return Err(Error::InvalidPerturbation("blocks have different dimensions".into()));
        }
        let p = Self { dim, outcomes, blocks };
        let residual = p.marginal_residual();
        if residual > tol {
            return Err(Error::InvalidPerturbation(format!("marginals do not vanish (Frobenius {residual:e})")));
        }
        Ok(p)
    }

    pub(crate) fn from_parts(dim: usize, outcomes: Vec<usize>, blocks: Vec<HermitianOperator>) -> Self {
        Self { dim, outcomes, blocks }
    }

    /// `M' − M` for two joints of the same shape.
    pub fn between(m: &JointMeasurement, m_prime: &JointMeasurement) -> Result<Self> {
        m.check_same_shape(m_prime.dim, &m_prime.outcomes)?;
        let blocks = m_prime.effects.iter().zip(&m.effects).map(|(a, b)| a - b).collect();
        Ok(Self { dim: m.dim, outcomes: m.outcomes.clone(), blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outcomes(&self) -> &[usize] {
        &self.outcomes
    }

    pub fn blocks(&self) -> &[HermitianOperator] {
        &self.blocks
    }

    pub fn block(&self, a: &[usize]) -> &HermitianOperator {
        &self.blocks[flat_index(a, &self.outcomes)]
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            outcomes: self.outcomes.clone(),
            blocks: self.blocks.iter().map(|b| b.scale(factor)).collect(),
        }
    }

    /// `Σ_a tr(D_a E_a)`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.blocks.iter().zip(&other.blocks).map(|(a, b)| herm::inner_unchecked(a, b)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return Err(Error::ZeroPerturbation);
        }
        Ok(self.scale(1.0 / norm))
    }

    /// `self − c·other`.
    pub(crate) fn minus_scaled(&self, other: &Self, c: f64) -> Self {
        let blocks = self.blocks.iter().zip(&other.blocks).map(|(a, b)| a - &b.scale(c)).collect();
        Self { dim: self.dim, outcomes: self.outcomes.clone(), blocks }
    }

    /// Largest Frobenius norm of any single-party marginal.
    pub fn marginal_residual(&self) -> f64 {
        (0..self.outcomes.len())
            .flat_map(|j| marginal_sums(&self.blocks, &self.outcomes, self.dim, j))
            .map(|b| b.frobenius_norm())
            .fold(0.0, f64::max)
    }

    /// `M + D`, validated as a joint measurement with the same shape.
    pub fn apply(&self, joint: &JointMeasurement) -> Result<JointMeasurement> {
        joint.check_same_shape(self.dim, &self.outcomes)?;
        let effects = joint.effects.iter().zip(&self.blocks).map(|(m, d)| m + d).collect();
        JointMeasurement::new(self.outcomes.clone(), effects)
    }
}

pub(crate) fn marginal_sums(
    effects: &[HermitianOperator],
    counts: &[usize],
    dim: usize,
    j: usize,
) -> Vec<HermitianOperator> {
    let mut out = vec![HermitianOperator::zeros(dim); counts[j]];
    for (flat, e) in effects.iter().enumerate() {
        out[unflatten(flat, counts)[j]] += e;
    }
    out
}

/// Coarse-grains over every party except `j`.
pub fn marginal(joint: &JointMeasurement, j: usize) -> Result<Povm> {
    if j >= joint.parties() {
        return Err(Error::PartyOutOfRange { party: j, parties: joint.parties() });
    }
    validate_povm(marginal_sums(&joint.effects, &joint.outcomes, joint.dim, j), EPS_EQ)
}

pub fn marginals(joint: &JointMeasurement) -> Result<MeasurementTuple> {
    MeasurementTuple::new((0..joint.parties()).map(|j| marginal(joint, j)).collect::<Result<_>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointCheck {
    pub ok: bool,
    /// Worst per-effect Frobenius distance between a marginal and its target.
    pub residual: f64,
}

/// Checks every marginal of `joint` against `tuple` (per-effect Frobenius).
pub fn verify_joint(joint: &JointMeasurement, tuple: &MeasurementTuple, tol: f64) -> Result<JointCheck> {
    if joint.dim != tuple.dim() || joint.outcomes != tuple.outcome_counts() {
        return Err(Error::ShapeMismatch(format!(
            "joint with outcomes {:?} on dimension {} for a tuple with outcomes {:?} on dimension {}",
            joint.outcomes,
            joint.dim,
            tuple.outcome_counts(),
            tuple.dim()
        )));
    }
    let mut residual = 0.0_f64;
    for (j, m) in tuple.measurements().iter().enumerate() {
        for (got, want) in marginal_sums(&joint.effects, &joint.outcomes, joint.dim, j).iter().zip(m.effects()) {
            residual = residual.max((got - want).frobenius_norm());
        }
    }
    let psd_ok = joint.min_eigenvalue() >= -EPS_PSD;
    Ok(JointCheck { ok: residual <= tol && psd_ok, residual })
}

#[derive(Debug, Clone)]
pub enum Compatibility {
    Compatible(JointMeasurement),
    /// Infeasibility proven by a dual ray with the given normalized residual.
    Incompatible {
        certificate_residual: f64,
    },
}

impl Compatibility {
    pub fn joint(&self) -> Option<&JointMeasurement> {
        match self {
            Compatibility::Compatible(m) => Some(m),
            Compatibility::Incompatible { .. } => None,
        }
    }

    pub fn into_joint(self) -> Result<JointMeasurement> {
        match self {
            Compatibility::Compatible(m) => Ok(m),
            Compatibility::Incompatible { certificate_residual } => Err(Error::Incompatible { certificate_residual }),
        }
    }
}

/// Decides joint measurability by the feasibility SDP over the face of
/// admissible joints.
pub fn find_joint(tuple: &MeasurementTuple) -> Result<Compatibility> {
    let faces = joint_faces(tuple);
    let mut program = JointProgram::new(tuple, &faces);
    program.add_marginal_equalities(tuple);
    for a in 0..program.vars.len() {
        if let Some(expr) = program.compressed_var(a) {
            program.problem.add_psd(expr);
        }
    }
    let sol = solve_sdp(&program.problem, &SolverSettings::default())?;
    match sol.status {
        SdpStatus::Infeasible => {
            Ok(Compatibility::Incompatible { certificate_residual: sol.certificate_residual.unwrap_or(0.0) })
        }
        SdpStatus::Optimal => {
            let joint = program.joint(&sol);
            certify(&joint, tuple, "find_joint")?;
            Ok(Compatibility::Compatible(joint))
        }
        _ => Err(conic::require_optimal(sol, "find_joint").expect_err("status is not optimal")),
    }
}

fn certify(joint: &JointMeasurement, tuple: &MeasurementTuple, context: &str) -> Result<()> {
    let check = verify_joint(joint, tuple, EPS_EQ)?;
    if !check.ok {
        return Err(Error::solver(
            context,
            format!(
                "returned joint misses its marginals (residual {:e}, min eigenvalue {:e})",
                check.residual,
                joint.min_eigenvalue()
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Visibility {
    pub t_star: f64,
    /// A joint for `Φ_{t*}(T)`.
    pub joint: JointMeasurement,
}

/// Largest `t ≤ 1` such that `Φ_t(T)` is jointly measurable, as one SDP with
/// `t` entering the marginal equalities affinely.
pub fn critical_visibility(tuple: &MeasurementTuple) -> Result<Visibility> {
    critical_visibility_capped(tuple, 1.0)
}

/// As [`critical_visibility`] with the cap on `t` moved to `t_max`. `Φ_t(T)`
/// stays a valid tuple for `t > 1` because it is the marginal of a joint.
pub fn critical_visibility_capped(tuple: &MeasurementTuple, t_max: f64) -> Result<Visibility> {
    let d = tuple.dim() as f64;
    let centers = tuple
        .measurements()
        .iter()
        .map(|m| m.effects().iter().map(|e| HermitianOperator::identity(tuple.dim()).scale(e.trace() / d)).collect())
        .collect();
    visibility_toward(tuple, centers, t_max, "critical_visibility")
}

/// Largest `t ≤ t_max` with `C + t(T − C)` compatible, where `C` is the
/// uniform trivial tuple (`I/n` per effect), an interior point of the
/// compatible set. `t* > 1` iff `T` is interior.
pub fn uniform_noise_visibility(tuple: &MeasurementTuple, t_max: f64) -> Result<Visibility> {
    let centers = tuple
        .measurements()
        .iter()
        .map(|m| vec![HermitianOperator::identity(tuple.dim()).scale(1.0 / m.len() as f64); m.len()])
        .collect();
    visibility_toward(tuple, centers, t_max, "uniform_noise_visibility")
}

/// Rescalings of the tuple toward the noise tried when the direct program stalls.
const VISIBILITY_RESCALES: [f64; 2] = [0.97, 0.9];

/// Width at which the fallback bisection stops.
const VISIBILITY_BISECTION_TOL: f64 = 1e-9;

fn visibility_toward(
    tuple: &MeasurementTuple,
    centers: Vec<Vec<HermitianOperator>>,
    t_max: f64,
    context: &str,
) -> Result<Visibility> {
    if !(t_max.is_finite() && t_max > 0.0) {
        return Err(Error::InvalidParameter(format!("visibility cap must be positive, got {t_max}")));
    }
    let target_at = |t: f64| -> Result<MeasurementTuple> {
        let povms = tuple
            .measurements()
            .iter()
            .zip(&centers)
            .map(|(m, c)| {
                let effects = m.effects().iter().zip(c).map(|(e, c)| c + &(e - c).scale(t)).collect();
                validate_povm(effects, EPS_EQ)
            })
            .collect::<Result<Vec<_>>>()?;
        MeasurementTuple::new(povms)
    };
    let mut outcome = visibility_sdp(tuple, &centers, t_max, context, &target_at);
    // T_s = C + s(T − C) moves the same line to different data: t on T_s is st on T
    for s in VISIBILITY_RESCALES {
        if !matches!(outcome, Err(Error::Solver { .. })) {
            return outcome;
        }
        let Ok(rescaled) = target_at(s) else { break };
        outcome = visibility_sdp(&rescaled, &centers, t_max / s, context, &|t| target_at(s * t))
            .map(|v| Visibility { t_star: (s * v.t_star).min(t_max), joint: v.joint });
    }
    match outcome {
        Err(Error::Solver { .. }) => visibility_bisection(t_max, context, &target_at),
        other => other,
    }
}

fn visibility_sdp(
    tuple: &MeasurementTuple,
    centers: &[Vec<HermitianOperator>],
    t_max: f64,
    context: &str,
    target_at: &dyn Fn(f64) -> Result<MeasurementTuple>,
) -> Result<Visibility> {
    let dim = tuple.dim();
    let counts = tuple.outcome_counts();
    let full: Vec<Option<CMatrix>> = vec![Some(CMatrix::identity(dim, dim)); counts.iter().product()];
    let mut program = JointProgram::new(tuple, &full);
    let t = program.problem.add_variable("t", 1);
    for (j, m) in tuple.measurements().iter().enumerate() {
        for (k, e) in m.effects().iter().enumerate() {
            let center = &centers[j][k];
            let lhs = program.marginal_expr(j, k).plus_scalar_times(t, -(e - center));
            program.problem.add_equality(lhs, center.clone());
        }
    }
    for a in 0..program.vars.len() {
        let expr = program.compressed_var(a).expect("full faces");
        program.problem.add_psd(expr);
    }
    program
        .problem
        .add_psd(AffineExpr::new(1).plus(t, -1.0).plus_constant(&HermitianOperator::identity(1).scale(t_max)));
    program.problem.set_objective(Sense::Maximize, vec![(t, HermitianOperator::identity(1))]);
    let sol = conic::require_optimal(solve_sdp(&program.problem, &SolverSettings::default())?, context)?;
    let joint = program.joint(&sol);
    let t_star = sol.scalar(t).clamp(0.0, t_max);
    let target = target_at(t_star).map_err(|e| Error::solver(context, format!("tuple at t* is not valid: {e}")))?;
    certify(&joint, &target, context)?;
    Ok(Visibility { t_star, joint })
}

/// Bisection on `t` with [`find_joint`], for when the optimum sits on a face
/// too degenerate for the direct program. Each step is either a certified
/// joint or a certified incompatibility; a step the solver cannot decide ends
/// the search at the last certified `t`.
fn visibility_bisection(
    t_max: f64,
    context: &str,
    target_at: &dyn Fn(f64) -> Result<MeasurementTuple>,
) -> Result<Visibility> {
    // None: incompatible, or not a tuple at all
    let probe = |t: f64| -> Result<Option<JointMeasurement>> {
        match target_at(t) {
            Ok(target) => Ok(find_joint(&target)?.joint().cloned()),
            Err(Error::Solver { .. }) => Err(Error::solver(context, format!("bisection at t = {t}"))),
            Err(_) => Ok(None),
        }
    };
    if let Some(joint) = probe(t_max)? {
        return Ok(Visibility { t_star: t_max, joint });
    }
    let mut lo = 0.0;
    let mut joint = probe(0.0)?.ok_or_else(|| Error::solver(context, "bisection: the noise end is not compatible"))?;
    let mut hi = t_max;
    while hi - lo > VISIBILITY_BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        match probe(mid) {
            Ok(Some(m)) => {
                lo = mid;
                joint = m;
            }
            Ok(None) => hi = mid,
            Err(_) => break,
        }
    }
    Ok(Visibility { t_star: lo, joint })
}

/// The joint `M_a = (∏_s p^(s)_{a_s}) I` of a tuple of trivial POVMs.
pub fn product_joint_trivial(probs: &[Vec<f64>], dim: usize) -> Result<JointMeasurement> {
    if probs.is_empty() || dim == 0 {
        return Err(Error::InvalidParameter("need at least one party and a positive dimension".into()));
    }
    for p in probs {
        check_probability_vector(p)?;
    }
    let counts: Vec<usize> = probs.iter().map(Vec::len).collect();
    let effects = multi_indices(&counts)
        .iter()
        .map(|a| {
            let weight: f64 = a.iter().enumerate().map(|(s, &x)| probs[s][x]).product();
            HermitianOperator::identity(dim).scale(weight)
        })
        .collect();
    Ok(JointMeasurement::from_parts(dim, counts, effects))
}

#[derive(Debug, Clone)]
pub struct MaxMinEig {
    pub s_star: f64,
    pub joint: JointMeasurement,
}

/// Maximizes the smallest eigenvalue over all joint effects.
///
/// If some admissible face is rank-deficient, every joint has a singular
/// effect and `s* = 0` exactly; the joint returned then maximizes the
/// smallest eigenvalue within the face.
pub fn max_min_eig_joint(tuple: &MeasurementTuple) -> Result<MaxMinEig> {
    let feasible = find_joint(tuple)?.into_joint()?;
    let dim = tuple.dim();
    let faces = joint_faces(tuple);
    let reduced = faces.iter().any(|f| f.as_ref().is_none_or(|v| v.ncols() < dim));
    let mut program = JointProgram::new(tuple, &faces);
    program.add_marginal_equalities(tuple);
    let s = program.problem.add_variable("s", 1);
    for (a, face) in faces.iter().enumerate() {
        if let (Some(var), Some(v)) = (program.vars[a], face) {
            let r = v.ncols();
            program.problem.add_psd(AffineExpr::var(var, r).plus_scalar_times(s, -HermitianOperator::identity(r)));
        }
    }
    if reduced {
        // keep s bounded when every face is empty but one
        program.problem.add_psd(AffineExpr::new(1).plus(s, -1.0).plus_constant(&HermitianOperator::identity(1)));
    }
    program.problem.set_objective(Sense::Maximize, vec![(s, HermitianOperator::identity(1))]);
    let sol = conic::require_optimal(solve_sdp(&program.problem, &SolverSettings::default())?, "max_min_eig_joint")?;
    let joint = program.joint(&sol);
    let s_star = if reduced { 0.0 } else { sol.scalar(s) };
    match certify(&joint, tuple, "max_min_eig_joint") {
        Ok(()) => Ok(MaxMinEig { s_star, joint }),
        // on the boundary the optimum may overshoot into slightly negative
        // eigenvalues; any certified joint is then as interior as it gets
        Err(_) if s_star <= S_STAR_TOL => Ok(MaxMinEig { s_star, joint: feasible }),
        Err(e) => Err(e),
    }
}

/// Whether `T` lies on the boundary of the compatible set: no joint has all
/// effects full rank.
pub fn tuple_boundary_jm(tuple: &MeasurementTuple, tol: f64) -> Result<bool> {
    Ok(max_min_eig_joint(tuple)?.s_star <= tol)
}

/// Same as [`tuple_boundary_jm`] with the default threshold on `s*`.
pub fn tuple_boundary_jm_default(tuple: &MeasurementTuple) -> Result<bool> {
    tuple_boundary_jm(tuple, S_STAR_TOL)
}

/// For every multi-index, an isometry onto `∩_j supp A^(j)_{a_j}`, or `None`
/// when the intersection is trivial and the joint effect must vanish.
pub(crate) fn joint_faces(tuple: &MeasurementTuple) -> Vec<Option<CMatrix>> {
    let dim = tuple.dim();
    let supports: Vec<Vec<CMatrix>> =
        tuple.measurements().iter().map(|m| m.effects().iter().map(positive_support).collect()).collect();
    multi_indices(&tuple.outcome_counts())
        .iter()
        .map(|a| {
            let parts: Vec<&CMatrix> = a.iter().enumerate().map(|(j, &k)| &supports[j][k]).collect();
            if parts.iter().all(|v| v.ncols() == dim) {
                return Some(CMatrix::identity(dim, dim));
            }
            if parts.iter().any(|v| v.ncols() == 0) {
                return None;
            }
            // x lies in every support iff x† Σ_j (I − P_j) x = 0.
            let mut excess = CMatrix::zeros(dim, dim);
            for v in parts {
                excess += CMatrix::identity(dim, dim) - v * v.adjoint();
            }
            let excess = HermitianOperator::from_matrix(excess).expect("square");
            let (values, vectors) = excess.eigh();
            let keep: Vec<usize> = (0..dim).filter(|&k| values[k] <= 1e-8).collect();
            (!keep.is_empty()).then(|| CMatrix::from_fn(dim, keep.len(), |i, j| vectors[(i, keep[j])]))
        })
        .collect()
}

pub(crate) fn positive_support(e: &HermitianOperator) -> CMatrix {
    let (values, vectors) = e.eigh();
    let cutoff = EPS_RANK * values.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > cutoff).collect();
    CMatrix::from_fn(e.dim(), keep.len(), |i, j| vectors[(i, keep[j])])
}

/// One variable per joint effect, restricted to its face.
pub(crate) struct JointProgram {
    pub problem: SdpProblem,
    pub dim: usize,
    pub counts: Vec<usize>,
    /// `None` when the face is trivial and the effect is identically zero.
    pub vars: Vec<Option<VarId>>,
    /// Isometry of each face; `None` for the full space or a trivial face.
    pub maps: Vec<Option<CMatrix>>,
}

impl JointProgram {
    pub fn new(tuple: &MeasurementTuple, faces: &[Option<CMatrix>]) -> Self {
        let dim = tuple.dim();
        Self::with_shape(dim, tuple.outcome_counts(), faces)
    }

    pub fn with_shape(dim: usize, counts: Vec<usize>, faces: &[Option<CMatrix>]) -> Self {
        let mut problem = SdpProblem::new();
        let mut vars = Vec::with_capacity(faces.len());
        let mut maps = Vec::with_capacity(faces.len());
        for (flat, face) in faces.iter().enumerate() {
            let name = format!("M{:?}", unflatten(flat, &counts));
            match face {
                Some(v) if v.ncols() == dim => {
                    vars.push(Some(problem.add_variable(name, dim)));
                    maps.push(None);
                }
                Some(v) => {
                    vars.push(Some(problem.add_variable(name, v.ncols())));
                    maps.push(Some(v.clone()));
                }
                None => {
                    vars.push(None);
                    maps.push(None);
                }
            }
        }
        Self { problem, dim, counts, vars, maps }
    }

    /// The compressed variable itself (for PSD constraints).
    pub fn compressed_var(&self, a: usize) -> Option<AffineExpr> {
        let var = self.vars[a]?;
        let r = self.maps[a].as_ref().map_or(self.dim, |v| v.ncols());
        Some(AffineExpr::var(var, r))
    }

    /// Adds `M_a` (in the full space) to `expr`.
    pub fn add_effect(&self, expr: AffineExpr, a: usize) -> AffineExpr {
        match (self.vars[a], &self.maps[a]) {
            (None, _) => expr,
            (Some(var), None) => expr.plus(var, 1.0),
            (Some(var), Some(v)) => expr.plus_congruence(var, v.clone()),
        }
    }

    /// `Σ_{a: a_j = k} M_a`.
    pub fn marginal_expr(&self, j: usize, k: usize) -> AffineExpr {
        (0..self.vars.len())
            .filter(|&flat| unflatten(flat, &self.counts)[j] == k)
            .fold(AffineExpr::new(self.dim), |expr, a| self.add_effect(expr, a))
    }

    pub fn add_marginal_equalities(&mut self, tuple: &MeasurementTuple) {
        for (j, m) in tuple.measurements().iter().enumerate() {
            for (k, e) in m.effects().iter().enumerate() {
                let lhs = self.marginal_expr(j, k);
                self.problem.add_equality(lhs, e.clone());
            }
        }
    }

    /// Full-space value of effect `a`.
    pub fn effect_value(&self, sol: &SdpSolution, a: usize) -> HermitianOperator {
        match (self.vars[a], &self.maps[a]) {
            (None, _) => HermitianOperator::zeros(self.dim),
            (Some(var), None) => sol.value(var).clone(),
            (Some(var), Some(v)) => sol.value(var).expand(v),
        }
    }

    pub fn joint(&self, sol: &SdpSolution) -> JointMeasurement {
        let effects = (0..self.vars.len()).map(|a| self.effect_value(sol, a)).collect();
        JointMeasurement::from_parts(self.dim, self.counts.clone(), effects)
    }
}

/// Real matrix of the linear map `D ↦ (marginals of D)` in Hermitian-basis
/// coordinates; used by tests as an oracle.
#[cfg(test)]
pub(crate) fn marginal_map_matrix(dim: usize, counts: &[usize]) -> nalgebra::DMatrix<f64> {
    let basis = herm::hermitian_basis(dim);
    let d2 = basis.len();
    let total: usize = counts.iter().product();
    let rows: usize = counts.iter().sum::<usize>() * d2;
    let mut out = nalgebra::DMatrix::zeros(rows, total * d2);
    let mut row_offsets = Vec::new();
    let mut acc = 0;
    for &n in counts {
        row_offsets.push(acc);
        acc += n * d2;
    }
    for flat in 0..total {
        let a = unflatten(flat, counts);
        for k in 0..d2 {
            for (j, &x) in a.iter().enumerate() {
                out[(row_offsets[j] + x * d2 + k, flat * d2 + k)] = 1.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, FixtureName};
    use crate::povm::depolarize;
    use approx::assert_abs_diff_eq;
    use nalgebra::SVD;
    use proptest::prelude::*;

    fn id() -> HermitianOperator {
        HermitianOperator::identity(2)
    }

    fn dichotomic(h: &HermitianOperator) -> Povm {
        Povm::dichotomic(h).unwrap()
    }

    fn pair(a: &HermitianOperator, b: &HermitianOperator) -> MeasurementTuple {
        MeasurementTuple::new(vec![dichotomic(a), dichotomic(b)]).unwrap()
    }

    fn pauli_triple() -> MeasurementTuple {
        fixtures::tuple_fixture(&FixtureName::PauliTriple).unwrap()
    }

    fn example_2() -> MeasurementTuple {
        fixtures::tuple_fixture(&FixtureName::Example2).unwrap()
    }

    #[test]
    fn multi_index_order_is_lexicographic() {
        let all = multi_indices(&[2, 3]);
        assert_eq!(all[0], vec![0, 0]);
        assert_eq!(all[1], vec![0, 1]);
        assert_eq!(all[3], vec![1, 0]);
        for (flat, a) in all.iter().enumerate() {
            assert_eq!(flat_index(a, &[2, 3]), flat);
        }
    }

    #[test]
    fn marginal_examples() {
        let product = product_joint_trivial(&[vec![0.25, 0.75], vec![0.5, 0.5]], 2).unwrap();
        let m0 = marginal(&product, 0).unwrap();
        assert_eq!(m0, Povm::trivial(&[0.25, 0.75], 2).unwrap());
        let central = fixtures::joint_fixture(&FixtureName::CentralJointTstar).unwrap();
        let t = 1.0 / 3f64.sqrt();
        let expected = depolarize(&dichotomic(&HermitianOperator::pauli_x()), t).unwrap();
        assert!(marginal(&central, 0).unwrap().distance(&expected).unwrap() < 1e-15);
        assert!((herm::sum(marginal(&central, 2).unwrap().effects(), 2) - id()).frobenius_norm() < 1e-15);
        assert!(matches!(marginal(&central, 3), Err(Error::PartyOutOfRange { party: 3, parties: 3 })));
    }

    #[test]
    fn verify_joint_examples() {
        let t = 1.0 / 3f64.sqrt();
        let target = pauli_triple().depolarize(t).unwrap();
        for name in [FixtureName::SicJointPlus, FixtureName::SicJointMinus, FixtureName::CentralJointTstar] {
            let m = fixtures::joint_fixture(&name).unwrap();
            let check = verify_joint(&m, &target, 1e-12).unwrap();
            assert!(check.ok, "{name:?}: {}", check.residual);
        }
        let central = fixtures::joint_fixture(&FixtureName::CentralJointTstar).unwrap();
        assert!(!verify_joint(&central, &pauli_triple(), EPS_EQ).unwrap().ok);
        let product = product_joint_trivial(&[vec![0.5, 0.5], vec![1.0 / 3.0, 2.0 / 3.0]], 2).unwrap();
        let trivial = MeasurementTuple::new(vec![
            Povm::trivial(&[0.5, 0.5], 2).unwrap(),
            Povm::trivial(&[1.0 / 3.0, 2.0 / 3.0], 2).unwrap(),
        ])
        .unwrap();
        assert!(verify_joint(&product, &trivial, 1e-15).unwrap().ok);
        assert!(matches!(verify_joint(&product, &pauli_triple(), EPS_EQ), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn find_joint_incompatible_pair_has_certificate() {
        let xz = pair(&HermitianOperator::pauli_x(), &HermitianOperator::pauli_z());
        match find_joint(&xz).unwrap() {
            Compatibility::Incompatible { certificate_residual } => assert!(certificate_residual <= 1e-7),
            Compatibility::Compatible(m) => panic!("unexpected joint {m:?}"),
        }
    }

    #[test]
    fn find_joint_commuting_pair() {
        let z = HermitianOperator::pauli_z();
        let zz = pair(&z, &z);
        let m = find_joint(&zz).unwrap().into_joint().unwrap();
        assert!(verify_joint(&m, &zz, EPS_EQ).unwrap().ok);
        // the joint is forced: M_00 = (I+σz)/2, M_11 = (I−σz)/2, off-diagonal zero
        let up = (id() + &z).scale(0.5);
        assert!(m.effect(&[0, 0]).max_abs_diff(&up) < 1e-7);
        assert!(m.effect(&[0, 1]).frobenius_norm() < 1e-7);
        assert!(m.normalization_residual() < EPS_EQ);
    }

    #[test]
    fn find_joint_depolarized_pauli_triple() {
        let target = pauli_triple().depolarize(1.0 / 3f64.sqrt()).unwrap();
        let m = find_joint(&target).unwrap().into_joint().unwrap();
        assert!(verify_joint(&m, &target, EPS_EQ).unwrap().ok);
        assert!(m.normalization_residual() < EPS_EQ);
    }

    #[test]
    fn critical_visibility_pauli_triple() {
        let v = critical_visibility(&pauli_triple()).unwrap();
        assert_abs_diff_eq!(v.t_star, 1.0 / 3f64.sqrt(), epsilon = 1e-5);
        assert!(verify_joint(&v.joint, &pauli_triple().depolarize(v.t_star).unwrap(), EPS_EQ).unwrap().ok);
    }

    #[test]
    fn critical_visibility_busch_pair() {
        let (x, z) = (HermitianOperator::pauli_x(), HermitianOperator::pauli_z());
        let v = critical_visibility(&pair(&x, &z)).unwrap();
        assert_abs_diff_eq!(v.t_star, 1.0 / 2f64.sqrt(), epsilon = 1e-5);
        // independent certificate: the explicit joint at 1/√2
        let t = 1.0 / 2f64.sqrt();
        let effects: Vec<_> = multi_indices(&[2, 2])
            .iter()
            .map(|a| {
                let (sa, sb) = (1.0 - 2.0 * a[0] as f64, 1.0 - 2.0 * a[1] as f64);
                (id() + (x.scale(sa) + z.scale(sb)).scale(t)).scale(0.25)
            })
            .collect();
        let explicit = JointMeasurement::new(vec![2, 2], effects).unwrap();
        assert!(explicit.min_eigenvalue() > -1e-15);
        assert!(verify_joint(&explicit, &pair(&x, &z).depolarize(t).unwrap(), 1e-15).unwrap().ok);
        let z2 = critical_visibility(&pair(&z, &z)).unwrap();
        assert_abs_diff_eq!(z2.t_star, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn bisection_finds_busch_visibility() {
        let (x, z) = (HermitianOperator::pauli_x(), HermitianOperator::pauli_z());
        let t = pair(&x, &z);
        let v = visibility_bisection(1.0, "test", &|s| t.depolarize(s)).unwrap();
        // a certified lower bound; steps too close to t* stay undecided
        assert!(v.t_star <= 1.0 / 2f64.sqrt() + 1e-9 && v.t_star > 1.0 / 2f64.sqrt() - 1e-4, "{}", v.t_star);
        assert!(verify_joint(&v.joint, &t.depolarize(v.t_star).unwrap(), EPS_EQ).unwrap().ok);
    }

    // the direct program stalls on this qutrit pair; the rescaled one does not
    #[test]
    fn visibility_survives_a_stalled_program() {
        let t = fixtures::random_tuple(3, 2, 2, 1.0, 189).unwrap();
        let v = critical_visibility(&t).unwrap();
        let rescaled = critical_visibility_capped(&t.depolarize(0.8).unwrap(), 2.0).unwrap().t_star * 0.8;
        assert_abs_diff_eq!(v.t_star, rescaled, epsilon = 1e-6);
        assert!(verify_joint(&v.joint, &t.depolarize(v.t_star).unwrap(), EPS_EQ).unwrap().ok);
    }

    #[test]
    fn product_joint_examples() {
        let m = product_joint_trivial(&[vec![1.0, 0.0], vec![0.5, 0.5]], 2).unwrap();
        let half = id().scale(0.5);
        assert_eq!(m.effects(), &[half.clone(), half, HermitianOperator::zeros(2), HermitianOperator::zeros(2)]);
        let m = product_joint_trivial(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2).unwrap();
        assert!(m.effects().iter().all(|e| *e == id().scale(0.25)));
        let m = product_joint_trivial(&[vec![1.0, 0.0], vec![1.0, 0.0]], 2).unwrap();
        assert_eq!(m.effect(&[0, 0]), &id());
        assert_eq!(m.effects().iter().filter(|e| e.frobenius_norm() > 0.0).count(), 1);
        assert!(product_joint_trivial(&[vec![0.5, 0.6]], 2).is_err());
        assert!(product_joint_trivial(&[vec![-0.5, 1.5]], 2).is_err());
    }

    #[test]
    fn max_min_eig_examples() {
        let (x, z) = (HermitianOperator::pauli_x(), HermitianOperator::pauli_z());
        let noisy = pair(&x, &z).depolarize(0.5).unwrap();
        let r = max_min_eig_joint(&noisy).unwrap();
        assert!(r.s_star >= 0.01, "{}", r.s_star);
        assert!(!tuple_boundary_jm(&noisy, S_STAR_TOL).unwrap());

        let target = pauli_triple().depolarize(1.0 / 3f64.sqrt()).unwrap();
        let r = max_min_eig_joint(&target).unwrap();
        assert_abs_diff_eq!(r.s_star, 0.0, epsilon = 1e-6);
        assert!(tuple_boundary_jm(&target, S_STAR_TOL).unwrap());

        let r = max_min_eig_joint(&example_2()).unwrap();
        assert_abs_diff_eq!(r.s_star, 0.0, epsilon = 1e-9);
        assert!(tuple_boundary_jm(&example_2(), S_STAR_TOL).unwrap());
        assert!(matches!(max_min_eig_joint(&pair(&x, &z)), Err(Error::Incompatible { .. })));
    }

    #[test]
    fn max_min_eig_noisy_pair_oracle() {
        // Mixing the explicit joint at t = 1/√2 with the uniform product joint
        // yields a joint for Φ_{1/2}; its smallest eigenvalue bounds s* from below.
        let (x, z) = (HermitianOperator::pauli_x(), HermitianOperator::pauli_z());
        let t = 1.0 / 2f64.sqrt();
        let effects = multi_indices(&[2, 2])
            .iter()
            .map(|a| {
                let (sa, sb) = (1.0 - 2.0 * a[0] as f64, 1.0 - 2.0 * a[1] as f64);
                (id() + (x.scale(sa) + z.scale(sb)).scale(t)).scale(0.25)
            })
            .collect();
        let sharp = JointMeasurement::new(vec![2, 2], effects).unwrap();
        let uniform = product_joint_trivial(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2).unwrap();
        let w = 1.0 - 0.5 / t;
        let mixed = sharp.mix(&uniform, w).unwrap();
        let noisy = pair(&x, &z).depolarize(0.5).unwrap();
        assert!(verify_joint(&mixed, &noisy, 1e-14).unwrap().ok);
        let lower = mixed.min_eigenvalue();
        assert!(lower >= 0.01);
        assert!(max_min_eig_joint(&noisy).unwrap().s_star >= lower - 1e-7);
    }

    #[test]
    fn joint_faces_follow_supports() {
        let faces = joint_faces(&example_2());
        assert!(faces[0].as_ref().unwrap().ncols() == 2);
        assert!(faces[2].is_none() && faces[3].is_none());
        let z = HermitianOperator::pauli_z();
        let x = HermitianOperator::pauli_x();
        // rank-one effects along different axes intersect trivially
        let faces = joint_faces(&pair(&z, &x));
        assert!(faces.iter().all(Option::is_none));
        let faces = joint_faces(&pair(&z, &z));
        assert_eq!(faces.iter().map(|f| f.as_ref().map_or(0, |v| v.ncols())).collect::<Vec<_>>(), vec![1, 0, 0, 1]);
    }

    #[test]
    fn json_round_trip() {
        let m = fixtures::joint_fixture(&FixtureName::SicJointPlus).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: JointMeasurement = serde_json::from_str(&s).unwrap();
        assert!(back.distance(&m).unwrap() < 1e-15);
        let bad = r#"{"dim": 2, "outcomes": [2, 2], "effects": []}"#;
        assert!(serde_json::from_str::<JointMeasurement>(bad).is_err());
    }

    #[test]
    fn marginal_map_kernel_dimension() {
        // zero-marginal perturbations of a 2x2-outcome qubit joint: (n1−1)(n2−1)·d² = 4
        let l = marginal_map_matrix(2, &[2, 2]);
        let rank = SVD::new(l, false, false).rank(1e-10);
        assert_eq!(16 - rank, 4);
    }

    fn arb_compatible() -> impl Strategy<Value = MeasurementTuple> {
        (any::<u64>(), 2usize..4).prop_map(|(seed, n)| fixtures::random_tuple(2, n, 2, 0.3, seed).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn returned_joints_are_normalized(t in arb_compatible()) {
            let m = find_joint(&t).unwrap().into_joint().unwrap();
            prop_assert!(m.normalization_residual() <= EPS_EQ);
            prop_assert!(verify_joint(&m, &t, EPS_EQ).unwrap().ok);
        }

        #[test]
        fn product_marginals_are_exact(p in 0.0..=1.0f64, q in 0.0..=1.0f64) {
            let probs = vec![vec![p, 1.0 - p], vec![q, 1.0 - q]];
            let m = product_joint_trivial(&probs, 2).unwrap();
            for (j, pj) in probs.iter().enumerate() {
                let want = Povm::trivial(pj, 2).unwrap();
                prop_assert!(marginal(&m, j).unwrap().distance(&want).unwrap() <= 1e-15);
            }
        }

        #[test]
        fn depolarizing_keeps_compatibility(seed in any::<u64>(), t in 0.0..=1.0f64) {
            let tuple = fixtures::random_tuple(2, 2, 2, 0.4, seed).unwrap();
            let m = find_joint(&tuple).unwrap().into_joint().unwrap();
            let noisy = tuple.depolarize(t).unwrap();
            // oracle: mix with the product joint of the trivial counterparts
            let probs: Vec<Vec<f64>> = tuple.measurements().iter().map(|p| p.effects().iter().map(|e| e.trace() / 2.0).collect()).collect();
            let product = product_joint_trivial(&probs, 2).unwrap();
            prop_assert!(verify_joint(&m.mix(&product, 1.0 - t).unwrap(), &noisy, 1e-9).unwrap().ok);
            prop_assert!(find_joint(&noisy).unwrap().joint().is_some());
        }

        #[test]
        fn visibility_is_sharp(seed in any::<u64>()) {
            let tuple = fixtures::random_tuple(2, 2, 2, 1.0, seed).unwrap();
            let v = critical_visibility(&tuple).unwrap();
            prop_assert!(find_joint(&tuple.depolarize((v.t_star - 0.01).max(0.0)).unwrap()).unwrap().joint().is_some());
            if v.t_star < 1.0 - 1e-6 {
                let above = tuple.depolarize((v.t_star + 0.01).min(1.0)).unwrap();
                prop_assert!(find_joint(&above).unwrap().joint().is_none());
            }
        }
    }
}
