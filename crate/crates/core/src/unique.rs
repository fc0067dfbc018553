//! Uniqueness of the joint measurement.
//!
//! A joint `M` is unique iff no nonzero marginal-preserving perturbation `D`
//! keeps `M + D` positive. The sweep maximizes `±tr(D_a λ)` over all such `D`
//! for every multi-index `a` and every Hermitian basis element `λ`; a strictly
//! positive optimum is a witness, and all optima at zero prove uniqueness.

use rayon::prelude::*;
use serde::Serialize;

use crate::conic::{require_optimal, solve_sdp, AffineExpr, Sense, SolverSettings};
use crate::error::{Error, Result};
use crate::herm::{hermitian_basis, CMatrix, HermitianOperator};
use crate::joint::{
    find_joint, joint_faces, marginal_sums, marginals, max_min_eig_joint, unflatten, verify_joint, JointMeasurement,
    JointProgram, MarginalPerturbation,
};
use crate::povm::{is_extremal_povm, symmetric_directions, validate_povm, MeasurementTuple};
use crate::{EPS_EQ, EPS_UNIQUE};

/// Cap on the number of independent directions collected by
/// [`joint_set_affine_dimension`].
pub const MAX_DIRECTIONS: usize = 1000;

/// Support cutoff (relative) used when reading supports off solver output.
const SOLVER_SUPPORT_TOL: f64 = 1e-7;

/// Eigenvalue cutoffs tried, in order, when a sweep around a flat joint set
/// stalls: each restricts every effect to the support of the base joint.
const FACE_LADDER: [f64; 3] = [1e-7, 1e-6, 1e-5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Unique,
    NonUnique,
}

#[derive(Debug, Clone)]
pub struct UniquenessVerdict {
    pub verdict: Verdict,
    pub joint: JointMeasurement,
    pub witness: Option<MarginalPerturbation>,
    pub second_joint: Option<JointMeasurement>,
    /// Largest sweep objective observed (the witness objective when one is found).
    pub max_objective_seen: f64,
}

impl UniquenessVerdict {
    pub fn is_unique(&self) -> bool {
        self.verdict == Verdict::Unique
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SweepOptions {
    pub eps_unique: f64,
    pub parallel: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { eps_unique: EPS_UNIQUE, parallel: true }
    }
}

/// One sweep entry: multi-index (flat), basis element index, sign.
#[derive(Debug, Clone, Copy)]
struct Probe {
    a: usize,
    basis: usize,
    sign: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SweepResult {
    pub witness: Option<(MarginalPerturbation, f64)>,
    pub max_objective: f64,
}

/// Runs the sweep around `base` with `D` restricted to be orthogonal
/// (`Σ_a tr(u_a D_a) = 0`) to every direction in `orthogonal`.
pub(crate) fn sweep(
    base: &JointMeasurement,
    tuple: &MeasurementTuple,
    orthogonal: &[MarginalPerturbation],
    options: &SweepOptions,
) -> Result<SweepResult> {
    let faces = joint_faces(tuple);
    let mut outcome = sweep_on(base, &faces, orthogonal, options);
    for tol in FACE_LADDER {
        if !matches!(outcome, Err(Error::Solver { .. })) {
            break;
        }
        outcome = sweep_on(base, &support_faces(base, &faces, tol), orthogonal, options);
    }
    outcome
}

/// Restricts each face to the span of the eigenvectors of the (compressed)
/// base effect with eigenvalue above `tol`.
fn support_faces(base: &JointMeasurement, faces: &[Option<CMatrix>], tol: f64) -> Vec<Option<CMatrix>> {
    faces
        .iter()
        .zip(base.effects())
        .map(|(face, m)| {
            let v = face.as_ref()?;
            let (values, vectors) = m.compress(v).eigh();
            let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k] > tol).collect();
            (!keep.is_empty()).then(|| v * CMatrix::from_fn(v.ncols(), keep.len(), |i, j| vectors[(i, keep[j])]))
        })
        .collect()
}

/// Dimension of the space of zero-marginal perturbations supported on `faces`.
fn perturbation_space_dimension(dim: usize, counts: &[usize], faces: &[Option<CMatrix>]) -> usize {
    let full = hermitian_basis(dim);
    let rows = counts.iter().sum::<usize>() * full.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (a, face) in faces.iter().enumerate() {
        let Some(v) = face else { continue };
        let idx = unflatten(a, counts);
        for mu in hermitian_basis(v.ncols()).elements() {
            let coords = full.coordinates(&mu.expand(v));
            let mut col = vec![0.0; rows];
            let mut offset = 0;
            for (j, &n) in counts.iter().enumerate() {
                let start = (offset + idx[j]) * full.len();
                col[start..start + full.len()].copy_from_slice(&coords);
                offset += n;
            }
            columns.push(col);
        }
    }
    if columns.is_empty() {
        return 0;
    }
    let map = nalgebra::DMatrix::from_fn(rows, columns.len(), |i, k| columns[k][i]);
    columns.len() - map.svd(false, false).rank(1e-9)
}

fn sweep_on(
    base: &JointMeasurement,
    faces: &[Option<CMatrix>],
    orthogonal: &[MarginalPerturbation],
    options: &SweepOptions,
) -> Result<SweepResult> {
    // the orthogonality constraints would pin D = 0 and leave the solver no interior
    if orthogonal.len() >= perturbation_space_dimension(base.dim(), base.outcomes(), faces) {
        return Ok(SweepResult { witness: None, max_objective: 0.0 });
    }
    let dim = base.dim();
    let basis = hermitian_basis(dim);
    let probes: Vec<Probe> = (0..faces.len())
        .filter(|&a| faces[a].is_some())
        .flat_map(|a| (0..basis.len()).flat_map(move |k| [1.0, -1.0].map(|sign| Probe { a, basis: k, sign })))
        .collect();
    let run = |p: &Probe| -> Result<(f64, MarginalPerturbation)> {
        solve_probe(base, faces, orthogonal, &basis.elements()[p.basis], p).map_err(|e| match e {
            Error::Solver { detail, .. } => Error::solver(
                format!(
                    "uniqueness sweep at multi-index {:?}, basis element {}, sign {:+}",
                    unflatten(p.a, base.outcomes()),
                    p.basis,
                    p.sign
                ),
                detail,
            ),
            other => other,
        })
    };
    let hit = |r: Result<(f64, MarginalPerturbation)>| match r {
        Ok((obj, d)) if obj > options.eps_unique => Some(Ok((obj, d))),
        Ok(_) => None,
        Err(e) => Some(Err(e)),
    };
    let max_seen = std::sync::Mutex::new(0.0_f64);
    let record = |r: Result<(f64, MarginalPerturbation)>| {
        if let Ok((obj, _)) = &r {
            let mut m = max_seen.lock().expect("not poisoned");
            *m = m.max(*obj);
        }
        hit(r)
    };
    let found = if options.parallel {
        probes.par_iter().map(|p| record(run(p))).find_map_first(|x| x)
    } else {
        probes.iter().map(|p| record(run(p))).find_map(|x| x)
    };
    let max_objective = *max_seen.lock().expect("not poisoned");
    match found {
        Some(Ok((obj, d))) => Ok(SweepResult { witness: Some((d, obj)), max_objective: obj }),
        Some(Err(e)) => Err(e),
        None => Ok(SweepResult { witness: None, max_objective }),
    }
}

/// `max sign·tr(D_a λ)` s.t. `M + D ⪰ 0`, zero marginals, orthogonality.
fn solve_probe(
    base: &JointMeasurement,
    faces: &[Option<CMatrix>],
    orthogonal: &[MarginalPerturbation],
    lambda: &HermitianOperator,
    probe: &Probe,
) -> Result<(f64, MarginalPerturbation)> {
    let dim = base.dim();
    let counts = base.outcomes().to_vec();
    let mut program = JointProgram::with_shape(dim, counts.clone(), faces);
    for (j, &n) in counts.iter().enumerate() {
        for k in 0..n {
            let lhs = program.marginal_expr(j, k);
            program.problem.add_equality(lhs, HermitianOperator::zeros(dim));
        }
    }
    for u in orthogonal {
        let mut expr = AffineExpr::new(1);
        for a in 0..faces.len() {
            if let Some(var) = program.vars[a] {
                expr = expr.plus_pairing(var, compress(&u.blocks()[a], &program.maps[a]));
            }
        }
        program.problem.add_equality(expr, HermitianOperator::zeros(1));
    }
    for a in 0..faces.len() {
        if let Some(expr) = program.compressed_var(a) {
            let m = compress(&base.effects()[a], &program.maps[a]);
            program.problem.add_psd(expr.plus_constant(&m));
        }
    }
    let var = program.vars[probe.a].expect("probes skip empty faces");
    program
        .problem
        .set_objective(Sense::Maximize, vec![(var, compress(lambda, &program.maps[probe.a]).scale(probe.sign))]);
    let sol = require_optimal(solve_sdp(&program.problem, &SolverSettings::default())?, "uniqueness sweep")?;
    let blocks = (0..faces.len()).map(|a| program.effect_value(&sol, a)).collect();
    Ok((sol.objective_value, MarginalPerturbation::from_parts(dim, counts, blocks)))
}

fn compress(h: &HermitianOperator, map: &Option<CMatrix>) -> HermitianOperator {
    match map {
        Some(v) => h.compress(v),
        None => h.clone(),
    }
}

/// Sweeps around `joint` for a marginal-preserving perturbation.
pub fn find_marginal_perturbation(joint: &JointMeasurement) -> Result<Option<MarginalPerturbation>> {
    find_marginal_perturbation_with(joint, &SweepOptions::default())
}

pub fn find_marginal_perturbation_with(
    joint: &JointMeasurement,
    options: &SweepOptions,
) -> Result<Option<MarginalPerturbation>> {
    let tuple = marginals(joint)?;
    Ok(sweep(joint, &tuple, &[], options)?.witness.map(|(d, _)| d))
}

/// Null-space shortcut: blocks `D_a` inside `supp M_a` with vanishing
/// marginals give `M ± D` both joints. `Some` certifies non-uniqueness;
/// `None` proves nothing.
pub fn symmetric_perturbation_precheck(joint: &JointMeasurement) -> Option<MarginalPerturbation> {
    let counts = joint.outcomes().to_vec();
    let total = joint.len();
    let mut groups = Vec::new();
    for (j, &n) in counts.iter().enumerate() {
        for k in 0..n {
            groups.push((0..total).filter(|&a| unflatten(a, &counts)[j] == k).collect::<Vec<_>>());
        }
    }
    let found = symmetric_directions(joint.effects(), &groups, SOLVER_SUPPORT_TOL);
    let blocks = found.witness?;
    let d = MarginalPerturbation::from_parts(joint.dim(), counts, blocks);
    // Accept only witnesses that survive validation at the working tolerances.
    let valid = d.frobenius_norm() >= EPS_UNIQUE
        && d.marginal_residual() <= EPS_EQ
        && d.apply(joint).is_ok()
        && d.scale(-1.0).apply(joint).is_ok();
    valid.then_some(d)
}

/// Decides whether `T` has exactly one joint measurement.
pub fn joint_uniqueness(tuple: &MeasurementTuple) -> Result<UniquenessVerdict> {
    joint_uniqueness_with(tuple, &SweepOptions::default())
}

pub fn joint_uniqueness_with(tuple: &MeasurementTuple, options: &SweepOptions) -> Result<UniquenessVerdict> {
    find_joint(tuple)?.into_joint()?;
    let base = max_min_eig_joint(tuple)?.joint;
    if let Some(d) = symmetric_perturbation_precheck(&base) {
        return non_unique(tuple, base, d, f64::NAN);
    }
    let result = sweep(&base, tuple, &[], options)?;
    match result.witness {
        Some((d, obj)) => non_unique(tuple, base, d, obj),
        None => Ok(UniquenessVerdict {
            verdict: Verdict::Unique,
            joint: base,
            witness: None,
            second_joint: None,
            max_objective_seen: result.max_objective,
        }),
    }
}

fn non_unique(
    tuple: &MeasurementTuple,
    base: JointMeasurement,
    d: MarginalPerturbation,
    obj: f64,
) -> Result<UniquenessVerdict> {
    let second = JointMeasurement::from_parts(
        base.dim(),
        base.outcomes().to_vec(),
        base.effects().iter().zip(d.blocks()).map(|(m, b)| m + b).collect(),
    );
    let check = verify_joint(&second, tuple, EPS_EQ)?;
    if !check.ok {
        return Err(Error::NotAJoint { which: "perturbed joint".into(), residual: check.residual });
    }
    let objective = if obj.is_nan() { d.frobenius_norm() } else { obj };
    Ok(UniquenessVerdict {
        verdict: Verdict::NonUnique,
        joint: base,
        witness: Some(d),
        second_joint: Some(second),
        max_objective_seen: objective,
    })
}

/// Dimension of the affine hull of the set of joints for `T`.
pub fn joint_set_affine_dimension(tuple: &MeasurementTuple) -> Result<usize> {
    Ok(joint_set_directions(tuple, &SweepOptions::default())?.len())
}

/// Orthonormal directions spanning the affine hull of the joint set.
pub fn joint_set_directions(tuple: &MeasurementTuple, options: &SweepOptions) -> Result<Vec<MarginalPerturbation>> {
    find_joint(tuple)?.into_joint()?;
    let mut base = max_min_eig_joint(tuple)?.joint;
    let mut directions: Vec<MarginalPerturbation> = Vec::new();
    loop {
        let Some((d, _)) = sweep(&base, tuple, &directions, options)?.witness else {
            return Ok(directions);
        };
        if directions.len() == MAX_DIRECTIONS {
            return Err(Error::IterationCap(MAX_DIRECTIONS));
        }
        let mut u = d;
        for _ in 0..2 {
            for v in &directions {
                u = u.minus_scaled(v, u.inner(v));
            }
        }
        let u = u.normalized()?;
        let up = max_step(&base, &u);
        let down = max_step(&base, &u.scale(-1.0));
        base = JointMeasurement::from_parts(
            base.dim(),
            base.outcomes().to_vec(),
            base.effects().iter().zip(u.blocks()).map(|(m, b)| m + &b.scale(0.5 * (up - down))).collect(),
        );
        directions.push(u);
    }
}

/// Largest `α ≥ 0` with `M + α u ⪰ 0`, by bisection on the smallest eigenvalue.
fn max_step(base: &JointMeasurement, u: &MarginalPerturbation) -> f64 {
    let floor = base.min_eigenvalue().min(0.0);
    let ok = |alpha: f64| {
        base.effects().iter().zip(u.blocks()).all(|(m, b)| (m + &b.scale(alpha)).min_eigenvalue() >= floor - 1e-12)
    };
    let mut hi = 1.0;
    while ok(hi) && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Extremal in the compatible set iff the joint is unique and extremal as a
/// POVM over all multi-indices.
pub fn tuple_extremal_jm(tuple: &MeasurementTuple) -> Result<bool> {
    let verdict = joint_uniqueness(tuple)?;
    if !verdict.is_unique() {
        return Ok(false);
    }
    let povm = verdict.joint.as_povm()?;
    Ok(is_extremal_povm(&povm, SOLVER_SUPPORT_TOL).extremal)
}

/// Searches for compatible `B ≠ C` with `T = ½(B + C)`, i.e. a witness that
/// `T` is not extremal in the compatible set. Variables are a joint `M` for
/// `T` and a joint `N` for `B` with `0 ⪯ N ⪯ 2M`; the sweep maximizes
/// `±tr(B^(j)_i λ)` against its value at `T`. `None` means extremal.
pub fn find_compatible_decomposition(tuple: &MeasurementTuple) -> Result<Option<(MeasurementTuple, MeasurementTuple)>> {
    find_compatible_decomposition_with(tuple, &SweepOptions::default())
}

pub fn find_compatible_decomposition_with(
    tuple: &MeasurementTuple,
    options: &SweepOptions,
) -> Result<Option<(MeasurementTuple, MeasurementTuple)>> {
    find_joint(tuple)?.into_joint()?;
    let base = max_min_eig_joint(tuple)?.joint;
    let faces = joint_faces(tuple);
    let mut outcome = split_search(&base, tuple, &faces, options);
    for tol in FACE_LADDER {
        if !matches!(outcome, Err(Error::Solver { .. })) {
            break;
        }
        outcome = split_search(&base, tuple, &support_faces(&base, &faces, tol), options);
    }
    outcome
}

fn split_search(
    base: &JointMeasurement,
    tuple: &MeasurementTuple,
    faces: &[Option<CMatrix>],
    options: &SweepOptions,
) -> Result<Option<(MeasurementTuple, MeasurementTuple)>> {
    let basis = hermitian_basis(tuple.dim());
    let counts = tuple.outcome_counts();
    let probes: Vec<(usize, usize, usize, f64)> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| {
            let len = basis.len();
            (0..n).flat_map(move |i| (0..len).flat_map(move |k| [1.0, -1.0].map(|sign| (j, i, k, sign))))
        })
        .collect();
    let run = |&(j, i, k, sign): &(usize, usize, usize, f64)| -> Result<Option<(MeasurementTuple, MeasurementTuple)>> {
        let lambda = &basis.elements()[k];
        let (value, b, c) = solve_split_probe(base, faces, j, i, lambda, sign).map_err(|e| match e {
            Error::Solver { detail, .. } => Error::solver(
                format!("compatible-set sweep at party {j}, outcome {i}, basis element {k}, sign {sign:+}"),
                detail,
            ),
            other => other,
        })?;
        Ok((value > options.eps_unique).then_some((b, c)))
    };
    let pick = |r: Result<Option<(MeasurementTuple, MeasurementTuple)>>| r.transpose();
    let found = if options.parallel {
        probes.par_iter().map(run).find_map_first(pick)
    } else {
        probes.iter().map(run).find_map(pick)
    };
    found.transpose()
}

/// `max sign·Σ_{a_j = i} tr(E_a λ)` over `M = base + D` (zero marginals) and
/// `−M ⪯ E ⪯ M`, `Σ_a E_a = 0`; the halves are the marginals of `M ± E`.
fn solve_split_probe(
    base: &JointMeasurement,
    faces: &[Option<CMatrix>],
    j: usize,
    i: usize,
    lambda: &HermitianOperator,
    sign: f64,
) -> Result<(f64, MeasurementTuple, MeasurementTuple)> {
    let dim = base.dim();
    let counts = base.outcomes().to_vec();
    let mut program = JointProgram::with_shape(dim, counts.clone(), faces);
    for (jj, &n) in counts.iter().enumerate() {
        for k in 0..n {
            let lhs = program.marginal_expr(jj, k);
            program.problem.add_equality(lhs, HermitianOperator::zeros(dim));
        }
    }
    let mut e_vars = Vec::with_capacity(faces.len());
    let mut total = AffineExpr::new(dim);
    for a in 0..faces.len() {
        let Some(d) = program.compressed_var(a) else {
            e_vars.push(None);
            continue;
        };
        let r = d.dim();
        let m = compress(&base.effects()[a], &program.maps[a]);
        let e = program.problem.add_variable(format!("E{:?}", unflatten(a, &counts)), r);
        program.problem.add_psd(d.clone().plus(e, 1.0).plus_constant(&m));
        program.problem.add_psd(d.plus(e, -1.0).plus_constant(&m));
        total = match &program.maps[a] {
            None => total.plus(e, 1.0),
            Some(v) => total.plus_congruence(e, v.clone()),
        };
        e_vars.push(Some(e));
    }
    program.problem.add_equality(total, HermitianOperator::zeros(dim));
    let objective = (0..faces.len())
        .filter(|&a| unflatten(a, &counts)[j] == i)
        .filter_map(|a| e_vars[a].map(|v| (v, compress(lambda, &program.maps[a]).scale(sign))))
        .collect();
    program.problem.set_objective(Sense::Maximize, objective);
    let sol = require_optimal(solve_sdp(&program.problem, &SolverSettings::default())?, "compatible-set sweep")?;
    let expand = |a: usize| match (e_vars[a], &program.maps[a]) {
        (None, _) => HermitianOperator::zeros(dim),
        (Some(v), None) => sol.value(v).clone(),
        (Some(v), Some(map)) => sol.value(v).expand(map),
    };
    let m: Vec<HermitianOperator> =
        (0..faces.len()).map(|a| &base.effects()[a] + &program.effect_value(&sol, a)).collect();
    let e: Vec<HermitianOperator> = (0..faces.len()).map(expand).collect();
    let plus: Vec<HermitianOperator> = m.iter().zip(&e).map(|(x, y)| x + y).collect();
    let minus: Vec<HermitianOperator> = m.iter().zip(&e).map(|(x, y)| x - y).collect();
    // solver output: validated at the solver's own accuracy
    let tuple_of = |effects: &[HermitianOperator]| -> Result<MeasurementTuple> {
        let povms = (0..counts.len())
            .map(|jj| validate_povm(marginal_sums(effects, &counts, dim, jj), SOLVER_SUPPORT_TOL))
            .collect::<Result<Vec<_>>>()?;
        MeasurementTuple::new(povms)
    };
    Ok((sol.objective_value, tuple_of(&plus)?, tuple_of(&minus)?))
}
