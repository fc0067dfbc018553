//! Small semidefinite programs over Hermitian matrix variables.
//!
//! A problem is a set of named Hermitian variables, affine equality
//! constraints, affine PSD constraints and a linear objective. Variables are
//! parameterized by their coordinates in the orthonormal [`hermitian_basis`],
//! complex PSD constraints are imposed on the real embedding
//! `[[Re H, −Im H], [Im H, Re H]]`, and the resulting real conic program is
//! handed to Clarabel. Every status the backend reports is re-checked here:
//! optimal points against the equality/PSD residual targets, infeasibility
//! against an explicit dual ray.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::herm::{hermitian_basis, inner_unchecked, CMatrix, HermitianBasis, HermitianOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub dim: usize,
}

/// A linear map from one variable into the output space of an expression.
#[derive(Debug, Clone)]
pub enum LinearTerm {
    /// `coef · X`; input and output dimensions agree.
    Scaled { var: VarId, coef: f64 },
    /// `x · op` for a 1×1 (scalar) variable `x`.
    ScalarTimes { var: VarId, op: HermitianOperator },
    /// `tr(op · X)` as a 1×1 output.
    Pairing { var: VarId, op: HermitianOperator },
    /// `V X V†`, embedding an `r×r` variable into `d×d` through a `d×r` map.
    Congruence { var: VarId, map: CMatrix },
}

impl LinearTerm {
    fn var(&self) -> VarId {
        match self {
            LinearTerm::Scaled { var, .. }
            | LinearTerm::ScalarTimes { var, .. }
            | LinearTerm::Pairing { var, .. }
            | LinearTerm::Congruence { var, .. } => *var,
        }
    }

    fn apply(&self, x: &HermitianOperator) -> HermitianOperator {
        match self {
            LinearTerm::Scaled { coef, .. } => x.scale(*coef),
            LinearTerm::ScalarTimes { op, .. } => op.scale(x.trace()),
            LinearTerm::Pairing { op, .. } => HermitianOperator::identity(1).scale(inner_unchecked(op, x)),
            LinearTerm::Congruence { map, .. } => x.expand(map),
        }
    }
}

/// `constant + Σ terms`, a Hermitian operator of dimension `dim`.
#[derive(Debug, Clone)]
pub struct AffineExpr {
    dim: usize,
    terms: Vec<LinearTerm>,
    constant: HermitianOperator,
}

impl AffineExpr {
    pub fn new(dim: usize) -> Self {
        Self { dim, terms: Vec::new(), constant: HermitianOperator::zeros(dim) }
    }

    pub fn var(var: VarId, dim: usize) -> Self {
        Self::new(dim).plus(var, 1.0)
    }

    pub fn plus(mut self, var: VarId, coef: f64) -> Self {
        self.terms.push(LinearTerm::Scaled { var, coef });
        self
    }

    pub fn plus_scalar_times(mut self, var: VarId, op: HermitianOperator) -> Self {
        self.terms.push(LinearTerm::ScalarTimes { var, op });
        self
    }

    pub fn plus_pairing(mut self, var: VarId, op: HermitianOperator) -> Self {
        self.terms.push(LinearTerm::Pairing { var, op });
        self
    }

    pub fn plus_congruence(mut self, var: VarId, map: CMatrix) -> Self {
        self.terms.push(LinearTerm::Congruence { var, map });
        self
    }

    pub fn plus_constant(mut self, op: &HermitianOperator) -> Self {
        self.constant += op;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[LinearTerm] {
        &self.terms
    }

    pub fn constant(&self) -> &HermitianOperator {
        &self.constant
    }

    /// Evaluates the expression at the given variable values.
    pub fn eval(&self, values: &[HermitianOperator]) -> HermitianOperator {
        let mut acc = self.constant.clone();
        for t in &self.terms {
            acc += &t.apply(&values[t.var().0]);
        }
        acc
    }

    fn scaled(&self, factor: f64) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| match t {
                LinearTerm::Scaled { var, coef } => LinearTerm::Scaled { var: *var, coef: coef * factor },
                LinearTerm::ScalarTimes { var, op } => LinearTerm::ScalarTimes { var: *var, op: op.scale(factor) },
                LinearTerm::Pairing { var, op } => LinearTerm::Pairing { var: *var, op: op.scale(factor) },
                LinearTerm::Congruence { var, map } => {
                    LinearTerm::Congruence { var: *var, map: map.map(|z| z * factor.sqrt()) }
                }
            })
            .collect();
        Self { dim: self.dim, terms, constant: self.constant.scale(factor) }
    }
}

/// `lhs = rhs`.
#[derive(Debug, Clone)]
pub struct Equality {
    pub lhs: AffineExpr,
    pub rhs: HermitianOperator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

/// `Σ tr(op · X_var)`.
#[derive(Debug, Clone)]
pub struct Objective {
    pub sense: Sense,
    pub terms: Vec<(VarId, HermitianOperator)>,
}

impl Objective {
    pub fn feasibility() -> Self {
        Self { sense: Sense::Minimize, terms: Vec::new() }
    }

    pub fn eval(&self, values: &[HermitianOperator]) -> f64 {
        self.terms.iter().map(|(v, op)| inner_unchecked(op, &values[v.0])).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    variables: Vec<Variable>,
    equalities: Vec<Equality>,
    psd: Vec<AffineExpr>,
    objective: Objective,
}

impl Default for SdpProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl SdpProblem {
    pub fn new() -> Self {
        Self { variables: Vec::new(), equalities: Vec::new(), psd: Vec::new(), objective: Objective::feasibility() }
    }

    pub fn add_variable(&mut self, name: impl Into<String>, dim: usize) -> VarId {
        self.variables.push(Variable { name: name.into(), dim });
        VarId(self.variables.len() - 1)
    }

    pub fn add_equality(&mut self, lhs: AffineExpr, rhs: HermitianOperator) {
        self.equalities.push(Equality { lhs, rhs });
    }

    pub fn add_psd(&mut self, expr: AffineExpr) {
        self.psd.push(expr);
    }

    pub fn set_objective(&mut self, sense: Sense, terms: Vec<(VarId, HermitianOperator)>) {
        self.objective = Objective { sense, terms };
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn psd_constraints(&self) -> &[AffineExpr] {
        &self.psd
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    /// Multiplies every constraint (both sides) by `factor > 0`.
    pub fn scale_constraints(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for eq in &mut out.equalities {
            eq.lhs = eq.lhs.scaled(factor);
            eq.rhs = eq.rhs.scale(factor);
        }
        for p in &mut out.psd {
            *p = p.scaled(factor);
        }
        out
    }

    /// Checks variable references and dimensions.
    pub fn validate(&self) -> Result<()> {
        let check_expr = |e: &AffineExpr, what: &str| -> Result<()> {
            if e.constant.dim() != e.dim {
                return Err(Error::InvalidProblem(format!("{what}: constant has wrong dimension")));
            }
            for t in &e.terms {
                let v = self
                    .variables
                    .get(t.var().0)
                    .ok_or_else(|| Error::InvalidProblem(format!("{what}: unknown variable {}", t.var().0)))?;
                let ok = match t {
                    LinearTerm::Scaled { .. } => v.dim == e.dim,
                    LinearTerm::ScalarTimes { op, .. } => v.dim == 1 && op.dim() == e.dim,
                    LinearTerm::Pairing { op, .. } => e.dim == 1 && op.dim() == v.dim,
                    LinearTerm::Congruence { map, .. } => map.nrows() == e.dim && map.ncols() == v.dim,
                };
                if !ok {
                    return Err(Error::InvalidProblem(format!(
                        "{what}: term on `{}` has inconsistent dimensions",
                        v.name
                    )));
                }
            }
            Ok(())
        };
        if let Some(v) = self.variables.iter().find(|v| v.dim == 0) {
            return Err(Error::InvalidProblem(format!("variable `{}` has dimension 0", v.name)));
        }
        for (k, eq) in self.equalities.iter().enumerate() {
            check_expr(&eq.lhs, &format!("equality {k}"))?;
            if eq.rhs.dim() != eq.lhs.dim {
                return Err(Error::InvalidProblem(format!("equality {k}: right-hand side has wrong dimension")));
            }
        }
        for (k, p) in self.psd.iter().enumerate() {
            check_expr(p, &format!("psd constraint {k}"))?;
        }
        for (v, op) in &self.objective.terms {
            let var = self
                .variables
                .get(v.0)
                .ok_or_else(|| Error::InvalidProblem(format!("objective: unknown variable {}", v.0)))?;
            if var.dim != op.dim() {
                return Err(Error::InvalidProblem(format!("objective: term on `{}` has wrong dimension", var.name)));
            }
        }
        Ok(())
    }

    /// Whether every operator in the problem is real, so that the
    /// real-symmetric formulation is exact.
    pub fn is_real(&self) -> bool {
        let real = |h: &HermitianOperator| h.matrix().iter().all(|z| z.im == 0.0);
        let expr_real = |e: &AffineExpr| {
            real(&e.constant)
                && e.terms.iter().all(|t| match t {
                    LinearTerm::Scaled { .. } => true,
                    LinearTerm::ScalarTimes { op, .. } | LinearTerm::Pairing { op, .. } => real(op),
                    LinearTerm::Congruence { map, .. } => map.iter().all(|z| z.im == 0.0),
                })
        };
        self.equalities.iter().all(|e| expr_real(&e.lhs) && real(&e.rhs))
            && self.psd.iter().all(expr_real)
            && self.objective.terms.iter().all(|(_, op)| real(op))
    }

    /// Text dump: one line per variable/constraint, operators as JSON matrices.
    pub fn to_text(&self) -> String {
        let json = |h: &HermitianOperator| serde_json::to_string(h).expect("matrix serializes");
        let expr = |e: &AffineExpr| {
            let mut s = String::new();
            for t in &e.terms {
                let name = &self.variables[t.var().0].name;
                match t {
                    LinearTerm::Scaled { coef, .. } => write!(s, "{coef} * {name} + ").unwrap(),
                    LinearTerm::ScalarTimes { op, .. } => write!(s, "{name} * {} + ", json(op)).unwrap(),
                    LinearTerm::Pairing { op, .. } => write!(s, "tr({} * {name}) + ", json(op)).unwrap(),
                    LinearTerm::Congruence { map, .. } => {
                        let rows: Vec<Vec<[f64; 2]>> =
                            map.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect();
                        write!(s, "cong({}, {name}) + ", serde_json::to_string(&rows).expect("matrix serializes"))
                            .unwrap()
                    }
                }
            }
            s.push_str(&json(&e.constant));
            s
        };
        let mut out = String::new();
        for v in &self.variables {
            writeln!(out, "var {} herm {}", v.name, v.dim).unwrap();
        }
        let sense = match self.objective.sense {
            Sense::Maximize => "max",
            Sense::Minimize => "min",
        };
        let obj: Vec<String> = self
            .objective
            .terms
            .iter()
            .map(|(v, op)| format!("tr({} * {})", json(op), self.variables[v.0].name))
            .collect();
        writeln!(out, "{sense} {}", if obj.is_empty() { "0".to_string() } else { obj.join(" + ") }).unwrap();
        for eq in &self.equalities {
            writeln!(out, "eq {} == {}", expr(&eq.lhs), json(&eq.rhs)).unwrap();
        }
        for p in &self.psd {
            writeln!(out, "psd {} >= 0", expr(p)).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// How complex variables are presented to the real conic backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embedding {
    /// Full complex Hermitian variables, PSD through the 2d×2d real embedding.
    Complex,
    /// Real symmetric variables and d×d PSD cones; requires real data.
    RealOnly,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub eps_eq: f64,
    pub eps_psd: f64,
    pub max_iters: u32,
    /// Bound on the normalized dual-ray residual accepted as an infeasibility proof.
    pub certificate_tol: f64,
    pub embedding: Embedding,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_eq: crate::EPS_EQ,
            eps_psd: crate::EPS_PSD,
            max_iters: 200,
            certificate_tol: crate::CERTIFICATE_TOL,
            embedding: Embedding::Complex,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// One value per variable; empty unless `status == Optimal`.
    pub values: Vec<HermitianOperator>,
    /// Objective in the problem's own sense (not negated for maximization).
    pub objective_value: f64,
    /// Largest Frobenius violation over the equality constraints.
    pub equality_residual: f64,
    /// Smallest eigenvalue over the PSD constraints.
    pub psd_residual: f64,
    /// Normalized dual-ray residual when `status == Infeasible`.
    pub certificate_residual: Option<f64>,
    pub iterations: u32,
    pub detail: String,
}

impl SdpSolution {
    pub fn value(&self, var: VarId) -> &HermitianOperator {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: VarId) -> f64 {
        self.values[var.0].trace()
    }

    fn failed(status: SdpStatus, detail: String, iterations: u32) -> Self {
        Self {
            status,
            values: Vec::new(),
            objective_value: f64::NAN,
            equality_residual: f64::NAN,
            psd_residual: f64::NAN,
            certificate_residual: None,
            iterations,
            detail,
        }
    }
}

/// Coordinate layout of the variables in the real decision vector.
struct Layout {
    offsets: Vec<usize>,
    bases: Vec<HermitianBasis>,
    /// Basis element indices used per variable (all of them unless real-only).
    active: Vec<Vec<usize>>,
    n: usize,
}

impl Layout {
    fn new(vars: &[Variable], embedding: Embedding) -> Self {
        let mut offsets = Vec::with_capacity(vars.len());
        let mut bases = Vec::with_capacity(vars.len());
        let mut active = Vec::with_capacity(vars.len());
        let mut n = 0;
        for v in vars {
            let basis = hermitian_basis(v.dim);
            let idx: Vec<usize> = (0..basis.len())
                .filter(|&k| {
                    embedding == Embedding::Complex || basis.elements()[k].matrix().iter().all(|z| z.im == 0.0)
                })
                .collect();
            offsets.push(n);
            n += idx.len();
            bases.push(basis);
            active.push(idx);
        }
        Self { offsets, bases, active, n }
    }

    fn values(&self, x: &[f64]) -> Vec<HermitianOperator> {
        (0..self.bases.len())
            .map(|v| {
                let mut coords = vec![0.0; self.bases[v].len()];
                for (slot, &k) in self.active[v].iter().enumerate() {
                    coords[k] = x[self.offsets[v] + slot];
                }
                self.bases[v].reconstruct(&coords)
            })
            .collect()
    }

    /// Images of every active coordinate direction under the linear part of `e`,
    /// as `(column, operator)` pairs.
    fn columns(&self, e: &AffineExpr) -> Vec<(usize, HermitianOperator)> {
        let mut cols: Vec<(usize, HermitianOperator)> = Vec::new();
        for t in &e.terms {
            let v = t.var().0;
            for (slot, &k) in self.active[v].iter().enumerate() {
                let img = t.apply(&self.bases[v].elements()[k]);
                let col = self.offsets[v] + slot;
                match cols.iter_mut().find(|(c, _)| *c == col) {
                    Some((_, acc)) => *acc += &img,
                    None => cols.push((col, img)),
                }
            }
        }
        cols
    }
}

/// Upper-triangular, column-major, off-diagonals scaled by √2.
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in 0..=j {
            out.push(if i == j { m[(i, j)] } else { std::f64::consts::SQRT_2 * m[(i, j)] });
        }
    }
    out
}

fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            let x = if i == j { v[k] } else { v[k] / std::f64::consts::SQRT_2 };
            m[(i, j)] = x;
            m[(j, i)] = x;
            k += 1;
        }
    }
    m
}

fn psd_image(h: &HermitianOperator, embedding: Embedding) -> Vec<f64> {
    match embedding {
        Embedding::Complex => svec(&h.real_embedding()),
        Embedding::RealOnly => svec(&h.matrix().map(|z| z.re)),
    }
}

enum ConeBlock {
    Zero(usize),
    Nonneg,
    Psd(usize),
}

/// Orthonormalizes equality rows (modified Gram-Schmidt with one
/// re-orthogonalization pass), dropping dependent rows. Returns `Err` with the
/// inconsistency when a dependent row's right-hand side disagrees.
fn presolve_equalities(
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    tol: f64,
) -> std::result::Result<(Vec<Vec<f64>>, Vec<f64>), f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut qb: Vec<f64> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for (mut r, mut b) in rows.into_iter().zip(rhs) {
        let norm0 = dot(&r, &r).sqrt();
        if norm0 == 0.0 {
            if b.abs() > tol {
                return Err(b.abs());
            }
            continue;
        }
        for _ in 0..2 {
            for (qi, bi) in q.iter().zip(&qb) {
                let c = dot(&r, qi);
                for (x, y) in r.iter_mut().zip(qi) {
                    *x -= c * y;
                }
                b -= c * bi;
            }
        }
        let norm = dot(&r, &r).sqrt();
        if norm <= 1e-10 * norm0.max(1.0) {
            let inconsistency = b.abs() / norm0.max(1.0);
            if inconsistency > tol {
                return Err(inconsistency);
            }
            continue;
        }
        r.iter_mut().for_each(|x| *x /= norm);
        q.push(r);
        qb.push(b / norm);
    }
    Ok((q, qb))
}

fn to_csc(rows: &[Vec<f64>], n: usize) -> CscMatrix<f64> {
    let m = rows.len();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for (i, row) in rows.iter().enumerate() {
            if row[j] != 0.0 {
                rowval.push(i);
                nzval.push(row[j]);
            }
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

fn sym_min_eig(m: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Solves `problem` and certifies the reported status.
pub fn solve_sdp(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution> {
    problem.validate()?;
    if settings.embedding == Embedding::RealOnly && !problem.is_real() {
        return Err(Error::InvalidProblem("real-only embedding requested for complex data".into()));
    }
    let layout = Layout::new(&problem.variables, settings.embedding);
    let n = layout.n;

    // Equalities in output-basis coordinates.
    let mut eq_rows = Vec::new();
    let mut eq_rhs = Vec::new();
    for eq in &problem.equalities {
        let basis = hermitian_basis(eq.lhs.dim);
        let cols = layout.columns(&eq.lhs);
        let target = basis.coordinates(&(&eq.rhs - &eq.lhs.constant));
        let col_coords: Vec<(usize, Vec<f64>)> = cols.iter().map(|(c, op)| (*c, basis.coordinates(op))).collect();
        for (r, t) in target.iter().enumerate() {
            let mut row = vec![0.0; n];
            for (c, coords) in &col_coords {
                row[*c] = coords[r];
            }
            eq_rows.push(row);
            eq_rhs.push(*t);
        }
    }
    let (eq_rows, eq_rhs) = match presolve_equalities(eq_rows, eq_rhs, settings.eps_eq) {
        Ok(v) => v,
        Err(inconsistency) => {
            let mut sol = SdpSolution::failed(
                SdpStatus::Infeasible,
                format!("equality constraints are inconsistent (gap {inconsistency:e})"),
                0,
            );
            sol.certificate_residual = Some(0.0);
            return Ok(sol);
        }
    };

    let mut a_rows = eq_rows;
    let mut b = eq_rhs;
    let mut blocks = vec![ConeBlock::Zero(a_rows.len())];
    for p in &problem.psd {
        let cols = layout.columns(p);
        if p.dim == 1 {
            let mut row = vec![0.0; n];
            for (c, op) in &cols {
                row[*c] = -op.trace();
            }
            a_rows.push(row);
            b.push(p.constant.trace());
            blocks.push(ConeBlock::Nonneg);
        } else {
            let size = match settings.embedding {
                Embedding::Complex => 2 * p.dim,
                Embedding::RealOnly => p.dim,
            };
            let base = psd_image(&p.constant, settings.embedding);
            let col_images: Vec<(usize, Vec<f64>)> =
                cols.iter().map(|(c, op)| (*c, psd_image(op, settings.embedding))).collect();
            for (r, b0) in base.iter().enumerate() {
                let mut row = vec![0.0; n];
                for (c, img) in &col_images {
                    row[*c] = -img[r];
                }
                a_rows.push(row);
                b.push(*b0);
            }
            blocks.push(ConeBlock::Psd(size));
        }
    }

    let mut q = vec![0.0; n];
    let sign = if problem.objective.sense == Sense::Maximize { -1.0 } else { 1.0 };
    for (v, op) in &problem.objective.terms {
        for (slot, &k) in layout.active[v.0].iter().enumerate() {
            q[layout.offsets[v.0] + slot] += sign * inner_unchecked(op, &layout.bases[v.0].elements()[k]);
        }
    }

    // Merge consecutive nonnegative rows into one cone.
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    for blk in &blocks {
        match blk {
            ConeBlock::Zero(0) => {}
            ConeBlock::Zero(k) => cones.push(SupportedConeT::ZeroConeT(*k)),
            ConeBlock::Nonneg => match cones.last_mut() {
                Some(SupportedConeT::NonnegativeConeT(k)) => *k += 1,
                _ => cones.push(SupportedConeT::NonnegativeConeT(1)),
            },
            ConeBlock::Psd(s) => cones.push(SupportedConeT::PSDTriangleConeT(*s)),
        }
    }

    let problem_data = ConicData { p: CscMatrix::zeros((n, n)), q, a: to_csc(&a_rows, n), b, cones, a_rows, blocks };
    // Clarabel sometimes stalls near the tightest tolerances; a ladder of
    // attempts keeps the first clean solve and otherwise the first acceptable one.
    let mut fallback: Option<SdpSolution> = None;
    let mut last = None;
    for attempt in &ATTEMPTS {
        let out = run_clarabel(problem, settings, &layout, &problem_data, attempt)?;
        match out.status {
            SdpStatus::Optimal if out.detail == "Solved" => return Ok(out),
            SdpStatus::Optimal => {
                fallback.get_or_insert(out);
            }
            SdpStatus::Infeasible | SdpStatus::Unbounded => return Ok(out),
            SdpStatus::NumericalFailure => {
                last.get_or_insert(out);
            }
        }
    }
    Ok(fallback.or(last).expect("at least one attempt"))
}

/// Keeps panics raised inside the solver (caught and reported as numerical
/// failures) off stderr; all other panics reach the previous hook.
fn silence_solver_panics() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        let previous = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if !info.location().is_some_and(|l| l.file().contains("clarabel")) {
                previous(info);
            }
        }));
    });
}

struct ConicData {
    p: CscMatrix<f64>,
    q: Vec<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    a_rows: Vec<Vec<f64>>,
    blocks: Vec<ConeBlock>,
}

struct Attempt {
    tol: f64,
    regularization: f64,
    refinement: u32,
}

const ATTEMPTS: [Attempt; 4] = [
    Attempt { tol: 1e-10, regularization: 1e-10, refinement: 50 },
    Attempt { tol: 1e-10, regularization: 1e-8, refinement: 10 },
    Attempt { tol: 1e-9, regularization: 1e-8, refinement: 10 },
    Attempt { tol: 1e-8, regularization: 1e-8, refinement: 10 },
];

fn run_clarabel(
    problem: &SdpProblem,
    settings: &SolverSettings,
    layout: &Layout,
    data: &ConicData,
    attempt: &Attempt,
) -> Result<SdpSolution> {
    let clarabel_settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(settings.max_iters)
        .tol_gap_abs(attempt.tol)
        .tol_gap_rel(attempt.tol)
        .tol_feas(attempt.tol)
        .tol_infeas_abs(1e-10)
        .tol_infeas_rel(1e-10)
        .tol_ktratio(1e-8)
        .presolve_enable(false)
        .iterative_refinement_max_iter(attempt.refinement)
        .static_regularization_constant(attempt.regularization)
        .build()
        .map_err(|e| Error::solver("settings", format!("{e:?}")))?;
    let mut solver = DefaultSolver::new(&data.p, &data.q, &data.a, &data.b, &data.cones, clarabel_settings)
        .map_err(|e| Error::solver("setup", format!("{e:?}")))?;
    // the PSD cone's eigendecomposition panics when LAPACK fails on a degenerate iterate
    silence_solver_panics();
    if let Err(payload) = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| solver.solve())) {
        let msg = payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        return Ok(SdpSolution::failed(SdpStatus::NumericalFailure, format!("solver aborted: {msg}"), 0));
    }
    let sol = &solver.solution;
    let iterations = sol.iterations;
    let status = sol.status;

    match status {
        SolverStatus::Solved
        | SolverStatus::AlmostSolved
        | SolverStatus::MaxIterations
        | SolverStatus::InsufficientProgress => {
            if sol.x.iter().any(|v| !v.is_finite()) {
                return Ok(SdpSolution::failed(SdpStatus::NumericalFailure, format!("{status:?}"), iterations));
            }
            let values = layout.values(&sol.x);
            let equality_residual = problem
                .equalities
                .iter()
                .map(|eq| (eq.lhs.eval(&values) - &eq.rhs).frobenius_norm())
                .fold(0.0, f64::max);
            let psd_residual =
                problem.psd.iter().map(|p| p.eval(&values).min_eigenvalue()).fold(f64::INFINITY, f64::min);
            let objective_value = problem.objective.eval(&values);
            let ok = equality_residual <= settings.eps_eq && psd_residual >= -settings.eps_psd;
            let converged = matches!(status, SolverStatus::Solved | SolverStatus::AlmostSolved);
            Ok(SdpSolution {
                status: if ok && converged { SdpStatus::Optimal } else { SdpStatus::NumericalFailure },
                values,
                objective_value,
                equality_residual,
                psd_residual,
                certificate_residual: None,
                iterations,
                detail: format!("{status:?}"),
            })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            let residual = dual_ray_residual(&data.a_rows, &data.b, &data.blocks, &sol.z, layout.n);
            match residual {
                Some(r) if r <= settings.certificate_tol => {
                    let mut out = SdpSolution::failed(SdpStatus::Infeasible, format!("{status:?}"), iterations);
                    out.certificate_residual = Some(r);
                    Ok(out)
                }
                other => Ok(SdpSolution::failed(
                    SdpStatus::NumericalFailure,
                    format!("{status:?} with unverified dual ray (residual {other:?})"),
                    iterations,
                )),
            }
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            match primal_ray_residual(&data.a_rows, &data.q, &data.blocks, &sol.x) {
                Some(r) if r <= settings.certificate_tol => {
                    let mut out = SdpSolution::failed(SdpStatus::Unbounded, format!("{status:?}"), iterations);
                    out.certificate_residual = Some(r);
                    Ok(out)
                }
                other => Ok(SdpSolution::failed(
                    SdpStatus::NumericalFailure,
                    format!("{status:?} with unverified primal ray (residual {other:?})"),
                    iterations,
                )),
            }
        }
        other => Ok(SdpSolution::failed(SdpStatus::NumericalFailure, format!("{other:?}"), iterations)),
    }
}

/// For a candidate ray `x` (`Ax ∈ −K`, `qᵀx < 0`), returns the worst cone
/// violation of `−Ax` after normalizing `qᵀx = −1`.
fn primal_ray_residual(a_rows: &[Vec<f64>], q: &[f64], blocks: &[ConeBlock], x: &[f64]) -> Option<f64> {
    if x.len() != q.len() || x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let qx: f64 = q.iter().zip(x).map(|(a, b)| a * b).sum();
    if qx >= 0.0 {
        return None;
    }
    let x: Vec<f64> = x.iter().map(|v| v / -qx).collect();
    let s: Vec<f64> = a_rows.iter().map(|row| -row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>()).collect();
    let mut worst = 0.0_f64;
    let mut offset = 0;
    for blk in blocks {
        match blk {
            ConeBlock::Zero(k) => {
                worst = s[offset..offset + k].iter().fold(worst, |m, v| m.max(v.abs()));
                offset += k;
            }
            ConeBlock::Nonneg => {
                worst = worst.max(-s[offset]);
                offset += 1;
            }
            ConeBlock::Psd(size) => {
                let len = size * (size + 1) / 2;
                worst = worst.max(-sym_min_eig(smat(&s[offset..offset + len], *size)));
                offset += len;
            }
        }
    }
    Some(worst)
}

/// For a candidate ray `z` (`Aᵀz = 0`, `bᵀz < 0`, `z ∈ K*`), returns the worst
/// of `‖Aᵀz‖∞` and the dual-cone violation after normalizing `bᵀz = −1`.
fn dual_ray_residual(a_rows: &[Vec<f64>], b: &[f64], blocks: &[ConeBlock], z: &[f64], n: usize) -> Option<f64> {
    if z.len() != b.len() || z.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let bz: f64 = b.iter().zip(z).map(|(x, y)| x * y).sum();
    if bz >= 0.0 {
        return None;
    }
    let scale = -1.0 / bz;
    let z: Vec<f64> = z.iter().map(|v| v * scale).collect();
    let mut atz = vec![0.0; n];
    for (row, zi) in a_rows.iter().zip(&z) {
        for (acc, aij) in atz.iter_mut().zip(row) {
            *acc += aij * zi;
        }
    }
    let mut worst = atz.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut offset = 0;
    for blk in blocks {
        match blk {
            ConeBlock::Zero(k) => offset += k,
            ConeBlock::Nonneg => {
                worst = worst.max(-z[offset]);
                offset += 1;
            }
            ConeBlock::Psd(s) => {
                let len = s * (s + 1) / 2;
                worst = worst.max(-sym_min_eig(smat(&z[offset..offset + len], *s)));
                offset += len;
            }
        }
    }
    Some(worst)
}

/// Maps a non-optimal status to an error, leaving `Optimal` solutions intact.
pub(crate) fn require_optimal(sol: SdpSolution, context: &str) -> Result<SdpSolution> {
    match sol.status {
        SdpStatus::Optimal => Ok(sol),
        other => Err(Error::solver(
            context,
            format!(
                "{other:?} ({}; eq residual {:e}, psd residual {:e})",
                sol.detail, sol.equality_residual, sol.psd_residual
            ),
        )),
    }
}
