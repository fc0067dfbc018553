//! The `jm` command line.
//!
//! Exit codes: 0 the property holds (or the command succeeded), 1 the
//! property fails, 2 invalid input, 3 solver failure.

use std::ffi::OsString;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::decomp::{decompose_measurement_full, decompose_tuple, verify_decomposition};
use crate::error::{Error, Result};
use crate::fixtures::{self, FixtureName, PovmKind};
use crate::herm::HermitianOperator;
use crate::joint::{
    critical_visibility, critical_visibility_capped, find_joint, marginals, max_min_eig_joint,
    uniform_noise_visibility, verify_joint, Compatibility, JointMeasurement,
};
use crate::povm::{
    is_boundary_povm, is_extremal_povm, tuple_is_boundary, tuple_is_extremal, validate_povm, MeasurementTuple, Povm,
};
use crate::unique::{find_compatible_decomposition, joint_set_affine_dimension, joint_uniqueness, Verdict};
use crate::{CERTIFICATE_TOL, EPS_EQ, EPS_PSD, EPS_RANK, EPS_UNIQUE, S_STAR_TOL};

/// Cap on `t` for `visibility --allow-t-gt-1`.
pub const VISIBILITY_CAP_ABOVE_ONE: f64 = 10.0;

/// How far past `t = 1` the compatible-set boundary probe looks.
const BOUNDARY_PROBE_STEP: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "jm", version, about = "Joint measurability and uniqueness of joint measurements for tuples of POVMs")]
pub struct Cli {
    /// Tolerance for validating input operators and for rank decisions.
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub output: OutputFormat,
    /// Seed for the random generators of `gen`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Permit visibilities above 1 (re-validated after depolarising).
    #[arg(long = "allow-t-gt-1", global = true)]
    pub allow_t_gt_1: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SetKind {
    /// All tuples, `P^m`.
    P,
    /// Compatible tuples.
    Jm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check that a POVM, tuple or joint file is well formed.
    Validate { file: PathBuf },
    /// Decide joint measurability.
    CheckJm { file: PathBuf },
    /// Critical visibility t* under depolarising noise.
    Visibility { file: PathBuf },
    /// Decide whether the joint measurement is unique.
    Unique { file: PathBuf },
    /// Extremality in the set of all tuples or of compatible tuples.
    Extremal {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = SetKind::P)]
        set: SetKind,
    },
    /// Boundary membership in the set of all tuples or of compatible tuples.
    Boundary {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = SetKind::P)]
        set: SetKind,
    },
    /// Run every check and print the implication ledger.
    Classify { file: PathBuf },
    /// Split a compatible tuple into two compatible tuples.
    Decompose {
        file: PathBuf,
        /// Two joint files; found by the uniqueness sweep when omitted.
        #[arg(long, num_args = 2, value_names = ["M", "M_PRIME"])]
        joints: Option<Vec<PathBuf>>,
        /// Split only this measurement (1-based).
        #[arg(long)]
        measurement: Option<usize>,
    },
    /// Emit a fixture or a seeded random instance as JSON.
    Gen {
        /// Fixture name, or random-povm | random-tuple | random-compatible.
        name: String,
        /// Depolarise a tuple fixture to this visibility.
        #[arg(long)]
        depolarize: Option<f64>,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        outcomes: usize,
        #[arg(long, default_value_t = 2)]
        parties: usize,
        /// full-rank | rank-one | projective
        #[arg(long, default_value = "full-rank")]
        kind: String,
        /// Visibility applied by random-tuple.
        #[arg(long, default_value_t = 1.0)]
        visibility: f64,
    },
}

/// Parses `argv` (including the program name), runs, and writes the report
/// to standard output. Returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run_with(argv, &mut out)
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    let report = execute(&cli).unwrap_or_else(|e| Report::error(&e));
    let written = match cli.output {
        OutputFormat::Json => writeln!(out, "{}", to_json_string(&report.json)),
        OutputFormat::Text => report.text.iter().try_for_each(|line| writeln!(out, "{line}")),
    };
    if written.is_err() {
        return 2;
    }
    report.code
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Incompatible { .. } => 1,
        Error::Solver { .. } | Error::IterationCap(_) => 3,
        _ => 2,
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub code: i32,
    pub json: Value,
    pub text: Vec<String>,
}

impl Report {
    fn new(code: i32, json: Value, text: Vec<String>) -> Self {
        Self { code, json, text }
    }

    fn error(e: &Error) -> Self {
        let json = json!({ "error": { "reason": e.reason(), "message": e.to_string() } });
        Self::new(exit_code(e), json, vec![format!("error ({}): {e}", e.reason())])
    }
}

/// Parsed input file.
#[derive(Debug, Clone)]
pub enum Input {
    Povm(Povm),
    Tuple(MeasurementTuple),
    Joint(JointMeasurement),
}

impl Input {
    fn kind(&self) -> &'static str {
        match self {
            Input::Povm(_) => "povm",
            Input::Tuple(_) => "tuple",
            Input::Joint(_) => "joint",
        }
    }

    /// A POVM is a one-measurement tuple; a joint stands for its marginals.
    pub fn into_tuple(self) -> Result<MeasurementTuple> {
        match self {
            Input::Povm(p) => MeasurementTuple::new(vec![p]),
            Input::Tuple(t) => Ok(t),
            Input::Joint(j) => marginals(&j),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    dim: Option<usize>,
    effects: Option<Vec<HermitianOperator>>,
    outcomes: Option<Vec<usize>>,
    measurements: Option<Vec<RawMeasurement>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasurement {
    dim: Option<usize>,
    effects: Vec<HermitianOperator>,
}

fn povm_with_dim(effects: Vec<HermitianOperator>, dim: Option<usize>, tol: f64) -> Result<Povm> {
    let povm = validate_povm(effects, tol)?;
    match dim {
        Some(d) if d != povm.dim() => Err(Error::DimensionMismatch { expected: d, found: povm.dim() }),
        _ => Ok(povm),
    }
}

/// Reads a POVM, tuple or joint (`-` for standard input), validating
/// effects at `tol`.
pub fn load_input(path: &Path, tol: f64) -> Result<Input> {
    let text = if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(path)?
    };
    parse_input(&text, tol)
}

pub fn parse_input(text: &str, tol: f64) -> Result<Input> {
    let raw: RawInput = serde_json::from_str(text)?;
    match (raw.measurements, raw.effects, raw.outcomes) {
        (Some(ms), None, None) => {
            let povms = ms.into_iter().map(|m| povm_with_dim(m.effects, m.dim, tol)).collect::<Result<Vec<_>>>()?;
            let tuple = MeasurementTuple::new(povms)?;
            match raw.dim {
                Some(d) if d != tuple.dim() => Err(Error::DimensionMismatch { expected: d, found: tuple.dim() }),
                _ => Ok(Input::Tuple(tuple)),
            }
        }
        (None, Some(effects), Some(outcomes)) => {
            let povm = povm_with_dim(effects, raw.dim, tol)?;
            let expected: usize = outcomes.iter().product();
            if outcomes.is_empty() || outcomes.contains(&0) || expected != povm.len() {
                return Err(Error::InvalidJoint(format!(
                    "outcome counts {outcomes:?} do not match {} effects",
                    povm.len()
                )));
            }
            Ok(Input::Joint(JointMeasurement::from_parts(povm.dim(), outcomes, povm.effects().to_vec())))
        }
        (None, Some(effects), None) => Ok(Input::Povm(povm_with_dim(effects, raw.dim, tol)?)),
        _ => Err(Error::InvalidParameter(
            "expected a POVM {dim, effects}, a tuple {dim, measurements} or a joint {dim, outcomes, effects}".into(),
        )),
    }
}

fn tolerances(tol: f64) -> Value {
    json!({
        "tol": tol,
        "eps_eq": EPS_EQ,
        "eps_psd": EPS_PSD,
        "eps_unique": EPS_UNIQUE,
        "eps_rank": EPS_RANK,
        "certificate_tol": CERTIFICATE_TOL,
        "s_star_tol": S_STAR_TOL,
    })
}

fn tolerance_line(tol: f64) -> String {
    format!(
        "tolerances: tol {tol:e}, eq {EPS_EQ:e}, psd {EPS_PSD:e}, unique {EPS_UNIQUE:e}, certificate {CERTIFICATE_TOL:e}, s* {S_STAR_TOL:e}"
    )
}

fn with_tolerances(mut v: Value, tol: f64) -> Value {
    if let Value::Object(map) = &mut v {
        map.insert("tolerances".into(), tolerances(tol));
    }
    v
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn execute(cli: &Cli) -> Result<Report> {
    let tol = cli.tol;
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParameter(format!("--tol must be positive, got {tol}")));
    }
    match &cli.command {
        Command::Validate { file } => {
            let input = load_input(file, tol)?;
            let (dim, parts) = match &input {
                Input::Povm(p) => (p.dim(), vec![p.len()]),
                Input::Tuple(t) => (t.dim(), t.outcome_counts()),
                Input::Joint(j) => (j.dim(), j.outcomes().to_vec()),
            };
            let json =
                with_tolerances(json!({ "valid": true, "kind": input.kind(), "dim": dim, "outcomes": parts }), tol);
            let text = vec![format!("valid {} (d = {dim}, outcomes {parts:?})", input.kind()), tolerance_line(tol)];
            Ok(Report::new(0, json, text))
        }
        Command::CheckJm { file } => {
            let tuple = load_input(file, tol)?.into_tuple()?;
            Ok(match find_joint(&tuple)? {
                Compatibility::Compatible(joint) => {
                    let check = verify_joint(&joint, &tuple, EPS_EQ)?;
                    let json = json!({ "compatible": true, "marginal_residual": check.residual, "joint": joint });
                    let text = vec![
                        format!("compatible: joint found (marginal residual {:.1e} ≤ {EPS_EQ:e})", check.residual),
                        tolerance_line(tol),
                    ];
                    Report::new(0, with_tolerances(json, tol), text)
                }
                Compatibility::Incompatible { certificate_residual } => {
                    let json = json!({ "compatible": false, "certificate_residual": certificate_residual });
                    let text = vec![
                        format!(
                            "incompatible: dual certificate residual {certificate_residual:.1e} ≤ {CERTIFICATE_TOL:e}"
                        ),
                        tolerance_line(tol),
                    ];
                    Report::new(1, with_tolerances(json, tol), text)
                }
            })
        }
        Command::Visibility { file } => {
            let tuple = load_input(file, tol)?.into_tuple()?;
            let vis = if cli.allow_t_gt_1 {
                critical_visibility_capped(&tuple, VISIBILITY_CAP_ABOVE_ONE)?
            } else {
                critical_visibility(&tuple)?
            };
            let cap = if cli.allow_t_gt_1 { VISIBILITY_CAP_ABOVE_ONE } else { 1.0 };
            let json = json!({ "t_star": vis.t_star, "t_cap": cap, "joint": vis.joint });
            let text = vec![format!("t* = {:.7}", vis.t_star), format!("cap: t ≤ {cap}"), tolerance_line(tol)];
            Ok(Report::new(0, with_tolerances(json, tol), text))
        }
        Command::Unique { file } => {
            let tuple = load_input(file, tol)?.into_tuple()?;
            let verdict = joint_uniqueness(&tuple)?;
            let dimension = if verdict.is_unique() { 0 } else { joint_set_affine_dimension(&tuple)? };
            let json = json!({
                "verdict": verdict.verdict,
                "dimension": dimension,
                "witness": verdict.witness,
                "second_joint": verdict.second_joint,
                "max_objective_seen": verdict.max_objective_seen,
                "joint": verdict.joint,
            });
            let mut text = vec![match verdict.verdict {
                Verdict::Unique => "unique joint measurement".to_string(),
                Verdict::NonUnique => "joint measurement is not unique".to_string(),
            }];
            text.push(format!("dimension of the joint set: {dimension}"));
            if let Some(w) = &verdict.witness {
                text.push(format!("witness perturbation: Frobenius norm {:.6e}", w.frobenius_norm()));
            }
            text.push(format!("largest sweep objective: {:.3e}", verdict.max_objective_seen));
            text.push(tolerance_line(tol));
            Ok(Report::new(if verdict.is_unique() { 0 } else { 1 }, with_tolerances(json, tol), text))
        }
        Command::Extremal { file, set } => {
            let input = load_input(file, tol)?;
            let (extremal, detail) = match (input, set) {
                (Input::Povm(p), SetKind::P) => {
                    let e = is_extremal_povm(&p, tol);
                    (e.extremal, json!({ "null_dimension": e.null_dimension, "witness": e.witness }))
                }
                (Input::Joint(j), SetKind::P) => {
                    let e = is_extremal_povm(&j.as_povm()?, tol);
                    (e.extremal, json!({ "null_dimension": e.null_dimension, "witness": e.witness }))
                }
                (input, SetKind::P) => {
                    let tuple = input.into_tuple()?;
                    let per: Vec<bool> =
                        tuple.measurements().iter().map(|m| is_extremal_povm(m, tol).extremal).collect();
                    (tuple_is_extremal(&tuple, tol), json!({ "measurements": per }))
                }
                (input, SetKind::Jm) => {
                    let tuple = input.into_tuple()?;
                    let split = find_compatible_decomposition(&tuple)?;
                    let witness = split.map(|(b, c)| json!({ "plus": b, "minus": c }));
                    (witness.is_none(), json!({ "decomposition": witness }))
                }
            };
            let set_name = set_label(*set);
            let json = with_tolerances(json!({ "extremal": extremal, "set": set_name, "detail": detail }), tol);
            let text = vec![format!("extremal in {set_name}: {}", yes(extremal)), tolerance_line(tol)];
            Ok(Report::new(if extremal { 0 } else { 1 }, json, text))
        }
        Command::Boundary { file, set } => {
            let input = load_input(file, tol)?;
            let (boundary, detail) = match (input, set) {
                (Input::Povm(p), SetKind::P) => (is_boundary_povm(&p, tol), Value::Null),
                (Input::Joint(j), SetKind::P) => (is_boundary_povm(&j.as_povm()?, tol), Value::Null),
                (input, SetKind::P) => {
                    let tuple = input.into_tuple()?;
                    let per: Vec<bool> = tuple.measurements().iter().map(|m| is_boundary_povm(m, tol)).collect();
                    (tuple_is_boundary(&tuple, tol), json!({ "measurements": per }))
                }
                (input, SetKind::Jm) => {
                    let tuple = input.into_tuple()?;
                    let mme = max_min_eig_joint(&tuple)?;
                    (mme.s_star <= S_STAR_TOL, json!({ "s_star": mme.s_star, "joint": mme.joint }))
                }
            };
            let set_name = set_label(*set);
            let json = with_tolerances(json!({ "boundary": boundary, "set": set_name, "detail": detail }), tol);
            let mut text = vec![format!("boundary of {set_name}: {}", yes(boundary))];
            if let Some(s) = json["detail"].get("s_star").and_then(Value::as_f64) {
                text.push(format!("s* = {s:.3e}"));
            }
            text.push(tolerance_line(tol));
            Ok(Report::new(if boundary { 0 } else { 1 }, json, text))
        }
        Command::Classify { file } => {
            let tuple = load_input(file, tol)?.into_tuple()?;
            let c = classify(&tuple, tol)?;
            let code =
                if c.forbidden.is_empty() && c.ledger.iter().all(|r| r.status != RowStatus::Violated) { 0 } else { 1 };
            let text = c.text(tol);
            let json = with_tolerances(serde_json::to_value(&c)?, tol);
            Ok(Report::new(code, json, text))
        }
        Command::Decompose { file, joints, measurement } => {
            let tuple = load_input(file, tol)?.into_tuple()?;
            let (m, m_prime) = match joints {
                Some(paths) => (load_joint(&paths[0], tol)?, load_joint(&paths[1], tol)?),
                None => {
                    let verdict = joint_uniqueness(&tuple)?;
                    match verdict.second_joint {
                        Some(second) => (verdict.joint, second),
                        None => {
                            let json = with_tolerances(json!({ "decomposed": false, "verdict": "unique" }), tol);
                            let text = vec![
                                "unique joint measurement: no pair of joints to decompose from".to_string(),
                                tolerance_line(tol),
                            ];
                            return Ok(Report::new(1, json, text));
                        }
                    }
                }
            };
            let dec = match measurement {
                Some(0) => return Err(Error::PartyOutOfRange { party: 0, parties: tuple.len() }),
                Some(j) => decompose_measurement_full(&tuple, j - 1, &m, &m_prime)?,
                None => decompose_tuple(&tuple, &m, &m_prime)?,
            };
            let report = verify_decomposition(&tuple, &dec.plus, &dec.minus, EPS_EQ)?;
            let mut text = vec![format!("decomposed in {} round(s)", dec.rounds_used)];
            if let Some(j) = measurement {
                text.push(format!(
                    "measurement {j}: halves differ by {:.6e}",
                    dec.plus.measurement(j - 1).distance(dec.minus.measurement(j - 1))?
                ));
            }
            text.push(format!(
                "average residual {:.1e}; halves compatible: {} / {}; nontrivial: {}",
                report.average_residual,
                yes(report.plus_compatible),
                yes(report.minus_compatible),
                yes(report.nontrivial)
            ));
            text.push(tolerance_line(tol));
            let code = if report.ok && report.nontrivial { 0 } else { 1 };
            let json = with_tolerances(json!({ "decomposed": true, "decomposition": dec, "report": report }), tol);
            Ok(Report::new(code, json, text))
        }
        Command::Gen { name, depolarize, dim, outcomes, parties, kind, visibility } => {
            let seed = cli.seed.unwrap_or(0);
            let value = match name.as_str() {
                "random-povm" => {
                    serde_json::to_value(fixtures::random_povm(*dim, *outcomes, kind.parse::<PovmKind>()?, seed)?)?
                }
                "random-tuple" => {
                    serde_json::to_value(fixtures::random_tuple(*dim, *outcomes, *parties, *visibility, seed)?)?
                }
                "random-compatible" => {
                    serde_json::to_value(fixtures::random_compatible_with_projective(*dim, *outcomes, *parties, seed)?)?
                }
                _ => {
                    let fixture = fixtures::make_fixture(&name.parse::<FixtureName>()?)?;
                    match (fixture, depolarize) {
                        (fixtures::Fixture::Tuple(t), Some(v)) => {
                            serde_json::to_value(t.depolarize_with(*v, cli.allow_t_gt_1)?)?
                        }
                        (fixtures::Fixture::Joint(_), Some(_)) => {
                            return Err(Error::InvalidParameter("--depolarize applies to tuple fixtures only".into()))
                        }
                        (f, None) => serde_json::to_value(f)?,
                    }
                }
            };
            // gen always emits data
            let text = vec![to_json_string(&value)];
            Ok(Report::new(0, value, text))
        }
    }
}

fn load_joint(path: &Path, tol: f64) -> Result<JointMeasurement> {
    match load_input(path, tol)? {
        Input::Joint(j) => Ok(j),
        other => Err(Error::InvalidJoint(format!("{} holds a {}, expected a joint", path.display(), other.kind()))),
    }
}

fn set_label(set: SetKind) -> &'static str {
    match set {
        SetKind::P => "P^m",
        SetKind::Jm => "J_m",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Holds,
    Violated,
    /// A non-implication row: this instance is a counterexample.
    Witnessed,
    /// A non-implication row: nothing to show on this instance.
    Silent,
    NotApplicable,
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerRow {
    pub relation: &'static str,
    pub status: RowStatus,
    pub values: String,
}

/// Facts about the compatible set, present only for compatible tuples.
#[derive(Debug, Clone, Serialize)]
pub struct CompatibleFacts {
    pub s_star: f64,
    /// `C + t(T − C)` stays compatible up to this `t` (probed just past 1),
    /// `C` the uniform trivial tuple.
    pub t_beyond: f64,
    pub boundary_jm: bool,
    pub unique: bool,
    pub dimension: usize,
    /// The max-min-eigenvalue joint (the unique one when unique).
    pub joint_extremal: bool,
    pub joint_boundary: bool,
    pub extremal_jm: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub dim: usize,
    pub outcomes: Vec<usize>,
    pub povm_extremal: Vec<bool>,
    pub povm_boundary: Vec<bool>,
    pub extremal_p: bool,
    pub boundary_p: bool,
    pub compatible: bool,
    pub t_star: f64,
    pub compatible_facts: Option<CompatibleFacts>,
    pub ledger: Vec<LedgerRow>,
    pub forbidden: Vec<&'static str>,
}

/// Runs the whole pipeline: validity, compatibility, visibility, extremality
/// and boundary in `P^m`, boundary in the compatible set, uniqueness,
/// extremality in the compatible set; then evaluates every implication.
///
/// Boundary of the compatible set is probed directly (does `T` stay
/// compatible when pushed away from the uniform trivial tuple?) and extremality by searching for a
/// compatible split, so the ledger compares independent computations.
pub fn classify(tuple: &MeasurementTuple, tol: f64) -> Result<Classification> {
    let povm_extremal: Vec<bool> = tuple.measurements().iter().map(|m| is_extremal_povm(m, tol).extremal).collect();
    let povm_boundary: Vec<bool> = tuple.measurements().iter().map(|m| is_boundary_povm(m, tol)).collect();
    let extremal_p = tuple_is_extremal(tuple, tol);
    let boundary_p = tuple_is_boundary(tuple, tol);
    let compatible = find_joint(tuple)?.joint().is_some();
    let t_star = critical_visibility(tuple)?.t_star;

    let compatible_facts = if compatible {
        let mme = max_min_eig_joint(tuple)?;
        let t_beyond = uniform_noise_visibility(tuple, 1.0 + BOUNDARY_PROBE_STEP)?.t_star;
        let verdict = joint_uniqueness(tuple)?;
        let unique = verdict.is_unique();
        let dimension = if unique { 0 } else { joint_set_affine_dimension(tuple)? };
        let reference = if unique { verdict.joint.clone() } else { mme.joint.clone() };
        let joint_povm = reference.as_povm()?;
        let joint_extremal = unique && is_extremal_povm(&joint_povm, S_STAR_TOL).extremal;
        let joint_boundary = is_boundary_povm(&mme.joint.as_povm()?, S_STAR_TOL);
        let extremal_jm = find_compatible_decomposition(tuple)?.is_none();
        Some(CompatibleFacts {
            s_star: mme.s_star,
            t_beyond,
            boundary_jm: t_beyond <= 1.0 + S_STAR_TOL,
            unique,
            dimension,
            joint_extremal,
            joint_boundary,
            extremal_jm,
        })
    } else {
        None
    };

    let ledger = ledger(&povm_extremal, &povm_boundary, extremal_p, boundary_p, compatible, compatible_facts.as_ref());
    let mut forbidden = Vec::new();
    if let Some(f) = &compatible_facts {
        if f.extremal_jm && !f.unique {
            forbidden.push("extremal in J_m but joint not unique");
        }
        if f.unique && !f.boundary_jm {
            forbidden.push("unique joint but interior of J_m");
        }
        if f.extremal_jm && !f.joint_extremal {
            forbidden.push("extremal in J_m but joint not extremal in P(d,n^m)");
        }
    }
    Ok(Classification {
        dim: tuple.dim(),
        outcomes: tuple.outcome_counts(),
        povm_extremal,
        povm_boundary,
        extremal_p,
        boundary_p,
        compatible,
        t_star,
        compatible_facts,
        ledger,
        forbidden,
    })
}

fn iff(a: bool, b: bool) -> RowStatus {
    if a == b {
        RowStatus::Holds
    } else {
        RowStatus::Violated
    }
}

fn implies(a: bool, b: bool) -> RowStatus {
    if !a || b {
        RowStatus::Holds
    } else {
        RowStatus::Violated
    }
}

fn witnessed(w: bool) -> RowStatus {
    if w {
        RowStatus::Witnessed
    } else {
        RowStatus::Silent
    }
}

fn ledger(
    povm_extremal: &[bool],
    povm_boundary: &[bool],
    extremal_p: bool,
    boundary_p: bool,
    compatible: bool,
    facts: Option<&CompatibleFacts>,
) -> Vec<LedgerRow> {
    let all_ext = povm_extremal.iter().all(|&x| x);
    let any_ext = povm_extremal.iter().any(|&x| x);
    let any_bdry = povm_boundary.iter().any(|&x| x);
    let row = |relation, status, values: String| LedgerRow { relation, status, values };
    let mut rows = vec![
        row(
            "all extremal in P(d,n) <=> extremal in P(d,n)^m",
            iff(all_ext, extremal_p),
            format!("{all_ext} / {extremal_p}"),
        ),
        row(
            "some boundary in P(d,n) <=> boundary in P(d,n)^m",
            iff(any_bdry, boundary_p),
            format!("{any_bdry} / {boundary_p}"),
        ),
    ];
    let na = |relation| LedgerRow { relation, status: RowStatus::NotApplicable, values: "incompatible".into() };
    match facts {
        None => {
            if povm_extremal.len() <= 2 {
                rows.push(row(
                    "some extremal in P(d,n) and compatible => unique",
                    RowStatus::Holds,
                    "incompatible".into(),
                ));
            } else {
                rows.push(na("some extremal in P(d,n) and compatible =/=> unique"));
            }
            rows.push(na("extremal in J_m <=> unique and joint extremal in P(d,n^m)"));
            rows.push(na("extremal in J_m <=/= unique"));
            rows.push(na("boundary in J_m <=> joint boundary in P(d,n^m)"));
            rows.push(na("boundary in J_m <= unique"));
            rows.push(na("boundary in J_m =/=> unique"));
        }
        Some(f) => {
            let premise = any_ext && compatible;
            // only pairs: with three measurements a projective member can
            // leave the other two free to correlate
            if povm_extremal.len() <= 2 {
                rows.push(row(
                    "some extremal in P(d,n) and compatible => unique",
                    implies(premise, f.unique),
                    format!("{premise} / {}", f.unique),
                ));
            } else {
                rows.push(row(
                    "some extremal in P(d,n) and compatible =/=> unique",
                    witnessed(premise && !f.unique),
                    format!("{premise} / {}", f.unique),
                ));
            }
            let rhs = f.unique && f.joint_extremal;
            rows.push(row(
                "extremal in J_m <=> unique and joint extremal in P(d,n^m)",
                iff(f.extremal_jm, rhs),
                format!("{} / {rhs}", f.extremal_jm),
            ));
            rows.push(row(
                "extremal in J_m <=/= unique",
                witnessed(f.unique && !f.extremal_jm),
                format!("{} / {}", f.extremal_jm, f.unique),
            ));
            rows.push(row(
                "boundary in J_m <=> joint boundary in P(d,n^m)",
                iff(f.boundary_jm, f.joint_boundary),
                format!("{} / {}", f.boundary_jm, f.joint_boundary),
            ));
            rows.push(row(
                "boundary in J_m <= unique",
                implies(f.unique, f.boundary_jm),
                format!("{} / {}", f.boundary_jm, f.unique),
            ));
            rows.push(row(
                "boundary in J_m =/=> unique",
                witnessed(f.boundary_jm && !f.unique),
                format!("{} / {}", f.boundary_jm, f.unique),
            ));
        }
    }
    rows
}

impl Classification {
    fn text(&self, tol: f64) -> Vec<String> {
        let mut out = vec![
            format!("tuple: {} measurement(s), d = {}, outcomes {:?}", self.outcomes.len(), self.dim, self.outcomes),
            tolerance_line(tol),
            format!("extremal POVMs: {:?}", self.povm_extremal),
            format!("boundary POVMs: {:?}", self.povm_boundary),
            format!("extremal in P^m: {}", yes(self.extremal_p)),
            format!("boundary of P^m: {}", yes(self.boundary_p)),
            format!("compatible: {}", yes(self.compatible)),
            format!("t* = {:.7}", self.t_star),
        ];
        if let Some(f) = &self.compatible_facts {
            out.push(format!("s* = {:.3e}", f.s_star));
            out.push(format!("boundary of J_m: {} (push past T reaches t = {:.7})", yes(f.boundary_jm), f.t_beyond));
            out.push(format!("unique joint: {} (joint set dimension {})", yes(f.unique), f.dimension));
            out.push(format!("extremal in J_m: {}", yes(f.extremal_jm)));
        }
        out.push("implication ledger:".into());
        for r in &self.ledger {
            let mark = match r.status {
                RowStatus::Holds => "✓",
                RowStatus::Violated => "✗",
                RowStatus::Witnessed => "★",
                RowStatus::Silent => "·",
                RowStatus::NotApplicable => "-",
            };
            out.push(format!("  {mark} {:<58} ({})", r.relation, r.values));
        }
        if self.forbidden.is_empty() {
            out.push("forbidden combinations: none".into());
        } else {
            for f in &self.forbidden {
                out.push(format!("FORBIDDEN: {f}"));
            }
        }
        out
    }
}

/// JSON with every float written to 17 significant digits.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SignificantDigits);
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

struct SignificantDigits;

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format_sig17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Positional notation for exponents in `[-5, 17)`, scientific otherwise.
pub fn format_sig17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        return sci;
    }
    let (sign, mantissa) = mantissa.strip_prefix('-').map_or(("", mantissa), |m| ("-", m));
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    if exp < 0 {
        format!("{sign}0.{}{digits}", "0".repeat((-exp - 1) as usize))
    } else {
        let split = exp as usize + 1;
        let frac = &digits[split..];
        format!("{sign}{}.{}", &digits[..split], if frac.is_empty() { "0" } else { frac })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seventeen_digits() {
        assert_eq!(format_sig17(0.1), "0.10000000000000001");
        assert_eq!(format_sig17(1.0 / 3.0), "0.33333333333333331");
        assert_eq!(format_sig17(1.0), "1.0000000000000000");
        assert_eq!(format_sig17(-2.5e-3), "-0.0025000000000000001");
        assert_eq!(format_sig17(1e-9), "1.0000000000000001e-9");
        assert_eq!(format_sig17(0.0), "0.0");
        assert_eq!(format_sig17(12345.0), "12345.000000000000");
    }

    proptest! {
        #[test]
        fn formatted_floats_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = format_sig17(x);
            prop_assert_eq!(s.parse::<f64>().unwrap(), x);
            let v: Value = serde_json::from_str(&to_json_string(&vec![x])).unwrap();
            prop_assert_eq!(v[0].as_f64().unwrap(), x);
        }
    }

    #[test]
    fn input_kinds_are_detected() {
        let t = fixtures::tuple_fixture(&FixtureName::Example2).unwrap();
        let s = to_json_string(&t);
        assert!(matches!(parse_input(&s, EPS_EQ).unwrap(), Input::Tuple(_)));
        let s = to_json_string(t.measurement(1));
        assert!(matches!(parse_input(&s, EPS_EQ).unwrap(), Input::Povm(_)));
        let j = fixtures::joint_fixture(&FixtureName::SicJointPlus).unwrap();
        let parsed = parse_input(&to_json_string(&j), EPS_EQ).unwrap();
        assert!(matches!(&parsed, Input::Joint(k) if *k == j));
        assert!(parse_input(r#"{"dim": 2}"#, EPS_EQ).is_err());
        assert!(parse_input(r#"{"dim": 2, "effects": [[[[1,0],[0,0]],[[0,0],[0,0]]]]}"#, EPS_EQ).is_err());
    }

    #[test]
    fn looser_tolerance_accepts_slightly_unnormalized_effects() {
        let s = r#"{"dim": 1, "effects": [[[[0.5,0]]], [[[0.5000001,0]]]]}"#;
        assert!(parse_input(s, 1e-8).is_err());
        assert!(parse_input(s, 1e-6).is_ok());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Incompatible { certificate_residual: 0.0 }), 1);
        assert_eq!(exit_code(&Error::solver("x", "y")), 3);
        assert_eq!(exit_code(&Error::UnknownFixture("x".into())), 2);
    }

    fn classify_fixture(name: FixtureName, t: Option<f64>) -> Classification {
        let mut tuple = fixtures::tuple_fixture(&name).unwrap();
        if let Some(t) = t {
            tuple = tuple.depolarize(t).unwrap();
        }
        classify(&tuple, 1e-8).unwrap()
    }

    #[test]
    fn classify_example_2() {
        let c = classify_fixture(FixtureName::Example2, None);
        let f = c.compatible_facts.as_ref().unwrap();
        assert!(f.unique && !f.extremal_jm && f.boundary_jm);
        assert!(c.forbidden.is_empty());
        assert!(c.ledger.iter().all(|r| r.status != RowStatus::Violated), "{:?}", c.ledger);
        assert!(c
            .ledger
            .iter()
            .any(|r| r.relation == "extremal in J_m <=/= unique" && r.status == RowStatus::Witnessed));
    }

    #[test]
    fn classify_pauli_at_critical_visibility() {
        let c = classify_fixture(FixtureName::PauliTriple, Some(1.0 / 3f64.sqrt()));
        let f = c.compatible_facts.as_ref().unwrap();
        assert!(!f.unique && f.boundary_jm && !f.extremal_jm);
        assert_eq!(f.dimension, 1);
        assert!(c.forbidden.is_empty());
        assert!(c.ledger.iter().all(|r| r.status != RowStatus::Violated), "{:?}", c.ledger);
        assert!(c
            .ledger
            .iter()
            .any(|r| r.relation == "boundary in J_m =/=> unique" && r.status == RowStatus::Witnessed));
    }

    #[test]
    fn classify_incompatible_pair() {
        let c = classify_fixture(FixtureName::PauliPairXz, None);
        assert!(!c.compatible && c.compatible_facts.is_none());
        assert!((c.t_star - 0.5f64.sqrt()).abs() < 1e-5);
        assert!(c.ledger.iter().all(|r| r.status != RowStatus::Violated));
    }

    #[test]
    fn classify_projective_member_with_two_coins() {
        let z = Povm::dichotomic(&HermitianOperator::pauli_z()).unwrap();
        let coin = Povm::trivial(&[0.5, 0.5], 2).unwrap();
        let c = classify(&MeasurementTuple::new(vec![z, coin.clone(), coin]).unwrap(), 1e-8).unwrap();
        assert!(!c.compatible_facts.as_ref().unwrap().unique);
        assert!(c.ledger.iter().all(|r| r.status != RowStatus::Violated), "{:?}", c.ledger);
        assert!(c
            .ledger
            .iter()
            .any(|r| r.relation == "some extremal in P(d,n) and compatible =/=> unique"
                && r.status == RowStatus::Witnessed));
    }
}
