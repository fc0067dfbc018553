//! Canonical measurement families and seeded random generators.
//!
//! Outcome index 0 of a dichotomic measurement corresponds to the `+1`
//! eigenvalue (`a = +1`), index 1 to `a = −1`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::herm::{CMatrix, HermitianOperator};
use crate::joint::{multi_indices, JointMeasurement};
use crate::povm::{depolarize, MeasurementTuple, Povm};

#[derive(Debug, Clone, PartialEq)]
pub enum FixtureName {
    PauliTriple,
    PauliPairXz,
    Example2,
    /// Two qubit coins, `(p I, (1−p) I)` and `(q I, (1−q) I)`.
    TrivialCoins {
        p: f64,
        q: f64,
    },
    SicJointPlus,
    SicJointMinus,
    CentralJointTstar,
    PaperB,
    PaperC,
}

impl FixtureName {
    pub const ALL: [&'static str; 9] = [
        "pauli-triple",
        "pauli-pair-xz",
        "example-2",
        "trivial-coins",
        "sic-joint-plus",
        "sic-joint-minus",
        "central-joint-tstar",
        "paper-B",
        "paper-C",
    ];
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureName::PauliTriple => write!(f, "pauli-triple"),
            FixtureName::PauliPairXz => write!(f, "pauli-pair-xz"),
            FixtureName::Example2 => write!(f, "example-2"),
            FixtureName::TrivialCoins { p, q } => write!(f, "trivial-coins({p},{q})"),
            FixtureName::SicJointPlus => write!(f, "sic-joint-plus"),
            FixtureName::SicJointMinus => write!(f, "sic-joint-minus"),
            FixtureName::CentralJointTstar => write!(f, "central-joint-tstar"),
            FixtureName::PaperB => write!(f, "paper-B"),
            FixtureName::PaperC => write!(f, "paper-C"),
        }
    }
}

/// Accepts the names in [`FixtureName::ALL`]; `trivial-coins` takes optional
/// parameters as `trivial-coins(p,q)` and defaults to fair coins.
impl FromStr for FixtureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let name = s.trim();
        let fixed = match name.to_ascii_lowercase().as_str() {
            "pauli-triple" => Some(FixtureName::PauliTriple),
            "pauli-pair-xz" => Some(FixtureName::PauliPairXz),
            "example-2" => Some(FixtureName::Example2),
            "trivial-coins" => Some(FixtureName::TrivialCoins { p: 0.5, q: 0.5 }),
            "sic-joint-plus" => Some(FixtureName::SicJointPlus),
            "sic-joint-minus" => Some(FixtureName::SicJointMinus),
            "central-joint-tstar" => Some(FixtureName::CentralJointTstar),
            "paper-b" => Some(FixtureName::PaperB),
            "paper-c" => Some(FixtureName::PaperC),
            _ => None,
        };
        if let Some(f) = fixed {
            return Ok(f);
        }
        let args = name
            .strip_prefix("trivial-coins(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| Error::UnknownFixture(name.to_string()))?;
        let values: Vec<f64> = args
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParameter(format!("cannot parse coin biases in `{name}`")))?;
        match values[..] {
            [p, q] if (0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q) => Ok(FixtureName::TrivialCoins { p, q }),
            _ => Err(Error::InvalidParameter(format!("`{name}` needs two probabilities in [0, 1]"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Fixture {
    Tuple(MeasurementTuple),
    Joint(JointMeasurement),
}

pub fn make_fixture(name: &FixtureName) -> Result<Fixture> {
    let inv3 = 1.0 / 3f64.sqrt();
    Ok(match name {
        FixtureName::PauliTriple => Fixture::Tuple(MeasurementTuple::new(vec![
            Povm::dichotomic(&sx())?,
            Povm::dichotomic(&sy())?,
            Povm::dichotomic(&sz())?,
        ])?),
        FixtureName::PauliPairXz => {
            Fixture::Tuple(MeasurementTuple::new(vec![Povm::dichotomic(&sx())?, Povm::dichotomic(&sz())?])?)
        }
        FixtureName::Example2 => {
            Fixture::Tuple(MeasurementTuple::new(vec![Povm::trivial(&[1.0, 0.0], 2)?, Povm::trivial(&[0.5, 0.5], 2)?])?)
        }
        FixtureName::TrivialCoins { p, q } => Fixture::Tuple(MeasurementTuple::new(vec![
            Povm::trivial(&[*p, 1.0 - p], 2)?,
            Povm::trivial(&[*q, 1.0 - q], 2)?,
        ])?),
        FixtureName::SicJointPlus => Fixture::Joint(sic_joint(1.0)?),
        FixtureName::SicJointMinus => Fixture::Joint(sic_joint(-1.0)?),
        FixtureName::CentralJointTstar => {
            let effects = multi_indices(&[2, 2, 2])
                .iter()
                .map(|idx| {
                    let [a, b, c] = signs(idx);
                    (id() + bloch(a * inv3, b * inv3, c * inv3)).scale(0.125)
                })
                .collect();
            Fixture::Joint(JointMeasurement::new(vec![2, 2, 2], effects)?)
        }
        FixtureName::PaperB => {
            let first = paper_dichotomic(1.0, 1.0)?;
            let second = depolarize(&Povm::dichotomic(&sy())?, inv3)?;
            Fixture::Tuple(MeasurementTuple::new(vec![first.clone(), second, first])?)
        }
        FixtureName::PaperC => {
            let first = paper_dichotomic(1.0, -1.0)?;
            let second = depolarize(&Povm::dichotomic(&sy())?, inv3)?;
            let third = paper_dichotomic(-1.0, 1.0)?;
            Fixture::Tuple(MeasurementTuple::new(vec![first, second, third])?)
        }
    })
}

pub fn tuple_fixture(name: &FixtureName) -> Result<MeasurementTuple> {
    match make_fixture(name)? {
        Fixture::Tuple(t) => Ok(t),
        Fixture::Joint(_) => {
            Err(Error::InvalidParameter(format!("fixture `{name}` is a joint measurement, not a tuple")))
        }
    }
}

pub fn joint_fixture(name: &FixtureName) -> Result<JointMeasurement> {
    match make_fixture(name)? {
        Fixture::Joint(j) => Ok(j),
        Fixture::Tuple(_) => {
            Err(Error::InvalidParameter(format!("fixture `{name}` is a tuple, not a joint measurement")))
        }
    }
}

fn id() -> HermitianOperator {
    HermitianOperator::identity(2)
}

fn sx() -> HermitianOperator {
    HermitianOperator::pauli_x()
}

fn sy() -> HermitianOperator {
    HermitianOperator::pauli_y()
}

fn sz() -> HermitianOperator {
    HermitianOperator::pauli_z()
}

/// `xσx + yσy + zσz`.
fn bloch(x: f64, y: f64, z: f64) -> HermitianOperator {
    sx().scale(x) + sy().scale(y) + sz().scale(z)
}

fn signs(idx: &[usize]) -> [f64; 3] {
    [0, 1, 2].map(|j| 1.0 - 2.0 * idx[j] as f64)
}

/// Tetrahedral SIC embedded in eight outcomes: `¼(I + n·σ/√3)` with
/// `n = (a,b,c)` when `±(a,b,c)` is one of the four tetrahedron vertices,
/// zero otherwise. Equivalently `M_abc (1 ± abc)` for the central joint `M`.
fn sic_joint(sign: f64) -> Result<JointMeasurement> {
    const VERTICES: [[f64; 3]; 4] = [[1.0, 1.0, 1.0], [-1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0]];
    let inv3 = 1.0 / 3f64.sqrt();
    let effects = multi_indices(&[2, 2, 2])
        .iter()
        .map(|idx| {
            let [a, b, c] = signs(idx);
            if VERTICES.contains(&[sign * a, sign * b, sign * c]) {
                (id() + bloch(a * inv3, b * inv3, c * inv3)).scale(0.25)
            } else {
                HermitianOperator::zeros(2)
            }
        })
        .collect();
    JointMeasurement::new(vec![2, 2, 2], effects)
}

/// `Φ_{√(2/3)}` of the sharp dichotomic measurement along `(x σx + z σz)/√2`,
/// i.e. `(I ± (x σx + z σz)/√3)/2`.
fn paper_dichotomic(x: f64, z: f64) -> Result<Povm> {
    let axis = bloch(x, 0.0, z).scale(1.0 / 2f64.sqrt());
    depolarize(&Povm::dichotomic(&axis)?, (2.0 / 3.0f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PovmKind {
    FullRank,
    RankOne,
    /// Projective measurement in a random basis; the seed of compatible
    /// families generated by [`random_compatible_with_projective`].
    Projective,
}

impl FromStr for PovmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-rank" => Ok(PovmKind::FullRank),
            "rank-one" => Ok(PovmKind::RankOne),
            "projective" | "projective-compatible-pair-seed" => Ok(PovmKind::Projective),
            other => Err(Error::InvalidParameter(format!("unknown POVM kind `{other}`"))),
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}

/// Haar-distributed unitary via QR of a complex Gaussian matrix.
fn random_unitary(rng: &mut ChaCha8Rng, dim: usize) -> CMatrix {
    let qr = gaussian_matrix(rng, dim, dim).qr();
    let (q, r) = qr.unpack();
    let phases =
        CMatrix::from_diagonal(
            &r.diagonal().map(|z| if z.norm() > 0.0 { z / z.norm() } else { Complex64::new(1.0, 0.0) }),
        );
    q * phases
}

fn inverse_sqrt(s: &HermitianOperator) -> Result<CMatrix> {
    let (values, vectors) = s.eigh();
    if values[0] <= 1e-12 * values[values.len() - 1].max(1.0) {
        return Err(Error::InvalidParameter("random effects do not span the space".into()));
    }
    let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        values.len(),
        values.iter().map(|v| Complex64::new(1.0 / v.sqrt(), 0.0)),
    ));
    Ok(&vectors * diag * vectors.adjoint())
}

fn check_shape(dim: usize, n: usize) -> Result<()> {
    if dim == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("need dim >= 1 and n >= 1, got dim {dim}, n {n}")));
    }
    Ok(())
}

/// Random POVM `S^{-1/2} G_i S^{-1/2}` with `G_i = X X†`, deterministic per seed.
pub fn random_povm(dim: usize, n: usize, kind: PovmKind, seed: u64) -> Result<Povm> {
    check_shape(dim, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_povm_from(&mut rng, dim, n, kind)
}

fn random_povm_from(rng: &mut ChaCha8Rng, dim: usize, n: usize, kind: PovmKind) -> Result<Povm> {
    match kind {
        PovmKind::FullRank | PovmKind::RankOne => {
            if kind == PovmKind::RankOne && n < dim {
                return Err(Error::InvalidParameter(format!(
                    "{n} rank-one effects cannot sum to the identity in dimension {dim}"
                )));
            }
            let cols = if kind == PovmKind::FullRank { dim } else { 1 };
            let grams: Vec<CMatrix> = (0..n)
                .map(|_| {
                    let x = gaussian_matrix(rng, dim, cols);
                    &x * x.adjoint()
                })
                .collect();
            let total = HermitianOperator::from_matrix(grams.iter().fold(CMatrix::zeros(dim, dim), |acc, g| acc + g))?;
            let w = inverse_sqrt(&total)?;
            let effects =
                grams.iter().map(|g| HermitianOperator::from_matrix(&w * g * &w)).collect::<Result<Vec<_>>>()?;
            Povm::new(effects)
        }
        PovmKind::Projective => {
            if n > dim {
                return Err(Error::InvalidParameter(format!(
                    "a projective measurement in dimension {dim} has at most {dim} nonzero outcomes, asked for {n}"
                )));
            }
            let u = random_unitary(rng, dim);
            Povm::new(projectors(&u, &group_sizes(dim, n)))
        }
    }
}

/// Splits `dim` basis vectors into `n` consecutive nonempty groups.
fn group_sizes(dim: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| dim / n + usize::from(k < dim % n)).collect()
}

fn projectors(u: &CMatrix, sizes: &[usize]) -> Vec<HermitianOperator> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let cols = u.columns(start, len).into_owned();
            start += len;
            HermitianOperator::from_matrix(&cols * cols.adjoint()).expect("square")
        })
        .collect()
}

/// `m` independent full-rank random POVMs, each depolarized to `t`.
pub fn random_tuple(dim: usize, n: usize, m: usize, t: f64, seed: u64) -> Result<MeasurementTuple> {
    check_shape(dim, n)?;
    if m == 0 {
        return Err(Error::InvalidParameter("a tuple needs m >= 1".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("visibility t = {t} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let measurements = (0..m)
        .map(|_| depolarize(&random_povm_from(&mut rng, dim, n, PovmKind::FullRank)?, t))
        .collect::<Result<_>>()?;
    MeasurementTuple::new(measurements)
}

/// A compatible tuple whose first measurement is projective: every
/// measurement is diagonal in one shared random basis, so all of them commute.
/// The remaining measurements have random diagonal weights.
pub fn random_compatible_with_projective(dim: usize, n: usize, m: usize, seed: u64) -> Result<MeasurementTuple> {
    check_shape(dim, n)?;
    if m == 0 || n > dim {
        return Err(Error::InvalidParameter(format!("need m >= 1 and n <= dim, got m {m}, n {n}, dim {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_unitary(&mut rng, dim);
    let mut measurements = vec![Povm::new(projectors(&u, &group_sizes(dim, n)))?];
    for _ in 1..m {
        // weights[k][i]: weight of basis vector i in outcome k, normalized per i
        let mut weights = DMatrix::<f64>::from_fn(n, dim, |_, _| rng.random::<f64>() + 0.05);
        for mut col in weights.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        let effects = (0..n)
            .map(|k| {
                let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    dim,
                    (0..dim).map(|i| Complex64::new(weights[(k, i)], 0.0)),
                ));
                HermitianOperator::from_matrix(&u * diag * u.adjoint())
            })
            .collect::<Result<Vec<_>>>()?;
        measurements.push(Povm::new(effects)?);
    }
    MeasurementTuple::new(measurements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::herm::frobenius_inner;
    use crate::joint::verify_joint;
    use crate::povm::{is_extremal_povm, is_projective, validate_povm};
    use nalgebra::SVD;

    #[test]
    fn names_round_trip() {
        for s in FixtureName::ALL {
            let name: FixtureName = s.parse().unwrap();
            assert!(make_fixture(&name).is_ok(), "{s}");
        }
        assert_eq!(
            "trivial-coins(0.5, 0.25)".parse::<FixtureName>().unwrap(),
            FixtureName::TrivialCoins { p: 0.5, q: 0.25 }
        );
        assert!(matches!("nope".parse::<FixtureName>(), Err(Error::UnknownFixture(_))));
        assert!(matches!("trivial-coins(1.5,0.2)".parse::<FixtureName>(), Err(Error::InvalidParameter(_))));
        assert!(matches!("trivial-coins(0.5)".parse::<FixtureName>(), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn pauli_triple_is_projective() {
        let t = tuple_fixture(&FixtureName::PauliTriple).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.measurements().iter().all(|m| is_projective(m, 1e-15)));
        let plus_z = t.measurement(2).effect(0);
        assert_eq!(plus_z.entry(0, 0).re, 1.0);
    }

    #[test]
    fn example_2_closed_form() {
        let t = tuple_fixture(&FixtureName::Example2).unwrap();
        assert_eq!(t.measurement(0).effects(), &[id(), HermitianOperator::zeros(2)]);
        assert_eq!(t.measurement(1).effects(), &[id().scale(0.5), id().scale(0.5)]);
    }

    #[test]
    fn sic_joints_are_rank_one_tetrahedra() {
        let plus = joint_fixture(&FixtureName::SicJointPlus).unwrap();
        assert_eq!(plus.len(), 8);
        let nonzero: Vec<_> = plus.effects().iter().filter(|e| e.frobenius_norm() > 0.0).collect();
        assert_eq!(nonzero.len(), 4);
        for e in nonzero {
            assert_eq!(e.support_rank(1e-12), 1);
            assert!((e.trace() - 0.5).abs() < 1e-15);
        }
        assert_eq!(plus.effect(&[0, 0, 0]).support_rank(1e-12), 1);
        assert_eq!(plus.effect(&[1, 1, 1]).frobenius_norm(), 0.0);
    }

    #[test]
    fn joint_fixture_invariants() {
        let target = tuple_fixture(&FixtureName::PauliTriple).unwrap().depolarize(1.0 / 3f64.sqrt()).unwrap();
        let central = joint_fixture(&FixtureName::CentralJointTstar).unwrap();
        assert!(verify_joint(&central, &target, 1e-12).unwrap().ok);
        let plus = joint_fixture(&FixtureName::SicJointPlus).unwrap();
        let minus = joint_fixture(&FixtureName::SicJointMinus).unwrap();
        assert!(verify_joint(&plus, &target, 1e-12).unwrap().ok);
        assert!(verify_joint(&minus, &target, 1e-12).unwrap().ok);
        assert!(plus.mix(&minus, 0.5).unwrap().distance(&central).unwrap() < 1e-12);
    }

    #[test]
    fn paper_b_and_c_average_to_depolarized_triple() {
        let b = tuple_fixture(&FixtureName::PaperB).unwrap();
        let c = tuple_fixture(&FixtureName::PaperC).unwrap();
        let target = tuple_fixture(&FixtureName::PauliTriple).unwrap().depolarize(1.0 / 3f64.sqrt()).unwrap();
        for j in 0..3 {
            for k in 0..2 {
                let avg = (b.measurement(j).effect(k) + c.measurement(j).effect(k)).scale(0.5);
                assert!(avg.max_abs_diff(target.measurement(j).effect(k)) < 1e-15);
            }
        }
        // B^(1) = (I + (σx + σz)/√3)/2 in closed form
        let inv3 = 1.0 / 3f64.sqrt();
        let want = (id() + bloch(inv3, 0.0, inv3)).scale(0.5);
        assert!(b.measurement(0).effect(0).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn random_povms_are_valid_and_deterministic() {
        let a = random_povm(2, 2, PovmKind::FullRank, 7).unwrap();
        assert_eq!(a, random_povm(2, 2, PovmKind::FullRank, 7).unwrap());
        assert_ne!(a, random_povm(2, 2, PovmKind::FullRank, 8).unwrap());
        for seed in 0..20 {
            for kind in [PovmKind::FullRank, PovmKind::RankOne, PovmKind::Projective] {
                let p = random_povm(3, 3, kind, seed).unwrap();
                assert!(validate_povm(p.effects().to_vec(), 1e-8).is_ok());
            }
        }
        assert!(random_povm(2, 3, PovmKind::Projective, 0).is_err());
        assert!(random_povm(3, 2, PovmKind::RankOne, 0).is_err());
        assert!(random_povm(0, 2, PovmKind::FullRank, 0).is_err());
        assert!(is_projective(&random_povm(3, 2, PovmKind::Projective, 1).unwrap(), 1e-12));
    }

    #[test]
    fn rank_one_extremality_matches_gram_oracle() {
        for seed in [3, 4, 5, 6] {
            let p = random_povm(2, 4, PovmKind::RankOne, seed).unwrap();
            let e = p.effects();
            let gram = DMatrix::from_fn(4, 4, |i, j| frobenius_inner(&e[i], &e[j]).unwrap());
            let independent = SVD::new(gram, false, false).rank(1e-10) == 4;
            assert_eq!(is_extremal_povm(&p, 1e-8).extremal, independent, "seed {seed}");
        }
    }

    #[test]
    fn random_tuples() {
        let flat = random_tuple(2, 3, 2, 0.0, 1).unwrap();
        assert!(flat.measurements().iter().all(|m| m.is_trivial(1e-14)));
        assert_eq!(random_tuple(2, 2, 2, 0.3, 9).unwrap(), random_tuple(2, 2, 2, 0.3, 9).unwrap());
        assert!(random_tuple(2, 2, 2, 1.2, 9).is_err());
        let c = random_compatible_with_projective(2, 2, 3, 5).unwrap();
        assert!(is_projective(c.measurement(0), 1e-12));
        // all elements commute
        for a in c.measurements() {
            for b in c.measurements() {
                let (x, y) = (a.effect(0).matrix(), b.effect(0).matrix());
                assert!((x * y - y * x).norm() < 1e-12);
            }
        }
    }
}
