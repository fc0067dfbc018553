//! Convex decompositions of a compatible tuple built from two distinct joints.
//!
//! With `D = M' − M` and a pivot multi-index `p` where `D_p ≠ 0`, round `k`
//! keeps `D` only where the first `k` scheduled parties sit at their pivot
//! outcome: `M + δD` and `M' − δD` are joints whose marginals average to `T`.
//! Round `m − 1` isolates `D_p` on the last scheduled party and cannot be
//! trivial.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::herm::HermitianOperator;
use crate::joint::{find_joint, marginals, unflatten, verify_joint, Compatibility, JointMeasurement};
use crate::povm::{validate_povm, MeasurementTuple, Povm};
use crate::{EPS_EQ, EPS_UNIQUE};

#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub plus: MeasurementTuple,
    pub minus: MeasurementTuple,
    pub rounds_used: usize,
    pub joint_plus: JointMeasurement,
    pub joint_minus: JointMeasurement,
}

/// Splits `T = ½(plus + minus)` into compatible tuples, at least one
/// differing from `T`.
pub fn decompose_tuple(
    tuple: &MeasurementTuple,
    m: &JointMeasurement,
    m_prime: &JointMeasurement,
) -> Result<Decomposition> {
    let schedule: Vec<usize> = (0..tuple.len()).collect();
    run(tuple, m, m_prime, &schedule, None)
}

/// Splits the single measurement `A^(j)` (0-based) into two distinct POVMs,
/// each part of a compatible tuple that decomposes `T`.
pub fn decompose_measurement(
    tuple: &MeasurementTuple,
    j: usize,
    m: &JointMeasurement,
    m_prime: &JointMeasurement,
) -> Result<(Povm, Povm)> {
    let dec = decompose_measurement_full(tuple, j, m, m_prime)?;
    Ok((dec.plus.measurement(j).clone(), dec.minus.measurement(j).clone()))
}

/// Like [`decompose_measurement`], returning the whole decomposition.
pub fn decompose_measurement_full(
    tuple: &MeasurementTuple,
    j: usize,
    m: &JointMeasurement,
    m_prime: &JointMeasurement,
) -> Result<Decomposition> {
    if j >= tuple.len() {
        return Err(Error::PartyOutOfRange { party: j, parties: tuple.len() });
    }
    let schedule: Vec<usize> = (0..tuple.len()).filter(|&s| s != j).chain([j]).collect();
    run(tuple, m, m_prime, &schedule, Some(j))
}

/// Lexicographically first multi-index (flat) of maximal `‖D_a‖_F`.
pub(crate) fn pivot(blocks: &[HermitianOperator]) -> (usize, f64) {
    blocks.iter().enumerate().fold((0, 0.0), |(best, norm), (a, b)| {
        let n = b.frobenius_norm();
        if n > norm {
            (a, n)
        } else {
            (best, norm)
        }
    })
}

fn run(
    tuple: &MeasurementTuple,
    m: &JointMeasurement,
    m_prime: &JointMeasurement,
    schedule: &[usize],
    target: Option<usize>,
) -> Result<Decomposition> {
    for (which, joint) in [("M", m), ("M'", m_prime)] {
        let check = verify_joint(joint, tuple, EPS_EQ)?;
        if !check.ok {
            return Err(Error::NotAJoint { which: which.into(), residual: check.residual });
        }
    }
    let counts = tuple.outcome_counts();
    let d: Vec<HermitianOperator> = m.effects().iter().zip(m_prime.effects()).map(|(a, b)| b - a).collect();
    let (p, norm) = pivot(&d);
    if norm <= EPS_EQ {
        return Err(Error::ZeroPerturbation);
    }
    let p = unflatten(p, &counts);
    let parties = tuple.len();

    let mut last = None;
    for k in 1..parties {
        let masked = &schedule[..k];
        let (plus_effects, minus_effects): (Vec<_>, Vec<_>) = m
            .effects()
            .iter()
            .zip(m_prime.effects())
            .zip(&d)
            .enumerate()
            .map(|(flat, ((mm, mp), dd))| {
                let a = unflatten(flat, &counts);
                if masked.iter().all(|&s| a[s] == p[s]) {
                    (mm + dd, mp - dd)
                } else {
                    (mm.clone(), mp.clone())
                }
            })
            .unzip();
        let joint_plus = JointMeasurement::from_parts(m.dim(), counts.clone(), plus_effects);
        let joint_minus = JointMeasurement::from_parts(m.dim(), counts.clone(), minus_effects);
        let plus = marginals(&joint_plus)?;
        let minus = marginals(&joint_minus)?;
        let deviation = match target {
            Some(j) => plus.measurement(j).distance(tuple.measurement(j))?,
            None => plus.distance(tuple)?,
        };
        let dec = Decomposition { plus, minus, rounds_used: k, joint_plus, joint_minus };
        if deviation >= EPS_UNIQUE {
            return Ok(dec);
        }
        last = Some(dec);
    }
    // Only reachable with a pivot below the triviality threshold; the last
    // round still carries it.
    last.ok_or(Error::ZeroPerturbation)
}

#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    /// Largest per-effect Frobenius distance between `½(B + C)` and `T`.
    pub average_residual: f64,
    pub plus_valid: bool,
    pub minus_valid: bool,
    pub plus_compatible: bool,
    pub minus_compatible: bool,
    /// Largest per-effect distance of either half from `T`.
    pub deviation: f64,
    pub nontrivial: bool,
    pub ok: bool,
}

/// Checks `T = ½(B + C)` with `B`, `C` valid and compatible. Triviality is
/// reported but does not fail the check.
pub fn verify_decomposition(
    tuple: &MeasurementTuple,
    b: &MeasurementTuple,
    c: &MeasurementTuple,
    tol: f64,
) -> Result<DecompositionReport> {
    check_shape(tuple, b)?;
    check_shape(tuple, c)?;
    let mut average_residual = 0.0_f64;
    for ((t, x), y) in tuple.measurements().iter().zip(b.measurements()).zip(c.measurements()) {
        for ((te, xe), ye) in t.effects().iter().zip(x.effects()).zip(y.effects()) {
            average_residual = average_residual.max(((xe + ye).scale(0.5) - te).frobenius_norm());
        }
    }
    let valid =
        |s: &MeasurementTuple| s.measurements().iter().all(|p| validate_povm(p.effects().to_vec(), tol).is_ok());
    let compatible =
        |s: &MeasurementTuple| -> Result<bool> { Ok(matches!(find_joint(s)?, Compatibility::Compatible(_))) };
    let plus_valid = valid(b);
    let minus_valid = valid(c);
    let plus_compatible = compatible(b)?;
    let minus_compatible = compatible(c)?;
    let deviation = b.distance(tuple)?.max(c.distance(tuple)?);
    let nontrivial = deviation >= EPS_UNIQUE;
    let ok = average_residual <= tol && plus_valid && minus_valid && plus_compatible && minus_compatible;
    Ok(DecompositionReport {
        average_residual,
        plus_valid,
        minus_valid,
        plus_compatible,
        minus_compatible,
        deviation,
        nontrivial,
        ok,
    })
}

fn check_shape(a: &MeasurementTuple, b: &MeasurementTuple) -> Result<()> {
    if a.dim() != b.dim() || a.outcome_counts() != b.outcome_counts() {
        return Err(Error::ShapeMismatch(format!(
            "tuples with outcome counts {:?} (d={}) and {:?} (d={})",
            a.outcome_counts(),
            a.dim(),
            b.outcome_counts(),
            b.dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, FixtureName};
    use crate::joint::{multi_indices, product_joint_trivial, MarginalPerturbation};
    use crate::unique::find_marginal_perturbation;

    fn pauli_tstar() -> MeasurementTuple {
        fixtures::tuple_fixture(&FixtureName::PauliTriple).unwrap().depolarize(1.0 / 3f64.sqrt()).unwrap()
    }

    fn sic(name: FixtureName) -> JointMeasurement {
        fixtures::joint_fixture(&name).unwrap()
    }

    fn assert_decomposes(t: &MeasurementTuple, dec: &Decomposition) {
        let report = verify_decomposition(t, &dec.plus, &dec.minus, EPS_EQ).unwrap();
        assert!(report.ok, "{report:?}");
        assert!(report.nontrivial);
        assert!(verify_joint(&dec.joint_plus, &dec.plus, EPS_EQ).unwrap().ok);
        assert!(verify_joint(&dec.joint_minus, &dec.minus, EPS_EQ).unwrap().ok);
        assert!(dec.rounds_used < t.len());
    }

    fn coins_pair() -> (MeasurementTuple, JointMeasurement, JointMeasurement) {
        let t = fixtures::tuple_fixture(&FixtureName::TrivialCoins { p: 0.5, q: 0.5 }).unwrap();
        let m = product_joint_trivial(&[vec![0.5, 0.5], vec![0.5, 0.5]], 2).unwrap();
        let d = find_marginal_perturbation(&m).unwrap().unwrap();
        let m2 = d.apply(&m).unwrap();
        (t, m, m2)
    }

    #[test]
    fn pauli_sic_joints_decompose() {
        let t = pauli_tstar();
        let dec = decompose_tuple(&t, &sic(FixtureName::SicJointPlus), &sic(FixtureName::SicJointMinus)).unwrap();
        assert_decomposes(&t, &dec);
        assert!(dec.rounds_used <= 2);
    }

    #[test]
    fn identical_joints_are_rejected() {
        let m = sic(FixtureName::SicJointPlus);
        assert!(matches!(decompose_tuple(&pauli_tstar(), &m, &m), Err(Error::ZeroPerturbation)));
    }

    #[test]
    fn foreign_joint_is_rejected() {
        let t = fixtures::tuple_fixture(&FixtureName::PauliTriple).unwrap().depolarize(0.5).unwrap();
        let m = sic(FixtureName::SicJointPlus);
        let r = decompose_tuple(&t, &m, &sic(FixtureName::SicJointMinus));
        assert!(matches!(r, Err(Error::NotAJoint { .. })));
    }

    #[test]
    fn uniform_coins_decompose() {
        let (t, m, m2) = coins_pair();
        let dec = decompose_tuple(&t, &m, &m2).unwrap();
        assert_decomposes(&t, &dec);
        assert!(find_joint(&dec.plus).unwrap().joint().is_some());
        assert!(find_joint(&dec.minus).unwrap().joint().is_some());
        let (b, c) = decompose_measurement(&t, 0, &m, &m2).unwrap();
        assert!(b.distance(&c).unwrap() >= EPS_UNIQUE);
        for ((x, y), a) in b.effects().iter().zip(c.effects()).zip(t.measurement(0).effects()) {
            assert!(((x + y).scale(0.5) - a).frobenius_norm() < 1e-12);
        }
    }

    #[test]
    fn pauli_second_measurement_splits() {
        let t = pauli_tstar();
        let (b, c) =
            decompose_measurement(&t, 1, &sic(FixtureName::SicJointPlus), &sic(FixtureName::SicJointMinus)).unwrap();
        assert!(b.distance(t.measurement(1)).unwrap() >= EPS_UNIQUE);
        for ((x, y), a) in b.effects().iter().zip(c.effects()).zip(t.measurement(1).effects()) {
            assert!(((x + y).scale(0.5) - a).frobenius_norm() < 1e-12);
        }
        for j in 0..3 {
            let (b, _) =
                decompose_measurement(&t, j, &sic(FixtureName::SicJointPlus), &sic(FixtureName::SicJointMinus))
                    .unwrap();
            assert!(b.distance(t.measurement(j)).unwrap() >= EPS_UNIQUE);
        }
    }

    #[test]
    fn cascading_constraint_holds_after_trivial_rounds() {
        // D_{0bc} = bc·H, D_{1bc} = 0 has zero marginals and leaves round 1 trivial.
        let coin = Povm::trivial(&[0.5, 0.5], 2).unwrap();
        let t = MeasurementTuple::new(vec![coin.clone(), coin.clone(), coin]).unwrap();
        let counts = [2, 2, 2];
        let eighth = HermitianOperator::identity(2).scale(0.125);
        let h = HermitianOperator::pauli_x().scale(0.05);
        let m = JointMeasurement::new(counts.to_vec(), vec![eighth.clone(); 8]).unwrap();
        let d: Vec<HermitianOperator> =
            multi_indices(&counts)
                .iter()
                .map(|a| {
                    if a[0] == 0 {
                        h.scale(if a[1] == a[2] { 1.0 } else { -1.0 })
                    } else {
                        HermitianOperator::zeros(2)
                    }
                })
                .collect();
        let m2 = MarginalPerturbation::new(counts.to_vec(), d.clone(), EPS_EQ).unwrap().apply(&m).unwrap();
        let dec = decompose_tuple(&t, &m, &m2).unwrap();
        assert_eq!(dec.rounds_used, 2);
        assert_decomposes(&t, &dec);
        let p = unflatten(pivot(&d).0, &counts);
        for k in 1..dec.rounds_used {
            let mut sum = HermitianOperator::zeros(2);
            for (flat, a) in multi_indices(&counts).iter().enumerate() {
                if (0..=k).all(|s| a[s] == p[s]) {
                    sum += &d[flat];
                }
            }
            assert!(sum.frobenius_norm() < EPS_EQ);
        }
    }

    #[test]
    fn paper_b_c_decompose_depolarized_triple() {
        let b = fixtures::tuple_fixture(&FixtureName::PaperB).unwrap();
        let c = fixtures::tuple_fixture(&FixtureName::PaperC).unwrap();
        let report = verify_decomposition(&pauli_tstar(), &b, &c, 1e-7).unwrap();
        assert!(report.ok && report.nontrivial, "{report:?}");
    }

    #[test]
    fn trivial_and_wrong_decompositions() {
        let t = pauli_tstar();
        let report = verify_decomposition(&t, &t, &t, 1e-7).unwrap();
        assert!(report.ok && !report.nontrivial);
        let other = fixtures::tuple_fixture(&FixtureName::PauliTriple).unwrap().depolarize(0.3).unwrap();
        let report = verify_decomposition(&t, &other, &other, 1e-7).unwrap();
        assert!(!report.ok);
        assert!(report.average_residual > 0.1);
        let pair = fixtures::tuple_fixture(&FixtureName::PauliPairXz).unwrap();
        assert!(matches!(verify_decomposition(&t, &pair, &pair, 1e-7), Err(Error::ShapeMismatch(_))));
    }
}
