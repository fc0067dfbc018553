//! Dense Hermitian operators.
//!
//! Everything downstream (effects, perturbations, SDP data) is built from
//! [`HermitianOperator`]. Hermiticity is enforced when a value is constructed,
//! so the rest of the crate can rely on exact symmetry.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const C1: Complex64 = Complex64::new(1.0, 0.0);
const CI: Complex64 = Complex64::new(0.0, 1.0);

/// Largest anti-Hermitian part accepted from external input, relative to the entry scale.
pub const PARSE_HERMITICITY_TOL: f64 = 1e-9;

#[derive(Clone, PartialEq)]
pub struct HermitianOperator {
    mat: CMatrix,
}

impl fmt::Debug for HermitianOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.mat.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>())).finish()
    }
}

impl HermitianOperator {
    /// Builds the Hermitian part `(X + X†)/2` of a square matrix.
    pub fn from_matrix(mat: CMatrix) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::NotSquare { rows: mat.nrows(), cols: mat.ncols() });
        }
        if mat.nrows() == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        Ok(Self::symmetrized(mat))
    }

    /// Like [`from_matrix`](Self::from_matrix), but rejects inputs whose
    /// anti-Hermitian part exceeds `tol · max(1, max |entry|)`.
    pub fn try_from_matrix(mat: CMatrix, tol: f64) -> Result<Self> {
        if mat.nrows() != mat.ncols() {
            return Err(Error::NotSquare { rows: mat.nrows(), cols: mat.ncols() });
        }
        let scale = mat.iter().map(|z| z.norm()).fold(1.0, f64::max);
        let deviation = (&mat - mat.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max) / 2.0;
        if deviation > tol * scale {
            return Err(Error::NotHermitian { deviation });
        }
        Self::from_matrix(mat)
    }

    fn symmetrized(mat: CMatrix) -> Self {
        let adj = mat.adjoint();
        let mut m = (mat + adj) * Complex64::new(0.5, 0.0);
        for i in 0..m.nrows() {
            m[(i, i)].im = 0.0;
        }
        Self { mat: m }
    }

    pub fn from_real(mat: DMatrix<f64>) -> Result<Self> {
        Self::from_matrix(mat.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn from_rows(rows: &[&[Complex64]]) -> Result<Self> {
        let d = rows.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::NotSquare { rows: d, cols: rows.first().map_or(0, |r| r.len()) });
        }
        Self::from_matrix(CMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    pub fn identity(dim: usize) -> Self {
        Self { mat: CMatrix::identity(dim, dim) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { mat: CMatrix::zeros(dim, dim) }
    }

    pub fn pauli_x() -> Self {
        Self { mat: CMatrix::from_row_slice(2, 2, &[C0, C1, C1, C0]) }
    }

    pub fn pauli_y() -> Self {
        Self { mat: CMatrix::from_row_slice(2, 2, &[C0, -CI, CI, C0]) }
    }

    pub fn pauli_z() -> Self {
        Self { mat: CMatrix::from_row_slice(2, 2, &[C1, C0, C0, -C1]) }
    }

    /// Rank-one projector onto `v` (not normalized: returns `v v†`).
    pub fn outer(v: &[Complex64]) -> Self {
        let d = v.len();
        Self::symmetrized(CMatrix::from_fn(d, d, |i, j| v[i] * v[j].conj()))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.mat[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.mat[(i, i)].re).sum()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self { mat: &self.mat * Complex64::new(factor, 0.0) }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `A·B` is generally not Hermitian; `A·B + B·A` is.
    pub fn anticommutator(&self, other: &Self) -> Self {
        Self::symmetrized(&self.mat * &other.mat + &other.mat * &self.mat)
    }

    pub fn square(&self) -> Self {
        Self::symmetrized(&self.mat * &self.mat)
    }

    /// `V† H V` for an isometry (or any conformable) `V`.
    pub fn compress(&self, v: &CMatrix) -> Self {
        Self::symmetrized(v.adjoint() * &self.mat * v)
    }

    /// `V X V†`: embeds an operator on the column space of `V`.
    pub fn expand(&self, v: &CMatrix) -> Self {
        Self::symmetrized(v * &self.mat * v.adjoint())
    }

    /// Eigenvalues in ascending order with matching eigenvector columns.
    pub fn eigh(&self) -> (Vec<f64>, CMatrix) {
        let eig = SymmetricEigen::new(self.mat.clone());
        let mut order: Vec<usize> = (0..self.dim()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = CMatrix::from_fn(self.dim(), self.dim(), |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigh().0
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(self)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigenvalues().last().expect("dim >= 1")
    }

    pub fn spectral_norm(&self) -> f64 {
        self.eigenvalues().iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn support_rank(&self, tol: f64) -> usize {
        support_rank(self, tol)
    }

    /// Orthonormal basis (as columns) of the span of eigenvectors whose
    /// eigenvalue magnitude exceeds `tol · max(1, ‖H‖₂)`, with those eigenvalues.
    pub fn support(&self, tol: f64) -> (CMatrix, Vec<f64>) {
        let (values, vectors) = self.eigh();
        let cutoff = tol * values.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
        let keep: Vec<usize> = (0..values.len()).filter(|&k| values[k].abs() > cutoff).collect();
        let basis = CMatrix::from_fn(self.dim(), keep.len(), |i, j| vectors[(i, keep[j])]);
        (basis, keep.iter().map(|&k| values[k]).collect())
    }

    /// `[[Re H, −Im H], [Im H, Re H]]`.
    pub fn real_embedding(&self) -> DMatrix<f64> {
        real_embedding(self)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.mat.iter().zip(other.mat.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(())
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self + other)
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(self - other)
    }
}

pub fn min_eigenvalue(h: &HermitianOperator) -> f64 {
    h.eigenvalues()[0]
}

/// Number of eigenvalues with `|λ| > tol · max(1, ‖H‖₂)`.
pub fn support_rank(h: &HermitianOperator, tol: f64) -> usize {
    let values = h.eigenvalues();
    let cutoff = tol * values.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
    values.iter().filter(|x| x.abs() > cutoff).count()
}

/// `tr(A·B)`, real for Hermitian arguments.
pub fn frobenius_inner(a: &HermitianOperator, b: &HermitianOperator) -> Result<f64> {
    a.check_dim(b)?;
    Ok(inner_unchecked(a, b))
}

pub(crate) fn inner_unchecked(a: &HermitianOperator, b: &HermitianOperator) -> f64 {
    a.mat.iter().zip(b.mat.iter()).map(|(x, y)| (x * y.conj()).re).sum()
}

pub fn real_embedding(h: &HermitianOperator) -> DMatrix<f64> {
    let d = h.dim();
    DMatrix::from_fn(2 * d, 2 * d, |i, j| {
        let z = h.mat[(i % d, j % d)];
        match (i < d, j < d) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

macro_rules! binop {
    ($tr:ident, $method:ident, $op:tt) => {
        impl $tr<&HermitianOperator> for &HermitianOperator {
            type Output = HermitianOperator;
            fn $method(self, rhs: &HermitianOperator) -> HermitianOperator {
                assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
                HermitianOperator { mat: &self.mat $op &rhs.mat }
            }
        }
        impl $tr<HermitianOperator> for HermitianOperator {
            type Output = HermitianOperator;
            fn $method(self, rhs: HermitianOperator) -> HermitianOperator {
                &self $op &rhs
            }
        }
        impl $tr<&HermitianOperator> for HermitianOperator {
            type Output = HermitianOperator;
            fn $method(self, rhs: &HermitianOperator) -> HermitianOperator {
                &self $op rhs
            }
        }
    };
}

binop!(Add, add, +);
binop!(Sub, sub, -);

impl AddAssign<&HermitianOperator> for HermitianOperator {
    fn add_assign(&mut self, rhs: &HermitianOperator) {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        self.mat += &rhs.mat;
    }
}

impl SubAssign<&HermitianOperator> for HermitianOperator {
    fn sub_assign(&mut self, rhs: &HermitianOperator) {
        assert_eq!(self.dim(), rhs.dim(), "dimension mismatch");
        self.mat -= &rhs.mat;
    }
}

impl Mul<f64> for &HermitianOperator {
    type Output = HermitianOperator;
    fn mul(self, rhs: f64) -> HermitianOperator {
        self.scale(rhs)
    }
}

impl Mul<f64> for HermitianOperator {
    type Output = HermitianOperator;
    fn mul(self, rhs: f64) -> HermitianOperator {
        self.scale(rhs)
    }
}

impl Mul<&HermitianOperator> for f64 {
    type Output = HermitianOperator;
    fn mul(self, rhs: &HermitianOperator) -> HermitianOperator {
        rhs.scale(self)
    }
}

impl Neg for &HermitianOperator {
    type Output = HermitianOperator;
    fn neg(self) -> HermitianOperator {
        self.scale(-1.0)
    }
}

impl Neg for HermitianOperator {
    type Output = HermitianOperator;
    fn neg(self) -> HermitianOperator {
        self.scale(-1.0)
    }
}

/// Sum of a non-empty slice of equally sized operators.
pub fn sum(ops: &[HermitianOperator], dim: usize) -> HermitianOperator {
    ops.iter().fold(HermitianOperator::zeros(dim), |mut acc, op| {
        acc += op;
        acc
    })
}

impl Serialize for HermitianOperator {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<[f64; 2]>> = self.mat.row_iter().map(|r| r.iter().map(|z| [z.re, z.im]).collect()).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HermitianOperator {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<[f64; 2]>>::deserialize(deserializer)?;
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(D::Error::custom("matrix must be a non-empty square array of [re, im] pairs"));
        }
        let mat = CMatrix::from_fn(d, d, |i, j| Complex64::new(rows[i][j][0], rows[i][j][1]));
        HermitianOperator::try_from_matrix(mat, PARSE_HERMITICITY_TOL).map_err(D::Error::custom)
    }
}

/// Orthonormal (Frobenius) basis of `Herm(C^d)`.
#[derive(Debug, Clone)]
pub struct HermitianBasis {
    dim: usize,
    elements: Vec<HermitianOperator>,
}

impl HermitianBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elements(&self) -> &[HermitianOperator] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn coordinates(&self, h: &HermitianOperator) -> Vec<f64> {
        self.elements.iter().map(|e| inner_unchecked(e, h)).collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> HermitianOperator {
        let mut acc = HermitianOperator::zeros(self.dim);
        for (c, e) in coords.iter().zip(&self.elements) {
            acc.mat += &e.mat * Complex64::new(*c, 0.0);
        }
        acc
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.elements.len();
        DMatrix::from_fn(n, n, |i, j| inner_unchecked(&self.elements[i], &self.elements[j]))
    }
}

/// Normalized generalized Gell-Mann basis: `I/√d`, then symmetric
/// off-diagonal, antisymmetric off-diagonal, then diagonal traceless elements.
pub fn hermitian_basis(dim: usize) -> HermitianBasis {
    assert!(dim >= 1, "dimension must be positive");
    let mut elements = Vec::with_capacity(dim * dim);
    elements.push(HermitianOperator::identity(dim).scale(1.0 / (dim as f64).sqrt()));
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for j in 0..dim {
        for k in j + 1..dim {
            let mut m = CMatrix::zeros(dim, dim);
            m[(j, k)] = Complex64::new(r, 0.0);
            m[(k, j)] = Complex64::new(r, 0.0);
            elements.push(HermitianOperator { mat: m });
        }
    }
    for j in 0..dim {
        for k in j + 1..dim {
            let mut m = CMatrix::zeros(dim, dim);
            m[(j, k)] = Complex64::new(0.0, -r);
            m[(k, j)] = Complex64::new(0.0, r);
            elements.push(HermitianOperator { mat: m });
        }
    }
    for l in 1..dim {
        let norm = 1.0 / ((l * (l + 1)) as f64).sqrt();
        let mut m = CMatrix::zeros(dim, dim);
        for i in 0..l {
            m[(i, i)] = Complex64::new(norm, 0.0);
        }
        m[(l, l)] = Complex64::new(-(l as f64) * norm, 0.0);
        elements.push(HermitianOperator { mat: m });
    }
    HermitianBasis { dim, elements }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn plus_x() -> HermitianOperator {
        (HermitianOperator::identity(2) + HermitianOperator::pauli_x()).scale(0.5)
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert_abs_diff_eq!(min_eigenvalue(&HermitianOperator::identity(2)), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(min_eigenvalue(&HermitianOperator::pauli_z()), -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(min_eigenvalue(&plus_x()), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn support_rank_examples() {
        assert_eq!(support_rank(&HermitianOperator::zeros(2), 1e-9), 0);
        assert_eq!(support_rank(&plus_x(), 1e-9), 1);
        assert_eq!(support_rank(&HermitianOperator::identity(2).scale(0.5), 1e-9), 2);
    }

    #[test]
    fn qubit_basis_is_scaled_paulis() {
        let b = hermitian_basis(2);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = [
            HermitianOperator::identity(2).scale(r),
            HermitianOperator::pauli_x().scale(r),
            HermitianOperator::pauli_y().scale(r),
            HermitianOperator::pauli_z().scale(r),
        ];
        for (e, x) in b.elements().iter().zip(&expected) {
            assert!(e.max_abs_diff(x) < 1e-15);
        }
    }

    #[test]
    fn basis_counts_and_gram() {
        for d in 1..=5 {
            let b = hermitian_basis(d);
            assert_eq!(b.len(), d * d);
            let gram = b.gram();
            let err = (gram - DMatrix::<f64>::identity(d * d, d * d)).amax();
            assert!(err < 1e-10, "d={d} gram error {err}");
        }
    }

    #[test]
    fn frobenius_inner_examples() {
        let (x, z) = (HermitianOperator::pauli_x(), HermitianOperator::pauli_z());
        assert_abs_diff_eq!(frobenius_inner(&x, &x).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(frobenius_inner(&x, &z).unwrap(), 0.0, epsilon = 1e-15);
        let i3 = HermitianOperator::identity(3);
        assert_abs_diff_eq!(frobenius_inner(&i3, &i3).unwrap(), 3.0, epsilon = 1e-15);
        assert!(matches!(frobenius_inner(&x, &i3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn real_embedding_examples() {
        let y = real_embedding(&HermitianOperator::pauli_y());
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, -1.0, 0.0,
            0.0, -1.0, 0.0, 0.0,
            1.0, 0.0, 0.0, 0.0,
        ]);
        assert_eq!(y, expected);
        let ev = sorted(SymmetricEigen::new(y).eigenvalues.iter().copied().collect());
        for (a, b) in ev.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
        assert_eq!(real_embedding(&HermitianOperator::identity(2)), DMatrix::identity(4, 4));
        let ev = sorted(SymmetricEigen::new(real_embedding(&plus_x())).eigenvalues.iter().copied().collect());
        for (a, b) in ev.iter().zip([0.0, 0.0, 1.0, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn symmetrizes_on_construction() {
        let m = CMatrix::from_row_slice(2, 2, &[C1, C1, C0, C0]);
        let h = HermitianOperator::from_matrix(m.clone()).unwrap();
        assert_eq!(h.entry(0, 1), h.entry(1, 0).conj());
        assert!(matches!(HermitianOperator::try_from_matrix(m, 1e-9), Err(Error::NotHermitian { .. })));
        let rect = CMatrix::zeros(2, 3);
        assert!(matches!(HermitianOperator::from_matrix(rect), Err(Error::NotSquare { .. })));
    }

    #[test]
    fn json_round_trip() {
        let h = HermitianOperator::pauli_y().scale(0.25) + HermitianOperator::identity(2);
        let s = serde_json::to_string(&h).unwrap();
        assert_eq!(s, "[[[1.0,0.0],[0.0,-0.25]],[[0.0,0.25],[1.0,0.0]]]");
        let back: HermitianOperator = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<HermitianOperator>("[[[1,0],[1,0]],[[0,0],[1,0]]]").is_err());
    }

    pub(crate) fn arb_hermitian(dim: usize) -> impl Strategy<Value = HermitianOperator> {
        proptest::collection::vec(-2.0..2.0f64, 2 * dim * dim).prop_map(move |v| {
            let m = CMatrix::from_fn(dim, dim, |i, j| Complex64::new(v[2 * (i * dim + j)], v[2 * (i * dim + j) + 1]));
            HermitianOperator::from_matrix(m).unwrap()
        })
    }

    proptest! {
        #[test]
        fn embedding_preserves_min_eigenvalue(h in (1usize..5).prop_flat_map(arb_hermitian)) {
            let emb = SymmetricEigen::new(real_embedding(&h)).eigenvalues;
            let emb_min = emb.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!((emb_min - min_eigenvalue(&h)).abs() < 1e-9);
        }

        #[test]
        fn rank_plus_kernel_is_dim(h in (1usize..5).prop_flat_map(arb_hermitian), tol in 1e-12..1e-2f64) {
            let values = h.eigenvalues();
            let scale = values.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
            let kernel = values.iter().filter(|x| x.abs() <= tol * scale).count();
            prop_assert_eq!(support_rank(&h, tol) + kernel, h.dim());
        }

        #[test]
        fn basis_expansion_round_trips(h in (1usize..5).prop_flat_map(arb_hermitian)) {
            let b = hermitian_basis(h.dim());
            let back = b.reconstruct(&b.coordinates(&h));
            prop_assert!((back - &h).frobenius_norm() < 1e-10);
        }
    }
}
