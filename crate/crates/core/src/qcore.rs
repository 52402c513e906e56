//! Dense complex matrices and vectors for the small operator spaces used
//! throughout the crate (system dimension times ancilla dimension ≤ 16).
//!
//! Tensor products use a big-endian convention: in `a.tensor(&b)` the left
//! factor carries the most significant index, so for the system/ancilla
//! register the system is always the first factor.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Default absolute per-entry tolerance for matrix predicates.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Largest operator dimension accepted by the quantum-object constructors.
pub const MAX_DIM: usize = 16;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Complex matrix with row-major construction helpers.
#[derive(Clone, PartialEq)]
pub struct CMatrix(DMatrix<C64>);

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows(), self.cols())?;
        for r in 0..self.rows() {
            write!(f, "  ")?;
            for col in 0..self.cols() {
                let z = self.get(r, col);
                write!(f, "{:+.6}{:+.6}i  ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix(DMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        CMatrix(DMatrix::identity(n, n))
    }

    /// Builds a matrix from entries in row-major order.
    pub fn from_row_major(rows: usize, cols: usize, entries: Vec<C64>) -> Result<Self> {
        if rows * cols != entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        Ok(CMatrix(DMatrix::from_row_slice(rows, cols, &entries)))
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged matrix rows".into()));
        }
        let entries: Vec<C64> = rows.iter().flatten().copied().collect();
        Self::from_row_major(rows.len(), cols, entries)
    }

    /// Real-valued convenience constructor, row-major.
    pub fn from_real(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        Self::from_row_major(rows, cols, entries.iter().map(|&x| c(x, 0.0)).collect())
    }

    pub fn diagonal(entries: &[C64]) -> Self {
        let n = entries.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &z) in entries.iter().enumerate() {
            m[(i, i)] = z;
        }
        CMatrix(m)
    }

    /// `|ket⟩⟨bra|`.
    pub fn outer(ket: &CVector, bra: &CVector) -> Self {
        CMatrix(&ket.0 * bra.0.adjoint())
    }

    /// Matrix unit `|i⟩⟨j|` in dimension `d`.
    pub fn unit(d: usize, i: usize, j: usize) -> Self {
        let mut m = DMatrix::zeros(d, d);
        m[(i, j)] = ONE;
        CMatrix(m)
    }

    pub fn from_nalgebra(m: DMatrix<C64>) -> Self {
        CMatrix(m)
    }

    pub fn as_nalgebra(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn is_square(&self) -> bool {
        self.rows() == self.cols()
    }

    pub fn get(&self, r: usize, col: usize) -> C64 {
        self.0[(r, col)]
    }

    pub fn set(&mut self, r: usize, col: usize, z: C64) {
        self.0[(r, col)] = z;
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<C64> {
        self.0.transpose().iter().copied().collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<C64>> {
        (0..self.rows())
            .map(|r| (0..self.cols()).map(|col| self.get(r, col)).collect())
            .collect()
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.cols() != other.rows() {
            return Err(Error::DimensionMismatch {
                op: "compose",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(CMatrix(&self.0 * &other.0))
    }

    pub fn adjoint(&self) -> CMatrix {
        CMatrix(self.0.adjoint())
    }

    pub fn transpose(&self) -> CMatrix {
        CMatrix(self.0.transpose())
    }

    pub fn conj(&self) -> CMatrix {
        CMatrix(self.0.map(|z| z.conj()))
    }

    pub fn trace(&self) -> Result<C64> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "trace",
                rows: self.rows(),
                cols: self.cols(),
            });
        }
        Ok(self.0.trace())
    }

    /// Kronecker product, left factor most significant.
    pub fn tensor(&self, other: &CMatrix) -> CMatrix {
        CMatrix(self.0.kronecker(&other.0))
    }

    pub fn scale(&self, z: C64) -> CMatrix {
        CMatrix(&self.0 * z)
    }

    pub fn scale_real(&self, x: f64) -> CMatrix {
        self.scale(c(x, 0.0))
    }

    pub fn try_add(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(CMatrix(&self.0 + &other.0))
    }

    /// `U · self · U†`.
    pub fn conjugate_by(&self, u: &CMatrix) -> CMatrix {
        CMatrix(&u.0 * &self.0 * u.0.adjoint())
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entry-wise modulus of `self - other`; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq(&self, other: &CMatrix, tol: f64) -> bool {
        self.max_abs_diff(other) <= tol
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.is_square() && self.max_abs_diff(&self.adjoint()) <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.is_square() && (&self.adjoint() * self).approx_eq(&CMatrix::identity(self.rows()), tol)
    }

    pub fn is_diagonal(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows())
                .all(|r| (0..self.cols()).all(|col| r == col || self.get(r, col).norm() <= tol))
    }

    /// Hermitian and every eigenvalue ≥ −tol.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.is_hermitian(tol)
            && self
                .hermitian_eigen()
                .map(|(vals, _)| vals.iter().all(|&v| v >= -tol))
                .unwrap_or(false)
    }

    pub fn diagonal_entries(&self) -> Vec<C64> {
        (0..self.rows().min(self.cols())).map(|i| self.get(i, i)).collect()
    }

    /// Eigen-decomposition of a Hermitian matrix. The matrix is symmetrized
    /// first; eigenvalues come back in ascending order with matching
    /// normalized eigenvectors.
    pub fn hermitian_eigen(&self) -> Result<(Vec<f64>, Vec<CVector>)> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                op: "hermitian_eigen",
                rows: self.rows(),
                cols: self.cols(),
            });
        }
        let sym = (&self.0 + self.0.adjoint()) * c(0.5, 0.0);
        let eig = nalgebra::SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vecs = order
            .iter()
            .map(|&k| CVector(eig.eigenvectors.column(k).into_owned()))
            .collect();
        Ok((vals, vecs))
    }

    /// Numerical rank: singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        if self.rows() == 0 || self.cols() == 0 {
            return 0;
        }
        let sv = self.0.clone().svd(false, false).singular_values;
        let smax = sv.iter().copied().fold(0.0, f64::max);
        if smax == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&s| s > rel_tol * smax).count()
    }

    pub fn apply(&self, v: &CVector) -> Result<CVector> {
        if self.cols() != v.dim() {
            return Err(Error::DimensionMismatch {
                op: "apply",
                left: self.shape(),
                right: (v.dim(), 1),
            });
        }
        Ok(CVector(&self.0 * &v.0))
    }
}

impl<'a> Mul<&'a CMatrix> for &'a CMatrix {
    type Output = CMatrix;

    /// Panics on non-conformable shapes; use [`CMatrix::compose`] for a
    /// fallible product.
    fn mul(self, rhs: &'a CMatrix) -> CMatrix {
        assert_eq!(self.cols(), rhs.rows(), "non-conformable matrix product");
        CMatrix(&self.0 * &rhs.0)
    }
}

impl Mul<CMatrix> for CMatrix {
    type Output = CMatrix;

    fn mul(self, rhs: CMatrix) -> CMatrix {
        &self * &rhs
    }
}

impl<'a> Add<&'a CMatrix> for &'a CMatrix {
    type Output = CMatrix;

    fn add(self, rhs: &'a CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in matrix sum");
        CMatrix(&self.0 + &rhs.0)
    }
}

impl<'a> Sub<&'a CMatrix> for &'a CMatrix {
    type Output = CMatrix;

    fn sub(self, rhs: &'a CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in matrix difference");
        CMatrix(&self.0 - &rhs.0)
    }
}

/// Complex column vector. Kets need not be normalized.
#[derive(Clone, PartialEq)]
pub struct CVector(DVector<C64>);

impl fmt::Debug for CVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl CVector {
    pub fn new(entries: Vec<C64>) -> Self {
        CVector(DVector::from_vec(entries))
    }

    pub fn from_real(entries: &[f64]) -> Self {
        Self::new(entries.iter().map(|&x| c(x, 0.0)).collect())
    }

    /// Computational basis vector `|i⟩`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[i] = ONE;
        CVector(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, i: usize) -> C64 {
        self.0[i]
    }

    pub fn entries(&self) -> Vec<C64> {
        self.0.iter().copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn normalized(&self) -> CVector {
        CVector(self.0.normalize())
    }

    pub fn scale(&self, z: C64) -> CVector {
        CVector(&self.0 * z)
    }

    /// `⟨self|other⟩`, antilinear in `self`.
    pub fn inner(&self, other: &CVector) -> C64 {
        self.0.dotc(&other.0)
    }

    pub fn projector(&self) -> CMatrix {
        CMatrix::outer(self, self)
    }
}

/// Distance between two unitaries after removing the best global phase:
/// `min_δ max_ij |a_ij − e^{iδ} b_ij|`, with δ taken from `Tr[b† a]`.
pub fn distance_up_to_phase(a: &CMatrix, b: &CMatrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let overlap = (b.adjoint() * a.clone()).trace().unwrap_or(ZERO);
    let phase = if overlap.norm() > 0.0 {
        overlap / overlap.norm()
    } else {
        ONE
    };
    a.max_abs_diff(&b.scale(phase))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> CMatrix {
        CMatrix::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    fn y() -> CMatrix {
        CMatrix::from_row_major(2, 2, vec![ZERO, -I, I, ZERO]).unwrap()
    }

    fn z() -> CMatrix {
        CMatrix::from_real(2, 2, &[1.0, 0.0, 0.0, -1.0]).unwrap()
    }

    #[test]
    fn compose_examples() {
        let id = CMatrix::identity(2);
        assert_eq!(id.compose(&id).unwrap(), id);
        assert!(z().compose(&z()).unwrap().approx_eq(&id, 0.0));
        // Z·Y = −iX, checked entrywise by hand: [[0,-i],[-i,0]]
        let zy = z().compose(&y()).unwrap();
        let expected = CMatrix::from_row_major(2, 2, vec![ZERO, -I, -I, ZERO]).unwrap();
        assert!(zy.approx_eq(&expected, 0.0));
        assert!(zy.approx_eq(&x().scale(-I), 0.0));
    }

    #[test]
    fn compose_rejects_mismatch() {
        let a = CMatrix::zeros(2, 3);
        let err = a.compose(&CMatrix::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn adjoint_examples() {
        let id = CMatrix::identity(2);
        assert_eq!(id.adjoint(), id);
        let ix = x().scale(I);
        assert!(ix.adjoint().approx_eq(&x().scale(-I), 0.0));
    }

    #[test]
    fn trace_examples() {
        assert_eq!(CMatrix::identity(2).trace().unwrap(), c(2.0, 0.0));
        assert_eq!(z().trace().unwrap(), ZERO);
        let plus = CVector::from_real(&[1.0, 1.0]).normalized().projector();
        let t = (plus * x()).trace().unwrap();
        assert!((t - ONE).norm() < 1e-15);
        assert!(matches!(
            CMatrix::zeros(2, 3).trace(),
            Err(Error::NotSquare { .. })
        ));
    }

    #[test]
    fn tensor_examples() {
        let id = CMatrix::identity(2);
        assert_eq!(id.tensor(&id), CMatrix::identity(4));
        let lhs = z().tensor(&id) * id.tensor(&z());
        assert!(lhs.approx_eq(&z().tensor(&z()), 0.0));

        // controlled-X with the control on |0⟩: acts as identity on |1,0⟩
        let p0 = CMatrix::unit(2, 0, 0);
        let p1 = CMatrix::unit(2, 1, 1);
        let gate = &p0.tensor(&x()) + &p1.tensor(&id);
        let ket10 = CVector::basis(4, 2);
        assert_eq!(gate.apply(&ket10).unwrap(), ket10);
    }

    #[test]
    fn predicates_take_explicit_tolerance() {
        let mut h = x();
        h.set(0, 1, c(1.0, 1e-11));
        assert!(h.is_hermitian(1e-10));
        assert!(!h.is_hermitian(1e-12));
        assert!(z().is_unitary(DEFAULT_TOL));
        assert!(!CMatrix::from_real(2, 2, &[1.0, 0.0, 0.0, 2.0])
            .unwrap()
            .is_unitary(DEFAULT_TOL));
        assert!(CMatrix::identity(3).is_psd(1e-12));
        assert!(!z().is_psd(1e-12));
    }

    #[test]
    fn hermitian_eigen_of_pauli_y() {
        let (vals, vecs) = y().hermitian_eigen().unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let back = y().apply(&vecs[1]).unwrap();
        assert!((back.inner(&vecs[1]) - ONE).norm() < 1e-12);
    }

    #[test]
    fn phase_aligned_distance() {
        let u = x().scale(c(0.0, 1.0).exp());
        assert!(distance_up_to_phase(&u, &x()) < 1e-14);
        assert!(distance_up_to_phase(&z(), &x()) > 0.5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = CMatrix> {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), rows * cols).prop_map(
                move |v| {
                    CMatrix::from_row_major(rows, cols, v.into_iter().map(|(a, b)| c(a, b)).collect())
                        .unwrap()
                },
            )
        }

        fn dyadic(rows: usize, cols: usize) -> impl Strategy<Value = CMatrix> {
            proptest::collection::vec((-16i32..16, -16i32..16), rows * cols).prop_map(move |v| {
                let entries = v
                    .into_iter()
                    .map(|(a, b)| c(f64::from(a) / 8.0, f64::from(b) / 8.0))
                    .collect();
                CMatrix::from_row_major(rows, cols, entries).unwrap()
            })
        }

        proptest! {
            #[test]
            fn trace_is_cyclic(a in matrix(3, 4), b in matrix(4, 3)) {
                let ab = a.compose(&b).unwrap().trace().unwrap();
                let ba = b.compose(&a).unwrap().trace().unwrap();
                prop_assert!((ab - ba).norm() < 1e-12);
            }

            #[test]
            fn adjoint_is_involutive(a in matrix(3, 2)) {
                prop_assert_eq!(a.adjoint().adjoint(), a);
            }

            // dyadic entries keep every product exact, so equality is bitwise
            #[test]
            fn tensor_is_associative(a in dyadic(2, 2), b in dyadic(1, 2), m in dyadic(2, 1)) {
                let left = a.tensor(&b).tensor(&m);
                let right = a.tensor(&b.tensor(&m));
                prop_assert!(left.approx_eq(&right, 0.0));
            }
        }
    }
}
