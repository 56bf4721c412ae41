//! Dense complex linear algebra used by every other module.
//!
//! Matrices and vectors are plain `nalgebra` dense containers of `Complex64`.
//! The routines here add the conventions the rest of the crate relies on:
//! ascending eigenvalues with a fixed eigenvector phase, SVD-based rank and
//! null space with a relative tolerance, a Moore-Penrose pseudoinverse, and a
//! re-orthogonalizing Gram-Schmidt.

use nalgebra::linalg::SymmetricEigen;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type ComplexVector = DVector<C64>;

/// Relative singular-value cutoff used for rank, null space and pseudoinverse.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;
/// Residual norm below which Gram-Schmidt discards a vector.
pub const DEFAULT_DROP_TOL: f64 = 1e-10;
/// Allowed relative anti-Hermitian part accepted by [`hermitian_eig`].
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Components smaller than this are skipped when fixing an eigenvector phase.
const PHASE_CUTOFF: f64 = 1e-8;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Builds a matrix from row-major entries, rejecting non-finite values.
pub fn matrix_from_row_major(rows: usize, cols: usize, entries: &[C64]) -> Result<ComplexMatrix> {
    if entries.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} entries for a {rows}x{cols} matrix",
            entries.len()
        )));
    }
    if let Some(pos) = entries.iter().position(|z| !is_finite(*z)) {
        return Err(Error::NonFinite {
            row: pos / cols.max(1),
            col: pos % cols.max(1),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, entries))
}

/// Builds a vector, rejecting non-finite values.
pub fn vector_from_slice(entries: &[C64]) -> Result<ComplexVector> {
    if let Some(pos) = entries.iter().position(|z| !is_finite(*z)) {
        return Err(Error::NonFinite { row: pos, col: 0 });
    }
    Ok(DVector::from_column_slice(entries))
}

pub fn real_matrix(rows: usize, cols: usize, entries: &[f64]) -> ComplexMatrix {
    DMatrix::from_row_iterator(rows, cols, entries.iter().map(|&x| C64::new(x, 0.0)))
}

pub fn basis_vector(dim: usize, index: usize) -> ComplexVector {
    let mut v = DVector::from_element(dim, ZERO);
    v[index] = ONE;
    v
}

fn is_finite(z: C64) -> bool {
    z.re.is_finite() && z.im.is_finite()
}

pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn max_abs_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff on different shapes");
    a.iter()
        .zip(b.iter())
        .fold(0.0, |acc, (x, y)| acc.max((x - y).norm()))
}

/// Largest entry of `m - m^dagger` in magnitude.
pub fn hermitian_deviation(m: &ComplexMatrix) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    max_abs_diff(m, &m.adjoint())
}

/// `|v><v|`
pub fn outer(v: &ComplexVector) -> ComplexMatrix {
    v * v.adjoint()
}

/// `sum_j |v_j><v_j|` over the given vectors; `dim` fixes the size when the list is empty.
pub fn projector_onto(vectors: &[ComplexVector], dim: usize) -> ComplexMatrix {
    let mut p = DMatrix::from_element(dim, dim, ZERO);
    for v in vectors {
        p += outer(v);
    }
    p
}

/// Rotates `v` so that its first component of magnitude above `1e-8` is real and non-negative.
pub fn fix_phase(v: &mut ComplexVector) {
    if let Some(lead) = v.iter().find(|z| z.norm() > PHASE_CUTOFF).copied() {
        let rot = lead.conj() / lead.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

/// Eigen-decomposition of a Hermitian matrix.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` belongs to `values[i]`.
    pub vectors: ComplexMatrix,
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian matrix.
///
/// Each eigenvector is rotated so its first non-negligible component is real
/// and non-negative.
pub fn hermitian_eig(m: &ComplexMatrix) -> Result<HermitianEigen> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "eigen-decomposition of a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some((row, col)) = first_non_finite(m) {
        return Err(Error::NonFinite { row, col });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(HermitianEigen {
            values: Vec::new(),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let deviation = hermitian_deviation(m);
    if deviation > HERMITIAN_TOL * max_abs(m) {
        return Err(Error::NonHermitian { deviation });
    }
    let symmetric = (m + m.adjoint()).unscale(2.0);
    let eig = SymmetricEigen::new(symmetric);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::from_element(n, n, ZERO);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: ComplexVector = eig.eigenvectors.column(src).into_owned();
        fix_phase(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(HermitianEigen { values, vectors })
}

fn first_non_finite(m: &ComplexMatrix) -> Option<(usize, usize)> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !is_finite(m[(i, j)]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Full SVD `m = U diag(s) V^dagger` with singular values in descending order.
struct FullSvd {
    u: ComplexMatrix,
    singular_values: Vec<f64>,
    v: ComplexMatrix,
}

fn full_svd(m: &ComplexMatrix) -> FullSvd {
    let (rows, cols) = m.shape();
    let work = faer::Mat::<C64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = work.svd().expect("SVD of a finite matrix converges");
    let (fu, fs, fv) = (svd.U(), svd.S().column_vector(), svd.V());
    let k = rows.min(cols);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fs[b].re.total_cmp(&fs[a].re));
    // Columns past min(rows, cols) span the remaining null directions.
    let u_order: Vec<usize> = order.iter().copied().chain(k..rows).collect();
    let v_order: Vec<usize> = order.iter().copied().chain(k..cols).collect();
    FullSvd {
        u: DMatrix::from_fn(rows, rows, |i, j| fu[(i, u_order[j])]),
        singular_values: order.iter().map(|&i| fs[i].re).collect(),
        v: DMatrix::from_fn(cols, cols, |i, j| fv[(i, v_order[j])]),
    }
}

/// Singular values in descending order (`min(rows, cols)` of them).
pub fn singular_values(m: &ComplexMatrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    full_svd(m).singular_values
}

/// `rel_tol * max(rows, cols) * sigma_max`
pub fn rank_threshold(rows: usize, cols: usize, sigma_max: f64, rel_tol: f64) -> f64 {
    rel_tol * rows.max(cols) as f64 * sigma_max
}

/// Number of singular values above `rel_tol * max(rows, cols) * sigma_max`.
pub fn svd_rank(m: &ComplexMatrix, rel_tol: f64) -> usize {
    let s = singular_values(m);
    count_above(&s, m.nrows(), m.ncols(), rel_tol)
}

fn count_above(s: &[f64], rows: usize, cols: usize, rel_tol: f64) -> usize {
    let Some(&sigma_max) = s.first() else {
        return 0;
    };
    if sigma_max == 0.0 {
        return 0;
    }
    let thr = rank_threshold(rows, cols, sigma_max, rel_tol);
    s.iter().filter(|&&x| x > thr).count()
}

/// Orthonormal basis of the null space of `m`.
///
/// Vectors are ordered by descending index of their singular value (the
/// smallest singular direction first) and carry the same phase convention as
/// [`hermitian_eig`]. The list length is `cols - svd_rank(m, rel_tol)`.
pub fn null_space_basis(m: &ComplexMatrix, rel_tol: f64) -> Vec<ComplexVector> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Vec::new();
    }
    if rows == 0 {
        return (0..cols).map(|i| basis_vector(cols, i)).collect();
    }
    let svd = full_svd(m);
    let rank = count_above(&svd.singular_values, rows, cols, rel_tol);
    (rank..cols)
        .rev()
        .map(|j| {
            let mut v: ComplexVector = svd.v.column(j).into_owned();
            fix_phase(&mut v);
            v
        })
        .collect()
}

/// Basis of the row space of `m` as column vectors, i.e. the right singular
/// vectors with singular value above the rank threshold.
pub fn row_space_basis(m: &ComplexMatrix, rel_tol: f64) -> Vec<ComplexVector> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let svd = full_svd(m);
    let rank = count_above(&svd.singular_values, rows, cols, rel_tol);
    (0..rank)
        .map(|j| {
            let mut v: ComplexVector = svd.v.column(j).into_owned();
            fix_phase(&mut v);
            v
        })
        .collect()
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `rel_tol * max(rows, cols) * sigma_max` are treated as zero.
pub fn pseudoinverse(m: &ComplexMatrix, rel_tol: f64) -> ComplexMatrix {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = full_svd(m);
    let mut out = DMatrix::from_element(cols, rows, ZERO);
    let rank = count_above(&svd.singular_values, rows, cols, rel_tol);
    for k in 0..rank {
        let vk = svd.v.column(k);
        let uk = svd.u.column(k);
        out += (vk * uk.adjoint()).unscale(svd.singular_values[k]);
    }
    out
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Inputs whose residual after projection is below `drop_tol` are discarded,
/// so the output is an orthonormal basis of the span of the inputs.
pub fn gram_schmidt(vectors: &[ComplexVector], drop_tol: f64) -> Vec<ComplexVector> {
    let mut basis: Vec<ComplexVector> = Vec::with_capacity(vectors.len());
    for v in vectors {
        if let Some(first) = basis.first() {
            assert_eq!(first.len(), v.len(), "gram_schmidt on vectors of different dimension");
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dotc(&w);
                w.axpy(-c, q, ONE);
            }
        }
        let norm = w.norm();
        if norm > drop_tol {
            basis.push(w.unscale(norm));
        }
    }
    basis
}

/// Standard Kronecker product.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn assert_orthonormal(vs: &[ComplexVector], tol: f64) {
        for (i, a) in vs.iter().enumerate() {
            for (j, b) in vs.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((a.dotc(b) - c(expect, 0.0)).norm() < tol, "<{i}|{j}>");
            }
        }
    }

    #[test]
    fn pauli_x_sign_flip() {
        let m = real_matrix(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        let eig = hermitian_eig(&m).unwrap();
        assert!((eig.values[0] + 1.0).abs() < 1e-14);
        assert!((eig.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn identity_eigen() {
        let m = ComplexMatrix::identity(3, 3);
        let eig = hermitian_eig(&m).unwrap();
        assert!(eig.values.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let vtv = eig.vectors.adjoint() * &eig.vectors;
        assert!(max_abs_diff(&vtv, &ComplexMatrix::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn eigen_rejects_bad_input() {
        let m = matrix_from_row_major(2, 2, &[ZERO, c(1.0, 1.0), c(1.0, 1.0), ZERO]).unwrap();
        assert!(matches!(hermitian_eig(&m), Err(Error::NonHermitian { .. })));
        let r = ComplexMatrix::zeros(2, 3);
        assert!(matches!(hermitian_eig(&r), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn eigen_phase_convention() {
        let m = matrix_from_row_major(2, 2, &[c(1.0, 0.0), c(0.0, -1.0), c(0.0, 1.0), c(1.0, 0.0)])
            .unwrap();
        let eig = hermitian_eig(&m).unwrap();
        for j in 0..2 {
            let lead = eig.vectors.column(j).iter().find(|z| z.norm() > 1e-8).copied().unwrap();
            assert!(lead.im.abs() < 1e-14 && lead.re > 0.0);
        }
    }

    #[test]
    fn construction_rejects_nan() {
        let r = matrix_from_row_major(1, 2, &[ONE, c(f64::NAN, 0.0)]);
        assert_eq!(r.unwrap_err(), Error::NonFinite { row: 0, col: 1 });
        assert!(matrix_from_row_major(2, 2, &[ONE]).is_err());
        assert!(vector_from_slice(&[c(0.0, f64::INFINITY)]).is_err());
    }

    #[test]
    fn rank_examples() {
        let ones = real_matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(svd_rank(&ones, DEFAULT_RANK_TOL), 1);
        assert_eq!(svd_rank(&ComplexMatrix::identity(2, 2), DEFAULT_RANK_TOL), 2);
        assert_eq!(svd_rank(&ComplexMatrix::zeros(3, 2), DEFAULT_RANK_TOL), 0);
    }

    #[test]
    fn null_space_of_ones() {
        let ones = real_matrix(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let ns = null_space_basis(&ones, DEFAULT_RANK_TOL);
        assert_eq!(ns.len(), 1);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((ns[0][0] - c(s, 0.0)).norm() < 1e-12);
        assert!((ns[0][1] - c(-s, 0.0)).norm() < 1e-12);
        assert!(null_space_basis(&ComplexMatrix::identity(2, 2), DEFAULT_RANK_TOL).is_empty());
    }

    #[test]
    fn null_space_of_wide_matrix() {
        let m = real_matrix(1, 3, &[1.0, 2.0, 3.0]);
        let ns = null_space_basis(&m, DEFAULT_RANK_TOL);
        assert_eq!(ns.len(), 2);
        assert_orthonormal(&ns, 1e-12);
        for v in &ns {
            assert!((&m * v).norm() < 1e-12);
        }
    }

    #[test]
    fn pinv_examples() {
        let d = real_matrix(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let p = pseudoinverse(&d, DEFAULT_RANK_TOL);
        assert!(max_abs_diff(&p, &real_matrix(2, 2, &[0.5, 0.0, 0.0, 0.0])) < 1e-14);
        let d = real_matrix(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let p = pseudoinverse(&d, DEFAULT_RANK_TOL);
        assert!(max_abs_diff(&p, &real_matrix(2, 2, &[1.0, 0.0, 0.0, 0.25])) < 1e-14);
    }

    #[test]
    fn pinv_of_rectangular() {
        let m = real_matrix(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let p = pseudoinverse(&m, DEFAULT_RANK_TOL);
        assert_eq!(p.shape(), (3, 2));
        assert!(max_abs_diff(&(&m * &p * &m), &m) < 1e-12);
    }

    #[test]
    fn gram_schmidt_examples() {
        let e0 = vector_from_slice(&[ONE, ZERO]).unwrap();
        let e01 = vector_from_slice(&[ONE, ONE]).unwrap();
        let out = gram_schmidt(&[e0.clone(), e01], DEFAULT_DROP_TOL);
        assert_eq!(out.len(), 2);
        assert!((out[1][0]).norm() < 1e-15 && (out[1][1] - ONE).norm() < 1e-15);

        let twice = vector_from_slice(&[c(2.0, 0.0), ZERO]).unwrap();
        let out = gram_schmidt(&[e0, twice], DEFAULT_DROP_TOL);
        assert_eq!(out.len(), 1);
        assert!(gram_schmidt(&[], DEFAULT_DROP_TOL).is_empty());
    }

    #[test]
    fn kron_examples() {
        let i2 = ComplexMatrix::identity(2, 2);
        assert_eq!(kron(&i2, &i2), ComplexMatrix::identity(4, 4));
        let a = real_matrix(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let b = real_matrix(2, 2, &[5.0, 0.0, 0.0, 7.0]);
        let k = kron(&a, &b);
        let diag: Vec<f64> = (0..4).map(|i| k[(i, i)].re).collect();
        assert_eq!(diag, vec![10.0, 14.0, 15.0, 21.0]);
        assert!(max_abs(&(k.clone() - ComplexMatrix::from_diagonal(&k.diagonal()))) == 0.0);

        let u = matrix_from_row_major(1, 1, &[C64::from_polar(1.0, -0.7)]).unwrap();
        let ubar = kron(&u.map(|z| z.conj()), &u);
        assert!((ubar[(0, 0)] - ONE).norm() < 1e-15);
    }
}
