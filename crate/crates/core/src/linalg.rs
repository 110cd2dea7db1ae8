//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue and each eigenvector's largest-magnitude entry
/// made positive.
#[derive(Debug, Clone)]
pub struct SortedEigen<T: Real> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
}

pub fn symmetric_eigen_desc<T: Real>(m: &DMatrix<T>) -> SortedEigen<T> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        fix_sign(&mut col);
        vectors.set_column(k, &col);
    }
    SortedEigen { values, vectors }
}

/// Flips `v` so that its entry of largest absolute value is positive.
pub fn fix_sign<T: Real>(v: &mut DVector<T>) {
    let mut best = T::zero();
    let mut sign = T::one();
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = if x < T::zero() { -T::one() } else { T::one() };
        }
    }
    if sign < T::zero() {
        v.neg_mut();
    }
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

/// Orthonormal basis of the column space of `a`, erroring when `a` does not
/// have full column rank.
pub fn orthonormal_basis<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (n, k) = a.shape();
    if k == 0 || n < k {
        return Err(Error::RankDeficientInput);
    }
    let svd = a.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let tol = smax * T::default_epsilon() * crate::scalar::from_usize::<T>(n.max(k)) * lit(10.0);
    if !(smax > T::zero()) || smin <= tol {
        return Err(Error::RankDeficientInput);
    }
    Ok(svd.u.expect("u requested"))
}

/// Solves `g x = b` for symmetric positive definite `g`, reporting
/// near-singular systems as `SingularUpdate`.
pub fn spd_solve<T: Real>(g: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = g.nrows();
    let scale = (0..n).map(|i| g[(i, i)].abs()).fold(T::zero(), |a, x| if x > a { x } else { a });
    if !(scale > T::zero()) {
        return Err(Error::SingularUpdate);
    }
    let chol = nalgebra::Cholesky::new(symmetrize(g)).ok_or(Error::SingularUpdate)?;
    let l = chol.l();
    let dmin = (0..n).map(|i| l[(i, i)]).fold(T::max_value().unwrap(), |a, x| if x < a { x } else { a });
    let rtol: T = T::default_epsilon().sqrt() * lit(1e-2);
    if dmin * dmin <= scale * rtol {
        return Err(Error::SingularUpdate);
    }
    Ok(chol.solve(b))
}

/// Integer power of a square matrix.
pub fn matrix_power<T: Real>(m: &DMatrix<T>, h: usize) -> DMatrix<T> {
    let mut out = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..h {
        out = &out * m;
    }
    out
}

/// Moore-Penrose left inverse `(AᵀA)⁻¹Aᵀ` for full column rank `a`.
pub fn left_pinv<T: Real>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let g = a.transpose() * a;
    spd_solve(&g, &a.transpose()).map_err(|_| Error::RankDeficientInput)
}

pub fn select_rows<T: Real>(m: &DMatrix<T>, rows: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// `A' B` through an explicit transpose, which takes the blocked product
/// path; `tr_mul` is far slower on tall inputs.
pub fn transpose_mul<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    a.transpose() * b
}

pub fn frobenius_sq<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

pub fn is_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.is_finite())
}
