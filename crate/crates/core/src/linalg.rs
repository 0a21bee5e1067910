//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::{cis, creal, Real, C};

pub type CMat<T> = DMatrix<C<T>>;
pub type CVec<T> = DVector<C<T>>;

/// Eigen-decomposition of a Hermitian matrix. Only the lower triangle is read.
///
/// The implicit QR iteration can return NaN on some exactly structured
/// sparse inputs (e.g. rank-one Choi matrices of ladder operators). In that
/// case the decomposition is redone in a basis rotated by a dense Householder
/// reflection, which leaves the spectrum unchanged.
pub fn eigh<T: Real>(m: &CMat<T>) -> (DVector<T>, CMat<T>) {
    let eig = SymmetricEigen::new(m.clone());
    if is_finite(&eig.eigenvalues, &eig.eigenvectors) {
        return (eig.eigenvalues, eig.eigenvectors);
    }
    let h = householder::<T>(m.nrows());
    let lower = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| if i >= j { m[(i, j)] } else { m[(j, i)].conj() });
    let eig = SymmetricEigen::new(&h * lower * &h);
    (eig.eigenvalues, &h * eig.eigenvectors)
}

fn is_finite<T: Real>(vals: &DVector<T>, vecs: &CMat<T>) -> bool {
    vals.iter().all(|v| v.is_finite()) && vecs.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// `1 − 2vv†/‖v‖²` for a fixed vector with no zero entries.
fn householder<T: Real>(n: usize) -> CMat<T> {
    let v = DVector::from_fn(n, |i, _| cis(T::lit(0.7548776662 * (i + 1) as f64)) * creal(T::lit(1.0 + 0.5 / (i + 1) as f64)));
    let norm2 = v.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
    CMat::identity(n, n) - &v * v.adjoint() * creal(T::lit(2.0) / norm2)
}

pub fn min_eigenvalue<T: Real>(m: &CMat<T>) -> T {
    let (vals, _) = eigh(&hermitize(m));
    vals.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Applies a real function to the spectrum of a Hermitian matrix.
pub fn hermitian_map<T: Real>(m: &CMat<T>, f: impl Fn(T) -> T) -> CMat<T> {
    let (vals, vecs) = eigh(m);
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * creal(f(vals[j])));
    &scaled * vecs.adjoint()
}

/// `exp(-i t H)` for Hermitian `H`.
pub fn unitary_evolution<T: Real>(h: &CMat<T>, t: T) -> CMat<T> {
    let (vals, vecs) = eigh(h);
    let scaled =
        DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |i, j| vecs[(i, j)] * cis(-(t * vals[j])));
    &scaled * vecs.adjoint()
}

pub fn hermitize<T: Real>(m: &CMat<T>) -> CMat<T> {
    (m + m.adjoint()) * creal(T::lit(0.5))
}

/// Largest elementwise distance between `m` and `m†`.
pub fn hermiticity_defect<T: Real>(m: &CMat<T>) -> T {
    let mut worst = T::zero();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let d = (m[(i, j)] - m[(j, i)].conj()).norm_sqr().sqrt();
            worst = worst.max(d);
        }
    }
    worst
}

pub fn trace<T: Real>(m: &CMat<T>) -> C<T> {
    (0..m.nrows().min(m.ncols())).fold(C::new(T::zero(), T::zero()), |acc, i| acc + m[(i, i)])
}

pub fn kron<T: Real>(a: &CMat<T>, b: &CMat<T>) -> CMat<T> {
    a.kronecker(b)
}

/// Traces out the second tensor factor of an operator on `C^d1 ⊗ C^d2`.
pub fn partial_trace_second<T: Real>(m: &CMat<T>, d1: usize, d2: usize) -> CMat<T> {
    assert_eq!(m.nrows(), d1 * d2);
    DMatrix::from_fn(d1, d1, |a, b| {
        (0..d2).fold(C::new(T::zero(), T::zero()), |acc, k| acc + m[(a * d2 + k, b * d2 + k)])
    })
}

/// Traces out the first tensor factor of an operator on `C^d1 ⊗ C^d2`.
pub fn partial_trace_first<T: Real>(m: &CMat<T>, d1: usize, d2: usize) -> CMat<T> {
    assert_eq!(m.nrows(), d1 * d2);
    DMatrix::from_fn(d2, d2, |a, b| {
        (0..d1).fold(C::new(T::zero(), T::zero()), |acc, k| acc + m[(k * d2 + a, k * d2 + b)])
    })
}

/// Trace norm distance `½‖a − b‖₁` between Hermitian matrices.
pub fn trace_distance<T: Real>(a: &CMat<T>, b: &CMat<T>) -> T {
    let (vals, _) = eigh(&hermitize(&(a - b)));
    vals.iter().fold(T::zero(), |acc, v| acc + v.abs()) * T::lit(0.5)
}

/// `v† M v`, real part.
pub fn expectation<T: Real>(m: &CMat<T>, v: &CVec<T>) -> T {
    let mv = m * v;
    v.iter().zip(mv.iter()).fold(T::zero(), |acc, (a, b)| acc + (a.conj() * b).re)
}

pub fn outer<T: Real>(u: &CVec<T>, v: &CVec<T>) -> CMat<T> {
    u * v.adjoint()
}
