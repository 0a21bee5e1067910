//! Truncated Fock-space states and operators.
//!
//! Quadrature convention: `X = (a + a†)/√2`, `P = i(a† − a)/√2`, so the vacuum
//! has quadrature variance 1/2 and `⟨X_θ⟩ = √2|α|cos(θ − arg α)` for `|α⟩`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec};
use crate::scalar::{cis, cplx, creal, Real, C};

/// Discarded coherent-state weight above which a truncation warning is raised.
pub const TRUNCATION_WARNING: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct PureState<T: Real> {
    amps: CVec<T>,
    truncation_loss: T,
}

impl<T: Real> PureState<T> {
    pub fn new(amps: CVec<T>) -> Result<Self> {
        if amps.is_empty() {
            return Err(Error::InvalidDimension { dim: 0, reason: "state needs at least one level" });
        }
        Ok(Self { amps, truncation_loss: T::zero() })
    }

    pub fn from_vec(amps: Vec<C<T>>) -> Result<Self> {
        Self::new(DVector::from_vec(amps))
    }

    /// Fock state `|n⟩` in dimension `dim`.
    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        if n >= dim {
            return Err(Error::InvalidDimension { dim, reason: "Fock index beyond cutoff" });
        }
        let mut v = DVector::zeros(dim);
        v[n] = creal(T::one());
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amplitudes(&self) -> &CVec<T> {
        &self.amps
    }

    pub fn norm_sqr(&self) -> T {
        self.amps.iter().fold(T::zero(), |a, c| a + c.norm_sqr())
    }

    /// Scales to unit norm; the zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr();
        if n <= T::zero() {
            return self.clone();
        }
        let s = creal(T::one() / n.sqrt());
        Self { amps: &self.amps * s, truncation_loss: self.truncation_loss }
    }

    /// Weight of the untruncated state that fell above the cutoff.
    pub fn truncation_loss(&self) -> T {
        self.truncation_loss
    }

    pub fn truncation_warning(&self) -> bool {
        self.truncation_loss > T::lit(TRUNCATION_WARNING)
    }

    pub fn inner(&self, other: &Self) -> C<T> {
        self.amps.dotc(&other.amps)
    }

    /// Embeds into (or projects onto) a different cutoff. Not renormalized.
    pub fn resized(&self, dim: usize) -> Self {
        let amps = DVector::from_fn(dim, |i, _| {
            if i < self.dim() {
                self.amps[i]
            } else {
                creal(T::zero())
            }
        });
        Self { amps, truncation_loss: self.truncation_loss }
    }

    pub fn to_density(&self) -> DensityMatrix<T> {
        DensityMatrix { m: linalg::outer(&self.amps, &self.amps) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix<T: Real> {
    m: CMat<T>,
}

impl<T: Real> DensityMatrix<T> {
    /// Wraps a matrix, checking hermiticity, positivity and trace bounds.
    pub fn new(m: CMat<T>) -> Result<Self> {
        let rho = Self::from_matrix_unchecked(m)?;
        rho.validate()?;
        Ok(rho)
    }

    /// Wraps a square matrix without the physical checks.
    pub fn from_matrix_unchecked(m: CMat<T>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidDimension { dim: m.nrows(), reason: "density matrix must be square" });
        }
        Ok(Self { m })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { m: DMatrix::zeros(dim, dim) }
    }

    pub fn fock(n: usize, dim: usize) -> Result<Self> {
        Ok(PureState::fock(n, dim)?.to_density())
    }

    /// Diagonal (Fock-mixture) state.
    pub fn diagonal(weights: &[T]) -> Result<Self> {
        let d = weights.len();
        Self::new(DMatrix::from_fn(d, d, |i, j| if i == j { creal(weights[i]) } else { creal(T::zero()) }))
    }

    pub fn validate(&self) -> Result<()> {
        let herm = linalg::hermiticity_defect(&self.m);
        if herm > T::lit(1e-10) {
            return Err(Error::Domain(format!("density matrix not Hermitian (defect {:e})", herm.as_f64())));
        }
        let tr = self.trace();
        if tr <= T::zero() || tr > T::one() + T::lit(1e-9) {
            return Err(Error::Domain(format!("density matrix trace {} outside (0, 1]", tr.as_f64())));
        }
        let lo = linalg::min_eigenvalue(&self.m);
        if lo < T::lit(-1e-9) {
            return Err(Error::Domain(format!("density matrix not PSD (min eigenvalue {:e})", lo.as_f64())));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.m
    }

    pub fn into_matrix(self) -> CMat<T> {
        self.m
    }

    pub fn trace(&self) -> T {
        linalg::trace(&self.m).re
    }

    /// Unit-trace copy; `None` when the trace is not positive.
    pub fn normalized(&self) -> Option<Self> {
        let tr = self.trace();
        if tr <= T::zero() {
            return None;
        }
        Some(Self { m: &self.m * creal(T::one() / tr) })
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { m: &self.m * creal(s) }
    }

    pub fn populations(&self) -> Vec<T> {
        (0..self.dim()).map(|i| self.m[(i, i)].re).collect()
    }

    /// Projects onto the lowest `dim` levels (or zero-pads). No renormalization.
    pub fn resized(&self, dim: usize) -> Self {
        let d = self.dim();
        Self {
            m: DMatrix::from_fn(dim, dim, |i, j| {
                if i < d && j < d {
                    self.m[(i, j)]
                } else {
                    creal(T::zero())
                }
            }),
        }
    }

    pub fn expectation(&self, op: &FockOperator<T>) -> C<T> {
        linalg::trace(&(&self.m * &op.m))
    }

    /// `O ρ O†`
    pub fn conjugate_by(&self, op: &FockOperator<T>) -> Self {
        Self { m: &op.m * &self.m * op.m.adjoint() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FockOperator<T: Real> {
    m: CMat<T>,
}

impl<T: Real> FockOperator<T> {
    pub fn from_matrix(m: CMat<T>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidDimension { dim: m.nrows(), reason: "operator must be square" });
        }
        Ok(Self { m })
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.m
    }

    pub fn adjoint(&self) -> Self {
        Self { m: self.m.adjoint() }
    }

    pub fn apply(&self, psi: &PureState<T>) -> PureState<T> {
        PureState { amps: &self.m * &psi.amps, truncation_loss: psi.truncation_loss }
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self { m: &self.m * &rhs.m }
    }
}

fn check_ladder_dim(dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::InvalidDimension { dim, reason: "ladder operators need dim >= 2" });
    }
    Ok(())
}

/// `a|m⟩ = √m |m−1⟩`
pub fn annihilation_matrix<T: Real>(dim: usize) -> Result<FockOperator<T>> {
    check_ladder_dim(dim)?;
    let mut m = DMatrix::zeros(dim, dim);
    for k in 1..dim {
        m[(k - 1, k)] = creal(T::from_usize_exact(k).sqrt());
    }
    Ok(FockOperator { m })
}

/// `a†|m⟩ = √(m+1) |m+1⟩`, with the top level mapped to zero.
pub fn creation_matrix<T: Real>(dim: usize) -> Result<FockOperator<T>> {
    Ok(annihilation_matrix(dim)?.adjoint())
}

pub fn number_operator<T: Real>(dim: usize) -> Result<FockOperator<T>> {
    let a = annihilation_matrix::<T>(dim)?;
    Ok(a.adjoint().compose(&a))
}

/// Truncated coherent state, renormalized; the discarded weight is kept on the state.
pub fn coherent_state<T: Real>(alpha: C<T>, dim: usize) -> Result<PureState<T>> {
    if dim == 0 {
        return Err(Error::InvalidDimension { dim, reason: "empty Fock space" });
    }
    let mut amps = DVector::zeros(dim);
    let mut c = creal((-alpha.norm_sqr() * T::lit(0.5)).exp());
    let mut kept = T::zero();
    for n in 0..dim {
        if n > 0 {
            c = c * alpha / creal(T::from_usize_exact(n).sqrt());
        }
        amps[n] = c;
        kept += c.norm_sqr();
    }
    let loss = (T::one() - kept).max(T::zero());
    amps *= creal(T::one() / kept.sqrt());
    let state = PureState { amps, truncation_loss: loss };
    if state.truncation_warning() {
        log::warn!(
            "coherent state |{}| truncated at dim {}: discarded weight {:e}",
            alpha.norm_sqr().sqrt().as_f64(),
            dim,
            loss.as_f64()
        );
    }
    Ok(state)
}

/// Binomial Kraus coefficient `√(C(n,l) η^{n−l} (1−η)^l)` for `|n⟩ → |n−l⟩`.
fn loss_kraus_coeffs<T: Real>(dim: usize, eta: T) -> Vec<Vec<T>> {
    let mut table = vec![vec![T::zero(); dim]; dim];
    for (n, row) in table.iter_mut().enumerate() {
        let mut binom = T::one();
        for (l, slot) in row.iter_mut().enumerate().take(n + 1) {
            if l > 0 {
                binom = binom * T::from_usize_exact(n + 1 - l) / T::from_usize_exact(l);
            }
            let w = binom * pow_usize(eta, n - l) * pow_usize(T::one() - eta, l);
            *slot = w.max(T::zero()).sqrt();
        }
    }
    table
}

fn pow_usize<T: Real>(x: T, k: usize) -> T {
    (0..k).fold(T::one(), |acc, _| acc * x)
}

fn check_eta<T: Real>(eta: T) -> Result<()> {
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::Domain(format!("transmission {} outside [0, 1]", eta.as_f64())));
    }
    Ok(())
}

/// Pure-loss channel of transmissivity `eta` (beam splitter with vacuum, reflected mode traced out).
pub fn loss_channel<T: Real>(rho: &DensityMatrix<T>, eta: T) -> Result<DensityMatrix<T>> {
    check_eta(eta)?;
    let d = rho.dim();
    let k = loss_kraus_coeffs(d, eta);
    let mut out = DMatrix::zeros(d, d);
    for m in 0..d {
        for n in 0..d {
            let r = rho.m[(m, n)];
            for l in 0..=m.min(n) {
                out[(m - l, n - l)] += r * creal(k[m][l] * k[n][l]);
            }
        }
    }
    Ok(DensityMatrix { m: out })
}

/// Heisenberg-picture adjoint of [`loss_channel`], acting on an observable.
pub fn loss_channel_adjoint<T: Real>(op: &CMat<T>, eta: T) -> Result<CMat<T>> {
    check_eta(eta)?;
    let d = op.nrows();
    let k = loss_kraus_coeffs(d, eta);
    Ok(DMatrix::from_fn(d, d, |m, n| {
        let mut acc = creal(T::zero());
        for l in 0..=m.min(n) {
            acc += op[(m - l, n - l)] * creal(k[m][l] * k[n][l]);
        }
        acc
    }))
}

/// `exp(β a† − β* a)` on the truncated space.
pub fn displacement_operator<T: Real>(beta: C<T>, dim: usize) -> Result<FockOperator<T>> {
    let a = annihilation_matrix::<T>(dim)?;
    if beta.norm_sqr() > T::from_usize_exact(dim) / T::lit(4.0) {
        log::warn!("displacement |β|² = {} exceeds dim/4 for dim {}", beta.norm_sqr().as_f64(), dim);
    }
    // β a† − β* a = −i H with H = i(β a† − β* a) Hermitian
    let i = cplx(T::zero(), T::one());
    let gen = (a.m.adjoint() * beta - &a.m * beta.conj()) * i;
    Ok(FockOperator { m: linalg::unitary_evolution(&linalg::hermitize(&gen), T::one()) })
}

/// Generalized Laguerre polynomials `L_k^{(a)}(x)` for `k = 0..count`.
fn laguerre_series<T: Real>(count: usize, a: usize, x: T) -> Vec<T> {
    let af = T::from_usize_exact(a);
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    out.push(T::one());
    if count > 1 {
        out.push(T::one() + af - x);
    }
    for k in 1..count.saturating_sub(1) {
        let kf = T::from_usize_exact(k);
        let next = ((T::lit(2.0) * kf + T::one() + af - x) * out[k] - (kf + af) * out[k - 1]) / (kf + T::one());
        out.push(next);
    }
    out
}

/// Matrix elements `⟨m|D(β)|n⟩` of the untruncated displacement operator, `m, n < dim`.
pub fn displacement_elements<T: Real>(beta: C<T>, dim: usize) -> CMat<T> {
    let x = beta.norm_sqr();
    let gauss = (-x * T::lit(0.5)).exp();
    let mut out = DMatrix::zeros(dim, dim);
    for diff in 0..dim {
        // column index n, row m = n + diff (lower triangle)
        let lag = laguerre_series(dim - diff, diff, x);
        for n in 0..dim - diff {
            let m = n + diff;
            // sqrt(n!/m!)
            let mut ratio = T::one();
            for k in (n + 1)..=m {
                ratio /= T::from_usize_exact(k);
            }
            let pref = ratio.sqrt() * gauss * lag[n];
            let pw = cpow(beta, diff);
            out[(m, n)] = pw * creal(pref);
            if diff > 0 {
                out[(n, m)] = cpow(-beta.conj(), diff) * creal(pref);
            }
        }
    }
    out
}

fn cpow<T: Real>(z: C<T>, k: usize) -> C<T> {
    (0..k).fold(creal(T::one()), |acc, _| acc * z)
}

/// Position-representation Fock wavefunctions `ψ_0(x) … ψ_{count−1}(x)` via the
/// normalized Hermite recurrence.
pub fn quadrature_wavefunctions<T: Real>(count: usize, x: T) -> Vec<T> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    let pi = T::pi();
    let psi0 = pi.powf(T::lit(-0.25)) * (-x * x * T::lit(0.5)).exp();
    out.push(psi0);
    if count > 1 {
        out.push(T::lit(2.0).sqrt() * x * psi0);
    }
    for n in 1..count.saturating_sub(1) {
        let nf = T::from_usize_exact(n);
        let next = (T::lit(2.0) / (nf + T::one())).sqrt() * x * out[n] - (nf / (nf + T::one())).sqrt() * out[n - 1];
        out.push(next);
    }
    out
}

/// `ψ_n(x) = π^{−1/4} (2ⁿ n!)^{−1/2} H_n(x) e^{−x²/2}`
pub fn quadrature_wavefunction<T: Real>(n: usize, x: T) -> T {
    quadrature_wavefunctions(n + 1, x)[n]
}

/// Sampled Wigner function; `values[(i, j)]` is `W(xs[i], ps[j])`.
#[derive(Debug, Clone)]
pub struct WignerGrid<T: Real> {
    pub xs: Vec<T>,
    pub ps: Vec<T>,
    pub values: DMatrix<T>,
}

impl<T: Real> WignerGrid<T> {
    /// Minimum value and its `(x, p)` location.
    pub fn min(&self) -> (T, T, T) {
        let mut best = (T::max_value().unwrap(), T::zero(), T::zero());
        for i in 0..self.xs.len() {
            for j in 0..self.ps.len() {
                let w = self.values[(i, j)];
                if w < best.0 {
                    best = (w, self.xs[i], self.ps[j]);
                }
            }
        }
        best
    }

    /// Riemann-sum integral over the grid, assuming uniform spacing.
    pub fn integral(&self) -> T {
        let dx = step(&self.xs);
        let dp = step(&self.ps);
        self.values.iter().fold(T::zero(), |a, w| a + *w) * dx * dp
    }
}

fn step<T: Real>(v: &[T]) -> T {
    if v.len() < 2 {
        T::one()
    } else {
        (v[v.len() - 1] - v[0]) / T::from_usize_exact(v.len() - 1)
    }
}

/// Wigner function from displaced parity, `W(α) = (2/π) tr[ρ D(α) Π D†(α)]`,
/// `α = (x + ip)/√2`, normalized so that `∫∫ W dx dp = tr ρ`.
///
/// Uses `D(α) Π D†(α) = D(2α) Π`, so only the untruncated matrix elements of
/// `D(2α)` inside the state's support are needed.
pub fn wigner<T: Real>(rho: &DensityMatrix<T>, xs: &[T], ps: &[T]) -> Result<WignerGrid<T>> {
    if xs.is_empty() || ps.is_empty() {
        return Err(Error::Domain("empty Wigner grid".into()));
    }
    let d = rho.dim();
    let inv_sqrt2 = T::one() / T::lit(2.0).sqrt();
    let mut values = DMatrix::zeros(xs.len(), ps.len());
    for (i, &x) in xs.iter().enumerate() {
        for (j, &p) in ps.iter().enumerate() {
            values[(i, j)] = wigner_point(rho, cplx(x * inv_sqrt2, p * inv_sqrt2), d);
        }
    }
    Ok(WignerGrid { xs: xs.to_vec(), ps: ps.to_vec(), values })
}

fn wigner_point<T: Real>(rho: &DensityMatrix<T>, alpha: C<T>, d: usize) -> T {
    let dd = displacement_elements(alpha * creal(T::lit(2.0)), d);
    let mut acc = creal(T::zero());
    for j in 0..d {
        for k in 0..d {
            let sign = if k % 2 == 0 { T::one() } else { -T::one() };
            acc += rho.m[(k, j)] * dd[(j, k)] * creal(sign);
        }
    }
    // (2/π) per unit α-area; dx dp = 2 d²α
    acc.re / T::pi()
}

/// Output-renormalized fidelity `⟨ψ|ρ|ψ⟩ / tr ρ`.
pub fn pure_state_fidelity<T: Real>(target: &PureState<T>, rho: &DensityMatrix<T>) -> Result<T> {
    if target.dim() != rho.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: rho.dim() });
    }
    let tr = rho.trace();
    if tr <= T::lit(1e-12) {
        return Err(Error::UndefinedFidelity(tr.as_f64()));
    }
    let psi = target.normalized();
    let f = linalg::expectation(&rho.m, &psi.amps) / tr;
    Ok(f.max(T::zero()).min(T::one()))
}

/// Phase-rotation `e^{i n θ}` applied to a state: `ρ → U ρ U†`.
pub fn rotate<T: Real>(rho: &DensityMatrix<T>, theta: T) -> DensityMatrix<T> {
    let d = rho.dim();
    DensityMatrix {
        m: DMatrix::from_fn(d, d, |m, n| {
            rho.m[(m, n)] * cis(theta * (T::from_usize_exact(m) - T::from_usize_exact(n)))
        }),
    }
}
