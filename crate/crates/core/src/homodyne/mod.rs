//! Homodyne quadrature statistics: marginal distributions, sampling,
//! loss-corrected measurement operators, and data-level corrections.

mod dataset;

pub use dataset::{DatasetMeta, QuadratureDataset, QuadratureSample, UnheraldedModel};

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fock::{self, DensityMatrix, FockOperator};
use crate::linalg::{self, CVec};
use crate::scalar::{cis, creal, Real};

/// Largest admissible inverse-CDF knot spacing.
pub const SAMPLING_STEP: f64 = 1e-3;

/// `⟨n|x_θ⟩ = e^{inθ} ψ_n(x)` for `n < dim`.
pub fn quadrature_eigenvector<T: Real>(x: T, theta: T, dim: usize) -> CVec<T> {
    let psi = fock::quadrature_wavefunctions(dim, x);
    DVector::from_fn(dim, |n, _| cis(theta * T::from_usize_exact(n)) * creal(psi[n]))
}

/// `pr(x|θ) = Σ_{mn} ρ_{mn} e^{i(n−m)θ} ψ_m(x) ψ_n(x)`
pub fn quadrature_pdf<T: Real>(rho: &DensityMatrix<T>, theta: T, x: T) -> T {
    let u = quadrature_eigenvector(x, theta, rho.dim());
    linalg::expectation(rho.matrix(), &u)
}

/// Tabulated distribution of one quadrature, used for inverse-CDF sampling.
#[derive(Debug, Clone)]
pub struct QuadratureTable<T: Real> {
    x0: T,
    step: T,
    cdf: Vec<T>,
}

impl<T: Real> QuadratureTable<T> {
    /// Knots on `[−x_max, x_max]`, `x_max = √(2·dim) + 4`, spacing at most [`SAMPLING_STEP`].
    pub fn new(rho: &DensityMatrix<T>, theta: T) -> Self {
        let x_max = (2.0 * rho.dim() as f64).sqrt() + 4.0;
        let intervals = (2.0 * x_max / SAMPLING_STEP).ceil() as usize;
        let step = T::lit(2.0 * x_max / intervals as f64);
        let x0 = T::lit(-x_max);
        let pdf: Vec<T> = (0..=intervals)
            .map(|i| quadrature_pdf(rho, theta, x0 + step * T::from_usize_exact(i)).max(T::zero()))
            .collect();
        let mut cdf = Vec::with_capacity(pdf.len());
        let mut acc = T::zero();
        cdf.push(acc);
        for w in pdf.windows(2) {
            acc += (w[0] + w[1]) * step * T::lit(0.5);
            cdf.push(acc);
        }
        Self { x0, step, cdf }
    }

    /// Total tabulated probability (≈ tr ρ).
    pub fn mass(&self) -> T {
        *self.cdf.last().unwrap()
    }

    /// Tabulated CDF, normalized to the table mass, linearly interpolated.
    pub fn cdf(&self, x: T) -> T {
        let pos = (x - self.x0) / self.step;
        if pos <= T::zero() {
            return T::zero();
        }
        let i = pos.floor().as_f64() as usize;
        if i + 1 >= self.cdf.len() {
            return T::one();
        }
        let frac = pos - T::from_usize_exact(i);
        (self.cdf[i] + (self.cdf[i + 1] - self.cdf[i]) * frac) / self.mass()
    }

    /// Inverse of [`Self::cdf`] for `u ∈ [0, 1)`.
    pub fn quantile(&self, u: T) -> T {
        let target = u * self.mass();
        let hi = self.cdf.partition_point(|c| *c <= target).clamp(1, self.cdf.len() - 1);
        let lo = hi - 1;
        let width = self.cdf[hi] - self.cdf[lo];
        let frac = if width > T::zero() { (target - self.cdf[lo]) / width } else { T::lit(0.5) };
        self.x0 + self.step * (T::from_usize_exact(lo) + frac)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<T> {
        (0..n).map(|_| self.quantile(T::lit(rng.random::<f64>()))).collect()
    }
}

/// `n` i.i.d. draws from `pr(x|θ)`; deterministic for a given seed.
pub fn sample_quadratures<T: Real>(rho: &DensityMatrix<T>, theta: T, n: usize, seed: u64) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let table = QuadratureTable::new(rho, theta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    table.sample(n, &mut rng)
}

/// Measurement operator for detecting `x` at phase `θ` through a loss of
/// transmissivity `eta`: `Λ†_η(|x_θ⟩⟨x_θ|)`, so that
/// `tr[ρ Π_η] = pr(x|θ)` of `Λ_η(ρ)`.
pub fn efficiency_povm<T: Real>(x: T, theta: T, eta: T, dim: usize) -> Result<FockOperator<T>> {
    if !(eta > T::zero()) {
        return Err(Error::DegeneratePovm);
    }
    let u = quadrature_eigenvector(x, theta, dim);
    let proj = linalg::outer(&u, &u);
    let m = if eta == T::one() { proj } else { fock::loss_channel_adjoint(&proj, eta)? };
    FockOperator::from_matrix(m)
}

/// Shifts every sample by `−delta_x·cos θ`.
pub fn displacement_correct(data: &QuadratureDataset, delta_x: f64) -> QuadratureDataset {
    let mut out = data.clone();
    for s in &mut out.samples {
        s.x -= delta_x * s.theta.cos();
    }
    out.meta.displacement_correction += delta_x;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeEstimate {
    pub amplitude: f64,
    pub phase: f64,
    /// Standard error of `amplitude` from the per-phase sample variances.
    pub amplitude_stderr: f64,
    /// Variance of the per-phase mean residuals around the fitted cosine.
    pub residual_variance: f64,
}

/// Least-squares fit of per-phase sample means to `√2·A·cos(θ − φ)`.
pub fn estimate_amplitude<'a, I>(samples: I) -> Result<AmplitudeEstimate>
where
    I: IntoIterator<Item = &'a QuadratureSample>,
{
    let mut groups: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        groups.entry(s.theta.to_bits()).or_insert_with(|| (s.theta, Vec::new())).1.push(s.x);
    }
    let groups: Vec<(f64, f64, f64)> = groups
        .into_values()
        .filter(|(_, xs)| !xs.is_empty())
        .map(|(theta, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.5 };
            (theta, mean, var / n)
        })
        .collect();
    if groups.len() < 3 {
        return Err(Error::Underdetermined(format!("{} distinct phases, need at least 3", groups.len())));
    }
    // mean(θ) = a cos θ + b sin θ, weighted by inverse mean variance
    let mut normal = Matrix2::<f64>::zeros();
    let mut rhs = Vector2::<f64>::zeros();
    for &(theta, mean, var) in &groups {
        let w = 1.0 / var.max(1e-300);
        let g = Vector2::new(theta.cos(), theta.sin());
        normal += g * g.transpose() * w;
        rhs += g * (mean * w);
    }
    let cov = normal
        .try_inverse()
        .ok_or_else(|| Error::Underdetermined("phases do not span cos/sin".into()))?;
    let coef = cov * rhs;
    let (a, b) = (coef[0], coef[1]);
    let r = (a * a + b * b).sqrt();
    let phase = b.atan2(a);
    // δr = (a δa + b δb)/r, projected variance; at r = 0 use the isotropic average
    let var_r = if r > 0.0 {
        let g = Vector2::new(a / r, b / r);
        (g.transpose() * cov * g)[0]
    } else {
        0.5 * (cov[(0, 0)] + cov[(1, 1)])
    };
    let residual_variance = groups
        .iter()
        .map(|&(theta, mean, _)| (mean - a * theta.cos() - b * theta.sin()).powi(2))
        .sum::<f64>()
        / groups.len() as f64;
    let sqrt2 = std::f64::consts::SQRT_2;
    Ok(AmplitudeEstimate {
        amplitude: r / sqrt2,
        phase,
        amplitude_stderr: var_r.max(0.0).sqrt() / sqrt2,
        residual_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::coherent_state;
    use crate::scalar::C;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn moments(rho: &DensityMatrix<f64>, theta: f64) -> (f64, f64, f64) {
        let h = 1e-3;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=24_000 {
            let x = -12.0 + h * i as f64;
            let p = quadrature_pdf(rho, theta, x);
            m0 += p * h;
            m1 += p * x * h;
            m2 += p * x * x * h;
        }
        let mean = m1 / m0;
        (m0, mean, m2 / m0 - mean * mean)
    }

    #[test]
    fn vacuum_is_gaussian() {
        let vac = DensityMatrix::<f64>::fock(0, 5).unwrap();
        for &th in &[0.0f64, 0.7, 2.5] {
            for &x in &[-1.3f64, 0.0, 0.4] {
                let want = (-x * x).exp() / PI.sqrt();
                assert_abs_diff_eq!(quadrature_pdf(&vac, th, x), want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_photon_node() {
        let one = DensityMatrix::<f64>::fock(1, 5).unwrap();
        assert_abs_diff_eq!(quadrature_pdf(&one, 1.1, 0.0), 0.0);
    }

    #[test]
    fn coherent_moments() {
        let rho = coherent_state::<f64>(C::new(1.0, 0.0), 20).unwrap().to_density();
        let (mass, mean, var) = moments(&rho, 0.0);
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(mean, 2f64.sqrt(), epsilon = 1e-6);
        assert_abs_diff_eq!(var, 0.5, epsilon = 1e-6);
        let (_, mean, _) = moments(&rho, PI / 3.0);
        assert_abs_diff_eq!(mean, 2f64.sqrt() * (PI / 3.0).cos(), epsilon = 1e-6);
    }

    #[test]
    fn phase_periodicity() {
        let rho = coherent_state::<f64>(C::new(0.6, 0.8), 12).unwrap().to_density();
        let ad = crate::fock::creation_matrix::<f64>(12).unwrap();
        let rho = rho.conjugate_by(&ad).normalized().unwrap();
        for &th in &[0.0, 0.4, 1.9] {
            for &x in &[-1.5, 0.2, 2.2] {
                let a = quadrature_pdf(&rho, th + PI, x);
                let b = quadrature_pdf(&rho, th, -x);
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sampler_is_deterministic_and_empty_for_zero() {
        let vac = DensityMatrix::<f64>::fock(0, 4).unwrap();
        assert!(sample_quadratures(&vac, 0.0, 0, 3).is_empty());
        assert_eq!(sample_quadratures(&vac, 0.3, 50, 11), sample_quadratures(&vac, 0.3, 50, 11));
        assert_ne!(sample_quadratures(&vac, 0.3, 50, 11), sample_quadratures(&vac, 0.3, 50, 12));
    }

    #[test]
    fn lossless_povm_is_projector() {
        let (x, th) = (0.37, 0.9);
        let p = efficiency_povm::<f64>(x, th, 1.0, 6).unwrap();
        let psi = fock::quadrature_wavefunctions(6, x);
        for m in 0..6 {
            for n in 0..6 {
                let want = cis(th * (m as f64 - n as f64)) * psi[m] * psi[n];
                assert_abs_diff_eq!(p.matrix()[(m, n)].re, want.re, epsilon = 1e-14);
                assert_abs_diff_eq!(p.matrix()[(m, n)].im, want.im, epsilon = 1e-14);
            }
        }
        assert!(matches!(efficiency_povm::<f64>(x, th, 0.0, 6), Err(Error::DegeneratePovm)));
    }

    #[test]
    fn povm_completeness() {
        let (dim, eta, th) = (6, 0.75, 0.6);
        let h = 2e-3;
        let mut acc = DMatrix::<C<f64>>::zeros(dim, dim);
        for i in 0..=10_000 {
            let x = -10.0 + h * i as f64;
            let w = if i == 0 || i == 10_000 { 0.5 } else { 1.0 };
            acc += efficiency_povm(x, th, eta, dim).unwrap().matrix() * C::new(w * h, 0.0);
        }
        let defect = (acc - DMatrix::identity(dim, dim)).norm();
        assert!(defect < 1e-6, "defect {defect}");
    }

    #[test]
    fn displacement_correction_shifts_by_cosine() {
        let mut data = QuadratureDataset::empty(DatasetMeta::default());
        data.samples.push(QuadratureSample { alpha_in: 1.0, theta: 0.0, x: 1.0, heralded: true });
        data.samples.push(QuadratureSample { alpha_in: 1.0, theta: PI / 2.0, x: 1.0, heralded: true });
        assert_eq!(displacement_correct(&data, 0.0).samples, data.samples);
        let out = displacement_correct(&data, 0.3);
        assert_abs_diff_eq!(out.samples[0].x, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(out.samples[1].x, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.meta.displacement_correction, 0.3);
        // not idempotent
        let twice = displacement_correct(&out, 0.3);
        assert_abs_diff_eq!(twice.samples[0].x, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn amplitude_fit_needs_three_phases() {
        let s: Vec<QuadratureSample> = [0.0, 1.0]
            .iter()
            .map(|&theta| QuadratureSample { alpha_in: 0.0, theta, x: 0.1, heralded: false })
            .collect();
        assert!(matches!(estimate_amplitude(&s), Err(Error::Underdetermined(_))));
    }

    #[test]
    fn amplitude_fit_on_exact_means() {
        let (amp, phase) = (0.8, 0.4);
        let mut s = Vec::new();
        for k in 0..6 {
            let theta = PI * k as f64 / 6.0;
            let m = 2f64.sqrt() * amp * (theta - phase).cos();
            for d in [-0.5, 0.5] {
                s.push(QuadratureSample { alpha_in: 0.0, theta, x: m + d, heralded: false });
            }
        }
        let est = estimate_amplitude(&s).unwrap();
        assert_abs_diff_eq!(est.amplitude, amp, epsilon = 1e-12);
        assert_abs_diff_eq!(est.phase, phase, epsilon = 1e-12);
        assert!(est.residual_variance < 1e-20);
    }
}
