//! Readouts of reconstructed process tensors: diagonal populations,
//! worst-case subspace fidelities, herald-rate fits and Wigner reports.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::fock::{self, DensityMatrix, PureState, WignerGrid};
use crate::linalg::{self, CMat};
use crate::process_sim::{mix_seed, BlackBoxKind};
use crate::scalar::{creal, Real, C};
use crate::tomography::{ideal_process_tensor_between, ProcessTensor};

/// Largest imaginary part tolerated on a diagonal element.
const IMAG_TOLERANCE: f64 = 1e-6;
/// Output traces at or below this make the fidelity undefined.
const TRACE_FLOOR: f64 = 1e-12;

pub const DEFAULT_RESTARTS: usize = 64;
pub const DEFAULT_SWEEP_SAMPLES: usize = 100_000;

/// `E^{mm}_{kk}` as a `dim_in × dim_out` real matrix.
pub fn diagonal_elements<T: Real>(t: &ProcessTensor<T>) -> Result<DMatrix<T>> {
    let mut out = DMatrix::zeros(t.dim_in(), t.dim_out());
    for m in 0..t.dim_in() {
        for k in 0..t.dim_out() {
            let v = t.get(m, m, k, k);
            if v.im.abs().as_f64() > IMAG_TOLERANCE {
                return Err(Error::Integrity(format!("E^{{{m}{m}}}_{{{k}{k}}} has imaginary part {:e}", v.im.as_f64())));
            }
            out[(m, k)] = v.re;
        }
    }
    Ok(out)
}

/// Output level the ideal box sends `|m⟩` to, if it has one.
pub fn target_level(kind: BlackBoxKind, m: usize) -> Option<usize> {
    match kind {
        BlackBoxKind::Annihilation => m.checked_sub(1),
        BlackBoxKind::Creation => Some(m + 1),
    }
}

/// Per input level: fraction of the row mass at the ideal target level.
/// `None` for rows with no mass or no target inside the output space.
pub fn target_fractions<T: Real>(diag: &DMatrix<T>, kind: BlackBoxKind) -> Vec<Option<T>> {
    (0..diag.nrows())
        .map(|m| {
            let k = target_level(kind, m).filter(|&k| k < diag.ncols())?;
            let sum = diag.row(m).iter().fold(T::zero(), |a, v| a + *v);
            (sum > T::zero()).then(|| diag[(m, k)] / sum)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FidelityReport<T: Real> {
    pub n: usize,
    pub worst_fidelity: T,
    /// Minimizing input state, on the tensor's input levels.
    pub argmin_state: PureState<T>,
    /// Nelder–Mead iterations summed over restarts.
    pub iterations: u64,
    pub restarts: usize,
    /// Candidates skipped because their output trace vanished.
    pub skipped: usize,
}

/// Fidelity of the process output with the ideal image, restricted to an
/// `n`-level input subspace and precomputed as a quartic form.
struct SubspaceFidelity {
    n: usize,
    levels: Vec<usize>,
    /// Ladder coefficient of each subspace level.
    ladder: Vec<f64>,
    /// `q[m,n,a,b] = E^{mn}_{t(a) t(b)} l_a l_b` with `t` the target level.
    q: Vec<Complex64>,
    /// `tr E^{mn}`
    traces: Vec<Complex64>,
}

impl SubspaceFidelity {
    fn new<T: Real>(t: &ProcessTensor<T>, kind: BlackBoxKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidDimension { dim: n, reason: "subspace needs at least one level" });
        }
        let levels: Vec<usize> = match kind {
            BlackBoxKind::Annihilation => (1..=n).collect(),
            BlackBoxKind::Creation => (0..n).collect(),
        };
        let top = *levels.last().expect("n ≥ 1");
        let top_target = target_level(kind, top).expect("subspace levels have targets");
        if top >= t.dim_in() || top_target >= t.dim_out() {
            return Err(Error::InvalidDimension { dim: n, reason: "subspace exceeds the tensor's levels" });
        }
        let ladder: Vec<f64> = levels
            .iter()
            .map(|&m| match kind {
                BlackBoxKind::Annihilation => (m as f64).sqrt(),
                BlackBoxKind::Creation => (m as f64 + 1.0).sqrt(),
            })
            .collect();
        let c64 = |v: C<T>| Complex64::new(v.re.as_f64(), v.im.as_f64());
        let mut q = vec![Complex64::new(0.0, 0.0); n * n * n * n];
        let mut traces = vec![Complex64::new(0.0, 0.0); n * n];
        for (i, &m) in levels.iter().enumerate() {
            for (j, &mm) in levels.iter().enumerate() {
                traces[i * n + j] = (0..t.dim_out()).map(|k| c64(t.get(m, mm, k, k))).sum();
                for (a, &la) in levels.iter().enumerate() {
                    let ta = target_level(kind, la).expect("target exists");
                    for (b, &lb) in levels.iter().enumerate() {
                        let tb = target_level(kind, lb).expect("target exists");
                        q[((i * n + j) * n + a) * n + b] = c64(t.get(m, mm, ta, tb)) * ladder[a] * ladder[b];
                    }
                }
            }
        }
        Ok(Self { n, levels, ladder, q, traces })
    }

    /// `None` when the output trace vanishes.
    fn fidelity(&self, psi: &[Complex64]) -> Option<f64> {
        let n = self.n;
        let mut tr = Complex64::new(0.0, 0.0);
        let mut num = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let w = psi[i] * psi[j].conj();
                tr += w * self.traces[i * n + j];
                let base = (i * n + j) * n * n;
                let mut inner = Complex64::new(0.0, 0.0);
                for a in 0..n {
                    let row = &self.q[base + a * n..base + a * n + n];
                    let s: Complex64 = row.iter().zip(psi).map(|(q, p)| q * p).sum();
                    inner += psi[a].conj() * s;
                }
                num += w * inner;
            }
        }
        let image: f64 = psi.iter().zip(&self.ladder).map(|(p, l)| p.norm_sqr() * l * l).sum();
        if tr.re <= TRACE_FLOOR || image <= 0.0 {
            return None;
        }
        Some((num.re / (tr.re * image)).clamp(0.0, 1.0))
    }
}

/// Unit vector from `n − 1` hypersphere angles followed by `n − 1` phases;
/// the first coefficient is real.
fn state_from_params(p: &[f64], n: usize) -> Vec<Complex64> {
    let mut psi = vec![Complex64::new(0.0, 0.0); n];
    let mut s = 1.0;
    for k in 0..n {
        let r = if k + 1 < n { s * p[k].cos() } else { s };
        if k + 1 < n {
            s *= p[k].sin();
        }
        psi[k] = if k == 0 { Complex64::new(r, 0.0) } else { Complex64::from_polar(r, p[n - 1 + k - 1]) };
    }
    psi
}

/// Parameters of an `n`-level state padded to `n + 1` levels with a zero top coefficient.
fn embed_params(p: &[f64], n: usize) -> Vec<f64> {
    let (angles, phases) = p.split_at(n - 1);
    let mut out = angles.to_vec();
    out.push(0.0);
    out.extend_from_slice(phases);
    out.push(0.0);
    out
}

struct Objective<'a> {
    f: &'a SubspaceFidelity,
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        // vanishing-trace candidates are pushed out of the simplex
        Ok(self.f.fidelity(&state_from_params(p, self.f.n)).unwrap_or(f64::INFINITY))
    }
}

struct Descent {
    params: Vec<f64>,
    value: f64,
    iterations: u64,
}

fn nelder_mead(f: &SubspaceFidelity, start: Vec<f64>) -> Result<Descent> {
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += 0.4;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-8)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let res = Executor::new(Objective { f }, solver)
        .configure(|s| s.max_iters(20_000))
        .run()
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let state = res.state();
    let params = state.get_best_param().cloned().unwrap_or(start);
    Ok(Descent { value: state.get_best_cost(), params, iterations: state.get_iter() })
}

fn random_params(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..std::f64::consts::FRAC_PI_2)).collect();
    p.extend((0..n - 1).map(|_| rng.random_range(0.0..std::f64::consts::TAU)));
    p
}

fn report<T: Real>(f: &SubspaceFidelity, dim_in: usize, best: &Descent, iterations: u64, restarts: usize, skipped: usize) -> Result<FidelityReport<T>> {
    let psi = state_from_params(&best.params, f.n);
    // first nonzero coefficient real-positive
    let lead = psi.iter().find(|c| c.norm() > 1e-12).map(|c| c.conj() / c.norm()).unwrap_or(Complex64::new(1.0, 0.0));
    let mut amps = vec![creal(T::zero()); dim_in];
    for (&level, c) in f.levels.iter().zip(&psi) {
        let c = c * lead;
        amps[level] = C::new(T::lit(c.re), T::lit(c.im));
    }
    Ok(FidelityReport {
        n: f.n,
        worst_fidelity: T::lit(best.value),
        argmin_state: PureState::from_vec(amps)?,
        iterations,
        restarts,
        skipped,
    })
}

/// Worst-case fidelities for every subspace size `1..=n_max`.
///
/// Each size runs `restarts` Nelder–Mead descents from random states plus one
/// from the previous size's minimizer, so the curve never increases with `n`.
pub fn worst_case_fidelity_curve<T: Real>(
    t: &ProcessTensor<T>,
    kind: BlackBoxKind,
    n_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<FidelityReport<T>>> {
    if n_max == 0 {
        return Err(Error::InvalidDimension { dim: 0, reason: "subspace needs at least one level" });
    }
    let mut out: Vec<FidelityReport<T>> = Vec::with_capacity(n_max);
    let mut previous: Option<Descent> = None;
    for n in 1..=n_max {
        let f = SubspaceFidelity::new(t, kind, n)?;
        if n == 1 {
            let value = f.fidelity(&[Complex64::new(1.0, 0.0)]);
            let Some(value) = value else {
                return Err(Error::UndefinedFidelity(0.0));
            };
            let best = Descent { params: Vec::new(), value, iterations: 0 };
            out.push(report(&f, t.dim_in(), &best, 0, 0, 0)?);
            previous = Some(best);
            continue;
        }
        let mut starts: Vec<Vec<f64>> = (0..restarts)
            .map(|r| random_params(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, n as u64, r as u64])), n))
            .collect();
        if let Some(prev) = &previous {
            starts.push(embed_params(&prev.params, n - 1));
        }
        let runs: Vec<Descent> = starts.into_par_iter().map(|s| nelder_mead(&f, s)).collect::<Result<_>>()?;
        let skipped = runs.iter().filter(|d| !d.value.is_finite()).count();
        if skipped > 0 {
            log::debug!("n = {n}: {skipped} descents ended on vanishing output trace");
        }
        let iterations = runs.iter().map(|d| d.iterations).sum();
        let best = runs
            .into_iter()
            .filter(|d| d.value.is_finite())
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .ok_or(Error::UndefinedFidelity(0.0))?;
        out.push(report(&f, t.dim_in(), &best, iterations, restarts, skipped)?);
        previous = Some(best);
    }
    Ok(out)
}

/// Lowest fidelity `⟨ψ_t|ρ_out|ψ_t⟩ / tr ρ_out` over pure inputs in
/// `span{|1⟩…|n⟩}` (annihilation) or `span{|0⟩…|n−1⟩}` (creation),
/// with `ψ_t` the normalized ideal image and 64 random restarts.
pub fn worst_case_fidelity<T: Real>(t: &ProcessTensor<T>, kind: BlackBoxKind, n: usize, seed: u64) -> Result<FidelityReport<T>> {
    let mut curve = worst_case_fidelity_curve(t, kind, n, DEFAULT_RESTARTS, seed)?;
    Ok(curve.pop().expect("curve covers n ≥ 1"))
}

/// Minimum fidelity over `samples` random pure states of the same subspace.
pub fn random_sweep_minimum<T: Real>(
    t: &ProcessTensor<T>,
    kind: BlackBoxKind,
    n: usize,
    samples: usize,
    seed: u64,
) -> Result<T> {
    let f = SubspaceFidelity::new(t, kind, n)?;
    const CHUNK: usize = 4096;
    let chunks = samples.div_ceil(CHUNK);
    let best = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, n as u64, c as u64]));
            let count = CHUNK.min(samples - c * CHUNK);
            let mut best = f64::INFINITY;
            for _ in 0..count {
                let psi: Vec<Complex64> =
                    (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
                let norm = psi.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
                let psi: Vec<Complex64> = psi.iter().map(|c| c / norm).collect();
                if let Some(v) = f.fidelity(&psi) {
                    best = best.min(v);
                }
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min);
    if best.is_finite() {
        Ok(T::lit(best))
    } else {
        Err(Error::UndefinedFidelity(0.0))
    }
}

/// Herald counts at one probe amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSample {
    /// Amplitude seen by the box.
    pub alpha: f64,
    pub count: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRateFit {
    pub kind: BlackBoxKind,
    pub scale: f64,
    /// `b` in `scale·(1 + b·α²)`; fixed at zero for the annihilation form `scale·α²`.
    pub quadratic_coefficient: f64,
    /// Pearson χ² of the fitted counts.
    pub residual: f64,
    pub degrees_of_freedom: usize,
    pub p_value: Option<f64>,
    pub iterations: usize,
}

/// Binomially weighted least-squares fit of herald fractions, iterated so the
/// weights use the fitted probabilities.
pub fn fit_count_rates(rates: &[RateSample], kind: BlackBoxKind) -> Result<CountRateFit> {
    let mut distinct: Vec<f64> = rates.iter().map(|r| r.alpha).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Underdetermined(format!("{} distinct amplitudes, need at least 3", distinct.len())));
    }
    if let Some(bad) = rates.iter().find(|r| !(r.total > 0.0) || r.count < 0.0 || r.count > r.total) {
        return Err(Error::Domain(format!("invalid counts {} / {} at α = {}", bad.count, bad.total, bad.alpha)));
    }
    let x: Vec<f64> = rates.iter().map(|r| r.alpha * r.alpha).collect();
    let y: Vec<f64> = rates.iter().map(|r| r.count / r.total).collect();
    let mut w: Vec<f64> = rates.iter().map(|r| r.total).collect();
    let mut coef = (0.0, 0.0);
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let next = match kind {
            BlackBoxKind::Annihilation => {
                let sxx: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
                let sxy: f64 = x.iter().zip(&y).zip(&w).map(|((x, y), w)| w * x * y).sum();
                (0.0, sxy / sxx)
            }
            BlackBoxKind::Creation => {
                let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ((x, y), w) in x.iter().zip(&y).zip(&w) {
                    s0 += w;
                    s1 += w * x;
                    s2 += w * x * x;
                    t0 += w * y;
                    t1 += w * x * y;
                }
                let det = s0 * s2 - s1 * s1;
                if det.abs() <= f64::EPSILON * s0 * s2 {
                    return Err(Error::Underdetermined("degenerate amplitude design".into()));
                }
                ((s2 * t0 - s1 * t1) / det, (s0 * t1 - s1 * t0) / det)
            }
        };
        let change = (next.0 - coef.0).abs() + (next.1 - coef.1).abs();
        coef = next;
        for ((wi, r), xi) in w.iter_mut().zip(rates).zip(&x) {
            let p = coef.0 + coef.1 * xi;
            *wi = r.total / (p * (1.0 - p)).max(1.0 / (r.total * r.total));
        }
        if change <= 1e-15 * (coef.0.abs() + coef.1.abs()) {
            break;
        }
    }
    let (scale, b) = match kind {
        BlackBoxKind::Annihilation => (coef.1, 0.0),
        BlackBoxKind::Creation => {
            if !(coef.0 > 0.0) {
                return Err(Error::Domain(format!("fitted vacuum rate {} is not positive", coef.0)));
            }
            (coef.0, coef.1 / coef.0)
        }
    };
    let mut chi2 = 0.0;
    let mut used: usize = 0;
    for (r, xi) in rates.iter().zip(&x) {
        let p = coef.0 + coef.1 * xi;
        if p > 0.0 && p < 1.0 {
            chi2 += (r.count - r.total * p).powi(2) / (r.total * p * (1.0 - p));
            used += 1;
        }
    }
    let params = if kind == BlackBoxKind::Annihilation { 1 } else { 2 };
    let dof = used.saturating_sub(params);
    let p_value = (dof > 0)
        .then(|| ChiSquared::new(dof as f64).ok())
        .flatten()
        .map(|d| d.sf(chi2));
    Ok(CountRateFit { kind, scale, quadratic_coefficient: b, residual: chi2, degrees_of_freedom: dof, p_value, iterations })
}

/// Symmetric square phase-space grid `[−half_width, half_width]²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { half_width: 4.0, points: 81 }
    }
}

impl GridSpec {
    pub fn axis<T: Real>(&self) -> Vec<T> {
        if self.points < 2 {
            return vec![T::zero()];
        }
        let step = 2.0 * self.half_width / (self.points - 1) as f64;
        (0..self.points).map(|i| T::lit(-self.half_width + step * i as f64)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct WignerEntry<T: Real> {
    pub alpha: T,
    pub herald_probability: T,
    pub grid: WignerGrid<T>,
    pub min_value: T,
    pub min_x: T,
    pub min_p: T,
}

#[derive(Debug, Clone)]
pub struct WignerReport<T: Real> {
    pub entries: Vec<WignerEntry<T>>,
    /// One line per skipped amplitude.
    pub notes: Vec<String>,
}

/// Wigner functions of the renormalized outputs for coherent inputs `|α⟩`.
pub fn wigner_report<T: Real>(t: &ProcessTensor<T>, alphas: &[T], grid: &GridSpec) -> Result<WignerReport<T>> {
    // renormalized outputs do not need the herald-trace bound
    let herm = t.hermiticity_defect();
    if herm > T::lit(1e-9) {
        return Err(Error::Integrity(format!("tensor not Hermitian (defect {:e})", herm.as_f64())));
    }
    let axis = grid.axis::<T>();
    let mut entries = Vec::new();
    let mut notes = Vec::new();
    for &alpha in alphas {
        let probe = fock::coherent_state(creal(alpha), t.dim_in())?.to_density();
        let out = t.apply(&probe)?;
        let herald = out.trace();
        let Some(state) = out.normalized().filter(|_| herald > T::lit(TRACE_FLOOR)) else {
            notes.push(format!("alpha={}: zero herald probability, skipped", alpha.as_f64()));
            continue;
        };
        let grid = fock::wigner(&state, &axis, &axis)?;
        let (min_value, min_x, min_p) = grid.min();
        entries.push(WignerEntry { alpha, herald_probability: herald, grid, min_value, min_x, min_p });
    }
    Ok(WignerReport { entries, notes })
}

fn psd_sqrt<T: Real>(m: &CMat<T>) -> CMat<T> {
    linalg::hermitian_map(m, |v| v.max(T::zero()).sqrt())
}

/// Uhlmann fidelity `(tr √(√ρ σ √ρ))²` of two density operators.
pub fn uhlmann_fidelity<T: Real>(rho: &CMat<T>, sigma: &CMat<T>) -> T {
    let s = psd_sqrt(rho);
    let inner = linalg::hermitize(&(&s * sigma * &s));
    let (eig, _) = linalg::eigh(&inner);
    let root = eig.iter().fold(T::zero(), |a, v| a + v.max(T::zero()).sqrt());
    (root * root).min(T::one())
}

/// Fidelity between the unit-trace Jamiolkowski operators of `t` and the ideal box.
pub fn process_fidelity_to_ideal<T: Real>(t: &ProcessTensor<T>, kind: BlackBoxKind) -> Result<T> {
    let ideal = ideal_process_tensor_between::<T>(kind, t.dim_in(), t.dim_out())?;
    let normalize = |m: CMat<T>| -> Result<CMat<T>> {
        let tr = linalg::trace(&m).re;
        if tr <= T::lit(TRACE_FLOOR) {
            return Err(Error::UndefinedFidelity(tr.as_f64()));
        }
        Ok(m * creal(T::one() / tr))
    };
    let a = normalize(t.choi())?;
    let b = normalize(ideal.choi())?;
    Ok(uhlmann_fidelity(&a, &b))
}

/// Output state of `t` for a coherent input, renormalized.
pub fn coherent_output<T: Real>(t: &ProcessTensor<T>, alpha: C<T>) -> Result<DensityMatrix<T>> {
    let out = t.apply(&fock::coherent_state(alpha, t.dim_in())?.to_density())?;
    let tr = out.trace();
    out.normalized().ok_or(Error::UndefinedFidelity(tr.as_f64()))
}

/// Fidelity of the renormalized output for `|α⟩` with the input `|α⟩` itself.
pub fn coherent_self_fidelity<T: Real>(t: &ProcessTensor<T>, alpha: T) -> Result<T> {
    let out = coherent_output(t, creal(alpha))?;
    let target = fock::coherent_state(creal(alpha), t.dim_out())?;
    fock::pure_state_fidelity(&target, &out)
}
