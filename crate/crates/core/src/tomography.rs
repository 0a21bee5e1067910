//! Coherent-state process tomography of trace-non-preserving processes.
//!
//! A process on `C^din → C^dout` is stored as its Jamiolkowski operator on
//! `C^din ⊗ C^(dout+1)`, where the extra output level `|∅⟩` absorbs every pulse
//! without a herald click, making the extended process trace preserving.
//!
//! Index convention: `E_J[(m, j), (n, k)] = E^{mn}_{jk}` with row index
//! `m·dext + j`. The probe enters transposed, `tr[E_J (ρᵀ ⊗ Π)] = tr[E(ρ) Π]`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{self, DensityMatrix};
use crate::homodyne::{self, QuadratureDataset};
use crate::linalg::{self, CMat, CVec};
use crate::process_sim::{herald_probability_law, BlackBoxKind};
use crate::scalar::{creal, Real, C};

/// Rank-4 process tensor `E^{mn}_{jk}`, stored row-major in `(m, n, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessTensor<T: Real> {
    dim_in: usize,
    dim_out: usize,
    data: Vec<C<T>>,
}

impl<T: Real> ProcessTensor<T> {
    pub fn zeros(dim_in: usize, dim_out: usize) -> Self {
        Self { dim_in, dim_out, data: vec![creal(T::zero()); dim_in * dim_in * dim_out * dim_out] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut t = Self::zeros(dim, dim);
        for m in 0..dim {
            for n in 0..dim {
                t.set(m, n, m, n, creal(T::one()));
            }
        }
        t
    }

    pub fn from_flat(dim_in: usize, dim_out: usize, data: Vec<C<T>>) -> Result<Self> {
        let want = dim_in * dim_in * dim_out * dim_out;
        if data.len() != want {
            return Err(Error::DimensionMismatch { expected: want, got: data.len() });
        }
        Ok(Self { dim_in, dim_out, data })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn as_flat(&self) -> &[C<T>] {
        &self.data
    }

    #[inline]
    fn idx(&self, m: usize, n: usize, j: usize, k: usize) -> usize {
        ((m * self.dim_in + n) * self.dim_out + j) * self.dim_out + k
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize, j: usize, k: usize) -> C<T> {
        self.data[self.idx(m, n, j, k)]
    }

    #[inline]
    pub fn set(&mut self, m: usize, n: usize, j: usize, k: usize, v: C<T>) {
        let i = self.idx(m, n, j, k);
        self.data[i] = v;
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { dim_in: self.dim_in, dim_out: self.dim_out, data: self.data.iter().map(|v| v * creal(s)).collect() }
    }

    /// The same process on the first `dim_in` input levels only.
    pub fn restrict_input(&self, dim_in: usize) -> Self {
        let dim_in = dim_in.min(self.dim_in);
        let mut out = Self::zeros(dim_in, self.dim_out);
        for m in 0..dim_in {
            for n in 0..dim_in {
                for j in 0..self.dim_out {
                    for k in 0..self.dim_out {
                        out.set(m, n, j, k, self.get(m, n, j, k));
                    }
                }
            }
        }
        out
    }

    /// `Σ_j E^{mm}_{jj}`: relative herald probability of `|m⟩`.
    pub fn herald_trace(&self, m: usize) -> T {
        (0..self.dim_out).fold(T::zero(), |acc, j| acc + self.get(m, m, j, j).re)
    }

    /// Jamiolkowski operator without the `|∅⟩` level.
    pub fn choi(&self) -> CMat<T> {
        let (di, d) = (self.dim_in, self.dim_out);
        DMatrix::from_fn(di * d, di * d, |r, c| self.get(r / d, c / d, r % d, c % d))
    }

    /// Largest `|E^{mn}_{jk} − conj(E^{nm}_{kj})|`.
    pub fn hermiticity_defect(&self) -> T {
        linalg::hermiticity_defect(&self.choi())
    }

    /// Checks hermiticity, complete positivity and the herald-trace bound.
    pub fn validate(&self) -> Result<()> {
        let herm = self.hermiticity_defect();
        if herm > T::lit(1e-9) {
            return Err(Error::Integrity(format!("tensor not Hermitian (defect {:e})", herm.as_f64())));
        }
        let lo = linalg::min_eigenvalue(&self.choi());
        if !(lo >= T::lit(-1e-8)) {
            return Err(Error::Integrity(format!("tensor not completely positive (min eigenvalue {:e})", lo.as_f64())));
        }
        for m in 0..self.dim_in {
            let tr = self.herald_trace(m);
            if tr < T::lit(-1e-8) || tr > T::one() + T::lit(1e-8) {
                return Err(Error::Integrity(format!("herald trace {} of |{m}⟩ outside [0, 1]", tr.as_f64())));
            }
        }
        Ok(())
    }

    /// `[E(ρ)]_{jk} = Σ_{mn} E^{mn}_{jk} ρ_{mn}`; the trace is the relative herald probability.
    pub fn apply(&self, rho: &DensityMatrix<T>) -> Result<DensityMatrix<T>> {
        apply_process(self, rho)
    }

    /// Embeds into the extended space with `|∅⟩` weight `δ_mn − Σ_j E^{mn}_{jj}`.
    pub fn to_jamiolkowski(&self) -> JamiolkowskiOperator<T> {
        let (di, d) = (self.dim_in, self.dim_out);
        let de = d + 1;
        let mut m = DMatrix::zeros(di * de, di * de);
        for a in 0..di {
            for b in 0..di {
                let mut traced = creal(T::zero());
                for j in 0..d {
                    traced += self.get(a, b, j, j);
                    for k in 0..d {
                        m[(a * de + j, b * de + k)] = self.get(a, b, j, k);
                    }
                }
                let delta = if a == b { creal(T::one()) } else { creal(T::zero()) };
                m[(a * de + d, b * de + d)] = delta - traced;
            }
        }
        JamiolkowskiOperator { dim_in: di, dim_out: d, m }
    }
}

/// `output_{jk} = Σ_{mn} E^{mn}_{jk} ρ_{mn}`
pub fn apply_process<T: Real>(t: &ProcessTensor<T>, rho: &DensityMatrix<T>) -> Result<DensityMatrix<T>> {
    if rho.dim() != t.dim_in {
        return Err(Error::DimensionMismatch { expected: t.dim_in, got: rho.dim() });
    }
    let d = t.dim_out;
    let r = rho.matrix();
    let mut out = DMatrix::zeros(d, d);
    for m in 0..t.dim_in {
        for n in 0..t.dim_in {
            let w = r[(m, n)];
            if w == creal(T::zero()) {
                continue;
            }
            for j in 0..d {
                for k in 0..d {
                    out[(j, k)] += t.get(m, n, j, k) * w;
                }
            }
        }
    }
    DensityMatrix::from_matrix_unchecked(out)
}

/// Ideal ladder tensors: `√(mn) δ_{j,m−1} δ_{k,n−1}` (annihilation) or
/// `√((m+1)(n+1)) δ_{j,m+1} δ_{k,n+1}` (creation, top level truncated).
pub fn ideal_process_tensor<T: Real>(kind: BlackBoxKind, dim: usize) -> Result<ProcessTensor<T>> {
    ideal_process_tensor_between(kind, dim, dim)
}

/// Ideal ladder tensor from `dim_in` input levels into `dim_out` output levels.
pub fn ideal_process_tensor_between<T: Real>(
    kind: BlackBoxKind,
    dim_in: usize,
    dim_out: usize,
) -> Result<ProcessTensor<T>> {
    if dim_in < 2 || dim_out < 2 {
        return Err(Error::InvalidDimension { dim: dim_in.min(dim_out), reason: "ladder tensors need at least 2 levels" });
    }
    let ladder = kind.ladder::<T>(dim_in.max(dim_out) + 1)?;
    let a = ladder.matrix();
    let mut t = ProcessTensor::zeros(dim_in, dim_out);
    // E(|m⟩⟨n|) = L|m⟩⟨n|L†
    for m in 0..dim_in {
        for n in 0..dim_in {
            for j in 0..dim_out {
                for k in 0..dim_out {
                    let v = a[(j, m)] * a[(k, n)].conj();
                    if v != creal(T::zero()) {
                        t.set(m, n, j, k, v);
                    }
                }
            }
        }
    }
    Ok(t)
}

/// Positive operator on `C^din ⊗ C^(dout+1)`; the last output level is `|∅⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct JamiolkowskiOperator<T: Real> {
    dim_in: usize,
    dim_out: usize,
    m: CMat<T>,
}

impl<T: Real> JamiolkowskiOperator<T> {
    pub fn from_matrix(dim_in: usize, dim_out: usize, m: CMat<T>) -> Result<Self> {
        let n = dim_in * (dim_out + 1);
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: m.nrows() });
        }
        Ok(Self { dim_in, dim_out, m })
    }

    /// Maximally mixed trace-preserving starting point.
    pub fn maximally_mixed(dim_in: usize, dim_out: usize) -> Self {
        let n = dim_in * (dim_out + 1);
        let m = DMatrix::identity(n, n) * creal(T::one() / T::from_usize_exact(dim_out + 1));
        Self { dim_in, dim_out, m }
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn dim_ext(&self) -> usize {
        self.dim_out + 1
    }

    pub fn matrix(&self) -> &CMat<T> {
        &self.m
    }

    /// `‖tr_out E_J − 1‖_max`
    pub fn trace_preservation_defect(&self) -> T {
        let g = linalg::partial_trace_second(&self.m, self.dim_in, self.dim_ext());
        let id = DMatrix::<C<T>>::identity(self.dim_in, self.dim_in);
        (g - id).iter().fold(T::zero(), |acc, v| acc.max(v.norm_sqr().sqrt()))
    }

    pub fn min_eigenvalue(&self) -> T {
        linalg::min_eigenvalue(&self.m)
    }

    pub fn validate(&self) -> Result<()> {
        let lo = self.min_eigenvalue();
        if !(lo >= T::lit(-1e-8)) {
            return Err(Error::Integrity(format!("Jamiolkowski operator not PSD ({:e})", lo.as_f64())));
        }
        let tp = self.trace_preservation_defect();
        if tp > T::lit(1e-6) {
            return Err(Error::Integrity(format!("extended process not trace preserving ({:e})", tp.as_f64())));
        }
        Ok(())
    }

    /// Weight of the `|∅⟩` outcome for input `|m⟩⟨n|`.
    pub fn null_weight(&self, m: usize, n: usize) -> C<T> {
        let de = self.dim_ext();
        self.m[(m * de + self.dim_out, n * de + self.dim_out)]
    }

    pub fn to_tensor(&self) -> ProcessTensor<T> {
        jamiolkowski_to_tensor(self)
    }
}

/// Drops the `|∅⟩` row/column and reindexes to `E^{mn}_{jk} = ⟨m⊗j|E_J|n⊗k⟩`.
pub fn jamiolkowski_to_tensor<T: Real>(ej: &JamiolkowskiOperator<T>) -> ProcessTensor<T> {
    let (di, d) = (ej.dim_in, ej.dim_out);
    let de = d + 1;
    let mut t = ProcessTensor::zeros(di, d);
    for m in 0..di {
        for n in 0..di {
            for j in 0..d {
                for k in 0..d {
                    t.set(m, n, j, k, ej.m[(m * de + j, n * de + k)]);
                }
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleConfig<T: Real> {
    /// Input Fock cutoff of the reported tensor (`n_max + 1` input levels).
    pub n_max: usize,
    /// Extra input levels carried while fitting and dropped from the report.
    /// The larger probes have population above `n_max`; without room for it
    /// the fit pushes the outputs of those levels into the lower rows.
    pub input_padding: usize,
    /// Output Fock cutoff, at least `n_max`. Output states of the larger probes
    /// carry weight above `n_max`; clipping it biases the low rows.
    pub n_max_out: usize,
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood gain per iteration falls below this.
    pub tolerance: T,
    /// Detection efficiency folded into the measurement operators.
    pub eta: T,
    /// Quadrature bin width (vacuum-variance-½ units).
    pub bin_width: T,
    /// Weight heralded outcomes by the measured herald rates.
    pub herald_normalization: bool,
    /// Restrict to processes commuting with optical phase shifts. Real probe
    /// amplitudes alone cannot tell `E^{mn}` apart from other elements with
    /// the same `m + n`; with this set every probe stands for its whole phase orbit.
    pub phase_covariant: bool,
}

impl<T: Real> Default for MleConfig<T> {
    fn default() -> Self {
        Self {
            n_max: 7,
            input_padding: 4,
            n_max_out: 15,
            max_iterations: 20_000,
            tolerance: T::lit(1e-12),
            eta: T::one(),
            bin_width: T::lit(0.05),
            herald_normalization: true,
            phase_covariant: true,
        }
    }
}

impl<T: Real> MleConfig<T> {
    /// Input levels of the reported tensor.
    pub fn dim(&self) -> usize {
        self.n_max + 1
    }

    /// Input levels used while fitting.
    pub fn fit_dim(&self) -> usize {
        self.n_max + self.input_padding + 1
    }

    pub fn dim_out(&self) -> usize {
        self.n_max_out.max(self.n_max + self.input_padding) + 1
    }
}

/// One outcome of a probe measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome<T: Real> {
    /// Heralded quadrature value `x` at phase `θ`.
    Quadrature { x: T, theta: T },
    /// No herald click.
    NoClick,
}

/// Input factor `(|α⟩⟨α|)ᵀ` of a probe, coherent state truncated to `dim` and renormalized.
pub fn probe_operator<T: Real>(alpha: C<T>, dim: usize) -> Result<CMat<T>> {
    let c = fock::coherent_state(alpha, dim)?;
    let cbar = c.amplitudes().map(|v| v.conj());
    Ok(linalg::outer(&cbar, &cbar))
}

/// Full measurement operator on the extended product space:
/// `(|α⟩⟨α|)ᵀ ⊗ Π_η(x, θ)` (zero on `|∅⟩`) or `(|α⟩⟨α|)ᵀ ⊗ |∅⟩⟨∅|`.
pub fn measurement_operator<T: Real>(alpha: C<T>, outcome: Outcome<T>, cfg: &MleConfig<T>) -> Result<CMat<T>> {
    let d = cfg.dim_out();
    let de = d + 1;
    let input = probe_operator(alpha, cfg.fit_dim())?;
    let mut out = DMatrix::zeros(de, de);
    match outcome {
        Outcome::Quadrature { x, theta } => {
            let p = homodyne::efficiency_povm(x, theta, cfg.eta, d)?;
            out.view_mut((0, 0), (d, d)).copy_from(p.matrix());
        }
        Outcome::NoClick => out[(d, d)] = creal(T::one()),
    }
    Ok(input.kronecker(&out))
}

/// Binned heralded data and herald weight for one probe amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData<T: Real> {
    /// Coherent amplitude seen by the box.
    pub alpha: C<T>,
    /// Relative herald probability `w ∈ [0, 1]`; `1 − w` goes to `|∅⟩`.
    pub herald_weight: T,
    pub settings: Vec<PhaseSetting<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSetting<T: Real> {
    pub theta: T,
    /// `(bin centre, count)`.
    pub bins: Vec<(T, T)>,
}

impl<T: Real> PhaseSetting<T> {
    pub fn total(&self) -> T {
        self.bins.iter().fold(T::zero(), |a, (_, c)| a + *c)
    }

    /// Histogram of `xs` with bins centred on multiples of `width`.
    pub fn from_samples(theta: T, xs: impl IntoIterator<Item = f64>, width: T) -> Self {
        let w = width.as_f64();
        let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
        for x in xs {
            *hist.entry((x / w).round() as i64).or_insert(0) += 1;
        }
        let bins = hist
            .into_iter()
            .map(|(k, c)| (T::lit(k as f64 * w), T::from_usize_exact(c)))
            .collect();
        Self { theta, bins }
    }
}

/// Relative herald weights per dataset.
///
/// Raw rates `r = heralded/slots` are rescaled so that the largest-amplitude
/// probe carries `h(α_ref)/h_cap`, where `h` is the ideal rate shape and
/// `h_cap` its largest value over Fock states of the reconstruction space
/// (`n_max` for annihilation, `n_max + 1` for creation). Weights are capped at 1.
pub fn herald_rate_normalization(datasets: &[QuadratureDataset], n_max: usize) -> Result<Vec<f64>> {
    let Some(first) = datasets.first() else {
        return Ok(Vec::new());
    };
    let kind = first.meta.kind;
    let mut rates = Vec::with_capacity(datasets.len());
    for d in datasets {
        let r = d
            .meta
            .herald_fraction()
            .ok_or_else(|| Error::Domain(format!("dataset at α_in = {} has no slots", d.meta.alpha_in)))?;
        rates.push(r);
    }
    let reference = datasets
        .iter()
        .zip(&rates)
        .filter(|(_, r)| **r > 0.0)
        .max_by(|a, b| a.0.meta.alpha_box.total_cmp(&b.0.meta.alpha_box));
    let Some((ref_data, &ref_rate)) = reference else {
        return Ok(vec![0.0; datasets.len()]);
    };
    let cap = match kind {
        BlackBoxKind::Annihilation => n_max as f64,
        BlackBoxKind::Creation => (n_max + 1) as f64,
    };
    let scale = herald_probability_law(ref_data.meta.alpha_box, kind) / cap / ref_rate;
    Ok(rates.iter().map(|r| (r * scale).min(1.0)).collect())
}

/// Bins datasets into per-probe data, applying herald weights (or unit weights
/// when herald normalization is disabled).
pub fn bin_datasets<T: Real>(datasets: &[QuadratureDataset], cfg: &MleConfig<T>) -> Result<Vec<ProbeData<T>>> {
    let weights = if cfg.herald_normalization {
        herald_rate_normalization(datasets, cfg.fit_dim() - 1)?
    } else {
        vec![1.0; datasets.len()]
    };
    let mut probes = Vec::with_capacity(datasets.len());
    for (d, &w) in datasets.iter().zip(&weights) {
        let mut by_phase: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for s in d.heralded() {
            by_phase.entry(s.theta.to_bits()).or_insert_with(|| (s.theta, Vec::new())).1.push(s.x);
        }
        let settings: Vec<PhaseSetting<T>> = by_phase
            .into_values()
            .map(|(theta, xs)| PhaseSetting::from_samples(T::lit(theta), xs, cfg.bin_width))
            .collect();
        if settings.is_empty() && !cfg.herald_normalization {
            continue;
        }
        probes.push(ProbeData { alpha: creal(T::lit(d.meta.alpha_box)), herald_weight: T::lit(w), settings });
    }
    Ok(probes)
}

#[derive(Debug, Clone)]
pub struct MleResult<T: Real> {
    /// Fitted operator on the padded input space.
    pub operator: JamiolkowskiOperator<T>,
    /// Input levels kept by [`MleResult::tensor`].
    pub reported_dim_in: usize,
    /// Log-likelihood after each accepted iterate, starting from the initial guess.
    pub log_likelihood: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Steps that needed a diluted update to keep the likelihood nondecreasing.
    pub diluted_steps: usize,
    /// Events whose predicted probability underflowed and was clipped.
    pub clipped_events: usize,
    pub max_trace_defect: T,
    pub min_eigenvalue: T,
}

impl<T: Real> MleResult<T> {
    pub fn final_log_likelihood(&self) -> T {
        *self.log_likelihood.last().expect("initial likelihood recorded")
    }

    /// True when no accepted iterate lowered the log-likelihood.
    pub fn likelihood_nondecreasing(&self) -> bool {
        self.log_likelihood.windows(2).all(|w| w[1] >= w[0])
    }

    /// Reconstructed tensor on the reported input levels.
    pub fn tensor(&self) -> ProcessTensor<T> {
        self.operator.to_tensor().restrict_input(self.reported_dim_in)
    }
}

/// Heralded bins of one phase setting. With `u = D_θ ψ(x)`, `D_θ = diag(e^{inθ})`
/// and real `ψ`, `u†Au = ψᵀ Re(D_θ† A D_θ) ψ`, so each setting costs two real
/// matrix products.
struct PreparedSetting<T: Real> {
    phase: Vec<C<T>>,
    /// `ψ_n(x_i)` as columns.
    psi: DMatrix<T>,
    weights: Vec<T>,
}

struct PreparedProbe<T: Real> {
    /// `|ᾱ⟩`, so that `(|α⟩⟨α|)ᵀ = |ᾱ⟩⟨ᾱ|`.
    cbar: CVec<T>,
    settings: Vec<PreparedSetting<T>>,
    null_weight: T,
    /// Bin-width factor turning densities into probabilities.
    bin_width: T,
}

const UNDERFLOW: f64 = 1e-300;

struct Accumulated<T: Real> {
    loglik: T,
    clipped: usize,
}

impl<T: Real> PreparedProbe<T> {
    fn total_weight(&self) -> T {
        self.settings.iter().flat_map(|s| s.weights.iter()).fold(self.null_weight, |a, w| a + *w)
    }

    /// `E_p = (⟨ᾱ| ⊗ 1) E (|ᾱ⟩ ⊗ 1)` on the extended output space, reading only sector entries.
    fn output_block(&self, e: &CMat<T>, sectors: &Sectors) -> CMat<T> {
        let de = sectors.de;
        let mut ep = DMatrix::zeros(de, de);
        for block in &sectors.blocks {
            for &r in block {
                let cm = self.cbar[r / de].conj();
                for &c in block {
                    ep[(r % de, c % de)] += cm * e[(r, c)] * self.cbar[c / de];
                }
            }
        }
        ep
    }

    /// Returns the probe's output factor `R_p` and its log-likelihood.
    fn contribution(
        &self,
        e: &CMat<T>,
        sectors: &Sectors,
        eta: T,
        with_r: bool,
    ) -> Result<(Option<CMat<T>>, Accumulated<T>)> {
        let de = sectors.de;
        let d = de - 1;
        let ep = self.output_block(e, sectors);
        let phys = DensityMatrix::from_matrix_unchecked(ep.view((0, 0), (d, d)).into_owned())?;
        let lossy = if eta == T::one() { phys.into_matrix() } else { fock::loss_channel(&phys, eta)?.into_matrix() };
        let floor = T::lit(UNDERFLOW);
        let mut acc = Accumulated { loglik: T::zero(), clipped: 0 };
        let mut s = DMatrix::<C<T>>::zeros(d, d);
        for set in &self.settings {
            let b = DMatrix::from_fn(d, d, |m, n| (set.phase[m].conj() * lossy[(m, n)] * set.phase[n]).re);
            let y = &b * &set.psi;
            let mut scaled = set.psi.clone();
            for (i, &f) in set.weights.iter().enumerate() {
                let mut q = set.psi.column(i).dot(&y.column(i));
                if q < floor {
                    q = floor;
                    acc.clipped += 1;
                }
                acc.loglik += f * (q * self.bin_width).ln();
                scaled.column_mut(i).scale_mut(f / q);
            }
            if with_r {
                let sr = &scaled * set.psi.transpose();
                for m in 0..d {
                    for n in 0..d {
                        s[(m, n)] += set.phase[m] * creal(sr[(m, n)]) * set.phase[n].conj();
                    }
                }
            }
        }
        let mut r_null = T::zero();
        if self.null_weight > T::zero() {
            let mut q = ep[(d, d)].re;
            if q < floor {
                q = floor;
                acc.clipped += 1;
            }
            acc.loglik += self.null_weight * q.ln();
            r_null = self.null_weight / q;
        }
        if !with_r {
            return Ok((None, acc));
        }
        let s = if eta == T::one() { s } else { fock::loss_channel_adjoint(&s, eta)? };
        let mut r = DMatrix::zeros(de, de);
        r.view_mut((0, 0), (d, d)).copy_from(&s);
        r[(d, d)] = creal(r_null);
        Ok((Some(r), acc))
    }

    /// Adds `|ᾱ⟩⟨ᾱ| ⊗ R_p` on the sector entries.
    fn accumulate(&self, rp: &CMat<T>, sectors: &Sectors, into: &mut CMat<T>) {
        let de = sectors.de;
        for block in &sectors.blocks {
            for &r in block {
                let cm = self.cbar[r / de];
                for &c in block {
                    into[(r, c)] += cm * rp[(r % de, c % de)] * self.cbar[c / de].conj();
                }
            }
        }
    }
}

/// Index blocks of the extended Jamiolkowski space that an iterate may couple.
///
/// Phase-covariant operators only couple `(m, j)` with `(n, k)` when
/// `m − j = n − k`, and `(m, ∅)` only with itself, so they are block diagonal
/// in these sectors. Without covariance there is a single block.
struct Sectors {
    de: usize,
    blocks: Vec<Vec<usize>>,
    covariant: bool,
}

impl Sectors {
    fn new(di: usize, de: usize, covariant: bool) -> Self {
        let n = di * de;
        if !covariant {
            return Self { de, blocks: vec![(0..n).collect()], covariant };
        }
        let mut by_key: BTreeMap<(bool, i64), Vec<usize>> = BTreeMap::new();
        for r in 0..n {
            let (m, j) = (r / de, r % de);
            let key = if j == de - 1 { (true, m as i64) } else { (false, m as i64 - j as i64) };
            by_key.entry(key).or_default().push(r);
        }
        Self { de, blocks: by_key.into_values().collect(), covariant }
    }

    fn extract<T: Real>(x: &CMat<T>, block: &[usize]) -> CMat<T> {
        DMatrix::from_fn(block.len(), block.len(), |a, b| x[(block[a], block[b])])
    }

    fn place<T: Real>(out: &mut CMat<T>, y: &CMat<T>, block: &[usize]) {
        for (a, &r) in block.iter().enumerate() {
            for (b, &c) in block.iter().enumerate() {
                out[(r, c)] = y[(a, b)];
            }
        }
    }

    fn map<T: Real>(&self, x: &CMat<T>, f: impl Fn(CMat<T>) -> CMat<T>) -> CMat<T> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for block in &self.blocks {
            Self::place(&mut out, &f(Self::extract(x, block)), block);
        }
        out
    }

    fn product<T: Real>(&self, x: &CMat<T>, y: &CMat<T>) -> CMat<T> {
        if !self.covariant {
            return x * y;
        }
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for block in &self.blocks {
            Self::place(&mut out, &(Self::extract(x, block) * Self::extract(y, block)), block);
        }
        out
    }

    fn min_eigenvalue<T: Real>(&self, x: &CMat<T>) -> T {
        self.blocks
            .iter()
            .map(|b| linalg::min_eigenvalue(&Self::extract(x, b)))
            .fold(T::max_value().unwrap(), |a, v| a.min(v))
    }

    /// `(G^{−1/2} ⊗ 1) Z Z† (G^{−1/2} ⊗ 1)` with `G = tr_out(Z Z†)`.
    ///
    /// Covariant `G` is diagonal and is summed from `|Z|²` directly. Otherwise
    /// `G^{−1/2}` comes from the SVD of `Z` reshaped to `di × (de·n)`. Neither
    /// route squares the conditioning of `G`, and the result is PSD by construction.
    fn normalize<T: Real>(&self, z: &CMat<T>, di: usize) -> CMat<T> {
        let de = self.de;
        let n = z.ncols();
        let w = if self.covariant {
            let mut g = vec![T::zero(); di];
            for r in 0..n {
                g[r / de] += z.row(r).iter().fold(T::zero(), |a, v| a + v.norm_sqr());
            }
            let mut w = z.clone();
            for r in 0..n {
                let gm = g[r / de];
                let scale = if gm > T::zero() { T::one() / gm.sqrt() } else { T::zero() };
                w.row_mut(r).scale_mut(scale);
            }
            w
        } else {
            let y = DMatrix::from_fn(di, de * n, |m, col| z[(m * de + col / n, col % n)]);
            let svd = y.svd(true, false);
            let u = svd.u.expect("left singular vectors requested");
            let s = &svd.singular_values;
            let floor = s.max() * T::lit(1e-15);
            let scaled = DMatrix::from_fn(di, di, |i, j| u[(i, j)] * creal(T::one() / s[j].max(floor)));
            let g_inv_sqrt = &scaled * u.adjoint();
            g_inv_sqrt.kronecker(&DMatrix::<C<T>>::identity(de, de)) * z
        };
        linalg::hermitize(&self.product(&w, &w.adjoint()))
    }
}

fn prepare<T: Real>(probes: &[ProbeData<T>], cfg: &MleConfig<T>) -> Result<Vec<PreparedProbe<T>>> {
    let (d, dout) = (cfg.fit_dim(), cfg.dim_out());
    probes
        .iter()
        .map(|p| {
            let c = fock::coherent_state(p.alpha, d)?;
            let cbar = c.amplitudes().map(|v| v.conj());
            let n_settings = p.settings.len();
            let mut settings = Vec::with_capacity(n_settings);
            for s in &p.settings {
                let total = s.total();
                if total <= T::zero() {
                    continue;
                }
                let mut psi = DMatrix::zeros(dout, s.bins.len());
                for (i, &(x, _)) in s.bins.iter().enumerate() {
                    psi.column_mut(i).copy_from_slice(&fock::quadrature_wavefunctions(dout, x));
                }
                settings.push(PreparedSetting {
                    phase: (0..dout).map(|n| crate::scalar::cis(T::from_usize_exact(n) * s.theta)).collect(),
                    psi,
                    weights: s.bins.iter().map(|&(_, count)| p.herald_weight * count / total).collect(),
                });
            }
            let null_weight = (T::one() - p.herald_weight) * T::from_usize_exact(n_settings.max(1));
            Ok(PreparedProbe { cbar, settings, null_weight, bin_width: cfg.bin_width })
        })
        .collect()
}

fn evaluate<T: Real>(
    prepared: &[PreparedProbe<T>],
    e: &CMat<T>,
    sectors: &Sectors,
    eta: T,
    with_r: bool,
) -> Result<(Option<CMat<T>>, T, usize)> {
    let parts: Vec<(Option<CMat<T>>, Accumulated<T>)> = prepared
        .par_iter()
        .map(|p| p.contribution(e, sectors, eta, with_r))
        .collect::<Result<_>>()?;
    let mut loglik = T::zero();
    let mut clipped = 0;
    let mut r = with_r.then(|| DMatrix::zeros(e.nrows(), e.ncols()));
    // fixed reduction order
    for (p, (part, acc)) in prepared.iter().zip(parts) {
        loglik += acc.loglik;
        clipped += acc.clipped;
        if let (Some(part), Some(r)) = (part, r.as_mut()) {
            p.accumulate(&part, sectors, r);
        }
    }
    Ok((r, loglik, clipped))
}

/// Zeroes every element of an extended Jamiolkowski operator that is not
/// invariant under `e^{iφn̂}` phase shifts: keeps `E^{mn}_{jk}` with
/// `m − n = j − k`, and `|∅⟩` only in the `E^{mm}_{∅∅}` entries.
pub fn phase_covariant_projection<T: Real>(x: &CMat<T>, de: usize) -> CMat<T> {
    let null = de - 1;
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| {
        let (m, j) = (r / de, r % de);
        let (n, k) = (c / de, c % de);
        let keep = match (j == null, k == null) {
            (true, true) => m == n,
            (false, false) => m + k == n + j,
            _ => false,
        };
        if keep {
            x[(r, c)]
        } else {
            creal(T::zero())
        }
    })
}

fn psd_sqrt<T: Real>(sectors: &Sectors, x: &CMat<T>) -> CMat<T> {
    sectors.map(x, |b| linalg::hermitian_map(&b, |v| v.max(T::zero()).sqrt()))
}

/// Smallest diluted step tried before declaring a stall.
const MIN_STEP: f64 = 1e-6;
const EXTRAPOLATION_PERIOD: usize = 10;
const MAX_EXTRAPOLATION: f64 = 1024.0;

/// Iterative `E ← N[R_t E R_t]` maximum-likelihood reconstruction from binned data,
/// with `R_t = (1 − t)·1 + t·R`.
///
/// Each iteration tries the plain step `t = 1`; a step that would lower the
/// likelihood is retried with `t` halved, down to `1e−6`, after which the
/// iteration is declared stalled (converged).
///
/// The plain iteration crawls along flat likelihood directions. Every
/// `EXTRAPOLATION_PERIOD` iterations the displacement over the period is
/// extrapolated on the square root, `√E + γ Δ√E` with `γ = 1, 2, 4, …`,
/// renormalized to be trace preserving, and kept only if it raises the
/// likelihood. Working on the root keeps candidates positive without
/// clipping eigenvalues to zero, which the multiplicative update could not
/// undo.
pub fn mle_reconstruct_binned<T: Real>(probes: &[ProbeData<T>], cfg: &MleConfig<T>) -> Result<MleResult<T>> {
    let d = cfg.fit_dim();
    let de = cfg.dim_out() + 1;
    if probes.is_empty() {
        return Err(Error::Underdetermined("no probe data".into()));
    }
    let distinct: std::collections::BTreeSet<u64> =
        probes.iter().map(|p| p.alpha.norm_sqr().as_f64().to_bits()).collect();
    if distinct.len() < d {
        log::warn!("{} distinct probe amplitudes for a {}-level reconstruction", distinct.len(), d);
    }
    let prepared = prepare(probes, cfg)?;
    let total_weight = prepared.iter().fold(T::zero(), |acc, p| acc + p.total_weight());
    // R·tr(E)/Σf is the identity at a stationary point
    let r_scale = creal(T::from_usize_exact(d) / total_weight);
    let sectors = Sectors::new(d, de, cfg.phase_covariant);

    let mut e = JamiolkowskiOperator::<T>::maximally_mixed(d, de - 1).m;
    let (r0, mut loglik, mut clipped) = evaluate(&prepared, &e, &sectors, cfg.eta, true)?;
    let mut r = r0.expect("R requested") * r_scale;
    let mut history = vec![loglik];
    let mut converged = false;
    let mut diluted_steps = 0;
    let mut iterations = 0;
    let mut max_tp = T::zero();
    let mut min_eig = T::zero();
    let n = d * de;
    let identity = DMatrix::<C<T>>::identity(n, n);
    let mut anchor = e.clone();
    let mut extrapolated_steps = 0;

    while iterations < cfg.max_iterations {
        let sqrt_e = psd_sqrt(&sectors, &e);
        let mut accepted = None;
        let mut t = T::one();
        while t > T::lit(MIN_STEP) {
            let rt = if t == T::one() { r.clone() } else { &identity * creal(T::one() - t) + &r * creal(t) };
            let candidate = sectors.normalize(&sectors.product(&rt, &sqrt_e), d);
            let (rc, ll, cl) = evaluate(&prepared, &candidate, &sectors, cfg.eta, true)?;
            if ll >= loglik {
                accepted = Some((candidate, rc.expect("R requested"), ll, cl));
                break;
            }
            t *= T::lit(0.5);
        }
        iterations += 1;
        let Some((candidate, rc, ll, cl)) = accepted else {
            log::debug!("no likelihood-increasing step after {iterations} iterations");
            converged = true;
            break;
        };
        if t < T::one() {
            diluted_steps += 1;
        }
        let gain = ll - loglik;
        e = candidate;
        r = rc * r_scale;
        loglik = ll;
        clipped = cl;
        history.push(loglik);

        let op = JamiolkowskiOperator { dim_in: d, dim_out: de - 1, m: e.clone() };
        max_tp = max_tp.max(op.trace_preservation_defect());
        min_eig = min_eig.min(sectors.min_eigenvalue(&e));

        if gain <= cfg.tolerance * loglik.abs().max(T::lit(1e-300)) {
            converged = true;
            break;
        }

        if iterations % EXTRAPOLATION_PERIOD == 0 {
            let root = psd_sqrt(&sectors, &e);
            let delta = &root - psd_sqrt(&sectors, &anchor);
            let mut best = None;
            let mut gamma = T::one();
            while gamma <= T::lit(MAX_EXTRAPOLATION) {
                let candidate = sectors.normalize(&(&root + &delta * creal(gamma)), d);
                let (rc, ll, cl) = evaluate(&prepared, &candidate, &sectors, cfg.eta, true)?;
                let best_ll = best.as_ref().map_or(loglik, |b: &(CMat<T>, CMat<T>, T, usize)| b.2);
                if !(ll > best_ll) {
                    break;
                }
                best = Some((candidate, rc.expect("R requested"), ll, cl));
                gamma *= T::lit(2.0);
            }
            if let Some((candidate, rc, ll, cl)) = best {
                extrapolated_steps += 1;
                e = candidate;
                r = rc * r_scale;
                loglik = ll;
                clipped = cl;
                history.push(loglik);
                min_eig = min_eig.min(sectors.min_eigenvalue(&e));
            }
            anchor = e.clone();
        }
    }
    log::debug!("{extrapolated_steps} extrapolated steps");
    if clipped > 0 {
        log::warn!("{clipped} events with underflowing predicted probability were clipped");
    }
    if !converged {
        log::warn!("MLE stopped at the iteration cap ({}) before meeting the tolerance", cfg.max_iterations);
    }
    Ok(MleResult {
        operator: JamiolkowskiOperator { dim_in: d, dim_out: de - 1, m: e },
        reported_dim_in: cfg.dim(),
        log_likelihood: history,
        iterations,
        converged,
        diluted_steps,
        clipped_events: clipped,
        max_trace_defect: max_tp,
        min_eigenvalue: min_eig,
    })
}

/// Reconstructs from quadrature datasets, one dataset per probe amplitude.
pub fn mle_reconstruct<T: Real>(datasets: &[QuadratureDataset], cfg: &MleConfig<T>) -> Result<MleResult<T>> {
    let probes = bin_datasets(datasets, cfg)?;
    mle_reconstruct_binned(&probes, cfg)
}

/// Provenance recorded alongside a tensor file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: Option<BlackBoxKind>,
    pub config_hash: Option<String>,
    #[serde(default)]
    pub dataset_hashes: Vec<String>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub final_log_likelihood: Option<f64>,
    #[serde(default)]
    pub herald_normalization: Option<bool>,
    #[serde(default)]
    pub likelihood_nondecreasing: Option<bool>,
    #[serde(default)]
    pub max_trace_defect: Option<f64>,
    #[serde(default)]
    pub min_eigenvalue: Option<f64>,
}

/// JSON form of a process tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub dim_in: usize,
    pub dim_out: usize,
    pub index_order: String,
    /// Row-major `(m, n, j, k)` elements as `[re, im]`.
    pub elements: Vec<[f64; 2]>,
    pub provenance: Provenance,
}

pub const INDEX_ORDER: &str = "m,n,j,k";

impl TensorFile {
    pub fn from_tensor<T: Real>(t: &ProcessTensor<T>, provenance: Provenance) -> Self {
        Self {
            dim_in: t.dim_in,
            dim_out: t.dim_out,
            index_order: INDEX_ORDER.to_string(),
            elements: t.data.iter().map(|c| [round9(c.re.as_f64()), round9(c.im.as_f64())]).collect(),
            provenance,
        }
    }

    pub fn tensor<T: Real>(&self) -> Result<ProcessTensor<T>> {
        if self.index_order != INDEX_ORDER {
            return Err(Error::Domain(format!("unsupported index order `{}`", self.index_order)));
        }
        let data = self.elements.iter().map(|[re, im]| C::new(T::lit(*re), T::lit(*im))).collect();
        ProcessTensor::from_flat(self.dim_in, self.dim_out, data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn round9(x: f64) -> f64 {
    crate::fmt::sig9(x).parse().expect("sig9 output parses")
}

/// Identity-process data helper: the input state of a probe padded into `DVector` form.
pub fn coherent_vector<T: Real>(alpha: C<T>, dim: usize) -> Result<DVector<C<T>>> {
    Ok(fock::coherent_state(alpha, dim)?.amplitudes().clone())
}
