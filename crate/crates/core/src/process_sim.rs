//! Forward models of the two heralded black boxes: a weakly reflecting beam
//! splitter (photon annihilation) and weak parametric down-conversion (photon
//! creation), plus the loss/mode-mismatch imperfection model.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{self, DensityMatrix, FockOperator};
use crate::homodyne::{self, DatasetMeta, QuadratureDataset, QuadratureSample, UnheraldedModel};
use crate::linalg::{self, CMat};
use crate::scalar::{cplx, creal, Real};

/// Default simulation cutoff.
pub const D_SIM: usize = 20;
/// Default interaction strength for data generation.
pub const DEFAULT_ZETA: f64 = 0.05;
/// `ζ·n̄` up to which the first-order picture is labelled valid.
pub const VALIDITY_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlackBoxKind {
    Annihilation,
    Creation,
}

impl fmt::Display for BlackBoxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Annihilation => "annihilation",
            Self::Creation => "creation",
        })
    }
}

impl FromStr for BlackBoxKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "annihilation" | "a" => Ok(Self::Annihilation),
            "creation" | "adag" => Ok(Self::Creation),
            other => Err(Error::Domain(format!("unknown process kind `{other}`"))),
        }
    }
}

impl BlackBoxKind {
    /// The ladder operator the box approximates, on `dim` levels.
    pub fn ladder<T: Real>(self, dim: usize) -> Result<FockOperator<T>> {
        match self {
            Self::Annihilation => fock::annihilation_matrix(dim),
            Self::Creation => fock::creation_matrix(dim),
        }
    }
}

/// Dimensionless coupling `ζ = λτ/ħ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionStrength<T: Real>(T);

impl<T: Real> InteractionStrength<T> {
    pub fn new(zeta: T) -> Result<Self> {
        if !(zeta > T::zero()) {
            return Err(Error::Domain(format!("interaction strength {} must be positive", zeta.as_f64())));
        }
        Ok(Self(zeta))
    }

    pub fn zeta(self) -> T {
        self.0
    }

    /// Amplitude reflectivity `r = sin ζ` of the equivalent beam splitter.
    pub fn reflectivity(self) -> T {
        self.0.sin()
    }

    /// `ζ·n̄ ≤ 0.1`
    pub fn is_valid_for(self, mean_photons: T) -> bool {
        self.0 * mean_photons <= T::lit(VALIDITY_LIMIT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImperfectionModel<T: Real> {
    /// Homodyne-path transmission (losses, efficiency, electronic noise).
    pub t1: T,
    /// Mode-match transmission of the creation-side interferometer.
    pub t2: T,
    pub kind: BlackBoxKind,
}

impl<T: Real> ImperfectionModel<T> {
    pub fn new(t1: T, t2: T, kind: BlackBoxKind) -> Result<Self> {
        for (name, v) in [("t1", t1), ("t2", t2)] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::Domain(format!("{name} = {} outside [0, 1]", v.as_f64())));
            }
        }
        Ok(Self { t1, t2, kind })
    }

    pub fn ideal(kind: BlackBoxKind) -> Self {
        Self { t1: T::one(), t2: T::one(), kind }
    }

    /// Transmission of the effective loss after the box.
    pub fn output_transmission(&self) -> T {
        match self.kind {
            BlackBoxKind::Annihilation => self.t1,
            BlackBoxKind::Creation => self.t1 * self.t2,
        }
    }

    /// `ΔX = √(2 t1)(1 − t2) α_in` for creation, zero for annihilation.
    pub fn displacement(&self, alpha_in: T) -> T {
        match self.kind {
            BlackBoxKind::Annihilation => T::zero(),
            BlackBoxKind::Creation => (T::lit(2.0) * self.t1).sqrt() * (T::one() - self.t2) * alpha_in,
        }
    }
}

/// `√t2 · α_in` for creation; unchanged for annihilation.
pub fn effective_box_amplitude<T: Real>(alpha_in: T, model: &ImperfectionModel<T>) -> T {
    match model.kind {
        BlackBoxKind::Annihilation => alpha_in,
        BlackBoxKind::Creation => model.t2.sqrt() * alpha_in,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeraldedOutput<T: Real> {
    /// Normalized state conditioned on a click; `None` when a click is impossible.
    pub conditional_state: Option<DensityMatrix<T>>,
    pub herald_probability: T,
}

impl<T: Real> HeraldedOutput<T> {
    pub fn is_defined(&self) -> bool {
        self.conditional_state.is_some()
    }
}

/// Unnormalized herald-rate shape: `α²` (annihilation) or `1 + α²` (creation).
pub fn herald_probability_law<T: Real>(alpha: T, kind: BlackBoxKind) -> T {
    match kind {
        BlackBoxKind::Annihilation => alpha * alpha,
        BlackBoxKind::Creation => T::one() + alpha * alpha,
    }
}

fn mean_photons<T: Real>(rho: &DensityMatrix<T>) -> T {
    rho.populations().iter().enumerate().fold(T::zero(), |acc, (n, p)| acc + T::from_usize_exact(n) * *p)
}

/// Box action to first order in `ζ`: `aρa†` or `a†ρa`, with herald
/// probability `ζ² tr(a†aρ)` or `ζ² tr(aa†ρ)`.
pub fn ideal_box_first_order<T: Real>(
    rho: &DensityMatrix<T>,
    kind: BlackBoxKind,
    zeta: InteractionStrength<T>,
) -> Result<HeraldedOutput<T>> {
    let d = rho.dim();
    let nbar = mean_photons(rho);
    if !zeta.is_valid_for(nbar) {
        log::warn!("ζ·n̄ = {} outside the first-order regime", (zeta.zeta() * nbar).as_f64());
    }
    let z2 = zeta.zeta() * zeta.zeta();
    // exact number moments; the truncated a a† would drop the top level
    let shape = match kind {
        BlackBoxKind::Annihilation => nbar,
        BlackBoxKind::Creation => rho.trace() + nbar,
    };
    let out = match kind {
        BlackBoxKind::Annihilation => rho.conjugate_by(&fock::annihilation_matrix(d)?),
        BlackBoxKind::Creation => {
            let wide = rho.resized(d + 1);
            wide.conjugate_by(&fock::creation_matrix(d + 1)?).resized(d)
        }
    };
    Ok(HeraldedOutput { conditional_state: out.normalized(), herald_probability: z2 * shape })
}

/// Exact two-mode evolution `exp(−iĤτ/ħ)` of signal ⊗ trigger-vacuum,
/// conditioned on exactly one trigger photon.
pub fn exact_two_mode_box<T: Real>(
    rho: &DensityMatrix<T>,
    kind: BlackBoxKind,
    zeta: InteractionStrength<T>,
    trigger_dim: usize,
) -> Result<HeraldedOutput<T>> {
    if trigger_dim < 3 {
        return Err(Error::InvalidDimension { dim: trigger_dim, reason: "trigger mode needs at least 3 levels" });
    }
    let d = rho.dim();
    let ds = match kind {
        BlackBoxKind::Annihilation => d,
        BlackBoxKind::Creation => d + trigger_dim,
    };
    let dt = trigger_dim;
    let a_s = fock::annihilation_matrix::<T>(ds)?.matrix().kronecker(&DMatrix::identity(dt, dt));
    let a_t = DMatrix::<crate::scalar::C<T>>::identity(ds, ds).kronecker(fock::annihilation_matrix::<T>(dt)?.matrix());
    let i = cplx(T::zero(), T::one());
    // Ĥ/λ
    let gen: CMat<T> = match kind {
        BlackBoxKind::Annihilation => (&a_s * a_t.adjoint() - a_s.adjoint() * &a_t) * i,
        BlackBoxKind::Creation => (a_s.adjoint() * a_t.adjoint() - &a_s * &a_t) * i,
    };
    let u = linalg::unitary_evolution(&linalg::hermitize(&gen), zeta.zeta());

    // U restricted to trigger vacuum input: columns (s, 0)
    let cols: Vec<usize> = (0..d).map(|s| s * dt).collect();
    let u0 = DMatrix::from_fn(ds * dt, d, |r, c| u[(r, cols[c])]);
    let evolved = &u0 * rho.matrix() * u0.adjoint();

    let sigma = DMatrix::from_fn(ds, ds, |a, b| evolved[(a * dt + 1, b * dt + 1)]);
    let top_trigger: T = (0..ds).fold(T::zero(), |acc, s| acc + evolved[(s * dt + dt - 1, s * dt + dt - 1)].re);
    if top_trigger > T::lit(1e-6) {
        log::warn!("trigger cutoff {} holds population {:e}", dt, top_trigger.as_f64());
    }
    let sigma = DensityMatrix::from_matrix_unchecked(linalg::hermitize(&sigma))?;
    let herald_probability = sigma.trace();
    Ok(HeraldedOutput { conditional_state: sigma.resized(d).normalized(), herald_probability })
}

/// Loss after the box (η = t1 or t1·t2); for creation, followed by a real
/// displacement of `ΔX/√2` so that `⟨X⟩` shifts by `ΔX`.
pub fn apply_imperfections<T: Real>(
    out: &HeraldedOutput<T>,
    model: &ImperfectionModel<T>,
    alpha_in: T,
) -> Result<HeraldedOutput<T>> {
    let Some(state) = &out.conditional_state else {
        return Ok(out.clone());
    };
    let mut next = fock::loss_channel(state, model.output_transmission())?;
    if model.kind == BlackBoxKind::Creation {
        let dx = model.displacement(alpha_in);
        if dx != T::zero() {
            let disp = fock::displacement_operator(creal(dx / T::lit(2.0).sqrt()), next.dim())?;
            next = next.conjugate_by(&disp);
        }
    }
    Ok(HeraldedOutput { conditional_state: Some(next), herald_probability: out.herald_probability })
}

/// One probe amplitude's worth of simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub alpha_in: f64,
    pub kind: BlackBoxKind,
    pub t1: f64,
    pub t2: f64,
    pub zeta: f64,
    /// Local-oscillator phases in `[0, π)`.
    pub phases: Vec<f64>,
    /// Heralded (and, separately, unheralded) quadrature samples per phase.
    pub samples_per_phase: usize,
    /// Pulse slots for the herald-rate statistics.
    pub slots: u64,
    /// Per-slot herald probability is `herald_scale · ζ² · h(α)`, capped at 1.
    pub herald_scale: f64,
    pub d_sim: usize,
    pub seed: u64,
}

impl ProbeRun {
    pub fn new(alpha_in: f64, kind: BlackBoxKind, seed: u64) -> Self {
        Self {
            alpha_in,
            kind,
            t1: 1.0,
            t2: 1.0,
            zeta: DEFAULT_ZETA,
            phases: uniform_phases(12),
            samples_per_phase: 10_000,
            slots: 100_000,
            herald_scale: DEFAULT_HERALD_SCALE,
            d_sim: D_SIM,
            seed,
        }
    }
}

/// Default slot scale: per-slot herald probability `0.1·h(α)` at the default `ζ`.
pub const DEFAULT_HERALD_SCALE: f64 = 40.0;

/// `n` uniformly spaced phases in `[0, π)`.
pub fn uniform_phases(n: usize) -> Vec<f64> {
    (0..n).map(|k| std::f64::consts::PI * k as f64 / n as f64).collect()
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// States a probe run samples from: (imperfect heralded output, no-click state).
pub fn probe_states(run: &ProbeRun) -> Result<(HeraldedOutput<f64>, DensityMatrix<f64>)> {
    let model = ImperfectionModel::new(run.t1, run.t2, run.kind)?;
    let zeta = InteractionStrength::new(run.zeta)?;
    let alpha_box = effective_box_amplitude(run.alpha_in, &model);
    let probe = fock::coherent_state(creal(alpha_box), run.d_sim)?.to_density();
    let ideal = ideal_box_first_order(&probe, run.kind, zeta)?;
    let heralded = apply_imperfections(&ideal, &model, run.alpha_in)?;
    let no_click = fock::coherent_state(creal(run.t1.sqrt() * run.alpha_in), run.d_sim)?.to_density();
    Ok((heralded, no_click))
}

/// Simulates herald statistics and tagged quadrature samples for one probe.
pub fn simulate_probe_run(run: &ProbeRun) -> Result<QuadratureDataset> {
    if run.phases.is_empty() {
        return Err(Error::Domain("phase list is empty".into()));
    }
    if let Some(bad) = run.phases.iter().find(|p| !(0.0..std::f64::consts::PI).contains(*p)) {
        return Err(Error::Domain(format!("phase {bad} outside [0, π)")));
    }
    if !(run.alpha_in >= 0.0) {
        return Err(Error::Domain(format!("probe amplitude {} must be real and nonnegative", run.alpha_in)));
    }
    let (heralded, no_click) = probe_states(run)?;
    let alpha_bits = run.alpha_in.to_bits();

    let p_slot = (run.herald_scale * heralded.herald_probability).clamp(0.0, 1.0);
    let mut rate_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[run.seed, alpha_bits, 0x5241_5445]));
    let heralded_slots = Binomial::new(run.slots, p_slot)
        .map_err(|e| Error::Domain(format!("herald draw: {e}")))?
        .sample(&mut rate_rng);

    let heralded_per_phase = if heralded.is_defined() && p_slot > 0.0 { run.samples_per_phase } else { 0 };
    let per_phase: Vec<Vec<QuadratureSample>> = run
        .phases
        .par_iter()
        .map(|&theta| {
            let mut out = Vec::with_capacity(heralded_per_phase + run.samples_per_phase);
            if let (Some(state), true) = (&heralded.conditional_state, heralded_per_phase > 0) {
                let seed = mix_seed(&[run.seed, alpha_bits, theta.to_bits(), 1]);
                for x in homodyne::sample_quadratures(state, theta, heralded_per_phase, seed) {
                    out.push(QuadratureSample { alpha_in: run.alpha_in, theta, x, heralded: true });
                }
            }
            let seed = mix_seed(&[run.seed, alpha_bits, theta.to_bits(), 0]);
            for x in homodyne::sample_quadratures(&no_click, theta, run.samples_per_phase, seed) {
                out.push(QuadratureSample { alpha_in: run.alpha_in, theta, x, heralded: false });
            }
            out
        })
        .collect();

    let model = ImperfectionModel::new(run.t1, run.t2, run.kind)?;
    let meta = DatasetMeta {
        kind: run.kind,
        alpha_in: run.alpha_in,
        alpha_box: effective_box_amplitude(run.alpha_in, &model),
        t1: run.t1,
        t2: run.t2,
        zeta: run.zeta,
        herald_scale: run.herald_scale,
        seed: run.seed,
        d_sim: run.d_sim,
        slots: run.slots,
        heralded_slots,
        phases: run.phases.clone(),
        heralded_per_phase,
        unheralded_per_phase: run.samples_per_phase,
        unheralded_model: match run.kind {
            BlackBoxKind::Annihilation => UnheraldedModel::AttenuatedProbe,
            BlackBoxKind::Creation => UnheraldedModel::ModelExtrapolated,
        },
        displacement_correction: 0.0,
        config_hash: None,
        extra: Default::default(),
    };
    Ok(QuadratureDataset { samples: per_phase.into_iter().flatten().collect(), meta }.quantized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{coherent_state, pure_state_fidelity, PureState};
    use crate::scalar::C;
    use approx::assert_abs_diff_eq;

    fn z(v: f64) -> InteractionStrength<f64> {
        InteractionStrength::new(v).unwrap()
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("creation".parse::<BlackBoxKind>().unwrap(), BlackBoxKind::Creation);
        assert_eq!(BlackBoxKind::Annihilation.to_string(), "annihilation");
        assert!("teleport".parse::<BlackBoxKind>().is_err());
        assert!(InteractionStrength::new(0.0).is_err());
        assert!(z(0.05).is_valid_for(2.0));
        assert!(!z(0.05).is_valid_for(2.1));
    }

    #[test]
    fn annihilation_leaves_coherent_state() {
        let probe = coherent_state::<f64>(C::new(1.3, 0.0), D_SIM).unwrap();
        let out = ideal_box_first_order(&probe.to_density(), BlackBoxKind::Annihilation, z(0.05)).unwrap();
        let f = pure_state_fidelity(&probe, out.conditional_state.as_ref().unwrap()).unwrap();
        assert!(f > 1.0 - 1e-9, "{f}");
        assert_abs_diff_eq!(out.herald_probability, 0.0025 * 1.69, epsilon = 1e-12);
    }

    #[test]
    fn creation_on_vacuum_gives_single_photon() {
        let vac = DensityMatrix::<f64>::fock(0, D_SIM).unwrap();
        let out = ideal_box_first_order(&vac, BlackBoxKind::Creation, z(0.05)).unwrap();
        let f = pure_state_fidelity(&PureState::fock(1, D_SIM).unwrap(), out.conditional_state.as_ref().unwrap());
        assert_abs_diff_eq!(f.unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.herald_probability, 0.0025, epsilon = 1e-15);
    }

    #[test]
    fn annihilation_on_two_photons() {
        let two = DensityMatrix::<f64>::fock(2, 6).unwrap();
        let out = ideal_box_first_order(&two, BlackBoxKind::Annihilation, z(0.1)).unwrap();
        assert_abs_diff_eq!(out.conditional_state.unwrap().matrix()[(1, 1)].re, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.herald_probability, 0.01 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn vacuum_into_annihilation_is_flagged() {
        let vac = DensityMatrix::<f64>::fock(0, 5).unwrap();
        let out = ideal_box_first_order(&vac, BlackBoxKind::Annihilation, z(0.05)).unwrap();
        assert_eq!(out.herald_probability, 0.0);
        assert!(!out.is_defined());
    }

    #[test]
    fn first_order_rates_match_law() {
        for k in 0..12 {
            let alpha = 1.7 * k as f64 / 11.0;
            let rho = coherent_state::<f64>(C::new(alpha, 0.0), D_SIM).unwrap().to_density();
            for kind in [BlackBoxKind::Annihilation, BlackBoxKind::Creation] {
                let out = ideal_box_first_order(&rho, kind, z(0.05)).unwrap();
                let want = 0.0025 * herald_probability_law(alpha, kind);
                assert!((out.herald_probability - want).abs() <= 1e-8 * want.max(1e-12));
            }
        }
    }

    #[test]
    fn rate_law_values() {
        assert_eq!(herald_probability_law(0.0, BlackBoxKind::Annihilation), 0.0);
        assert_eq!(herald_probability_law(0.0, BlackBoxKind::Creation), 1.0);
        assert_abs_diff_eq!(herald_probability_law(1.7, BlackBoxKind::Creation), 3.89, epsilon = 1e-12);
    }

    #[test]
    fn effective_amplitude() {
        let m = ImperfectionModel::new(0.75, 0.79, BlackBoxKind::Creation).unwrap();
        assert_abs_diff_eq!(effective_box_amplitude(1.0, &m), 0.79f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(effective_box_amplitude(1.0, &m), 0.8888, epsilon = 1e-4);
        assert_eq!(effective_box_amplitude(0.0, &m), 0.0);
        let a = ImperfectionModel::new(0.75, 0.79, BlackBoxKind::Annihilation).unwrap();
        assert_eq!(effective_box_amplitude(1.3, &a), 1.3);
        assert!(ImperfectionModel::new(1.2, 0.5, BlackBoxKind::Creation).is_err());
    }

    #[test]
    fn imperfect_creation_on_vacuum() {
        let vac = DensityMatrix::<f64>::fock(0, D_SIM).unwrap();
        let m = ImperfectionModel::new(0.75, 0.79, BlackBoxKind::Creation).unwrap();
        let ideal = ideal_box_first_order(&vac, BlackBoxKind::Creation, z(0.05)).unwrap();
        let out = apply_imperfections(&ideal, &m, 0.0).unwrap();
        assert_eq!(out.herald_probability, ideal.herald_probability);
        let rho = out.conditional_state.unwrap();
        assert!((rho.matrix()[(1, 1)].re - 0.59).abs() <= 0.005);
        assert!((rho.matrix()[(0, 0)].re - 0.41).abs() <= 0.005);
        for i in 0..rho.dim() {
            for j in 0..rho.dim() {
                if i != j {
                    assert!(rho.matrix()[(i, j)].norm() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn imperfect_annihilation_with_unit_transmission_is_identity() {
        let rho = coherent_state::<f64>(C::new(0.9, 0.0), D_SIM).unwrap().to_density();
        let out = ideal_box_first_order(&rho, BlackBoxKind::Annihilation, z(0.05)).unwrap();
        let m = ImperfectionModel::new(1.0, 0.3, BlackBoxKind::Annihilation).unwrap();
        assert_eq!(apply_imperfections(&out, &m, 0.9).unwrap(), out);
    }

    #[test]
    fn creation_displacement_shifts_mean_x() {
        let m = ImperfectionModel::new(0.75, 0.79, BlackBoxKind::Creation).unwrap();
        let alpha_in = 1.0;
        let probe = coherent_state::<f64>(C::new(effective_box_amplitude(alpha_in, &m), 0.0), D_SIM).unwrap();
        let ideal = ideal_box_first_order(&probe.to_density(), BlackBoxKind::Creation, z(0.05)).unwrap();
        let lossy = fock::loss_channel(ideal.conditional_state.as_ref().unwrap(), m.output_transmission()).unwrap();
        let shifted = apply_imperfections(&ideal, &m, alpha_in).unwrap().conditional_state.unwrap();
        let a = fock::annihilation_matrix::<f64>(D_SIM).unwrap();
        let mean_x = |r: &DensityMatrix<f64>| 2f64.sqrt() * r.expectation(&a).re;
        let shift = mean_x(&shifted) - mean_x(&lossy);
        assert_abs_diff_eq!(shift, (2.0f64 * 0.75).sqrt() * 0.21, epsilon = 1e-6);
        assert_abs_diff_eq!(shift, 0.2572, epsilon = 1e-4);
    }

    #[test]
    fn exact_bs_transmits_cos_zeta_alpha() {
        // beam-splitter Heisenberg picture: signal leaves as |cos ζ · α⟩ independent of the trigger
        let zeta = 0.1;
        let alpha = 0.8;
        let rho = coherent_state::<f64>(C::new(alpha, 0.0), 15).unwrap().to_density();
        let out = exact_two_mode_box(&rho, BlackBoxKind::Annihilation, z(zeta), 4).unwrap();
        let target = coherent_state::<f64>(C::new(zeta.cos() * alpha, 0.0), 15).unwrap();
        let f = pure_state_fidelity(&target, out.conditional_state.as_ref().unwrap()).unwrap();
        assert!(f > 1.0 - 1e-8, "{f}");
        // trigger holds |−sin ζ · α⟩; one-photon probability
        let s2 = (zeta.sin() * alpha).powi(2);
        assert_abs_diff_eq!(out.herald_probability, s2 * (-s2).exp(), epsilon = 1e-9);
    }

    #[test]
    fn exact_box_rejects_tiny_trigger() {
        let rho = DensityMatrix::<f64>::fock(0, 4).unwrap();
        assert!(exact_two_mode_box(&rho, BlackBoxKind::Creation, z(0.1), 2).is_err());
    }

    #[test]
    fn first_order_breaks_down_outside_validity() {
        let nbar: f64 = 2.0;
        let zeta = 0.5 / nbar;
        let rho = coherent_state::<f64>(C::new(nbar.sqrt(), 0.0), D_SIM).unwrap().to_density();
        for kind in [BlackBoxKind::Annihilation, BlackBoxKind::Creation] {
            let approx = ideal_box_first_order(&rho, kind, z(zeta)).unwrap().herald_probability;
            let exact = exact_two_mode_box(&rho, kind, z(zeta), 6).unwrap().herald_probability;
            assert!(((approx - exact) / exact).abs() > 0.01, "{kind}: {approx} vs {exact}");
        }
    }

    #[test]
    fn simulation_rejects_bad_phases() {
        let mut run = ProbeRun::new(0.5, BlackBoxKind::Annihilation, 1);
        run.phases.clear();
        assert!(simulate_probe_run(&run).is_err());
        run.phases = vec![4.0];
        assert!(simulate_probe_run(&run).is_err());
    }

    #[test]
    fn vacuum_annihilation_run_never_heralds() {
        let mut run = ProbeRun::new(0.0, BlackBoxKind::Annihilation, 9);
        run.samples_per_phase = 50;
        run.phases = uniform_phases(3);
        let data = simulate_probe_run(&run).unwrap();
        assert!(data.samples.iter().all(|s| !s.heralded));
        assert_eq!(data.meta.heralded_slots, 0);
        data.validate().unwrap();
    }

    #[test]
    fn simulation_is_deterministic() {
        let mut run = ProbeRun::new(0.7, BlackBoxKind::Creation, 42);
        run.samples_per_phase = 20;
        run.phases = uniform_phases(4);
        run.t1 = 0.75;
        run.t2 = 0.79;
        let a = simulate_probe_run(&run).unwrap();
        let b = simulate_probe_run(&run).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta.unheralded_model, UnheraldedModel::ModelExtrapolated);
        run.seed = 43;
        assert_ne!(simulate_probe_run(&run).unwrap().samples, a.samples);
    }
}
