use std::f64::consts::PI;

use csqpt::fock::{coherent_state, DensityMatrix};
use csqpt::homodyne::sample_quadratures;
use csqpt::process_sim::{self, BlackBoxKind, ProbeRun};
use num_complex::Complex;
use statrs::distribution::{ContinuousCDF, Normal};

/// Kolmogorov critical value at the 1% level.
const KS_01: f64 = 1.628;

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn gaussian(mean: f64) -> Normal {
    Normal::new(mean, 0.5f64.sqrt()).unwrap()
}

#[test]
fn vacuum_samples_pass_ks_against_gaussian() {
    let vac = DensityMatrix::<f64>::fock(0, 6).unwrap();
    let n = 20_000;
    for (i, &theta) in [0.0, 1.1, 2.9].iter().enumerate() {
        let xs = sample_quadratures(&vac, theta, n, 100 + i as u64);
        let d = ks_statistic(xs, |x| gaussian(0.0).cdf(x));
        assert!(d * (n as f64).sqrt() < KS_01, "θ = {theta}: D = {d}");
    }
}

#[test]
fn single_photon_samples_pass_ks_against_closed_form() {
    let one = DensityMatrix::<f64>::fock(1, 6).unwrap();
    let n = 20_000;
    let xs = sample_quadratures(&one, 0.4, n, 5);
    // CDF of 2x²e^{−x²}/√π
    let cdf = |x: f64| gaussian(0.0).cdf(x) - x * (-x * x).exp() / PI.sqrt();
    let d = ks_statistic(xs, cdf);
    assert!(d * (n as f64).sqrt() < KS_01, "D = {d}");
}

#[test]
fn coherent_samples_pass_ks_against_shifted_gaussian() {
    let rho = coherent_state::<f64>(Complex::new(0.9, 0.0), 20).unwrap().to_density();
    let n = 20_000;
    for &theta in &[0.0, PI / 3.0] {
        let xs = sample_quadratures(&rho, theta, n, 9);
        let mean = 2f64.sqrt() * 0.9 * theta.cos();
        let d = ks_statistic(xs, |x| gaussian(mean).cdf(x));
        assert!(d * (n as f64).sqrt() < KS_01, "θ = {theta}: D = {d}");
    }
}

#[test]
fn vacuum_variance_is_one_half() {
    let vac = DensityMatrix::<f64>::fock(0, 6).unwrap();
    let n = 50_000;
    let xs = sample_quadratures(&vac, 0.3, n, 77);
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    // sd of the sample variance is σ²√(2/n)
    let sd = 0.5 * (2.0 / n as f64).sqrt();
    assert!((var - 0.5).abs() < 4.0 * sd, "variance {var}");
    assert!(mean.abs() < 4.0 * (0.5 / n as f64).sqrt(), "mean {mean}");
}

#[test]
fn herald_counts_are_binomial_around_the_rate_law() {
    let n_runs = 40;
    let slots = 20_000u64;
    let alpha = 1.2;
    let run = ProbeRun { samples_per_phase: 1, phases: vec![0.0], slots, ..ProbeRun::new(alpha, BlackBoxKind::Annihilation, 0) };
    let p = run.herald_scale * run.zeta * run.zeta * alpha * alpha;
    let counts: Vec<f64> = (0..n_runs)
        .map(|s| {
            let d = process_sim::simulate_probe_run(&ProbeRun { seed: s, ..run.clone() }).unwrap();
            d.meta.heralded_slots as f64
        })
        .collect();
    let mean = counts.iter().sum::<f64>() / n_runs as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n_runs as f64 - 1.0);
    let expect = slots as f64 * p;
    let binom_var = expect * (1.0 - p);
    assert!((mean - expect).abs() < 4.0 * (binom_var / n_runs as f64).sqrt(), "mean {mean} vs {expect}");
    // sample variance of 40 draws is within a factor of two of the binomial variance
    assert!(var > 0.5 * binom_var && var < 2.0 * binom_var, "variance {var} vs {binom_var}");
}
