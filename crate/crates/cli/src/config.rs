//! Flat `key = value` run configuration with a canonical, hashable form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use csqpt::fmt::sig9;
use csqpt::process_sim::{self, BlackBoxKind, ImperfectionModel, InteractionStrength, ProbeRun};
use csqpt::tomography::MleConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: BlackBoxKind,
    pub zeta: f64,
    pub t1: f64,
    pub t2: f64,
    /// Input probe amplitudes `α_in`.
    pub alphas: Vec<f64>,
    pub phase_count: usize,
    /// Heralded (and, separately, unheralded) samples per phase setting.
    pub samples: usize,
    pub slots: u64,
    pub herald_scale: f64,
    pub seed: u64,
    pub n_max: usize,
    pub n_max_out: usize,
    pub input_padding: usize,
    /// Detection efficiency for the reconstruction; derived from `t1`, `t2` when unset.
    pub eta: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub bin_width: f64,
    /// Not part of the canonical form.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mle = MleConfig::<f64>::default();
        Self {
            kind: BlackBoxKind::Annihilation,
            zeta: process_sim::DEFAULT_ZETA,
            t1: 1.0,
            t2: 1.0,
            alphas: (0..12).map(|i| 1.7 * i as f64 / 11.0).collect(),
            phase_count: 12,
            samples: 10_000,
            slots: 100_000,
            herald_scale: process_sim::DEFAULT_HERALD_SCALE,
            seed: 1,
            n_max: mle.n_max,
            n_max_out: mle.n_max_out,
            input_padding: mle.input_padding,
            eta: None,
            tolerance: mle.tolerance,
            max_iterations: mle.max_iterations,
            bin_width: mle.bin_width,
            out: None,
        }
    }
}

fn bad(key: &str, value: &str, line: usize) -> CliError {
    CliError::Config(format!("line {line}: bad value `{value}` for `{key}`"))
}

fn num<V: FromStr>(key: &str, value: &str, line: usize) -> Result<V, CliError> {
    value.parse().map_err(|_| bad(key, value, line))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "kind" => c.kind = value.parse().map_err(|_| bad(key, value, line))?,
                "zeta" => c.zeta = num(key, value, line)?,
                "t1" => c.t1 = num(key, value, line)?,
                "t2" => c.t2 = num(key, value, line)?,
                "alphas" => {
                    c.alphas = value
                        .split([',', ';'])
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| num(key, s, line))
                        .collect::<Result<_, _>>()?
                }
                "phases" => c.phase_count = num(key, value, line)?,
                "samples" => c.samples = num(key, value, line)?,
                "slots" => c.slots = num(key, value, line)?,
                "herald_scale" => c.herald_scale = num(key, value, line)?,
                "seed" => c.seed = num(key, value, line)?,
                "n_max" => c.n_max = num(key, value, line)?,
                "n_max_out" => c.n_max_out = num(key, value, line)?,
                "input_padding" => c.input_padding = num(key, value, line)?,
                "eta" => c.eta = if value == "auto" { None } else { Some(num(key, value, line)?) },
                "tolerance" => c.tolerance = num(key, value, line)?,
                "max_iterations" => c.max_iterations = num(key, value, line)?,
                "bin_width" => c.bin_width = num(key, value, line)?,
                "out" => c.out = Some(PathBuf::from(value)),
                other => return Err(CliError::Config(format!("line {line}: unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        InteractionStrength::new(self.zeta).map_err(|e| CliError::Config(e.to_string()))?;
        ImperfectionModel::new(self.t1, self.t2, self.kind).map_err(|e| CliError::Config(e.to_string()))?;
        if self.alphas.is_empty() {
            return err("empty amplitude list".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return err(format!("amplitude {a} must be real and nonnegative"));
        }
        if self.phase_count == 0 || self.samples == 0 || self.slots == 0 {
            return err("phases, samples and slots must be positive".into());
        }
        if !(self.herald_scale > 0.0) {
            return err(format!("herald_scale {} must be positive", self.herald_scale));
        }
        if self.n_max == 0 {
            return err("n_max must be at least 1".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta <= 1.0) {
                return err(format!("eta {eta} outside (0, 1]"));
            }
        }
        if !(self.tolerance >= 0.0) || !(self.bin_width > 0.0) {
            return err("tolerance must be nonnegative and bin_width positive".into());
        }
        Ok(())
    }

    /// Sorted `key=value` lines with 9-digit numbers; excludes `out`.
    pub fn canonical(&self) -> String {
        let mut entries: Vec<(&str, String)> = vec![
            ("alphas", self.alphas.iter().map(|a| sig9(*a)).collect::<Vec<_>>().join(",")),
            ("bin_width", sig9(self.bin_width)),
            ("eta", self.eta.map_or("auto".to_string(), sig9)),
            ("herald_scale", sig9(self.herald_scale)),
            ("input_padding", self.input_padding.to_string()),
            ("kind", self.kind.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("n_max", self.n_max.to_string()),
            ("n_max_out", self.n_max_out.to_string()),
            ("phases", self.phase_count.to_string()),
            ("samples", self.samples.to_string()),
            ("seed", self.seed.to_string()),
            ("slots", self.slots.to_string()),
            ("t1", sig9(self.t1)),
            ("t2", sig9(self.t2)),
            ("tolerance", sig9(self.tolerance)),
            ("zeta", sig9(self.zeta)),
        ];
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn model(&self) -> ImperfectionModel<f64> {
        ImperfectionModel { t1: self.t1, t2: self.t2, kind: self.kind }
    }

    /// Efficiency folded into the measurement operators.
    pub fn effective_eta(&self) -> f64 {
        self.eta.unwrap_or_else(|| self.model().output_transmission())
    }

    pub fn probe_run(&self, alpha_in: f64) -> ProbeRun {
        ProbeRun {
            t1: self.t1,
            t2: self.t2,
            zeta: self.zeta,
            phases: process_sim::uniform_phases(self.phase_count),
            samples_per_phase: self.samples,
            slots: self.slots,
            herald_scale: self.herald_scale,
            ..ProbeRun::new(alpha_in, self.kind, self.seed)
        }
    }

    pub fn mle(&self, herald_normalization: bool) -> MleConfig<f64> {
        MleConfig {
            n_max: self.n_max,
            n_max_out: self.n_max_out,
            input_padding: self.input_padding,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            eta: self.effective_eta(),
            bin_width: self.bin_width,
            herald_normalization,
            ..MleConfig::default()
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_form() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.canonical()).unwrap();
        // 9-digit rounding is idempotent, so the hash survives a round trip
        assert_eq!(back.canonical(), c.canonical());
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.kind, c.kind);
        assert_eq!(back.samples, c.samples);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn hash_ignores_layout_and_output_dir() {
        let a = RunConfig::parse("kind = creation\nt1=0.75 # attenuator\n\nout = /tmp/x\n").unwrap();
        let b = RunConfig::parse("t1 = 0.750\nkind=creation\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::parse("t1 = 0.76\nkind=creation\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn derived_efficiency() {
        let c = RunConfig::parse("kind = creation\nt1 = 0.75\nt2 = 0.79").unwrap();
        assert!((c.effective_eta() - 0.5925).abs() < 1e-15);
        let a = RunConfig::parse("t1 = 0.75\nt2 = 0.79").unwrap();
        assert_eq!(a.effective_eta(), 0.75);
        assert_eq!(RunConfig::parse("t1 = 0.75\neta = 0.9").unwrap().effective_eta(), 0.9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in ["t1 = 1.5", "alphas = -0.2, 1", "colour = red", "zeta", "samples = 0", "eta = 0", "alphas ="] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
