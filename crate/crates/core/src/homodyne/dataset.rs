//! Tagged quadrature samples and their line-oriented text format.
//!
//! ```text
//! # csqpt-dataset v1
//! # kind=annihilation
//! # alpha_in=1
//! # ...
//! 1,0,1.41831093,1
//! ```
//! Records are `alpha_in,theta,x,heralded` with 9 significant digits and
//! `heralded ∈ {0, 1}`; every `#` line that contains `=` is metadata.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt::sig9;
use crate::process_sim::BlackBoxKind;

const MAGIC: &str = "csqpt-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSample {
    pub alpha_in: f64,
    /// Local-oscillator phase in `[0, π)`.
    pub theta: f64,
    pub x: f64,
    pub heralded: bool,
}

/// Origin of the no-click quadrature samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnheraldedModel {
    /// Attenuated probe, as used for amplitude calibration.
    #[default]
    AttenuatedProbe,
    /// Extrapolated: the heralding model fixes the no-click state only for annihilation.
    ModelExtrapolated,
}

impl UnheraldedModel {
    fn as_str(self) -> &'static str {
        match self {
            Self::AttenuatedProbe => "attenuated-probe",
            Self::ModelExtrapolated => "model-extrapolated",
        }
    }
}

impl FromStr for UnheraldedModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attenuated-probe" => Ok(Self::AttenuatedProbe),
            "model-extrapolated" => Ok(Self::ModelExtrapolated),
            other => Err(Error::Domain(format!("unknown unheralded model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub kind: BlackBoxKind,
    pub alpha_in: f64,
    /// Amplitude of the coherent state seen by the ideal box.
    pub alpha_box: f64,
    pub t1: f64,
    pub t2: f64,
    pub zeta: f64,
    pub herald_scale: f64,
    pub seed: u64,
    pub d_sim: usize,
    /// Pulse slots used for the herald-rate estimate.
    pub slots: u64,
    pub heralded_slots: u64,
    pub phases: Vec<f64>,
    pub heralded_per_phase: usize,
    pub unheralded_per_phase: usize,
    pub unheralded_model: UnheraldedModel,
    /// Accumulated `ΔX` subtracted as `ΔX·cos θ`.
    pub displacement_correction: f64,
    pub config_hash: Option<String>,
    /// Unrecognized keys, preserved verbatim.
    pub extra: BTreeMap<String, String>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            kind: BlackBoxKind::Annihilation,
            alpha_in: 0.0,
            alpha_box: 0.0,
            t1: 1.0,
            t2: 1.0,
            zeta: 0.05,
            herald_scale: 1.0,
            seed: 0,
            d_sim: 20,
            slots: 0,
            heralded_slots: 0,
            phases: Vec::new(),
            heralded_per_phase: 0,
            unheralded_per_phase: 0,
            unheralded_model: UnheraldedModel::AttenuatedProbe,
            displacement_correction: 0.0,
            config_hash: None,
            extra: BTreeMap::new(),
        }
    }
}

impl DatasetMeta {
    pub fn herald_fraction(&self) -> Option<f64> {
        (self.slots > 0).then(|| self.heralded_slots as f64 / self.slots as f64)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("kind", self.kind.to_string()),
            ("alpha_in", sig9(self.alpha_in)),
            ("alpha_box", sig9(self.alpha_box)),
            ("t1", sig9(self.t1)),
            ("t2", sig9(self.t2)),
            ("zeta", sig9(self.zeta)),
            ("herald_scale", sig9(self.herald_scale)),
            ("seed", self.seed.to_string()),
            ("d_sim", self.d_sim.to_string()),
            ("slots", self.slots.to_string()),
            ("heralded_slots", self.heralded_slots.to_string()),
            ("phases", self.phases.iter().map(|p| sig9(*p)).collect::<Vec<_>>().join(";")),
            ("heralded_per_phase", self.heralded_per_phase.to_string()),
            ("unheralded_per_phase", self.unheralded_per_phase.to_string()),
            ("unheralded_model", self.unheralded_model.as_str().to_string()),
            ("displacement_correction", sig9(self.displacement_correction)),
        ];
        if let Some(h) = &self.config_hash {
            v.push(("config_hash", h.clone()));
        }
        v
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<V: FromStr>(v: &str, key: &str, line: usize) -> Result<V> {
            v.trim().parse().map_err(|_| Error::Format { line, msg: format!("bad value `{v}` for `{key}`") })
        }
        match key {
            "kind" => self.kind = value.parse().map_err(|_| Error::Format { line, msg: format!("bad kind `{value}`") })?,
            "alpha_in" => self.alpha_in = num(value, key, line)?,
            "alpha_box" => self.alpha_box = num(value, key, line)?,
            "t1" => self.t1 = num(value, key, line)?,
            "t2" => self.t2 = num(value, key, line)?,
            "zeta" => self.zeta = num(value, key, line)?,
            "herald_scale" => self.herald_scale = num(value, key, line)?,
            "seed" => self.seed = num(value, key, line)?,
            "d_sim" => self.d_sim = num(value, key, line)?,
            "slots" => self.slots = num(value, key, line)?,
            "heralded_slots" => self.heralded_slots = num(value, key, line)?,
            "phases" => {
                self.phases = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(';').map(|p| num(p, key, line)).collect::<Result<_>>()?
                }
            }
            "heralded_per_phase" => self.heralded_per_phase = num(value, key, line)?,
            "unheralded_per_phase" => self.unheralded_per_phase = num(value, key, line)?,
            "unheralded_model" => {
                self.unheralded_model =
                    value.parse().map_err(|e: Error| Error::Format { line, msg: e.to_string() })?
            }
            "displacement_correction" => self.displacement_correction = num(value, key, line)?,
            "config_hash" => self.config_hash = Some(value.to_string()),
            _ => {
                self.extra.insert(key.to_string(), value.to_string());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureDataset {
    pub samples: Vec<QuadratureSample>,
    pub meta: DatasetMeta,
}

impl QuadratureDataset {
    pub fn empty(meta: DatasetMeta) -> Self {
        Self { samples: Vec::new(), meta }
    }

    /// Rounds every number to the 9 significant digits the file format keeps,
    /// so an in-memory dataset equals its reloaded file.
    pub fn quantized(mut self) -> Self {
        let q = |v: f64| -> f64 { sig9(v).parse().expect("sig9 output parses") };
        for s in &mut self.samples {
            s.alpha_in = q(s.alpha_in);
            s.theta = q(s.theta);
            s.x = q(s.x);
        }
        let m = &mut self.meta;
        for v in [&mut m.alpha_in, &mut m.alpha_box, &mut m.t1, &mut m.t2, &mut m.zeta, &mut m.herald_scale, &mut m.displacement_correction] {
            *v = q(*v);
        }
        for p in &mut m.phases {
            *p = q(*p);
        }
        self
    }

    pub fn heralded(&self) -> impl Iterator<Item = &QuadratureSample> {
        self.samples.iter().filter(|s| s.heralded)
    }

    pub fn unheralded(&self) -> impl Iterator<Item = &QuadratureSample> {
        self.samples.iter().filter(|s| !s.heralded)
    }

    /// Sample counts per `(θ, heralded)` setting, keyed by the bit pattern of θ.
    pub fn counts_per_setting(&self) -> BTreeMap<(u64, bool), usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry((s.theta.to_bits(), s.heralded)).or_insert(0) += 1;
        }
        out
    }

    /// Checks sample tags and per-setting counts against the metadata.
    pub fn validate(&self) -> Result<()> {
        if self.meta.heralded_slots > self.meta.slots {
            return Err(Error::Integrity("more heralded slots than slots".into()));
        }
        for s in &self.samples {
            if !s.x.is_finite() {
                return Err(Error::Integrity("non-finite quadrature value".into()));
            }
            if !(0.0..std::f64::consts::PI).contains(&s.theta) {
                return Err(Error::Integrity(format!("phase {} outside [0, π)", s.theta)));
            }
        }
        let counts = self.counts_per_setting();
        for &phase in &self.meta.phases {
            let h = counts.get(&(phase.to_bits(), true)).copied().unwrap_or(0);
            let u = counts.get(&(phase.to_bits(), false)).copied().unwrap_or(0);
            if h != self.meta.heralded_per_phase || u != self.meta.unheralded_per_phase {
                return Err(Error::Integrity(format!(
                    "phase {}: {h} heralded / {u} unheralded samples, metadata says {} / {}",
                    sig9(phase),
                    self.meta.heralded_per_phase,
                    self.meta.unheralded_per_phase
                )));
            }
        }
        let expected = self.meta.phases.len() * (self.meta.heralded_per_phase + self.meta.unheralded_per_phase);
        if expected != self.samples.len() {
            return Err(Error::Integrity(format!(
                "{} samples present, metadata accounts for {expected}",
                self.samples.len()
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * 40 + 512);
        writeln!(out, "# {MAGIC}").unwrap();
        for (k, v) in self.meta.entries() {
            writeln!(out, "# {k}={v}").unwrap();
        }
        for (k, v) in &self.meta.extra {
            writeln!(out, "# {k}={v}").unwrap();
        }
        writeln!(out, "# columns=alpha_in,theta,x,heralded").unwrap();
        for s in &self.samples {
            writeln!(out, "{},{},{},{}", sig9(s.alpha_in), sig9(s.theta), sig9(s.x), u8::from(s.heralded)).unwrap();
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses and validates. Errors carry 1-based line numbers.
    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut meta = DatasetMeta::default();
        let mut samples = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    let k = k.trim();
                    if k != "columns" {
                        meta.set(k, v.trim(), line_no)?;
                    }
                }
                continue;
            }
            samples.push(parse_record(line, line_no)?);
        }
        let data = Self { samples, meta };
        data.validate()?;
        Ok(data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<QuadratureSample> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(Error::Format { line: line_no, msg: format!("expected 4 fields, found {}", fields.len()) });
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|_| Error::Format { line: line_no, msg: format!("bad {what} `{s}`") })
    };
    let heralded = match fields[3] {
        "1" | "true" => true,
        "0" | "false" => false,
        other => return Err(Error::Format { line: line_no, msg: format!("bad herald flag `{other}`") }),
    };
    Ok(QuadratureSample {
        alpha_in: num(fields[0], "alpha_in")?,
        theta: num(fields[1], "theta")?,
        x: num(fields[2], "x")?,
        heralded,
    })
}
