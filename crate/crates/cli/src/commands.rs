use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use csqpt::analysis::{self, GridSpec, RateSample};
use csqpt::fmt::sig9;
use csqpt::homodyne::{self, QuadratureDataset};
use csqpt::process_sim::{self, BlackBoxKind, ImperfectionModel};
use csqpt::tomography::{self, MleResult, ProcessTensor, Provenance, TensorFile};
use rayon::prelude::*;

use crate::config::{sha256_hex, RunConfig};
use crate::{CliError, Result};

pub const RATES_FILE: &str = "rates.csv";

/// Amplitudes used by `analyze --mode wigner` when no config is given.
pub const DEFAULT_WIGNER_ALPHAS: [f64; 3] = [0.0, 0.5, 1.0];

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn hash_line(hash: Option<&str>) -> String {
    format!("# config_hash={}\n", hash.unwrap_or("none"))
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateSummary {
    pub files: Vec<PathBuf>,
    pub rates: Vec<RateSample>,
}

pub fn probe_file_name(index: usize) -> String {
    format!("probe_{index:02}.dat")
}

/// One dataset per amplitude plus `rates.csv`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimulateSummary> {
    create_dir(out)?;
    let hash = cfg.hash();
    let datasets: Vec<QuadratureDataset> = cfg
        .alphas
        .par_iter()
        .map(|&a| process_sim::simulate_probe_run(&cfg.probe_run(a)))
        .collect::<csqpt::Result<_>>()?;
    let mut files = Vec::with_capacity(datasets.len());
    let mut rates = Vec::with_capacity(datasets.len());
    let mut csv = hash_line(Some(&hash));
    writeln!(csv, "# kind={}", cfg.kind).unwrap();
    csv.push_str("alpha_in,alpha_box,heralded,total\n");
    for (i, mut d) in datasets.into_iter().enumerate() {
        d.meta.config_hash = Some(hash.clone());
        let path = out.join(probe_file_name(i));
        write(&path, &d.to_text())?;
        let m = &d.meta;
        writeln!(csv, "{},{},{},{}", sig9(m.alpha_in), sig9(m.alpha_box), m.heralded_slots, m.slots).unwrap();
        rates.push(RateSample { alpha: m.alpha_box, count: m.heralded_slots as f64, total: m.slots as f64 });
        files.push(path);
    }
    write(&out.join(RATES_FILE), &csv)?;
    Ok(SimulateSummary { files, rates })
}

/// `*.dat` files of a directory in name order.
pub fn dataset_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "dat") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no .dat dataset files"),
        });
    }
    Ok(paths)
}

/// Loads every dataset of `dir` with the SHA-256 of its file bytes.
pub fn load_datasets(dir: &Path) -> Result<Vec<(QuadratureDataset, String)>> {
    dataset_paths(dir)?
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let data = QuadratureDataset::read_from(bytes.as_slice()).map_err(|e| CliError::data(&path, e))?;
            Ok((data, sha256_hex(&bytes)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReconstructOptions {
    pub herald_normalization: bool,
    pub workers: Option<usize>,
    pub allow_provenance_mismatch: bool,
}

impl ReconstructOptions {
    pub fn new() -> Self {
        Self { herald_normalization: true, ..Default::default() }
    }
}

pub struct Reconstruction {
    pub result: MleResult<f64>,
    pub tensor: ProcessTensor<f64>,
    pub file: TensorFile,
}

fn check_dataset_against_config(d: &QuadratureDataset, cfg: &RunConfig) -> Option<String> {
    let m = &d.meta;
    if m.kind != cfg.kind {
        return Some(format!("dataset α_in = {} is {}, config says {}", m.alpha_in, m.kind, cfg.kind));
    }
    if (m.t1 - cfg.t1).abs() > 1e-9 || (m.t2 - cfg.t2).abs() > 1e-9 {
        return Some(format!("dataset α_in = {} has t1 = {}, t2 = {}, config {} / {}", m.alpha_in, m.t1, m.t2, cfg.t1, cfg.t2));
    }
    None
}

/// Prepares datasets for the fit: creation data get `ΔX·cos θ` subtracted
/// unless a correction has already been applied.
pub fn prepare_datasets(datasets: Vec<QuadratureDataset>, cfg: &RunConfig) -> Vec<QuadratureDataset> {
    let model: ImperfectionModel<f64> = cfg.model();
    datasets
        .into_iter()
        .map(|d| {
            if cfg.kind == BlackBoxKind::Creation && d.meta.displacement_correction == 0.0 {
                let dx = model.displacement(d.meta.alpha_in);
                if dx != 0.0 {
                    return homodyne::displacement_correct(&d, dx);
                }
            }
            d
        })
        .collect()
}

pub fn reconstruct(data_dir: &Path, cfg: &RunConfig, opts: ReconstructOptions) -> Result<Reconstruction> {
    let loaded = load_datasets(data_dir)?;
    for (d, _) in &loaded {
        if let Some(msg) = check_dataset_against_config(d, cfg) {
            if !opts.allow_provenance_mismatch {
                return Err(CliError::Provenance(msg));
            }
            log::warn!("{msg}");
        }
    }
    let (datasets, hashes): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let datasets = prepare_datasets(datasets, cfg);
    let mle_cfg = cfg.mle(opts.herald_normalization);
    let result = with_workers(opts.workers, || tomography::mle_reconstruct(&datasets, &mle_cfg))??;
    if !result.converged {
        log::warn!("reconstruction stopped after {} iterations without converging", result.iterations);
    }
    let tensor = result.tensor();
    let provenance = Provenance {
        kind: Some(cfg.kind),
        config_hash: Some(cfg.hash()),
        dataset_hashes: hashes,
        converged: Some(result.converged),
        iterations: Some(result.iterations),
        final_log_likelihood: Some(result.final_log_likelihood()),
        herald_normalization: Some(opts.herald_normalization),
        likelihood_nondecreasing: Some(result.likelihood_nondecreasing()),
        max_trace_defect: Some(result.max_trace_defect),
        min_eigenvalue: Some(result.min_eigenvalue),
    };
    let file = TensorFile::from_tensor(&tensor, provenance);
    Ok(Reconstruction { result, tensor, file })
}

/// `<out>.loglik.csv` next to the tensor file.
pub fn loglik_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loglik.csv");
    out.with_file_name(name)
}

pub fn write_reconstruction(r: &Reconstruction, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, &r.file.to_json()?)?;
    let mut csv = hash_line(r.file.provenance.config_hash.as_deref());
    csv.push_str("iteration,log_likelihood\n");
    for (i, l) in r.result.log_likelihood.iter().enumerate() {
        writeln!(csv, "{i},{}", sig9(*l)).unwrap();
    }
    write(&loglik_path(out), &csv)
}

pub fn load_tensor_file(path: &Path) -> Result<TensorFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    TensorFile::from_json(&text).map_err(|e| CliError::data(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyzeMode {
    Diag,
    Fidelity,
    Rates,
    Wigner,
}

impl std::str::FromStr for AnalyzeMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag" => Ok(Self::Diag),
            "fidelity" => Ok(Self::Fidelity),
            "rates" => Ok(Self::Rates),
            "wigner" => Ok(Self::Wigner),
            other => Err(CliError::Usage(format!("unknown mode `{other}` (diag|fidelity|rates|wigner)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub config: Option<RunConfig>,
    /// Dataset directory holding `rates.csv`, for `rates` mode.
    pub data: Option<PathBuf>,
    pub allow_provenance_mismatch: bool,
}

/// Output file prefix: the first 12 hex digits of the producing config hash.
pub fn output_prefix(provenance: &Provenance) -> String {
    match &provenance.config_hash {
        Some(h) => h.chars().take(12).collect(),
        None => "unhashed".to_string(),
    }
}

fn mismatch(opts: &AnalyzeOptions, msg: String) -> Result<()> {
    if opts.allow_provenance_mismatch {
        log::warn!("{msg}");
        Ok(())
    } else {
        Err(CliError::Provenance(msg))
    }
}

fn tensor_kind(file: &TensorFile, opts: &AnalyzeOptions) -> Result<BlackBoxKind> {
    file.provenance
        .kind
        .or(opts.config.as_ref().map(|c| c.kind))
        .ok_or_else(|| CliError::Usage("tensor has no recorded process kind; pass --config".into()))
}

/// Writes the report files for `mode` into `out_dir` and returns their paths.
pub fn analyze(tensor_path: &Path, mode: AnalyzeMode, out_dir: &Path, opts: &AnalyzeOptions) -> Result<Vec<PathBuf>> {
    let file = load_tensor_file(tensor_path)?;
    let hash = file.provenance.config_hash.clone();
    if let Some(cfg) = &opts.config {
        let want = cfg.hash();
        if hash.as_deref() != Some(want.as_str()) {
            mismatch(opts, format!("tensor config hash {} differs from config {want}", hash.as_deref().unwrap_or("none")))?;
        }
    }
    let t: ProcessTensor<f64> = file.tensor().map_err(|e| CliError::data(tensor_path, e))?;
    create_dir(out_dir)?;
    let prefix = output_prefix(&file.provenance);
    let header = hash_line(hash.as_deref());
    let path = |suffix: &str| out_dir.join(format!("{prefix}_{suffix}"));
    let mut written = Vec::new();
    match mode {
        AnalyzeMode::Diag => {
            let diag = analysis::diagonal_elements(&t)?;
            let mut csv = header.clone();
            csv.push_str("m,k,value\n");
            for m in 0..diag.nrows() {
                for k in 0..diag.ncols() {
                    writeln!(csv, "{m},{k},{}", sig9(diag[(m, k)])).unwrap();
                }
            }
            let p = path("diag.csv");
            write(&p, &csv)?;
            written.push(p);
            if let Ok(kind) = tensor_kind(&file, opts) {
                let fractions = analysis::target_fractions(&diag, kind);
                let mut csv = header;
                csv.push_str("m,row_sum,target_k,target_fraction\n");
                for (m, f) in fractions.iter().enumerate() {
                    let sum: f64 = diag.row(m).sum();
                    let k = analysis::target_level(kind, m).map_or(String::new(), |k| k.to_string());
                    let f = f.map_or(String::new(), sig9);
                    writeln!(csv, "{m},{},{k},{f}", sig9(sum)).unwrap();
                }
                let p = path("diag_summary.csv");
                write(&p, &csv)?;
                written.push(p);
            }
        }
        AnalyzeMode::Fidelity => {
            let kind = tensor_kind(&file, opts)?;
            let top = t.dim_in().saturating_sub(1).max(1);
            let n_max = opts.config.as_ref().map_or(top, |c| c.n_max.min(top));
            let seed = opts.config.as_ref().map_or(0, |c| c.seed);
            let curve = analysis::worst_case_fidelity_curve(&t, kind, n_max, analysis::DEFAULT_RESTARTS, seed)?;
            let mut csv = header;
            csv.push_str("n,worst_fidelity,restarts,iterations\n");
            for r in &curve {
                writeln!(csv, "{},{},{},{}", r.n, sig9(r.worst_fidelity), r.restarts, r.iterations).unwrap();
            }
            let p = path("fidelity.csv");
            write(&p, &csv)?;
            written.push(p);
        }
        AnalyzeMode::Rates => {
            let dir = opts.data.as_deref().ok_or_else(|| CliError::Usage("rates mode needs --data <dir>".into()))?;
            let rates = read_rates(&dir.join(RATES_FILE))?;
            if rates.config_hash != hash {
                mismatch(
                    opts,
                    format!(
                        "rates file config hash {} differs from tensor {}",
                        rates.config_hash.as_deref().unwrap_or("none"),
                        hash.as_deref().unwrap_or("none")
                    ),
                )?;
            }
            let kind = match rates.kind {
                Some(k) => k,
                None => tensor_kind(&file, opts)?,
            };
            let fit = analysis::fit_count_rates(&rates.samples, kind)?;
            let mut csv = header;
            writeln!(csv, "# kind={kind}").unwrap();
            writeln!(csv, "# scale={}", sig9(fit.scale)).unwrap();
            writeln!(csv, "# quadratic_coefficient={}", sig9(fit.quadratic_coefficient)).unwrap();
            writeln!(csv, "# chi2={} dof={}", sig9(fit.residual), fit.degrees_of_freedom).unwrap();
            writeln!(csv, "# p_value={}", fit.p_value.map_or("n/a".to_string(), sig9)).unwrap();
            csv.push_str("alpha,rate,model\n");
            for s in &rates.samples {
                let a2 = s.alpha * s.alpha;
                let model = match kind {
                    BlackBoxKind::Annihilation => fit.scale * a2,
                    BlackBoxKind::Creation => fit.scale * (1.0 + fit.quadratic_coefficient * a2),
                };
                writeln!(csv, "{},{},{}", sig9(s.alpha), sig9(s.count / s.total), sig9(model)).unwrap();
            }
            let p = path("rates.csv");
            write(&p, &csv)?;
            written.push(p);
        }
        AnalyzeMode::Wigner => {
            let alphas: Vec<f64> = opts
                .config
                .as_ref()
                .map_or_else(|| DEFAULT_WIGNER_ALPHAS.to_vec(), |c| c.alphas.clone());
            let report = analysis::wigner_report(&t, &alphas, &GridSpec::default())?;
            let mut summary = header.clone();
            for note in &report.notes {
                writeln!(summary, "# {note}").unwrap();
            }
            summary.push_str("alpha,herald_probability,min_w,min_x,min_p\n");
            for (i, e) in report.entries.iter().enumerate() {
                writeln!(
                    summary,
                    "{},{},{},{},{}",
                    sig9(e.alpha),
                    sig9(e.herald_probability),
                    sig9(e.min_value),
                    sig9(e.min_x),
                    sig9(e.min_p)
                )
                .unwrap();
                let mut csv = header.clone();
                writeln!(csv, "# alpha={}", sig9(e.alpha)).unwrap();
                csv.push_str("x,p,w\n");
                for (a, x) in e.grid.xs.iter().enumerate() {
                    for (b, p) in e.grid.ps.iter().enumerate() {
                        writeln!(csv, "{},{},{}", sig9(*x), sig9(*p), sig9(e.grid.values[(a, b)])).unwrap();
                    }
                }
                let p = path(&format!("wigner_{i:02}.csv"));
                write(&p, &csv)?;
                written.push(p);
            }
            let p = path("wigner_summary.csv");
            write(&p, &summary)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct RatesFile {
    pub config_hash: Option<String>,
    pub kind: Option<BlackBoxKind>,
    pub samples: Vec<RateSample>,
}

/// Reads `rates.csv`; the rate law is evaluated at `alpha_box`.
pub fn read_rates(path: &Path) -> Result<RatesFile> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, msg: String| CliError::data(path, csqpt::Error::Format { line, msg });
    let mut out = RatesFile::default();
    let mut header_seen = false;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                match k.trim() {
                    "config_hash" if v.trim() != "none" => out.config_hash = Some(v.trim().to_string()),
                    "kind" => out.kind = Some(v.trim().parse().map_err(|e: csqpt::Error| bad(line_no, e.to_string()))?),
                    _ => {}
                }
            }
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(line_no, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line_no, format!("bad number `{s}`")));
        out.samples.push(RateSample { alpha: num(f[1])?, count: num(f[2])?, total: num(f[3])? });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationRow {
    pub nominal: f64,
    pub recovered: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub rows: Vec<CalibrationRow>,
    /// Least-squares line `recovered = intercept + slope · nominal`.
    pub slope: f64,
    pub intercept: f64,
    pub config_hash: Option<String>,
}

/// Probe amplitudes from the unheralded homodyne samples, referred back to
/// the input through `√T₁`.
pub fn calibrate(data_dir: &Path) -> Result<Calibration> {
    let mut rows = Vec::new();
    let mut config_hash = None;
    for path in dataset_paths(data_dir)? {
        let d = QuadratureDataset::load(&path).map_err(|e| CliError::data(&path, e))?;
        if d.unheralded().next().is_none() {
            return Err(CliError::data(&path, csqpt::Error::Domain("no unheralded records".into())));
        }
        if !(d.meta.t1 > 0.0) {
            return Err(CliError::data(&path, csqpt::Error::Domain("t1 must be positive to calibrate".into())));
        }
        let est = homodyne::estimate_amplitude(d.unheralded()).map_err(|e| CliError::data(&path, e))?;
        let s = d.meta.t1.sqrt();
        rows.push(CalibrationRow { nominal: d.meta.alpha_in, recovered: est.amplitude / s, stderr: est.amplitude_stderr / s });
        config_hash = config_hash.or(d.meta.config_hash);
    }
    let (slope, intercept) = if rows.len() >= 2 {
        line_fit(rows.iter().map(|r| (r.nominal, r.recovered)))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(Calibration { rows, slope, intercept, config_hash })
}

fn line_fit(points: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64) {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxy, sxx) = points.fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx) * (x - mx)));
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn write_calibration(c: &Calibration, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut csv = hash_line(c.config_hash.as_deref());
    writeln!(csv, "# slope={} intercept={}", sig9(c.slope), sig9(c.intercept)).unwrap();
    csv.push_str("alpha_in,recovered,stderr\n");
    for r in &c.rows {
        writeln!(csv, "{},{},{}", sig9(r.nominal), sig9(r.recovered), sig9(r.stderr)).unwrap();
    }
    write(out, &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let pts = [(0.0, 0.1), (1.0, 2.1), (2.0, 4.1)];
        let (s, i) = line_fit(pts.iter().copied());
        assert!((s - 2.0).abs() < 1e-12 && (i - 0.1).abs() < 1e-12);
    }

    #[test]
    fn loglik_sidecar_sits_next_to_tensor() {
        assert_eq!(loglik_path(Path::new("out/t.json")), Path::new("out/t.json.loglik.csv"));
    }

    #[test]
    fn unknown_mode_is_a_usage_error() {
        let e = "spectrum".parse::<AnalyzeMode>().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
