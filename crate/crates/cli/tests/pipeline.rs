use std::fs;
use std::path::Path;
use std::process::Command;

use csqpt::process_sim::BlackBoxKind;
use csqpt::tomography::{ideal_process_tensor_between, Provenance, TensorFile};
use csqpt::homodyne::QuadratureDataset;
use csqpt_cli::*;
use tempfile::tempdir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_csqpt"));
    c.env("RUST_LOG", "error");
    c
}

fn small(kind: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "kind = {kind}\nalphas = 0, 0.4, 0.8, 1.2\nphases = 6\nsamples = 1500\n\
         n_max = 3\ninput_padding = 1\nn_max_out = 5\nmax_iterations = 1500\n"
    ))
    .unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn write_ideal(dir: &Path, kind: BlackBoxKind) -> std::path::PathBuf {
    let t = ideal_process_tensor_between::<f64>(kind, 5, 7).unwrap();
    let file = TensorFile::from_tensor(&t, Provenance { kind: Some(kind), ..Default::default() });
    let path = dir.join("ideal.json");
    fs::write(&path, file.to_json().unwrap()).unwrap();
    path
}

#[test]
fn default_config_gives_twelve_datasets_and_rates() {
    let dir = tempdir().unwrap();
    let cfg = RunConfig { samples: 50, ..RunConfig::default() };
    let s = simulate(&cfg, dir.path()).unwrap();
    assert_eq!(s.files.len(), 12);
    assert_eq!(csv_rows(&dir.path().join(RATES_FILE)).len(), 12);
    let vacuum = QuadratureDataset::load(&s.files[0]).unwrap();
    assert_eq!(vacuum.meta.alpha_in, 0.0);
    assert_eq!(vacuum.heralded().count(), 0);
    assert_eq!(vacuum.meta.heralded_slots, 0);
    assert_eq!(vacuum.meta.config_hash.as_deref(), Some(cfg.hash().as_str()));
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let cfg = small("creation");
    simulate(&cfg, a.path()).unwrap();
    with_workers(Some(1), || simulate(&cfg, b.path())).unwrap().unwrap();
    for name in [probe_file_name(0), probe_file_name(3), RATES_FILE.to_string()] {
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap(), "{name}");
    }
}

#[test]
fn reconstruction_is_deterministic_across_worker_counts() {
    let data = tempdir().unwrap();
    let cfg = small("annihilation");
    simulate(&cfg, data.path()).unwrap();
    let run = |workers| {
        let opts = ReconstructOptions { workers: Some(workers), ..ReconstructOptions::new() };
        reconstruct(data.path(), &cfg, opts).unwrap()
    };
    let (one, three) = (run(1), run(3));
    assert_eq!(one.file.to_json().unwrap(), three.file.to_json().unwrap());
    let p = &one.file.provenance;
    assert_eq!(p.dataset_hashes.len(), 4);
    assert_eq!(p.config_hash.as_deref(), Some(cfg.hash().as_str()));
    assert_eq!(p.likelihood_nondecreasing, Some(true));
    assert_eq!(one.tensor.dim_in(), 4);

    let out = data.path().join("t.json");
    write_reconstruction(&one, &out).unwrap();
    assert_eq!(csv_rows(&loglik_path(&out)).len(), one.result.log_likelihood.len());
}

#[test]
fn non_convergence_is_reported_in_the_file() {
    let data = tempdir().unwrap();
    let cfg = RunConfig { max_iterations: 3, ..small("annihilation") };
    simulate(&cfg, data.path()).unwrap();
    let out = data.path().join("t.json");
    let status = bin()
        .args(["reconstruct", "--data"])
        .arg(data.path())
        .arg("--config")
        .arg(write_config(data.path(), &cfg))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let file = load_tensor_file(&out).unwrap();
    assert_eq!(file.provenance.converged, Some(false));
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.canonical()).unwrap();
    path
}

#[test]
fn empty_dataset_dir_is_an_error_exit() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), &small("annihilation"));
    let data = dir.path().join("empty");
    fs::create_dir(&data).unwrap();
    let status = bin()
        .args(["reconstruct", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("t.json"))
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempdir().unwrap();
    let cfg = small("annihilation");
    simulate(&cfg, dir.path()).unwrap();
    let path = dir.path().join(probe_file_name(2));
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("0.8,0,not-a-number,1\n");
    let line = text.lines().count();
    fs::write(&path, text).unwrap();
    let err = reconstruct(dir.path(), &cfg, ReconstructOptions::new()).err().expect("malformed data accepted");
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains(&format!("line {line}")), "{err}");
}

#[test]
fn diag_of_ideal_creation_tensor() {
    let dir = tempdir().unwrap();
    let tensor = write_ideal(dir.path(), BlackBoxKind::Creation);
    let files = analyze(&tensor, AnalyzeMode::Diag, dir.path(), &AnalyzeOptions::default()).unwrap();
    assert!(files[0].file_name().unwrap().to_str().unwrap().starts_with("unhashed_"));
    for row in csv_rows(&files[0]) {
        let (m, k): (usize, usize) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let v: f64 = row[2].parse().unwrap();
        let want = if k == m + 1 { (m + 1) as f64 } else { 0.0 };
        assert!((v - want).abs() < 1e-8, "E[{m}{m}][{k}{k}] = {v}");
    }
}

#[test]
fn fidelity_mode_has_one_row_per_subspace() {
    let dir = tempdir().unwrap();
    let tensor = write_ideal(dir.path(), BlackBoxKind::Annihilation);
    let cfg = RunConfig { n_max: 3, ..RunConfig::default() };
    let opts = AnalyzeOptions { config: Some(cfg), allow_provenance_mismatch: true, ..Default::default() };
    let files = analyze(&tensor, AnalyzeMode::Fidelity, dir.path(), &opts).unwrap();
    let rows = csv_rows(&files[0]);
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        assert!((row[1].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn wigner_of_added_vacuum_is_negative() {
    let dir = tempdir().unwrap();
    let tensor = write_ideal(dir.path(), BlackBoxKind::Creation);
    let files = analyze(&tensor, AnalyzeMode::Wigner, dir.path(), &AnalyzeOptions::default()).unwrap();
    let summary = files.last().unwrap();
    let rows = csv_rows(summary);
    assert_eq!(rows.len(), DEFAULT_WIGNER_ALPHAS.len());
    let min0: f64 = rows[0][2].parse().unwrap();
    assert!(min0 < -0.3, "{min0}");
    assert_eq!(csv_rows(&files[0]).len(), 81 * 81);
}

#[test]
fn calibration_recovers_vacuum_and_needs_unheralded_records() {
    let dir = tempdir().unwrap();
    let cfg = RunConfig { t1: 0.75, ..small("annihilation") };
    simulate(&cfg, dir.path()).unwrap();
    let cal = calibrate(dir.path()).unwrap();
    let vac = &cal.rows[0];
    assert_eq!(vac.nominal, 0.0);
    assert!(vac.recovered < 4.0 * vac.stderr, "vacuum amplitude {} ± {}", vac.recovered, vac.stderr);
    for r in &cal.rows[1..] {
        assert!((r.recovered - r.nominal).abs() < 4.0 * r.stderr + 1e-3, "{r:?}");
    }

    let path = dir.path().join(probe_file_name(1));
    let mut d = QuadratureDataset::load(&path).unwrap();
    d.samples.retain(|s| s.heralded);
    d.meta.unheralded_per_phase = 0;
    d.save(&path).unwrap();
    assert!(calibrate(dir.path()).is_err());
}

#[test]
fn exit_codes_for_usage_config_and_provenance() {
    let dir = tempdir().unwrap();
    let tensor = write_ideal(dir.path(), BlackBoxKind::Creation);
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    let t = tensor.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&["analyze", "--tensor", t, "--mode", "spectrum", "--out", out]), Some(2));
    assert_eq!(code(&["simulate"]), Some(2));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "t1 = 1.4\n").unwrap();
    assert_eq!(code(&["simulate", "--config", bad.to_str().unwrap(), "--out", out]), Some(1));

    // recorded hash is absent, so any config mismatches
    let good = write_config(dir.path(), &small("creation"));
    let g = good.to_str().unwrap();
    assert_eq!(code(&["analyze", "--tensor", t, "--mode", "diag", "--out", out, "--config", g]), Some(3));
    assert_eq!(
        code(&["analyze", "--tensor", t, "--mode", "diag", "--out", out, "--config", g, "--allow-provenance-mismatch"]),
        Some(0)
    );
}

#[test]
fn rates_mode_refuses_foreign_rates_file() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let cfg = small("creation");
    simulate(&cfg, a.path()).unwrap();
    simulate(&RunConfig { seed: 2, ..cfg.clone() }, b.path()).unwrap();
    let r = reconstruct(a.path(), &cfg, ReconstructOptions::new()).unwrap();
    let tensor = a.path().join("t.json");
    write_reconstruction(&r, &tensor).unwrap();

    let own = AnalyzeOptions { data: Some(a.path().to_path_buf()), ..Default::default() };
    let files = analyze(&tensor, AnalyzeMode::Rates, a.path(), &own).unwrap();
    assert!(files[0].file_name().unwrap().to_str().unwrap().starts_with(&cfg.hash()[..12]));
    assert_eq!(csv_rows(&files[0]).len(), 4);

    let foreign = AnalyzeOptions { data: Some(b.path().to_path_buf()), ..Default::default() };
    let err = analyze(&tensor, AnalyzeMode::Rates, a.path(), &foreign).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}
