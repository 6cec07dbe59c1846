use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pairlab::entanglement::{chsh_analytic, expected_count_table, tomography_settings, ChshAngles};
use pairlab::io::{count_table_rows, read_metadata, render_csv, Metadata, TagFile, COUNT_TABLE_HEADER};
use pairlab::polarization::{apply_noise, bell_psi, NoiseParams};
use pairlab::synth::TimeTag;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairlab")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn meta(path: &Path, key: &str) -> String {
    read_metadata(&std::fs::read_to_string(path).unwrap()).get(key).unwrap_or_else(|| panic!("{key} missing")).to_string()
}

const CONFIG: &str = r#"
seed = 5
pair_rate_hz = 2000.0
duration_s = 2.0

[signal]
center_frequency_hz = 3.2e14
fsr_hz = 2.0e9
mode_linewidth_hz = 9.0e6
phase_matching_fwhm_hz = 1.0e11

[idler]
center_frequency_hz = 3.4e14
fsr_hz = 2.0e9
mode_linewidth_hz = 9.5e6
phase_matching_fwhm_hz = 1.0e11

[noise]
white_noise_p = 0.1387
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn zero_duration_gives_empty_tag_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("duration_s = 2.0", "duration_s = 0.0"));
    let out = dir.path().join("t.ptag");
    assert!(run(&["simulate", "--config", p(&cfg), "--out", p(&out)]).status.success());
    assert!(TagFile::read(&out).unwrap().tags.is_empty());
}

#[test]
fn fixed_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a.ptag");
    let b = dir.path().join("b.ptag");
    assert!(run(&["simulate", "--config", p(&cfg), "--out", p(&a)]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_pairlab"))
        .env("PAIRLAB_THREADS", "1")
        .args(["simulate", "--config", p(&cfg), "--out", p(&b)])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.ptag");
    assert!(run(&["simulate", "--config", p(&cfg), "--out", p(&c), "--seed", "6"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn g2_on_empty_file_writes_zero_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let tags = dir.path().join("empty.ptag");
    TagFile::new(vec![]).write(&tags).unwrap();
    let out = dir.path().join("g2.csv");
    let r = run(&["analyze", "g2", "--input", p(&tags), "--out", p(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# tool: pairlab"));
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r.ends_with(",0")));
}

#[test]
fn tomo_on_exact_bell_counts_reports_unit_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let table = expected_count_table(&bell_psi(), &tomography_settings(), 1e6);
    let input = dir.path().join("counts.csv");
    std::fs::write(&input, render_csv(&Metadata::new("-", None), &COUNT_TABLE_HEADER, &count_table_rows(&table)).unwrap()).unwrap();
    let out = dir.path().join("rho.csv");
    let r = run(&["analyze", "tomo", "--input", p(&input), "--out", p(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(meta(&out, "fidelity_psi_plus"), "1.000000");
    let rho = pairlab::io::parse_matrix(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!((rho - bell_psi().matrix()).norm() < 1e-6);
}

#[test]
fn simulated_chsh_matches_analytic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let counts = dir.path().join("chsh_counts.csv");
    let r = run(&["simulate-counts", "--config", p(&cfg), "--settings", "chsh", "--out", p(&counts)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(meta(&counts, "seed"), "5");
    let out = dir.path().join("chsh.csv");
    assert!(run(&["analyze", "chsh", "--input", p(&counts), "--out", p(&out)]).status.success());
    let s: f64 = meta(&out, "S").parse().unwrap();
    let sigma: f64 = meta(&out, "sigma_S").parse().unwrap();
    let rho = apply_noise(&bell_psi(), &NoiseParams::white(0.1387)).unwrap();
    let expected = chsh_analytic(&rho, &ChshAngles::default());
    assert!((s - expected).abs() <= 3.0 * sigma, "S = {s} ± {sigma}, expected {expected}");
}

#[test]
fn simulated_fringe_and_tomo_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    for (set, analysis) in [("fringe", "fringe"), ("tomo", "tomo")] {
        let counts = dir.path().join(format!("{set}.csv"));
        assert!(run(&["simulate-counts", "--config", p(&cfg), "--settings", set, "--out", p(&counts)]).status.success());
        let out = dir.path().join(format!("{set}_report.csv"));
        let r = run(&["analyze", analysis, "--input", p(&counts), "--out", p(&out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let v: f64 = meta(&dir.path().join("fringe_report.csv"), "visibility").parse().unwrap();
    // Werner visibility is 1 − p.
    assert!((v - (1.0 - 0.1387)).abs() < 0.05, "{v}");
}

#[test]
fn design_etalon_single_mode_on_peak() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("etalon.csv");
    let r = run(&["design-etalon", "--fsr-hz", "8.4e9", "--fwhm-hz", "1.2e8", "--comb-fsr-hz", "2e9", "--n-modes", "1", "--out", p(&out)]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let row = text.lines().find(|l| l.starts_with("0,")).unwrap();
    assert_eq!(row.split(',').nth(2), Some("1.000000e0"));
}

#[test]
fn design_etalon_reports_suppression_and_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("etalon.csv");
    let r = run(&["design-etalon", "--fsr-hz", "8.4e9", "--fwhm-hz", "1.2e8", "--comb-fsr-hz", "2e9", "--n-modes", "5", "--out", p(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let row = text.lines().find(|l| l.starts_with("1,")).unwrap();
    let t: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    // Independent Airy evaluation with the coefficient fixed by the half-maximum condition.
    let k = 1.0 / (std::f64::consts::PI * 1.2e8 / (2.0 * 8.4e9)).sin().powi(2);
    let want = 1.0 / (1.0 + k * (std::f64::consts::PI * 2e9 / 8.4e9).sin().powi(2));
    assert!((t - want).abs() < 1e-6 * want.max(1e-3), "{t} vs {want}");
    let before: f64 = meta(&out, "predicted_contrast_before").parse().unwrap();
    let after: f64 = meta(&out, "predicted_contrast_after").parse().unwrap();
    assert!(before > 0.8 && after < 0.2, "{before} {after}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let r = run(&["design-etalon", "--fsr-hz", "1e8", "--fwhm-hz", "2e8", "--comb-fsr-hz", "2e9", "--out", p(&dir.path().join("e.csv"))]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.starts_with("pairlab-error kind=parameter_domain exit=2"), "{err}");

    let cfg = write_config(dir.path(), &CONFIG.replace("seed = 5", "seed = 5\nbogus_key = 1"));
    let r = run(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("x.ptag"))]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("kind=config"));

    let corrupt = dir.path().join("bad.ptag");
    std::fs::write(&corrupt, b"NOPE").unwrap();
    let r = run(&["analyze", "g2", "--input", p(&corrupt), "--out", p(&dir.path().join("g.csv"))]);
    assert_eq!(r.status.code(), Some(3));

    let tags = dir.path().join("t.ptag");
    TagFile::new(vec![TimeTag::new(0, 0)]).write(&tags).unwrap();
    let r = run(&["analyze", "g2", "--input", p(&tags), "--out", p(&dir.path().join("g.csv")), "--bin-ps", "3000"]);
    assert_eq!(r.status.code(), Some(3), "bin must divide the range");

    // Alternating spikes are not a 90° sinusoid.
    let fringe = dir.path().join("fringe.csv");
    let mut text = String::from("idler,signal,counts,integration_time_s\n");
    for k in 0..19 {
        let n = if k % 9 == 0 { 1000 } else { 1 };
        text.push_str(&format!("-22.5:0:t,{}:0:t,{n},1\n", k as f64 * 5.0));
    }
    std::fs::write(&fringe, text).unwrap();
    let r = run(&["analyze", "fringe", "--input", p(&fringe), "--out", p(&dir.path().join("f.csv"))]);
    assert_eq!(r.status.code(), Some(4));
}

#[test]
fn brightness_from_tag_file() {
    let dir = tempfile::tempdir().unwrap();
    let tags = dir.path().join("t.ptag");
    let v: Vec<TimeTag> = (0..50).flat_map(|k| [TimeTag::new(0, k * 1_000_000_000), TimeTag::new(1, k * 1_000_000_000 + 500)]).collect();
    TagFile::new(v).write(&tags).unwrap();
    let out = dir.path().join("b.csv");
    let r = run(&["analyze", "brightness", "--input", p(&tags), "--duration-s", "10", "--bandwidth-mhz", "9", "--pump-mw", "9", "--out", p(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(meta(&out, "rate_hz"), "5");
    assert!(std::fs::read_to_string(&out).unwrap().contains("0.061728"));
}
