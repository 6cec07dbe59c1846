use std::path::Path;

use clap::Args;
use pairlab::correlation::{coincidence_rate, comb_contrast, fit_bandwidth, histogram, profile_contrast, BandwidthFit, Side};
use pairlab::entanglement::{
    brightness_variants, chsh_counts, default_fringe_angles, default_fringe_idler, fidelity_bootstrap,
    fit_fringe, fringe_points_from_counts, measure_count_table, tomography_mle, tomography_settings, ChshAngles,
};
use pairlab::io::{
    count_table_rows, hash_files, matrix_rows, read_count_table, sha256_hex, write_csv, Metadata, RunConfig, TagFile,
    COUNT_TABLE_HEADER, MATRIX_HEADER,
};
use pairlab::polarization::{bell_psi_vector, fidelity, AnalyzerSetting, Port};
use pairlab::spectral::{apply_etalon, build_mode_comb, etalon_transmission, CorrelationDensity, ModeComb};
use pairlab::synth::{expected_counts, synthesize_chunked, IDLER_CHANNEL, SIGNAL_CHANNEL};
use pairlab::{CavityArmSpec, Error, EtalonSpec, PhaseMatchEnvelope, Result};

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>, chunks: usize) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let run = cfg.resolve()?;
    let tags = synthesize_chunked(&run.source, &run.signal_detector, &run.idler_detector, chunks.max(1))?;
    TagFile::new(tags.clone()).write(out)?;

    let expected = expected_counts(&run.source, &run.signal_detector, &run.idler_detector);
    let singles = |ch| tags.iter().filter(|t| t.channel == ch).count();
    let window = cfg.analysis.window_ps;
    println!("records={}", tags.len());
    println!("idler_singles={} expected={:.1}", singles(IDLER_CHANNEL), expected.idler_singles);
    println!("signal_singles={} expected={:.1}", singles(SIGNAL_CHANNEL), expected.signal_singles);
    if cfg.duration_s > 0.0 {
        let rate = coincidence_rate(&tags, window, cfg.duration_s)?;
        println!("coincidences_window_{}ps={} true_pairs_expected={:.1}", window, rate.count, expected.pairs_detected);
    }
    println!("etalon_transmission_signal={:.6} etalon_transmission_idler={:.6}", run.etalon_transmission.0, run.etalon_transmission.1);
    println!("config_hash={}", cfg.hash());
    Ok(())
}

#[derive(Clone, Copy)]
pub enum CountSet {
    Chsh,
    Tomography,
    Fringe,
}

pub fn simulate_counts(config: &Path, set: CountSet, out: &Path, seed: Option<u64>, window_ps: Option<i64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let run = cfg.resolve()?;
    let settings = match set {
        CountSet::Chsh => ChshAngles::default().settings(),
        CountSet::Tomography => tomography_settings(),
        CountSet::Fringe => default_fringe_angles()
            .into_iter()
            .map(|a| (default_fringe_idler(), AnalyzerSetting::new(a, 0.0, Port::Transmit)))
            .collect(),
    };
    let window = window_ps.unwrap_or(cfg.analysis.window_ps);
    let table = measure_count_table(&run.source, &run.signal_detector, &run.idler_detector, &settings, window)?;
    let meta = Metadata::new(&cfg.hash(), Some(cfg.seed)).with("window_ps", window);
    write_csv(out, &meta, &COUNT_TABLE_HEADER, &count_table_rows(&table))?;
    println!("settings={} total_counts={}", table.entries.len(), table.total());
    Ok(())
}

fn fit_summary(meta: Metadata, label: &str, fit: &std::result::Result<BandwidthFit, Error>) -> Metadata {
    match fit {
        Ok(f) => meta
            .with(&format!("{label}_delta_nu_hz"), format!("{:.6e}", f.delta_nu))
            .with(&format!("{label}_amplitude"), format!("{:.6e}", f.amplitude))
            .with(&format!("{label}_background"), format!("{:.6e}", f.background))
            .with(&format!("{label}_fit_range_s"), format!("{:.3e}..{:.3e}", f.fit_range.0, f.fit_range.1))
            .with(&format!("{label}_reduced_chi2"), format!("{:.4}", f.reduced_chi2)),
        Err(e) => meta.with(&format!("{label}_fit"), format!("unavailable ({e})")),
    }
}

pub fn analyze_g2(input: &Path, out: &Path, bin_ps: i64, range_ps: i64, duration_s: Option<f64>, period_ps: Option<i64>) -> Result<()> {
    let file = TagFile::read(input)?;
    let duration = duration_s.unwrap_or_else(|| file.tags.last().map_or(0.0, |t| t.timestamp as f64 * 1e-12));
    let h = histogram(&file.tags, bin_ps, range_ps, duration)?;
    let pos = fit_bandwidth(&h, Side::Positive);
    let neg = fit_bandwidth(&h, Side::Negative);

    let mut meta = Metadata::new(&hash_files(&[input])?, None)
        .with("bin_size_ps", bin_ps)
        .with("range_ps", range_ps)
        .with("integration_time_s", duration)
        .with("idler_singles", h.singles[0])
        .with("signal_singles", h.singles[1])
        .with("total_coincidences", h.total());
    meta = fit_summary(meta, "positive", &pos);
    meta = fit_summary(meta, "negative", &neg);
    if let Some(p) = period_ps {
        meta = match comb_contrast(&h, p) {
            Ok(c) => meta.with("comb_contrast", format!("{c:.6}")),
            Err(e) => meta.with("comb_contrast", format!("unavailable ({e})")),
        };
    }
    let rows: Vec<Vec<String>> = (0..h.n_bins())
        .map(|k| vec![h.bin_start_ps(k).to_string(), format!("{:.3}", h.bin_center(k) * 1e9), h.counts[k].to_string()])
        .collect();
    write_csv(out, &meta, &["bin_start_ps", "bin_center_ns", "counts"], &rows)?;

    for (label, fit) in [("positive", &pos), ("negative", &neg)] {
        match fit {
            Ok(f) => println!("{label}_delta_nu_mhz={:.4}", f.delta_nu * 1e-6),
            Err(Error::Degenerate(_)) => println!("{label}_delta_nu_mhz=nan"),
            Err(_) => {}
        }
    }
    // Degenerate sides (too few counts) still yield a histogram; a fit that
    // ran and failed is reported as such.
    for fit in [pos, neg] {
        if let Err(e @ Error::FitFailure { .. }) = fit {
            return Err(e);
        }
    }
    Ok(())
}

pub fn analyze_chsh(input: &Path, out: &Path) -> Result<()> {
    let table = read_count_table(input)?;
    let angles = ChshAngles::default();
    let r = chsh_counts(&table, &angles)?;
    let meta = Metadata::new(&hash_files(&[input])?, None)
        .with("S", format!("{:.6}", r.s))
        .with("sigma_S", format!("{:.6}", r.sigma))
        .with("significance_sigma", format!("{:.3}", r.significance()));
    let rows: Vec<Vec<String>> = angles
        .terms()
        .iter()
        .zip(r.correlations.iter().zip(r.correlation_errors))
        .map(|(&(a, b, sign), (e, err))| vec![a.to_string(), b.to_string(), sign.to_string(), format!("{e:.6}"), format!("{err:.6}")])
        .collect();
    write_csv(out, &meta, &["idler_angle_deg", "signal_angle_deg", "sign", "E", "E_error"], &rows)?;
    println!("S={:.6} sigma={:.6} significance={:.3}", r.s, r.sigma, r.significance());
    Ok(())
}

pub fn analyze_tomo(input: &Path, out: &Path, bootstrap: usize, seed: u64) -> Result<()> {
    let table = read_count_table(input)?;
    let res = tomography_mle(&table)?;
    let target = bell_psi_vector();
    let f = fidelity(&res.rho, &target)?;
    let mut meta = Metadata::new(&hash_files(&[input])?, Some(seed))
        .with("fidelity_psi_plus", format!("{f:.6}"))
        .with("purity", format!("{:.6}", res.rho.purity()))
        .with("log_likelihood", format!("{:.6}", res.log_likelihood))
        .with("iterations", res.iterations)
        .with("converged", res.converged);
    if bootstrap > 1 {
        let (_, sd) = fidelity_bootstrap(&table, &target, bootstrap, seed)?;
        meta = meta.with("fidelity_bootstrap_std", format!("{sd:.6}")).with("bootstrap_resamples", bootstrap);
    }
    write_csv(out, &meta, &MATRIX_HEADER, &matrix_rows(res.rho.matrix()))?;
    println!("fidelity={f:.6} purity={:.6}", res.rho.purity());
    Ok(())
}

pub fn analyze_fringe(input: &Path, out: &Path) -> Result<()> {
    let table = read_count_table(input)?;
    let scan = fit_fringe(fringe_points_from_counts(&table))?;
    let meta = Metadata::new(&hash_files(&[input])?, None)
        .with("visibility", format!("{:.6}", scan.visibility))
        .with("visibility_error", format!("{:.6}", scan.visibility_error))
        .with("phase_deg", format!("{:.3}", scan.phase_deg));
    let rows: Vec<Vec<String>> = scan
        .points
        .iter()
        .map(|p| vec![p.angle_deg.to_string(), format!("{:.6}", p.value), format!("{:.6}", p.error)])
        .collect();
    write_csv(out, &meta, &["signal_hwp_deg", "rate_hz", "rate_error_hz"], &rows)?;
    println!("visibility={:.6} error={:.6}", scan.visibility, scan.visibility_error);
    Ok(())
}

#[derive(Args)]
pub struct BrightnessArgs {
    /// Detected pair rate in Hz. Measured from `--input` when absent.
    #[arg(long)]
    rate_hz: Option<f64>,
    /// Tag file to measure the coincidence rate from.
    #[arg(long)]
    input: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 80_000)]
    window_ps: i64,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    bandwidth_mhz: f64,
    /// Average of signal and idler bandwidths; defaults to `--bandwidth-mhz`.
    #[arg(long)]
    average_bandwidth_mhz: Option<f64>,
    #[arg(long)]
    pump_mw: f64,
    #[arg(long)]
    out: std::path::PathBuf,
}

pub fn analyze_brightness(a: &BrightnessArgs) -> Result<()> {
    let (rate, hash) = match (a.rate_hz, &a.input) {
        (Some(r), _) => (r, sha256_hex(format!("rate_hz={r}").as_bytes())),
        (None, Some(path)) => {
            let file = TagFile::read(path)?;
            let duration = a.duration_s.unwrap_or_else(|| file.tags.last().map_or(0.0, |t| t.timestamp as f64 * 1e-12));
            (coincidence_rate(&file.tags, a.window_ps, duration)?.rate, hash_files(&[path.as_path()])?)
        }
        (None, None) => return Err(Error::ParameterDomain("either --rate-hz or --input is required".into())),
    };
    let variants = brightness_variants(rate, a.bandwidth_mhz, a.average_bandwidth_mhz.unwrap_or(a.bandwidth_mhz), a.pump_mw)?;
    let meta = Metadata::new(&hash, None).with("rate_hz", rate).with("pump_mw", a.pump_mw);
    let rows: Vec<Vec<String>> = variants
        .iter()
        .map(|v| vec![v.label.to_string(), v.bandwidth_mhz.to_string(), format!("{:.6}", v.value), v.note.to_string()])
        .collect();
    write_csv(&a.out, &meta, &["variant", "bandwidth_mhz", "brightness_per_s_mhz_mw", "note"], &rows)?;
    for v in &variants {
        println!("{}={:.4}", v.label, v.value);
    }
    Ok(())
}

#[derive(Args)]
pub struct EtalonArgs {
    #[arg(long)]
    fsr_hz: f64,
    #[arg(long)]
    fwhm_hz: f64,
    #[arg(long, default_value_t = 1.0)]
    peak_transmission: f64,
    #[arg(long, default_value_t = 0.0)]
    detuning_hz: f64,
    /// Cavity free spectral range of the comb being filtered.
    #[arg(long)]
    comb_fsr_hz: f64,
    #[arg(long, default_value_t = 5)]
    n_modes: usize,
    #[arg(long, default_value_t = 9e6)]
    linewidth_hz: f64,
    #[arg(long, default_value_t = 1e11)]
    phase_matching_fwhm_hz: f64,
    #[arg(long)]
    out: std::path::PathBuf,
}

/// Comb contrast of the analytic `G²` sampled on histogram-like bins.
fn predicted_contrast(comb: &ModeComb, period_ps: i64) -> Result<f64> {
    // The bin must tile the period exactly or the folded phases drift.
    let per_period = (16..=period_ps.max(16)).find(|k| period_ps % k == 0).unwrap_or(period_ps);
    let bin = (period_ps / per_period).max(1);
    let period = period_ps;
    let decay = 1.0 / (2.0 * std::f64::consts::PI * comb.min_linewidth());
    let periods = ((4.0 * decay * 1e12 / period as f64).ceil() as i64).max(3);
    let range = periods * period;
    let density = CorrelationDensity::new(comb, comb);
    let n = (2 * range / bin) as usize;
    let counts: Vec<f64> = (0..n)
        .map(|k| {
            let start = (-range + k as i64 * bin) as f64 * 1e-12;
            (0..4).map(|j| density.density(start + (j as f64 + 0.5) * bin as f64 * 0.25e-12)).sum::<f64>() * 1e9
        })
        .collect();
    profile_contrast(bin, range, &counts, period)
}

pub fn design_etalon(a: &EtalonArgs) -> Result<()> {
    let etalon = EtalonSpec { fsr: a.fsr_hz, fwhm: a.fwhm_hz, peak_transmission: a.peak_transmission, detuning: a.detuning_hz };
    etalon.validate()?;
    let arm = CavityArmSpec { center_frequency: 0.0, fsr: a.comb_fsr_hz, mode_linewidth: a.linewidth_hz, n_modes: a.n_modes };
    let env = PhaseMatchEnvelope { fwhm: a.phase_matching_fwhm_hz, center: 0.0 };
    let comb = build_mode_comb(&arm, &env)?;
    let (filtered, transmitted) = apply_etalon(&comb, &etalon)?;

    let period_ps = (1e12 / a.comb_fsr_hz).round() as i64;
    let show = |r: Result<f64>| r.map_or_else(|e| format!("unavailable ({e})"), |c| format!("{c:.6}"));
    let (before, after) = if comb.len() > 1 {
        (show(predicted_contrast(&comb, period_ps)), show(predicted_contrast(&filtered, period_ps)))
    } else {
        ("0".to_string(), "0".to_string())
    };
    let meta = Metadata::new(&sha256_hex(format!("{:?}{:?}{:?}", etalon, arm, env).as_bytes()), None)
        .with("finesse", format!("{:.3}", etalon.finesse()))
        .with("transmitted_fraction", format!("{transmitted:.6e}"))
        .with("predicted_contrast_before", &before)
        .with("predicted_contrast_after", &after);
    let half = (a.n_modes / 2) as i64;
    let before_w = comb.weights();
    let after_w = filtered.weights();
    let rows: Vec<Vec<String>> = (0..comb.len())
        .map(|k| {
            let offset = comb.modes()[k].frequency - comb.center();
            vec![
                (k as i64 - half).to_string(),
                format!("{offset:.6e}"),
                format!("{:.6e}", etalon_transmission(&etalon, offset)),
                format!("{:.6e}", before_w[k]),
                format!("{:.6e}", after_w[k]),
            ]
        })
        .collect();
    write_csv(&a.out, &meta, &["mode", "offset_hz", "transmission", "weight_before", "weight_after"], &rows)?;
    println!("transmitted_fraction={transmitted:.6e} contrast_before={before} contrast_after={after}");
    Ok(())
}
