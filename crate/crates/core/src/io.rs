//! Run configuration, the binary time-tag format and CSV reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entanglement::{CountEntry, CountTable};
use crate::error::{Error, Result};
use crate::polarization::{apply_noise, bell_psi, AnalyzerSetting, NoiseParams, Operator4};
use crate::spectral::{apply_etalon, build_mode_comb, CavityArmSpec, EtalonSpec, ModeComb, PhaseMatchEnvelope};
use crate::synth::{DetectorSpec, SourceRunConfig, TimeTag};

pub const TOOL_VERSION: &str = concat!("pairlab ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// Configuration

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtalonConfig {
    pub fsr_hz: f64,
    pub fwhm_hz: f64,
    #[serde(default = "one")]
    pub peak_transmission: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub detuning_hz: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub center_frequency_hz: f64,
    pub fsr_hz: f64,
    pub mode_linewidth_hz: f64,
    #[serde(default = "one_mode")]
    pub n_modes: usize,
    /// Phase-matching FWHM; the envelope is centered on the arm center.
    pub phase_matching_fwhm_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etalon: Option<EtalonConfig>,
}

fn one_mode() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub phase_sigma_rad: f64,
    #[serde(default)]
    pub rot_signal_rad: f64,
    #[serde(default)]
    pub rot_idler_rad: f64,
    #[serde(default)]
    pub white_noise_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "one")]
    pub efficiency: f64,
    #[serde(default)]
    pub dark_rate_hz: f64,
    #[serde(default)]
    pub jitter_sigma_ps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { efficiency: 1.0, dark_rate_hz: 0.0, jitter_sigma_ps: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorsConfig {
    #[serde(default)]
    pub signal: DetectorConfig,
    #[serde(default)]
    pub idler: DetectorConfig,
}

/// Analyzer labels as accepted by [`AnalyzerSetting::parse_label`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzersConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bin")]
    pub bin_size_ps: i64,
    #[serde(default = "default_range")]
    pub range_ps: i64,
    #[serde(default = "default_window")]
    pub window_ps: i64,
}

fn default_bin() -> i64 {
    4000
}
fn default_range() -> i64 {
    400_000
}
fn default_window() -> i64 {
    80_000
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { bin_size_ps: default_bin(), range_ps: default_range(), window_ps: default_window() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pair_rate_hz: f64,
    pub duration_s: f64,
    pub signal: ArmConfig,
    pub idler: ArmConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub detectors: DetectorsConfig,
    #[serde(default)]
    pub analyzers: AnalyzersConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

/// Everything a simulation run needs, resolved from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub source: SourceRunConfig,
    pub signal_detector: DetectorSpec,
    pub idler_detector: DetectorSpec,
    /// Fraction of the pair flux each etalon passes, `(signal, idler)`.
    pub etalon_transmission: (f64, f64),
}

fn cfg_err(path: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { path: path.to_string(), message: e.to_string() }
}

fn require(path: &str, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(cfg_err(path, what))
    }
}

impl ArmConfig {
    fn resolve(&self, name: &str) -> Result<(ModeComb, f64)> {
        let arm = CavityArmSpec {
            center_frequency: self.center_frequency_hz,
            fsr: self.fsr_hz,
            mode_linewidth: self.mode_linewidth_hz,
            n_modes: self.n_modes,
        };
        let env = PhaseMatchEnvelope { fwhm: self.phase_matching_fwhm_hz, center: self.center_frequency_hz };
        let comb = build_mode_comb(&arm, &env).map_err(|e| cfg_err(name, e))?;
        match &self.etalon {
            None => Ok((comb, 1.0)),
            Some(e) => {
                let spec = EtalonSpec { fsr: e.fsr_hz, fwhm: e.fwhm_hz, peak_transmission: e.peak_transmission, detuning: e.detuning_hz };
                apply_etalon(&comb, &spec).map_err(|err| cfg_err(&format!("{name}.etalon"), err))
            }
        }
    }
}

impl DetectorConfig {
    fn resolve(&self, path: &str) -> Result<DetectorSpec> {
        let d = DetectorSpec { efficiency: self.efficiency, dark_rate: self.dark_rate_hz, jitter_sigma: self.jitter_sigma_ps * 1e-12 };
        d.validate().map_err(|e| cfg_err(path, e))?;
        Ok(d)
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_else(|| "<document>".into());
            cfg_err(&path, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(&path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        require("pair_rate_hz", self.pair_rate_hz >= 0.0 && self.pair_rate_hz.is_finite(), "must be finite and ≥ 0")?;
        require("duration_s", self.duration_s >= 0.0 && self.duration_s.is_finite(), "must be finite and ≥ 0")?;
        let a = &self.analysis;
        require("analysis.bin_size_ps", a.bin_size_ps > 0, "must be positive")?;
        require("analysis.range_ps", a.range_ps > 0 && a.range_ps % a.bin_size_ps == 0, "must be a positive multiple of bin_size_ps")?;
        require("analysis.window_ps", a.window_ps >= 0, "must be ≥ 0")?;
        require("noise.white_noise_p", (0.0..=1.0).contains(&self.noise.white_noise_p), "must lie in [0, 1]")?;
        require("noise.phase_sigma_rad", self.noise.phase_sigma_rad >= 0.0 && self.noise.phase_sigma_rad.is_finite(), "must be finite and ≥ 0")?;
        for (name, label) in [("analyzers.idler", &self.analyzers.idler), ("analyzers.signal", &self.analyzers.signal)] {
            if let Some(l) = label {
                AnalyzerSetting::parse_label(l).map_err(|e| cfg_err(name, e))?;
            }
        }
        self.resolve().map(|_| ())
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            phase_sigma: self.noise.phase_sigma_rad,
            rot_signal: self.noise.rot_signal_rad,
            rot_idler: self.noise.rot_idler_rad,
            white_noise_p: self.noise.white_noise_p,
        }
    }

    pub fn resolve(&self) -> Result<ResolvedRun> {
        let (signal_comb, ts) = self.signal.resolve("signal")?;
        let (idler_comb, ti) = self.idler.resolve("idler")?;
        let state = apply_noise(&bell_psi(), &self.noise_params()).map_err(|e| cfg_err("noise", e))?;
        let parse = |l: &Option<String>| l.as_deref().map(AnalyzerSetting::parse_label).transpose();
        let source = SourceRunConfig {
            pair_rate: self.pair_rate_hz,
            state,
            signal_comb,
            idler_comb,
            analyzer_idler: parse(&self.analyzers.idler).map_err(|e| cfg_err("analyzers.idler", e))?,
            analyzer_signal: parse(&self.analyzers.signal).map_err(|e| cfg_err("analyzers.signal", e))?,
            duration: self.duration_s,
            rng_seed: self.seed,
        };
        source.validate().map_err(|e| cfg_err("<run>", e))?;
        Ok(ResolvedRun {
            source,
            signal_detector: self.detectors.signal.resolve("detectors.signal")?,
            idler_detector: self.detectors.idler.resolve("detectors.idler")?,
            etalon_transmission: (ts, ti),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the contents of several files, in order.
pub fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(std::fs::read(p)?);
    }
    Ok(hex::encode(h.finalize()))
}

// ---------------------------------------------------------------------------
// Binary time tags

pub const TAG_MAGIC: &[u8; 4] = b"PTAG";
pub const TAG_VERSION: u16 = 1;
pub const TAG_HEADER_LEN: usize = 11;
pub const TAG_RECORD_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagFile {
    pub resolution_ps: u32,
    pub channel_count: u8,
    pub tags: Vec<TimeTag>,
}

impl TagFile {
    pub fn new(tags: Vec<TimeTag>) -> Self {
        Self { resolution_ps: 1, channel_count: 2, tags }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution_ps == 0 {
            return Err(Error::Format("resolution_ps must be positive".into()));
        }
        if let Some(t) = self.tags.iter().find(|t| t.channel >= self.channel_count) {
            return Err(Error::Format(format!("channel {} outside declared count {}", t.channel, self.channel_count)));
        }
        if let Some(k) = self.tags.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::Format(format!("records not sorted by timestamp at index {}", k + 1)));
        }
        Ok(())
    }

    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        w.write_all(TAG_MAGIC)?;
        w.write_all(&TAG_VERSION.to_le_bytes())?;
        w.write_all(&self.resolution_ps.to_le_bytes())?;
        w.write_all(&[self.channel_count])?;
        let mut rec = [0u8; TAG_RECORD_LEN];
        for t in &self.tags {
            rec[0] = t.channel;
            rec[8..].copy_from_slice(&t.timestamp.to_le_bytes());
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; TAG_HEADER_LEN];
        r.read_exact(&mut header).map_err(|_| Error::Format("truncated header".into()))?;
        if &header[..4] != TAG_MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != TAG_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let resolution_ps = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes"));
        let channel_count = header[10];
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() % TAG_RECORD_LEN != 0 {
            return Err(Error::Format(format!("trailing {} bytes after last record", body.len() % TAG_RECORD_LEN)));
        }
        let tags = body
            .chunks_exact(TAG_RECORD_LEN)
            .map(|rec| TimeTag::new(rec[0], i64::from_le_bytes(rec[8..].try_into().expect("8 bytes"))))
            .collect();
        let f = Self { resolution_ps, channel_count, tags };
        f.validate()?;
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(BufReader::new(File::open(path)?))
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.encode(w))
    }
}

/// Runs `fill` against a temporary file in the destination directory, then
/// renames it over `path`.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV reports

/// `#`-prefixed `key: value` lines written ahead of every CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub entries: Vec<(String, String)>,
}

impl Metadata {
    /// Starts with the tool version, config hash and seed.
    pub fn new(config_hash: &str, seed: Option<u64>) -> Self {
        let seed = seed.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        Self {
            entries: vec![
                ("tool".into(), TOOL_VERSION.into()),
                ("config_hash".into(), config_hash.into()),
                ("seed".into(), seed),
            ],
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "# {k}: {}", v.replace('\n', " "));
        }
        s
    }
}

/// Reads the leading `#` metadata block of a CSV report.
pub fn read_metadata(text: &str) -> Metadata {
    let entries = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    Metadata { entries }
}

/// Renders a metadata block followed by a CSV table.
pub fn render_csv<S: AsRef<str>>(meta: &Metadata, header: &[&str], rows: &[Vec<S>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|c| c.as_ref()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("CSV of UTF-8 fields");
    Ok(meta.render() + &body)
}

pub fn write_csv<S: AsRef<str>>(path: &Path, meta: &Metadata, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let text = render_csv(meta, header, rows)?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes())
}

pub const COUNT_TABLE_HEADER: [&str; 4] = ["idler", "signal", "counts", "integration_time_s"];

pub fn count_table_rows(table: &CountTable) -> Vec<Vec<String>> {
    table
        .entries
        .iter()
        .map(|e| vec![e.idler.label(), e.signal.label(), e.counts.to_string(), e.integration_time.to_string()])
        .collect()
}

pub fn parse_count_table(text: &str) -> Result<CountTable> {
    let mut r = csv_reader(text);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COUNT_TABLE_HEADER {
        return Err(Error::Format(format!("count table header must be {}", COUNT_TABLE_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let bad = |what: &str| Error::Format(format!("row {line}: invalid {what}"));
        let idler = AnalyzerSetting::parse_label(&rec[0]).map_err(|_| bad("idler setting"))?;
        let signal = AnalyzerSetting::parse_label(&rec[1]).map_err(|_| bad("signal setting"))?;
        let counts: u64 = rec[2].parse().map_err(|_| bad("counts"))?;
        let integration_time: f64 = rec[3].parse().map_err(|_| bad("integration time"))?;
        entries.push(CountEntry { idler, signal, counts, integration_time });
    }
    Ok(CountTable { entries })
}

pub fn read_count_table(path: &Path) -> Result<CountTable> {
    parse_count_table(&std::fs::read_to_string(path)?)
}

pub const BASIS_LABELS: [&str; 4] = ["HH", "HV", "VH", "VV"];

/// Rows `part,row,HH,HV,VH,VV` with `part` either `re` or `im`.
pub fn matrix_rows(m: &Operator4) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(8);
    for (part, f) in [("re", (|z: num_complex::Complex64| z.re) as fn(_) -> f64), ("im", |z| z.im)] {
        for (r, label) in BASIS_LABELS.iter().enumerate() {
            let mut row = vec![part.to_string(), label.to_string()];
            row.extend((0..4).map(|c| format!("{:.9}", f(m[(r, c)]))));
            rows.push(row);
        }
    }
    rows
}

pub const MATRIX_HEADER: [&str; 6] = ["part", "row", "HH", "HV", "VH", "VV"];

pub fn parse_matrix(text: &str) -> Result<Operator4> {
    let mut m = Operator4::zeros();
    let mut seen = 0;
    for rec in csv_reader(text).records() {
        let rec = rec?;
        let r = BASIS_LABELS.iter().position(|l| *l == &rec[1]).ok_or_else(|| Error::Format(format!("bad row label {}", &rec[1])))?;
        for c in 0..4 {
            let v: f64 = rec[c + 2].parse().map_err(|_| Error::Format(format!("bad matrix entry {}", &rec[c + 2])))?;
            match &rec[0] {
                "re" => m[(r, c)].re = v,
                "im" => m[(r, c)].im = v,
                p => return Err(Error::Format(format!("bad part {p}"))),
            }
        }
        seen += 1;
    }
    if seen != 8 {
        return Err(Error::Format(format!("expected 8 matrix rows, found {seen}")));
    }
    Ok(m)
}
