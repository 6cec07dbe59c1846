//! Monte Carlo synthesis of detector time tags.
//!
//! Pairs are emitted as a Poisson process. Each pair gets a signal−idler
//! delay drawn from the `G²` density, a joint polarization outcome drawn from
//! the density matrix and the two analyzers, independent detection with the
//! detector efficiency, and Gaussian timing jitter. Dark counts are added as
//! independent uniform Poisson streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::polarization::{kron, projector_probability, AnalyzerSetting, DensityMatrix, Operator2};
use crate::spectral::{CorrelationDensity, ModeComb};

pub const IDLER_CHANNEL: u8 = 0;
pub const SIGNAL_CHANNEL: u8 = 1;

/// One detection event, in integer picoseconds from the start of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeTag {
    pub timestamp: i64,
    pub channel: u8,
}

impl TimeTag {
    pub const fn new(channel: u8, timestamp: i64) -> Self {
        Self { timestamp, channel }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub efficiency: f64,
    /// Hz
    pub dark_rate: f64,
    /// Gaussian timing jitter, seconds.
    pub jitter_sigma: f64,
}

impl DetectorSpec {
    pub const IDEAL: Self = Self { efficiency: 1.0, dark_rate: 0.0, jitter_sigma: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(domain(format!("detector efficiency must lie in [0, 1], got {}", self.efficiency)));
        }
        if !(self.dark_rate >= 0.0) || !self.dark_rate.is_finite() {
            return Err(domain(format!("dark_rate must be finite and ≥ 0, got {}", self.dark_rate)));
        }
        if !(self.jitter_sigma >= 0.0) || !self.jitter_sigma.is_finite() {
            return Err(domain(format!("jitter_sigma must be finite and ≥ 0, got {}", self.jitter_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SourceRunConfig {
    /// Pair emission rate before analyzers and detector efficiencies, Hz.
    pub pair_rate: f64,
    pub state: DensityMatrix,
    pub signal_comb: ModeComb,
    pub idler_comb: ModeComb,
    /// `None` means no analyzer in that arm.
    pub analyzer_idler: Option<AnalyzerSetting>,
    pub analyzer_signal: Option<AnalyzerSetting>,
    /// Seconds.
    pub duration: f64,
    pub rng_seed: u64,
}

impl SourceRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate >= 0.0) || !self.pair_rate.is_finite() {
            return Err(domain(format!("pair_rate must be finite and ≥ 0, got {}", self.pair_rate)));
        }
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(domain(format!("duration must be finite and ≥ 0, got {}", self.duration)));
        }
        if self.duration * 1e12 > i64::MAX as f64 / 2.0 {
            return Err(domain("duration exceeds the picosecond timestamp range"));
        }
        Ok(())
    }

    /// Probabilities that the pair passes (idler, signal) analyzers:
    /// `[both, idler only, signal only, neither]`.
    pub fn analyzer_outcomes(&self) -> [f64; 4] {
        let proj = |a: &Option<AnalyzerSetting>| a.map(|s| s.projector()).unwrap_or_else(Operator2::identity);
        let pi = proj(&self.analyzer_idler);
        let ps = proj(&self.analyzer_signal);
        let one = Operator2::identity();
        let both = projector_probability(&self.state, &kron(&pi, &ps));
        let idler = projector_probability(&self.state, &kron(&pi, &one));
        let signal = projector_probability(&self.state, &kron(&one, &ps));
        let idler_only = (idler - both).max(0.0);
        let signal_only = (signal - both).max(0.0);
        let neither = (1.0 - both - idler_only - signal_only).max(0.0);
        [both, idler_only, signal_only, neither]
    }
}

/// Expected event totals for a run; reported next to the realized counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedCounts {
    pub idler_singles: f64,
    pub signal_singles: f64,
    /// True pairs with both photons detected (any delay).
    pub pairs_detected: f64,
}

pub fn expected_counts(cfg: &SourceRunConfig, det_s: &DetectorSpec, det_i: &DetectorSpec) -> ExpectedCounts {
    let [both, idler_only, signal_only, _] = cfg.analyzer_outcomes();
    let pairs = cfg.pair_rate * cfg.duration;
    ExpectedCounts {
        idler_singles: pairs * (both + idler_only) * det_i.efficiency + det_i.dark_rate * cfg.duration,
        signal_singles: pairs * (both + signal_only) * det_s.efficiency + det_s.dark_rate * cfg.duration,
        pairs_detected: pairs * both * det_i.efficiency * det_s.efficiency,
    }
}

/// Draws signal−idler delays from the normalized `G²` density.
///
/// A single-mode pair of combs is sampled exactly by inverse CDF of the
/// asymmetric two-sided exponential. Multimode combs use rejection sampling
/// against the single-mode envelope decaying at the slowest linewidth of each
/// side, scaled by 1.1× the largest density/envelope ratio found on a dense
/// grid.
#[derive(Debug, Clone)]
pub struct TauSampler {
    density: CorrelationDensity,
    positive_fraction: f64,
    signal_rate: f64,
    idler_rate: f64,
    /// `None` for the exact single-mode sampler.
    envelope: Option<(f64, f64)>,
}

/// Rejection attempts allowed per sample, per unit of envelope constant.
const ATTEMPTS_PER_UNIT: f64 = 1000.0;
const ENVELOPE_SAFETY: f64 = 1.1;
const ENVELOPE_GRID_MAX: usize = 2_000_000;

impl TauSampler {
    pub fn new(signal: &ModeComb, idler: &ModeComb) -> Self {
        let density = CorrelationDensity::new(signal, idler);
        let positive_fraction = density.positive_fraction();
        let (signal_rate, idler_rate) = density.slowest_rates();
        let envelope = if density.is_single_mode() {
            None
        } else {
            Some((
                ENVELOPE_SAFETY * max_ratio(&density, signal, signal_rate, 1.0),
                ENVELOPE_SAFETY * max_ratio(&density, idler, idler_rate, -1.0),
            ))
        };
        Self { density, positive_fraction, signal_rate, idler_rate, envelope }
    }

    pub fn density(&self) -> &CorrelationDensity {
        &self.density
    }

    pub fn envelope_constants(&self) -> Option<(f64, f64)> {
        self.envelope
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let positive = rng.random::<f64>() < self.positive_fraction;
        let (rate, sign) = if positive { (self.signal_rate, 1.0) } else { (self.idler_rate, -1.0) };
        let exp = Exp::new(rate).map_err(|e| Error::Internal(e.to_string()))?;
        let Some((m_pos, m_neg)) = self.envelope else {
            return Ok(sign * exp.sample(rng));
        };
        let m = if positive { m_pos } else { m_neg };
        let budget = (ATTEMPTS_PER_UNIT * m.max(1.0)).ceil() as usize;
        for _ in 0..budget {
            let t = exp.sample(rng);
            let ratio = self.density.raw(sign * t) * (rate * t).exp();
            if rng.random::<f64>() * m < ratio {
                return Ok(sign * t);
            }
        }
        Err(Error::SamplingBudget { attempts: budget })
    }
}

/// Largest `raw(τ)·e^{rate·|τ|}` on a grid fine enough to resolve the comb
/// revivals, over ten envelope decay times.
fn max_ratio(density: &CorrelationDensity, comb: &ModeComb, rate: f64, sign: f64) -> f64 {
    let spread = comb.modes().last().unwrap().frequency - comb.modes()[0].frequency;
    let t_max = 10.0 / rate;
    let mut dt = t_max / 1000.0;
    if spread > 0.0 {
        dt = dt.min(1.0 / (40.0 * spread));
    }
    let n = ((t_max / dt).ceil() as usize).min(ENVELOPE_GRID_MAX);
    let dt = t_max / n as f64;
    (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            // The τ = 0 point belongs to the positive side; nudge the negative side off it.
            let tau = if sign > 0.0 { t } else { -t.max(f64::MIN_POSITIVE) };
            density.raw(tau) * (rate * t).exp()
        })
        .fold(0.0, f64::max)
}

/// One delay sample; builds the sampler on every call.
pub fn sample_tau<R: Rng + ?Sized>(signal: &ModeComb, idler: &ModeComb, rng: &mut R) -> Result<f64> {
    TauSampler::new(signal, idler).sample(rng)
}

/// Seed for chunk `index` of a run seeded with `seed` (SplitMix64 finalizer).
pub fn chunk_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn to_ps(seconds: f64) -> i64 {
    (seconds * 1e12).round_ties_even() as i64
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

struct ChunkPlan<'a> {
    cfg: &'a SourceRunConfig,
    det_s: &'a DetectorSpec,
    det_i: &'a DetectorSpec,
    sampler: &'a TauSampler,
    outcomes: [f64; 4],
}

impl ChunkPlan<'_> {
    fn run(&self, start: f64, len: f64, seed: u64) -> Result<Vec<TimeTag>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tags = Vec::new();
        let jitter_s = Normal::new(0.0, self.det_s.jitter_sigma).map_err(|e| Error::Internal(e.to_string()))?;
        let jitter_i = Normal::new(0.0, self.det_i.jitter_sigma).map_err(|e| Error::Internal(e.to_string()))?;

        let n_pairs = poisson_count(self.cfg.pair_rate * len, &mut rng);
        let [both, idler_only, signal_only, _] = self.outcomes;
        for _ in 0..n_pairs {
            let t_emit = start + len * rng.random::<f64>();
            let tau = self.sampler.sample(&mut rng)?;
            let u = rng.random::<f64>();
            let (pass_i, pass_s) = if u < both {
                (true, true)
            } else if u < both + idler_only {
                (true, false)
            } else if u < both + idler_only + signal_only {
                (false, true)
            } else {
                (false, false)
            };
            let det_i = pass_i && rng.random::<f64>() < self.det_i.efficiency;
            let det_s = pass_s && rng.random::<f64>() < self.det_s.efficiency;
            if det_i {
                let t = t_emit + jitter_i.sample(&mut rng);
                tags.push(TimeTag::new(IDLER_CHANNEL, to_ps(t)));
            }
            if det_s {
                let t = t_emit + tau + jitter_s.sample(&mut rng);
                tags.push(TimeTag::new(SIGNAL_CHANNEL, to_ps(t)));
            }
        }

        for (channel, rate) in [(IDLER_CHANNEL, self.det_i.dark_rate), (SIGNAL_CHANNEL, self.det_s.dark_rate)] {
            let n = poisson_count(rate * len, &mut rng);
            for _ in 0..n {
                tags.push(TimeTag::new(channel, to_ps(start + len * rng.random::<f64>())));
            }
        }
        tags.retain(|t| t.timestamp >= 0);
        Ok(tags)
    }
}

/// Synthesizes one merged, time-sorted event stream. Deterministic in
/// `cfg.rng_seed`.
pub fn synthesize(cfg: &SourceRunConfig, det_s: &DetectorSpec, det_i: &DetectorSpec) -> Result<Vec<TimeTag>> {
    synthesize_chunked(cfg, det_s, det_i, 1)
}

/// Splits the run into `chunks` equal time slices generated in parallel with
/// seeds derived from `cfg.rng_seed` and the chunk index, then merges them.
/// The output depends on `chunks` but not on the thread count.
pub fn synthesize_chunked(
    cfg: &SourceRunConfig,
    det_s: &DetectorSpec,
    det_i: &DetectorSpec,
    chunks: usize,
) -> Result<Vec<TimeTag>> {
    cfg.validate()?;
    det_s.validate()?;
    det_i.validate()?;
    if chunks == 0 {
        return Err(domain("chunk count must be ≥ 1"));
    }
    if cfg.duration == 0.0 {
        return Ok(Vec::new());
    }
    let sampler = TauSampler::new(&cfg.signal_comb, &cfg.idler_comb);
    let plan = ChunkPlan { cfg, det_s, det_i, sampler: &sampler, outcomes: cfg.analyzer_outcomes() };
    let len = cfg.duration / chunks as f64;
    let parts: Vec<Vec<TimeTag>> = (0..chunks)
        .into_par_iter()
        .map(|k| plan.run(k as f64 * len, len, chunk_seed(cfg.rng_seed, k as u64)))
        .collect::<Result<_>>()?;
    let mut tags: Vec<TimeTag> = parts.into_iter().flatten().collect();
    tags.sort_unstable();
    Ok(tags)
}
