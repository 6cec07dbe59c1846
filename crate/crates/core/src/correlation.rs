//! Coincidence histograms of `τ = t_signal − t_idler`, two-sided exponential
//! bandwidth fits, comb-contrast quantification and windowed coincidence
//! rates.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::synth::{TimeTag, IDLER_CHANNEL, SIGNAL_CHANNEL};

/// Idler tags per parallel work unit when histogramming.
const HISTOGRAM_CHUNK: usize = 1 << 14;

/// Binned signal−idler delays over `[−range, range)`.
///
/// Bin `k` covers `[−range + k·bin, −range + (k+1)·bin)`, so `τ = 0` opens the
/// first non-negative bin.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceHistogram {
    pub bin_size_ps: i64,
    pub range_ps: i64,
    pub counts: Vec<u64>,
    /// Singles per channel, indexed by channel id.
    pub singles: [u64; 2],
    /// Seconds.
    pub integration_time: f64,
}

impl CoincidenceHistogram {
    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_start_ps(&self, k: usize) -> i64 {
        -self.range_ps + k as i64 * self.bin_size_ps
    }

    /// Bin center in seconds.
    pub fn bin_center(&self, k: usize) -> f64 {
        (self.bin_start_ps(k) as f64 + 0.5 * self.bin_size_ps as f64) * 1e-12
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing `τ = 0`.
    pub fn zero_bin(&self) -> usize {
        (self.range_ps / self.bin_size_ps) as usize
    }
}

pub(crate) fn check_sorted(events: &[TimeTag]) -> Result<()> {
    match events.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        Some(i) => Err(contract(format!("event stream not sorted at record {}", i + 1))),
        None => Ok(()),
    }
}

fn split_channels(events: &[TimeTag]) -> (Vec<i64>, Vec<i64>) {
    let idler = events.iter().filter(|t| t.channel == IDLER_CHANNEL).map(|t| t.timestamp).collect();
    let signal = events.iter().filter(|t| t.channel == SIGNAL_CHANNEL).map(|t| t.timestamp).collect();
    (idler, signal)
}

/// Start-multistop histogram: every signal tag within `[−range, range)` of an
/// idler tag adds one count at its delay. Idler tags are processed in
/// parallel chunks whose partial histograms are summed.
pub fn histogram(events: &[TimeTag], bin_size_ps: i64, range_ps: i64, integration_time: f64) -> Result<CoincidenceHistogram> {
    if bin_size_ps <= 0 || range_ps <= 0 {
        return Err(contract("bin size and range must be positive"));
    }
    if range_ps % bin_size_ps != 0 {
        return Err(contract(format!("bin size {bin_size_ps} ps must divide the range {range_ps} ps")));
    }
    check_sorted(events)?;
    let n_bins = (2 * range_ps / bin_size_ps) as usize;
    let (idler, signal) = split_channels(events);

    let counts = idler
        .par_chunks(HISTOGRAM_CHUNK)
        .map(|chunk| {
            let mut local = vec![0u64; n_bins];
            let mut lo = signal.partition_point(|&t| t < chunk[0] - range_ps);
            for &ti in chunk {
                while lo < signal.len() && signal[lo] < ti - range_ps {
                    lo += 1;
                }
                for &ts in &signal[lo..] {
                    let d = ts - ti;
                    if d >= range_ps {
                        break;
                    }
                    local[((d + range_ps) / bin_size_ps) as usize] += 1;
                }
            }
            local
        })
        .reduce(
            || vec![0u64; n_bins],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    Ok(CoincidenceHistogram {
        bin_size_ps,
        range_ps,
        counts,
        singles: [idler.len() as u64, signal.len() as u64],
        integration_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `τ > 0`, signal-arm decay.
    Positive,
    /// `τ < 0`, idler-arm decay.
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthFit {
    /// Hz
    pub delta_nu: f64,
    /// Counts per bin extrapolated to `|τ| = 0`, background excluded.
    pub amplitude: f64,
    /// Counts per bin.
    pub background: f64,
    /// `|τ|` interval of the bins used, seconds.
    pub fit_range: (f64, f64),
    pub residual_rms: f64,
    /// Weighted χ² per degree of freedom.
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Explicit `|τ|` interval in seconds; bins whose centers fall inside are used.
    pub range: Option<(f64, f64)>,
}

const MAX_FIT_ITERATIONS: usize = 50;
const MIN_SIDE_BINS: usize = 10;
/// Expected counts per bin below which the default fit range stops.
const TAIL_COUNTS: f64 = 5.0;

/// `(|τ| in seconds, counts)` for the bins of one side, ordered outward.
/// The bin touching `τ = 0` is excluded.
fn side_points(h: &CoincidenceHistogram, side: Side) -> Vec<(f64, f64)> {
    let zero = h.zero_bin();
    match side {
        Side::Positive => (zero + 1..h.n_bins()).map(|k| (h.bin_center(k), h.counts[k] as f64)).collect(),
        Side::Negative => (0..zero.saturating_sub(1)).rev().map(|k| (-h.bin_center(k), h.counts[k] as f64)).collect(),
    }
}

/// Fits `A·e^{−2πΔν|τ|} + B` to one side of the histogram.
pub fn fit_bandwidth(h: &CoincidenceHistogram, side: Side) -> Result<BandwidthFit> {
    fit_bandwidth_with(h, side, FitOptions::default())
}

pub fn fit_bandwidth_with(h: &CoincidenceHistogram, side: Side, opts: FitOptions) -> Result<BandwidthFit> {
    let points = side_points(h, side);
    let nonzero = points.iter().filter(|p| p.1 > 0.0).count();
    if nonzero < MIN_SIDE_BINS {
        return Err(Error::Degenerate(format!("only {nonzero} nonzero bins on the {side:?} side")));
    }
    fit_decay(&points, side, opts)
}

/// Weighted least squares on `(x, y)` points ordered by increasing `x`.
/// Log-linear start, then Gauss–Newton with step halving and Poisson weights
/// `1/max(y, 1)`.
pub(crate) fn fit_decay(points: &[(f64, f64)], side: Side, opts: FitOptions) -> Result<BandwidthFit> {
    let fail = |message: String, residuals: Vec<f64>| Error::FitFailure { message, residuals };
    if points.len() < 4 {
        return Err(Error::Degenerate(format!("{} points are too few to fit", points.len())));
    }

    // Background guess from the outer quarter.
    let tail = &points[points.len() - points.len() / 4..];
    let b0 = tail.iter().map(|p| p.1).sum::<f64>() / tail.len() as f64;

    let (mut a, k) = log_linear_start(points, b0).ok_or_else(|| {
        fail("no decaying component above background".into(), points.iter().map(|p| p.1 - b0).collect())
    })?;

    let selected: Vec<(f64, f64)> = match opts.range {
        Some((lo, hi)) => points.iter().copied().filter(|p| p.0 >= lo && p.0 <= hi).collect(),
        None => {
            let x0 = points[0].0;
            let end = points
                .iter()
                .position(|p| a * (-k * (p.0 - x0)).exp() + b0 < TAIL_COUNTS)
                .unwrap_or(points.len());
            points[..end].to_vec()
        }
    };
    if selected.len() < 4 {
        return Err(Error::Degenerate(format!("fit range holds only {} bins", selected.len())));
    }

    // Work in x relative to the first bin and scaled by the initial decay
    // time so the normal equations stay well conditioned.
    let x0 = selected[0].0;
    a *= (-k * (x0 - points[0].0)).exp();
    let scale = 1.0 / k;
    let xs: Vec<f64> = selected.iter().map(|p| (p.0 - x0) / scale).collect();
    let ys: Vec<f64> = selected.iter().map(|p| p.1).collect();
    let ws: Vec<f64> = ys.iter().map(|y| 1.0 / y.max(1.0)).collect();
    let mut kk = 1.0; // decay rate in scaled units
    a = a.max(1e-300);
    let mut b = b0;

    let objective = |a: f64, kk: f64, b: f64| -> f64 {
        xs.iter().zip(&ys).zip(&ws).map(|((x, y), w)| w * (y - a * (-kk * x).exp() - b).powi(2)).sum()
    };
    let mut obj = objective(a, kk, b);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_FIT_ITERATIONS {
        iterations += 1;
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for ((x, y), w) in xs.iter().zip(&ys).zip(&ws) {
            let e = (-kk * x).exp();
            let r = y - a * e - b;
            let j = Vector3::new(e, -a * x * e, 1.0);
            jtj += *w * j * j.transpose();
            jtr += w * r * j;
        }
        let Some(step) = jtj.lu().solve(&jtr) else {
            return Err(fail("singular normal equations".into(), residuals(&xs, &ys, a, kk, b)));
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let (na, nk, nb) = (a + t * step[0], kk + t * step[1], b + t * step[2]);
            if nk > 0.0 {
                let o = objective(na, nk, nb);
                if o <= obj {
                    let rel = (step[0] / a).abs().max((step[1] / kk).abs()).max((step[2] / (b.abs() + a)).abs()) * t;
                    let drop = obj - o;
                    a = na;
                    kk = nk;
                    b = nb;
                    obj = o;
                    improved = true;
                    if rel < 1e-12 || drop <= 1e-15 * obj {
                        converged = true;
                    }
                    break;
                }
            }
            t *= 0.5;
        }
        if !improved {
            // No descent possible along the Gauss–Newton direction: at the minimum up to rounding.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let res = residuals(&xs, &ys, a, kk, b);
    if !converged {
        return Err(fail(format!("no convergence after {MAX_FIT_ITERATIONS} iterations"), res));
    }
    if !(a > 0.0) || !(kk > 0.0) {
        return Err(fail("fit produced a non-decaying model".into(), res));
    }
    let rate = kk / scale;
    let amplitude = a * (rate * x0).exp();
    let dof = (xs.len() as f64 - 3.0).max(1.0);
    Ok(BandwidthFit {
        delta_nu: rate / (2.0 * PI),
        amplitude,
        background: b,
        fit_range: (selected[0].0, selected[selected.len() - 1].0),
        residual_rms: (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt(),
        reduced_chi2: obj / dof,
        iterations,
        side,
    })
}

fn residuals(xs: &[f64], ys: &[f64], a: f64, k: f64, b: f64) -> Vec<f64> {
    xs.iter().zip(ys).map(|(x, y)| y - a * (-k * x).exp() - b).collect()
}

/// Weighted regression of `ln(y − b)` on `x`. Returns `(A at x₀, rate)`.
fn log_linear_start(points: &[(f64, f64)], b: f64) -> Option<(f64, f64)> {
    let x0 = points[0].0;
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let excess = y - b;
        if excess <= 0.0 || y <= 0.0 {
            continue;
        }
        // var(ln(y − b)) ≈ y / (y − b)²
        let w = excess * excess / y.max(1.0);
        let lx = x - x0;
        let ly = excess.ln();
        sw += w;
        sx += w * lx;
        sy += w * ly;
        sxx += w * lx * lx;
        sxy += w * lx * ly;
    }
    let det = sw * sxx - sx * sx;
    if !(sw > 0.0) || !(det > 0.0) {
        return None;
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    (slope < 0.0 && slope.is_finite()).then(|| (intercept.exp(), -slope))
}

/// Modulation depth of the periodic revival structure in a histogram.
///
/// The exponential envelope of each side is fitted on bins regrouped to one
/// period (which averages the revivals out) and divided out bin by bin. The
/// normalized bins with `|τ|` within two decay times are folded modulo the
/// period, and the result is `(max − min)/(max + min)` of the folded profile.
pub fn comb_contrast(h: &CoincidenceHistogram, expected_period_ps: i64) -> Result<f64> {
    let counts: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    profile_contrast(h.bin_size_ps, h.range_ps, &counts, expected_period_ps)
}

/// [`comb_contrast`] on real-valued bin contents laid out like a
/// [`CoincidenceHistogram`].
pub fn profile_contrast(bin_size_ps: i64, range_ps: i64, counts: &[f64], period_ps: i64) -> Result<f64> {
    if period_ps <= 0 || bin_size_ps <= 0 || bin_size_ps * 8 > period_ps {
        return Err(contract(format!("bin size {bin_size_ps} ps must be ≤ period/8 ({period_ps} ps)")));
    }
    if range_ps < 3 * period_ps {
        return Err(contract(format!("range {range_ps} ps must be ≥ 3 periods ({period_ps} ps)")));
    }
    let n_bins = counts.len();
    let zero = (range_ps / bin_size_ps) as usize;
    if n_bins != 2 * zero {
        return Err(contract("bin count does not match range"));
    }
    let group = ((period_ps as f64 / bin_size_ps as f64).round() as usize).max(1);
    let center = |k: usize| (-range_ps as f64 + (k as f64 + 0.5) * bin_size_ps as f64) * 1e-12;

    let fit_side = |side: Side| -> Result<BandwidthFit> {
        let idx: Vec<usize> = match side {
            Side::Positive => (zero..n_bins).collect(),
            Side::Negative => (0..zero).rev().collect(),
        };
        let points: Vec<(f64, f64)> = idx
            .chunks_exact(group)
            .map(|g| {
                let x = g.iter().map(|&k| center(k).abs()).sum::<f64>() / group as f64;
                (x, g.iter().map(|&k| counts[k]).sum())
            })
            .skip(1)
            .collect();
        if points.iter().filter(|p| p.1 > 0.0).count() < 4 {
            return Err(Error::Degenerate(format!("too few counts to fit the {side:?} envelope")));
        }
        fit_decay(&points, side, FitOptions::default())
    };
    let pos = fit_side(Side::Positive)?;
    let neg = fit_side(Side::Negative)?;

    let n_phase = group;
    let mut sum = vec![0.0; n_phase];
    let mut num = vec![0usize; n_phase];
    for (k, &c) in counts.iter().enumerate() {
        let tau = center(k);
        let fit = if tau >= 0.0 { &pos } else { &neg };
        let rate = 2.0 * PI * fit.delta_nu;
        if tau.abs() > 2.0 / rate {
            continue;
        }
        let model = (fit.amplitude * (-rate * tau.abs()).exp() + fit.background) / group as f64;
        if model <= 0.0 {
            continue;
        }
        let tau_ps = tau * 1e12;
        let phase = (tau_ps.rem_euclid(period_ps as f64) / period_ps as f64 * n_phase as f64) as usize;
        let p = phase.min(n_phase - 1);
        sum[p] += c / model;
        num[p] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&num).filter(|(_, &n)| n > 0).map(|(s, &n)| s / n as f64).collect();
    if means.len() < 2 {
        return Err(Error::Degenerate("folded profile has fewer than two phase bins".into()));
    }
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    if !(max + min > 0.0) {
        return Err(Error::Degenerate("folded profile is empty".into()));
    }
    Ok(((max - min) / (max + min)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub count: u64,
    /// Per second.
    pub rate: f64,
    /// Poisson standard error, per second.
    pub error: f64,
}

/// Signal–idler pairs with `|t_s − t_i| ≤ window/2`.
pub fn coincidence_count(events: &[TimeTag], window_ps: i64) -> Result<u64> {
    check_sorted(events)?;
    if window_ps < 0 {
        return Err(contract("coincidence window must be non-negative"));
    }
    let half = window_ps / 2;
    let (idler, signal) = split_channels(events);
    let mut lo = 0;
    let mut total = 0u64;
    for &ti in &idler {
        while lo < signal.len() && signal[lo] < ti - half {
            lo += 1;
        }
        total += signal[lo..].iter().take_while(|&&ts| ts <= ti + half).count() as u64;
    }
    Ok(total)
}

pub fn coincidence_rate(events: &[TimeTag], window_ps: i64, integration_time: f64) -> Result<RateEstimate> {
    if !(integration_time > 0.0) {
        return Err(contract("integration time must be positive"));
    }
    let count = coincidence_count(events, window_ps)?;
    Ok(RateEstimate {
        count,
        rate: count as f64 / integration_time,
        error: (count as f64).sqrt() / integration_time,
    })
}
