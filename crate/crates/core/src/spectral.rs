//! Cavity mode combs, phase-matching envelope, etalon filtering and the
//! two-photon temporal correlation they produce.
//!
//! Time convention: `τ = t_signal − t_idler`. The `τ > 0` side of the
//! correlation decays with the signal arm's modes, the `τ < 0` side with the
//! idler arm's modes. Mode frequencies enter the correlation relative to their
//! arm's center frequency.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// `x` with `sin(x)/x = 1/√2`, the half-maximum point of `sinc²`.
pub(crate) const SINC2_HALF_WIDTH: f64 = 1.391_557_378_251_510_3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityArmSpec {
    pub center_frequency: f64,
    pub fsr: f64,
    /// Lorentzian FWHM of each mode.
    pub mode_linewidth: f64,
    /// Odd number of modes kept around the center.
    pub n_modes: usize,
}

impl CavityArmSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mode_linewidth > 0.0) || !(self.fsr > self.mode_linewidth) || !self.fsr.is_finite() {
            return Err(domain(format!(
                "cavity arm needs fsr > mode_linewidth > 0 (fsr {}, linewidth {})",
                self.fsr, self.mode_linewidth
            )));
        }
        if self.n_modes == 0 || self.n_modes % 2 == 0 {
            return Err(domain(format!("n_modes must be odd and ≥ 1, got {}", self.n_modes)));
        }
        if !self.center_frequency.is_finite() {
            return Err(domain("center_frequency must be finite"));
        }
        Ok(())
    }
}

/// Fabry–Perot etalon. `detuning` places the nearest transmission peak
/// relative to the arm center frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtalonSpec {
    pub fsr: f64,
    pub fwhm: f64,
    pub peak_transmission: f64,
    pub detuning: f64,
}

impl EtalonSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm > 0.0) || !(self.fsr > self.fwhm) || !self.fsr.is_finite() {
            return Err(domain(format!(
                "etalon needs fsr > fwhm > 0 (fsr {}, fwhm {})",
                self.fsr, self.fwhm
            )));
        }
        if !(self.peak_transmission > 0.0 && self.peak_transmission <= 1.0) {
            return Err(domain(format!("peak_transmission must lie in (0, 1], got {}", self.peak_transmission)));
        }
        if !self.detuning.is_finite() {
            return Err(domain("etalon detuning must be finite"));
        }
        Ok(())
    }

    pub fn finesse(&self) -> f64 {
        self.fsr / self.fwhm
    }

    /// Coefficient of the `sin²` term, chosen so the transmission is exactly
    /// half the peak at `±fwhm/2`. Tends to `(2F/π)²` at high finesse.
    pub fn airy_coefficient(&self) -> f64 {
        let s = (PI * self.fwhm / (2.0 * self.fsr)).sin();
        1.0 / (s * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchEnvelope {
    pub fwhm: f64,
    pub center: f64,
}

impl PhaseMatchEnvelope {
    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm > 0.0) || !self.fwhm.is_finite() || !self.center.is_finite() {
            return Err(domain(format!("phase-matching fwhm must be positive, got {}", self.fwhm)));
        }
        Ok(())
    }

    /// `sinc²` power envelope, 1 at the center and 1/2 at `±fwhm/2`.
    pub fn weight(&self, frequency: f64) -> f64 {
        let x = 2.0 * SINC2_HALF_WIDTH * (frequency - self.center) / self.fwhm;
        if x == 0.0 {
            1.0
        } else {
            let s = x.sin() / x;
            s * s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub frequency: f64,
    pub linewidth: f64,
    pub amplitude: Complex64,
}

/// Spectral modes of one output arm, normalized to `Σ|a|² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeComb {
    center: f64,
    modes: Vec<Mode>,
}

impl ModeComb {
    pub fn new(center: f64, modes: Vec<Mode>) -> Result<Self> {
        if modes.is_empty() {
            return Err(domain("mode comb needs at least one mode"));
        }
        if modes.windows(2).any(|w| !(w[1].frequency > w[0].frequency)) {
            return Err(domain("mode frequencies must be strictly increasing"));
        }
        if modes.iter().any(|m| !(m.linewidth > 0.0)) {
            return Err(domain("mode linewidths must be positive"));
        }
        let total: f64 = modes.iter().map(|m| m.amplitude.norm_sqr()).sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate("mode comb carries no weight".into()));
        }
        let scale = total.sqrt().recip();
        let modes = modes.into_iter().map(|m| Mode { amplitude: m.amplitude * scale, ..m }).collect();
        Ok(Self { center, modes })
    }

    pub fn single(center: f64, linewidth: f64) -> Result<Self> {
        Self::new(center, vec![Mode { frequency: center, linewidth, amplitude: Complex64::new(1.0, 0.0) }])
    }

    /// `n` equal-weight modes spaced by `fsr`, centered on `center`.
    pub fn equal_weight(center: f64, fsr: f64, linewidth: f64, n: usize) -> Result<Self> {
        let half = (n as f64 - 1.0) / 2.0;
        let modes = (0..n)
            .map(|k| Mode {
                frequency: center + (k as f64 - half) * fsr,
                linewidth,
                amplitude: Complex64::new(1.0, 0.0),
            })
            .collect();
        Self::new(center, modes)
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.amplitude.norm_sqr()).collect()
    }

    /// Narrowest mode linewidth.
    pub fn min_linewidth(&self) -> f64 {
        self.modes.iter().map(|m| m.linewidth).fold(f64::INFINITY, f64::min)
    }
}

/// Modes at `center ± k·fsr` weighted by the phase-matching envelope.
pub fn build_mode_comb(arm: &CavityArmSpec, env: &PhaseMatchEnvelope) -> Result<ModeComb> {
    arm.validate()?;
    env.validate()?;
    let half = (arm.n_modes / 2) as i64;
    let modes = (-half..=half)
        .map(|k| {
            let frequency = arm.center_frequency + k as f64 * arm.fsr;
            Mode {
                frequency,
                linewidth: arm.mode_linewidth,
                amplitude: Complex64::new(env.weight(frequency).sqrt(), 0.0),
            }
        })
        .collect();
    ModeComb::new(arm.center_frequency, modes)
}

/// Airy transmission at `offset` Hz from the arm center frequency.
pub fn etalon_transmission(e: &EtalonSpec, offset: f64) -> f64 {
    let s = (PI * (offset - e.detuning) / e.fsr).sin();
    e.peak_transmission / (1.0 + e.airy_coefficient() * s * s)
}

/// Filters a comb through an etalon. Returns the renormalized comb and the
/// transmitted fraction of the original weight.
pub fn apply_etalon(comb: &ModeComb, e: &EtalonSpec) -> Result<(ModeComb, f64)> {
    e.validate()?;
    let mut transmitted = 0.0;
    let modes: Vec<Mode> = comb
        .modes
        .iter()
        .map(|m| {
            let t = etalon_transmission(e, m.frequency - comb.center);
            transmitted += m.amplitude.norm_sqr() * t;
            Mode { amplitude: m.amplitude * t.sqrt(), ..*m }
        })
        .collect();
    Ok((ModeComb::new(comb.center, modes)?, transmitted))
}

#[derive(Debug, Clone, Copy)]
struct BasebandMode {
    /// `2π·(f − center)`
    omega: f64,
    /// `π·Γ`
    decay: f64,
    amplitude: Complex64,
}

fn baseband(comb: &ModeComb) -> Vec<BasebandMode> {
    comb.modes
        .iter()
        .map(|m| BasebandMode {
            omega: 2.0 * PI * (m.frequency - comb.center),
            decay: PI * m.linewidth,
            amplitude: m.amplitude,
        })
        .collect()
}

/// `∫₀^∞ |Σ a_m e^{−(iω_m + γ_m)t}|² dt`, summed in closed form over mode pairs.
fn side_integral(modes: &[BasebandMode]) -> f64 {
    let mut total = Complex64::new(0.0, 0.0);
    for m in modes {
        for n in modes {
            let denom = Complex64::new(m.decay + n.decay, m.omega - n.omega);
            total += m.amplitude * n.amplitude.conj() / denom;
        }
    }
    total.re
}

fn side_value(modes: &[BasebandMode], t: f64) -> f64 {
    modes
        .iter()
        .map(|m| m.amplitude * Complex64::new(-m.decay * t, -m.omega * t).exp())
        .sum::<Complex64>()
        .norm_sqr()
}

/// Normalized two-sided `G²(τ)` density of a signal/idler comb pair.
///
/// Precomputes the per-side integrals so repeated evaluation costs
/// `O(modes)` per point.
#[derive(Debug, Clone)]
pub struct CorrelationDensity {
    signal: Vec<BasebandMode>,
    idler: Vec<BasebandMode>,
    signal_integral: f64,
    idler_integral: f64,
}

impl CorrelationDensity {
    pub fn new(signal: &ModeComb, idler: &ModeComb) -> Self {
        let signal = baseband(signal);
        let idler = baseband(idler);
        let signal_integral = side_integral(&signal);
        let idler_integral = side_integral(&idler);
        Self { signal, idler, signal_integral, idler_integral }
    }

    /// Density at `tau` seconds; integrates to one over the real line.
    pub fn density(&self, tau: f64) -> f64 {
        self.raw(tau) / self.norm()
    }

    /// Unnormalized `|Σ a_m e^{…}|²` on the side selected by the sign of `tau`.
    pub fn raw(&self, tau: f64) -> f64 {
        if tau >= 0.0 {
            side_value(&self.signal, tau)
        } else {
            side_value(&self.idler, -tau)
        }
    }

    pub fn norm(&self) -> f64 {
        self.signal_integral + self.idler_integral
    }

    /// Probability mass on `τ ≥ 0`.
    pub fn positive_fraction(&self) -> f64 {
        self.signal_integral / self.norm()
    }

    pub fn is_single_mode(&self) -> bool {
        self.signal.len() == 1 && self.idler.len() == 1
    }

    /// Slowest intensity decay rate (`2π·Γ_min`) on the signal and idler sides.
    pub(crate) fn slowest_rates(&self) -> (f64, f64) {
        let slow = |m: &[BasebandMode]| 2.0 * m.iter().map(|x| x.decay).fold(f64::INFINITY, f64::min);
        (slow(&self.signal), slow(&self.idler))
    }
}

/// `G²_{S,I}(τ)` normalized to unit integral. See [`CorrelationDensity`] for
/// repeated evaluation.
pub fn g2_analytic(signal: &ModeComb, idler: &ModeComb, tau: f64) -> f64 {
    CorrelationDensity::new(signal, idler).density(tau)
}
