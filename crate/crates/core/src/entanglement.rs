//! Polarization-correlation analyses: fringe visibility, CHSH, linear and
//! maximum-likelihood state tomography, and normalized spectral brightness.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::correlation::coincidence_count;
use crate::error::{contract, domain, Error, Result};
use crate::polarization::{
    coincidence_probability, fidelity, kron, AnalyzerSetting, DensityMatrix, Operator2, Operator4, Port, StateVector,
};
use crate::synth::{chunk_seed, synthesize, DetectorSpec, SourceRunConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountEntry {
    pub idler: AnalyzerSetting,
    pub signal: AnalyzerSetting,
    pub counts: u64,
    /// Seconds.
    pub integration_time: f64,
}

/// Coincidence counts recorded for a list of analyzer setting pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountTable {
    pub entries: Vec<CountEntry>,
}

fn same_setting(a: &AnalyzerSetting, b: &AnalyzerSetting) -> bool {
    a.port == b.port && (a.hwp_deg - b.hwp_deg).abs() < 1e-9 && (a.qwp_deg - b.qwp_deg).abs() < 1e-9
}

impl CountTable {
    pub fn push(&mut self, idler: AnalyzerSetting, signal: AnalyzerSetting, counts: u64, integration_time: f64) {
        self.entries.push(CountEntry { idler, signal, counts, integration_time });
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.counts).sum()
    }

    pub fn find(&self, idler: &AnalyzerSetting, signal: &AnalyzerSetting) -> Option<&CountEntry> {
        self.entries.iter().find(|e| same_setting(&e.idler, idler) && same_setting(&e.signal, signal))
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Degenerate("count table is empty".into()));
        }
        if let Some(e) = self.entries.iter().find(|e| !(e.integration_time > 0.0)) {
            return Err(domain(format!("integration time {} must be positive", e.integration_time)));
        }
        Ok(())
    }
}

/// `{H, V, D, R} ⊗ {H, V, D, R}`, idler setting first.
pub fn tomography_settings() -> Vec<(AnalyzerSetting, AnalyzerSetting)> {
    let basis = [AnalyzerSetting::H, AnalyzerSetting::V, AnalyzerSetting::D, AnalyzerSetting::R];
    basis.iter().flat_map(|&i| basis.iter().map(move |&s| (i, s))).collect()
}

/// Counts with Poisson noise around `mean_per_setting · Tr(ρ Π)` per setting.
pub fn poisson_count_table<R: rand::Rng + ?Sized>(
    rho: &DensityMatrix,
    settings: &[(AnalyzerSetting, AnalyzerSetting)],
    mean_per_setting: f64,
    integration_time: f64,
    rng: &mut R,
) -> CountTable {
    let mut table = CountTable::default();
    for (i, s) in settings {
        let mean = mean_per_setting * coincidence_probability(rho, i, s);
        let n = if mean > 0.0 { Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0) } else { 0 };
        table.push(*i, *s, n, integration_time);
    }
    table
}

/// Noiseless table with `round(total_per_setting · Tr(ρ Π))` counts.
pub fn expected_count_table(
    rho: &DensityMatrix,
    settings: &[(AnalyzerSetting, AnalyzerSetting)],
    total_per_setting: f64,
) -> CountTable {
    let mut table = CountTable::default();
    for (i, s) in settings {
        let n = (total_per_setting * coincidence_probability(rho, i, s)).round() as u64;
        table.push(*i, *s, n, 1.0);
    }
    table
}

/// Runs the event synthesizer once per setting pair and counts windowed
/// coincidences. Each run reuses `base` with its analyzers replaced and a
/// seed derived from `base.rng_seed` and the setting index.
pub fn measure_count_table(
    base: &SourceRunConfig,
    det_s: &DetectorSpec,
    det_i: &DetectorSpec,
    settings: &[(AnalyzerSetting, AnalyzerSetting)],
    window_ps: i64,
) -> Result<CountTable> {
    let entries = settings
        .par_iter()
        .enumerate()
        .map(|(k, (i, s))| {
            let mut cfg = base.clone();
            cfg.analyzer_idler = Some(*i);
            cfg.analyzer_signal = Some(*s);
            cfg.rng_seed = chunk_seed(base.rng_seed, 0x1_0000 + k as u64);
            let events = synthesize(&cfg, det_s, det_i)?;
            let counts = coincidence_count(&events, window_ps)?;
            Ok(CountEntry { idler: *i, signal: *s, counts, integration_time: base.duration })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountTable { entries })
}

// ---------------------------------------------------------------------------
// Fringes

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FringePoint {
    /// Signal HWP angle, degrees.
    pub angle_deg: f64,
    pub value: f64,
    pub error: f64,
}

/// Sinusoid `c₀ + c₁cos(4θ) + c₂sin(4θ)` in HWP angle `θ` (period 90°).
#[derive(Debug, Clone, PartialEq)]
pub struct FringeScan {
    pub points: Vec<FringePoint>,
    pub offset: f64,
    pub amplitude: f64,
    /// Phase of the maximum, degrees of HWP angle.
    pub phase_deg: f64,
    pub visibility: f64,
    pub visibility_error: f64,
}

/// Residual RMS, relative to the offset, above which data are not a fringe.
const FRINGE_SHAPE_TOL: f64 = 0.2;

/// Fits the 90°-periodic sinusoid and returns its visibility
/// `(max − min)/(max + min) = |amplitude|/offset`.
pub fn fit_fringe(points: Vec<FringePoint>) -> Result<FringeScan> {
    if points.len() < 3 {
        return Err(Error::FitFailure { message: "need at least three fringe points".into(), residuals: vec![] });
    }
    let basis = |t: f64| {
        let x = 4.0 * t.to_radians();
        Vector3::new(1.0, x.cos(), x.sin())
    };
    let weighted = points.iter().all(|p| p.error > 0.0);
    let mut ata = Matrix3::<f64>::zeros();
    let mut atb = Vector3::<f64>::zeros();
    for p in &points {
        let w = if weighted { p.error.powi(-2) } else { 1.0 };
        let f = basis(p.angle_deg);
        ata += w * f * f.transpose();
        atb += w * p.value * f;
    }
    let residuals_of = |c: &Vector3<f64>| points.iter().map(|p| p.value - basis(p.angle_deg).dot(c)).collect::<Vec<_>>();
    let Some(cov) = ata.try_inverse() else {
        return Err(Error::FitFailure { message: "fringe angles do not resolve a 90° sinusoid".into(), residuals: vec![] });
    };
    let c = cov * atb;
    let res = residuals_of(&c);
    if !(c[0] > 0.0) {
        return Err(Error::FitFailure { message: "fringe offset is not positive".into(), residuals: res });
    }
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    if rms > FRINGE_SHAPE_TOL * c[0] {
        return Err(Error::FitFailure { message: format!("data are not sinusoidal (relative rms {:.3})", rms / c[0]), residuals: res });
    }
    let amplitude = c[1].hypot(c[2]);
    let visibility = amplitude / c[0];
    // Delta method on V = √(c₁² + c₂²)/c₀; covariance scaled by the fit
    // quality when no per-point errors are given.
    let cov = if weighted {
        cov
    } else {
        let dof = (points.len() as f64 - 3.0).max(1.0);
        cov * (res.iter().map(|r| r * r).sum::<f64>() / dof)
    };
    let visibility_error = if amplitude > 0.0 {
        let g = Vector3::new(-visibility / c[0], c[1] / (amplitude * c[0]), c[2] / (amplitude * c[0]));
        (g.transpose() * cov * g)[(0, 0)].max(0.0).sqrt()
    } else {
        0.0
    };
    let phase_deg = c[2].atan2(c[1]).to_degrees() / 4.0;
    Ok(FringeScan { points, offset: c[0], amplitude, phase_deg, visibility, visibility_error })
}

/// Analytic fringe: coincidence probability for each signal HWP angle with the
/// signal QWP at 0 and the idler analyzer fixed.
pub fn fringe_scan_analytic(rho: &DensityMatrix, idler: &AnalyzerSetting, hwp_angles_deg: &[f64]) -> Result<FringeScan> {
    let points = hwp_angles_deg
        .iter()
        .map(|&a| FringePoint {
            angle_deg: a,
            value: coincidence_probability(rho, idler, &AnalyzerSetting::new(a, 0.0, Port::Transmit)),
            error: 0.0,
        })
        .collect();
    fit_fringe(points)
}

/// Simulated fringe: coincidence rates from one synthesized run per angle.
pub fn fringe_scan_simulated(
    base: &SourceRunConfig,
    det_s: &DetectorSpec,
    det_i: &DetectorSpec,
    idler: &AnalyzerSetting,
    hwp_angles_deg: &[f64],
    window_ps: i64,
) -> Result<FringeScan> {
    let settings: Vec<_> = hwp_angles_deg
        .iter()
        .map(|&a| (*idler, AnalyzerSetting::new(a, 0.0, Port::Transmit)))
        .collect();
    let table = measure_count_table(base, det_s, det_i, &settings, window_ps)?;
    fit_fringe(fringe_points_from_counts(&table))
}

/// Interprets each table row as one fringe point at the signal HWP angle.
pub fn fringe_points_from_counts(table: &CountTable) -> Vec<FringePoint> {
    table
        .entries
        .iter()
        .map(|e| FringePoint {
            angle_deg: e.signal.hwp_deg,
            value: e.counts as f64 / e.integration_time,
            error: (e.counts as f64).max(1.0).sqrt() / e.integration_time,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CHSH

/// Polarization angles (degrees from horizontal) of the two idler and two
/// signal measurement bases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChshAngles {
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
    pub b_prime: f64,
}

impl ChshAngles {
    /// Optimal for `(|HV⟩ + |VH⟩)/√2` with `S = E(a,b) − E(a,b′) + E(a′,b) + E(a′,b′)`.
    pub const PSI_PLUS_OPTIMAL: Self = Self { a: 0.0, a_prime: 45.0, b: 67.5, b_prime: 22.5 };

    /// The four `(idler angle, signal angle)` terms with their sign in `S`.
    pub fn terms(&self) -> [(f64, f64, f64); 4] {
        [
            (self.a, self.b, 1.0),
            (self.a, self.b_prime, -1.0),
            (self.a_prime, self.b, 1.0),
            (self.a_prime, self.b_prime, 1.0),
        ]
    }

    /// The 16 setting pairs: 4 terms × (transmit/reflect)². Analyzer HWPs at
    /// half the polarization angle.
    pub fn settings(&self) -> Vec<(AnalyzerSetting, AnalyzerSetting)> {
        let mut out = Vec::with_capacity(16);
        for (ai, bs, _) in self.terms() {
            for pi in [Port::Transmit, Port::Reflect] {
                for ps in [Port::Transmit, Port::Reflect] {
                    out.push((AnalyzerSetting::linear(ai).with_port(pi), AnalyzerSetting::linear(bs).with_port(ps)));
                }
            }
        }
        out
    }
}

impl Default for ChshAngles {
    fn default() -> Self {
        Self::PSI_PLUS_OPTIMAL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChshResult {
    pub s: f64,
    pub sigma: f64,
    /// `E` for each of the four terms, in [`ChshAngles::terms`] order.
    pub correlations: [f64; 4],
    pub correlation_errors: [f64; 4],
}

impl ChshResult {
    /// Standard deviations above the local-realist bound of 2.
    pub fn significance(&self) -> f64 {
        violation_sigmas(self.s, self.sigma)
    }
}

pub fn violation_sigmas(s: f64, sigma: f64) -> f64 {
    (s - 2.0) / sigma
}

/// `E(α, β)` for linear analyzers at polarization angles α (idler), β (signal).
pub fn correlation_analytic(rho: &DensityMatrix, alpha_deg: f64, beta_deg: f64) -> f64 {
    let mut e = 0.0;
    for pi in [Port::Transmit, Port::Reflect] {
        for ps in [Port::Transmit, Port::Reflect] {
            let i = AnalyzerSetting::linear(alpha_deg).with_port(pi);
            let s = AnalyzerSetting::linear(beta_deg).with_port(ps);
            e += pi.sign() * ps.sign() * coincidence_probability(rho, &i, &s);
        }
    }
    e
}

pub fn chsh_analytic(rho: &DensityMatrix, angles: &ChshAngles) -> f64 {
    angles.terms().iter().map(|&(a, b, sign)| sign * correlation_analytic(rho, a, b)).sum()
}

/// CHSH from measured counts. Uses rates `N/T`; `σ_S` by first-order Poisson
/// propagation through every count.
pub fn chsh_counts(table: &CountTable, angles: &ChshAngles) -> Result<ChshResult> {
    let mut s = 0.0;
    let mut var = 0.0;
    let mut correlations = [0.0; 4];
    let mut correlation_errors = [0.0; 4];
    for (t, &(a, b, sign)) in angles.terms().iter().enumerate() {
        let mut cells = Vec::with_capacity(4);
        for pi in [Port::Transmit, Port::Reflect] {
            for ps in [Port::Transmit, Port::Reflect] {
                let i = AnalyzerSetting::linear(a).with_port(pi);
                let sg = AnalyzerSetting::linear(b).with_port(ps);
                let e = table
                    .find(&i, &sg)
                    .ok_or_else(|| contract(format!("count table lacks setting ({}, {})", i.label(), sg.label())))?;
                if !(e.integration_time > 0.0) {
                    return Err(domain("integration time must be positive"));
                }
                cells.push((pi.sign() * ps.sign(), e.counts as f64, e.integration_time));
            }
        }
        let total: f64 = cells.iter().map(|(_, n, t)| n / t).sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(format!("no counts for term E({a}°, {b}°)")));
        }
        let e: f64 = cells.iter().map(|(sg, n, t)| sg * n / t).sum::<f64>() / total;
        let v: f64 = cells.iter().map(|(sg, n, t)| ((sg - e) / total).powi(2) * n / (t * t)).sum();
        correlations[t] = e;
        correlation_errors[t] = v.sqrt();
        s += sign * e;
        var += v;
    }
    Ok(ChshResult { s, sigma: var.sqrt(), correlations, correlation_errors })
}

// ---------------------------------------------------------------------------
// Tomography

/// Single-qubit Paulis `I, X, Y, Z`.
fn paulis() -> [Operator2; 4] {
    let o = Complex64::new(0.0, 0.0);
    let l = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    [
        Operator2::new(l, o, o, l),
        Operator2::new(o, l, l, o),
        Operator2::new(o, -i, i, o),
        Operator2::new(l, o, o, -l),
    ]
}

fn pauli_products() -> Vec<Operator4> {
    let p = paulis();
    p.iter().flat_map(|a| p.iter().map(move |b| kron(a, b))).collect()
}

fn entry_projector(e: &CountEntry) -> Operator4 {
    kron(&e.idler.projector(), &e.signal.projector())
}

/// Condition number above which the setting set is rejected.
const MAX_CONDITION: f64 = 1e8;

/// Linear inversion onto the two-qubit Pauli basis. The result is Hermitian
/// with unit trace but need not be positive.
pub fn tomography_linear(table: &CountTable) -> Result<Operator4> {
    table.validate()?;
    let sigmas = pauli_products();
    let m = table.entries.len();
    if m < 16 {
        return Err(Error::IllConditioned(f64::INFINITY));
    }
    let a = DMatrix::from_fn(m, 16, |k, j| (entry_projector(&table.entries[k]) * sigmas[j]).trace().re);
    let rates = DVector::from_iterator(m, table.entries.iter().map(|e| e.counts as f64 / e.integration_time));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let y = svd.solve(&rates, 0.0).map_err(|e| Error::Internal(e.to_string()))?;
    if !(y[0] > 0.0) {
        return Err(Error::Degenerate("counts carry no intensity".into()));
    }
    let mut rho = Operator4::zeros();
    for (j, s) in sigmas.iter().enumerate() {
        rho += s * Complex64::new(y[j] / (4.0 * y[0]), 0.0);
    }
    Ok(rho)
}

#[derive(Debug, Clone)]
pub struct TomographyResult {
    pub rho: DensityMatrix,
    /// Poisson log-likelihood of `rho` with the best-fitting intensity.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub linear_estimate: Operator4,
    /// `false` when the iteration cap stopped the search.
    pub converged: bool,
}

const MLE_MAX_ITERATIONS: usize = 10_000;
const MLE_REL_TOL: f64 = 1e-10;
/// Identity admixture that makes the starting point full rank.
const MLE_START_MIX: f64 = 1e-3;

struct Likelihood {
    counts: Vec<f64>,
    times: Vec<f64>,
    projectors: Vec<Operator4>,
}

impl Likelihood {
    fn new(table: &CountTable) -> Self {
        Self {
            counts: table.entries.iter().map(|e| e.counts as f64).collect(),
            times: table.entries.iter().map(|e| e.integration_time).collect(),
            projectors: table.entries.iter().map(entry_projector).collect(),
        }
    }

    fn expected(&self, m: &Operator4) -> Vec<f64> {
        self.projectors.iter().zip(&self.times).map(|(p, t)| t * (m * p).trace().re).collect()
    }

    /// `Σ n ln λ − λ` for unnormalized `M` (intensity absorbed in its trace).
    fn value(&self, m: &Operator4) -> f64 {
        let mut ll = 0.0;
        for (n, lam) in self.counts.iter().zip(self.expected(m)) {
            if *n > 0.0 {
                if !(lam > 0.0) {
                    return f64::NEG_INFINITY;
                }
                ll += n * lam.ln();
            }
            ll -= lam;
        }
        ll
    }

    /// Log-likelihood of a normalized state at its optimal intensity.
    fn profile(&self, rho: &Operator4) -> f64 {
        let n: f64 = self.counts.iter().sum();
        let lam: f64 = self.expected(rho).iter().sum();
        if !(lam > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.value(&(rho * Complex64::new(n / lam, 0.0)))
    }

    /// `G = Σ (n/λ − 1)·t·Π`, so that `dℓ = Tr(G dM)`.
    fn gradient_operator(&self, m: &Operator4) -> Operator4 {
        let mut g = Operator4::zeros();
        for ((n, t), (p, lam)) in self.counts.iter().zip(&self.times).zip(self.projectors.iter().zip(self.expected(m))) {
            let ratio = if *n > 0.0 { n / lam } else { 0.0 };
            g += p * Complex64::new((ratio - 1.0) * t, 0.0);
        }
        g
    }
}

/// Lower-triangular `L` with `M = L·L†` packed as 4 real diagonal entries
/// followed by (re, im) of the 6 strictly-lower entries.
fn unpack(x: &[f64]) -> Operator4 {
    let mut l = Operator4::zeros();
    for d in 0..4 {
        l[(d, d)] = Complex64::new(x[d], 0.0);
    }
    let mut k = 4;
    for r in 1..4 {
        for c in 0..r {
            l[(r, c)] = Complex64::new(x[k], x[k + 1]);
            k += 2;
        }
    }
    l
}

fn pack(l: &Operator4) -> Vec<f64> {
    let mut x = Vec::with_capacity(16);
    for d in 0..4 {
        x.push(l[(d, d)].re);
    }
    for r in 1..4 {
        for c in 0..r {
            x.push(l[(r, c)].re);
            x.push(l[(r, c)].im);
        }
    }
    x
}

/// Negative log-likelihood and its gradient in the packed parameters.
fn objective(lik: &Likelihood, x: &[f64]) -> (f64, Vec<f64>) {
    let l = unpack(x);
    let m = l * l.adjoint();
    let f = -lik.value(&m);
    // dℓ = 2 Re Tr(L† G dL)
    let h = l.adjoint() * lik.gradient_operator(&m);
    let mut grad = Vec::with_capacity(16);
    for d in 0..4 {
        grad.push(-2.0 * h[(d, d)].re);
    }
    for r in 1..4 {
        for c in 0..r {
            grad.push(-2.0 * h[(c, r)].re);
            grad.push(2.0 * h[(c, r)].im);
        }
    }
    (f, grad)
}

/// Maximum-likelihood state under Poisson statistics.
///
/// The state is parameterized as `ρ = T†T / Tr(T†T)` with `T` triangular and
/// the intensity absorbed into `T`. The search starts from the PSD-projected
/// linear estimate and runs BFGS with a backtracking line search until the
/// relative likelihood gain per iteration drops below 1e-10.
pub fn tomography_mle(table: &CountTable) -> Result<TomographyResult> {
    table.validate()?;
    if table.total() == 0 {
        return Err(Error::Degenerate("all counts are zero".into()));
    }
    let linear_estimate = tomography_linear(table)?;
    let projected = DensityMatrix::psd_projection(&linear_estimate)?;
    let lik = Likelihood::new(table);
    let projected_ll = lik.profile(projected.matrix());

    let n: f64 = lik.counts.iter().sum();
    let start = projected.matrix() * Complex64::new(1.0 - MLE_START_MIX, 0.0)
        + Operator4::identity() * Complex64::new(MLE_START_MIX / 4.0, 0.0);
    let intensity = n / lik.expected(&start).iter().sum::<f64>();
    let chol = (start * Complex64::new(intensity, 0.0))
        .cholesky()
        .ok_or_else(|| Error::Internal("starting point is not positive definite".into()))?;
    let mut x = pack(&chol.l());

    let (mut f, mut g) = objective(&lik, &x);
    let mut h_inv = DMatrix::<f64>::identity(16, 16);
    let mut first = true;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MLE_MAX_ITERATIONS {
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h_inv * &gv);
        let mut slope = dir.dot(&gv);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(16, 16);
            dir = -gv.clone();
            slope = dir.dot(&gv);
        }
        if first {
            // Initial step of unit relative size.
            let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dn = dir.norm();
            if dn > 0.0 {
                let s = 0.1 * xn / dn;
                dir *= s;
                slope *= s;
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            let (ft, gt) = objective(&lik, &xt);
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                accepted = Some((xt, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            converged = true;
            break;
        };
        let gain = (f - fn_) / f.abs().max(1.0);
        let s = DVector::from_iterator(16, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(16, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-300 {
            if first {
                h_inv *= sy / y.dot(&y);
            }
            let rho_k = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho_k * rho_k * yhy + rho_k) - (&hy * s.transpose() + &s * hy.transpose()) * rho_k;
        }
        first = false;
        x = xn;
        f = fn_;
        g = gn;
        if gain < MLE_REL_TOL {
            converged = true;
            break;
        }
    }

    let l = unpack(&x);
    let m = l * l.adjoint();
    let mut rho = DensityMatrix::from_matrix_normalized(m)?;
    let mut log_likelihood = lik.profile(rho.matrix());
    if log_likelihood < projected_ll {
        rho = projected;
        log_likelihood = projected_ll;
    }
    Ok(TomographyResult { rho, log_likelihood, iterations, linear_estimate, converged })
}

/// Poisson log-likelihood of a state for a count table, at the intensity that
/// maximizes it. Constant `ln n!` terms omitted.
pub fn log_likelihood(rho: &DensityMatrix, table: &CountTable) -> f64 {
    Likelihood::new(table).profile(rho.matrix())
}

/// Parametric bootstrap of the MLE fidelity: counts are resampled from the
/// MLE state's expected counts. Returns `(fidelity of the MLE, sample std)`.
pub fn fidelity_bootstrap(table: &CountTable, target: &StateVector, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    let fit = tomography_mle(table)?;
    let f0 = fidelity(&fit.rho, target)?;
    if resamples < 2 {
        return Ok((f0, 0.0));
    }
    let lik = Likelihood::new(table);
    let n: f64 = lik.counts.iter().sum();
    let expected = lik.expected(fit.rho.matrix());
    let scale = n / expected.iter().sum::<f64>();
    let samples: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(chunk_seed(seed, r as u64));
            let mut t = table.clone();
            for (e, lam) in t.entries.iter_mut().zip(&expected) {
                let mean = lam * scale;
                e.counts = if mean > 0.0 { Poisson::new(mean).map(|p| p.sample(&mut rng) as u64).unwrap_or(0) } else { 0 };
            }
            tomography_mle(&t).ok().and_then(|res| fidelity(&res.rho, target).ok())
        })
        .collect();
    if samples.len() < 2 {
        return Err(Error::Degenerate("bootstrap produced too few valid resamples".into()));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    Ok((f0, var.sqrt()))
}

// ---------------------------------------------------------------------------
// Brightness

/// Pairs per second per MHz of bandwidth per mW of pump.
pub fn brightness(rate: f64, bandwidth_mhz: f64, pump_power_mw: f64) -> Result<f64> {
    for (name, v) in [("rate", rate), ("bandwidth", bandwidth_mhz), ("pump power", pump_power_mw)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(rate / (bandwidth_mhz * pump_power_mw))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrightnessVariant {
    pub label: &'static str,
    pub bandwidth_mhz: f64,
    pub value: f64,
    pub note: &'static str,
}

/// Brightness normalized both by the single-arm bandwidth and by the average
/// bandwidth, since either may be the intended normalization.
pub fn brightness_variants(rate: f64, bandwidth_mhz: f64, average_bandwidth_mhz: f64, pump_power_mw: f64) -> Result<Vec<BrightnessVariant>> {
    Ok(vec![
        BrightnessVariant {
            label: "arm_bandwidth",
            bandwidth_mhz,
            value: brightness(rate, bandwidth_mhz, pump_power_mw)?,
            note: "normalized by the given single-arm bandwidth",
        },
        BrightnessVariant {
            label: "average_bandwidth",
            bandwidth_mhz: average_bandwidth_mhz,
            value: brightness(rate, average_bandwidth_mhz, pump_power_mw)?,
            note: "normalized by the average of the signal and idler bandwidths",
        },
    ])
}

/// Expected CHSH `S` of a Werner state `(1−p)|ψ⟩⟨ψ| + p·I/4` at optimal angles.
pub fn werner_chsh(p: f64) -> f64 {
    2.0 * 2f64.sqrt() * (1.0 - p)
}

/// Default fringe scan: signal HWP from 0° to 90° in 5° steps.
pub fn default_fringe_angles() -> Vec<f64> {
    (0..=18).map(|k| k as f64 * 5.0).collect()
}

/// Idler analyzer fixed at −45° polarization.
pub fn default_fringe_idler() -> AnalyzerSetting {
    AnalyzerSetting::linear(-45.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polarization::{apply_noise, bell_psi, bell_psi_vector, NoiseParams, HV, VH};
    use proptest::prelude::*;

    const SQRT8: f64 = 2.828_427_124_746_190_1;

    #[test]
    fn fringe_visibility_ideal_and_werner() {
        let angles = default_fringe_angles();
        let scan = fringe_scan_analytic(&bell_psi(), &default_fringe_idler(), &angles).unwrap();
        assert!((scan.visibility - 1.0).abs() < 1e-9);
        // Period 90° in HWP angle.
        let idler = default_fringe_idler();
        for p in &scan.points {
            let shifted = coincidence_probability(&bell_psi(), &idler, &AnalyzerSetting::new(p.angle_deg + 90.0, 0.0, Port::Transmit));
            assert!((shifted - p.value).abs() < 1e-12);
        }
        let w = apply_noise(&bell_psi(), &NoiseParams::white(0.25)).unwrap();
        let scan = fringe_scan_analytic(&w, &default_fringe_idler(), &angles).unwrap();
        assert!((scan.visibility - 0.75).abs() < 1e-9);
        // Direct max/min on a 0.25° grid, which contains the extrema.
        let vals: Vec<f64> = (0..360)
            .map(|k| coincidence_probability(&w, &idler, &AnalyzerSetting::new(k as f64 * 0.25, 0.0, Port::Transmit)))
            .collect();
        let (mx, mn) = vals.iter().fold((f64::MIN, f64::MAX), |(a, b), &v| (a.max(v), b.min(v)));
        assert!(((mx - mn) / (mx + mn) - 0.75).abs() < 1e-9);
    }

    #[test]
    fn fringe_fit_rejects_bad_data() {
        let pts = |vals: &[(f64, f64)]| vals.iter().map(|&(a, v)| FringePoint { angle_deg: a, value: v, error: 0.0 }).collect::<Vec<_>>();
        assert!(fit_fringe(pts(&[(0.0, 1.0), (10.0, 2.0)])).is_err());
        assert!(fit_fringe(pts(&[(0.0, 1.0), (90.0, 2.0), (180.0, 3.0)])).is_err());
        // Square wave with spikes: far from a 90° sinusoid.
        let spiky: Vec<(f64, f64)> = (0..36).map(|k| (k as f64 * 5.0, if k % 9 == 0 { 10.0 } else { 0.1 })).collect();
        assert!(fit_fringe(pts(&spiky)).is_err());
    }

    #[test]
    fn chsh_analytic_values() {
        let s = chsh_analytic(&bell_psi(), &ChshAngles::default());
        assert!((s - SQRT8).abs() < 1e-9);
        let p = 0.1387;
        let w = apply_noise(&bell_psi(), &NoiseParams::white(p)).unwrap();
        let f = fidelity(&w, &bell_psi_vector()).unwrap();
        assert!((f - 0.896).abs() < 1e-4);
        let s = chsh_analytic(&w, &ChshAngles::default());
        assert!((s - SQRT8 * (1.0 - p)).abs() < 1e-9);
        assert!((s - 2.436).abs() < 1e-3);
    }

    #[test]
    fn twelve_sigma_arithmetic() {
        assert!((violation_sigmas(2.36, 0.03) - 12.0).abs() < 1e-9);
    }

    #[test]
    fn chsh_from_exact_counts() {
        let a = ChshAngles::default();
        let table = expected_count_table(&bell_psi(), &a.settings(), 1e8);
        let r = chsh_counts(&table, &a).unwrap();
        assert!((r.s - SQRT8).abs() < 1e-6);
        assert!(r.sigma > 0.0);

        let mut zero = table.clone();
        zero.entries[..4].iter_mut().for_each(|e| e.counts = 0);
        assert!(matches!(chsh_counts(&zero, &a), Err(Error::Degenerate(_))));
        let mut missing = table;
        missing.entries.pop();
        assert!(chsh_counts(&missing, &a).is_err());
    }

    #[test]
    fn chsh_sigma_matches_binomial_formula() {
        // For one term with counts n++, n--, n+-, n-+: var(E) = (1 − E²)/N.
        let a = ChshAngles::default();
        let table = expected_count_table(&bell_psi(), &a.settings(), 1e4);
        let r = chsh_counts(&table, &a).unwrap();
        for (e, err) in r.correlations.iter().zip(r.correlation_errors) {
            let n = 1e4;
            assert!((err - ((1.0 - e * e) / n).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_tomography_round_trips() {
        let settings = tomography_settings();
        let table = expected_count_table(&bell_psi(), &settings, 8e9);
        let rho = tomography_linear(&table).unwrap();
        assert!((rho - bell_psi().matrix()).iter().all(|z| z.norm() < 1e-6));

        let mixed = expected_count_table(&DensityMatrix::maximally_mixed(), &settings, 8e9);
        let rho = tomography_linear(&mixed).unwrap();
        assert!((rho - DensityMatrix::maximally_mixed().matrix()).iter().all(|z| z.norm() < 1e-9));
    }

    #[test]
    fn linear_tomography_unit_trace_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = poisson_count_table(&bell_psi(), &tomography_settings(), 50.0, 1.0, &mut rng);
            let rho = tomography_linear(&t).unwrap();
            assert!((rho.trace() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            assert!((rho - rho.adjoint()).norm() < 1e-12);
        }
    }

    #[test]
    fn incomplete_settings_rejected() {
        let settings: Vec<_> = tomography_settings().into_iter().map(|(i, _)| (i, AnalyzerSetting::H)).collect();
        let table = expected_count_table(&bell_psi(), &settings, 1e4);
        assert!(matches!(tomography_linear(&table), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn mle_exact_bell_fidelity() {
        let table = expected_count_table(&bell_psi(), &tomography_settings(), 8e6);
        let res = tomography_mle(&table).unwrap();
        let f = fidelity(&res.rho, &bell_psi_vector()).unwrap();
        assert!((f - 1.0).abs() < 1e-6, "fidelity {f}, iterations {}", res.iterations);
        assert!(res.converged);
    }

    #[test]
    fn mle_all_zero_is_degenerate() {
        let table = expected_count_table(&bell_psi(), &tomography_settings(), 0.0);
        assert!(matches!(tomography_mle(&table), Err(Error::Degenerate(_))));
    }

    #[test]
    fn bootstrap_reports_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = apply_noise(&bell_psi(), &NoiseParams::white(0.1387)).unwrap();
        let t = poisson_count_table(&w, &tomography_settings(), 1000.0, 1.0, &mut rng);
        let (f, sd) = fidelity_bootstrap(&t, &bell_psi_vector(), 40, 3).unwrap();
        assert!((f - 0.896).abs() < 0.05);
        assert!(sd > 0.0 && sd < 0.05, "{sd}");
    }

    #[test]
    fn brightness_values() {
        assert!((brightness(5.0, 9.0, 9.0).unwrap() - 0.0617).abs() < 5e-5);
        assert!((brightness(5.0, 9.3, 9.0).unwrap() - 0.0597).abs() < 5e-5);
        assert!(brightness(0.0, 9.0, 9.0).is_err());
        assert!(brightness(5.0, -1.0, 9.0).is_err());
        let v = brightness_variants(5.0, 9.0, 9.3, 9.0).unwrap();
        assert_eq!(v.len(), 2);
    }

    prop_compose! {
        fn arb_state()(re in prop::array::uniform16(-1.0f64..1.0), im in prop::array::uniform16(-1.0f64..1.0), rank in 1usize..=4) -> DensityMatrix {
            let g = Operator4::from_fn(|r, c| if c < rank { Complex64::new(re[4 * r + c], im[4 * r + c]) } else { Complex64::new(0.0, 0.0) });
            DensityMatrix::from_matrix_normalized(g * g.adjoint()).unwrap()
        }
    }

    prop_compose! {
        fn arb_qubit()(re in prop::array::uniform4(-1.0f64..1.0), im in prop::array::uniform4(-1.0f64..1.0)) -> Operator2 {
            let g = Operator2::from_fn(|r, c| Complex64::new(re[2 * r + c], im[2 * r + c]));
            let m = g * g.adjoint();
            let tr = m.trace();
            m / tr
        }
    }

    fn arb_angles() -> impl Strategy<Value = ChshAngles> {
        prop::array::uniform4(-180.0f64..180.0).prop_map(|[a, a_prime, b, b_prime]| ChshAngles { a, a_prime, b, b_prime })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn tsirelson_bound(rho in arb_state(), angles in arb_angles()) {
            prop_assert!(chsh_analytic(&rho, &angles).abs() <= SQRT8 + 1e-9);
        }

        #[test]
        fn product_states_obey_bell_bound(a in arb_qubit(), b in arb_qubit(), angles in arb_angles()) {
            let rho = DensityMatrix::from_matrix_normalized(kron(&a, &b)).unwrap();
            prop_assert!(chsh_analytic(&rho, &angles).abs() <= 2.0 + 1e-9);
        }

        #[test]
        fn visibility_is_twice_coherence(sigma in 0.0f64..2.5, p in 0.0f64..0.9) {
            let n = NoiseParams { phase_sigma: sigma, white_noise_p: p, ..Default::default() };
            let rho = apply_noise(&bell_psi(), &n).unwrap();
            let scan = fringe_scan_analytic(&rho, &default_fringe_idler(), &default_fringe_angles()).unwrap();
            let c = rho.get(HV, VH).norm();
            prop_assert!((scan.visibility - 2.0 * c).abs() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn mle_is_physical_and_dominates(rho in arb_state(), mean in 5.0f64..2000.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table = poisson_count_table(&rho, &tomography_settings(), mean, 1.0, &mut rng);
            prop_assume!(table.total() > 0);
            let res = match tomography_mle(&table) {
                Ok(r) => r,
                Err(Error::Degenerate(_)) => return Ok(()),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            };
            prop_assert!(res.rho.validate().is_ok());
            let projected = DensityMatrix::psd_projection(&res.linear_estimate).unwrap();
            prop_assert!(res.log_likelihood >= log_likelihood(&projected, &table) - 1e-9 * res.log_likelihood.abs().max(1.0));
        }

        #[test]
        fn mle_handles_adversarial_tables(counts in prop::collection::vec(0u64..1_000_000, 16)) {
            let mut table = CountTable::default();
            for ((i, s), n) in tomography_settings().into_iter().zip(counts) {
                table.push(i, s, n, 1.0);
            }
            match tomography_mle(&table) {
                Ok(res) => prop_assert!(res.rho.validate().is_ok()),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
