//! Two-qubit polarization states of the idler/signal pair.
//!
//! Basis order is `|HH⟩, |HV⟩, |VH⟩, |VV⟩` with the idler (880 nm) photon in
//! the first tensor slot and the signal (935 nm) photon in the second, so the
//! index of `|p_i p_s⟩` is `2·p_i + p_s` with `H = 0`, `V = 1`.
//!
//! Polarization analyzers are modelled as a half-wave plate followed by a
//! quarter-wave plate and a polarizing beam splitter. Waveplate Jones matrices
//! use the fast axis measured counterclockwise from horizontal with the global
//! phase dropped.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Operator2 = Matrix2<Complex64>;
pub type Operator4 = Matrix4<Complex64>;
pub type StateVector = Vector4<Complex64>;

/// Tolerance for Hermiticity and unit trace.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Most negative eigenvalue accepted as rounding noise.
pub const PSD_TOL: f64 = 1e-10;

pub const HH: usize = 0;
pub const HV: usize = 1;
pub const VH: usize = 2;
pub const VV: usize = 3;

const fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// A 4×4 two-qubit density matrix that satisfies the physicality invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    elements: Operator4,
}

impl DensityMatrix {
    /// Validates `elements` as a physical state (Hermitian, unit trace, PSD).
    pub fn new(elements: Operator4) -> Result<Self> {
        let rho = Self { elements };
        rho.check()?;
        Ok(rho)
    }

    /// Wraps a matrix without validation. Intended for matrices that are
    /// physical by construction.
    pub fn from_matrix_unchecked(elements: Operator4) -> Self {
        Self { elements }
    }

    /// Hermitizes, renormalizes the trace and validates.
    pub fn from_matrix_normalized(elements: Operator4) -> Result<Self> {
        let herm = (elements + elements.adjoint()) * c(0.5);
        let tr = herm.trace().re;
        if !(tr > 0.0) || !tr.is_finite() {
            return Err(Error::Degenerate(format!("matrix trace {tr} is not positive")));
        }
        Self::new(herm / c(tr))
    }

    pub fn from_pure(psi: &StateVector) -> Result<Self> {
        let norm = psi.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(domain(format!("state vector norm {norm} is not 1")));
        }
        Ok(Self { elements: psi * psi.adjoint() })
    }

    pub fn maximally_mixed() -> Self {
        Self { elements: Operator4::identity() * c(0.25) }
    }

    pub fn matrix(&self) -> &Operator4 {
        &self.elements
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.elements[(row, col)]
    }

    pub fn trace(&self) -> Complex64 {
        self.elements.trace()
    }

    /// `Tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        (self.elements * self.elements).trace().re
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let ev = self.elements.symmetric_eigenvalues();
        let mut out = [ev[0], ev[1], ev[2], ev[3]];
        out.sort_by(f64::total_cmp);
        out
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    /// Largest element of `|ρ − ρ†|`.
    pub fn hermiticity_defect(&self) -> f64 {
        (self.elements - self.elements.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        if self.elements.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Internal("density matrix has non-finite elements".into()));
        }
        let herm = self.hermiticity_defect();
        if herm > HERMITIAN_TOL {
            return Err(Error::Internal(format!("density matrix not Hermitian (defect {herm:.3e})")));
        }
        let tr = self.trace();
        if (tr - c(1.0)).norm() > HERMITIAN_TOL {
            return Err(Error::Internal(format!("density matrix trace {tr} is not 1")));
        }
        let min_ev = self.min_eigenvalue();
        if min_ev < -PSD_TOL {
            return Err(Error::Internal(format!("density matrix not PSD (min eigenvalue {min_ev:.3e})")));
        }
        Ok(())
    }

    /// Re-checks the invariants; useful after deserializing external data.
    pub fn validate(&self) -> Result<()> {
        self.check()
    }

    /// Closest PSD matrix in the eigenbasis: negative eigenvalues clamped to
    /// zero and the trace renormalized.
    pub fn psd_projection(raw: &Operator4) -> Result<Self> {
        let herm = (raw + raw.adjoint()) * c(0.5);
        let eig = herm.symmetric_eigen();
        let mut vals = eig.eigenvalues.map(|v| v.max(0.0));
        let total: f64 = vals.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("no positive eigenvalues to project onto".into()));
        }
        vals /= total;
        let diag = Operator4::from_diagonal(&vals.map(c));
        let m = eig.eigenvectors * diag * eig.eigenvectors.adjoint();
        // Re-symmetrize against rounding in the reconstruction.
        let m = (m + m.adjoint()) * c(0.5);
        let tr = m.trace().re;
        Self::new(m / c(tr))
    }
}

/// `(|HV⟩ + |VH⟩)/√2`: horizontal idler with vertical signal plus the swap.
pub fn bell_psi_vector() -> StateVector {
    let a = c(std::f64::consts::FRAC_1_SQRT_2);
    Vector4::new(c(0.0), a, a, c(0.0))
}

pub fn bell_psi() -> DensityMatrix {
    DensityMatrix::from_pure(&bell_psi_vector()).expect("normalized by construction")
}

/// Imperfections of the source: relative-phase jitter, residual local
/// polarization rotations, and unpolarized background.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub phase_sigma: f64,
    pub rot_signal: f64,
    pub rot_idler: f64,
    pub white_noise_p: f64,
}

impl NoiseParams {
    pub fn white(p: f64) -> Self {
        Self { white_noise_p: p, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phase_sigma >= 0.0) || !self.phase_sigma.is_finite() {
            return Err(domain(format!("phase_sigma must be finite and ≥ 0, got {}", self.phase_sigma)));
        }
        if !(0.0..=1.0).contains(&self.white_noise_p) {
            return Err(domain(format!("white_noise_p must lie in [0, 1], got {}", self.white_noise_p)));
        }
        if !self.rot_signal.is_finite() || !self.rot_idler.is_finite() {
            return Err(domain("rotation angles must be finite"));
        }
        Ok(())
    }
}

/// Real rotation of the polarization plane by `theta` radians.
pub fn rotation(theta: f64) -> Operator2 {
    let (s, co) = theta.sin_cos();
    Matrix2::new(c(co), c(-s), c(s), c(co))
}

/// Kronecker product with `a` in the idler slot.
pub fn kron(a: &Operator2, b: &Operator2) -> Operator4 {
    Operator4::from_fn(|r, col| a[(r / 2, col / 2)] * b[(r % 2, col % 2)])
}

/// Applies, in order, the local rotation `R(rot_idler) ⊗ R(rot_signal)`,
/// Gaussian dephasing of the `|HV⟩⟨VH|` coherence and white-noise mixing.
/// On the Bell state the dephasing scales only that coherence, by
/// `exp(−σ²/2)`.
pub fn apply_noise(rho: &DensityMatrix, noise: &NoiseParams) -> Result<DensityMatrix> {
    noise.validate()?;
    let u = kron(&rotation(noise.rot_idler), &rotation(noise.rot_signal));
    let mut m = u * rho.matrix() * u.adjoint();

    // Gaussian phase on the idler's V component: damps every coherence
    // between terms with different idler polarization, including HV/VH.
    let damp = (-0.5 * noise.phase_sigma * noise.phase_sigma).exp();
    for r in 0..4 {
        for col in 0..4 {
            if r / 2 != col / 2 {
                m[(r, col)] *= damp;
            }
        }
    }

    let p = noise.white_noise_p;
    let m = m * c(1.0 - p) + Operator4::identity() * c(p / 4.0);
    let m = (m + m.adjoint()) * c(0.5);
    let tr = m.trace().re;
    DensityMatrix::new(m / c(tr))
}

/// `⟨ψ|ρ|ψ⟩`, clamped to `[0, 1]`.
pub fn fidelity(rho: &DensityMatrix, target: &StateVector) -> Result<f64> {
    let norm = target.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(domain(format!("target state norm {norm} is not 1")));
    }
    let f = (target.adjoint() * rho.matrix() * target)[(0, 0)].re;
    Ok(f.clamp(0.0, 1.0))
}

/// Half-wave plate with fast axis at `theta` radians.
pub fn hwp(theta: f64) -> Operator2 {
    let (s, co) = (2.0 * theta).sin_cos();
    Matrix2::new(c(co), c(s), c(s), c(-co))
}

/// Quarter-wave plate with fast axis at `theta` radians.
pub fn qwp(theta: f64) -> Operator2 {
    let (s, co) = theta.sin_cos();
    let i = Complex64::i();
    let off = (c(1.0) - i) * s * co;
    Matrix2::new(c(co * co) + i * s * s, off, off, c(s * s) + i * co * co)
}

/// Which output of the analyzer's polarizing beam splitter is detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Port {
    Transmit,
    Reflect,
}

impl Port {
    pub fn flipped(self) -> Self {
        match self {
            Port::Transmit => Port::Reflect,
            Port::Reflect => Port::Transmit,
        }
    }

    /// `+1` for the transmitted port, `−1` for the reflected one.
    pub fn sign(self) -> f64 {
        match self {
            Port::Transmit => 1.0,
            Port::Reflect => -1.0,
        }
    }
}

/// Projector measured by an analyzer with the light passing the HWP, then the
/// QWP, then the PBS. Angles in degrees.
///
/// For the transmitted port this is `M†|H⟩⟨H|M` with `M = QWP(qwp)·HWP(hwp)`.
pub fn analyzer_projector(hwp_deg: f64, qwp_deg: f64, port: Port) -> Operator2 {
    let m = qwp(qwp_deg.to_radians()) * hwp(hwp_deg.to_radians());
    let out = match port {
        Port::Transmit => Vector2::new(c(1.0), c(0.0)),
        Port::Reflect => Vector2::new(c(0.0), c(1.0)),
    };
    let v = m.adjoint() * out;
    v * v.adjoint()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSetting {
    pub hwp_deg: f64,
    pub qwp_deg: f64,
    pub port: Port,
}

impl AnalyzerSetting {
    pub const fn new(hwp_deg: f64, qwp_deg: f64, port: Port) -> Self {
        Self { hwp_deg, qwp_deg, port }
    }

    /// Linear polarizer at `angle_deg` from horizontal (HWP at half the angle).
    pub fn linear(angle_deg: f64) -> Self {
        Self::new(angle_deg / 2.0, 0.0, Port::Transmit)
    }

    pub const H: Self = Self::new(0.0, 0.0, Port::Transmit);
    pub const V: Self = Self::new(45.0, 0.0, Port::Transmit);
    pub const D: Self = Self::new(22.5, 0.0, Port::Transmit);
    pub const A: Self = Self::new(-22.5, 0.0, Port::Transmit);
    /// `(|H⟩ − i|V⟩)/√2`
    pub const R: Self = Self::new(0.0, 45.0, Port::Transmit);
    /// `(|H⟩ + i|V⟩)/√2`
    pub const L: Self = Self::new(0.0, -45.0, Port::Transmit);

    pub fn with_port(self, port: Port) -> Self {
        Self { port, ..self }
    }

    pub fn projector(&self) -> Operator2 {
        analyzer_projector(self.hwp_deg, self.qwp_deg, self.port)
    }

    /// Short label: one of `H V D A R L` for the named settings, otherwise
    /// `hwp:qwp:t|r`.
    pub fn label(&self) -> String {
        for (name, s) in NAMED_SETTINGS {
            if s == self {
                return (*name).to_string();
            }
        }
        let p = match self.port {
            Port::Transmit => 't',
            Port::Reflect => 'r',
        };
        format!("{}:{}:{}", self.hwp_deg, self.qwp_deg, p)
    }

    pub fn parse_label(label: &str) -> Result<Self> {
        let label = label.trim();
        if let Some((_, s)) = NAMED_SETTINGS.iter().find(|(n, _)| *n == label) {
            return Ok(*s);
        }
        let parts: Vec<&str> = label.split(':').collect();
        let bad = || domain(format!("unrecognized analyzer setting `{label}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let hwp_deg: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let qwp_deg: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let port = match parts[2].trim() {
            "t" | "transmit" => Port::Transmit,
            "r" | "reflect" => Port::Reflect,
            _ => return Err(bad()),
        };
        Ok(Self::new(hwp_deg, qwp_deg, port))
    }
}

const NAMED_SETTINGS: &[(&str, AnalyzerSetting)] = &[
    ("H", AnalyzerSetting::H),
    ("V", AnalyzerSetting::V),
    ("D", AnalyzerSetting::D),
    ("A", AnalyzerSetting::A),
    ("R", AnalyzerSetting::R),
    ("L", AnalyzerSetting::L),
];

/// `Tr(ρ · Π_idler ⊗ Π_signal)`.
pub fn coincidence_probability(rho: &DensityMatrix, idler: &AnalyzerSetting, signal: &AnalyzerSetting) -> f64 {
    projector_probability(rho, &kron(&idler.projector(), &signal.projector()))
}

pub(crate) fn projector_probability(rho: &DensityMatrix, proj: &Operator4) -> f64 {
    (rho.matrix() * proj).trace().re.clamp(0.0, 1.0)
}
