//! Simulation and analysis of narrow-band, cavity-enhanced photon pair
//! sources with polarization entanglement.
//!
//! * [`polarization`]: two-qubit states, noise channels, analyzer projectors.
//! * [`spectral`]: cavity mode combs, etalon filtering, analytic `G²(τ)`.
//! * [`synth`]: Monte Carlo detector time tags.
//! * [`correlation`]: coincidence histograms, bandwidth fits, comb contrast.
//! * [`entanglement`]: fringes, CHSH, state tomography, brightness.
//! * [`io`]: run configuration, binary tag files, CSV reports.

// `!(x > 0.0)` is used throughout to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod entanglement;
pub mod error;
pub mod io;
pub mod polarization;
pub mod spectral;
pub mod synth;

pub use correlation::{CoincidenceHistogram, Side};
pub use entanglement::{ChshAngles, CountTable};
pub use error::{Error, Result};
pub use num_complex::Complex64;
pub use polarization::{AnalyzerSetting, DensityMatrix, NoiseParams, Port};
pub use spectral::{CavityArmSpec, EtalonSpec, ModeComb, PhaseMatchEnvelope};
pub use synth::{DetectorSpec, SourceRunConfig, TimeTag};
