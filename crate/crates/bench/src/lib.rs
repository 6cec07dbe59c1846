//! Fixtures shared by the pipeline benchmarks.

use pairlab::entanglement::{poisson_count_table, tomography_settings};
use pairlab::polarization::{apply_noise, bell_psi, NoiseParams};
use pairlab::{CountTable, ModeComb, SourceRunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Single-mode 9 / 9.5 MHz source emitting `pairs` pairs in one second.
pub fn single_mode_source(pairs: f64) -> SourceRunConfig {
    SourceRunConfig {
        pair_rate: pairs,
        state: bell_psi(),
        signal_comb: ModeComb::single(0.0, 9e6).expect("valid linewidth"),
        idler_comb: ModeComb::single(0.0, 9.5e6).expect("valid linewidth"),
        analyzer_idler: None,
        analyzer_signal: None,
        duration: 1.0,
        rng_seed: 1,
    }
}

/// 16-setting table from a noisy Bell state with about `total` counts.
pub fn tomography_table(total: f64) -> CountTable {
    let rho = apply_noise(&bell_psi(), &NoiseParams::white(0.1387)).expect("valid noise");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    poisson_count_table(&rho, &tomography_settings(), total / 4.0, 1.0, &mut rng)
}
