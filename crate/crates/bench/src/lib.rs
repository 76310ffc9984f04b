//! Shared fixtures for the estimator benchmarks.

use selsieve_core::dgp::{builtin_spec, draw_sample, BuiltinDgp, SimDataset};
use selsieve_core::RngStream;

/// One deterministic draw of a built-in design at the given size.
pub fn fixture(dgp: BuiltinDgp, n: usize, seed: u64) -> SimDataset {
    let mut spec = builtin_spec(dgp);
    spec.n = n;
    let mut rng = RngStream::from_seed(seed);
    draw_sample(&spec, &mut rng).expect("fixture draw")
}
