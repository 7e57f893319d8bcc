//! Shared inputs for the benchmarks.

use evtf::backbone::prepare_input;
use evtf::events::{synth_dataset, NormalizedEvents};

/// One synthetic recording of `n` events, normalised for the backbone.
pub fn recording(n: usize, seed: u64) -> NormalizedEvents {
    prepare_input(&synth_dataset(1, 1, n, seed)[0].stream).expect("synthetic streams are valid")
}
