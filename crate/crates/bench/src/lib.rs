//! Fixtures shared by the benchmarks.

use rankmix_core::{ModelParams, RankDataset, SupportVector};

/// Two well-separated subgroups over variables with 7 and 5 alternatives.
pub fn reference_params() -> ModelParams {
    let sv = |w: &[f64]| SupportVector::normalized(w.to_vec()).unwrap();
    ModelParams::new(
        vec![0.4, 0.3],
        vec![
            vec![sv(&[8.0, 4.0, 2.0, 1.0, 1.0, 1.0, 1.0]), sv(&[1.0, 1.0, 1.0, 1.0, 2.0, 4.0, 8.0])],
            vec![sv(&[6.0, 3.0, 1.0, 1.0, 1.0]), sv(&[1.0, 1.0, 1.0, 3.0, 6.0])],
        ],
        vec![false, false],
    )
    .unwrap()
}

pub fn reference_data(n_individuals: usize, seed: u64) -> RankDataset {
    let mut rng = rankmix_core::rng::stream_rng(seed, 0);
    rankmix_core::generate_dataset(&reference_params(), n_individuals, &[3, 2], &mut rng).unwrap().data
}
