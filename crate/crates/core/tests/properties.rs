use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rankmix_core::io::round_sig12;
use rankmix_core::model::{sample_dirichlet, VariationalParams};
use rankmix_core::plackett_luce::{pl_log_mass, Ranking, SupportVector};
use rankmix_core::{compute_elbo, generate_dataset, run_estep, EStepConfig, ModelParams};

/// Every ordered selection of `levels` distinct items out of `n`.
fn selections(n: usize, levels: usize) -> Vec<Vec<usize>> {
    if levels == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for prefix in selections(n, levels - 1) {
        for v in (0..n).filter(|v| !prefix.contains(v)) {
            let mut next = prefix.clone();
            next.push(v);
            out.push(next);
        }
    }
    out
}

fn support() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 2..=5)
}

proptest! {
    #[test]
    fn partial_ranking_masses_sum_to_one(weights in support(), cut in 0usize..5) {
        let theta = SupportVector::normalized(weights).unwrap();
        let n = theta.len();
        let levels = 1 + cut % n;
        let total: f64 = selections(n, levels)
            .into_iter()
            .map(|items| pl_log_mass(&theta, &Ranking::new(items, n).unwrap()).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "total {}", total);
    }

    #[test]
    fn one_based_round_trip(items in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(), len in 1usize..=6) {
        let ranking = Ranking::new(items[..len].to_vec(), 6).unwrap();
        prop_assert_eq!(Ranking::from_one_based(&ranking.to_one_based(), 6).unwrap(), ranking);
    }

    #[test]
    fn rounding_keeps_twelve_digits(x in prop::num::f64::NORMAL) {
        let r = round_sig12(x);
        prop_assert!(((r - x) / x).abs() <= 5e-12);
        prop_assert_eq!(round_sig12(r), r);
    }

    #[test]
    fn estep_never_lowers_the_bound(seed in any::<u64>(), k in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = [4usize, 3]
            .iter()
            .map(|&v| (0..k).map(|_| SupportVector::normalized(sample_dirichlet(&vec![1.5; v], &mut rng).unwrap()).unwrap()).collect())
            .collect();
        let params = ModelParams::new(vec![0.7; k], theta, vec![false; k]).unwrap();
        let data = generate_dataset(&params, 15, &[2, 2], &mut rng).unwrap().data;
        let var = VariationalParams::uniform(&data, k);
        let before = compute_elbo(&data, &params, &var).unwrap();
        let out = run_estep(&data, &params, var, &EStepConfig::default()).unwrap();
        prop_assert!(out.elbo >= before - 1e-10);
        prop_assert!(out.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
    }
}
