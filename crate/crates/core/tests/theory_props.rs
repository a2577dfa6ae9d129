mod common;

use common::*;
use ggcnlab::theory::{
    gamma_developing, gamma_initial, gamma_row_normalized, gamma_signed, in_interval,
    variance_factor, verify_propagation, ClassFeatureModel, NeighborClasses,
};
use ggcnlab::{build_graph, Scheme};
use proptest::prelude::*;

proptest! {
    #[test]
    fn variance_factor_at_most_half(g in arb_connected_graph(30)) {
        for i in 0..g.num_nodes() {
            let v = variance_factor(&g, i).unwrap();
            let pair_of_leaves = g.degree(i) == 1 && g.degree(g.neighbors(i)[0]) == 1;
            prop_assert!(v <= 0.5 + 1e-15, "node {i}: {v}");
            prop_assert_eq!((v - 0.5).abs() < 1e-15, pair_of_leaves);
        }
    }

    #[test]
    fn coin_flip_signs_keep_only_the_self_loop(d in 1..200u32, rbar in 0.05..5.0f64) {
        let (g, _) = gamma_signed(0.5, d as f64, rbar).unwrap();
        prop_assert!((g - 1.0 / (d as f64 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn row_normalized_drift_never_expands(h in 0.0..=1.0f64, d in 1..200u32) {
        let (g, _) = gamma_row_normalized(h, d as f64).unwrap();
        prop_assert!(g <= 1.0 + 1e-15);
        let want = ((2.0 * h - 1.0) * d as f64 + 1.0) / (d as f64 + 1.0);
        prop_assert!((g - want).abs() < 1e-14);
    }

    #[test]
    fn row_normalized_drift_is_one_only_at_full_homophily(k in 0..20u32, d in 1..50u32) {
        // Every reachable homophily for degree d, h = k/d.
        let d_f = d as f64;
        let h = (k.min(d)) as f64 / d_f;
        let (g, _) = gamma_row_normalized(h, d_f).unwrap();
        prop_assert_eq!((g - 1.0).abs() < 1e-15, k >= d);
    }

    #[test]
    fn low_effective_homophily_drift_falls_with_degree(
        h_eff in 0.0..=0.5f64,
        d in 1..100u32,
        rbar in 1.0..4.0f64,
        prev in 0.01..2.0f64,
    ) {
        let a = gamma_developing(h_eff, d as f64, rbar, prev).unwrap();
        let b = gamma_developing(h_eff, d as f64 + 1.0, rbar, prev).unwrap();
        prop_assert!(b <= a + 1e-15, "d={d}: {a} -> {b}");
    }

    #[test]
    fn regime_matches_degree_aware_interval(
        h in 0.0..=1.0f64,
        d in 1..100u32,
        rbar in 0.05..4.0f64,
    ) {
        let (g, case) = gamma_initial(h, d as f64, rbar).unwrap();
        prop_assert!(in_interval(g, case.interval_for_degree(d as f64)), "{g} {case:?}");
    }

    #[test]
    fn signed_regime_matches_degree_aware_interval(
        e in 0.0..=1.0f64,
        d in 1..100u32,
        rbar in 0.05..4.0f64,
    ) {
        let (g, case) = gamma_signed(e, d as f64, rbar).unwrap();
        prop_assert!(in_interval(g, case.interval_for_degree(d as f64)), "{g} {case:?}");
    }

    #[test]
    fn signed_drift_mirrors_homophily_drift(e in 0.0..=1.0f64, d in 1..50u32, rbar in 0.1..3.0f64) {
        let (s, _) = gamma_signed(e, d as f64, rbar).unwrap();
        let (h, _) = gamma_initial(1.0 - e, d as f64, rbar).unwrap();
        prop_assert!((s - h).abs() < 1e-14);
    }
}

#[test]
fn row_normalized_sampling_matches_closed_form_on_irregular_graphs() {
    let model = ClassFeatureModel::new(vec![1.0, -0.5], vec![1.0, 0.5]).unwrap();
    for seed in 0..4 {
        let mut r = rng(seed);
        let g = random_connected_graph(30, 30, &mut r);
        assert!(!g.is_regular());
        let labels: Vec<usize> = (0..30).map(|i| (i * 7 + seed as usize) % 3 % 2).collect();
        let checks = verify_propagation(
            &g,
            &labels,
            &model,
            Scheme::RowNormalized,
            NeighborClasses::Fixed,
            20_000,
            seed,
        )
        .unwrap();
        for c in checks {
            assert!(c.max_z <= 4.5, "seed {seed} node {}: z = {}", c.node, c.max_z);
            assert!(c.variance_max_rel_err < 0.06, "node {}: {}", c.node, c.variance_max_rel_err);
        }
    }
}

#[test]
fn renormalized_variance_factor_matches_squared_weights() {
    let g = build_graph([(0, 1), (0, 2), (0, 3), (3, 4), (4, 5), (5, 3)], 6).unwrap();
    let a = g.normalize(Scheme::Renormalized).matrix;
    for i in 0..6 {
        let sq: f64 = a.row(i).iter().map(|w| w * w).sum();
        assert!((variance_factor(&g, i).unwrap() - sq).abs() < 1e-15);
    }
}
