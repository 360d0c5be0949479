mod common;

use common::{brute_aggregation, brute_coherency, brute_crps};
use coreg::data::{scale_global_max, SeriesPanel};
use coreg::hierarchy::{build_aggregation, coherency, projection_matrix, HierarchySpec};
use coreg::losses::{coherency_bound, core_regularizer_value, row_coherency, FinalLinearLayer};
use coreg::metrics::crps_empirical;
use coreg::numerics::Tensor;
use proptest::prelude::*;

/// Random rooted tree: node `i > 0` hangs under one of the nodes before it.
fn tree() -> impl Strategy<Value = (HierarchySpec, Vec<Option<usize>>)> {
    prop::collection::vec(any::<u32>(), 1..14).prop_map(|picks| {
        let mut parents = vec![None];
        for (i, p) in picks.iter().enumerate() {
            parents.push(Some(*p as usize % (i + 1)));
        }
        let ids = (0..parents.len()).map(|i| format!("n{i}")).collect();
        (HierarchySpec::from_parents(ids, parents.clone()).unwrap(), parents)
    })
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregation_matches_parent_walk_and_is_idempotent((spec, parents) in tree()) {
        let a = build_aggregation(&spec).unwrap();
        let brute = brute_aggregation(&parents);
        for (i, row) in brute.iter().enumerate() {
            prop_assert_eq!(a.entries().row(i), row.as_slice());
        }
        prop_assert_eq!(a.entries().matmul(a.entries()).unwrap(), a.entries().clone());
        for &l in a.leaf_indices() {
            for j in 0..a.dim() {
                prop_assert_eq!(a.entries().get(l, j), if j == l { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn aggregated_vectors_are_coherent(
        (spec, parents) in tree(),
        seed in values(16),
    ) {
        let a = build_aggregation(&spec).unwrap();
        let y = &seed[..spec.len()];
        let ay = a.apply(y).unwrap();
        prop_assert!(coherency(&ay, &a).unwrap() <= 1e-10 * norm(y).max(f64::MIN_POSITIVE));
        let brute = brute_coherency(&brute_aggregation(&parents), y);
        prop_assert!((coherency(y, &a).unwrap() - brute).abs() <= 1e-12 * brute.max(1.0));
    }

    #[test]
    fn projection_is_an_orthogonal_projector_onto_coherent_space(
        (spec, _) in tree(),
        seed in values(16),
    ) {
        let a = build_aggregation(&spec).unwrap();
        let p = projection_matrix(&a.summing()).unwrap();
        prop_assert!(p.max_abs_diff(&p.transpose()) <= 1e-10);
        prop_assert!(p.matmul(&p).unwrap().max_abs_diff(&p) <= 1e-10);
        let y = &seed[..spec.len()];
        let py = p.matvec(y).unwrap();
        prop_assert!(coherency(&py, &a).unwrap() <= 1e-8 * norm(y).max(f64::MIN_POSITIVE));
        // Coherent vectors are fixed points.
        let ay = a.apply(y).unwrap();
        let pay = p.matvec(&ay).unwrap();
        for (u, v) in ay.iter().zip(&pay) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn regularizer_ignores_coherent_shifts(
        (spec, _) in tree(),
        w in values(16 * 3),
        delta in values(16 * 3),
    ) {
        let a = build_aggregation(&spec).unwrap();
        let m = spec.len();
        let s = a.summing();
        let b = s.entries().cols();
        let layer = FinalLinearLayer::new(
            Tensor::from_vec(m, 3, w[..m * 3].to_vec()).unwrap(),
            vec![0.5; m],
        ).unwrap();
        let shift = s.entries().matmul(&Tensor::from_vec(b, 3, delta[..b * 3].to_vec()).unwrap()).unwrap();
        let shifted = FinalLinearLayer::new(layer.weight.add(&shift).unwrap(), layer.bias.clone()).unwrap();
        let before = core_regularizer_value(&layer, &a).unwrap();
        let after = core_regularizer_value(&shifted, &a).unwrap();
        prop_assert!((before - after).abs() <= 1e-10 * before.max(1.0));
    }

    #[test]
    fn coherency_bound_holds_per_row(
        (spec, _) in tree(),
        w in values(16 * 4),
        b in values(16),
        z in values(5 * 4),
    ) {
        let a = build_aggregation(&spec).unwrap();
        let m = spec.len();
        let layer = FinalLinearLayer::new(
            Tensor::from_vec(m, 4, w[..m * 4].to_vec()).unwrap(),
            b[..m].to_vec(),
        ).unwrap();
        let z = Tensor::from_vec(5, 4, z).unwrap();
        let y = layer.forward(&z).unwrap();
        let bounds = coherency_bound(&layer, &a, &z).unwrap();
        for (c, bound) in row_coherency(&y, &a).unwrap().iter().zip(&bounds) {
            prop_assert!(*c <= bound * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn crps_matches_definition_and_is_bounded(
        samples in prop::collection::vec(-5.0f64..5.0, 1..12),
        y in -5.0f64..5.0,
    ) {
        let c = crps_empirical(&samples, y).unwrap();
        let brute = brute_crps(&samples, y);
        prop_assert!((c - brute.max(0.0)).abs() <= 1e-12);
        let mean_abs = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / samples.len() as f64;
        prop_assert!(c >= 0.0);
        prop_assert!(c <= mean_abs + 1e-12);
    }

    #[test]
    fn scaling_commutes_with_aggregation(
        (spec, _) in tree(),
        raw in prop::collection::vec(0.0f64..100.0, 16 * 4),
    ) {
        let a = build_aggregation(&spec).unwrap();
        let m = spec.len();
        let mut data = raw[..m * 4].to_vec();
        data[0] = 150.0;
        let panel = SeriesPanel::new(Tensor::from_vec(m, 4, data).unwrap(), spec.node_ids().to_vec()).unwrap();
        let scaled = scale_global_max(&panel).unwrap();
        prop_assert_eq!(scaled.scale_factor, 150.0);
        let agg_raw = a.entries().matmul(&panel.values).unwrap();
        let agg_scaled = a.entries().matmul(&scaled.values).unwrap();
        prop_assert!(agg_scaled.max_abs_diff(&agg_raw.scale(1.0 / 150.0)) <= 1e-12);
        prop_assert!(scaled.unscale().values.max_abs_diff(&panel.values) <= 1e-12);
    }
}
