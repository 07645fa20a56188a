use dapc::geometry::{
    chamfer_distance, farthest_point_sample, knn_indices, lexicographic_min_index,
    unidirectional_chamfer, unidirectional_hausdorff, Point3,
};
use dapc::vpc::{
    consistency_score, harvest_pseudo_labels, update_threshold, vote_mean, Candidate,
    PseudoLabelStore,
};
use dapc::PointCloud;
use proptest::prelude::*;

fn point() -> impl Strategy<Value = Point3> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(point(), 1..=max)
}

fn shift(c: &[Point3], t: Point3) -> Vec<Point3> {
    c.iter()
        .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chamfer_is_symmetric_nonnegative_and_zero_on_self(a in cloud(40), b in cloud(40)) {
        let ab = chamfer_distance(&a, &b).unwrap().raw;
        let ba = chamfer_distance(&b, &a).unwrap().raw;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap().raw, 0.0);
    }

    #[test]
    fn metrics_are_translation_invariant(a in cloud(30), b in cloud(30), t in point()) {
        let (sa, sb) = (shift(&a, t), shift(&b, t));
        let pairs = [
            (chamfer_distance(&a, &b).unwrap().raw, chamfer_distance(&sa, &sb).unwrap().raw),
            (unidirectional_chamfer(&a, &b).unwrap().raw, unidirectional_chamfer(&sa, &sb).unwrap().raw),
            (unidirectional_hausdorff(&a, &b).unwrap().raw, unidirectional_hausdorff(&sa, &sb).unwrap().raw),
        ];
        for (x, y) in pairs {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }

    #[test]
    fn hausdorff_bounds_the_one_sided_chamfer(a in cloud(30), b in cloud(30)) {
        let ucd = unidirectional_chamfer(&a, &b).unwrap().raw;
        let uhd = unidirectional_hausdorff(&a, &b).unwrap().raw;
        prop_assert!(uhd * uhd >= ucd - 1e-12);
        // a prediction containing the partial scores zero on both
        let mut sup = b.clone();
        sup.extend_from_slice(&a);
        prop_assert_eq!(unidirectional_chamfer(&a, &sup).unwrap().raw, 0.0);
        prop_assert_eq!(unidirectional_hausdorff(&a, &sup).unwrap().raw, 0.0);
    }

    #[test]
    fn fps_returns_distinct_indices_from_the_seed(a in cloud(40), frac in 0.0..1.0f64) {
        let k = 1 + ((a.len() - 1) as f64 * frac) as usize;
        let seed = lexicographic_min_index(&a);
        let idx = farthest_point_sample(&a, k, seed).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert_eq!(idx[0], seed);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn knn_is_sorted_by_distance(a in cloud(30), q in cloud(5), frac in 0.0..1.0f64) {
        let k = 1 + ((a.len() - 1) as f64 * frac) as usize;
        let rows = knn_indices(&a, &q, k).unwrap();
        for (row, &qp) in rows.iter().zip(&q) {
            let d: Vec<f64> = row.iter().map(|&i| dapc::geometry::dist2(a[i], qp)).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            let kth = d[k - 1];
            prop_assert!(a.iter().filter(|&&p| dapc::geometry::dist2(p, qp) < kth).count() < k);
        }
    }

    #[test]
    fn vote_mean_is_the_slotwise_average(layers in prop::collection::vec(prop::collection::vec(point(), 5), 1..5)) {
        let refs: Vec<&[Point3]> = layers.iter().map(Vec::as_slice).collect();
        let m = vote_mean(&refs).unwrap();
        for (j, mp) in m.iter().enumerate() {
            for k in 0..3 {
                let avg = layers.iter().map(|l| l[j][k]).sum::<f64>() / layers.len() as f64;
                prop_assert!((mp[k] - avg).abs() <= 1e-12);
            }
        }
        prop_assert!(consistency_score(&refs).unwrap() >= 0.0);
    }

    #[test]
    fn harvest_takes_exactly_the_scores_at_or_below_tau(
        scores in prop::collection::vec(0.0..10.0f64, 1..40),
        p in 0.0..=100.0f64,
    ) {
        let tau = update_threshold(&scores, p).unwrap();
        let cands = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Candidate {
                id: format!("t{i}"),
                score,
                cloud: PointCloud::new(vec![[score, 0.0, 0.0]]).unwrap(),
            })
            .collect();
        let mut store = PseudoLabelStore::new();
        let n = harvest_pseudo_labels(cands, tau, 3, &mut store);
        prop_assert_eq!(n, scores.iter().filter(|&&s| s <= tau).count());
        prop_assert_eq!(store.len(), n);
        // the percentile never falls below the share it promises
        let share = n as f64 / scores.len() as f64;
        prop_assert!(share * 100.0 + 100.0 / scores.len() as f64 >= p - 1e-9);
    }
}
