use mobiseq::clusterer::{
    assignment_cost, average_silhouette, extract_medoids, pam_cluster, select_k, ClusterError,
};
use mobiseq::spellseq::DissimilarityMatrix;
use proptest::prelude::*;

fn line(points: &[f64]) -> DissimilarityMatrix {
    DissimilarityMatrix::from_fn(points.len(), |i, j| (points[i] - points[j]).abs())
}

fn arb_instance() -> impl Strategy<Value = (DissimilarityMatrix, usize)> {
    (3usize..14)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), n),
                prop::collection::vec(0u32..4, n),
                1usize..4,
            )
        })
        .prop_map(|(pts, wexp, k)| {
            let n = pts.len();
            let d = DissimilarityMatrix::from_fn(n, |i, j| {
                ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
            });
            let w = wexp.iter().map(|&e| 2f64.powi(e as i32)).collect();
            (d.with_weights(w), k.min(n))
        })
}

proptest! {
    #[test]
    fn converged_pam_invariants((d, k) in arb_instance()) {
        let c = pam_cluster(&d, k).unwrap();
        let n = d.n();
        // nearest-medoid assignment, ties to the lowest medoid position
        for j in 0..n {
            let best = c.medoids.iter().map(|&m| d.get(j, m)).fold(f64::INFINITY, f64::min);
            let first = c.medoids.iter().position(|&m| d.get(j, m) == best).unwrap();
            prop_assert_eq!(c.assignment[j], first);
        }
        prop_assert!((c.total_cost - assignment_cost(&d, &c.medoids)).abs() < 1e-9);
        prop_assert!(c.total_cost <= c.build_cost);
        // no single swap improves the cost
        for pos in 0..k {
            for h in (0..n).filter(|h| !c.medoids.contains(h)) {
                let mut m = c.medoids.clone();
                m[pos] = h;
                prop_assert!(assignment_cost(&d, &m) >= c.total_cost - 1e-9);
            }
        }
    }

    #[test]
    fn duplicating_and_halving_weight_is_invariant((d, k) in arb_instance(), pick in 0usize..14) {
        let n = d.n();
        let i = pick % n;
        let src = |a: usize| if a == n { i } else { a };
        let d2 = DissimilarityMatrix::from_fn(n + 1, |a, b| d.get(src(a), src(b)));
        let mut w = d.weights.clone();
        w[i] /= 2.0;
        w.push(w[i]);
        let d2 = d2.with_weights(w);
        let a = pam_cluster(&d, k).unwrap();
        let b = pam_cluster(&d2, k).unwrap();
        prop_assert!((a.total_cost - b.total_cost).abs() < 1e-9 * (1.0 + a.total_cost));
        let mut mapped: Vec<usize> = b.medoids.iter().map(|&m| src(m)).collect();
        mapped.sort_unstable();
        mapped.dedup();
        // a different set is only acceptable as an exact cost tie
        if mapped != a.medoids {
            prop_assert_eq!(mapped.len(), k);
            prop_assert!((assignment_cost(&d, &mapped) - a.total_cost).abs() < 1e-9 * (1.0 + a.total_cost));
        }
    }

    #[test]
    fn silhouette_in_range((d, k) in arb_instance()) {
        prop_assume!(k >= 2);
        let c = pam_cluster(&d, k).unwrap();
        let s = average_silhouette(&d, &c).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn documented_examples() {
    let d = line(&[0.0, 1.0, 5.0]);
    let c = pam_cluster(&d, 3).unwrap();
    assert_eq!(c.total_cost, 0.0);

    let d = line(&[0.0, 4.0]);
    let c = pam_cluster(&d, 1).unwrap();
    assert_eq!(c.medoids, vec![0]);
    assert_eq!(c.total_cost, 4.0);
    let c = pam_cluster(&d.with_weights(vec![1.0, 3.0]), 1).unwrap();
    assert_eq!(c.medoids, vec![1]);
    assert_eq!(c.total_cost, 4.0);

    let d = line(&[0.0, 1.0, 10.0, 11.0]);
    let c = pam_cluster(&d, 2).unwrap();
    assert_eq!(c.total_cost, 2.0);
    assert!([0, 1].contains(&c.medoids[0]) && [2, 3].contains(&c.medoids[1]));

    assert!(matches!(pam_cluster(&d, 5), Err(ClusterError::TooManyClusters { .. })));
}

#[test]
fn silhouette_examples() {
    let d = line(&[0.0, 0.1, 50.0, 50.1]);
    let c = pam_cluster(&d, 2).unwrap();
    assert!(average_silhouette(&d, &c).unwrap() > 0.9);
    let uniform = DissimilarityMatrix::from_fn(4, |_, _| 1.0);
    let c = pam_cluster(&uniform, 2).unwrap();
    assert!(average_silhouette(&uniform, &c).unwrap().abs() < 1e-12);
    let c1 = pam_cluster(&uniform, 1).unwrap();
    assert!(average_silhouette(&uniform, &c1).is_err());
}

#[test]
fn selection_examples() {
    let blobs = line(&[0.0, 0.5, 1.0, 100.0, 100.5, 101.0]);
    let s = select_k(&blobs, 2, None).unwrap();
    assert_eq!(s.clustering.k, 2);
    assert_eq!(s.asw_by_k.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 3, 4, 5]);

    let two = line(&[0.0, 3.0]);
    let s = select_k(&two, 2, None).unwrap();
    assert!(s.degenerate);
    assert_eq!(s.clustering.medoids, vec![0, 1]);

    let uniform = DissimilarityMatrix::from_fn(6, |_, _| 1.0);
    assert_eq!(select_k(&uniform, 2, None).unwrap().clustering.k, 2);
}

#[test]
fn medoid_extraction_examples() {
    let d = line(&[0.0, 1.0, 10.0]);
    let c = pam_cluster(&d, 1).unwrap();
    let m = extract_medoids(&c, &d);
    assert_eq!(m[0].index, 1);
    assert_eq!(m[0].weight, 3.0);

    let d = line(&[0.0, 1.0, 10.0]).with_weights(vec![1.0, 1.0, 100.0]);
    let c = pam_cluster(&d, 1).unwrap();
    let m = extract_medoids(&c, &d);
    assert_eq!(m[0].index, 2);
    assert_eq!(m[0].weight, 102.0);

    let d = line(&[0.0, 1.0, 50.0]);
    let c = pam_cluster(&d, 2).unwrap();
    let m = extract_medoids(&c, &d);
    assert_eq!((m[1].index, m[1].n_members), (2, 1));
}
