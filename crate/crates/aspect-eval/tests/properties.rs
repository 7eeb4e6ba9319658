//! Randomized property checks for the correlation metrics, the rank
//! transform, and the verbalizer threshold rule.

use aspect_eval::domain::{AspectId, UnitScore};
use aspect_eval::metaeval::{average_ranks, compute, Metric, PairedSeries};
use aspect_eval::verbalizer::TemplateCatalog;
use proptest::prelude::*;

const EPS: f64 = 1e-9;

fn series(x: &[f64], y: &[f64]) -> PairedSeries {
    let ids = (0..x.len()).map(|i| format!("i{i}")).collect();
    PairedSeries::new(ids, x.to_vec(), y.to_vec()).unwrap()
}

/// Paired finite vectors of equal length in [2, 24]. Values are drawn
/// from a small integer-ish grid so ties are common.
fn paired_vectors() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..24).prop_flat_map(|n| {
        let v = prop::collection::vec((-40i32..40).prop_map(|k| f64::from(k) / 4.0), n);
        (v.clone(), v)
    })
}

proptest! {
    #[test]
    fn correlations_are_bounded_and_symmetric((x, y) in paired_vectors()) {
        for metric in Metric::ALL {
            let forward = compute(metric, &series(&x, &y)).unwrap();
            let backward = compute(metric, &series(&y, &x)).unwrap();
            match (forward, backward) {
                (Some(a), Some(b)) => {
                    prop_assert!((-1.0 - EPS..=1.0 + EPS).contains(&a), "{metric}: {a}");
                    prop_assert!((a - b).abs() < EPS, "{metric} asymmetric: {a} vs {b}");
                }
                (None, None) => {}
                other => prop_assert!(false, "{metric} symmetry of definedness broke: {other:?}"),
            }
        }
    }

    #[test]
    fn rank_metrics_ignore_monotone_transforms((x, y) in paired_vectors()) {
        // strictly increasing map: 3x + x^3 (odd, monotone, tie-preserving)
        let warped: Vec<f64> = x.iter().map(|v| 3.0 * v + v.powi(3)).collect();
        for metric in [Metric::Spearman, Metric::KendallTauB] {
            let plain = compute(metric, &series(&x, &y)).unwrap();
            let transformed = compute(metric, &series(&warped, &y)).unwrap();
            match (plain, transformed) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < EPS, "{metric}: {a} vs {b}"),
                (None, None) => {}
                other => prop_assert!(false, "{metric} definedness changed: {other:?}"),
            }
        }
    }

    #[test]
    fn pearson_is_invariant_under_positive_affine_maps(
        (x, y) in paired_vectors(),
        scale in 1u32..50,
        shift in -20i32..20,
    ) {
        let mapped: Vec<f64> = x
            .iter()
            .map(|v| f64::from(scale) / 8.0 * v + f64::from(shift))
            .collect();
        let plain = compute(Metric::Pearson, &series(&x, &y)).unwrap();
        let affine = compute(Metric::Pearson, &series(&mapped, &y)).unwrap();
        match (plain, affine) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}"),
            (None, None) => {}
            other => prop_assert!(false, "definedness changed: {other:?}"),
        }
    }

    #[test]
    fn average_ranks_partition_the_rank_sum(xs in prop::collection::vec(-10i32..10, 1..30)) {
        let xs: Vec<f64> = xs.into_iter().map(|k| f64::from(k) / 2.0).collect();
        let ranks = average_ranks(&xs);
        let n = xs.len() as f64;
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < EPS);
        for (i, &ri) in ranks.iter().enumerate() {
            prop_assert!((1.0..=n).contains(&ri));
            for (j, &rj) in ranks.iter().enumerate() {
                // rank order mirrors value order, ties share a rank
                prop_assert_eq!(
                    xs[i].partial_cmp(&xs[j]).unwrap(),
                    ri.partial_cmp(&rj).unwrap()
                );
            }
        }
    }

    #[test]
    fn verbalizer_picks_the_polarity_by_strict_threshold(
        score in 0u32..=1000,
        threshold in 0u32..=1000,
    ) {
        let catalog = TemplateCatalog::default_catalog();
        let aspect = AspectId("naturalness@dialogue-turn".to_string());
        let template = catalog.get(&aspect).unwrap().clone();
        let score = UnitScore::new(f64::from(score) / 1000.0).unwrap();
        let threshold = UnitScore::new(f64::from(threshold) / 1000.0).unwrap();
        let text = catalog.verbalize(&aspect, score, threshold).unwrap();
        if score.value() > threshold.value() {
            prop_assert_eq!(text, template.pos_text);
        } else {
            prop_assert_eq!(text, template.neg_text);
        }
    }

    #[test]
    fn unit_score_accepts_exactly_the_closed_unit_interval(raw in -2.0f64..3.0) {
        prop_assert_eq!(UnitScore::new(raw).is_ok(), (0.0..=1.0).contains(&raw));
    }
}
