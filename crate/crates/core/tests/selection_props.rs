use proptest::prelude::*;
use ttal_core::curate::{apply_border_correction, make_plan};
use ttal_core::qe::{estimate_quality, median_vote, QeOptions};
use ttal_core::{Aggregator, Geometry, ProbMap, QualityReport};

fn reports(scores: &[f64]) -> Vec<QualityReport> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &d)| QualityReport {
            case_id: format!("case{i:03}"),
            estimated_dice: d,
            per_aug_dice: vec![d],
            aggregator: Aggregator::Mean,
            roi: None,
            ensemble_size: 16,
        })
        .collect()
}

fn prob_maps(n: usize) -> impl Strategy<Value = Vec<ProbMap>> {
    proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 24), n).prop_map(|maps| {
        let g = Geometry::unit([4, 2, 3]).unwrap();
        maps.into_iter().map(|d| ProbMap::new(g, d).unwrap()).collect()
    })
}

proptest! {
    #[test]
    fn selection_is_shift_invariant(
        scores in proptest::collection::vec(0.0f64..0.8, 1..30),
        k in 0usize..5,
        n in 1usize..8,
        shift in 0.0f64..0.2,
    ) {
        let k = k.min(scores.len());
        let a = make_plan(&reports(&scores), k, n, None).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let b = make_plan(&reports(&shifted), k, n, None).unwrap();
        prop_assert_eq!(a.al_ids, b.al_ids);
        prop_assert_eq!(a.st_ids, b.st_ids);
    }

    #[test]
    fn median_vote_ignores_order(maps in prob_maps(5), rot in 0usize..5) {
        let mut rotated = maps.clone();
        rotated.rotate_left(rot);
        prop_assert_eq!(median_vote(&maps).unwrap(), median_vote(&rotated).unwrap());
    }

    #[test]
    fn full_roi_equals_no_roi_and_estimate_is_bounded(maps in prob_maps(6)) {
        let sm = median_vote(&maps).unwrap();
        let opts = QeOptions::default();
        let none = estimate_quality("c", &maps, &sm, opts, None).unwrap();
        let full = estimate_quality("c", &maps, &sm, opts, Some((0, 3))).unwrap();
        prop_assert_eq!(none.estimated_dice, full.estimated_dice);
        prop_assert!((0.0..=1.0).contains(&none.estimated_dice));
    }

    #[test]
    fn copying_the_median_never_lowers_the_mean_estimate(maps in prob_maps(6), which in 0usize..6) {
        let sm = median_vote(&maps).unwrap();
        let before = estimate_quality("c", &maps, &sm, QeOptions::default(), None).unwrap();
        let mut replaced = maps.clone();
        replaced[which] = sm.prob().clone();
        let after = estimate_quality("c", &replaced, &sm, QeOptions::default(), None).unwrap();
        prop_assert!(after.estimated_dice >= before.estimated_dice);
    }

    #[test]
    fn identical_ensembles_score_one(map in prob_maps(1)) {
        let maps = vec![map[0].clone(); 4];
        let sm = median_vote(&maps).unwrap();
        for aggregator in [Aggregator::Mean, Aggregator::Median] {
            let opts = QeOptions { aggregator, include_identity: true };
            prop_assert_eq!(estimate_quality("c", &maps, &sm, opts, None).unwrap().estimated_dice, 1.0);
        }
    }

    #[test]
    fn border_correction_is_idempotent(map in prob_maps(1), lo in 0usize..4, len in 0usize..4) {
        let hi = (lo + len).min(3);
        let once = apply_border_correction(&map[0], (lo, hi)).unwrap();
        prop_assert_eq!(apply_border_correction(&once, (lo, hi)).unwrap(), once);
    }
}

#[test]
fn ranking_matches_sort_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..100).map(|_| (rng.random_range(0..40) as f64) / 40.0).collect();
    let r = reports(&scores);
    let mut oracle: Vec<(f64, String)> = r.iter().map(|x| (x.estimated_dice, x.case_id.clone())).collect();
    oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let expected: Vec<String> = oracle.into_iter().map(|(_, id)| id).collect();
    assert_eq!(ttal_core::qe::rank_by_quality(&r).unwrap(), expected);
}
