use proptest::prelude::*;

use fairrank::data::{generate_synthetic, read_csv, split, SyntheticSpec};
use fairrank::data::Group;
use fairrank::eval::ndcg_at_k_from_scores;
use fairrank::fairness::{
    exposures, full_list_disparity_from_scores, top_k_positions,
    topk_disparity_exact_from_scores, topk_disparity_surrogate_from_scores, SmoothIndicator,
};
use fairrank::lambda_solver::{smoothed_grad, solve_lambda_exactly_smoothed, SmoothingParams};
use fairrank::model::{FactorizationScorer, ScoringModel};

fn scored_groups() -> impl Strategy<Value = (Vec<f64>, Vec<Group>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, g)| {
                let mut groups: Vec<Group> =
                    g.into_iter().map(|a| if a { Group::A } else { Group::B }).collect();
                let n = groups.len();
                groups[0] = Group::A;
                groups[n - 1] = Group::B;
                (s, groups)
            })
    })
}

proptest! {
    #[test]
    fn exposures_are_a_distribution(scores in prop::collection::vec(-10.0f64..10.0, 1..100)) {
        let e = exposures(&scores);
        prop_assert!((e.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(e.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn disparities_ignore_score_shifts((scores, groups) in scored_groups(), c in -100.0f64..100.0, k in 1usize..50, lambda in -10.0f64..10.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        let ids: Vec<usize> = (0..scores.len()).collect();
        let a = full_list_disparity_from_scores(&scores, &groups).unwrap();
        let b = full_list_disparity_from_scores(&shifted, &groups).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        let a = topk_disparity_exact_from_scores(&scores, &groups, &ids, k).unwrap();
        let b = topk_disparity_exact_from_scores(&shifted, &groups, &ids, k).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        let psi = SmoothIndicator::sigmoid(0.2);
        let a = topk_disparity_surrogate_from_scores(&scores, &groups, lambda, psi).unwrap();
        let b = topk_disparity_surrogate_from_scores(&shifted, &groups, lambda + c, psi).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn unit_indicator_recovers_full_list((scores, groups) in scored_groups(), lambda in -10.0f64..10.0) {
        let u = topk_disparity_surrogate_from_scores(&scores, &groups, lambda, SmoothIndicator::One).unwrap();
        let full = full_list_disparity_from_scores(&scores, &groups).unwrap();
        prop_assert!((u - full).abs() <= 1e-12);
    }

    #[test]
    fn top_k_selection_is_ordered(scores in prop::collection::vec(-3i32..3, 1..30), k in 0usize..40) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ids: Vec<usize> = (0..scores.len()).rev().collect();
        let top = top_k_positions(&scores, &ids, k);
        prop_assert_eq!(top.len(), k.min(scores.len()));
        for w in top.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]));
        }
        if let Some(&last) = top.last() {
            for p in 0..scores.len() {
                if !top.contains(&p) {
                    prop_assert!(scores[p] < scores[last] || (scores[p] == scores[last] && ids[p] > ids[last]));
                }
            }
        }
    }

    #[test]
    fn ndcg_is_bounded(
        rows in prop::collection::vec((-5.0f64..5.0, 0u8..4), 1..50),
        k in 1usize..60,
    ) {
        let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let labels: Vec<f64> = rows.iter().map(|r| f64::from(r.1)).collect();
        let ids: Vec<usize> = (0..rows.len()).collect();
        match ndcg_at_k_from_scores(&scores, &labels, &ids, k) {
            Some(v) => {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                let ideal = ndcg_at_k_from_scores(&labels, &labels, &ids, k).unwrap();
                prop_assert!((ideal - 1.0).abs() <= 1e-12);
            }
            None => prop_assert!(labels.iter().all(|&l| l == 0.0)),
        }
    }

    #[test]
    fn solved_threshold_is_stationary(scores in prop::collection::vec(-5.0f64..5.0, 2..200), kfrac in 0.0f64..1.0) {
        let k = 1 + ((scores.len() - 1) as f64 * kfrac) as usize;
        let k = k.min(scores.len() - 1);
        let p = SmoothingParams { k, ..SmoothingParams::default() };
        let lambda = solve_lambda_exactly_smoothed(&scores, &p, 1e-10).unwrap();
        prop_assert!(smoothed_grad(lambda, &scores, scores.len(), &p).abs() <= 1e-10);
    }

    #[test]
    fn scores_respect_the_bound(seed in any::<u64>(), bound in 0.5f64..20.0) {
        let mut m = FactorizationScorer::init(3, 4, 2, bound, 0.5, seed).unwrap();
        for w in m.params_mut().values_mut() {
            *w *= 1e3;
        }
        for q in 0..3 {
            for x in 0..4 {
                prop_assert!(m.score(q, x).unwrap().abs() <= bound);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn split_partitions_every_query(seed in any::<u64>(), split_seed in any::<u64>()) {
        let d = generate_synthetic(&SyntheticSpec {
            num_queries: 5,
            items_per_query: 13,
            minority_fraction: 0.3,
            bias: 1.0,
            seed,
        }).unwrap();
        let s = split(&d, (0.6, 0.2, 0.2), split_seed).unwrap();
        prop_assert_eq!(s.train.total_pairs() + s.valid.total_pairs() + s.test.total_pairs(), d.total_pairs());
        for (i, q) in d.queries().iter().enumerate() {
            let mut all: Vec<usize> = [&s.train, &s.valid, &s.test]
                .iter()
                .flat_map(|part| part.queries()[i].item_ids())
                .collect();
            all.sort_unstable();
            let mut expected = q.item_ids();
            expected.sort_unstable();
            prop_assert_eq!(all, expected);
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>()) {
        let d = generate_synthetic(&SyntheticSpec {
            num_queries: 4,
            items_per_query: 9,
            minority_fraction: 0.4,
            bias: 0.5,
            seed,
        }).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.total_pairs(), d.total_pairs());
        for (a, b) in d.queries().iter().zip(back.queries()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.labels(), b.labels());
            prop_assert_eq!(a.groups(), b.groups());
            let names_a: Vec<&str> = a.item_ids().into_iter().map(|x| d.item_name(x)).collect();
            let names_b: Vec<&str> = b.item_ids().into_iter().map(|x| back.item_name(x)).collect();
            prop_assert_eq!(names_a, names_b);
        }
    }
}
