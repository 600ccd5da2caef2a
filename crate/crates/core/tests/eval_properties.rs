use cast_core::eval::{ndcg_at_k, rank_of_target, recall_at_k, MetricReport};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ndcg_bounded_by_recall(ranks in prop::collection::vec(1usize..60, 0..40), k in 1usize..30) {
        let (r, n) = (recall_at_k(&ranks, k), ndcg_at_k(&ranks, k));
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!(n <= r + 1e-12);
    }

    #[test]
    fn metrics_grow_with_k(ranks in prop::collection::vec(1usize..60, 1..40)) {
        let report = MetricReport::from_ranks("valid", &ranks, &[5, 10, 20]);
        prop_assert!(report.recall(5) <= report.recall(10) && report.recall(10) <= report.recall(20));
        prop_assert!(report.ndcg(5) <= report.ndcg(10) && report.ndcg(10) <= report.ndcg(20));
        prop_assert_eq!(report.users, ranks.len());
    }

    #[test]
    fn rank_is_pessimistic_under_ties(scores in prop::collection::vec(0u8..4, 1..30), t in any::<prop::sample::Index>()) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = t.index(scores.len());
        // stable sort by descending score with the target placed last among its ties
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then((a == target).cmp(&(b == target))));
        let expected = order.iter().position(|&i| i == target).unwrap() + 1;
        prop_assert_eq!(rank_of_target(&scores, target), expected);
    }
}
