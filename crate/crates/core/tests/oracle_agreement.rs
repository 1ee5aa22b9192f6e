use histoselect::baselines::{diversity_select, random_select, retrieval_f1, similarity_select};
use histoselect::linalg::cosine_similarity;
use histoselect::oracle::{exhaustive_topk, expected_random_f1};
use histoselect::wsi_data::{EmbeddingBundle, GridCoord, QuestionRecord};
use proptest::prelude::*;

fn bundle(rows: &[Vec<f64>]) -> EmbeddingBundle {
    let d = rows[0].len();
    let coords = (0..rows.len()).map(|i| GridCoord::new(0, i as u32)).collect();
    EmbeddingBundle::new(String::from("t"), d, rows.concat(), coords).unwrap()
}

#[test]
fn random_f1_matches_exact_expectation_within_three_standard_errors() {
    for (n, t, k) in [(10usize, 3usize, 3usize), (20, 5, 8), (100, 12, 12)] {
        let mut relevant = vec![false; n];
        relevant[..t].fill(true);
        let trials = 100_000u64;
        let f1: Vec<f64> = (0..trials)
            .map(|s| retrieval_f1(&random_select(n, k, s).unwrap(), &relevant).unwrap().f1)
            .collect();
        let mean = f1.iter().sum::<f64>() / trials as f64;
        let var = f1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        let exact = expected_random_f1(n as u64, t as u64, k as u64).unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "n={n} t={t} k={k}: {mean} vs {exact} (se {se})");
    }
}

/// Smallest pairwise cosine distance within a set.
fn min_distance(b: &EmbeddingBundle, set: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (x, &i) in set.iter().enumerate() {
        for &j in &set[x + 1..] {
            best = best.min(1.0 - cosine_similarity(b.feature(i), b.feature(j)).unwrap());
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn similarity_equals_exhaustive_topk_of_cosines(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..=14),
        q in prop::collection::vec(0.1f64..1.0, 3),
        k_frac in 0.0f64..=1.0,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let b = bundle(&rows);
        let question = QuestionRecord::new(q.clone(), 0, 1, None).unwrap();
        let k = (k_frac * rows.len() as f64).round() as usize;
        let cos: Vec<f64> = rows.iter().map(|r| cosine_similarity(r, &q).unwrap()).collect();
        prop_assert_eq!(similarity_select(&b, &question, k).unwrap(), exhaustive_topk(&cos, k).unwrap());
    }

    #[test]
    fn diversity_on_two_tight_clusters_is_max_min_optimal(
        a in prop::collection::vec(prop::collection::vec(-0.05f64..0.05, 2), 1..=6),
        b in prop::collection::vec(prop::collection::vec(-0.05f64..0.05, 2), 1..=6),
    ) {
        let mut rows: Vec<Vec<f64>> = a.iter().map(|d| vec![1.0 + d[0], d[1]]).collect();
        rows.extend(b.iter().map(|d| vec![d[0], 1.0 + d[1]]));
        let split = a.len();
        let bun = bundle(&rows);
        let pick = diversity_select(&bun, 2).unwrap();
        prop_assert!(pick[0] < split && pick[1] >= split);
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d = min_distance(&bun, &[i, j]);
                if d > best.0 {
                    best = (d, i, j);
                }
            }
        }
        prop_assert!(best.1 < split && best.2 >= split, "brute-force optimum {:?}", best);
        // greedy starts at index 0, so it is optimal among pairs containing it
        let mut best_with_first = f64::NEG_INFINITY;
        for j in 1..rows.len() {
            best_with_first = best_with_first.max(min_distance(&bun, &[0, j]));
        }
        prop_assert!((min_distance(&bun, &pick) - best_with_first).abs() < 1e-15);
    }
}
