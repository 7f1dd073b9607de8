use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cpe_core::intelligence::{
    c_factor, score_from_path_length, ForestError, ForestParams, IsolationForest, Node, MIN_TRAINING,
};

/// `2 H(n-1) - 2(n-1)/n` with the harmonic number summed exactly.
fn c_by_harmonic_sum(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let h: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
            2.0 * h - 2.0 * (n - 1) as f64 / n as f64
        }
    }
}

/// `2 (ln(n-1) + gamma) - 2(n-1)/n`, the estimator the score is normalised by.
fn c_log_form(n: usize) -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => 2.0 * (((n - 1) as f64).ln() + EULER_GAMMA) - 2.0 * (n - 1) as f64 / n as f64,
    }
}

fn gaussian_cloud(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| (0..dims).map(|_| normal.sample(&mut rng)).collect()).collect()
}

#[test]
fn c_factor_formula_values() {
    assert_eq!(c_factor(0), 0.0);
    assert_eq!(c_factor(1), 0.0);
    assert_eq!(c_factor(2), 1.0);
    assert!((c_factor(256) - 10.2448).abs() < 1e-4);
}

#[test]
fn c_factor_tracks_the_exact_harmonic_form() {
    // ln(n) + gamma approximates H(n) to within 1/(2n).
    for n in 3..2000 {
        let gap = (c_factor(n) - c_by_harmonic_sum(n)).abs();
        assert!(gap <= 1.0 / (n - 1) as f64, "n={n} gap={gap}");
    }
}

#[test]
fn score_is_one_half_at_the_normaliser() {
    for psi in [2usize, 3, 16, 100, 256] {
        let c = c_factor(psi);
        assert_eq!(score_from_path_length(c, c), 0.5);
    }
}

#[test]
fn fit_rejects_bad_input() {
    let small = gaussian_cloud(MIN_TRAINING - 1, 2, 1);
    assert_eq!(
        IsolationForest::fit(&small, &ForestParams::default(), 1).unwrap_err(),
        ForestError::InsufficientData(MIN_TRAINING - 1)
    );
    let mut ragged = gaussian_cloud(20, 2, 1);
    ragged[3].push(1.0);
    assert_eq!(
        IsolationForest::fit(&ragged, &ForestParams::default(), 1).unwrap_err(),
        ForestError::RaggedData
    );
    let p = ForestParams {
        n_trees: 0,
        subsample: 256,
    };
    assert!(IsolationForest::fit(&gaussian_cloud(20, 2, 1), &p, 1).is_err());
}

#[test]
fn planted_outlier_tops_the_ranking() {
    let mut hits = 0;
    for seed in 0..100u64 {
        let mut data = gaussian_cloud(255, 2, 1000 + seed);
        data.push(vec![6.0, 6.0]);
        let forest = IsolationForest::fit(&data, &ForestParams::default(), seed).unwrap();
        let scores: Vec<f64> = data.iter().map(|x| forest.score(x)).collect();
        let top = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if top == 255 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "outlier ranked first in {hits}/100 runs");
}

/// Independent walk over the exported node table.
fn brute_path(nodes: &[Node], idx: usize, x: &[f64], depth: usize) -> f64 {
    match &nodes[idx] {
        Node::Leaf { size } => depth as f64 + c_log_form(*size),
        Node::Internal {
            dim, split, left, right, ..
        } => {
            let next = if x[*dim] < *split { *left } else { *right };
            brute_path(nodes, next, x, depth + 1)
        }
    }
}

#[test]
fn three_tree_forest_matches_a_brute_force_walk() {
    let data = gaussian_cloud(64, 3, 9);
    let params = ForestParams {
        n_trees: 3,
        subsample: 32,
    };
    let forest = IsolationForest::fit(&data, &params, 4).unwrap();
    assert_eq!(forest.trees().len(), 3);
    let c_psi = c_log_form(32);
    for x in data.iter().chain([vec![5.0, -5.0, 5.0]].iter()) {
        let mean: f64 = forest
            .trees()
            .iter()
            .map(|t| brute_path(t.nodes(), 0, x, 0))
            .sum::<f64>()
            / 3.0;
        let expected = 2f64.powf(-mean / c_psi);
        assert!((forest.score(x) - expected).abs() < 1e-9, "{} vs {expected}", forest.score(x));
        for t in forest.trees() {
            let (own, brute) = (t.path_length(x), brute_path(t.nodes(), 0, x, 0));
            assert!((own - brute).abs() < 1e-9, "{own} vs {brute}");
        }
    }
}

fn leaf_total(nodes: &[Node], idx: usize) -> usize {
    match &nodes[idx] {
        Node::Leaf { size } => *size,
        Node::Internal { left, right, .. } => leaf_total(nodes, *left) + leaf_total(nodes, *right),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn c_factor_is_increasing_and_bounded(n in 2usize..100_000) {
        prop_assert!(c_factor(n + 1) > c_factor(n));
        prop_assert!(c_factor(n) <= 2.0 * (n as f64).ln() + 2.0);
    }

    #[test]
    fn trees_respect_their_structure(n in 8usize..300, dims in 1usize..5, subsample in 2usize..300, seed in any::<u64>()) {
        let data = gaussian_cloud(n, dims, seed);
        let params = ForestParams { n_trees: 5, subsample };
        let forest = IsolationForest::fit(&data, &params, seed).unwrap();
        let psi = subsample.min(n);
        prop_assert_eq!(forest.psi(), psi);
        let limit = (psi as f64).log2().ceil() as usize;
        for t in forest.trees() {
            prop_assert_eq!(t.height_limit(), limit);
            prop_assert!(t.depth() <= limit);
            prop_assert_eq!(leaf_total(t.nodes(), 0), psi);
            for node in t.nodes() {
                if let Node::Internal { split, range, dim, .. } = node {
                    prop_assert!(*dim < dims);
                    prop_assert!(range.0 < range.1);
                    prop_assert!(*split >= range.0 && *split < range.1);
                }
            }
        }
        for x in &data {
            let s = forest.score(x);
            prop_assert!(s > 0.0 && s < 1.0, "score {}", s);
        }
    }

    #[test]
    fn fitting_is_deterministic(seed in any::<u64>()) {
        let data = gaussian_cloud(40, 3, seed);
        let a = IsolationForest::fit(&data, &ForestParams::default(), seed).unwrap();
        let b = IsolationForest::fit(&data, &ForestParams::default(), seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn far_points_outscore_the_centre(seed in 0u64..1000) {
        let data = gaussian_cloud(200, 2, seed);
        let forest = IsolationForest::fit(&data, &ForestParams::default(), seed).unwrap();
        prop_assert!(forest.score(&[8.0, 8.0]) > forest.score(&[0.0, 0.0]));
    }
}
