mod common;

use common::oracle;
use depthfuse::crf::{CrfInstance, SkylineCholesky, SparseSymmetric};
use depthfuse::superpixel::Edge;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize, edge_prob: f64) -> CrfInstance {
    oracle::random_instance(&mut ChaCha8Rng::seed_from_u64(seed), n, edge_prob, 1.0)
}

#[test]
fn two_node_map_matches_hand_solution_and_grid() {
    let edges = vec![Edge {
        p: 0,
        q: 1,
        similarity: [1.0, 0.0, 0.0],
    }];
    let inst = CrfInstance::new(2, edges, vec![0.0, 2.0], [1.0, 0.0, 0.0]).unwrap();
    let y = inst.map_inference().unwrap().y_star;
    assert!((y[0] - 0.5).abs() < 1e-12 && (y[1] - 1.5).abs() < 1e-12);
    let g = oracle::grid_minimize(&inst);
    assert!((g[0] - 0.5).abs() < 1e-9 && (g[1] - 1.5).abs() < 1e-9, "{g:?}");
}

#[test]
fn chain_matches_dense_inverse() {
    let edges = vec![
        Edge {
            p: 0,
            q: 1,
            similarity: [0.3, 0.9, 0.2],
        },
        Edge {
            p: 1,
            q: 2,
            similarity: [0.8, 0.1, 0.5],
        },
    ];
    let inst = CrfInstance::new(3, edges, vec![-1.2, 0.4, 2.5], [0.7, 0.2, 0.9]).unwrap();
    let y = inst.map_inference().unwrap().y_star;
    for (a, b) in y.iter().zip(oracle::dense_solve(&inst)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_node_density_integrates_to_one() {
    let inst = CrfInstance::new(1, vec![], vec![0.0], [0.0; 3]).unwrap();
    assert!((oracle::density_mass(&inst) - 1.0).abs() < 1e-9);
}

#[test]
fn skyline_log_det_matches_dense_cholesky() {
    for seed in 0..20 {
        let inst = instance(seed, 12, 0.3);
        let a = inst.precision().unwrap();
        let dense = DMatrix::from_fn(12, 12, |i, j| a.to_dense()[i][j]);
        let expected = dense
            .cholesky()
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.ln())
            .sum::<f64>();
        let chol = SkylineCholesky::factor(&a).unwrap();
        assert!((chol.log_det() - expected).abs() < 1e-10);
    }
}

#[test]
fn precision_of_isolated_nodes_is_identity() {
    let inst = instance(3, 5, 0.0);
    let a: SparseSymmetric = inst.precision().unwrap();
    for (i, row) in a.to_dense().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v, if i == j { 1.0 } else { 0.0 });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn map_solves_the_dense_system(seed in any::<u64>(), n in 1usize..40, p in 0.0f64..1.0) {
        let inst = instance(seed, n, p);
        let y = inst.map_inference().unwrap().y_star;
        for (a, b) in y.iter().zip(oracle::dense_solve(&inst)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn map_is_a_minimum_of_the_energy(seed in any::<u64>(), n in 1usize..12, k in 0usize..12, step in -1.0f64..1.0) {
        let inst = instance(seed, n, 0.5);
        let sol = inst.map_inference().unwrap();
        let mut y = sol.y_star.clone();
        y[k % n] += step;
        prop_assert!(inst.energy(&y) >= sol.energy - 1e-12);
    }

    #[test]
    fn map_lies_within_the_unary_range(seed in any::<u64>(), n in 1usize..20) {
        let inst = instance(seed, n, 0.5);
        let lo = inst.z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = inst.z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for y in inst.map_inference().unwrap().y_star {
            prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9);
        }
    }

    #[test]
    fn likelihood_is_smallest_at_the_map(seed in any::<u64>(), n in 1usize..10, shift in 0.01f64..1.0) {
        let inst = instance(seed, n, 0.5);
        let y = inst.map_inference().unwrap().y_star;
        let at_map = inst.clone().with_ground_truth(y.clone()).unwrap().nll().unwrap();
        let moved: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let elsewhere = inst.with_ground_truth(moved).unwrap().nll().unwrap();
        prop_assert!(elsewhere > at_map);
    }

    #[test]
    fn energy_is_non_negative(seed in any::<u64>(), n in 1usize..10, offset in -2.0f64..2.0) {
        let inst = instance(seed, n, 0.7);
        let y: Vec<f64> = inst.z.iter().map(|z| z * 0.5 + offset).collect();
        prop_assert!(inst.energy(&y) >= 0.0);
    }

    #[test]
    fn relabelling_nodes_permutes_the_solution(seed in any::<u64>(), n in 2usize..15) {
        let inst = instance(seed, n, 0.5);
        let perm: Vec<usize> = (0..n).rev().collect();
        let edges = inst
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.p], perm[e.q]);
                Edge { p: a.min(b), q: a.max(b), similarity: e.similarity }
            })
            .collect();
        let mut z = vec![0.0; n];
        for (i, &v) in inst.z.iter().enumerate() {
            z[perm[i]] = v;
        }
        let flipped = CrfInstance::new(n, edges, z, inst.beta).unwrap();
        let a = inst.map_inference().unwrap().y_star;
        let b = flipped.map_inference().unwrap().y_star;
        for i in 0..n {
            prop_assert!((a[i] - b[perm[i]]).abs() < 1e-10);
        }
        prop_assert!((inst.log_partition().unwrap() - flipped.log_partition().unwrap()).abs() < 1e-10);
    }
}
