//! Independent references for the CRF: exhaustive grid search, a dense linear
//! solve and numerical integration of the density.

use depthfuse::crf::CrfInstance;
use depthfuse::superpixel::Edge;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random instance: each node pair is an edge with probability `edge_prob`,
/// similarities in `[0, 1]`, `beta` in `[0, beta_max]`, `z` in `[-3, 3]`.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, edge_prob: f64, beta_max: f64) -> CrfInstance {
    let mut edges = Vec::new();
    for p in 0..n {
        for q in p + 1..n {
            if rng.gen_bool(edge_prob) {
                edges.push(Edge {
                    p,
                    q,
                    similarity: [rng.gen(), rng.gen(), rng.gen()],
                });
            }
        }
    }
    let z = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let beta = [0; 3].map(|_| rng.gen_range(0.0..beta_max));
    CrfInstance::new(n, edges, z, beta).unwrap()
}

/// Solves `(I + L/2) y = z` with a dense LU factorization built from the edge list.
pub fn dense_solve(inst: &CrfInstance) -> Vec<f64> {
    let n = inst.num_nodes;
    let mut a = DMatrix::<f64>::identity(n, n);
    for e in &inst.edges {
        let r: f64 = e.similarity.iter().zip(&inst.beta).map(|(s, b)| s * b).sum();
        a[(e.p, e.p)] += 0.5 * r;
        a[(e.q, e.q)] += 0.5 * r;
        a[(e.p, e.q)] -= 0.5 * r;
        a[(e.q, e.p)] -= 0.5 * r;
    }
    let z = DVector::from_vec(inst.z.clone());
    a.lu()
        .solve(&z)
        .expect("precision matrix is invertible")
        .iter()
        .copied()
        .collect()
}

const GRID_LO: f64 = -5.0;
const GRID_STEP: f64 = 1e-3;
const GRID_LAST: i64 = 10_000;

fn grid_value(i: i64) -> f64 {
    GRID_LO + i as f64 * GRID_STEP
}

fn grid_energy(inst: &CrfInstance, idx: &[i64]) -> f64 {
    let mut y = [0.0; 3];
    for (v, &i) in y.iter_mut().zip(idx) {
        *v = grid_value(i);
    }
    inst.energy(&y[..idx.len()])
}

/// Minimizer of the energy over the grid `-5 + 1e-3 k` in every coordinate
/// (`n <= 3`). Lattices of spacing 0.5, 0.1, 0.02, 0.004 and 0.001 are scanned
/// in turn, each over a window of three coarse cells around the previous best,
/// and the result is then walked to a point no fine-grid neighbour improves on.
pub fn grid_minimize(inst: &CrfInstance) -> Vec<f64> {
    let n = inst.num_nodes;
    assert!((1..=3).contains(&n));
    let mut lo = vec![0i64; n];
    let mut hi = vec![GRID_LAST; n];
    let mut best = vec![GRID_LAST / 2; n];
    for step in [500i64, 100, 20, 4, 1] {
        let axes: Vec<Vec<i64>> = (0..n)
            .map(|d| {
                let start = (lo[d] + step - 1) / step * step;
                (start..=hi[d]).step_by(step as usize).collect()
            })
            .collect();
        let mut best_e = f64::INFINITY;
        let mut counter = vec![0usize; n];
        let mut point = vec![0i64; n];
        'scan: loop {
            for d in 0..n {
                point[d] = axes[d][counter[d]];
            }
            let e = grid_energy(inst, &point);
            if e < best_e {
                best_e = e;
                best.clone_from(&point);
            }
            for d in 0..n {
                counter[d] += 1;
                if counter[d] < axes[d].len() {
                    continue 'scan;
                }
                counter[d] = 0;
            }
            break;
        }
        for d in 0..n {
            lo[d] = (best[d] - 3 * step).max(0);
            hi[d] = (best[d] + 3 * step).min(GRID_LAST);
        }
    }
    loop {
        let here = grid_energy(inst, &best);
        let mut moved = false;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut next = best.clone();
            for v in next.iter_mut() {
                *v = (*v + (c % 3) as i64 - 1).clamp(0, GRID_LAST);
                c /= 3;
            }
            if grid_energy(inst, &next) < here {
                best = next;
                moved = true;
                break;
            }
        }
        if !moved {
            break;
        }
    }
    best.into_iter().map(grid_value).collect()
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`, started on `pieces` equal panels.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, pieces: usize) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn panel(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            panel(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + panel(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let width = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (x0, x1) = (a + k as f64 * width, a + (k + 1) as f64 * width);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            panel(
                f,
                x0,
                x1,
                f0,
                fm,
                f1,
                (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1),
                tol / pieces as f64,
                40,
            )
        })
        .sum()
}

/// `integral exp(-E(y)) / Z dy` for one or two nodes, with `log Z` recovered
/// from the likelihood of an arbitrary reference point: `log Z = NLL(g) - E(g)`.
pub fn density_mass(inst: &CrfInstance) -> f64 {
    let n = inst.num_nodes;
    assert!(n == 1 || n == 2);
    let reference: Vec<f64> = inst.z.iter().map(|z| 0.5 * z + 0.25).collect();
    let with_gt = inst.clone().with_ground_truth(reference.clone()).unwrap();
    let log_z = with_gt.nll().unwrap() - inst.energy(&reference);
    let centre = inst.map_inference().unwrap().y_star;
    let half = 8.0;
    if n == 1 {
        let f = |y: f64| (-inst.energy(&[y]) - log_z).exp();
        adaptive_simpson(&f, centre[0] - half, centre[0] + half, 1e-12, 16)
    } else {
        let inner = |y0: f64| {
            let g = |y1: f64| (-inst.energy(&[y0, y1]) - log_z).exp();
            adaptive_simpson(&g, centre[1] - half, centre[1] + half, 1e-10, 8)
        };
        adaptive_simpson(&inner, centre[0] - half, centre[0] + half, 1e-9, 8)
    }
}
