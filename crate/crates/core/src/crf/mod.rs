//! Continuous CRF over superpixel depths.
//!
//! With unary regressions `z` and pairwise weights `R_pq = beta . S_pq` the energy
//!
//! ```text
//! E(y) = sum_p (y_p - z_p)^2 + sum_(p,q) 1/2 R_pq (y_p - y_q)^2
//!      = y^T A y - 2 z^T y + z^T z,     A = I + 1/2 L(R)
//! ```
//!
//! is a convex quadratic (`L(R)` is the weighted graph Laplacian), so the
//! density `exp(-E) / Z` is Gaussian: the MAP estimate is `A^{-1} z` and
//!
//! ```text
//! log Z = n/2 log(pi) - 1/2 log det A + z^T A^{-1} z - z^T z.
//! ```

mod cholesky;
pub mod dcnf;

pub use cholesky::{reverse_cuthill_mckee, SkylineCholesky, SparseSymmetric};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::superpixel::{Edge, SuperpixelGraph};

/// `R_pq = sum_k beta_k S_pq^(k)`.
pub fn pairwise_weight(similarity: &[f64; 3], beta: &[f64; 3]) -> Result<f64> {
    check_beta(beta)?;
    Ok(similarity.iter().zip(beta).map(|(s, b)| s * b).sum())
}

fn check_beta(beta: &[f64; 3]) -> Result<()> {
    if beta.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(Error::Constraint(format!(
            "pairwise weights beta must be finite and non-negative, got {beta:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfInstance {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    /// Unary regressions (log depth).
    pub z: Vec<f64>,
    pub beta: [f64; 3],
    /// Ground-truth node values (log depth), needed for the likelihood.
    pub y_gt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfSolution {
    pub y_star: Vec<f64>,
    pub energy: f64,
    pub nll: Option<f64>,
}

/// Likelihood and its exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NllGradients {
    pub nll: f64,
    pub d_z: Vec<f64>,
    pub d_beta: [f64; 3],
    pub y_star: Vec<f64>,
}

impl CrfInstance {
    pub fn new(num_nodes: usize, edges: Vec<Edge>, z: Vec<f64>, beta: [f64; 3]) -> Result<Self> {
        let inst = CrfInstance {
            num_nodes,
            edges,
            z,
            beta,
            y_gt: None,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_graph(graph: &SuperpixelGraph, z: Vec<f64>, beta: [f64; 3]) -> Result<Self> {
        Self::new(graph.node_count(), graph.edges.clone(), z, beta)
    }

    pub fn with_ground_truth(mut self, y_gt: Vec<f64>) -> Result<Self> {
        if y_gt.len() != self.num_nodes || y_gt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!(
                "ground truth has {} entries for {} nodes (all must be finite)",
                y_gt.len(),
                self.num_nodes
            )));
        }
        self.y_gt = Some(y_gt);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        check_beta(&self.beta)?;
        if self.z.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "z has {} entries for {} nodes",
                self.z.len(),
                self.num_nodes
            )));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("unary regressions must be finite".into()));
        }
        if let Some(e) = self
            .edges
            .iter()
            .find(|e| e.p >= self.num_nodes || e.q >= self.num_nodes || e.p == e.q)
        {
            return Err(Error::Shape(format!(
                "edge ({}, {}) invalid for {} nodes",
                e.p, e.q, self.num_nodes
            )));
        }
        Ok(())
    }

    pub fn edge_weights(&self) -> Vec<f64> {
        self.edges
            .iter()
            .map(|e| e.similarity.iter().zip(&self.beta).map(|(s, b)| s * b).sum())
            .collect()
    }

    pub fn energy(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.num_nodes, "energy: y has the wrong length");
        let unary: f64 = y.iter().zip(&self.z).map(|(a, b)| (a - b).powi(2)).sum();
        let pairwise: f64 = self
            .edges
            .iter()
            .zip(self.edge_weights())
            .map(|(e, r)| 0.5 * r * (y[e.p] - y[e.q]).powi(2))
            .sum();
        unary + pairwise
    }

    /// `A = I + 1/2 L(R)`, so that `grad E = 2 (A y - z)`.
    pub fn precision(&self) -> Result<SparseSymmetric> {
        self.validate()?;
        let mut a = SparseSymmetric::new(self.num_nodes);
        for i in 0..self.num_nodes {
            a.add(i, i, 1.0);
        }
        for (e, r) in self.edges.iter().zip(self.edge_weights()) {
            a.add(e.p, e.p, 0.5 * r);
            a.add(e.q, e.q, 0.5 * r);
            a.add(e.p, e.q, -0.5 * r);
        }
        Ok(a)
    }

    fn factor(&self) -> Result<(SparseSymmetric, SkylineCholesky)> {
        let a = self.precision()?;
        let chol = SkylineCholesky::factor(&a)?;
        Ok((a, chol))
    }

    pub fn map_inference(&self) -> Result<CrfSolution> {
        let (_, chol) = self.factor()?;
        let y_star = chol.solve(&self.z);
        let energy = self.energy(&y_star);
        let nll = self
            .y_gt
            .as_ref()
            .map(|gt| self.energy(gt) + self.log_partition_with(&chol, &y_star));
        Ok(CrfSolution { y_star, energy, nll })
    }

    fn log_partition_with(&self, chol: &SkylineCholesky, y_star: &[f64]) -> f64 {
        let n = self.num_nodes as f64;
        let z_ainv_z: f64 = self.z.iter().zip(y_star).map(|(a, b)| a * b).sum();
        let z_z: f64 = self.z.iter().map(|v| v * v).sum();
        0.5 * n * PI.ln() - 0.5 * chol.log_det() + z_ainv_z - z_z
    }

    /// `log Z` of the Gaussian density.
    pub fn log_partition(&self) -> Result<f64> {
        let (_, chol) = self.factor()?;
        let y_star = chol.solve(&self.z);
        Ok(self.log_partition_with(&chol, &y_star))
    }

    fn ground_truth(&self) -> Result<&[f64]> {
        self.y_gt
            .as_deref()
            .ok_or_else(|| Error::Usage("likelihood needs ground-truth depths".into()))
    }

    /// `-log Pr(y_gt) = E(y_gt) + log Z`.
    pub fn nll(&self) -> Result<f64> {
        let gt = self.ground_truth()?;
        Ok(self.energy(gt) + self.log_partition()?)
    }

    /// Exact gradients of the likelihood:
    ///
    /// * `d/dz = 2 (y* - y_gt)`
    /// * `d/dbeta_k = sum_(p,q) S_k/2 [ (g_p - g_q)^2 - (y*_p - y*_q)^2 - (Sig_pp + Sig_qq - 2 Sig_pq)/2 ]`
    ///
    /// where `Sig = A^{-1}` and `g = y_gt`.
    pub fn nll_grads(&self) -> Result<NllGradients> {
        let gt = self.ground_truth()?;
        let (_, chol) = self.factor()?;
        let y_star = chol.solve(&self.z);
        let nll = self.energy(gt) + self.log_partition_with(&chol, &y_star);
        let d_z = y_star.iter().zip(gt).map(|(y, g)| 2.0 * (y - g)).collect();

        let mut d_beta = [0.0; 3];
        if !self.edges.is_empty() {
            let columns: Vec<Vec<f64>> = (0..self.num_nodes).map(|j| chol.inverse_column(j)).collect();
            for e in &self.edges {
                let (p, q) = (e.p, e.q);
                let variance = columns[p][p] + columns[q][q] - 2.0 * columns[q][p];
                let term = (gt[p] - gt[q]).powi(2) - (y_star[p] - y_star[q]).powi(2) - 0.5 * variance;
                for k in 0..3 {
                    d_beta[k] += 0.5 * e.similarity[k] * term;
                }
            }
        }
        Ok(NllGradients {
            nll,
            d_z,
            d_beta,
            y_star,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edge(p: usize, q: usize, s: [f64; 3]) -> Edge {
        Edge { p, q, similarity: s }
    }

    #[test]
    fn pairwise_weight_cases() {
        assert_eq!(pairwise_weight(&[0.3, 0.9, 0.1], &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(pairwise_weight(&[1.0; 3], &[1.0; 3]).unwrap(), 3.0);
        let r = pairwise_weight(&[1.0, 0.5, 0.25], &[0.2, 0.3, 0.5]).unwrap();
        assert!((r - 0.475).abs() < 1e-15);
        assert!(matches!(
            pairwise_weight(&[1.0; 3], &[0.1, -0.1, 0.0]),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn single_node_energy() {
        let inst = CrfInstance::new(1, vec![], vec![2.0], [0.0; 3]).unwrap();
        assert_eq!(inst.energy(&[0.0]), 4.0);
    }

    #[test]
    fn constant_z_has_zero_energy_at_z() {
        let inst = CrfInstance::new(3, vec![edge(0, 1, [1.0; 3]), edge(1, 2, [0.5; 3])], vec![1.5; 3], [1.0; 3]).unwrap();
        assert_eq!(inst.energy(&[1.5; 3]), 0.0);
    }

    #[test]
    fn two_node_hand_values() {
        // R_12 = 1 through beta = (1, 0, 0)
        let inst = CrfInstance::new(2, vec![edge(0, 1, [1.0, 0.7, 0.2])], vec![0.0, 2.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((inst.energy(&[0.5, 1.5]) - 1.0).abs() < 1e-15);
        let sol = inst.map_inference().unwrap();
        assert!((sol.y_star[0] - 0.5).abs() < 1e-14);
        assert!((sol.y_star[1] - 1.5).abs() < 1e-14);
        assert!((sol.energy - 1.0).abs() < 1e-14);
    }

    #[test]
    fn no_edges_map_is_unary() {
        let inst = CrfInstance::new(3, vec![], vec![0.3, -1.0, 2.0], [5.0; 3]).unwrap();
        assert_eq!(inst.map_inference().unwrap().y_star, vec![0.3, -1.0, 2.0]);
    }

    #[test]
    fn single_node_nll_is_half_log_pi() {
        let inst = CrfInstance::new(1, vec![], vec![0.0], [0.0; 3])
            .unwrap()
            .with_ground_truth(vec![0.0])
            .unwrap();
        assert!((inst.nll().unwrap() - 0.5 * PI.ln()).abs() < 1e-15);
    }

    #[test]
    fn nll_without_ground_truth_is_usage_error() {
        let inst = CrfInstance::new(1, vec![], vec![0.0], [0.0; 3]).unwrap();
        assert!(matches!(inst.nll(), Err(Error::Usage(_))));
    }

    #[test]
    fn negative_beta_is_rejected() {
        assert!(matches!(
            CrfInstance::new(2, vec![edge(0, 1, [1.0; 3])], vec![0.0; 2], [-1.0, 0.0, 0.0]),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn beta_frozen_at_zero_is_least_squares() {
        let inst = CrfInstance::new(2, vec![edge(0, 1, [1.0; 3])], vec![0.5, 1.0], [0.0; 3])
            .unwrap()
            .with_ground_truth(vec![1.0, -1.0])
            .unwrap();
        let g = inst.nll_grads().unwrap();
        assert!((g.nll - (0.25 + 4.0 + PI.ln())).abs() < 1e-14);
        assert_eq!(g.d_z, vec![2.0 * (0.5 - 1.0), 2.0 * (1.0 + 1.0)]);
    }
}
