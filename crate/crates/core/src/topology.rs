//! Weighted undirected communication graphs with leader pinning.

use std::collections::VecDeque;

use nalgebra::Cholesky;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Topology {
    n_agents: usize,
    #[serde(serialize_with = "serialize_rows")]
    adjacency: Mat,
    pinning: Vec<f64>,
    n_bar: usize,
}

fn serialize_rows<S: serde::Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl Topology {
    /// Validates symmetry, zero diagonal, nonnegative weights and `N ≤ N̄`.
    pub fn new(adjacency: Mat, pinning: Vec<f64>, n_bar: usize) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 {
            return Err(Error::InvalidTopology("graph has no agents".into()));
        }
        if adjacency.ncols() != n {
            return Err(Error::InvalidTopology(format!(
                "adjacency is {}x{}, expected square",
                n,
                adjacency.ncols()
            )));
        }
        if pinning.len() != n {
            return Err(Error::InvalidTopology(format!(
                "{} pinning gains for {} agents",
                pinning.len(),
                n
            )));
        }
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::InvalidTopology(format!(
                    "self-loop on agent {} (a_ii = {})",
                    i + 1,
                    adjacency[(i, i)]
                )));
            }
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidTopology(format!(
                        "edge weight a_{}{} = {} must be finite and nonnegative",
                        i + 1,
                        j + 1,
                        a
                    )));
                }
                if a != adjacency[(j, i)] {
                    return Err(Error::InvalidTopology(format!(
                        "asymmetric edge ({}, {}): a_ij = {} but a_ji = {}",
                        i + 1,
                        j + 1,
                        a,
                        adjacency[(j, i)]
                    )));
                }
            }
        }
        if let Some((i, g)) = pinning.iter().enumerate().find(|(_, g)| !g.is_finite() || **g < 0.0) {
            return Err(Error::InvalidTopology(format!(
                "pinning gain g_{} = {} must be finite and nonnegative",
                i + 1,
                g
            )));
        }
        if n_bar < n {
            return Err(Error::InvalidTopology(format!(
                "network size bound N̄ = {} is below N = {}",
                n_bar, n
            )));
        }
        Ok(Self {
            n_agents: n,
            adjacency,
            pinning,
            n_bar,
        })
    }

    /// Builds from 0-based undirected edge triples; each edge sets both `a_ij` and `a_ji`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], pins: &[(usize, f64)], n_bar: usize) -> Result<Self> {
        let mut adj = Mat::zeros(n, n);
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidTopology(format!(
                    "edge ({}, {}) references an agent outside 1..={}",
                    i + 1,
                    j + 1,
                    n
                )));
            }
            adj[(i, j)] = w;
            adj[(j, i)] = w;
        }
        let mut pinning = vec![0.0; n];
        for &(i, g) in pins {
            if i >= n {
                return Err(Error::InvalidTopology(format!(
                    "pinning on agent {} outside 1..={}",
                    i + 1,
                    n
                )));
            }
            pinning[i] = g;
        }
        Self::new(adj, pinning, n_bar)
    }

    /// Unit-weight ring `1-2-…-N-1`.
    pub fn ring(n: usize, pins: &[(usize, f64)]) -> Result<Self> {
        let edges: Vec<_> = match n {
            0 | 1 => vec![],
            2 => vec![(0, 1, 1.0)],
            _ => (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect(),
        };
        Self::from_edges(n, &edges, pins, n)
    }

    /// Unit-weight path `1-2-…-N`.
    pub fn path(n: usize, pins: &[(usize, f64)]) -> Result<Self> {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i, 1.0)).collect();
        Self::from_edges(n, &edges, pins, n)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_bar(&self) -> usize {
        self.n_bar
    }

    pub fn adjacency(&self) -> &Mat {
        &self.adjacency
    }

    pub fn pinning(&self) -> &[f64] {
        &self.pinning
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    /// Neighbors of `i` with their edge weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n_agents).filter_map(move |j| {
            let a = self.adjacency[(i, j)];
            (a > 0.0).then_some((j, a))
        })
    }

    pub fn max_weight(&self) -> f64 {
        self.adjacency.iter().copied().fold(0.0, f64::max)
    }

    /// `L = D − E`.
    pub fn laplacian(&self) -> Mat {
        let n = self.n_agents;
        let mut l = -self.adjacency.clone();
        for i in 0..n {
            l[(i, i)] = self.adjacency.row(i).sum();
        }
        l
    }

    /// Breadth-first reachability on the support `a_ij > 0`.
    pub fn is_connected(&self) -> bool {
        let n = self.n_agents;
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for (j, _) in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Algebraic connectivity. A single agent has no second eigenvalue and
    /// reports `+∞`, which makes every `x / λ2` term in the estimator bounds vanish.
    pub fn lambda2(&self) -> Result<f64> {
        if !self.is_connected() {
            return Err(Error::NotConnected);
        }
        if self.n_agents == 1 {
            return Ok(f64::INFINITY);
        }
        Ok(linalg::sym_eigenvalues(&self.laplacian())[1])
    }

    pub fn grounded(&self) -> Result<GroundedLaplacian> {
        if !self.is_connected() {
            return Err(Error::SingularGrounding("graph is not connected".into()));
        }
        if self.pinning.iter().all(|&g| g == 0.0) {
            return Err(Error::SingularGrounding("no agent is pinned to the leader".into()));
        }
        let mut m = self.laplacian();
        for i in 0..self.n_agents {
            m[(i, i)] += self.pinning[i];
        }
        let min_eigenvalue = linalg::min_sym_eigenvalue(&m);
        let chol = Cholesky::new(m.clone()).ok_or_else(|| {
            Error::SingularGrounding(format!(
                "L+G is not positive definite (min eigenvalue {min_eigenvalue:.3e})"
            ))
        })?;
        if min_eigenvalue <= 0.0 {
            return Err(Error::SingularGrounding(format!("min eigenvalue {min_eigenvalue:.3e}")));
        }
        Ok(GroundedLaplacian {
            matrix: m,
            min_eigenvalue,
            chol,
        })
    }
}

/// `L + G`, positive definite under the connectivity and pinning assumptions.
#[derive(Debug, Clone)]
pub struct GroundedLaplacian {
    matrix: Mat,
    min_eigenvalue: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl GroundedLaplacian {
    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Row `i` of `L + G` (what agent `i` knows locally).
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.matrix.row(i).iter().copied().collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row(i)).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue > 0.0
    }

    /// Solves `(L+G) Y = rhs` column by column; with rows of `rhs` as agent
    /// blocks this is `((L+G) ⊗ I)⁻¹` applied to the stacked vector.
    pub fn solve(&self, rhs: &Mat) -> Mat {
        self.chol.solve(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_disjoint_edges() -> Topology {
        Topology::from_edges(4, &[(0, 1, 1.0), (2, 3, 1.0)], &[(0, 1.0)], 4).unwrap()
    }

    #[test]
    fn laplacian_of_k2() {
        let t = Topology::path(2, &[(0, 1.0)]).unwrap();
        assert_eq!(t.laplacian(), Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_of_single_node() {
        let t = Topology::path(1, &[(0, 1.0)]).unwrap();
        assert_eq!(t.laplacian(), Mat::zeros(1, 1));
        assert!(t.is_connected());
        assert_eq!(t.grounded().unwrap().matrix()[(0, 0)], 1.0);
    }

    #[test]
    fn laplacian_of_triangle() {
        let t = Topology::ring(3, &[]).unwrap();
        let expected = Mat::identity(3, 3) * 2.0 - (Mat::from_element(3, 3, 1.0) - Mat::identity(3, 3));
        assert_eq!(t.laplacian(), expected);
        for r in t.laplacian().row_iter() {
            assert_eq!(r.sum(), 0.0);
        }
    }

    #[test]
    fn unpinned_graph_is_singular() {
        let t = Topology::ring(4, &[]).unwrap();
        assert!(matches!(t.grounded(), Err(Error::SingularGrounding(_))));
    }

    #[test]
    fn disconnected_graph_is_singular_and_has_no_lambda2() {
        let t = two_disjoint_edges();
        assert!(!t.is_connected());
        assert!(matches!(t.grounded(), Err(Error::SingularGrounding(_))));
        assert_eq!(t.lambda2(), Err(Error::NotConnected));
    }

    #[test]
    fn ring8_single_pin_is_positive_definite() {
        let t = Topology::ring(8, &[(0, 1.0)]).unwrap();
        assert!(t.is_connected());
        let g = t.grounded().unwrap();
        assert!(g.min_eigenvalue() > 0.0);
        assert!(linalg::asymmetry(g.matrix()) <= 1e-12);
    }

    #[test]
    fn lambda2_known_graphs() {
        let k2 = Topology::path(2, &[(0, 1.0)]).unwrap();
        assert!((k2.lambda2().unwrap() - 2.0).abs() < 1e-12);
        let p3 = Topology::path(3, &[(0, 1.0)]).unwrap();
        assert!((p3.lambda2().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_self_loops_and_asymmetry() {
        let mut a = Mat::zeros(2, 2);
        a[(0, 1)] = 1.0;
        assert!(matches!(
            Topology::new(a.clone(), vec![1.0, 0.0], 2),
            Err(Error::InvalidTopology(_))
        ));
        a[(1, 0)] = 1.0;
        a[(0, 0)] = 1.0;
        assert!(matches!(
            Topology::new(a, vec![1.0, 0.0], 2),
            Err(Error::InvalidTopology(_))
        ));
        assert!(Topology::from_edges(3, &[(0, 1, 1.0)], &[], 2).is_err());
    }

    fn random_connected(rng: &mut ChaCha8Rng, n: usize) -> Topology {
        // random spanning tree plus extra edges, random weights
        let mut edges = Vec::new();
        for i in 1..n {
            let j = rng.gen_range(0..i);
            edges.push((i, j, rng.gen_range(0.2..2.0)));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.25) {
                    edges.push((i, j, rng.gen_range(0.2..2.0)));
                }
            }
        }
        Topology::from_edges(n, &edges, &[(rng.gen_range(0..n), 1.0)], n).unwrap()
    }

    proptest! {
        #[test]
        fn laplacian_annihilates_ones(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_connected(&mut rng, n);
            let l = t.laplacian();
            for r in l.row_iter() {
                prop_assert!(r.sum().abs() <= 1e-12);
            }
            let g = t.grounded().unwrap();
            prop_assert!(linalg::asymmetry(g.matrix()) <= 1e-12);
            prop_assert!(g.min_eigenvalue() > 0.0);
        }

        #[test]
        fn rayleigh_quotient_bounded_by_lambda2(seed in any::<u64>(), n in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_connected(&mut rng, n);
            let l = t.laplacian();
            let l2 = t.lambda2().unwrap();
            let mut x = crate::linalg::Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mean = x.mean();
            x.add_scalar_mut(-mean);
            let quad = (x.transpose() * &l * &x)[(0, 0)];
            prop_assert!(quad >= l2 * x.norm_squared() - 1e-9);
        }
    }
}
