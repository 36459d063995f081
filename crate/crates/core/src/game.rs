//! The global coalitional min-max game with structured weights.
//!
//! With `Q = blkdiag(Q_i)`, `R = ((L+G)⊗I)ᵀ blkdiag(R_i) ((L+G)⊗I)` and `Γ`
//! built the same way from `γ_i² I`, the global GARE is solved by
//! `P = blkdiag(P_i)` where each `P_i` solves agent `i`'s local GARE. The
//! saddle-point strategies then satisfy
//!
//! ```text
//! ((L+G) ⊗ I) u* = −[K_i δ_i]      ((L+G) ⊗ I) w* = [L_i δ_i]
//! ```
//!
//! which [`GlobalGame::coupled_strategies`] solves with a Cholesky factor of
//! the `N×N` grounded Laplacian. The dense global matrices are only built for
//! verification ([`GlobalGame::centralized_strategies`],
//! [`GlobalGame::global_gare_residual`]).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::riccati::{self, AgentDynamics, CareSolution, LocalWeights};
use crate::topology::{GroundedLaplacian, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GameDims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub agents: usize,
}

#[derive(Debug, Clone)]
pub struct GlobalGame {
    top: Topology,
    grounded: GroundedLaplacian,
    dynamics: AgentDynamics,
    weights: Vec<LocalWeights>,
    solutions: Vec<CareSolution>,
    dims: GameDims,
}

/// Stacked control and attack inputs, agent blocks in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyVector {
    pub u: Vector,
    pub w: Vector,
}

#[derive(Debug, Clone)]
pub struct GlobalWeights {
    pub q: Mat,
    pub r: Mat,
    pub gamma: Mat,
}

impl GlobalGame {
    /// Solves every agent's local GARE. Agents sharing identical weights share one solve.
    pub fn new(top: Topology, dynamics: AgentDynamics, weights: Vec<LocalWeights>) -> Result<Self> {
        let agents = top.n_agents();
        if weights.len() != agents {
            return Err(Error::DimensionMismatch(format!(
                "{} weight sets for {} agents",
                weights.len(),
                agents
            )));
        }
        let grounded = top.grounded()?;
        let mut solutions: Vec<CareSolution> = Vec::with_capacity(agents);
        for (i, w) in weights.iter().enumerate() {
            let reuse = (0..i).find(|&j| weights[j] == *w);
            let sol = match reuse {
                Some(j) => solutions[j].clone(),
                None => riccati::solve_local_gare(&dynamics, w).map_err(|e| match e {
                    Error::NoStabilizingSolution(msg) => {
                        Error::NoStabilizingSolution(format!("agent {}: {msg}", i + 1))
                    }
                    other => other,
                })?,
            };
            solutions.push(sol);
        }
        let dims = GameDims {
            n: dynamics.n(),
            m1: dynamics.m1(),
            m2: dynamics.m2(),
            agents,
        };
        Ok(Self {
            top,
            grounded,
            dynamics,
            weights,
            solutions,
            dims,
        })
    }

    /// Same weights for every agent.
    pub fn homogeneous(top: Topology, dynamics: AgentDynamics, weights: LocalWeights) -> Result<Self> {
        let n = top.n_agents();
        Self::new(top, dynamics, vec![weights; n])
    }

    pub fn topology(&self) -> &Topology {
        &self.top
    }

    pub fn grounded(&self) -> &GroundedLaplacian {
        &self.grounded
    }

    pub fn dynamics(&self) -> &AgentDynamics {
        &self.dynamics
    }

    pub fn weights(&self) -> &[LocalWeights] {
        &self.weights
    }

    pub fn solutions(&self) -> &[CareSolution] {
        &self.solutions
    }

    pub fn dims(&self) -> GameDims {
        self.dims
    }

    /// `blkdiag(P_i)`
    pub fn block_p(&self) -> Mat {
        let blocks: Vec<Mat> = self.solutions.iter().map(|s| s.p.clone()).collect();
        linalg::blkdiag(&blocks)
    }

    pub fn build_global_weights(&self) -> GlobalWeights {
        let lg = self.grounded.matrix();
        let m1 = self.dims.m1;
        let m2 = self.dims.m2;
        let q = linalg::blkdiag(&self.weights.iter().map(|w| w.q.clone()).collect::<Vec<_>>());
        let r_bar = linalg::blkdiag(&self.weights.iter().map(|w| w.r.clone()).collect::<Vec<_>>());
        let g_bar = linalg::blkdiag(
            &self
                .weights
                .iter()
                .map(|w| Mat::identity(m2, m2) * (w.gamma * w.gamma))
                .collect::<Vec<_>>(),
        );
        let t1 = linalg::kron(lg, &linalg::identity(m1));
        let t2 = linalg::kron(lg, &linalg::identity(m2));
        let r = linalg::symmetrize(&(t1.transpose() * r_bar * &t1));
        let gamma = linalg::symmetrize(&(t2.transpose() * g_bar * &t2));
        GlobalWeights { q, r, gamma }
    }

    /// `(Ā, B̄, D̄) = (I⊗A, (L+G)⊗B, (L+G)⊗D)`
    pub fn global_dynamics(&self) -> (Mat, Mat, Mat) {
        let lg = self.grounded.matrix();
        let a_bar = linalg::kron(&linalg::identity(self.dims.agents), &self.dynamics.a);
        let b_bar = linalg::kron(lg, &self.dynamics.b);
        let d_bar = linalg::kron(lg, &self.dynamics.d);
        (a_bar, b_bar, d_bar)
    }

    /// Frobenius norm of the global GARE evaluated at `blkdiag(P_i)`.
    pub fn global_gare_residual(&self) -> f64 {
        self.global_gare_residual_at(&self.block_p())
            .expect("block P has consistent dimensions")
    }

    /// Frobenius norm of `ĀᵀP + PĀ + Q − P B̄ R⁻¹ B̄ᵀ P + P D̄ Γ⁻¹ D̄ᵀ P` at `p`.
    pub fn global_gare_residual_at(&self, p: &Mat) -> Result<f64> {
        let dim = self.dims.agents * self.dims.n;
        if p.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch(format!(
                "P is {:?}, expected {dim}x{dim}",
                p.shape()
            )));
        }
        let gw = self.build_global_weights();
        let (a_bar, b_bar, d_bar) = self.global_dynamics();
        let r_inv = inverse(&gw.r, "global R")?;
        let g_inv = inverse(&gw.gamma, "global Γ")?;
        let lhs = a_bar.transpose() * p + p * &a_bar + &gw.q - p * &b_bar * r_inv * b_bar.transpose() * p
            + p * &d_bar * g_inv * d_bar.transpose() * p;
        Ok(lhs.norm())
    }

    /// `u = −R⁻¹ B̄ᵀ P δ`, `w = Γ⁻¹ D̄ᵀ P δ` with dense global matrices.
    pub fn centralized_strategies(&self, delta: &Vector) -> Result<StrategyVector> {
        self.check_delta(delta)?;
        let gw = self.build_global_weights();
        let (_, b_bar, d_bar) = self.global_dynamics();
        let p = self.block_p();
        let pd = &p * delta;
        let u = -(inverse(&gw.r, "global R")? * b_bar.transpose() * &pd);
        let w = inverse(&gw.gamma, "global Γ")? * d_bar.transpose() * &pd;
        Ok(StrategyVector { u, w })
    }

    /// Saddle-point strategies from the local gains by one `N×N` SPD solve per input channel.
    pub fn coupled_strategies(&self, delta: &Vector) -> Result<StrategyVector> {
        self.check_delta(delta)?;
        let GameDims { n, m1, m2, agents } = self.dims;
        let mut ku = Mat::zeros(agents, m1);
        let mut lw = Mat::zeros(agents, m2);
        for (i, sol) in self.solutions.iter().enumerate() {
            let d_i = delta.rows(i * n, n);
            ku.row_mut(i).copy_from(&(-(&sol.k * d_i)).transpose());
            lw.row_mut(i).copy_from(&(&sol.l_gain * d_i).transpose());
        }
        let u = linalg::rows_as_blocks(&self.grounded.solve(&ku));
        let w = linalg::rows_as_blocks(&self.grounded.solve(&lw));
        Ok(StrategyVector { u, w })
    }

    /// `½ δᵀ blkdiag(P_i) δ`
    pub fn value_function(&self, delta: &Vector) -> f64 {
        let n = self.dims.n;
        self.solutions
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let d = delta.rows(i * n, n);
                0.5 * (d.transpose() * &s.p * d)[(0, 0)]
            })
            .sum()
    }

    /// `δᵀ Q δ` with the block-diagonal state weight.
    pub fn state_cost(&self, delta: &Vector) -> f64 {
        let n = self.dims.n;
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let d = delta.rows(i * n, n);
                (d.transpose() * &w.q * d)[(0, 0)]
            })
            .sum()
    }

    /// `uᵀ R u` through the structure of `R` (no dense `R` needed).
    pub fn control_cost(&self, u: &Vector) -> f64 {
        let y = self.apply_grounded(u, self.dims.m1);
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let b = y.row(i).transpose();
                (b.transpose() * &w.r * &b)[(0, 0)]
            })
            .sum()
    }

    /// `wᵀ Γ w` through the structure of `Γ`.
    pub fn attack_cost(&self, w: &Vector) -> f64 {
        let y = self.apply_grounded(w, self.dims.m2);
        self.weights
            .iter()
            .enumerate()
            .map(|(i, wt)| wt.gamma * wt.gamma * y.row(i).norm_squared())
            .sum()
    }

    /// `((L+G) ⊗ I_block) v` as an `N × block` matrix of agent rows.
    fn apply_grounded(&self, v: &Vector, block: usize) -> Mat {
        let rows = linalg::blocks_as_rows(v.as_slice(), self.dims.agents, block);
        self.grounded.matrix() * rows
    }

    fn check_delta(&self, delta: &Vector) -> Result<()> {
        let expected = self.dims.agents * self.dims.n;
        if delta.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "δ has length {}, expected {expected}",
                delta.len()
            )));
        }
        Ok(())
    }
}

fn inverse(m: &Mat, what: &str) -> Result<Mat> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::SingularGrounding(format!("{what} is not positive definite")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vehicle_weights() -> LocalWeights {
        LocalWeights::new(Mat::identity(4, 4) * 10.0, Mat::identity(2, 2), 2.0).unwrap()
    }

    fn scalar_game(top: Topology) -> GlobalGame {
        let one = Mat::from_element(1, 1, 1.0);
        let dyn_ = AgentDynamics::new(Mat::zeros(1, 1), one.clone(), one.clone()).unwrap();
        let w = LocalWeights::new(one.clone(), one, 2f64.sqrt()).unwrap();
        GlobalGame::homogeneous(top, dyn_, w).unwrap()
    }

    fn random_delta(rng: &mut ChaCha8Rng, len: usize) -> Vector {
        Vector::from_fn(len, |_, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn single_agent_weights_reduce_to_local() {
        let game = scalar_game(Topology::path(1, &[(0, 1.0)]).unwrap());
        let gw = game.build_global_weights();
        assert_eq!(gw.r, Mat::identity(1, 1));
        let local = game.solutions()[0].residual_norm;
        assert!((game.global_gare_residual() - local).abs() < 1e-14);
    }

    #[test]
    fn two_agent_r_is_grounded_square() {
        // L+G = [[2,−1],[−1,1]] for a path with g = (1, 0)
        let top = Topology::path(2, &[(0, 1.0)]).unwrap();
        let dyn_ = AgentDynamics::planar_double_integrator();
        let game = GlobalGame::homogeneous(top, dyn_, vehicle_weights()).unwrap();
        let expected = linalg::kron(
            &Mat::from_row_slice(2, 2, &[5.0, -3.0, -3.0, 2.0]),
            &Mat::identity(2, 2),
        );
        let gw = game.build_global_weights();
        assert!((gw.r - expected).amax() < 1e-14);
        assert!(linalg::min_sym_eigenvalue(&gw.gamma) > 0.0);
    }

    #[test]
    fn path3_global_residual_and_negative_control() {
        let top = Topology::path(3, &[(0, 1.0)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let qn = game.build_global_weights().q.norm();
        assert!(game.global_gare_residual() < 1e-6 * (1.0 + qn));
        let bumped = game.block_p() + Mat::identity(12, 12) * 0.1;
        assert!(game.global_gare_residual_at(&bumped).unwrap() > 1e-3);
    }

    #[test]
    fn cancellation_identities() {
        let top = Topology::ring(4, &[(1, 0.5), (3, 2.0)]).unwrap();
        let dyn_ = AgentDynamics::planar_double_integrator();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights: Vec<_> = (0..4)
            .map(|_| {
                let f = Mat::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
                let r = &f * f.transpose() + Mat::identity(2, 2);
                LocalWeights::new(Mat::identity(4, 4), r, rng.gen_range(3.0..5.0)).unwrap()
            })
            .collect();
        let game = GlobalGame::new(top, dyn_.clone(), weights.clone()).unwrap();
        let gw = game.build_global_weights();
        let (_, b_bar, d_bar) = game.global_dynamics();
        let i4 = linalg::identity(4);
        let b_hat = linalg::kron(&i4, &dyn_.b);
        let d_hat = linalg::kron(&i4, &dyn_.d);
        let r_bar_inv = linalg::blkdiag(
            &weights
                .iter()
                .map(|w| w.r.clone().try_inverse().unwrap())
                .collect::<Vec<_>>(),
        );
        let g_bar_inv = linalg::blkdiag(
            &weights
                .iter()
                .map(|w| Mat::identity(2, 2) / (w.gamma * w.gamma))
                .collect::<Vec<_>>(),
        );
        let lhs = &b_bar * gw.r.try_inverse().unwrap() * b_bar.transpose();
        let rhs = &b_hat * r_bar_inv * b_hat.transpose();
        assert!((lhs - rhs).amax() < 1e-10);
        let lhs = &d_bar * gw.gamma.try_inverse().unwrap() * d_bar.transpose();
        let rhs = &d_hat * g_bar_inv * d_hat.transpose();
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn zero_error_zero_strategies() {
        let top = Topology::ring(4, &[(0, 1.0)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let z = Vector::zeros(16);
        let s = game.coupled_strategies(&z).unwrap();
        assert_eq!(s.u.amax(), 0.0);
        assert_eq!(s.w.amax(), 0.0);
        let s = game.centralized_strategies(&z).unwrap();
        assert_eq!(s.u.amax(), 0.0);
        assert_eq!(game.value_function(&z), 0.0);
    }

    #[test]
    fn single_agent_strategies_are_local_gains() {
        let top = Topology::path(1, &[(0, 1.0)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let delta = Vector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let sol = &game.solutions()[0];
        let s = game.coupled_strategies(&delta).unwrap();
        assert!((&s.u + &sol.k * &delta).amax() < 1e-12);
        assert!((&s.w - &sol.l_gain * &delta).amax() < 1e-12);
        // with no neighbors, Σ a_ij u_j and Σ a_ij w_j in the attack recursion coincide (both zero)
        let c = game.centralized_strategies(&delta).unwrap();
        assert!((c.u - s.u).amax() < 1e-12);
        assert!((c.w - s.w).amax() < 1e-12);
    }

    #[test]
    fn coupled_solution_is_fixed_point_of_local_recursion() {
        let top = Topology::path(2, &[(0, 1.0)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta = random_delta(&mut rng, 8);
        let s = game.coupled_strategies(&delta).unwrap();
        let t = game.topology();
        for i in 0..2 {
            let sol = &game.solutions()[i];
            let d_i = delta.rows(i * 4, 4);
            let denom: f64 = t.adjacency().row(i).sum() + t.pinning()[i];
            let mut nb_u = Vector::zeros(2);
            let mut nb_w = Vector::zeros(2);
            for (j, a) in t.neighbors(i) {
                nb_u += s.u.rows(j * 2, 2) * a;
                nb_w += s.w.rows(j * 2, 2) * a;
            }
            let u_i = (nb_u - &sol.k * d_i) / denom;
            let w_i = (nb_w + &sol.l_gain * d_i) / denom;
            assert!((u_i - s.u.rows(i * 2, 2)).amax() < 1e-12);
            assert!((w_i - s.w.rows(i * 2, 2)).amax() < 1e-12);
        }
    }

    #[test]
    fn strategies_agree_on_ring4() {
        let top = Topology::ring(4, &[(0, 1.0)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let delta = random_delta(&mut rng, 16);
            let a = game.centralized_strategies(&delta).unwrap();
            let b = game.coupled_strategies(&delta).unwrap();
            assert!((a.u - b.u).amax() < 1e-10);
            assert!((a.w - b.w).amax() < 1e-10);
        }
    }

    #[test]
    fn value_function_scalar() {
        let game = scalar_game(Topology::path(1, &[(0, 1.0)]).unwrap());
        let v = game.value_function(&Vector::from_element(1, 2.0));
        assert!((v - 2.0 * 2f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn structured_costs_match_dense() {
        let top = Topology::ring(3, &[(2, 1.5)]).unwrap();
        let game = GlobalGame::homogeneous(top, AgentDynamics::planar_double_integrator(), vehicle_weights()).unwrap();
        let gw = game.build_global_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_delta(&mut rng, 6);
        let w = random_delta(&mut rng, 6);
        let d = random_delta(&mut rng, 12);
        assert!((game.control_cost(&u) - (u.transpose() * &gw.r * &u)[(0, 0)]).abs() < 1e-10);
        assert!((game.attack_cost(&w) - (w.transpose() * &gw.gamma * &w)[(0, 0)]).abs() < 1e-10);
        assert!((game.state_cost(&d) - (d.transpose() * &gw.q * &d)[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn rejects_wrong_delta_length() {
        let game = scalar_game(Topology::path(2, &[(0, 1.0)]).unwrap());
        assert!(matches!(
            game.coupled_strategies(&Vector::zeros(3)),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
