//! Finite-time distributed decoupling of the coupled saddle-point strategies.
//!
//! Each agent packs a local payload `ψ_i = [vecs(T_i); I_i; W_i]` with
//!
//! ```text
//! T_i = (L+G)_iᵀ (L+G)_i
//! I_i = −((L+G)_iᵀ ⊗ I_m1) K_i δ_i
//! W_i =  ((L+G)_iᵀ ⊗ I_m2) L_i δ_i
//! ```
//!
//! and runs a sign-based dynamic average consensus estimator
//!
//! ```text
//! ḟ_i = −α_i sgn(Σ_j a_ij (X_i − X_j))
//! v̇_i = −β_i sgn(v_i − Σ_j a_ij (f_i − f_j))
//! X_i = v_i + ψ_i
//! ```
//!
//! Once every `X_i` equals the network average `ψ̄`, the average of the `T_i`
//! is `(L+G)ᵀ(L+G)/N` and agent `i` recovers its own coupled strategy from
//! `(T̂ ⊗ I)⁻¹ Î` without any global solve.
//!
//! The estimator's internal consensus state (`w_i` in the usual notation) is
//! called `f` here so that it cannot be confused with the attack input `w`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::topology::Topology;

/// Componentwise sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Length of `vecs` for an `n × n` symmetric matrix.
pub fn vecs_len(n: usize) -> usize {
    (n + 1) * n / 2
}

/// Payload length `m̄ = (2 m1 + 2 m2 + N + 1) N / 2`.
pub fn signal_len(agents: usize, m1: usize, m2: usize) -> usize {
    (2 * m1 + 2 * m2 + agents + 1) * agents / 2
}

/// Upper triangle stacked column by column, unscaled.
pub fn vecs(s: &Mat) -> Result<Vec<f64>> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!("vecs of a {:?} matrix", s.shape())));
    }
    let asym = linalg::asymmetry(s);
    if asym > 1e-10 {
        return Err(Error::NotSymmetric(asym));
    }
    let n = s.nrows();
    let mut out = Vec::with_capacity(vecs_len(n));
    for j in 0..n {
        for i in 0..=j {
            out.push(s[(i, j)]);
        }
    }
    Ok(out)
}

pub fn unvecs(v: &[f64], n: usize) -> Result<Mat> {
    if v.len() != vecs_len(n) {
        return Err(Error::DimensionMismatch(format!(
            "vecs payload of length {} for a {n}x{n} matrix",
            v.len()
        )));
    }
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..=j {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalSignal {
    pub t: Mat,
    pub i: Vec<f64>,
    pub w: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Builds agent `i`'s payload from its grounded-Laplacian row, gains and neighbor error.
pub fn build_signal(row: &[f64], k: &Mat, l: &Mat, delta_i: &[f64]) -> Result<LocalSignal> {
    let agents = row.len();
    let n = delta_i.len();
    if k.ncols() != n || l.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "K is {:?} and L is {:?} for a state of size {n}",
            k.shape(),
            l.shape()
        )));
    }
    let (m1, m2) = (k.nrows(), l.nrows());
    let r = nalgebra::DVector::from_column_slice(row);
    let t = &r * r.transpose();
    let d = nalgebra::DVector::from_column_slice(delta_i);
    let kd = k * &d;
    let ld = l * &d;
    let mut i_part = Vec::with_capacity(agents * m1);
    let mut w_part = Vec::with_capacity(agents * m2);
    for &rj in row {
        i_part.extend(kd.iter().map(|x| -rj * x));
        w_part.extend(ld.iter().map(|x| rj * x));
    }
    let mut psi = vecs(&t)?;
    psi.extend_from_slice(&i_part);
    psi.extend_from_slice(&w_part);
    debug_assert_eq!(psi.len(), signal_len(agents, m1, m2));
    Ok(LocalSignal {
        t,
        i: i_part,
        w: w_part,
        psi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GainBounds {
    pub alpha_min: f64,
    /// `β` must be strictly greater than `beta_factor · α`.
    pub beta_factor: f64,
}

impl GainBounds {
    pub fn alpha_ok(&self, alpha: f64) -> bool {
        alpha >= self.alpha_min
    }

    pub fn beta_ok(&self, alpha: f64, beta: f64) -> bool {
        beta > self.beta_factor * alpha
    }
}

/// `α ≥ 1 + η ‖[K; L]‖₂ N̄⁴ / 2` and `β > 2 N̄ α`.
pub fn gain_bounds(eta: f64, k: &Mat, l: &Mat, n_bar: usize) -> GainBounds {
    let stacked = Mat::from_fn(k.nrows() + l.nrows(), k.ncols(), |r, c| {
        if r < k.nrows() {
            k[(r, c)]
        } else {
            l[(r - k.nrows(), c)]
        }
    });
    let nb = n_bar as f64;
    GainBounds {
        alpha_min: 1.0 + eta * linalg::spectral_norm(&stacked) * nb.powi(4) / 2.0,
        beta_factor: 2.0 * nb,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub v: Vec<f64>,
    pub f: Vec<f64>,
    pub x: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl EstimatorState {
    pub fn zeros(len: usize, alpha: f64, beta: f64, eta: f64) -> Self {
        Self {
            v: vec![0.0; len],
            f: vec![0.0; len],
            x: vec![0.0; len],
            alpha,
            beta,
            eta,
        }
    }
}

/// What one agent may read during an estimator step.
pub trait Neighborhood {
    fn own(&self) -> &EstimatorState;
    fn neighbors(&self) -> &[(usize, f64)];
    fn neighbor_x(&self, j: usize) -> &[f64];
    fn neighbor_f(&self, j: usize) -> &[f64];
}

/// One forward-Euler step of agent `i`'s `(f, v)` from pre-step values.
pub fn local_update<V: Neighborhood>(view: &V, h: f64, f_out: &mut [f64], v_out: &mut [f64]) {
    let own = view.own();
    let nbrs = view.neighbors();
    let (ha, hb) = (h * own.alpha, h * own.beta);
    for c in 0..own.x.len() {
        let mut dx = 0.0;
        let mut df = 0.0;
        for &(j, a) in nbrs {
            dx += a * (own.x[c] - view.neighbor_x(j)[c]);
            df += a * (own.f[c] - view.neighbor_f(j)[c]);
        }
        f_out[c] = own.f[c] - ha * sgn(dx);
        v_out[c] = own.v[c] - hb * sgn(own.v[c] - df);
    }
}

struct SliceView<'a> {
    i: usize,
    states: &'a [EstimatorState],
    nbrs: &'a [(usize, f64)],
}

impl Neighborhood for SliceView<'_> {
    fn own(&self) -> &EstimatorState {
        &self.states[self.i]
    }
    fn neighbors(&self) -> &[(usize, f64)] {
        self.nbrs
    }
    fn neighbor_x(&self, j: usize) -> &[f64] {
        &self.states[j].x
    }
    fn neighbor_f(&self, j: usize) -> &[f64] {
        &self.states[j].f
    }
}

/// Synchronous step over all agents; `psi[i]` is agent `i`'s current payload.
pub fn estimator_step(states: &mut [EstimatorState], psi: &[Vec<f64>], top: &Topology, h: f64) {
    let nbrs: Vec<Vec<(usize, f64)>> = (0..top.n_agents()).map(|i| top.neighbors(i).collect()).collect();
    let mut next = states.to_vec();
    step_into(states, &mut next, &nbrs, h);
    for (s, p) in next.iter_mut().zip(psi) {
        refresh_x(s, p);
    }
    states.clone_from_slice(&next);
}

fn step_into(cur: &[EstimatorState], next: &mut [EstimatorState], nbrs: &[Vec<(usize, f64)>], h: f64) {
    for (i, out) in next.iter_mut().enumerate() {
        let view = SliceView {
            i,
            states: cur,
            nbrs: &nbrs[i],
        };
        local_update(&view, h, &mut out.f, &mut out.v);
    }
}

fn refresh_x(s: &mut EstimatorState, psi: &[f64]) {
    for ((x, v), p) in s.x.iter_mut().zip(&s.v).zip(psi) {
        *x = v + p;
    }
}

/// Shape of the payload: `(N, m1, m2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SignalDims {
    pub agents: usize,
    pub m1: usize,
    pub m2: usize,
}

impl SignalDims {
    pub fn len(&self) -> usize {
        signal_len(self.agents, self.m1, self.m2)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupleOutput {
    pub u_hat: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub t_hat: Mat,
    pub i_hat: Vec<f64>,
    pub w_sum_hat: Vec<f64>,
    /// Settling-time bound when one was computed for the run producing this output.
    pub t_star: Option<f64>,
}

/// Reads agent `i`'s estimate `X_i` back into its own control and attack inputs.
pub fn reconstruct(x: &[f64], i: usize, dims: SignalDims) -> Result<DecoupleOutput> {
    let SignalDims { agents, m1, m2 } = dims;
    if x.len() != dims.len() || i >= agents {
        return Err(Error::DimensionMismatch(format!(
            "payload of length {} for agent {} with dims {:?}",
            x.len(),
            i + 1,
            dims
        )));
    }
    let p = vecs_len(agents);
    let t_hat = unvecs(&x[..p], agents)?;
    let i_hat = x[p..p + m1 * agents].to_vec();
    let w_sum_hat = x[p + m1 * agents..].to_vec();

    let svd = t_hat.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smax.is_finite() && smax > 0.0 && smin > 1e-10 * smax) {
        return Err(Error::SingularEstimate { agent: i });
    }
    let solve = |rhs: &[f64], block: usize| -> Result<Vec<f64>> {
        let rows = linalg::blocks_as_rows(rhs, agents, block);
        let y = svd
            .solve(&rows, 0.0)
            .map_err(|_| Error::SingularEstimate { agent: i })?;
        Ok(y.row(i).iter().copied().collect())
    };
    Ok(DecoupleOutput {
        u_hat: solve(&i_hat, m1)?,
        w_hat: solve(&w_sum_hat, m2)?,
        t_hat,
        i_hat,
        w_sum_hat,
        t_star: None,
    })
}

/// All agents' estimator states together with their current payloads.
#[derive(Debug, Clone)]
pub struct Estimator {
    states: Vec<EstimatorState>,
    next: Vec<EstimatorState>,
    psi: Vec<Vec<f64>>,
    nbrs: Vec<Vec<(usize, f64)>>,
    laplacian: Mat,
    lambda2: f64,
    time: f64,
}

impl Estimator {
    /// Zero `v` and `f`; `X` follows the first payload set with [`Estimator::set_signals`].
    pub fn new(top: &Topology, len: usize, gains: &[(f64, f64, f64)]) -> Result<Self> {
        if gains.len() != top.n_agents() {
            return Err(Error::DimensionMismatch(format!(
                "{} gain triples for {} agents",
                gains.len(),
                top.n_agents()
            )));
        }
        let lambda2 = top.lambda2()?;
        let states: Vec<_> = gains
            .iter()
            .map(|&(a, b, e)| EstimatorState::zeros(len, a, b, e))
            .collect();
        Ok(Self {
            next: states.clone(),
            states,
            psi: vec![vec![0.0; len]; top.n_agents()],
            nbrs: (0..top.n_agents()).map(|i| top.neighbors(i).collect()).collect(),
            laplacian: top.laplacian(),
            lambda2,
            time: 0.0,
        })
    }

    pub fn with_states(top: &Topology, states: Vec<EstimatorState>, psi: Vec<Vec<f64>>) -> Result<Self> {
        let len = psi.first().map_or(0, |p| p.len());
        let gains: Vec<_> = states.iter().map(|s| (s.alpha, s.beta, s.eta)).collect();
        let mut est = Self::new(top, len, &gains)?;
        est.states = states;
        est.next = est.states.clone();
        est.set_signals(psi)?;
        Ok(est)
    }

    pub fn set_signals(&mut self, psi: Vec<Vec<f64>>) -> Result<()> {
        let len = self.signal_len();
        if psi.len() != self.states.len() || psi.iter().any(|p| p.len() != len) {
            return Err(Error::DimensionMismatch("payload count or length".into()));
        }
        self.psi = psi;
        for (s, p) in self.states.iter_mut().zip(&self.psi) {
            refresh_x(s, p);
        }
        Ok(())
    }

    pub fn signal_len(&self) -> usize {
        self.states.first().map_or(0, |s| s.x.len())
    }

    pub fn states(&self) -> &[EstimatorState] {
        &self.states
    }

    pub fn signals(&self) -> &[Vec<f64>] {
        &self.psi
    }

    pub fn neighbor_lists(&self) -> &[Vec<(usize, f64)>] {
        &self.nbrs
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn step(&mut self, h: f64) {
        step_into(&self.states, &mut self.next, &self.nbrs, h);
        for (s, p) in self.next.iter_mut().zip(&self.psi) {
            refresh_x(s, p);
        }
        std::mem::swap(&mut self.states, &mut self.next);
        self.time += h;
    }

    /// Steps `round(duration / h)` times.
    pub fn run(&mut self, h: f64, duration: f64) {
        let steps = (duration / h).round() as usize;
        for _ in 0..steps {
            self.step(h);
        }
    }

    /// `ψ̄ = (1/N) Σ ψ_i`
    pub fn mean_signal(&self) -> Vec<f64> {
        let n = self.psi.len() as f64;
        let mut mean = vec![0.0; self.signal_len()];
        for p in &self.psi {
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x / n;
            }
        }
        mean
    }

    /// Per-agent `‖X_i − ψ̄‖₂`.
    pub fn agent_errors(&self) -> Vec<f64> {
        let mean = self.mean_signal();
        self.states
            .iter()
            .map(|s| s.x.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>().sqrt())
            .collect()
    }

    /// `max_i ‖X_i − ψ̄‖∞`
    pub fn max_abs_error(&self) -> f64 {
        let mean = self.mean_signal();
        self.states
            .iter()
            .flat_map(|s| s.x.iter().zip(&mean).map(|(x, m)| (x - m).abs()))
            .fold(0.0, f64::max)
    }

    /// `‖X − 1 ⊗ ψ̄‖₂`
    pub fn consensus_error(&self) -> f64 {
        self.agent_errors().iter().map(|e| e * e).sum::<f64>().sqrt()
    }

    /// `‖v − (L ⊗ I) f‖₂`
    pub fn vtilde_norm(&self) -> f64 {
        let n = self.states.len();
        let mut acc = 0.0;
        for i in 0..n {
            for c in 0..self.signal_len() {
                let lf: f64 = (0..n).map(|j| self.laplacian[(i, j)] * self.states[j].f[c]).sum();
                acc += (self.states[i].v[c] - lf).powi(2);
            }
        }
        acc.sqrt()
    }

    pub fn reconstruct(&self, i: usize, dims: SignalDims) -> Result<DecoupleOutput> {
        reconstruct(&self.states[i].x, i, dims)
    }
}

/// Settling-time bound `t* = ‖ṽ(0)‖ + ‖X(τ) − 1⊗ψ̄‖ / λ2` with `τ = ‖ṽ(0)‖`,
/// the second term measured by running a copy of the estimator to `τ` with the
/// current payloads held fixed.
pub fn convergence_time(est: &Estimator, h: f64) -> f64 {
    let tau = est.vtilde_norm();
    let mut probe = est.clone();
    if tau > 0.0 {
        let steps = (tau / h).ceil() as usize;
        for _ in 0..steps {
            probe.step(h);
        }
    }
    let tail = probe.consensus_error();
    if tail == 0.0 {
        tau
    } else {
        tau + tail / est.lambda2()
    }
}
