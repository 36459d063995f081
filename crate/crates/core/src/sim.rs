//! Closed-loop leader-follower simulation with formation offsets and attacks.

use serde::Serialize;

use crate::decouple::{self, Estimator, SignalDims};
use crate::error::{Error, Result};
use crate::game::GlobalGame;
use crate::linalg::{Mat, Vector};
use crate::riccati::{AgentDynamics, LocalWeights};
use crate::topology::Topology;

/// State norm beyond which a run is abandoned.
pub const BLOWUP_NORM: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Centralized,
    Algorithm1,
}

/// Piecewise-linear stacked attack signal, held constant outside its table.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalSignal {
    times: Vec<f64>,
    values: Vec<Vector>,
}

impl ExternalSignal {
    pub fn new(times: Vec<f64>, values: Vec<Vector>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Validation(
                "external attack table needs matching, non-empty time and value lists".into(),
            ));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Validation(
                "external attack times must be finite and strictly increasing".into(),
            ));
        }
        let len = values[0].len();
        if values.iter().any(|v| v.len() != len) {
            return Err(Error::Validation("external attack rows differ in length".into()));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.values[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, t: f64) -> Vector {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.values[0].clone();
        }
        if k == self.times.len() {
            return self.values[k - 1].clone();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let s = (t - t0) / (t1 - t0);
        &self.values[k - 1] * (1.0 - s) + &self.values[k] * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackMode {
    Off,
    WorstCase,
    External(ExternalSignal),
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Off => "off",
            AttackMode::WorstCase => "worst_case",
            AttackMode::External(_) => "external",
        }
    }
}

/// Offsets `x_{c,i}` active from `start` until the next segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FormationSegment {
    pub start: f64,
    pub offsets: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSettings {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Assumption bound on `‖δ̇_i‖`; estimated by a centralized dry run when absent.
    pub eta: Option<Vec<f64>>,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub top: Topology,
    pub dynamics: AgentDynamics,
    pub weights: Vec<LocalWeights>,
    pub x0: Vec<Vector>,
    pub leader0: Vector,
    pub formation: Vec<FormationSegment>,
    pub attack: AttackMode,
    pub controller: ControllerMode,
    pub estimator: Option<EstimatorSettings>,
    pub h: f64,
    pub t_max: f64,
    pub decimation: usize,
}

impl ScenarioConfig {
    pub fn n_agents(&self) -> usize {
        self.top.n_agents()
    }

    pub fn steps(&self) -> usize {
        (self.t_max / self.h).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let n_agents = self.n_agents();
        let n = self.dynamics.n();
        let bad = |m: String| Err(Error::Validation(m));
        if self.weights.len() != n_agents {
            return bad(format!("{} weight sets for {n_agents} agents", self.weights.len()));
        }
        for (i, w) in self.weights.iter().enumerate() {
            w.check_dims(&self.dynamics)
                .map_err(|e| Error::Validation(format!("agent {}: {e}", i + 1)))?;
        }
        if self.x0.len() != n_agents {
            return bad(format!("{} initial states for {n_agents} agents", self.x0.len()));
        }
        if let Some(i) = self.x0.iter().position(|x| x.len() != n) {
            return bad(format!(
                "initial state of agent {} has length {}, expected {n}",
                i + 1,
                self.x0[i].len()
            ));
        }
        if self.leader0.len() != n {
            return bad(format!("leader state has length {}, expected {n}", self.leader0.len()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("plant step h = {} must be positive", self.h));
        }
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return bad(format!("horizon t_max = {} must be nonnegative", self.t_max));
        }
        if self.decimation == 0 {
            return bad("decimation must be at least 1".into());
        }
        if self.formation.is_empty() {
            return bad("formation schedule needs at least one segment".into());
        }
        if self.formation[0].start != 0.0 {
            return bad("first formation segment must start at t = 0".into());
        }
        for (s, seg) in self.formation.iter().enumerate() {
            if s > 0 && !(seg.start > self.formation[s - 1].start) {
                return bad("formation segment starts must be strictly increasing".into());
            }
            if seg.offsets.len() != n_agents {
                return bad(format!("formation segment {} has {} offsets", s + 1, seg.offsets.len()));
            }
            for (i, c) in seg.offsets.iter().enumerate() {
                if c.len() != n {
                    return bad(format!(
                        "offset of agent {} in segment {} has length {}",
                        i + 1,
                        s + 1,
                        c.len()
                    ));
                }
                // offsets must be equilibria of the drift (zero velocity components)
                let drift = (&self.dynamics.a * c).amax();
                if drift > 1e-12 * (1.0 + c.amax()) {
                    return bad(format!(
                        "offset of agent {} in segment {} is not at rest under A (‖A x_c‖ = {drift:e})",
                        i + 1,
                        s + 1
                    ));
                }
            }
        }
        if let AttackMode::External(sig) = &self.attack {
            if sig.len() != n_agents * self.dynamics.m2() {
                return bad(format!(
                    "external attack rows have length {}, expected {}",
                    sig.len(),
                    n_agents * self.dynamics.m2()
                ));
            }
        }
        if self.controller == ControllerMode::Algorithm1 {
            let Some(est) = &self.estimator else {
                return bad("controller algorithm1 needs an [estimator] section".into());
            };
            if est.alpha.len() != n_agents || est.beta.len() != n_agents {
                return bad("estimator gains must be given for every agent".into());
            }
            if est.alpha.iter().chain(&est.beta).any(|g| !(*g > 0.0 && g.is_finite())) {
                return bad("estimator gains must be positive".into());
            }
            if let Some(eta) = &est.eta {
                if eta.len() != n_agents || eta.iter().any(|e| !(*e >= 0.0)) {
                    return bad("eta must be a nonnegative value per agent".into());
                }
            }
            substeps(self.h, est.h)?;
        }
        Ok(())
    }

    pub fn build_game(&self) -> Result<GlobalGame> {
        GlobalGame::new(self.top.clone(), self.dynamics.clone(), self.weights.clone())
    }

    /// Index of the formation segment in force at plant step `k`.
    pub fn segment_at_step(&self, k: usize) -> usize {
        let starts: Vec<usize> = self.formation.iter().map(|s| self.step_of(s.start)).collect();
        starts.iter().rposition(|&s| s <= k).unwrap_or(0)
    }

    /// Plant step at which a segment starting at `t` takes effect.
    pub fn step_of(&self, t: f64) -> usize {
        (t / self.h).round() as usize
    }
}

fn substeps(h: f64, h_est: f64) -> Result<usize> {
    if !(h_est > 0.0 && h_est <= h) {
        return Err(Error::Validation(format!(
            "estimator step {h_est} must lie in (0, h = {h}]"
        )));
    }
    let k = (h / h_est).round();
    if ((k * h_est - h) / h).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "estimator step {h_est} does not divide the plant step {h}"
        )));
    }
    Ok(k as usize)
}

/// `δ_i = Σ_j a_ij((x_i − x_{c,i}) − (x_j − x_{c,j})) + g_i(x_i − x₀ − x_{c,i})`, stacked.
pub fn neighbor_error(top: &Topology, x: &[Vector], x0: &Vector, offsets: &[Vector]) -> Result<Vector> {
    let n_agents = top.n_agents();
    if x.len() != n_agents || offsets.len() != n_agents {
        return Err(Error::DimensionMismatch(format!(
            "{} states and {} offsets for {n_agents} agents",
            x.len(),
            offsets.len()
        )));
    }
    let n = x0.len();
    if x.iter().chain(offsets).any(|v| v.len() != n) {
        return Err(Error::DimensionMismatch(format!("agent vectors must have length {n}")));
    }
    let xi: Vec<Vector> = x.iter().zip(offsets).map(|(x, c)| x - c).collect();
    let mut delta = Vector::zeros(n_agents * n);
    for i in 0..n_agents {
        let mut d = (&xi[i] - x0) * top.pinning()[i];
        for (j, a) in top.neighbors(i) {
            d += (&xi[i] - &xi[j]) * a;
        }
        delta.rows_mut(i * n, n).copy_from(&d);
    }
    Ok(delta)
}

fn rk4(a: &Mat, x: &Vector, forcing: &Vector, h: f64) -> Vector {
    let f = |y: &Vector| a * y + forcing;
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// One RK4 step of every agent and the leader with `u`, `w` held over the step.
pub fn step_plant(
    dyn_: &AgentDynamics,
    x: &[Vector],
    x0: &Vector,
    u: &Vector,
    w: &Vector,
    h: f64,
) -> (Vec<Vector>, Vector) {
    let (m1, m2) = (dyn_.m1(), dyn_.m2());
    let next = x
        .iter()
        .enumerate()
        .map(|(i, xi)| {
            let forcing = &dyn_.b * u.rows(i * m1, m1) + &dyn_.d * w.rows(i * m2, m2);
            rk4(&dyn_.a, xi, &forcing, h)
        })
        .collect();
    let zero = Vector::zeros(x0.len());
    (next, rk4(&dyn_.a, x0, &zero, h))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub x0: Vec<f64>,
    pub delta: Vec<f64>,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub delta_norm: f64,
    pub value: f64,
    pub lhs_running: f64,
    pub rhs_running: f64,
    /// `‖X − 1⊗ψ̄‖₂`, NaN without an estimator.
    pub est_err_norm: f64,
    pub w_hat: Option<Vec<f64>>,
}

/// Jump of the value function when the formation offsets change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub value_before: f64,
    pub value_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorDiagnostics {
    pub t_star: f64,
    /// Time after which `max_i ‖X_i − ψ̄‖∞` stayed within `band = 2 max_i(α_i + β_i) h_est`.
    pub settling_time: Option<f64>,
    pub band: f64,
    pub singular_fallbacks: usize,
    pub eta: Vec<f64>,
    pub alpha_min: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioTrace {
    pub n_agents: usize,
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub h: f64,
    pub controller: ControllerMode,
    pub attack: &'static str,
    pub samples: Vec<TraceSample>,
    pub switches: Vec<SwitchEvent>,
    /// `∫ δᵀQδ + uᵀRu`
    pub lhs: f64,
    /// `∫ wᵀΓw`
    pub attack_energy: f64,
    pub estimator: Option<EstimatorDiagnostics>,
}

impl ScenarioTrace {
    pub fn final_delta_norm(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.delta_norm)
    }

    /// Earliest sample time in `[from, until)` after which `‖δ‖` stays below `tol` up to `until`.
    pub fn settling_time(&self, tol: f64, from: f64, until: f64) -> Option<f64> {
        let window: Vec<&TraceSample> = self.samples.iter().filter(|s| s.t >= from && s.t < until).collect();
        let last_bad = window.iter().rposition(|s| s.delta_norm >= tol);
        match last_bad {
            None => window.first().map(|s| s.t),
            Some(k) if k + 1 < window.len() => Some(window[k + 1].t),
            Some(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs + 1e-6 (1 + rhs) − lhs`
    pub margin: f64,
    pub holds: bool,
}

/// Integrated bounded-gain inequality `∫(δᵀQδ + uᵀRu) ≤ ∫wᵀΓw + 2V(δ(0))`.
///
/// Offset switches reset `δ` discontinuously, so each switch adds `2(V⁺ − V⁻)` to the
/// right-hand side; without switches this is exactly the textbook form.
pub fn l2_certificate(trace: &ScenarioTrace, game: &GlobalGame) -> Certificate {
    let v0 = trace
        .samples
        .first()
        .map_or(0.0, |s| game.value_function(&Vector::from_column_slice(&s.delta)));
    let jumps: f64 = trace.switches.iter().map(|s| s.value_after - s.value_before).sum();
    let lhs = trace.lhs;
    let rhs = trace.attack_energy + 2.0 * v0 + 2.0 * jumps;
    let margin = rhs + 1e-6 * (1.0 + rhs.abs()) - lhs;
    Certificate {
        lhs,
        rhs,
        margin,
        holds: margin >= 0.0,
    }
}

/// Spectral abscissa of `Ā − B̄R⁻¹B̄ᵀP` is negative.
pub fn internal_stability_check(game: &GlobalGame) -> Result<bool> {
    let gw = game.build_global_weights();
    let (a_bar, b_bar, _) = game.global_dynamics();
    let r_inv =
        gw.r.clone()
            .cholesky()
            .ok_or_else(|| Error::NoStabilizingSolution("global R is not positive definite".into()))?
            .inverse();
    let closed = &a_bar - &b_bar * r_inv * b_bar.transpose() * game.block_p();
    Ok(crate::linalg::spectral_abscissa(&closed) < 0.0)
}

/// Gain check outcome for the estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainReport {
    pub eta: Vec<f64>,
    pub eta_explicit: bool,
    pub alpha_min: Vec<f64>,
    pub beta_factor: f64,
    pub warnings: Vec<String>,
}

/// Applies the estimator gain conditions.
///
/// `β_i ≤ 2N̄α_i` is always rejected. `α_i < α_min` is rejected when `η` was given
/// explicitly and only warned about when `η` comes from the dry-run estimate.
pub fn check_estimator_gains(config: &ScenarioConfig, game: &GlobalGame) -> Result<GainReport> {
    let est = config
        .estimator
        .as_ref()
        .ok_or_else(|| Error::Validation("no estimator settings".into()))?;
    let mut warnings = Vec::new();
    if config.top.max_weight() > 1.0 {
        warnings.push(format!(
            "max edge weight {} exceeds 1; the estimator gain bounds assume unit-scale weights",
            config.top.max_weight()
        ));
    }
    let n_bar = config.top.n_bar();
    for i in 0..config.n_agents() {
        let bounds = decouple::gain_bounds(0.0, &game.solutions()[i].k, &game.solutions()[i].l_gain, n_bar);
        if !bounds.beta_ok(est.alpha[i], est.beta[i]) {
            let msg = format!(
                "agent {}: beta = {} must exceed 2*N_bar*alpha = {}",
                i + 1,
                est.beta[i],
                bounds.beta_factor * est.alpha[i]
            );
            log::warn!("{msg}");
            return Err(Error::Validation(msg));
        }
    }
    let (eta, explicit) = match &est.eta {
        Some(e) => (e.clone(), true),
        None => (estimate_eta(config, game)?, false),
    };
    let mut alpha_min = Vec::with_capacity(config.n_agents());
    for i in 0..config.n_agents() {
        let sol = &game.solutions()[i];
        let bounds = decouple::gain_bounds(eta[i], &sol.k, &sol.l_gain, n_bar);
        alpha_min.push(bounds.alpha_min);
        if !bounds.alpha_ok(est.alpha[i]) {
            let msg = format!(
                "agent {}: alpha = {} is below the bound {:.6e} for eta = {:.6e}",
                i + 1,
                est.alpha[i],
                bounds.alpha_min,
                eta[i]
            );
            if explicit {
                log::warn!("{msg}");
                return Err(Error::Validation(msg));
            }
            warnings.push(msg);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(GainReport {
        eta,
        eta_explicit: explicit,
        alpha_min,
        beta_factor: 2.0 * n_bar as f64,
        warnings,
    })
}

/// Twice the largest `‖δ̇_i‖₂` seen in a centralized run of the same scenario.
pub fn estimate_eta(config: &ScenarioConfig, game: &GlobalGame) -> Result<Vec<f64>> {
    let mut dry = config.clone();
    dry.controller = ControllerMode::Centralized;
    dry.decimation = 1;
    let trace = run_with_game(&dry, game)?;
    let n = config.dynamics.n();
    let mut eta = vec![0.0_f64; config.n_agents()];
    for pair in trace.samples.windows(2) {
        let dt = pair[1].t - pair[0].t;
        for (i, e) in eta.iter_mut().enumerate() {
            let rate: f64 = (0..n)
                .map(|k| (pair[1].delta[i * n + k] - pair[0].delta[i * n + k]).powi(2))
                .sum::<f64>()
                .sqrt()
                / dt;
            // finite differences across an offset switch are jumps, not rates
            if !trace.switches.iter().any(|s| s.t > pair[0].t && s.t <= pair[1].t) {
                *e = e.max(rate);
            }
        }
    }
    Ok(eta.into_iter().map(|e| 2.0 * e).collect())
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioTrace> {
    config.validate()?;
    let game = config.build_game()?;
    run_with_game(config, &game)
}

struct Estimation {
    est: Estimator,
    dims: SignalDims,
    substeps: usize,
    h: f64,
    held_u: Vec<Vec<f64>>,
    held_w: Vec<Vec<f64>>,
    fallbacks: usize,
    band: f64,
    last_unsettled: Option<f64>,
    settled_once: bool,
    t_star: f64,
    gains: GainReport,
}

impl Estimation {
    fn payloads(game: &GlobalGame, delta: &Vector) -> Result<Vec<Vec<f64>>> {
        let n = game.dims().n;
        let rows = game.grounded().rows();
        game.solutions()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(decouple::build_signal(&rows[i], &s.k, &s.l_gain, &delta.as_slice()[i * n..(i + 1) * n])?.psi)
            })
            .collect()
    }

    /// Reads every agent's `û_i`, `ŵ_i`, keeping the last valid output on a singular estimate.
    fn outputs(&mut self) -> (Vector, Vector) {
        for i in 0..self.dims.agents {
            match self.est.reconstruct(i, self.dims) {
                Ok(out) if out.u_hat.iter().chain(&out.w_hat).all(|v| v.is_finite()) => {
                    self.held_u[i] = out.u_hat;
                    self.held_w[i] = out.w_hat;
                }
                _ => self.fallbacks += 1,
            }
        }
        (
            Vector::from_iterator(self.dims.agents * self.dims.m1, self.held_u.iter().flatten().copied()),
            Vector::from_iterator(self.dims.agents * self.dims.m2, self.held_w.iter().flatten().copied()),
        )
    }
}

pub fn run_with_game(config: &ScenarioConfig, game: &GlobalGame) -> Result<ScenarioTrace> {
    config.validate()?;
    let top = &config.top;
    let dyn_ = &config.dynamics;
    let (n_agents, n, m1, m2) = (config.n_agents(), dyn_.n(), dyn_.m1(), dyn_.m2());
    let h = config.h;
    let steps = config.steps();

    let mut x = config.x0.clone();
    let mut x0 = config.leader0.clone();
    let mut seg = 0;
    let mut offsets = config.formation[0].offsets.clone();
    let mut delta = neighbor_error(top, &x, &x0, &offsets)?;

    let mut estimation = match config.controller {
        ControllerMode::Centralized => None,
        ControllerMode::Algorithm1 => {
            let settings = config.estimator.as_ref().expect("validated");
            let gains = check_estimator_gains(config, game)?;
            let dims = SignalDims {
                agents: n_agents,
                m1,
                m2,
            };
            let triples: Vec<_> = (0..n_agents)
                .map(|i| (settings.alpha[i], settings.beta[i], gains.eta[i]))
                .collect();
            let mut est = Estimator::new(top, dims.len(), &triples)?;
            est.set_signals(Estimation::payloads(game, &delta)?)?;
            let t_star = decouple::convergence_time(&est, settings.h);
            let max_gain = (0..n_agents)
                .map(|i| settings.alpha[i] + settings.beta[i])
                .fold(0.0, f64::max);
            Some(Estimation {
                est,
                dims,
                substeps: substeps(h, settings.h)?,
                h: settings.h,
                held_u: vec![vec![0.0; m1]; n_agents],
                held_w: vec![vec![0.0; m2]; n_agents],
                fallbacks: 0,
                band: 2.0 * max_gain * settings.h,
                last_unsettled: None,
                settled_once: false,
                t_star,
                gains,
            })
        }
    };

    let attack_at = |t: f64, exact_w: &Vector| -> Vector {
        match &config.attack {
            AttackMode::Off => Vector::zeros(n_agents * m2),
            AttackMode::WorstCase => exact_w.clone(),
            AttackMode::External(sig) => sig.at(t),
        }
    };
    let running_cost =
        |delta: &Vector, u: &Vector, w: &Vector| (game.state_cost(delta) + game.control_cost(u), game.attack_cost(w));

    let mut samples = Vec::with_capacity(steps / config.decimation + 2);
    let mut switches = Vec::new();
    let mut lhs = 0.0;
    let mut attack_energy = 0.0;
    let mut jumps = 0.0;
    let v0 = game.value_function(&delta);
    let mut prev: Option<(f64, f64)> = None;
    let mut prev_u = Vector::zeros(n_agents * m1);

    for k in 0..=steps {
        let t = k as f64 * h;

        // close the previous interval with the offsets it was integrated under
        if let Some((c_prev, a_prev)) = prev {
            let exact = game.coupled_strategies(&delta)?;
            let u_end = match &estimation {
                None => exact.u.clone(),
                Some(_) => prev_u.clone(),
            };
            let w_end = attack_at(t, &exact.w);
            let (c, a) = running_cost(&delta, &u_end, &w_end);
            lhs += 0.5 * h * (c_prev + c);
            attack_energy += 0.5 * h * (a_prev + a);
        }

        if seg + 1 < config.formation.len() && config.step_of(config.formation[seg + 1].start) == k {
            let value_before = game.value_function(&delta);
            seg += 1;
            offsets = config.formation[seg].offsets.clone();
            delta = neighbor_error(top, &x, &x0, &offsets)?;
            let value_after = game.value_function(&delta);
            jumps += value_after - value_before;
            switches.push(SwitchEvent {
                t,
                value_before,
                value_after,
            });
        }

        let exact = game.coupled_strategies(&delta)?;
        let (u, est_err) = match estimation.as_mut() {
            None => (exact.u.clone(), f64::NAN),
            Some(e) => {
                e.est.set_signals(Estimation::payloads(game, &delta)?)?;
                let (u_hat, _) = e.outputs();
                let err = e.est.consensus_error();
                if e.est.max_abs_error() > e.band {
                    e.last_unsettled = Some(t);
                } else {
                    e.settled_once = true;
                }
                (u_hat, err)
            }
        };
        let w = attack_at(t, &exact.w);
        let (c, a) = running_cost(&delta, &u, &w);
        prev = Some((c, a));
        prev_u = u.clone();

        if k % config.decimation == 0 || k == steps {
            let w_hat = estimation
                .as_ref()
                .map(|e| e.held_w.iter().flatten().copied().collect::<Vec<f64>>());
            samples.push(TraceSample {
                t,
                x: x.iter().flat_map(|v| v.iter().copied()).collect(),
                x0: x0.iter().copied().collect(),
                delta: delta.iter().copied().collect(),
                u: u.iter().copied().collect(),
                w: w.iter().copied().collect(),
                delta_norm: delta.norm(),
                value: game.value_function(&delta),
                lhs_running: lhs,
                rhs_running: attack_energy + 2.0 * v0 + 2.0 * jumps,
                est_err_norm: est_err,
                w_hat,
            });
        }
        if k == steps {
            break;
        }

        let (xn, x0n) = step_plant(dyn_, &x, &x0, &u, &w, h);
        x = xn;
        x0 = x0n;
        let norm = x.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if !(norm <= BLOWUP_NORM) {
            return Err(Error::NumericBlowup { t: t + h, norm });
        }
        if let Some(e) = estimation.as_mut() {
            for _ in 0..e.substeps {
                e.est.step(e.h);
            }
        }
        delta = neighbor_error(top, &x, &x0, &offsets)?;
    }

    let estimator = estimation.map(|e| EstimatorDiagnostics {
        t_star: e.t_star,
        settling_time: match (e.settled_once, e.last_unsettled) {
            (false, _) => None,
            (true, None) => Some(0.0),
            (true, Some(t)) if t < samples.last().map_or(0.0, |s| s.t) => Some(t + h),
            _ => None,
        },
        band: e.band,
        singular_fallbacks: e.fallbacks,
        eta: e.gains.eta,
        alpha_min: e.gains.alpha_min,
    });

    Ok(ScenarioTrace {
        n_agents,
        n,
        m1,
        m2,
        h,
        controller: config.controller,
        attack: config.attack.name(),
        samples,
        switches,
        lhs,
        attack_energy,
        estimator,
    })
}
