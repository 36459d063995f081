//! Acceptance suite: one pass/fail line per criterion.

use std::process::{Command, ExitCode};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hinf_coalition::cli::{default_scenario_dir, strategy_equivalence};
use hinf_coalition::config::load_config;
use hinf_coalition::decouple::{build_signal, convergence_time, gain_bounds, Estimator, EstimatorState, SignalDims};
use hinf_coalition::game::GlobalGame;
use hinf_coalition::linalg::{self, Mat, Vector};
use hinf_coalition::riccati::{gare_residual, solve_local_gare, AgentDynamics, LocalWeights};
use hinf_coalition::sim::{self, AttackMode, ControllerMode, ScenarioConfig};
use hinf_coalition::topology::Topology;
use hinf_coalition::Error;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

static WARNINGS: Mutex<Vec<String>> = Mutex::new(Vec::new());

struct Capture;

impl log::Log for Capture {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }
    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            WARNINGS.lock().unwrap().push(r.args().to_string());
        }
    }
    fn flush(&self) {}
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scenario(name: &str) -> ScenarioConfig {
    load_config(&default_scenario_dir().join(name)).unwrap().scenario
}

fn random_connected(rng: &mut ChaCha8Rng, n: usize, w_lo: f64, w_hi: f64) -> Topology {
    let mut edges = Vec::new();
    for j in 1..n {
        edges.push((rng.gen_range(0..j), j, rng.gen_range(w_lo..=w_hi)));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.3) && !edges.iter().any(|&(a, b, _)| (a, b) == (i, j) || (a, b) == (j, i)) {
                edges.push((i, j, rng.gen_range(w_lo..=w_hi)));
            }
        }
    }
    let mut pins = vec![(rng.gen_range(0..n), rng.gen_range(0.5..2.0))];
    for i in 0..n {
        if rng.gen_bool(0.2) {
            pins.push((i, rng.gen_range(0.5..2.0)));
        }
    }
    Topology::from_edges(n, &edges, &pins, n).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, m1: usize) -> LocalWeights {
    let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = &g * g.transpose() + Mat::identity(n, n) * rng.gen_range(0.5..10.0);
    let r = Mat::from_diagonal(&Vector::from_fn(m1, |_, _| rng.gen_range(0.5..2.0)));
    LocalWeights::new(q, r, rng.gen_range(1.6..5.0)).unwrap()
}

/// Random heterogeneous games on the planar vehicle, resampling weights whose GARE has no solution.
fn random_games(count: usize, seed: u64) -> Vec<GlobalGame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dyn_ = AgentDynamics::planar_double_integrator();
    let mut games = Vec::with_capacity(count);
    while games.len() < count {
        let n = rng.gen_range(1..=6);
        let top = random_connected(&mut rng, n, 0.2, 1.0);
        let weights = (0..n).map(|_| random_weights(&mut rng, 4, 2)).collect();
        match GlobalGame::new(top, dyn_.clone(), weights) {
            Ok(g) => games.push(g),
            Err(Error::NoStabilizingSolution(_)) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    games
}

fn c1_local_gare() -> Check {
    let dyn_ = AgentDynamics::planar_double_integrator();
    let q = Mat::identity(4, 4) * 10.0;
    let w = LocalWeights::new(q.clone(), Mat::identity(2, 2), 2.0).unwrap();
    let sol = solve_local_gare(&dyn_, &w).map_err(|e| e.to_string())?;
    let res = gare_residual(&dyn_, &w, &sol.p).unwrap();
    let tol = 1e-8 * (1.0 + q.norm());
    ensure(res < tol, || format!("residual {res:e} >= {tol:e}"))?;
    let pmin = linalg::min_sym_eigenvalue(&sol.p);
    ensure(pmin > 0.0, || format!("P not positive definite, lambda_min {pmin:e}"))?;
    let a_bk = &dyn_.a - &dyn_.b * &sol.k;
    let ab1 = linalg::spectral_abscissa(&a_bk);
    let ab2 = linalg::spectral_abscissa(&(&a_bk + &dyn_.d * &sol.l_gain));
    ensure(ab1 < 0.0 && ab2 < 0.0, || format!("abscissae {ab1} {ab2}"))?;

    let one = Mat::identity(1, 1);
    let scalar = AgentDynamics::new(Mat::zeros(1, 1), one.clone(), one.clone()).unwrap();
    let sw = LocalWeights::new(one.clone(), one, std::f64::consts::SQRT_2).unwrap();
    let p = solve_local_gare(&scalar, &sw).map_err(|e| e.to_string())?.p[(0, 0)];
    let err = (p - std::f64::consts::SQRT_2).abs();
    ensure(err < 1e-10, || format!("scalar P = {p}, error {err:e}"))?;
    Ok(format!(
        "residual {res:.2e}, lambda_min(P) {pmin:.3}, abscissae {ab1:.3}/{ab2:.3}, scalar error {err:.1e}"
    ))
}

fn c2_decomposition() -> Check {
    let games = random_games(60, 2);
    let mut worst_ratio = 0.0_f64;
    let mut weakest_negative = f64::INFINITY;
    for g in &games {
        let q_norm = g.build_global_weights().q.norm();
        let res = g.global_gare_residual();
        let tol = 1e-6 * (1.0 + q_norm);
        ensure(res < tol, || {
            format!("residual {res:e} >= {tol:e} on N={}", g.dims().agents)
        })?;
        worst_ratio = worst_ratio.max(res / tol);
        let n = g.dims().agents * g.dims().n;
        let shifted = g.block_p() + Mat::identity(n, n) * 0.1;
        let neg = g.global_gare_residual_at(&shifted).map_err(|e| e.to_string())?;
        ensure(neg > 1e-3, || format!("negative control residual {neg:e} <= 1e-3"))?;
        weakest_negative = weakest_negative.min(neg);
    }
    Ok(format!(
        "{} topologies, worst residual/tolerance {worst_ratio:.2e}, smallest negative-control residual {weakest_negative:.3}",
        games.len()
    ))
}

fn c3_equivalence() -> Check {
    let games = random_games(60, 3);
    let mut worst = 0.0_f64;
    for (k, g) in games.iter().enumerate() {
        let e = strategy_equivalence(g, 100, k as u64).map_err(|e| e.to_string())?;
        ensure(e < 1e-10, || format!("max-abs gap {e:e} on topology {k}"))?;
        worst = worst.max(e);
    }
    Ok(format!(
        "{} topologies x 100 draws, max-abs gap {worst:.2e}",
        games.len()
    ))
}

fn c4_frozen_signals() -> Check {
    let mut a = Mat::zeros(2, 2);
    a[(0, 1)] = 1.0;
    let b = Mat::from_column_slice(2, 1, &[0.0, 1.0]);
    let dyn_ = AgentDynamics::new(a, b.clone(), b).unwrap();
    let w = LocalWeights::new(Mat::identity(2, 2), Mat::identity(1, 1), 3.0).unwrap();
    let top = Topology::path(2, &[(0, 1.0), (1, 1.0)]).unwrap();
    let game = GlobalGame::homogeneous(top.clone(), dyn_, w).unwrap();
    let delta = [8.0, -6.0, -4.0, 10.0];
    let psi: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            let sol = &game.solutions()[i];
            build_signal(&game.grounded().row(i), &sol.k, &sol.l_gain, &delta[2 * i..2 * i + 2])
                .unwrap()
                .psi
        })
        .collect();
    let (alpha, beta, h) = (1.0, 4.2, 1e-7);
    let bounds = gain_bounds(0.0, &game.solutions()[0].k, &game.solutions()[0].l_gain, top.n_bar());
    ensure(bounds.alpha_ok(alpha) && bounds.beta_ok(alpha, beta), || {
        "gains not compliant".into()
    })?;
    let mut states = vec![EstimatorState::zeros(psi[0].len(), alpha, beta, 0.0); 2];
    states[0].v[0] = 0.3;
    states[1].v[3] = -0.2;
    let mut est = Estimator::with_states(&top, states, psi).unwrap();
    let exact = game.coupled_strategies(&Vector::from_column_slice(&delta)).unwrap();
    let exact_norm = exact.u.norm().hypot(exact.w.norm());
    let dims = SignalDims {
        agents: 2,
        m1: 1,
        m2: 1,
    };

    let vt0 = est.vtilde_norm();
    let t_star = convergence_time(&est, h);
    let threshold = 10.0 * alpha * h;
    let d_max = (0..2).map(|i| top.laplacian()[(i, i)]).fold(0.0, f64::max);
    let band = ((2 * est.signal_len()) as f64).sqrt() * (beta + 2.0 * d_max * alpha) * h;
    let check_every = 10_000;
    let total = ((t_star + 0.5) / h).ceil() as usize;
    let star_step = (t_star / h).ceil() as usize;
    let mut worst_vt_excess = f64::NEG_INFINITY;
    let mut worst_after = 0.0_f64;
    let mut worst_rel = 0.0_f64;
    for k in 1..=total {
        est.step(h);
        let t = k as f64 * h;
        if k % check_every == 0 || k == star_step {
            let vt = est.vtilde_norm();
            let bound = (vt0 - t).max(0.0) + band;
            worst_vt_excess = worst_vt_excess.max(vt - bound);
            ensure(vt <= bound, || format!("vtilde {vt:e} above bound {bound:e} at t={t}"))?;
            if k >= star_step {
                let err = est.max_abs_error();
                worst_after = worst_after.max(err);
                ensure(err < threshold, || {
                    format!("error {err:e} >= {threshold:e} at t={t:.4} (t* {t_star:.4})")
                })?;
                let mut gap = 0.0_f64;
                for i in 0..2 {
                    let out = est.reconstruct(i, dims).map_err(|e| e.to_string())?;
                    gap = gap.hypot(out.u_hat[0] - exact.u[i]).hypot(out.w_hat[0] - exact.w[i]);
                }
                let rel = gap / exact_norm;
                worst_rel = worst_rel.max(rel);
                ensure(rel < 1e-6, || {
                    format!("reconstruction relative error {rel:e} at t={t:.4}")
                })?;
            }
        }
    }
    Ok(format!(
        "t* {t_star:.3}, max error after t* {worst_after:.2e} < {threshold:.0e}, reconstruction {worst_rel:.1e}, vtilde(0) {vt0:.3} within band {band:.1e}"
    ))
}

fn c5_gain_bounds() -> Check {
    let cfg = scenario("formation8.toml");
    let game = cfg.build_game().map_err(|e| e.to_string())?;
    let est = cfg.estimator.as_ref().ok_or("no estimator block")?;
    ensure(est.alpha[0] == 2100.0 && est.beta[0] == 34000.0, || {
        "scenario gains differ".into()
    })?;
    let sol = &game.solutions()[0];
    let bounds = gain_bounds(0.0, &sol.k, &sol.l_gain, 8);
    let limit = bounds.beta_factor * 2100.0;
    ensure(bounds.beta_ok(2100.0, 34000.0), || {
        format!("beta 34000 rejected against {limit}")
    })?;
    ensure(limit == 33600.0, || format!("2 N_bar alpha = {limit}"))?;

    let mut bad = cfg.clone();
    let e = bad.estimator.as_mut().unwrap();
    e.beta = vec![limit - 1.0; 8];
    e.eta = Some(vec![0.0; 8]);
    WARNINGS.lock().unwrap().clear();
    match sim::check_estimator_gains(&bad, &game) {
        Err(Error::Validation(msg)) => {
            let warned = WARNINGS.lock().unwrap().iter().any(|w| w.contains("beta"));
            ensure(warned, || "rejection logged no warning".into())?;
            Ok(format!(
                "beta 34000 > {limit} accepted; beta {} rejected: {msg}",
                limit - 1.0
            ))
        }
        other => Err(format!("beta = 2 N_bar alpha - 1 not rejected: {other:?}")),
    }
}

fn c6_formation() -> Check {
    let cfg = scenario("formation8.toml");
    ensure(
        cfg.attack == AttackMode::Off && cfg.controller == ControllerMode::Centralized,
        || "formation8 is not a centralized w=0 run".into(),
    )?;
    let trace = sim::run_scenario(&cfg).map_err(|e| e.to_string())?;
    let end = cfg.t_max + cfg.h;
    let s1 = trace
        .settling_time(0.05, 0.0, 20.0)
        .ok_or("never settled before the switch")?;
    let s2 = trace
        .settling_time(0.05, 20.0, end)
        .ok_or("never settled after the switch")?;
    ensure(s1 <= 15.0, || format!("first settling at {s1}"))?;
    ensure(s2 <= 40.0, || format!("second settling at {s2}"))?;
    let sw = trace.switches.first().ok_or("no switch recorded")?;
    ensure(sw.value_after > sw.value_before, || "no jump at the switch".into())?;
    let mut worst = f64::NEG_INFINITY;
    for pair in trace.samples.windows(2) {
        if pair[0].t < sw.t && pair[1].t >= sw.t {
            continue;
        }
        let rise = pair[1].value - pair[0].value;
        worst = worst.max(rise);
        ensure(rise <= 1e-8, || format!("V rises by {rise:e} at t={}", pair[1].t))?;
    }
    Ok(format!(
        "settled at {s1:.2} s and {s2:.2} s, V jump {:.2} -> {:.2}, max V increment {worst:.1e}",
        sw.value_before, sw.value_after
    ))
}

fn c7_certificate() -> Check {
    let mut cfg = scenario("formation8.toml");
    cfg.attack = AttackMode::WorstCase;
    let game = cfg.build_game().map_err(|e| e.to_string())?;
    let trace = sim::run_with_game(&cfg, &game).map_err(|e| e.to_string())?;
    ensure(trace.samples[0].delta_norm > 0.0, || "delta(0) = 0".into())?;
    let cert = sim::l2_certificate(&trace, &game);
    ensure(cert.holds && cert.margin >= 0.0, || format!("{cert:?}"))?;

    let mut quiet = scenario("formation8.toml");
    quiet.attack = AttackMode::Off;
    quiet.t_max = 19.5;
    let trace0 = sim::run_with_game(&quiet, &game).map_err(|e| e.to_string())?;
    ensure(trace0.switches.is_empty(), || "unexpected switch".into())?;
    let v0 = game.value_function(&Vector::from_column_slice(&trace0.samples[0].delta));
    let slack = 2.0 * v0 * (1.0 + 1e-6) - trace0.lhs;
    ensure(slack >= 0.0, || format!("w=0: lhs {} > 2V0 {}", trace0.lhs, 2.0 * v0))?;
    Ok(format!(
        "worst-case: lhs {:.3} <= rhs {:.3} (margin {:.3}); w=0: lhs {:.3} <= 2V0 {:.3}",
        cert.lhs,
        cert.rhs,
        cert.margin,
        trace0.lhs,
        2.0 * v0
    ))
}

fn c8_lambda2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tightest = f64::INFINITY;
    for k in 0..200 {
        let n = rng.gen_range(2..=12);
        let top = random_connected(&mut rng, n, 1.0, 3.0);
        let l2 = top.lambda2().map_err(|e| e.to_string())?;
        let bound = 4.0 / (n * n) as f64;
        ensure(l2 >= bound, || format!("graph {k}: lambda2 {l2} < 4/N^2 = {bound}"))?;
        tightest = tightest.min(l2 / bound);
    }
    Ok(format!("200 graphs, min lambda2/(4/N^2) = {tightest:.3}"))
}

fn c9_closed_loop_agreement() -> Check {
    let alg = scenario("path3_algorithm1.toml");
    ensure(alg.controller == ControllerMode::Algorithm1, || {
        "scenario is not algorithm1".into()
    })?;
    let mut cen = alg.clone();
    cen.controller = ControllerMode::Centralized;
    let game = alg.build_game().map_err(|e| e.to_string())?;
    let (ta, tc) = std::thread::scope(|s| {
        let a = s.spawn(|| sim::run_with_game(&alg, &game));
        let c = s.spawn(|| sim::run_with_game(&cen, &game));
        (a.join().unwrap(), c.join().unwrap())
    });
    let (ta, tc) = (ta.map_err(|e| e.to_string())?, tc.map_err(|e| e.to_string())?);
    let t_star = ta.estimator.as_ref().ok_or("no estimator diagnostics")?.t_star;
    ensure(t_star < alg.t_max, || format!("t* {t_star} beyond the horizon"))?;
    let mut worst = 0.0_f64;
    let mut compared = 0;
    for (a, c) in ta.samples.iter().zip(&tc.samples) {
        if a.t < t_star {
            continue;
        }
        compared += 1;
        let gap = a.x.iter().zip(&c.x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        worst = worst.max(gap);
        ensure(gap < 1e-2, || format!("state gap {gap:e} at t={}", a.t))?;
    }
    ensure(compared > 0, || "no samples after t*".into())?;
    Ok(format!(
        "t* {t_star:.3} s, max state gap after t* {worst:.2e} over {compared} samples"
    ))
}

fn c10_determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_hinf-coalition");
    let config = default_scenario_dir().join("formation8.toml");
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for run in 0..2 {
        let out = root.path().join(format!("run{run}"));
        let status = Command::new(bin)
            .args(["simulate", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            String::from_utf8_lossy(&status.stderr).into_owned()
        })?;
        csvs.push(std::fs::read(out.join("trace.csv")).map_err(|e| e.to_string())?);
    }
    ensure(csvs[0] == csvs[1], || "trace.csv differs between runs".into())?;
    Ok(format!("2 runs, {} identical bytes", csvs[0].len()))
}

fn main() -> ExitCode {
    log::set_logger(&Capture).unwrap();
    log::set_max_level(log::LevelFilter::Warn);
    let criteria: [Criterion; 10] = [
        ("local GARE", c1_local_gare),
        ("block-diagonal decomposition", c2_decomposition),
        ("strategy equivalence", c3_equivalence),
        ("estimator with frozen signals", c4_frozen_signals),
        ("gain bounds", c5_gain_bounds),
        ("closed-loop formation", c6_formation),
        ("L2-gain certificate", c7_certificate),
        ("lambda2 lower bound", c8_lambda2),
        ("centralized vs distributed loop", c9_closed_loop_agreement),
        ("determinism", c10_determinism),
    ];
    let results: Vec<(Check, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|&(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
                    (r, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for (k, ((name, _), (r, secs))) in criteria.iter().zip(results).enumerate() {
        match r {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1} s): {detail}", k + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1} s): {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
