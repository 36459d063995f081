//! Command-line front end: `solve`, `verify`, `simulate`, `decouple-demo`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_config, LoadedConfig};
use crate::decouple::{self, Estimator, SignalDims};
use crate::error::{Error, Result};
use crate::game::GlobalGame;
use crate::linalg::Vector;
use crate::sim::{self, AttackMode, ControllerMode, ScenarioConfig, ScenarioTrace};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "hinf-coalition",
    version,
    about = "Coalitional min-max leader-following consensus toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve every agent's local GARE and write gains.json.
    Solve(RunArgs),
    /// Materialize the global game and check the decomposition.
    Verify(RunArgs),
    /// Run the closed-loop scenario and write trace.csv.
    Simulate(RunArgs),
    /// Run Algorithm 1 on the payloads frozen at t = 0 and write estimator.csv.
    DecoupleDemo(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Verify(_) => "verify",
            Command::Simulate(_) => "simulate",
            Command::DecoupleDemo(_) => "decouple-demo",
        }
    }

    pub fn args(&self) -> &RunArgs {
        match self {
            Command::Solve(a) | Command::Verify(a) | Command::Simulate(a) | Command::DecoupleDemo(a) => a,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; replaced as a whole when the run finishes.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for randomized verification checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub controller: Option<ControllerArg>,
    #[arg(long, value_enum)]
    pub attack: Option<AttackArg>,
    /// Plant step.
    #[arg(long)]
    pub h: Option<f64>,
    /// Horizon.
    #[arg(long = "t-max")]
    pub t_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Centralized,
    Algorithm1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackArg {
    Off,
    WorstCase,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub config: PathBuf,
    pub command: String,
    pub out: PathBuf,
    pub seed: u64,
    pub version: String,
}

/// Files and summary produced by a successful command.
struct Outcome {
    files: Vec<(&'static str, String)>,
    summary: Value,
    message: String,
    failure: Option<&'static str>,
}

pub fn exit_code(code: &str) -> i32 {
    match code {
        "UsageError" => 2,
        "ParseError" => 3,
        "ValidationError" => 4,
        "NoStabilizingSolution" => 5,
        "CapExceeded" => 6,
        "NumericBlowup" => 7,
        "IoError" => 8,
        "VerificationFailed" => 9,
        _ => 1,
    }
}

/// Runs one command, writes its output directory and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let args = cli.command.args();
    let manifest = RunManifest {
        config: args.config.clone(),
        command: cli.command.name().to_string(),
        out: args.out.clone(),
        seed: args.seed,
        version: VERSION.to_string(),
    };
    let result = load_config(&args.config)
        .and_then(|cfg| apply_overrides(cfg, args))
        .and_then(|cfg| match &cli.command {
            Command::Solve(_) => cmd_solve(&cfg),
            Command::Verify(_) => cmd_verify(&cfg, args.seed),
            Command::Simulate(_) => cmd_simulate(&cfg),
            Command::DecoupleDemo(_) => cmd_decouple_demo(&cfg, args.t_max),
        });
    let (files, summary, code) = match result {
        Ok(out) => {
            println!("{}", out.message);
            let code = out.failure.map_or(0, exit_code);
            (out.files, out.summary, code)
        }
        Err(e) => {
            let summary = error_summary(e.code(), &e.to_string());
            eprintln!("{summary}");
            (Vec::new(), summary, exit_code(e.code()))
        }
    };
    match write_output(&manifest, files, &summary) {
        Ok(()) => code,
        Err(e) => {
            eprintln!("{}", error_summary(e.code(), &e.to_string()));
            if code == 0 {
                exit_code(e.code())
            } else {
                code
            }
        }
    }
}

pub fn error_summary(code: &str, message: &str) -> Value {
    json!({ "status": "error", "error_code": code, "message": message })
}

fn apply_overrides(mut cfg: LoadedConfig, args: &RunArgs) -> Result<LoadedConfig> {
    let s = &mut cfg.scenario;
    if let Some(c) = args.controller {
        s.controller = match c {
            ControllerArg::Centralized => ControllerMode::Centralized,
            ControllerArg::Algorithm1 => ControllerMode::Algorithm1,
        };
    }
    if let Some(a) = args.attack {
        s.attack = match (a, &s.attack) {
            (AttackArg::Off, _) => AttackMode::Off,
            (AttackArg::WorstCase, _) => AttackMode::WorstCase,
            (AttackArg::External, AttackMode::External(sig)) => AttackMode::External(sig.clone()),
            (AttackArg::External, _) => {
                return Err(Error::Validation(
                    "--attack external needs a [sim.external] table in the config".into(),
                ))
            }
        };
    }
    if let Some(h) = args.h {
        s.h = h;
    }
    if let Some(t) = args.t_max {
        s.t_max = t;
    }
    s.validate()?;
    Ok(cfg)
}

fn write_output(manifest: &RunManifest, files: Vec<(&'static str, String)>, summary: &Value) -> Result<()> {
    let out = &manifest.out;
    let name = out
        .file_name()
        .ok_or_else(|| Error::Io(format!("output path {} has no final component", out.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir(&staging)?;
    let write = |file: &str, body: &str| std::fs::write(staging.join(file), body);
    write("manifest.json", &pretty(manifest))?;
    write("summary.json", &pretty(summary))?;
    for (file, body) in &files {
        write(file, body)?;
    }
    if out.exists() {
        std::fs::remove_dir_all(out)?;
    }
    std::fs::rename(&staging, out)?;
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_solve(cfg: &LoadedConfig) -> Result<Outcome> {
    let game = cfg.scenario.build_game()?;
    let agents: Vec<Value> = game
        .solutions()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut v = serde_json::to_value(s).expect("serializable");
            v["agent"] = json!(i + 1);
            v
        })
        .collect();
    let identical = game.solutions().windows(2).all(|w| w[0].p == w[1].p);
    let worst = game.solutions().iter().map(|s| s.residual_norm).fold(0.0, f64::max);
    let gains = json!({ "agents": agents, "identical_blocks": identical });
    Ok(Outcome {
        files: vec![("gains.json", pretty(&gains))],
        summary: json!({
            "status": "ok",
            "agents": game.dims().agents,
            "max_residual": worst,
            "identical_blocks": identical,
        }),
        message: format!("solved {} local GAREs, max residual {worst:.3e}", game.dims().agents),
        failure: None,
    })
}

/// Strategy agreement between the dense global formulas and the local linear solves.
pub fn strategy_equivalence(game: &GlobalGame, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = game.dims().agents * game.dims().n;
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let delta = Vector::from_fn(len, |_, _| rng.gen_range(-1.0..1.0));
        let a = game.centralized_strategies(&delta)?;
        let b = game.coupled_strategies(&delta)?;
        worst = worst.max((a.u - b.u).amax()).max((a.w - b.w).amax());
    }
    Ok(worst)
}

fn cmd_verify(cfg: &LoadedConfig, seed: u64) -> Result<Outcome> {
    let n = cfg.scenario.n_agents();
    if n > cfg.max_agents {
        return Err(Error::CapExceeded(format!(
            "{n} agents exceed the verification cap of {}; the dense global matrices grow as O(N^3 n^3). \
             Raise [verify] max_agents if this is intended, or rely on the per-agent `solve` output",
            cfg.max_agents
        )));
    }
    let game = cfg.scenario.build_game()?;
    let q_norm = game.build_global_weights().q.norm();
    let residual = game.global_gare_residual();
    let residual_tol = 1e-6 * (1.0 + q_norm);
    let equivalence = strategy_equivalence(&game, 100, seed)?;
    let stable = sim::internal_stability_check(&game)?;
    let passed = residual < residual_tol && equivalence < 1e-10 && stable;
    let report = json!({
        "agents": n,
        "global_gare_residual": residual,
        "residual_tolerance": residual_tol,
        "strategy_equivalence_max_error": equivalence,
        "strategy_equivalence_tolerance": 1e-10,
        "internal_stability": stable,
        "passed": passed,
    });
    let mut summary = report.clone();
    summary["status"] = json!(if passed { "ok" } else { "error" });
    if !passed {
        summary["error_code"] = json!("VerificationFailed");
    }
    Ok(Outcome {
        files: vec![("verify.json", pretty(&report))],
        summary,
        message: format!(
            "verify {}: residual {residual:.3e} (tol {residual_tol:.1e}), equivalence {equivalence:.3e}, stable {stable}",
            if passed { "passed" } else { "FAILED" }
        ),
        failure: (!passed).then_some("VerificationFailed"),
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with columns `t, x[i][k]…, delta_norm, V, u[i][k]…, w[i][k]…, lhs_running, rhs_running, est_err_norm`.
pub fn trace_csv(trace: &ScenarioTrace) -> String {
    let mut out = String::from("t");
    let block = |out: &mut String, name: &str, agents: usize, len: usize| {
        for i in 0..agents {
            for k in 0..len {
                let _ = write!(out, ",{name}[{}][{}]", i + 1, k + 1);
            }
        }
    };
    block(&mut out, "x", trace.n_agents, trace.n);
    out.push_str(",delta_norm,V");
    block(&mut out, "u", trace.n_agents, trace.m1);
    block(&mut out, "w", trace.n_agents, trace.m2);
    out.push_str(",lhs_running,rhs_running,est_err_norm\n");
    for s in &trace.samples {
        out.push_str(&num(s.t));
        for v in s.x.iter().chain([&s.delta_norm, &s.value]).chain(&s.u).chain(&s.w) {
            out.push(',');
            out.push_str(&num(*v));
        }
        for v in [s.lhs_running, s.rhs_running, s.est_err_norm] {
            out.push(',');
            out.push_str(&num(v));
        }
        out.push('\n');
    }
    out
}

/// Settling time of `‖δ‖` below `tol` within each formation segment.
pub fn segment_settling(config: &ScenarioConfig, trace: &ScenarioTrace, tol: f64) -> Vec<Value> {
    let starts: Vec<f64> = config.formation.iter().map(|s| s.start).collect();
    starts
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= config.t_max)
        .map(|(k, &start)| {
            let end = starts.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let settled = trace.settling_time(tol, start, end);
            json!({ "start": start, "tolerance": tol, "settling_time": settled })
        })
        .collect()
}

fn cmd_simulate(cfg: &LoadedConfig) -> Result<Outcome> {
    let scenario = &cfg.scenario;
    let game = scenario.build_game()?;
    let trace = sim::run_with_game(scenario, &game)?;
    let cert = sim::l2_certificate(&trace, &game);
    let summary = json!({
        "status": "ok",
        "controller": scenario.controller,
        "attack": scenario.attack.name(),
        "samples": trace.samples.len(),
        "final_delta_norm": trace.final_delta_norm(),
        "certificate": cert,
        "settling": segment_settling(scenario, &trace, 0.05),
        "switches": trace.switches,
        "estimator": trace.estimator,
    });
    Ok(Outcome {
        files: vec![("trace.csv", trace_csv(&trace))],
        summary,
        message: format!(
            "certificate {}: lhs {:.6e} <= rhs {:.6e} (margin {:.3e}); final |delta| {:.3e}",
            if cert.holds { "holds" } else { "VIOLATED" },
            cert.lhs,
            cert.rhs,
            cert.margin,
            trace.final_delta_norm()
        ),
        failure: None,
    })
}

fn cmd_decouple_demo(cfg: &LoadedConfig, t_max: Option<f64>) -> Result<Outcome> {
    let scenario = &cfg.scenario;
    let settings = scenario
        .estimator
        .as_ref()
        .ok_or_else(|| Error::Validation("decouple-demo needs an [estimator] section".into()))?;
    let game = scenario.build_game()?;
    let dims = SignalDims {
        agents: game.dims().agents,
        m1: game.dims().m1,
        m2: game.dims().m2,
    };
    let n_bar = scenario.top.n_bar();
    // frozen payloads: δ̇ = 0, so η = 0 is exact
    for (i, sol) in game.solutions().iter().enumerate() {
        let b = decouple::gain_bounds(0.0, &sol.k, &sol.l_gain, n_bar);
        if !b.beta_ok(settings.alpha[i], settings.beta[i]) || !b.alpha_ok(settings.alpha[i]) {
            let msg = format!(
                "agent {}: gains alpha = {}, beta = {} violate alpha >= {} and beta > {}*alpha",
                i + 1,
                settings.alpha[i],
                settings.beta[i],
                b.alpha_min,
                b.beta_factor
            );
            log::warn!("{msg}");
            return Err(Error::Validation(msg));
        }
    }
    let offsets = &scenario.formation[0].offsets;
    let delta = sim::neighbor_error(&scenario.top, &scenario.x0, &scenario.leader0, offsets)?;
    let exact = game.coupled_strategies(&delta)?;
    let n = game.dims().n;
    let rows = game.grounded().rows();
    let psi = game
        .solutions()
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(decouple::build_signal(&rows[i], &s.k, &s.l_gain, &delta.as_slice()[i * n..(i + 1) * n])?.psi))
        .collect::<Result<Vec<_>>>()?;
    let triples: Vec<_> = (0..dims.agents)
        .map(|i| (settings.alpha[i], settings.beta[i], 0.0))
        .collect();
    let mut est = Estimator::new(&scenario.top, dims.len(), &triples)?;
    est.set_signals(psi)?;
    let h = settings.h;
    let t_star = decouple::convergence_time(&est, h);
    let duration = t_max.unwrap_or(1.5 * t_star);
    let steps = (duration / h).round() as usize;
    let stride = (steps / 2000).max(1);

    let mut csv = String::from("t");
    for i in 0..dims.agents {
        let _ = write!(csv, ",err[{}]", i + 1);
    }
    csv.push_str(",vtilde_norm");
    for (name, m) in [("u_hat", dims.m1), ("w_hat", dims.m2)] {
        for i in 0..dims.agents {
            for k in 0..m {
                let _ = write!(csv, ",{name}[{}][{}]", i + 1, k + 1);
            }
        }
    }
    csv.push('\n');
    let mut last_rel = f64::NAN;
    for k in 0..=steps {
        if k % stride == 0 || k == steps {
            csv.push_str(&num(k as f64 * h));
            for e in est.agent_errors().into_iter().chain([est.vtilde_norm()]) {
                csv.push(',');
                csv.push_str(&num(e));
            }
            let outs: Vec<_> = (0..dims.agents).map(|i| est.reconstruct(i, dims).ok()).collect();
            for pick in [0, 1] {
                for o in &outs {
                    let width = if pick == 0 { dims.m1 } else { dims.m2 };
                    for c in 0..width {
                        let v = o
                            .as_ref()
                            .map_or(f64::NAN, |o| if pick == 0 { o.u_hat[c] } else { o.w_hat[c] });
                        csv.push(',');
                        csv.push_str(&num(v));
                    }
                }
            }
            csv.push('\n');
            if k == steps {
                last_rel = reconstruction_error(&outs, &exact, dims);
            }
        }
        if k < steps {
            est.step(h);
        }
    }
    let band = 2.0
        * (0..dims.agents)
            .map(|i| settings.alpha[i] + settings.beta[i])
            .fold(0.0, f64::max)
        * h;
    let summary = json!({
        "status": "ok",
        "t_star": t_star,
        "duration": duration,
        "h": h,
        "final_max_abs_error": est.max_abs_error(),
        "chatter_band": band,
        "final_relative_reconstruction_error": last_rel,
    });
    Ok(Outcome {
        files: vec![("estimator.csv", csv)],
        summary,
        message: format!(
            "t* = {t_star:.6e}; after {duration:.3e}: max |X - mean| = {:.3e}, relative strategy error {last_rel:.3e}",
            est.max_abs_error()
        ),
        failure: None,
    })
}

/// `max(‖û − u*‖∞ / ‖u*‖∞, ‖ŵ − w*‖∞ / ‖w*‖∞)`; infinite when some agent has no estimate.
fn reconstruction_error(
    outs: &[Option<decouple::DecoupleOutput>],
    exact: &crate::game::StrategyVector,
    dims: SignalDims,
) -> f64 {
    let mut worst = 0.0_f64;
    let su = exact.u.amax().max(f64::MIN_POSITIVE);
    let sw = exact.w.amax().max(f64::MIN_POSITIVE);
    for (i, o) in outs.iter().enumerate() {
        let Some(o) = o else { return f64::INFINITY };
        for c in 0..dims.m1 {
            worst = worst.max((o.u_hat[c] - exact.u[i * dims.m1 + c]).abs() / su);
        }
        for c in 0..dims.m2 {
            worst = worst.max((o.w_hat[c] - exact.w[i * dims.m2 + c]).abs() / sw);
        }
    }
    worst
}

/// Entry point used by the binary: parses arguments and reports usage errors as JSON.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            0
        }
        Err(e) => {
            eprintln!("{}", error_summary("UsageError", e.to_string().trim_end()));
            exit_code("UsageError")
        }
    }
}

pub fn default_scenario_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios"))
}
