//! TOML scenario files.
//!
//! ```toml
//! [graph]
//! agents = 3
//! n_bar = 3                      # optional, defaults to `agents`
//! edges = [[1, 2, 1.0], [2, 3]]  # 1-based; weight defaults to 1; mirrored unless both directions are listed
//! pinning = [[1, 1.0]]           # [agent, g]
//! # or: adjacency = [[0, 1, 0], [1, 0, 1], [0, 1, 0]]
//!
//! [dynamics]
//! preset = "planar_double_integrator"   # or a = [[..]], b = [[..]], d = [[..]]
//!
//! [weights]
//! q = 10.0          # scalar means q·I, otherwise a row-major matrix
//! r = 1.0
//! gamma = 2.0
//! [[weights.agent]] # optional per-agent overrides
//! index = 2
//! gamma = 3.0
//!
//! [initial]
//! leader = [0.0, 0.0, -0.5, -0.1]
//! agents = [[..], [..], [..]]
//!
//! [[formation]]     # optional; omitted means zero offsets from t = 0
//! start = 0.0
//! offsets = [[..], [..], [..]]
//!
//! [estimator]       # needed by controller = "algorithm1" and decouple-demo
//! alpha = 2100.0    # scalar or per-agent list; same for beta and eta
//! beta = 34000.0
//! h = 1e-4
//!
//! [sim]
//! h = 1e-3
//! t_max = 40.0
//! decimation = 10
//! controller = "centralized"   # or "algorithm1"
//! attack = "off"               # "worst_case" | "external"
//! [sim.external]
//! times = [0.0, 1.0]
//! values = [[..], [..]]        # stacked w for all agents
//!
//! [verify]
//! max_agents = 8
//! ```

use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::linalg::{identity, Mat, Vector};
use crate::riccati::{AgentDynamics, LocalWeights};
use crate::sim::{AttackMode, ControllerMode, EstimatorSettings, ExternalSignal, FormationSegment, ScenarioConfig};
use crate::topology::Topology;

pub const DEFAULT_MAX_AGENTS: usize = 8;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Doc {
    graph: Spanned<GraphDoc>,
    dynamics: Spanned<DynamicsDoc>,
    weights: Spanned<WeightsDoc>,
    initial: Spanned<InitialDoc>,
    #[serde(default)]
    formation: Vec<Spanned<SegmentDoc>>,
    estimator: Option<Spanned<EstimatorDoc>>,
    sim: Spanned<SimDoc>,
    #[serde(default)]
    verify: VerifyDoc,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    agents: usize,
    n_bar: Option<usize>,
    edges: Option<Vec<Spanned<Vec<f64>>>>,
    adjacency: Option<Spanned<Vec<Vec<f64>>>>,
    #[serde(default)]
    pinning: Vec<Spanned<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsDoc {
    preset: Option<String>,
    a: Option<Vec<Vec<f64>>>,
    b: Option<Vec<Vec<f64>>>,
    d: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixDoc {
    Scaled(f64),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    q: MatrixDoc,
    r: MatrixDoc,
    gamma: f64,
    #[serde(default)]
    agent: Vec<Spanned<AgentWeightsDoc>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentWeightsDoc {
    index: usize,
    q: Option<MatrixDoc>,
    r: Option<MatrixDoc>,
    gamma: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialDoc {
    leader: Vec<f64>,
    agents: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    start: f64,
    offsets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum PerAgent {
    One(f64),
    Each(Vec<f64>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimatorDoc {
    alpha: PerAgent,
    beta: PerAgent,
    eta: Option<PerAgent>,
    h: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimDoc {
    h: f64,
    t_max: f64,
    #[serde(default = "one")]
    decimation: usize,
    #[serde(default)]
    controller: ControllerDoc,
    #[serde(default)]
    attack: AttackDoc,
    external: Option<ExternalDoc>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ControllerDoc {
    #[default]
    Centralized,
    Algorithm1,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum AttackDoc {
    #[default]
    Off,
    #[serde(alias = "worst-case")]
    WorstCase,
    External,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalDoc {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerifyDoc {
    max_agents: Option<usize>,
}

/// A parsed scenario plus the settings that are not part of the simulation itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub scenario: ScenarioConfig,
    pub max_agents: usize,
}

struct Source<'a> {
    text: &'a str,
}

impl Source<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.text[..span.start.min(self.text.len())].matches('\n').count() + 1
    }

    fn err<T>(&self, span: Range<usize>, msg: impl std::fmt::Display) -> Result<T> {
        Err(Error::Validation(format!("line {}: {msg}", self.line(span))))
    }

    fn at<T>(&self, span: Range<usize>, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Validation(format!("line {}: {e}", self.line(span))))
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Validation(format!("{what}: rows have different lengths")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn weight_matrix(doc: &MatrixDoc, size: usize, what: &str) -> Result<Mat> {
    match doc {
        MatrixDoc::Scaled(s) => Ok(identity(size) * *s),
        MatrixDoc::Full(rows) => matrix(rows, what),
    }
}

fn per_agent(v: &PerAgent, n: usize, what: &str) -> Result<Vec<f64>> {
    match v {
        PerAgent::One(x) => Ok(vec![*x; n]),
        PerAgent::Each(xs) if xs.len() == n => Ok(xs.clone()),
        PerAgent::Each(xs) => Err(Error::Validation(format!("{what}: {} values for {n} agents", xs.len()))),
    }
}

fn agent_index(src: &Source, span: Range<usize>, raw: f64, n: usize, what: &str) -> Result<usize> {
    if raw.fract() != 0.0 || raw < 1.0 || raw > n as f64 {
        return src.err(span, format!("{what}: agent index {raw} is not in 1..={n}"));
    }
    Ok(raw as usize - 1)
}

fn topology(src: &Source, g: &Spanned<GraphDoc>) -> Result<Topology> {
    let doc = g.get_ref();
    let n = doc.agents;
    if n == 0 {
        return src.err(g.span(), "graph needs at least one agent");
    }
    let mut adj = Mat::zeros(n, n);
    match (&doc.edges, &doc.adjacency) {
        (Some(_), Some(a)) => return src.err(a.span(), "give either edges or adjacency, not both"),
        (None, Some(a)) => {
            let m = src.at(a.span(), matrix(a.get_ref(), "adjacency"))?;
            if m.shape() != (n, n) {
                return src.err(a.span(), format!("adjacency is {:?}, expected {n}x{n}", m.shape()));
            }
            for i in 0..n {
                for j in 0..i {
                    if m[(i, j)] != m[(j, i)] {
                        return src.err(
                            a.span(),
                            format!(
                                "edge ({},{}) is asymmetric: a_{}{} = {} but a_{}{} = {}",
                                j + 1,
                                i + 1,
                                j + 1,
                                i + 1,
                                m[(j, i)],
                                i + 1,
                                j + 1,
                                m[(i, j)]
                            ),
                        );
                    }
                }
            }
            adj = m;
        }
        (Some(edges), None) => {
            let mut given = vec![vec![false; n]; n];
            for e in edges {
                let v = e.get_ref();
                if v.len() != 2 && v.len() != 3 {
                    return src.err(e.span(), "edge must be [i, j] or [i, j, weight]");
                }
                let i = agent_index(src, e.span(), v[0], n, "edge")?;
                let j = agent_index(src, e.span(), v[1], n, "edge")?;
                let w = v.get(2).copied().unwrap_or(1.0);
                if given[i][j] {
                    return src.err(e.span(), format!("edge ({},{}) listed twice", i + 1, j + 1));
                }
                given[i][j] = true;
                if given[j][i] && adj[(j, i)] != w {
                    return src.err(
                        e.span(),
                        format!(
                            "edge ({},{}) is asymmetric: a_{}{} = {w} but a_{}{} = {}",
                            i + 1,
                            j + 1,
                            i + 1,
                            j + 1,
                            j + 1,
                            i + 1,
                            adj[(j, i)]
                        ),
                    );
                }
                adj[(i, j)] = w;
                if !given[j][i] {
                    adj[(j, i)] = w;
                }
            }
        }
        (None, None) => {
            if n > 1 {
                return src.err(g.span(), "graph needs edges or adjacency");
            }
        }
    }
    let mut pins = vec![0.0; n];
    for p in &doc.pinning {
        let v = p.get_ref();
        if v.len() != 2 {
            return src.err(p.span(), "pinning entry must be [agent, gain]");
        }
        let i = agent_index(src, p.span(), v[0], n, "pinning")?;
        pins[i] = v[1];
    }
    src.at(g.span(), Topology::new(adj, pins, doc.n_bar.unwrap_or(n)))
}

fn dynamics(src: &Source, d: &Spanned<DynamicsDoc>) -> Result<AgentDynamics> {
    let doc = d.get_ref();
    match (&doc.preset, &doc.a, &doc.b, &doc.d) {
        (Some(p), None, None, None) if p == "planar_double_integrator" => Ok(AgentDynamics::planar_double_integrator()),
        (Some(p), None, None, None) => src.err(d.span(), format!("unknown dynamics preset {p:?}")),
        (None, Some(a), Some(b), Some(dd)) => src.at(
            d.span(),
            AgentDynamics::new(matrix(a, "A")?, matrix(b, "B")?, matrix(dd, "D")?),
        ),
        _ => src.err(d.span(), "dynamics needs either preset or all of a, b, d"),
    }
}

/// Parses and validates a scenario document.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let doc: Doc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string().trim_end().to_string()))?;
    let src = Source { text };

    let top = topology(&src, &doc.graph)?;
    let n_agents = top.n_agents();
    let dyn_ = dynamics(&src, &doc.dynamics)?;
    let (n, m1) = (dyn_.n(), dyn_.m1());

    let w = doc.weights.get_ref();
    let wspan = doc.weights.span();
    let base_q = src.at(wspan.clone(), weight_matrix(&w.q, n, "q"))?;
    let base_r = src.at(wspan.clone(), weight_matrix(&w.r, m1, "r"))?;
    let mut weights = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let over = w
            .agent
            .iter()
            .filter(|a| a.get_ref().index == i + 1)
            .collect::<Vec<_>>();
        if over.len() > 1 {
            return src.err(over[1].span(), format!("weights for agent {} given twice", i + 1));
        }
        let (mut q, mut r, mut gamma, mut span) = (base_q.clone(), base_r.clone(), w.gamma, wspan.clone());
        if let Some(o) = over.first() {
            let a = o.get_ref();
            span = o.span();
            if let Some(qd) = &a.q {
                q = src.at(span.clone(), weight_matrix(qd, n, "q"))?;
            }
            if let Some(rd) = &a.r {
                r = src.at(span.clone(), weight_matrix(rd, m1, "r"))?;
            }
            gamma = a.gamma.unwrap_or(gamma);
        }
        let lw = src.at(span.clone(), LocalWeights::new(q, r, gamma))?;
        src.at(span, lw.check_dims(&dyn_))?;
        weights.push(lw);
    }
    if let Some(a) = w
        .agent
        .iter()
        .find(|a| a.get_ref().index == 0 || a.get_ref().index > n_agents)
    {
        return src.err(
            a.span(),
            format!("weights for agent {} but only {n_agents} agents", a.get_ref().index),
        );
    }

    let init = doc.initial.get_ref();
    let ispan = doc.initial.span();
    if init.agents.len() != n_agents {
        return src.err(
            ispan,
            format!("{} initial agent states for {n_agents} agents", init.agents.len()),
        );
    }
    let x0: Vec<Vector> = init.agents.iter().map(|v| Vector::from_column_slice(v)).collect();
    let leader0 = Vector::from_column_slice(&init.leader);

    let formation = if doc.formation.is_empty() {
        vec![FormationSegment {
            start: 0.0,
            offsets: vec![Vector::zeros(n); n_agents],
        }]
    } else {
        doc.formation
            .iter()
            .map(|s| FormationSegment {
                start: s.get_ref().start,
                offsets: s
                    .get_ref()
                    .offsets
                    .iter()
                    .map(|v| Vector::from_column_slice(v))
                    .collect(),
            })
            .collect()
    };

    let estimator = match &doc.estimator {
        None => None,
        Some(e) => {
            let d = e.get_ref();
            Some(EstimatorSettings {
                alpha: src.at(e.span(), per_agent(&d.alpha, n_agents, "alpha"))?,
                beta: src.at(e.span(), per_agent(&d.beta, n_agents, "beta"))?,
                eta: match &d.eta {
                    Some(v) => Some(src.at(e.span(), per_agent(v, n_agents, "eta"))?),
                    None => None,
                },
                h: d.h,
            })
        }
    };

    let sim = doc.sim.get_ref();
    let sspan = doc.sim.span();
    let attack = match (sim.attack, &sim.external) {
        (AttackDoc::External, Some(ext)) => AttackMode::External(src.at(
            sspan.clone(),
            ExternalSignal::new(
                ext.times.clone(),
                ext.values.iter().map(|v| Vector::from_column_slice(v)).collect(),
            ),
        )?),
        (AttackDoc::External, None) => return src.err(sspan, "attack = \"external\" needs a [sim.external] table"),
        (AttackDoc::Off, _) => AttackMode::Off,
        (AttackDoc::WorstCase, _) => AttackMode::WorstCase,
    };
    let scenario = ScenarioConfig {
        top,
        dynamics: dyn_,
        weights,
        x0,
        leader0,
        formation,
        attack,
        controller: match sim.controller {
            ControllerDoc::Centralized => ControllerMode::Centralized,
            ControllerDoc::Algorithm1 => ControllerMode::Algorithm1,
        },
        estimator,
        h: sim.h,
        t_max: sim.t_max,
        decimation: sim.decimation,
    };
    scenario.validate()?;
    Ok(LoadedConfig {
        scenario,
        max_agents: doc.verify.max_agents.unwrap_or(DEFAULT_MAX_AGENTS),
    })
}

pub fn load_config(path: &std::path::Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}
