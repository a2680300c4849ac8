//! Environment sampling, the synchronous round scheduler and accounting.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(master seed, realization, agent, round, channel)`, so a trace does not
//! depend on how realizations are spread over threads.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    AgentError, Algorithm, CentralizedFleet, DecisionRule, DlucbFleet, Feedback, Fleet,
    NoCommFleet, RcFleet,
};
use crate::bandit::{
    rc_threshold, theoretical_regret_bound, BanditError, BoundParams, BoundVariant, DecisionSet,
    RadiusParams, SafeGeometry,
};
use crate::consensus::{ConsensusError, MixingPlan};
use crate::graph::{
    build_comm_matrix, build_topology, CommMatrix, CommScheme, GraphError, GraphTopology,
    TopologyKind,
};

/// Tolerance for action-norm checks on feedback.
const NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid `{field}`: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("topology: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("action of agent {agent} at round {t} leaves the decision set (norm {norm})")]
    ActionNorm { agent: usize, t: usize, norm: f64 },
    #[error("invariant breach: {0}")]
    Invariant(String),
    #[error("trace length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no traces to aggregate")]
    NoTraces,
    #[error("worker pool: {0}")]
    Pool(String),
}

impl From<BanditError> for SimError {
    fn from(e: BanditError) -> Self {
        SimError::Agent(AgentError::Bandit(e))
    }
}

impl From<ConsensusError> for SimError {
    fn from(e: ConsensusError) -> Self {
        SimError::Agent(AgentError::Consensus(e))
    }
}

impl From<GraphError> for SimError {
    fn from(e: GraphError) -> Self {
        SimError::Config(ConfigError::Graph(e))
    }
}

/// Independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Channel {
    Graph = 1,
    Arms = 2,
    Environment = 3,
    Reward = 4,
    Safety = 5,
    Thompson = 6,
}

/// Generator for one `(master, realization, agent, round, channel)` cell.
pub fn substream(master: u64, realization: u64, agent: u32, round: u64, channel: Channel) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master.to_le_bytes());
    key[8..16].copy_from_slice(&realization.to_le_bytes());
    key[16..20].copy_from_slice(&agent.to_le_bytes());
    key[20..24].copy_from_slice(&(channel as u32).to_le_bytes());
    key[24..32].copy_from_slice(&round.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Graph family in a config. Parses from a bare name or an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRepr", into = "TopologyRepr")]
pub enum TopologySpec {
    Ring,
    Star,
    Complete,
    Path,
    ErdosRenyi { p: f64 },
    Explicit { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum TopologyRepr {
    Name(String),
    #[serde(rename_all = "snake_case")]
    Full {
        kind: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

impl TryFrom<TopologyRepr> for TopologySpec {
    type Error = String;
    fn try_from(r: TopologyRepr) -> Result<Self, String> {
        let (kind, p, path) = match r {
            TopologyRepr::Name(k) => (k, None, None),
            TopologyRepr::Full { kind, p, path } => (kind, p, path),
        };
        Ok(match kind.as_str() {
            "ring" => TopologySpec::Ring,
            "star" => TopologySpec::Star,
            "complete" => TopologySpec::Complete,
            "path" => TopologySpec::Path,
            "erdos_renyi" | "random" => TopologySpec::ErdosRenyi { p: p.unwrap_or(0.5) },
            "explicit" => TopologySpec::Explicit {
                path: path.ok_or("explicit topology needs `path`")?,
            },
            other => return Err(format!("unknown topology kind {other:?}")),
        })
    }
}

impl From<TopologySpec> for TopologyRepr {
    fn from(t: TopologySpec) -> Self {
        let (kind, p, path) = match t {
            TopologySpec::Ring => ("ring", None, None),
            TopologySpec::Star => ("star", None, None),
            TopologySpec::Complete => ("complete", None, None),
            TopologySpec::Path => ("path", None, None),
            TopologySpec::ErdosRenyi { p } => ("erdos_renyi", Some(p), None),
            TopologySpec::Explicit { path } => ("explicit", None, Some(path)),
        };
        TopologyRepr::Full {
            kind: kind.into(),
            p,
            path,
        }
    }
}

impl std::str::FromStr for TopologySpec {
    type Err = String;
    /// `ring`, `star`, `complete`, `path`, `erdos_renyi[:p]` or `explicit:<file>`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let repr = match kind {
            "erdos_renyi" | "random" => TopologyRepr::Full {
                kind: kind.into(),
                p: arg.map(|a| a.parse::<f64>().map_err(|e| e.to_string())).transpose()?,
                path: None,
            },
            "explicit" => TopologyRepr::Full {
                kind: kind.into(),
                p: None,
                path: arg.map(PathBuf::from),
            },
            _ => TopologyRepr::Name(kind.into()),
        };
        TopologySpec::try_from(repr)
    }
}

impl TopologySpec {
    pub fn is_random(&self) -> bool {
        matches!(self, TopologySpec::ErdosRenyi { .. })
    }

    /// Builds the graph; `rng` feeds Erdős–Rényi sampling.
    pub fn build<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<GraphTopology, GraphError> {
        let kind = match self {
            TopologySpec::Ring => TopologyKind::Ring,
            TopologySpec::Star => TopologyKind::Star,
            TopologySpec::Complete => TopologyKind::Complete,
            TopologySpec::Path => TopologyKind::Path,
            TopologySpec::ErdosRenyi { p } => TopologyKind::ErdosRenyi { p: *p },
            TopologySpec::Explicit { path } => {
                let g = GraphTopology::load_edge_list(path)?;
                if g.n_nodes() != n {
                    return Err(GraphError::Parse {
                        line: 0,
                        msg: format!("edge list has {} nodes but N = {n}", g.n_nodes()),
                    });
                }
                return Ok(g);
            }
        };
        build_topology(kind, n, rng)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DecisionSpec {
    /// `[−1, 1]^d`.
    #[default]
    Box,
    /// `k` arms drawn uniformly from the unit ball, fresh per realization.
    Finite {
        k: usize,
        #[serde(default)]
        arm_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintMode {
    /// `c ~ Uniform[0,1]`, resampled until `c − c0 ≥ min_gap` (and `c > c0`).
    Uniform {
        #[serde(default)]
        min_gap: f64,
    },
    Fixed(f64),
}

impl Default for ConstraintMode {
    fn default() -> Self {
        ConstraintMode::Uniform { min_gap: 0.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SafeActionMode {
    /// `x0 = 0`, `c0 = 0`.
    #[default]
    Zero,
    /// A fixed safe action; `c0 = ⟨μ*, x0⟩`.
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafeSpec {
    #[serde(default)]
    pub c: ConstraintMode,
    #[serde(default)]
    pub x0: SafeActionMode,
}

fn default_sigma() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.1
}
fn default_realizations() -> usize {
    20
}

/// Full description of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologySpec,
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub decision_set: DecisionSpec,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Defaults to `1/(4d+1)`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub safe: SafeSpec,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub keep_warmup_data: bool,
    #[serde(default)]
    pub comm_scheme: CommScheme,
    /// Draw a fresh random graph per realization; defaults to true for
    /// Erdős–Rényi graphs.
    #[serde(default)]
    pub resample_graph: Option<bool>,
    /// Overrides the RC trigger threshold `M`.
    #[serde(default)]
    pub rc_threshold: Option<f64>,
}

impl ExperimentConfig {
    /// Config with every optional field at its default.
    pub fn new(topology: TopologySpec, n: usize, d: usize, horizon: usize, algorithm: Algorithm) -> Self {
        ExperimentConfig {
            topology,
            n,
            d,
            horizon,
            algorithm,
            decision_set: DecisionSpec::Box,
            sigma: default_sigma(),
            lambda: default_lambda(),
            delta: default_delta(),
            epsilon: None,
            safe: SafeSpec::default(),
            realizations: default_realizations(),
            seed: 0,
            keep_warmup_data: false,
            comm_scheme: CommScheme::Laplacian,
            resample_graph: None,
            rc_threshold: None,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(1.0 / (4.0 * self.d as f64 + 1.0))
    }

    pub fn resample_graph(&self) -> bool {
        self.resample_graph.unwrap_or(self.topology.is_random())
    }

    /// Checks every invariant and fills derived defaults.
    pub fn validate(mut self) -> Result<Self, ConfigError> {
        let bad = |field, msg: String| Err(ConfigError::Invalid { field, msg });
        if self.n == 0 {
            return bad("N", "must be at least 1".into());
        }
        if self.d == 0 {
            return bad("d", "must be at least 1".into());
        }
        if !(self.lambda >= 1.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("{} must be finite and >= 1", self.lambda));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("{} must lie in (0, 1)", self.delta));
        }
        let eps = self.epsilon();
        if !(eps > 0.0 && eps < 1.0) {
            return bad("epsilon", format!("{eps} must lie in (0, 1)"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("{} must be finite and >= 0", self.sigma));
        }
        if self.realizations == 0 {
            return bad("realizations", "must be at least 1".into());
        }
        if let TopologySpec::ErdosRenyi { p } = self.topology {
            if !(p > 0.0 && p <= 1.0) {
                return bad("topology", format!("edge probability {p} outside (0, 1]"));
            }
        }
        if let DecisionSpec::Finite { k, .. } = self.decision_set {
            if k == 0 {
                return bad("decision_set", "finite set needs k >= 1".into());
            }
        }
        if self.algorithm == Algorithm::SafeDlucb {
            if self.decision_set == DecisionSpec::Box {
                return bad(
                    "decision_set",
                    "safe_dlucb requires a finite decision set (box is unsupported)".into(),
                );
            }
            if let SafeActionMode::Vector(v) = &self.safe.x0 {
                if v.len() != self.d {
                    return bad("safe.x0", format!("length {} differs from d = {}", v.len(), self.d));
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > 1.0 + NORM_TOL {
                    return bad("safe.x0", format!("norm {norm} exceeds 1"));
                }
            }
            match self.safe.c {
                ConstraintMode::Uniform { min_gap } if !(0.0..1.0).contains(&min_gap) => {
                    return bad("safe.c", format!("min_gap {min_gap} must lie in [0, 1)"));
                }
                ConstraintMode::Fixed(c) if !c.is_finite() => {
                    return bad("safe.c", format!("{c} is not finite"));
                }
                _ => {}
            }
        }
        if let Some(m) = self.rc_threshold {
            if m.is_nan() || m < 0.0 {
                return bad("rc_threshold", format!("{m} must be >= 0"));
            }
        }
        self.epsilon = Some(eps);
        self.resample_graph = Some(self.resample_graph());
        Ok(self)
    }

    pub fn radius_params(&self) -> RadiusParams {
        RadiusParams {
            d: self.d,
            n: self.n,
            lambda: self.lambda,
            delta: self.delta,
            sigma: self.sigma,
            epsilon: self.epsilon(),
        }
    }
}

/// Hidden parameters and noise of one realization.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub theta_star: DVector<f64>,
    pub mu_star: Option<DVector<f64>>,
    pub c: f64,
    pub sigma: f64,
    pub master_seed: u64,
    pub realization: u64,
}

fn unit_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 0.0 {
            return v / norm;
        }
    }
}

/// `θ*` standard normal then normalized. With `safe = Some((x0, mode))`, `μ*`
/// is drawn the same way and `c` follows `mode` relative to `c0 = ⟨μ*, x0⟩`;
/// `θ*` is reflected if needed so that `⟨θ*, x0⟩ ≥ 0`.
pub fn sample_environment<R: Rng + ?Sized>(
    d: usize,
    sigma: f64,
    safe: Option<(&DVector<f64>, &ConstraintMode)>,
    rng: &mut R,
) -> Result<(Environment, Option<f64>), SimError> {
    let mut theta = unit_gaussian(d, rng);
    let mut env = Environment {
        theta_star: theta.clone(),
        mu_star: None,
        c: f64::INFINITY,
        sigma,
        master_seed: 0,
        realization: 0,
    };
    let Some((x0, mode)) = safe else {
        return Ok((env, None));
    };
    if theta.dot(x0) < 0.0 {
        theta = -theta;
    }
    let mu = unit_gaussian(d, rng);
    let c0 = mu.dot(x0);
    let c = match mode {
        ConstraintMode::Fixed(c) => {
            if *c <= c0 {
                return Err(SimError::Config(ConfigError::Invalid {
                    field: "safe.c",
                    msg: format!("fixed c = {c} is not above c0 = {c0}"),
                }));
            }
            *c
        }
        ConstraintMode::Uniform { min_gap } => {
            let mut tries = 0;
            loop {
                let c: f64 = rng.random();
                if c > c0 && c - c0 >= *min_gap {
                    break c;
                }
                tries += 1;
                if tries > 100_000 {
                    return Err(SimError::Config(ConfigError::Invalid {
                        field: "safe.c",
                        msg: format!("no c in [0,1] with c - c0 >= {min_gap} (c0 = {c0})"),
                    }));
                }
            }
        }
    };
    env.theta_star = theta;
    env.mu_star = Some(mu);
    env.c = c;
    Ok((env, Some(c0)))
}

impl Environment {
    /// Reward and optional safety measurement for `x` played by `agent` at round `t`.
    pub fn feedback(&self, set: &DecisionSet, x: &DVector<f64>, agent: usize, t: usize) -> Result<Feedback, SimError> {
        if !set.admits(x, NORM_TOL) {
            let norm = match set {
                DecisionSet::Box { .. } => x.amax(),
                DecisionSet::Finite(_) => x.norm(),
            };
            return Err(SimError::ActionNorm { agent, t, norm });
        }
        let noise = |ch: Channel| -> f64 {
            if self.sigma == 0.0 {
                return 0.0;
            }
            let mut r = substream(self.master_seed, self.realization, agent as u32, t as u64, ch);
            self.sigma * r.sample::<f64, _>(StandardNormal)
        };
        Ok(Feedback {
            reward: self.theta_star.dot(x) + noise(Channel::Reward),
            safety: self.mu_star.as_ref().map(|mu| mu.dot(x) + noise(Channel::Safety)),
        })
    }

    pub fn is_safe(&self, x: &DVector<f64>) -> bool {
        self.mu_star.as_ref().is_none_or(|mu| mu.dot(x) <= self.c)
    }
}

/// Best action and its expected reward; safe mode restricts to arms with
/// `⟨μ*, x⟩ ≤ c`.
pub fn optimal_value(env: &Environment, set: &DecisionSet, safe: bool) -> Result<(DVector<f64>, f64), SimError> {
    match set {
        DecisionSet::Box { .. } => {
            if safe {
                return Err(SimError::Config(ConfigError::Invalid {
                    field: "decision_set",
                    msg: "safe optimum needs a finite decision set".into(),
                }));
            }
            let x = crate::bandit::sign_vector(&env.theta_star);
            Ok((x, env.theta_star.lp_norm(1)))
        }
        DecisionSet::Finite(arms) => {
            let mut best: Option<(usize, f64)> = None;
            for (k, a) in arms.iter().enumerate() {
                if safe && !env.is_safe(a) {
                    continue;
                }
                let v = env.theta_star.dot(a);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            let (k, v) = best.ok_or_else(|| SimError::Invariant("true safe set is empty".into()))?;
            Ok((arms[k].clone(), v))
        }
    }
}

/// Per-round record of one realization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub t: usize,
    /// Network instantaneous regret `Σ_i r_{i,t}`.
    pub regret: f64,
    pub cumulative_regret: f64,
    pub scalars_sent: usize,
    pub phase: Option<usize>,
    pub phases_cum: usize,
    pub violations: usize,
    pub violation_magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceSummary {
    pub final_regret: f64,
    pub total_comm: usize,
    pub phase_count: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub s: usize,
    pub lambda2_abs: f64,
    pub bound: Option<f64>,
    pub kappa_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trace {
    pub n_agents: usize,
    pub rounds: Vec<RoundRecord>,
    pub summary: TraceSummary,
}

/// Everything drawn for one realization before the first round.
#[derive(Clone, Debug)]
pub struct Instance {
    pub p: CommMatrix,
    pub plan: MixingPlan,
    pub set: DecisionSet,
    pub env: Environment,
    pub geo: Option<SafeGeometry>,
    pub radius: RadiusParams,
    pub x_star: DVector<f64>,
    pub opt_value: f64,
}

/// Arms uniform in the unit ball. Each realization draws its own set from a
/// stream keyed by `(arm_seed, realization)`.
pub fn sample_arms(k: usize, d: usize, arm_seed: u64, realization: u64) -> Vec<DVector<f64>> {
    let mut rng = substream(arm_seed, realization, 0, 0, Channel::Arms);
    (0..k)
        .map(|_| {
            let dir = unit_gaussian(d, &mut rng);
            let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
            dir * r
        })
        .collect()
}

impl Instance {
    pub fn build(cfg: &ExperimentConfig, realization: u64) -> Result<Self, SimError> {
        let graph_key = if cfg.resample_graph() { realization } else { 0 };
        let mut grng = substream(cfg.seed, graph_key, 0, 0, Channel::Graph);
        let topo = cfg.topology.build(cfg.n, &mut grng)?;
        let p = build_comm_matrix(&topo, cfg.comm_scheme)?;
        let plan = MixingPlan::for_matrix(&p, cfg.epsilon())?;
        let safe = cfg.algorithm == Algorithm::SafeDlucb;
        let x0 = match &cfg.safe.x0 {
            SafeActionMode::Zero => DVector::zeros(cfg.d),
            SafeActionMode::Vector(v) => DVector::from_column_slice(v),
        };
        let set = match &cfg.decision_set {
            DecisionSpec::Box => DecisionSet::Box { d: cfg.d },
            DecisionSpec::Finite { k, arm_seed } => {
                let mut arms = sample_arms(*k, cfg.d, *arm_seed, realization);
                if safe {
                    arms.insert(0, x0.clone());
                }
                DecisionSet::finite(arms)?
            }
        };
        let mut erng = substream(cfg.seed, realization, 0, 0, Channel::Environment);
        let (mut env, c0) = sample_environment(
            cfg.d,
            cfg.sigma,
            safe.then_some((&x0, &cfg.safe.c)),
            &mut erng,
        )?;
        env.master_seed = cfg.seed;
        env.realization = realization;
        let geo = match c0 {
            Some(c0) => Some(SafeGeometry::new(x0, c0, env.c)?),
            None => None,
        };
        let (x_star, opt_value) = optimal_value(&env, &set, safe)?;
        Ok(Instance {
            p,
            plan,
            set,
            env,
            geo,
            radius: cfg.radius_params(),
            x_star,
            opt_value,
        })
    }

    pub fn make_fleet(&self, cfg: &ExperimentConfig) -> Result<Box<dyn Fleet + Send>, SimError> {
        let set = self.set.clone();
        let fleet: Box<dyn Fleet + Send> = match cfg.algorithm {
            Algorithm::Dlucb | Algorithm::Dlts | Algorithm::SafeDlucb => Box::new(DlucbFleet::new(
                self.p.clone(),
                self.plan.clone(),
                set,
                self.radius,
                if cfg.algorithm == Algorithm::Dlts {
                    DecisionRule::Thompson
                } else {
                    DecisionRule::Ucb
                },
                cfg.keep_warmup_data,
                self.geo.clone(),
            )?),
            Algorithm::RcDlucb => Box::new(RcFleet::new(
                self.p.clone(),
                self.plan.clone(),
                set,
                self.radius,
                cfg.rc_threshold
                    .unwrap_or_else(|| rc_threshold(cfg.d, cfg.n, cfg.horizon, cfg.lambda)),
            )),
            Algorithm::NoComm => Box::new(NoCommFleet::new(cfg.n, set, self.radius)),
            Algorithm::Centralized => Box::new(CentralizedFleet::new(cfg.n, set, self.radius)),
        };
        Ok(fleet)
    }

    /// Regret bound for this realization, when the algorithm has one and the
    /// parameters fall in its domain.
    pub fn bound(&self, cfg: &ExperimentConfig) -> Option<f64> {
        let params = BoundParams {
            d: cfg.d,
            n: cfg.n,
            horizon: cfg.horizon,
            lambda: cfg.lambda,
            sigma: cfg.sigma,
            delta: cfg.delta,
            epsilon: cfg.epsilon(),
            s: self.plan.s,
            kappa_r: self.geo.as_ref().map_or(1.0, |g| g.kappa_r),
        };
        let variant = match cfg.algorithm {
            Algorithm::Dlucb | Algorithm::Dlts => BoundVariant::Dlucb,
            Algorithm::RcDlucb => BoundVariant::RcDlucb,
            Algorithm::SafeDlucb => BoundVariant::SafeDlucb,
            Algorithm::NoComm | Algorithm::Centralized => return None,
        };
        theoretical_regret_bound(variant, &params)
            .or_else(|e| match variant {
                BoundVariant::Dlucb => theoretical_regret_bound(BoundVariant::DlucbGeneral, &params),
                _ => Err(e),
            })
            .ok()
    }
}

/// Runs the round loop of one prepared instance with the given fleet.
pub fn run_instance(cfg: &ExperimentConfig, inst: &Instance, fleet: &mut dyn Fleet) -> Result<Trace, SimError> {
    let safe = inst.geo.is_some();
    let env = &inst.env;
    let set = &inst.set;
    let seed = cfg.seed;
    let realization = env.realization;
    let ts_rng = move |agent: usize, t: usize| substream(seed, realization, agent as u32, t as u64, Channel::Thompson);
    let mut rounds = Vec::with_capacity(cfg.horizon);
    let mut cum = 0.0;
    let mut total_comm = 0usize;
    let mut phases = 0usize;
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    for t in 1..=cfg.horizon {
        let mut env_fn = |agent: usize, t: usize, x: &DVector<f64>| -> Result<Feedback, AgentError> {
            env.feedback(set, x, agent, t).map_err(|e| AgentError::Invariant(e.to_string()))
        };
        let log = fleet.play_round(t, &mut env_fn, &ts_rng)?;
        let mut regret = 0.0;
        let mut round_viol = 0usize;
        let mut magnitude = 0.0;
        for (agent, x) in log.actions.iter().enumerate() {
            let r = inst.opt_value - env.theta_star.dot(x);
            let excess = env.mu_star.as_ref().map_or(0.0, |mu| mu.dot(x) - env.c);
            if safe && excess > 0.0 {
                round_viol += 1;
                magnitude += excess;
                max_violation = max_violation.max(excess);
            } else if r < -1e-12 {
                return Err(SimError::Invariant(format!(
                    "negative regret {r} for agent {agent} at round {t}"
                )));
            }
            regret += r;
        }
        cum += regret;
        total_comm += log.scalars_sent;
        phases = phases.max(log.phases_started);
        violations += round_viol;
        rounds.push(RoundRecord {
            t,
            regret,
            cumulative_regret: cum,
            scalars_sent: log.scalars_sent,
            phase: log.phase,
            phases_cum: phases,
            violations: round_viol,
            violation_magnitude: magnitude,
        });
    }
    Ok(Trace {
        n_agents: fleet.n_agents(),
        rounds,
        summary: TraceSummary {
            final_regret: cum,
            total_comm,
            phase_count: phases,
            violations,
            max_violation,
            s: inst.plan.s,
            lambda2_abs: inst.p.lambda2_abs(),
            bound: inst.bound(cfg),
            kappa_r: inst.geo.as_ref().map(|g| g.kappa_r),
        },
    })
}

/// One seeded realization from a validated config.
pub fn run_realization(cfg: &ExperimentConfig, realization: u64) -> Result<Trace, SimError> {
    let inst = Instance::build(cfg, realization)?;
    let mut fleet = inst.make_fleet(cfg)?;
    run_instance(cfg, &inst, fleet.as_mut())
}

/// All realizations of a config on a pool of `workers` threads, in order.
pub fn run_many(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<Trace>, SimError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    pool.install(|| {
        (0..cfg.realizations as u64)
            .into_par_iter()
            .map(|r| run_realization(cfg, r))
            .collect()
    })
}

/// Pointwise statistics across realizations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub t: Vec<usize>,
    pub regret_mean: Vec<f64>,
    pub regret_std: Vec<f64>,
    pub per_agent_regret_mean: Vec<f64>,
    pub comm_scalars_cum: Vec<f64>,
    pub phases_cum: Vec<f64>,
    pub violations_cum: Vec<f64>,
    pub phase_count_mean: f64,
    pub phase_count_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of cumulative regret, plus averaged
/// counters. Traces must have equal length.
pub fn aggregate(traces: &[Trace]) -> Result<Aggregate, SimError> {
    let first = traces.first().ok_or(SimError::NoTraces)?;
    let len = first.rounds.len();
    if let Some(bad) = traces.iter().find(|t| t.rounds.len() != len) {
        return Err(SimError::LengthMismatch(len, bad.rounds.len()));
    }
    let mut agg = Aggregate {
        t: Vec::with_capacity(len),
        regret_mean: Vec::with_capacity(len),
        regret_std: Vec::with_capacity(len),
        per_agent_regret_mean: Vec::with_capacity(len),
        comm_scalars_cum: Vec::with_capacity(len),
        phases_cum: Vec::with_capacity(len),
        violations_cum: Vec::with_capacity(len),
        phase_count_mean: 0.0,
        phase_count_std: 0.0,
    };
    let m = traces.len() as f64;
    let mut comm = vec![0usize; traces.len()];
    let mut viol = vec![0usize; traces.len()];
    let mut col = vec![0.0; traces.len()];
    for k in 0..len {
        let mut per_agent = 0.0;
        let mut phases = 0.0;
        for (j, tr) in traces.iter().enumerate() {
            let r = &tr.rounds[k];
            col[j] = r.cumulative_regret;
            per_agent += r.cumulative_regret / tr.n_agents as f64;
            comm[j] += r.scalars_sent;
            viol[j] += r.violations;
            phases += r.phases_cum as f64;
        }
        let (mean, std) = mean_std(&col);
        agg.t.push(first.rounds[k].t);
        agg.regret_mean.push(mean);
        agg.regret_std.push(std);
        agg.per_agent_regret_mean.push(per_agent / m);
        agg.comm_scalars_cum.push(comm.iter().sum::<usize>() as f64 / m);
        agg.phases_cum.push(phases / m);
        agg.violations_cum.push(viol.iter().sum::<usize>() as f64 / m);
    }
    let pc: Vec<f64> = traces.iter().map(|t| t.summary.phase_count as f64).collect();
    (agg.phase_count_mean, agg.phase_count_std) = mean_std(&pc);
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(alg: Algorithm) -> ExperimentConfig {
        ExperimentConfig::new(TopologySpec::Ring, 4, 2, 30, alg).validate().unwrap()
    }

    #[test]
    fn substreams_are_distinct_and_stable() {
        let a: u64 = substream(1, 2, 3, 4, Channel::Reward).random();
        let b: u64 = substream(1, 2, 3, 4, Channel::Reward).random();
        let c: u64 = substream(1, 2, 3, 4, Channel::Safety).random();
        let d: u64 = substream(1, 2, 3, 5, Channel::Reward).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn environment_is_unit_and_reproducible() {
        for seed in 0..50 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (e, _) = sample_environment(5, 0.1, None, &mut r).unwrap();
            assert!((e.theta_star.norm() - 1.0).abs() < 1e-12);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_environment(5, 0.1, None, &mut r2).unwrap().0, e);
        }
    }

    #[test]
    fn environment_direction_is_isotropic() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let mut mean = DVector::<f64>::zeros(5);
        for _ in 0..10_000 {
            mean += sample_environment(5, 0.1, None, &mut r).unwrap().0.theta_star;
        }
        assert!((mean / 10_000.0).norm() <= 0.02);
    }

    #[test]
    fn safe_environment_respects_gap() {
        let x0 = DVector::zeros(2);
        let mode = ConstraintMode::Uniform { min_gap: 0.3 };
        for seed in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let (e, c0) = sample_environment(2, 0.1, Some((&x0, &mode)), &mut r).unwrap();
            assert_eq!(c0, Some(0.0));
            assert!(e.c >= 0.3 && e.c <= 1.0);
            assert!((e.mu_star.unwrap().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_feedback_is_exact() {
        let env = Environment {
            theta_star: DVector::from_column_slice(&[0.6, -0.8]),
            mu_star: None,
            c: f64::INFINITY,
            sigma: 0.0,
            master_seed: 0,
            realization: 0,
        };
        let set = DecisionSet::Box { d: 2 };
        let x = DVector::from_column_slice(&[1.0, 0.5]);
        assert_eq!(env.feedback(&set, &x, 0, 1).unwrap().reward, 0.6 - 0.4);
        let too_big = DVector::from_column_slice(&[1.5, 0.0]);
        assert!(matches!(env.feedback(&set, &too_big, 0, 1), Err(SimError::ActionNorm { .. })));
        let (xs, v) = optimal_value(&env, &set, false).unwrap();
        assert_eq!(xs.as_slice(), &[1.0, -1.0]);
        assert!((v - 1.4).abs() < 1e-15);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let env = Environment {
            theta_star: DVector::from_column_slice(&[1.0, 0.0]),
            mu_star: None,
            c: f64::INFINITY,
            sigma: 0.1,
            master_seed: 5,
            realization: 0,
        };
        let set = DecisionSet::Box { d: 2 };
        let zero = DVector::zeros(2);
        let ys: Vec<f64> = (1..=100_000).map(|t| env.feedback(&set, &zero, 0, t).unwrap().reward).collect();
        let (_, sd) = mean_std(&ys);
        assert!((sd * sd / 0.01 - 1.0).abs() < 0.03);
        let again = env.feedback(&set, &zero, 0, 77).unwrap().reward;
        assert_eq!(again, ys[76]);
    }

    #[test]
    fn finite_optimum_matches_enumeration() {
        let env = Environment {
            theta_star: DVector::from_column_slice(&[0.0, 1.0]),
            mu_star: Some(DVector::from_column_slice(&[0.0, 1.0])),
            c: 0.5,
            sigma: 0.0,
            master_seed: 0,
            realization: 0,
        };
        let set = DecisionSet::finite(vec![
            DVector::from_column_slice(&[1.0, 0.0]),
            DVector::from_column_slice(&[0.0, 0.9]),
            DVector::from_column_slice(&[0.0, 0.4]),
        ])
        .unwrap();
        assert_eq!(optimal_value(&env, &set, false).unwrap().1, 0.9);
        assert_eq!(optimal_value(&env, &set, true).unwrap().1, 0.4);
    }

    #[test]
    fn zero_horizon_is_empty() {
        let mut c = cfg(Algorithm::Dlucb);
        c.horizon = 0;
        let tr = run_realization(&c, 0).unwrap();
        assert!(tr.rounds.is_empty());
        assert_eq!(tr.summary.final_regret, 0.0);
    }

    #[test]
    fn no_comm_sends_nothing() {
        let tr = run_realization(&cfg(Algorithm::NoComm), 0).unwrap();
        assert!(tr.rounds.iter().all(|r| r.scalars_sent == 0));
    }

    #[test]
    fn cumulative_regret_is_monotone() {
        for alg in [Algorithm::Dlucb, Algorithm::Dlts, Algorithm::RcDlucb, Algorithm::Centralized] {
            let tr = run_realization(&cfg(alg), 1).unwrap();
            for w in tr.rounds.windows(2) {
                assert!(w[1].cumulative_regret >= w[0].cumulative_regret - 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_two_point() {
        let mk = |scale: f64| Trace {
            n_agents: 2,
            rounds: (1..=3)
                .map(|t| RoundRecord {
                    t,
                    regret: scale,
                    cumulative_regret: scale * t as f64,
                    scalars_sent: 0,
                    phase: None,
                    phases_cum: 0,
                    violations: 0,
                    violation_magnitude: 0.0,
                })
                .collect(),
            summary: TraceSummary {
                final_regret: 3.0 * scale,
                total_comm: 0,
                phase_count: 0,
                violations: 0,
                max_violation: 0.0,
                s: 1,
                lambda2_abs: 0.0,
                bound: None,
                kappa_r: None,
            },
        };
        let one = aggregate(&[mk(1.0)]).unwrap();
        assert!(one.regret_std.iter().all(|&s| s == 0.0));
        let two = aggregate(&[mk(1.0), mk(3.0)]).unwrap();
        for (k, t) in two.t.iter().enumerate() {
            let r = *t as f64;
            assert!((two.regret_mean[k] - 2.0 * r).abs() < 1e-12);
            assert!((two.regret_std[k] - 2f64.sqrt() * r).abs() < 1e-12);
            assert!((two.per_agent_regret_mean[k] - r).abs() < 1e-12);
        }
        let mut short = mk(1.0);
        short.rounds.pop();
        assert!(matches!(aggregate(&[mk(1.0), short]), Err(SimError::LengthMismatch(3, 2))));
        assert!(matches!(aggregate(&[]), Err(SimError::NoTraces)));
    }

    #[test]
    fn config_defaults_and_rejections() {
        let c = cfg(Algorithm::Dlucb);
        assert_eq!(c.epsilon, Some(1.0 / 9.0));
        assert_eq!(c.resample_graph, Some(false));
        let mut bad = ExperimentConfig::new(TopologySpec::Ring, 4, 2, 30, Algorithm::SafeDlucb);
        let err = bad.clone().validate().unwrap_err().to_string();
        assert!(err.contains("finite"), "{err}");
        bad.epsilon = Some(2.0);
        bad.decision_set = DecisionSpec::Finite { k: 4, arm_seed: 0 };
        assert!(bad.validate().unwrap_err().to_string().contains("epsilon"));
    }
}
