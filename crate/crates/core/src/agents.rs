//! Per-agent state machines and the fleets that step them in lockstep.
//!
//! A fleet owns all agents of one realization and executes a round as
//! absorb, select, observe, then one synchronous gossip exchange where every
//! next-value is computed from the frozen published set.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{
    greedy_select, project_components, safe_filter, ts_perturb, ucb_select_box, ucb_select_finite,
    BanditError, ConfidenceSet, DecisionSet, NormFlavor, OrthoStats, RadiusParams, SafeGeometry,
    SufficientStats,
};
use crate::consensus::{
    advance_queues, comm_step, dequeue_mixed, enqueue_round, ConsensusError, ConsensusQueue,
    MixingPlan, SlotLayout,
};
use crate::graph::CommMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("invariant breach: {0}")]
    Invariant(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dlucb,
    RcDlucb,
    SafeDlucb,
    Dlts,
    NoComm,
    Centralized,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Dlucb,
        Algorithm::RcDlucb,
        Algorithm::SafeDlucb,
        Algorithm::Dlts,
        Algorithm::NoComm,
        Algorithm::Centralized,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Dlucb => "dlucb",
            Algorithm::RcDlucb => "rc_dlucb",
            Algorithm::SafeDlucb => "safe_dlucb",
            Algorithm::Dlts => "dlts",
            Algorithm::NoComm => "no_comm",
            Algorithm::Centralized => "centralized",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

/// Environment response to one played action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feedback {
    pub reward: f64,
    pub safety: Option<f64>,
}

/// What a fleet did in one round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundLog {
    pub actions: Vec<DVector<f64>>,
    /// Sum over agents of scalars sent to each neighbor.
    pub scalars_sent: usize,
    /// Communication phase id active this round (RC only).
    pub phase: Option<usize>,
    pub phases_started: usize,
}

/// Environment callback: `(agent, round, action) -> feedback`.
pub type EnvFn<'a> = dyn FnMut(usize, usize, &DVector<f64>) -> Result<Feedback, AgentError> + 'a;
/// Randomness for Thompson perturbations: `(agent, round) -> generator`.
pub type TsRngFn<'a> = dyn Fn(usize, usize) -> ChaCha8Rng + 'a;

/// A network of agents that can be stepped one round at a time.
pub trait Fleet {
    fn play_round(&mut self, t: usize, env: &mut EnvFn<'_>, ts_rng: &TsRngFn<'_>) -> Result<RoundLog, AgentError>;
    fn n_agents(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecisionRule {
    Ucb,
    Thompson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

/// Chosen action with bookkeeping for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Choice {
    pub action: DVector<f64>,
    pub arm: Option<usize>,
    pub safe_set_size: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SafeState {
    pub geo: SafeGeometry,
    pub ortho: OrthoStats,
}

/// DLUCB agent; also runs DLTS and Safe-DLUCB depending on its rule and
/// safety state.
#[derive(Clone, Debug)]
pub struct DlucbAgent {
    pub index: usize,
    pub n: usize,
    pub s: usize,
    pub stats: SufficientStats,
    pub queue: ConsensusQueue,
    pub keep_warmup_data: bool,
    pub rule: DecisionRule,
    pub safe: Option<SafeState>,
}

impl AsRef<ConsensusQueue> for DlucbAgent {
    fn as_ref(&self) -> &ConsensusQueue {
        &self.queue
    }
}

impl AsMut<ConsensusQueue> for DlucbAgent {
    fn as_mut(&mut self) -> &mut ConsensusQueue {
        &mut self.queue
    }
}

fn select_unsafe(
    stats: &SufficientStats,
    beta: f64,
    set: &DecisionSet,
) -> Result<Choice, AgentError> {
    Ok(match set {
        DecisionSet::Box { .. } => {
            let cs = ConfidenceSet::from_stats(stats, beta, NormFlavor::Ell1Scaled)?;
            let (x, _) = ucb_select_box(&cs, 1.0)?;
            Choice {
                action: x,
                arm: None,
                safe_set_size: None,
            }
        }
        DecisionSet::Finite(arms) => {
            let cs = ConfidenceSet::from_stats(stats, beta, NormFlavor::Ell2)?;
            let (k, _) = ucb_select_finite(arms, &cs, 1.0)?;
            Choice {
                action: arms[k].clone(),
                arm: Some(k),
                safe_set_size: None,
            }
        }
    })
}

impl DlucbAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        n: usize,
        d: usize,
        lambda: f64,
        s: usize,
        keep_warmup_data: bool,
        rule: DecisionRule,
        safe: Option<SafeGeometry>,
    ) -> Self {
        let layout = SlotLayout {
            n,
            d,
            safety: safe.is_some(),
        };
        DlucbAgent {
            index,
            n,
            s,
            stats: SufficientStats::new(d, lambda),
            queue: ConsensusQueue::new(layout, s),
            keep_warmup_data,
            rule,
            safe: safe.map(|geo| SafeState {
                ortho: OrthoStats::new(&geo, lambda),
                geo,
            }),
        }
    }

    pub fn phase(&self, t: usize) -> Phase {
        if t <= self.s {
            Phase::Warmup
        } else {
            Phase::Main
        }
    }

    /// Start of round `t`: leave warmup and absorb the fully mixed slot.
    /// Returns the source round absorbed, if any.
    pub fn begin_round(&mut self, t: usize) -> Result<Option<usize>, AgentError> {
        if t <= self.s {
            return Ok(None);
        }
        if t == self.s + 1 && !self.keep_warmup_data {
            self.stats.reset();
            if let Some(st) = self.safe.as_mut() {
                st.ortho.reset(&st.geo);
            }
        }
        let payload = dequeue_mixed(&mut self.queue)?;
        let n2 = (self.n * self.n) as f64;
        self.stats.absorb_rows(&payload.actions, &payload.rewards, n2);
        if let Some(st) = self.safe.as_mut() {
            let z = payload.safety.as_ref().ok_or_else(|| {
                AgentError::Invariant("safety channel missing from a safe slot".into())
            })?;
            let mut rows_perp = payload.actions.clone();
            let mut z_perp = z.clone();
            for k in 0..self.n {
                let row: DVector<f64> = payload.actions.row(k).transpose();
                let (_, xp) = project_components(&row, &st.geo);
                rows_perp.set_row(k, &xp.transpose());
                // the shift is linear, so it commutes with mixing
                z_perp[k] -= st.geo.known_component(&row);
            }
            st.ortho.absorb_rows(&rows_perp, &z_perp, n2);
        }
        Ok(Some(payload.source_round))
    }

    pub fn select(
        &self,
        t: usize,
        set: &DecisionSet,
        radius: &RadiusParams,
        ts_rng: &TsRngFn<'_>,
    ) -> Result<Choice, AgentError> {
        let beta = radius.beta(t)?;
        if let Some(st) = &self.safe {
            return self.select_safe(st, beta, set);
        }
        match self.rule {
            DecisionRule::Ucb => select_unsafe(&self.stats, beta, set),
            DecisionRule::Thompson => {
                let cs = ConfidenceSet::from_stats(&self.stats, beta, NormFlavor::Ell2)?;
                let mut rng = ts_rng(self.index, t);
                let theta = ts_perturb(&cs, beta, &mut rng)?;
                let (arm, action) = greedy_select(set, &theta);
                Ok(Choice {
                    action,
                    arm,
                    safe_set_size: None,
                })
            }
        }
    }

    fn select_safe(&self, st: &SafeState, beta: f64, set: &DecisionSet) -> Result<Choice, AgentError> {
        let arms = set.arms().ok_or_else(|| {
            AgentError::Config("safe_dlucb requires a finite decision set".into())
        })?;
        let mu = st.ortho.estimate()?;
        let keep = safe_filter(arms, &mu, &st.ortho, beta, &st.geo)?;
        if keep.is_empty() {
            let arm = arms.iter().position(|a| *a == st.geo.x0);
            return Ok(Choice {
                action: st.geo.x0.clone(),
                arm,
                safe_set_size: Some(0),
            });
        }
        let subset: Vec<DVector<f64>> = keep.iter().map(|&k| arms[k].clone()).collect();
        let cs = ConfidenceSet::from_stats(&self.stats, beta, NormFlavor::Ell2)?;
        let (j, _) = ucb_select_finite(&subset, &cs, st.geo.kappa_r)?;
        Ok(Choice {
            action: subset[j].clone(),
            arm: Some(keep[j]),
            safe_set_size: Some(keep.len()),
        })
    }

    /// Records the round's own observation and queues it for mixing.
    pub fn observe(&mut self, t: usize, x: &DVector<f64>, fb: Feedback) -> Result<(), AgentError> {
        if self.safe.is_some() != fb.safety.is_some() {
            return Err(AgentError::Invariant(
                "safety feedback presence does not match the agent mode".into(),
            ));
        }
        if t <= self.s {
            self.stats.observe(x, fb.reward);
            if let (Some(st), Some(z)) = (self.safe.as_mut(), fb.safety) {
                let (_, xp) = project_components(x, &st.geo);
                let zp = z - st.geo.known_component(x);
                st.ortho.observe(&xp, zp);
            }
        }
        enqueue_round(&mut self.queue, t, x.as_slice(), fb.reward, fb.safety, self.index)?;
        Ok(())
    }
}

/// DLUCB, DLTS and Safe-DLUCB fleets.
#[derive(Clone, Debug)]
pub struct DlucbFleet {
    pub agents: Vec<DlucbAgent>,
    pub p: CommMatrix,
    pub plan: MixingPlan,
    pub set: DecisionSet,
    pub radius: RadiusParams,
}

impl DlucbFleet {
    pub fn new(
        p: CommMatrix,
        plan: MixingPlan,
        set: DecisionSet,
        radius: RadiusParams,
        rule: DecisionRule,
        keep_warmup_data: bool,
        safe: Option<SafeGeometry>,
    ) -> Result<Self, AgentError> {
        let n = p.n();
        let d = set.dim();
        if let Some(geo) = &safe {
            let arms = set.arms().ok_or_else(|| {
                AgentError::Config("safe_dlucb requires a finite decision set".into())
            })?;
            if !arms.contains(&geo.x0) {
                return Err(AgentError::Config("safe action x0 is not in the arm set".into()));
            }
        }
        let agents = (0..n)
            .map(|i| {
                DlucbAgent::new(i, n, d, radius.lambda, plan.s, keep_warmup_data, rule, safe.clone())
            })
            .collect();
        Ok(DlucbFleet {
            agents,
            p,
            plan,
            set,
            radius,
        })
    }
}

impl Fleet for DlucbFleet {
    fn n_agents(&self) -> usize {
        self.agents.len()
    }

    fn play_round(&mut self, t: usize, env: &mut EnvFn<'_>, ts_rng: &TsRngFn<'_>) -> Result<RoundLog, AgentError> {
        for a in self.agents.iter_mut() {
            a.begin_round(t)?;
        }
        let choices = self
            .agents
            .iter()
            .map(|a| a.select(t, &self.set, &self.radius, ts_rng))
            .collect::<Result<Vec<_>, _>>()?;
        for (a, c) in self.agents.iter_mut().zip(&choices) {
            let fb = env(a.index, t, &c.action)?;
            a.observe(t, &c.action, fb)?;
        }
        let per_link = advance_queues(&mut self.agents, &self.p, &self.plan)?;
        let links = 2 * self.p.topology().edge_count();
        Ok(RoundLog {
            actions: choices.into_iter().map(|c| c.action).collect(),
            scalars_sent: per_link * links,
            phase: None,
            phases_started: 0,
        })
    }
}

fn log_det_spd(a: &DMatrix<f64>) -> Result<f64, AgentError> {
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(BanditError::NotPositiveDefinite)?;
    Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// RC-DLUCB agent state.
#[derive(Clone, Debug)]
pub struct RcDlucbAgent {
    pub index: usize,
    pub lambda: f64,
    pub w_syn: DMatrix<f64>,
    pub w_new: DMatrix<f64>,
    pub v_syn: DVector<f64>,
    pub v_new: DVector<f64>,
    /// `t_{k−1}`: last round of the previous communication phase.
    pub epoch_start: usize,
    pub logdet_epoch_start: f64,
    pub frozen_action: Option<DVector<f64>>,
    pub frozen_reward_sum: f64,
    pub threshold_m: f64,
}

impl RcDlucbAgent {
    pub fn new(index: usize, d: usize, lambda: f64, threshold_m: f64) -> Self {
        RcDlucbAgent {
            index,
            lambda,
            w_syn: DMatrix::zeros(d, d),
            w_new: DMatrix::zeros(d, d),
            v_syn: DVector::zeros(d),
            v_new: DVector::zeros(d),
            epoch_start: 0,
            logdet_epoch_start: d as f64 * lambda.ln(),
            frozen_action: None,
            frozen_reward_sum: 0.0,
            threshold_m,
        }
    }

    /// `A = λI + W_syn + W_new`, `b = v_syn + v_new`.
    pub fn stats(&self) -> SufficientStats {
        let d = self.v_new.len();
        SufficientStats {
            gram: DMatrix::identity(d, d) * self.lambda + &self.w_syn + &self.w_new,
            moment: &self.v_syn + &self.v_new,
            lambda: self.lambda,
        }
    }

    /// Records an out-of-phase play; returns whether the agent triggers a
    /// communication phase.
    pub fn observe(&mut self, t: usize, x: &DVector<f64>, y: f64) -> Result<bool, AgentError> {
        self.w_new.ger(1.0, x, x, 1.0);
        self.v_new.axpy(y, x, 1.0);
        let growth = log_det_spd(&self.stats().gram)? - self.logdet_epoch_start;
        Ok(growth * (t - self.epoch_start) as f64 > self.threshold_m)
    }

    fn payload(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w_new.iter().copied().collect();
        v.extend(self.v_new.iter());
        v
    }

    /// End of a communication phase that finished at round `t`.
    fn absorb_phase(&mut self, mixed: &[f64], n: usize, s: usize, t: usize) -> Result<(), AgentError> {
        let d = self.v_new.len();
        let nf = n as f64;
        self.w_syn += DMatrix::from_column_slice(d, d, &mixed[..d * d]) * nf;
        self.v_syn += DVector::from_column_slice(&mixed[d * d..]) * nf;
        let x = self
            .frozen_action
            .take()
            .ok_or_else(|| AgentError::Invariant("phase ended without a frozen action".into()))?;
        self.w_new = &x * x.transpose() * s as f64;
        self.v_new = &x * self.frozen_reward_sum;
        self.frozen_reward_sum = 0.0;
        self.epoch_start = t;
        self.logdet_epoch_start = log_det_spd(&self.stats().gram)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct PhaseState {
    id: usize,
    step: usize,
    now: Vec<Vec<f64>>,
    prev: Vec<Vec<f64>>,
}

/// RC-DLUCB fleet with a shared one-bit phase signal.
#[derive(Clone, Debug)]
pub struct RcFleet {
    pub agents: Vec<RcDlucbAgent>,
    pub p: CommMatrix,
    pub plan: MixingPlan,
    pub set: DecisionSet,
    pub radius: RadiusParams,
    phase: Option<PhaseState>,
    phases_started: usize,
}

impl RcFleet {
    pub fn new(p: CommMatrix, plan: MixingPlan, set: DecisionSet, radius: RadiusParams, threshold_m: f64) -> Self {
        let d = set.dim();
        let agents = (0..p.n())
            .map(|i| RcDlucbAgent::new(i, d, radius.lambda, threshold_m))
            .collect();
        RcFleet {
            agents,
            p,
            plan,
            set,
            radius,
            phase: None,
            phases_started: 0,
        }
    }

    pub fn phases_started(&self) -> usize {
        self.phases_started
    }

    pub fn in_phase(&self) -> bool {
        self.phase.is_some()
    }
}

impl Fleet for RcFleet {
    fn n_agents(&self) -> usize {
        self.agents.len()
    }

    fn play_round(&mut self, t: usize, env: &mut EnvFn<'_>, _ts_rng: &TsRngFn<'_>) -> Result<RoundLog, AgentError> {
        let n = self.agents.len();
        if let Some(mut ph) = self.phase.take() {
            let mut actions = Vec::with_capacity(n);
            for a in self.agents.iter_mut() {
                let x = a
                    .frozen_action
                    .clone()
                    .ok_or_else(|| AgentError::Invariant("phase without frozen action".into()))?;
                a.frozen_reward_sum += env(a.index, t, &x)?.reward;
                actions.push(x);
            }
            ph.step += 1;
            let next = comm_step(&ph.now, &ph.prev, ph.step, &self.p, &self.plan)?;
            ph.prev = std::mem::replace(&mut ph.now, next);
            let d = self.set.dim();
            let sent = 2 * self.p.topology().edge_count() * d * (d + 1);
            let id = ph.id;
            if ph.step == self.plan.s {
                for (a, mixed) in self.agents.iter_mut().zip(&ph.now) {
                    a.absorb_phase(mixed, n, self.plan.s, t)?;
                }
            } else {
                self.phase = Some(ph);
            }
            return Ok(RoundLog {
                actions,
                scalars_sent: sent,
                phase: Some(id),
                phases_started: self.phases_started,
            });
        }

        let choices = self
            .agents
            .iter()
            .map(|a| -> Result<Choice, AgentError> {
                select_unsafe(&a.stats(), self.radius.beta(t)?, &self.set)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut trigger = false;
        for (a, c) in self.agents.iter_mut().zip(&choices) {
            let fb = env(a.index, t, &c.action)?;
            trigger |= a.observe(t, &c.action, fb.reward)?;
        }
        if trigger {
            self.phases_started += 1;
            for (a, c) in self.agents.iter_mut().zip(&choices) {
                a.frozen_action = Some(c.action.clone());
                a.frozen_reward_sum = 0.0;
            }
            let now: Vec<Vec<f64>> = self.agents.iter().map(RcDlucbAgent::payload).collect();
            let prev = vec![vec![0.0; now[0].len()]; n];
            self.phase = Some(PhaseState {
                id: self.phases_started,
                step: 0,
                now,
                prev,
            });
        }
        Ok(RoundLog {
            actions: choices.into_iter().map(|c| c.action).collect(),
            scalars_sent: 0,
            phase: None,
            phases_started: self.phases_started,
        })
    }
}

/// Independent single-agent LUCB learners.
#[derive(Clone, Debug)]
pub struct NoCommFleet {
    pub stats: Vec<SufficientStats>,
    pub set: DecisionSet,
    pub radius: RadiusParams,
}

impl NoCommFleet {
    pub fn new(n: usize, set: DecisionSet, radius: RadiusParams) -> Self {
        NoCommFleet {
            stats: vec![SufficientStats::new(set.dim(), radius.lambda); n],
            set,
            radius,
        }
    }
}

impl Fleet for NoCommFleet {
    fn n_agents(&self) -> usize {
        self.stats.len()
    }

    fn play_round(&mut self, t: usize, env: &mut EnvFn<'_>, _ts_rng: &TsRngFn<'_>) -> Result<RoundLog, AgentError> {
        let beta = self.radius.beta(t)?;
        let mut actions = Vec::with_capacity(self.stats.len());
        for (i, st) in self.stats.iter_mut().enumerate() {
            let c = select_unsafe(st, beta, &self.set)?;
            let fb = env(i, t, &c.action)?;
            st.observe(&c.action, fb.reward);
            actions.push(c.action);
        }
        Ok(RoundLog {
            actions,
            ..RoundLog::default()
        })
    }
}

/// All agents share one set of statistics updated with every observation.
#[derive(Clone, Debug)]
pub struct CentralizedFleet {
    pub n: usize,
    pub stats: SufficientStats,
    pub set: DecisionSet,
    pub radius: RadiusParams,
}

impl CentralizedFleet {
    pub fn new(n: usize, set: DecisionSet, radius: RadiusParams) -> Self {
        CentralizedFleet {
            n,
            stats: SufficientStats::new(set.dim(), radius.lambda),
            set,
            radius,
        }
    }
}

impl Fleet for CentralizedFleet {
    fn n_agents(&self) -> usize {
        self.n
    }

    fn play_round(&mut self, t: usize, env: &mut EnvFn<'_>, _ts_rng: &TsRngFn<'_>) -> Result<RoundLog, AgentError> {
        let c = select_unsafe(&self.stats, self.radius.beta(t)?, &self.set)?;
        let mut obs = Vec::with_capacity(self.n);
        for i in 0..self.n {
            obs.push(env(i, t, &c.action)?.reward);
        }
        for y in obs {
            self.stats.observe(&c.action, y);
        }
        let d = self.set.dim();
        Ok(RoundLog {
            actions: vec![c.action; self.n],
            // every agent broadcasts its action and reward to every other agent
            scalars_sent: self.n * (self.n - 1) * (d + 1),
            phase: None,
            phases_started: 0,
        })
    }
}
