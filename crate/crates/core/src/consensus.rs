//! Chebyshev-accelerated gossip and the pipelined FIFO queues built on it.
//!
//! Every agent holds a queue of slots. A slot is the agent's current estimate
//! of one round's network-wide payload (actions, rewards and optionally safety
//! feedback of all agents). Each simulation round every slot receives one
//! [`comm_step`], so after `S` rounds the oldest slot holds
//! `q_S(P)`-weighted copies of every peer's data and is absorbed.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{compute_mixing_rounds, CommMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("|lambda_2| = {0} must lie in [0, 1)")]
    BadLambda(f64),
    #[error("mixing step {ell} outside 1..={s}")]
    StepOutOfRange { ell: usize, s: usize },
    #[error("payload shape mismatch: expected {expected} values, got {got} (agent {agent})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        agent: usize,
    },
    #[error("queue overflow: already holding {0} slots")]
    Overflow(usize),
    #[error("oldest slot mixed {mixed} of {s} rounds; dequeue is premature")]
    NotFullyMixed { mixed: usize, s: usize },
    #[error("dequeue from an empty queue")]
    Empty,
    #[error("agent {agent} queue length {len} differs from agent 0's {expected}")]
    MisalignedQueues {
        agent: usize,
        len: usize,
        expected: usize,
    },
}

/// `T_ℓ(1/|λ₂|)` for `ℓ = 0..=s`.
pub fn chebyshev_weights(s: usize, lambda2_abs: f64) -> Result<Vec<f64>, ConsensusError> {
    if !(lambda2_abs > 0.0 && lambda2_abs < 1.0) {
        return Err(ConsensusError::BadLambda(lambda2_abs));
    }
    let x = 1.0 / lambda2_abs;
    let mut w = Vec::with_capacity(s + 1);
    w.push(1.0);
    if s >= 1 {
        w.push(x);
    }
    for l in 1..s {
        let next = 2.0 * x * w[l] - w[l - 1];
        w.push(next);
    }
    Ok(w)
}

/// Parameters of one mixing schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingPlan {
    pub epsilon: f64,
    pub s: usize,
    pub lambda2_abs: f64,
    /// `w_0..=w_S`; just `[1]` when `|λ₂| = 0`.
    pub weights: Vec<f64>,
}

impl MixingPlan {
    /// Plan with `S` from [`compute_mixing_rounds`].
    pub fn new(n: usize, epsilon: f64, lambda2_abs: f64) -> Result<Self, ConsensusError> {
        if !(0.0..1.0).contains(&lambda2_abs) {
            return Err(ConsensusError::BadLambda(lambda2_abs));
        }
        let s = compute_mixing_rounds(n, epsilon, lambda2_abs);
        Self::with_rounds(s, epsilon, lambda2_abs)
    }

    pub fn for_matrix(p: &CommMatrix, epsilon: f64) -> Result<Self, ConsensusError> {
        Self::new(p.n(), epsilon, p.lambda2_abs())
    }

    /// Plan with an explicit horizon.
    pub fn with_rounds(s: usize, epsilon: f64, lambda2_abs: f64) -> Result<Self, ConsensusError> {
        if lambda2_abs == 0.0 {
            return Ok(MixingPlan {
                epsilon,
                s: s.max(1),
                lambda2_abs,
                weights: vec![1.0],
            });
        }
        Ok(MixingPlan {
            epsilon,
            s: s.max(1),
            lambda2_abs,
            weights: chebyshev_weights(s.max(1), lambda2_abs)?,
        })
    }

    /// Coefficients `(α, β)` with `next = α·P·now − β·prev` at step `ell`.
    pub fn step_coefficients(&self, ell: usize) -> Result<(f64, f64), ConsensusError> {
        if ell == 0 || ell > self.s {
            return Err(ConsensusError::StepOutOfRange { ell, s: self.s });
        }
        if ell == 1 || self.lambda2_abs == 0.0 {
            return Ok((1.0, 0.0));
        }
        let w = &self.weights;
        Ok((
            2.0 * w[ell - 1] / (self.lambda2_abs * w[ell]),
            w[ell - 2] / w[ell],
        ))
    }
}

/// Read access granted to one agent during a gossip step.
///
/// `reader` is the agent doing the computing. Implementations may refuse
/// reads that the network would not permit.
pub trait GossipView {
    fn n_agents(&self) -> usize;
    fn now(&self, reader: usize, owner: usize) -> &[f64];
    fn prev(&self, reader: usize) -> &[f64];
}

struct DenseView<'a> {
    now: &'a [Vec<f64>],
    prev: &'a [Vec<f64>],
}

impl GossipView for DenseView<'_> {
    fn n_agents(&self) -> usize {
        self.now.len()
    }
    fn now(&self, _reader: usize, owner: usize) -> &[f64] {
        &self.now[owner]
    }
    fn prev(&self, reader: usize) -> &[f64] {
        &self.prev[reader]
    }
}

/// Next value for agent `i`, reading only `i` and its graph neighbors.
pub fn comm_step_agent<V: GossipView + ?Sized>(
    view: &V,
    i: usize,
    ell: usize,
    p: &CommMatrix,
    plan: &MixingPlan,
) -> Result<Vec<f64>, ConsensusError> {
    let (alpha, beta) = plan.step_coefficients(ell)?;
    let own = view.now(i, i);
    let len = own.len();
    let mut acc: Vec<f64> = own.iter().map(|v| p.get(i, i) * v).collect();
    for &j in p.topology().neighbors(i) {
        let other = view.now(i, j);
        if other.len() != len {
            return Err(ConsensusError::ShapeMismatch {
                expected: len,
                got: other.len(),
                agent: j,
            });
        }
        let w = p.get(i, j);
        for (a, v) in acc.iter_mut().zip(other) {
            *a += w * v;
        }
    }
    if beta != 0.0 {
        let prev = view.prev(i);
        if prev.len() != len {
            return Err(ConsensusError::ShapeMismatch {
                expected: len,
                got: prev.len(),
                agent: i,
            });
        }
        for (a, pv) in acc.iter_mut().zip(prev) {
            *a = alpha * *a - beta * pv;
        }
    } else if alpha != 1.0 {
        acc.iter_mut().for_each(|a| *a *= alpha);
    }
    Ok(acc)
}

/// One synchronous gossip round over a view: all next-values are computed
/// from the frozen published set.
pub fn comm_step_view<V: GossipView + ?Sized>(
    view: &V,
    ell: usize,
    p: &CommMatrix,
    plan: &MixingPlan,
) -> Result<Vec<Vec<f64>>, ConsensusError> {
    (0..view.n_agents())
        .map(|i| comm_step_agent(view, i, ell, p, plan))
        .collect()
}

/// One synchronous gossip round. `now[i]` and `prev[i]` are agent `i`'s
/// current and previous values; `prev` is ignored at `ell = 1`.
pub fn comm_step(
    now: &[Vec<f64>],
    prev: &[Vec<f64>],
    ell: usize,
    p: &CommMatrix,
    plan: &MixingPlan,
) -> Result<Vec<Vec<f64>>, ConsensusError> {
    if let Some(len) = now.first().map(Vec::len) {
        for (agent, v) in now.iter().enumerate() {
            if v.len() != len {
                return Err(ConsensusError::ShapeMismatch {
                    expected: len,
                    got: v.len(),
                    agent,
                });
            }
        }
    }
    comm_step_view(&DenseView { now, prev }, ell, p, plan)
}

/// `q_S(P)` obtained by running `S` comm steps on the identity.
pub fn mixing_polynomial(p: &CommMatrix, plan: &MixingPlan) -> DMatrix<f64> {
    let n = p.n();
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; n]; n];
    let mut now: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for ell in 1..=plan.s {
        let next = comm_step(&now, &prev, ell, p, plan).expect("shapes are uniform");
        prev = std::mem::replace(&mut now, next);
    }
    DMatrix::from_fn(n, n, |i, j| now[i][j])
}

/// Gains `a_ij = N·[q_S(P)]_ij`.
pub fn mixed_gain(p: &CommMatrix, plan: &MixingPlan) -> DMatrix<f64> {
    mixing_polynomial(p, plan) * p.n() as f64
}

/// `q_S(P) = T_S(P/|λ₂|)/T_S(1/|λ₂|)` from the eigendecomposition of `P`.
pub fn mixing_polynomial_closed_form(p: &CommMatrix, s: usize) -> DMatrix<f64> {
    let l2 = p.lambda2_abs();
    let eig = nalgebra::SymmetricEigen::new(p.entries().clone());
    let f = |lam: f64| -> f64 {
        if l2 == 0.0 {
            // one exact averaging round: q_1(P) = P
            return lam;
        }
        chebyshev_t(s, lam / l2) / chebyshev_t(s, 1.0 / l2)
    };
    let vals = DVector::from_iterator(p.n(), eig.eigenvalues.iter().map(|&l| f(l)));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Chebyshev polynomial of the first kind, by the three-term recursion.
pub fn chebyshev_t(n: usize, x: f64) -> f64 {
    let (mut a, mut b) = (1.0, x);
    if n == 0 {
        return a;
    }
    for _ in 1..n {
        let c = 2.0 * x * b - a;
        a = b;
        b = c;
    }
    b
}

/// Layout of a DLUCB slot payload: `N·d` action entries (row-major by
/// agent), then `N` rewards, then optionally `N` safety values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub n: usize,
    pub d: usize,
    pub safety: bool,
}

impl SlotLayout {
    pub fn len(&self) -> usize {
        self.n * self.d + self.n * (1 + usize::from(self.safety))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One agent's view of one source round, in flight.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsensusSlot {
    pub source_round: usize,
    pub rounds_mixed: usize,
    pub now: Vec<f64>,
    pub prev: Vec<f64>,
}

/// Fully mixed payload of one source round as seen by one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPayload {
    pub source_round: usize,
    /// `N × d`; row `k` is `(a_ik/N)·x_k`.
    pub actions: DMatrix<f64>,
    pub rewards: DVector<f64>,
    pub safety: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct ConsensusQueue {
    layout: SlotLayout,
    capacity: usize,
    slots: VecDeque<ConsensusSlot>,
}

impl ConsensusQueue {
    pub fn new(layout: SlotLayout, capacity: usize) -> Self {
        ConsensusQueue {
            layout,
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn layout(&self) -> SlotLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn slots(&self) -> impl ExactSizeIterator<Item = &ConsensusSlot> {
        self.slots.iter()
    }

    /// Whether the oldest slot has received all `S` mixing rounds.
    pub fn head_ready(&self) -> bool {
        self.slots.front().is_some_and(|s| s.rounds_mixed >= self.capacity)
    }
}

/// Appends a fresh slot whose only nonzero entries are agent `agent`'s own.
pub fn enqueue_round(
    queue: &mut ConsensusQueue,
    source_round: usize,
    own_action: &[f64],
    own_reward: f64,
    own_safety: Option<f64>,
    agent: usize,
) -> Result<(), ConsensusError> {
    let lay = queue.layout;
    if queue.slots.len() >= queue.capacity {
        return Err(ConsensusError::Overflow(queue.slots.len()));
    }
    if own_action.len() != lay.d {
        return Err(ConsensusError::ShapeMismatch {
            expected: lay.d,
            got: own_action.len(),
            agent,
        });
    }
    if own_safety.is_some() != lay.safety {
        return Err(ConsensusError::ShapeMismatch {
            expected: lay.len(),
            got: lay.n * lay.d + lay.n * (1 + usize::from(own_safety.is_some())),
            agent,
        });
    }
    let mut now = vec![0.0; lay.len()];
    now[agent * lay.d..(agent + 1) * lay.d].copy_from_slice(own_action);
    now[lay.n * lay.d + agent] = own_reward;
    if let Some(z) = own_safety {
        now[lay.n * lay.d + lay.n + agent] = z;
    }
    queue.slots.push_back(ConsensusSlot {
        source_round,
        rounds_mixed: 0,
        prev: vec![0.0; lay.len()],
        now,
    });
    Ok(())
}

/// Removes the oldest slot once it is fully mixed.
pub fn dequeue_mixed(queue: &mut ConsensusQueue) -> Result<MixedPayload, ConsensusError> {
    let head = queue.slots.front().ok_or(ConsensusError::Empty)?;
    if head.rounds_mixed < queue.capacity {
        return Err(ConsensusError::NotFullyMixed {
            mixed: head.rounds_mixed,
            s: queue.capacity,
        });
    }
    let slot = queue.slots.pop_front().expect("checked nonempty");
    let lay = queue.layout;
    let nd = lay.n * lay.d;
    Ok(MixedPayload {
        source_round: slot.source_round,
        actions: DMatrix::from_row_slice(lay.n, lay.d, &slot.now[..nd]),
        rewards: DVector::from_column_slice(&slot.now[nd..nd + lay.n]),
        safety: lay
            .safety
            .then(|| DVector::from_column_slice(&slot.now[nd + lay.n..nd + 2 * lay.n])),
    })
}

/// Advances every in-flight slot of every agent by one gossip step.
///
/// All agents' queues must be aligned: same length and same per-slot
/// `rounds_mixed`. Returns the number of scalars each agent sent to each
/// neighbor.
pub fn advance_queues<Q: AsRef<ConsensusQueue> + AsMut<ConsensusQueue>>(
    queues: &mut [Q],
    p: &CommMatrix,
    plan: &MixingPlan,
) -> Result<usize, ConsensusError> {
    let Some(first) = queues.first() else {
        return Ok(0);
    };
    let len = first.as_ref().len();
    for (agent, q) in queues.iter().enumerate() {
        let q = q.as_ref();
        if q.len() != len {
            return Err(ConsensusError::MisalignedQueues {
                agent,
                len: q.len(),
                expected: len,
            });
        }
    }
    let mut sent = 0;
    for k in 0..len {
        let ell = queues[0].as_ref().slots[k].rounds_mixed + 1;
        let view = SlotView { queues: &*queues, k };
        let next = comm_step_view(&view, ell, p, plan)?;
        sent += next.first().map_or(0, Vec::len);
        for (q, v) in queues.iter_mut().zip(next) {
            let slot = &mut q.as_mut().slots[k];
            slot.prev = std::mem::replace(&mut slot.now, v);
            slot.rounds_mixed = ell;
        }
    }
    Ok(sent)
}

impl AsRef<ConsensusQueue> for ConsensusQueue {
    fn as_ref(&self) -> &ConsensusQueue {
        self
    }
}

impl AsMut<ConsensusQueue> for ConsensusQueue {
    fn as_mut(&mut self) -> &mut ConsensusQueue {
        self
    }
}

struct SlotView<'a, Q> {
    queues: &'a [Q],
    k: usize,
}

impl<Q: AsRef<ConsensusQueue>> GossipView for SlotView<'_, Q> {
    fn n_agents(&self) -> usize {
        self.queues.len()
    }
    fn now(&self, _reader: usize, owner: usize) -> &[f64] {
        &self.queues[owner].as_ref().slots[self.k].now
    }
    fn prev(&self, reader: usize) -> &[f64] {
        &self.queues[reader].as_ref().slots[self.k].prev
    }
}
