//! Network topologies and gossip communication matrices.
//!
//! A [`GraphTopology`] is an undirected, connected, simple graph. From it we
//! build a [`CommMatrix`]: a symmetric, doubly stochastic matrix that respects
//! the graph's sparsity pattern and whose second-largest eigenvalue magnitude
//! `|λ₂|` drives how fast repeated averaging converges.
//!
//! Two constructions are offered:
//!
//! * [`CommScheme::Laplacian`]: `P = I − L/(δ_max+1)`. Doubly stochastic on
//!   every graph; the default.
//! * [`CommScheme::NormalizedLaplacian`]: `P = I − D^{-1/2} L D^{-1/2}/(δ_max+1)`.
//!   Only doubly stochastic on regular graphs, so construction validates the
//!   row sums and refuses irregular instances.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for every doubly-stochastic check.
pub const ASSUMPTION_TOL: f64 = 1e-9;

/// Eigenvalue magnitudes below this are treated as exactly zero.
const ZERO_EIGEN_TOL: f64 = 1e-12;

const ER_MAX_RETRIES: usize = 10_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("topology {kind} needs at least {min} nodes, got {n}")]
    TooFewNodes { kind: String, n: usize, min: usize },
    #[error("edge probability {0} outside (0, 1]")]
    BadProbability(f64),
    #[error("no connected Erdős–Rényi sample after {0} attempts (graph too sparse)")]
    RetryBudgetExhausted(usize),
    #[error("graph is disconnected: {reached} of {n} nodes reachable from node 0")]
    Disconnected { reached: usize, n: usize },
    #[error("invalid edge ({u}, {v}) for a graph with {n} nodes")]
    InvalidEdge { u: usize, v: usize, n: usize },
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("communication matrix violates the doubly-stochastic requirement: {0}")]
    AssumptionViolation(String),
    #[error("symmetric eigen-solver did not converge for a {0}x{0} matrix")]
    EigenNonConvergence(usize),
    #[error("reading edge list: {0}")]
    Io(#[from] std::io::Error),
}

/// Which family a topology was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Star,
    Complete,
    Path,
    ErdosRenyi { p: f64 },
    Explicit,
}

impl TopologyKind {
    fn min_nodes(&self) -> usize {
        match self {
            TopologyKind::Ring => 3,
            TopologyKind::Complete | TopologyKind::Explicit => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Ring => write!(f, "ring"),
            TopologyKind::Star => write!(f, "star"),
            TopologyKind::Complete => write!(f, "complete"),
            TopologyKind::Path => write!(f, "path"),
            TopologyKind::ErdosRenyi { p } => write!(f, "erdos_renyi(p={p})"),
            TopologyKind::Explicit => write!(f, "explicit"),
        }
    }
}

/// Undirected connected simple graph stored as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTopology {
    kind: TopologyKind,
    neighbors: Vec<Vec<usize>>,
}

impl GraphTopology {
    /// Builds a topology from an edge list, rejecting self-loops, out-of-range
    /// endpoints and disconnected graphs. Duplicate edges collapse.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize)],
        kind: TopologyKind,
    ) -> Result<Self, GraphError> {
        if n < kind.min_nodes() {
            return Err(GraphError::TooFewNodes {
                kind: kind.to_string(),
                n,
                min: kind.min_nodes(),
            });
        }
        let mut sets = vec![BTreeSet::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n || u == v {
                return Err(GraphError::InvalidEdge { u, v, n });
            }
            sets[u].insert(v);
            sets[v].insert(u);
        }
        let topo = GraphTopology {
            kind,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        };
        let reached = topo.reachable_from_zero();
        if reached != n {
            return Err(GraphError::Disconnected { reached, n });
        }
        Ok(topo)
    }

    /// Parses a plain-text edge list: one `u v` pair per line, 0-indexed.
    /// Blank lines and lines starting with `#` are skipped. The node count is
    /// one more than the largest index seen.
    pub fn from_edge_list_str(text: &str) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        let mut n = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = |what: &str| -> Result<usize, GraphError> {
                parts
                    .next()
                    .ok_or_else(|| GraphError::Parse {
                        line: idx + 1,
                        msg: format!("missing {what} endpoint"),
                    })?
                    .parse::<usize>()
                    .map_err(|e| GraphError::Parse {
                        line: idx + 1,
                        msg: e.to_string(),
                    })
            };
            let u = next("first")?;
            let v = next("second")?;
            if parts.next().is_some() {
                return Err(GraphError::Parse {
                    line: idx + 1,
                    msg: "expected exactly two node indices".into(),
                });
            }
            n = n.max(u + 1).max(v + 1);
            edges.push((u, v));
        }
        Self::from_edges(n, &edges, TopologyKind::Explicit)
    }

    pub fn load_edge_list(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_edge_list_str(&text)
    }

    pub fn kind(&self) -> &TopologyKind {
        &self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    /// Neighbors of `i`, ascending, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn is_regular(&self) -> bool {
        let d0 = self.degree(0);
        (0..self.n_nodes()).all(|i| self.degree(i) == d0)
    }

    /// Symmetric 0/1 adjacency matrix with zero diagonal.
    pub fn adjacency_matrix(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut a = DMatrix::zeros(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Combinatorial Laplacian `L = D − A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency_matrix();
        for i in 0..self.n_nodes() {
            l[(i, i)] = self.degree(i) as f64;
        }
        l
    }

    /// Edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (u, nbrs) in self.neighbors.iter().enumerate() {
            out.extend(nbrs.iter().filter(|&&v| v > u).map(|&v| (u, v)));
        }
        out
    }

    fn reachable_from_zero(&self) -> usize {
        let n = self.n_nodes();
        if n == 0 {
            return 0;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &self.neighbors[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count
    }
}

/// Builds a connected topology of the requested family.
///
/// Erdős–Rényi graphs are resampled from `rng` until connected, up to a fixed
/// retry budget, so the result is a deterministic function of the rng state.
pub fn build_topology<R: Rng + ?Sized>(
    kind: TopologyKind,
    n: usize,
    rng: &mut R,
) -> Result<GraphTopology, GraphError> {
    if n < kind.min_nodes() {
        return Err(GraphError::TooFewNodes {
            kind: kind.to_string(),
            n,
            min: kind.min_nodes(),
        });
    }
    let edges: Vec<(usize, usize)> = match &kind {
        TopologyKind::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        TopologyKind::Star => (1..n).map(|i| (0, i)).collect(),
        TopologyKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        TopologyKind::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        TopologyKind::ErdosRenyi { p } => {
            let p = *p;
            if !(p > 0.0 && p <= 1.0) {
                return Err(GraphError::BadProbability(p));
            }
            for _ in 0..ER_MAX_RETRIES {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                match GraphTopology::from_edges(n, &edges, kind.clone()) {
                    Ok(t) => return Ok(t),
                    Err(GraphError::Disconnected { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            return Err(GraphError::RetryBudgetExhausted(ER_MAX_RETRIES));
        }
        TopologyKind::Explicit => {
            return Err(GraphError::Parse {
                line: 0,
                msg: "explicit topologies are loaded from an edge list".into(),
            })
        }
    };
    GraphTopology::from_edges(n, &edges, kind)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommScheme {
    #[default]
    Laplacian,
    NormalizedLaplacian,
}

impl fmt::Display for CommScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommScheme::Laplacian => write!(f, "laplacian"),
            CommScheme::NormalizedLaplacian => write!(f, "normalized_laplacian"),
        }
    }
}

/// Deviations of a candidate matrix from the doubly-stochastic requirements.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub max_row_sum_deviation: f64,
    pub max_col_sum_deviation: f64,
    pub max_asymmetry: f64,
    pub off_structure_nonzeros: usize,
    pub lambda2_abs: Option<f64>,
}

impl AssumptionReport {
    pub fn passes(&self) -> bool {
        self.max_row_sum_deviation <= ASSUMPTION_TOL
            && self.max_col_sum_deviation <= ASSUMPTION_TOL
            && self.max_asymmetry <= 1e-12
            && self.off_structure_nonzeros == 0
            && self.lambda2_abs.is_some_and(|l| l < 1.0)
    }
}

/// Raw `P` for a scheme, without validation.
pub fn raw_comm_entries(topology: &GraphTopology, scheme: CommScheme) -> DMatrix<f64> {
    let n = topology.n_nodes();
    let scale = 1.0 / (topology.max_degree() as f64 + 1.0);
    let lap = topology.laplacian();
    let shaped = match scheme {
        CommScheme::Laplacian => lap,
        CommScheme::NormalizedLaplacian => {
            let inv_sqrt = DVector::from_iterator(
                n,
                (0..n).map(|i| {
                    let d = topology.degree(i) as f64;
                    if d > 0.0 {
                        1.0 / d.sqrt()
                    } else {
                        0.0
                    }
                }),
            );
            let mut m = lap;
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] *= inv_sqrt[i] * inv_sqrt[j];
                }
            }
            m
        }
    };
    let mut p = DMatrix::identity(n, n) - shaped * scale;
    if scheme == CommScheme::Laplacian {
        // (δmax+1−deg)/(δmax+1) rounds like the off-diagonal 1/(δmax+1)
        let denom = topology.max_degree() as f64 + 1.0;
        for i in 0..n {
            p[(i, i)] = (denom - topology.degree(i) as f64) / denom;
        }
    }
    // Entries off the graph structure are exact zeros by construction; keep them so.
    for i in 0..n {
        for j in 0..n {
            if i != j && !topology.is_adjacent(i, j) {
                p[(i, j)] = 0.0;
            }
        }
    }
    p
}

/// Measures how far the scheme's matrix is from satisfying the requirements,
/// without failing. Used by diagnostics.
pub fn assumption_report(topology: &GraphTopology, scheme: CommScheme) -> AssumptionReport {
    let p = raw_comm_entries(topology, scheme);
    let n = p.nrows();
    let mut row = 0.0f64;
    let mut col = 0.0f64;
    let mut asym = 0.0f64;
    let mut off = 0;
    for i in 0..n {
        row = row.max((p.row(i).sum() - 1.0).abs());
        col = col.max((p.column(i).sum() - 1.0).abs());
        for j in 0..n {
            asym = asym.max((p[(i, j)] - p[(j, i)]).abs());
            if i != j && !topology.is_adjacent(i, j) && p[(i, j)] != 0.0 {
                off += 1;
            }
        }
    }
    let lambda2_abs = sorted_spectrum(&p).ok().map(|ev| second_magnitude(&ev));
    AssumptionReport {
        max_row_sum_deviation: row,
        max_col_sum_deviation: col,
        max_asymmetry: asym,
        off_structure_nonzeros: off,
        lambda2_abs,
    }
}

/// Eigenvalues sorted by decreasing magnitude (ties: larger signed value first).
fn sorted_spectrum(p: &DMatrix<f64>) -> Result<Vec<f64>, GraphError> {
    let n = p.nrows();
    let eig = SymmetricEigen::try_new(p.clone(), f64::EPSILON, 1000 * n.max(1))
        .ok_or(GraphError::EigenNonConvergence(n))?;
    let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()).then(b.total_cmp(a)));
    Ok(ev)
}

/// `|λ₂|`: the largest magnitude after removing the consensus eigenvalue 1.
fn second_magnitude(sorted: &[f64]) -> f64 {
    let one = sorted
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).abs().total_cmp(&(b.1 - 1.0).abs()))
        .map(|(k, _)| k);
    let l2 = sorted
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != one)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    if l2 < ZERO_EIGEN_TOL {
        0.0
    } else {
        l2
    }
}

/// Symmetric doubly stochastic gossip matrix with its cached spectrum.
#[derive(Clone, Debug)]
pub struct CommMatrix {
    entries: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    lambda2_abs: f64,
    scheme: CommScheme,
    topology: GraphTopology,
}

impl CommMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Eigenvalues sorted by decreasing magnitude; the first is the consensus eigenvalue 1.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda2_abs(&self) -> f64 {
        self.lambda2_abs
    }

    pub fn scheme(&self) -> CommScheme {
        self.scheme
    }

    pub fn topology(&self) -> &GraphTopology {
        &self.topology
    }
}

/// Builds and validates the communication matrix for `topology`.
pub fn build_comm_matrix(
    topology: &GraphTopology,
    scheme: CommScheme,
) -> Result<CommMatrix, GraphError> {
    let entries = raw_comm_entries(topology, scheme);
    let n = entries.nrows();
    for i in 0..n {
        let rs = entries.row(i).sum();
        if (rs - 1.0).abs() > ASSUMPTION_TOL {
            return Err(GraphError::AssumptionViolation(format!(
                "{scheme} scheme: row {i} sums to {rs:.12} (degrees range over {}..={})",
                (0..n).map(|j| topology.degree(j)).min().unwrap_or(0),
                topology.max_degree()
            )));
        }
        let cs = entries.column(i).sum();
        if (cs - 1.0).abs() > ASSUMPTION_TOL {
            return Err(GraphError::AssumptionViolation(format!(
                "{scheme} scheme: column {i} sums to {cs:.12}"
            )));
        }
    }
    let eigenvalues = sorted_spectrum(&entries)?;
    let lambda2_abs = second_magnitude(&eigenvalues);
    if lambda2_abs >= 1.0 - ASSUMPTION_TOL {
        return Err(GraphError::AssumptionViolation(format!(
            "|lambda_2| = {lambda2_abs} is not below 1"
        )));
    }
    Ok(CommMatrix {
        entries,
        eigenvalues,
        lambda2_abs,
        scheme,
        topology: topology.clone(),
    })
}

/// `|λ₂|` of a validated matrix (cached at construction).
pub fn spectral_gap(p: &CommMatrix) -> f64 {
    p.lambda2_abs()
}

/// Number of gossip rounds `S` after which Chebyshev-accelerated mixing is
/// `ε`-accurate.
///
/// Starts from `⌊log(2N/ε)/√(2 log(1/|λ₂|))⌋` and increases it until the
/// spectral certificate `N·√(1−1/N)/T_S(1/|λ₂|) ≤ ε` holds, where `T_S` is
/// the Chebyshev polynomial of the first kind. The certificate bounds
/// `‖N·q_S(P)·e_j − 1‖₂` for every `j`, and is always met by the ceiling of
/// the closed-form expression, so the loop stays short. `|λ₂| = 0` gives 1.
pub fn compute_mixing_rounds(n: usize, epsilon: f64, lambda2_abs: f64) -> usize {
    assert!(
        epsilon > 0.0 && epsilon < 1.0,
        "epsilon must lie in (0, 1), got {epsilon}"
    );
    assert!(
        (0.0..1.0).contains(&lambda2_abs),
        "|lambda_2| must lie in [0, 1), got {lambda2_abs}"
    );
    if lambda2_abs == 0.0 || n <= 1 {
        return 1;
    }
    let nf = n as f64;
    let closed_form = (2.0 * nf / epsilon).ln() / (2.0 * (1.0 / lambda2_abs).ln()).sqrt();
    let mut s = (closed_form.floor() as usize).max(1);
    let target = nf * (1.0 - 1.0 / nf).sqrt() / epsilon;
    let growth = (1.0 / lambda2_abs).acosh();
    while (s as f64 * growth).cosh() < target {
        s += 1;
    }
    s
}
