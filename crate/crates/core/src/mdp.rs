//! Finite controlled Markov models, exact dynamic programming, and the
//! cost-to-Q-function map `𝒬` with its fixed-policy resolvents.
//!
//! Internally every model minimises a cost; rewards are stored negated.
//! State-action pairs are enumerated state by state, and within a state by
//! increasing action id, so pair order and action order agree.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_row_stochastic, invert, Matrix, Vector};

/// Q-function values indexed by pair index.
pub type QTable = Vector;

/// One feasible state-action pair of a [`FiniteMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub state: usize,
    pub action: usize,
    /// One-step reward; the model stores `cost = -reward`.
    pub reward: f64,
    /// Next-state distribution, one entry per state.
    pub next: Vec<f64>,
}

/// On-disk JSON shape of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub beta: f64,
    /// Undirected edges, informational only (graph-shaped models).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<[usize; 2]>,
    pub pairs: Vec<PairRecord>,
}

#[derive(Debug, Clone)]
pub struct FiniteMdp {
    n_states: usize,
    actions: Vec<Vec<usize>>,
    pair_offset: Vec<usize>,
    pair_state: Vec<usize>,
    pair_action: Vec<usize>,
    /// Row `k` is `P_u(x, ·)` for pair `k = (x, u)`.
    kernel: Matrix,
    cost: Vector,
    beta: f64,
    edges: Vec<[usize; 2]>,
}

/// A stationary policy.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// Action id per state.
    Deterministic(Vec<usize>),
    /// Mixture `Σ μ(i) φ⁽ⁱ⁾` of deterministic policies.
    Randomized(Vec<(Vec<usize>, f64)>),
    /// Per-state pmf over the feasible actions, ordered as [`FiniteMdp::actions`].
    Product(Vec<Vec<f64>>),
}

impl Policy {
    /// Uniform choice among feasible actions in every state.
    pub fn uniform(mdp: &FiniteMdp) -> Self {
        Policy::Product(
            (0..mdp.n_states())
                .map(|x| {
                    let n = mdp.actions(x).len();
                    vec![1.0 / n as f64; n]
                })
                .collect(),
        )
    }

    pub fn as_deterministic(&self) -> Option<&[usize]> {
        match self {
            Policy::Deterministic(a) => Some(a),
            _ => None,
        }
    }
}

impl FiniteMdp {
    /// Build a model from its feasible pairs. Pairs may come in any order.
    pub fn new(n_states: usize, mut pairs: Vec<PairRecord>, beta: f64) -> Result<Self> {
        if n_states == 0 {
            return Err(Error::InvalidConfig("model needs at least one state".into()));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!("discount factor must lie in [0,1), got {beta}")));
        }
        pairs.sort_by_key(|p| (p.state, p.action));
        let mut actions = vec![Vec::new(); n_states];
        for w in pairs.windows(2) {
            if w[0].state == w[1].state && w[0].action == w[1].action {
                return Err(Error::InvalidConfig(format!("pair (state {}, action {}) listed twice", w[0].state, w[0].action)));
            }
        }
        let d = pairs.len();
        let mut kernel = Matrix::zeros(d, n_states);
        let mut cost = Vector::zeros(d);
        let mut pair_state = Vec::with_capacity(d);
        let mut pair_action = Vec::with_capacity(d);
        for (k, p) in pairs.iter().enumerate() {
            if p.state >= n_states {
                return Err(Error::InvalidConfig(format!("pair {k} refers to state {} of {n_states}", p.state)));
            }
            if p.next.len() != n_states {
                return Err(Error::DimensionMismatch(format!(
                    "pair {k} has {} next-state probabilities, expected {n_states}",
                    p.next.len()
                )));
            }
            if !p.reward.is_finite() {
                return Err(Error::InvalidConfig(format!("pair {k} has a non-finite reward")));
            }
            actions[p.state].push(p.action);
            pair_state.push(p.state);
            pair_action.push(p.action);
            cost[k] = -p.reward;
            for (j, q) in p.next.iter().enumerate() {
                kernel[(k, j)] = *q;
            }
        }
        for (x, a) in actions.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidConfig(format!("state {x} has no feasible action")));
            }
        }
        for (k, row) in kernel.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|q| !q.is_finite() || *q < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::NotStochastic(format!("kernel row of pair {k} sums to {s}")));
            }
        }
        let mut pair_offset = Vec::with_capacity(n_states + 1);
        let mut acc = 0;
        for a in &actions {
            pair_offset.push(acc);
            acc += a.len();
        }
        pair_offset.push(acc);
        Ok(FiniteMdp { n_states, actions, pair_offset, pair_state, pair_action, kernel, cost, beta, edges: Vec::new() })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// Number of feasible pairs `d`.
    pub fn n_pairs(&self) -> usize {
        self.cost.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Same model with a different discount factor.
    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!("discount factor must lie in [0,1), got {beta}")));
        }
        Ok(FiniteMdp { beta, ..self.clone() })
    }

    /// Same model with a different cost vector.
    pub fn with_cost(&self, cost: Vector) -> Result<Self> {
        if cost.len() != self.n_pairs() {
            return Err(Error::DimensionMismatch(format!("cost has {} entries, expected {}", cost.len(), self.n_pairs())));
        }
        Ok(FiniteMdp { cost, ..self.clone() })
    }

    pub fn cost(&self) -> &Vector {
        &self.cost
    }

    /// Rewards, `-cost`.
    pub fn rewards(&self) -> Vector {
        -&self.cost
    }

    /// `d × ℓ` matrix whose row `k` is the next-state law of pair `k`.
    pub fn kernel(&self) -> &Matrix {
        &self.kernel
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Feasible action ids of state `x`, ascending.
    pub fn actions(&self, x: usize) -> &[usize] {
        &self.actions[x]
    }

    /// Pair indices belonging to state `x`.
    pub fn pairs_of(&self, x: usize) -> Range<usize> {
        self.pair_offset[x]..self.pair_offset[x + 1]
    }

    /// `(state, action)` of pair `k`.
    pub fn pair(&self, k: usize) -> (usize, usize) {
        (self.pair_state[k], self.pair_action[k])
    }

    pub fn pair_index(&self, x: usize, u: usize) -> Option<usize> {
        if x >= self.n_states {
            return None;
        }
        self.actions[x].binary_search(&u).ok().map(|i| self.pair_offset[x] + i)
    }

    /// Number of deterministic stationary policies, saturating.
    pub fn n_deterministic_policies(&self) -> usize {
        self.actions.iter().fold(1usize, |acc, a| acc.saturating_mul(a.len()))
    }

    /// All deterministic policies in lexicographic order of per-state action index.
    pub fn deterministic_policies(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let total = self.n_deterministic_policies();
        (0..total).map(move |mut idx| {
            let mut choice = vec![0; self.n_states];
            for x in (0..self.n_states).rev() {
                let n = self.actions[x].len();
                choice[x] = self.actions[x][idx % n];
                idx /= n;
            }
            choice
        })
    }

    /// `S_φ` as an `ℓ × d` matrix: row `x` holds the action probabilities at `x`.
    pub fn selection_matrix(&self, policy: &Policy) -> Result<Matrix> {
        let mut s = Matrix::zeros(self.n_states, self.n_pairs());
        match policy {
            Policy::Deterministic(a) => self.add_deterministic(&mut s, a, 1.0)?,
            Policy::Randomized(mix) => {
                check_pmf(mix.iter().map(|(_, w)| *w))?;
                for (a, w) in mix {
                    self.add_deterministic(&mut s, a, *w)?;
                }
            }
            Policy::Product(pmfs) => {
                if pmfs.len() != self.n_states {
                    return Err(Error::DimensionMismatch(format!("policy covers {} states", pmfs.len())));
                }
                for (x, pmf) in pmfs.iter().enumerate() {
                    if pmf.len() != self.actions[x].len() {
                        return Err(Error::DimensionMismatch(format!(
                            "state {x}: pmf has {} entries for {} actions",
                            pmf.len(),
                            self.actions[x].len()
                        )));
                    }
                    check_pmf(pmf.iter().copied())?;
                    for (i, p) in pmf.iter().enumerate() {
                        s[(x, self.pair_offset[x] + i)] += p;
                    }
                }
            }
        }
        Ok(s)
    }

    fn add_deterministic(&self, s: &mut Matrix, a: &[usize], w: f64) -> Result<()> {
        if a.len() != self.n_states {
            return Err(Error::DimensionMismatch(format!("policy covers {} states", a.len())));
        }
        for (x, &u) in a.iter().enumerate() {
            let k = self.pair_index(x, u).ok_or(Error::InfeasibleAction { state: x, action: u })?;
            s[(x, k)] += w;
        }
        Ok(())
    }

    /// `(P_φ, P S_φ)`: the state chain and the state-action chain under `φ`.
    pub fn policy_matrices(&self, policy: &Policy) -> Result<(Matrix, Matrix)> {
        let s = self.selection_matrix(policy)?;
        Ok((&s * &self.kernel, &self.kernel * &s))
    }

    /// `h_φ = (I - β P_φ)⁻¹ S_φ c`.
    pub fn value_of_policy(&self, policy: &Policy) -> Result<Vector> {
        let s = self.selection_matrix(policy)?;
        let p_phi = &s * &self.kernel;
        let lhs = Matrix::identity(self.n_states, self.n_states) - p_phi * self.beta;
        lhs.lu().solve(&(&s * &self.cost)).ok_or(Error::SingularMatrix)
    }

    /// `q̲(x) = min_u q(x,u)`.
    pub fn min_per_state(&self, q: &Vector) -> Vector {
        Vector::from_iterator(
            self.n_states,
            (0..self.n_states).map(|x| self.pairs_of(x).map(|k| q[k]).fold(f64::INFINITY, f64::min)),
        )
    }

    /// Pair index of the greedy action at `x`; ties go to the lowest action id.
    pub fn greedy_pair(&self, q: &Vector, x: usize) -> usize {
        let mut best = self.pair_offset[x];
        for k in self.pairs_of(x).skip(1) {
            if q[k] < q[best] {
                best = k;
            }
        }
        best
    }

    /// Greedy action ids, one per state.
    pub fn greedy_actions(&self, q: &Vector) -> Vec<usize> {
        (0..self.n_states).map(|x| self.pair_action[self.greedy_pair(q, x)]).collect()
    }

    /// `φ^q`, the deterministic greedy policy of `q`.
    pub fn greedy_policy(&self, q: &Vector) -> Policy {
        Policy::Deterministic(self.greedy_actions(q))
    }

    /// `P S_φ` for a deterministic policy given by greedy pair indices.
    fn pair_chain_for_actions(&self, actions: &[usize]) -> Matrix {
        let d = self.n_pairs();
        let mut m = Matrix::zeros(d, d);
        for x in 0..self.n_states {
            let j = self.pair_index(x, actions[x]).expect("greedy action is feasible");
            for k in 0..d {
                m[(k, j)] += self.kernel[(k, x)];
            }
        }
        m
    }

    /// Sup-norm residual of `q = ς + β P q̲`.
    pub fn q_residual(&self, sigma: &Vector, q: &Vector) -> f64 {
        (sigma + &self.kernel * self.min_per_state(q) * self.beta - q).amax()
    }

    /// `𝒬(ς)`: the Q-function of cost `ς`, by value iteration stopped once the
    /// sup-norm change is below `tol (1-β) / 2β`, then polished by one exact
    /// policy evaluation when that evaluation is self-consistent.
    pub fn q_map_with_tol(&self, sigma: &Vector, tol: f64) -> Result<QTable> {
        if sigma.len() != self.n_pairs() {
            return Err(Error::DimensionMismatch(format!("cost has {} entries, expected {}", sigma.len(), self.n_pairs())));
        }
        if tol <= 0.0 {
            return Err(Error::InvalidConfig("value-iteration tolerance must be positive".into()));
        }
        let beta = self.beta;
        let mut q = sigma.clone();
        if beta > 0.0 {
            let stop = tol * (1.0 - beta) / (2.0 * beta);
            loop {
                let next = sigma + &self.kernel * self.min_per_state(&q) * beta;
                let delta = (&next - &q).amax();
                q = next;
                if delta <= stop {
                    break;
                }
            }
            let actions = self.greedy_actions(&q);
            let m = Matrix::identity(self.n_pairs(), self.n_pairs()) - self.pair_chain_for_actions(&actions) * beta;
            if let Some(exact) = m.lu().solve(sigma) {
                if self.greedy_actions(&exact) == actions && self.q_residual(sigma, &exact) <= self.q_residual(sigma, &q) {
                    q = exact;
                }
            }
        }
        Ok(q)
    }

    /// `𝒬(ς)` to residual `1e-10` or better.
    pub fn q_map(&self, sigma: &Vector) -> Result<QTable> {
        self.q_map_with_tol(sigma, 1e-11)
    }

    /// `Q* = 𝒬(c)`.
    pub fn solve_q_star(&self, tol: f64) -> Result<QTable> {
        self.q_map_with_tol(&self.cost, tol)
    }

    /// `𝒬⁻¹(q) = (I - β P S_{φ^q}) q`.
    pub fn q_inverse(&self, q: &Vector) -> Vector {
        q - &self.kernel * self.min_per_state(q) * self.beta
    }

    /// `∂𝒬_μ = (Σ μ(i) [I - β P S_{φ⁽ⁱ⁾}])⁻¹` for a mixture of deterministic policies.
    pub fn dq_mu(&self, mixture: &[(Vec<usize>, f64)]) -> Result<Matrix> {
        check_pmf(mixture.iter().map(|(_, w)| *w))?;
        let d = self.n_pairs();
        let mut m = Matrix::zeros(d, d);
        for (actions, w) in mixture {
            if actions.len() != self.n_states {
                return Err(Error::DimensionMismatch(format!("policy covers {} states", actions.len())));
            }
            for (x, &u) in actions.iter().enumerate() {
                self.pair_index(x, u).ok_or(Error::InfeasibleAction { state: x, action: u })?;
            }
            m += (Matrix::identity(d, d) - self.pair_chain_for_actions(actions) * self.beta) * *w;
        }
        invert(&m)
    }

    /// Bellman error `B = θ - c - β P θ̲` (cost convention) and `B̄ = max |B|`.
    ///
    /// In reward units the table flips sign and `B̄` is unchanged.
    pub fn bellman_error(&self, theta: &Vector) -> (Vector, f64) {
        let b = theta - &self.cost - &self.kernel * self.min_per_state(theta) * self.beta;
        let max = b.amax();
        (b, max)
    }

    /// Bellman error of a reward-convention table: `θ - r - β P max θ`.
    pub fn bellman_error_reward(&self, theta_reward: &Vector) -> (Vector, f64) {
        let (b, max) = self.bellman_error(&-theta_reward);
        (-b, max)
    }

    pub fn to_file(&self) -> MdpFile {
        let pairs = (0..self.n_pairs())
            .map(|k| PairRecord {
                state: self.pair_state[k],
                action: self.pair_action[k],
                reward: -self.cost[k],
                next: self.kernel.row(k).iter().copied().collect(),
            })
            .collect();
        MdpFile { n_states: self.n_states, beta: self.beta, edges: self.edges.clone(), pairs }
    }

    pub fn from_file(file: MdpFile) -> Result<Self> {
        let edges = file.edges;
        let mut mdp = FiniteMdp::new(file.n_states, file.pairs, file.beta)?;
        mdp.edges = edges;
        Ok(mdp)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Transition matrix of the pair chain under a behaviour policy, checked.
    pub fn pair_chain(&self, behavior: &Policy) -> Result<Matrix> {
        let (_, ps) = self.policy_matrices(behavior)?;
        check_row_stochastic(&ps, 1e-9)?;
        Ok(ps)
    }
}

fn check_pmf(weights: impl Iterator<Item = f64>) -> Result<()> {
    let mut total = 0.0;
    for w in weights {
        if !(w.is_finite() && w >= 0.0) {
            return Err(Error::InvalidConfig(format!("pmf weight {w} is not a probability")));
        }
        total += w;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("pmf sums to {total}")));
    }
    Ok(())
}

/// Topology of the six-state shortest-path model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SixStateConfig {
    /// Undirected edges between nodes `1..=6`.
    pub edges: Vec<[usize; 2]>,
    pub beta: f64,
}

/// Default edge set of the six-state model (nodes numbered from 1).
pub const SIX_STATE_EDGES: [[usize; 2]; 6] = [[1, 3], [2, 3], [2, 4], [3, 5], [4, 5], [5, 6]];

impl Default for SixStateConfig {
    fn default() -> Self {
        SixStateConfig { edges: SIX_STATE_EDGES.to_vec(), beta: 0.8 }
    }
}

/// Six-node stochastic shortest-path model.
///
/// Actions are edges `e_{x,x'}` including self-loops, identified by the
/// destination node (0-based). Taking `e_{x,x'}` moves to `x'` w.p. 0.8 and to
/// a uniformly chosen neighbour of `x` w.p. 0.2. Rewards: 0 on self-loops away
/// from node 6, -100 on `e_{4,5}`, +100 on any edge into node 6, -5 otherwise.
pub fn build_six_state(config: &SixStateConfig) -> Result<FiniteMdp> {
    const N: usize = 6;
    let mut nbrs = vec![Vec::new(); N];
    for &[a, b] in &config.edges {
        if !(1..=N).contains(&a) || !(1..=N).contains(&b) || a == b {
            return Err(Error::InvalidConfig(format!("bad edge {a}-{b}")));
        }
        let (a, b) = (a - 1, b - 1);
        if nbrs[a].contains(&b) {
            return Err(Error::InvalidConfig(format!("edge {}-{} listed twice", a + 1, b + 1)));
        }
        nbrs[a].push(b);
        nbrs[b].push(a);
    }
    let mut pairs = Vec::new();
    for x in 0..N {
        if nbrs[x].is_empty() {
            return Err(Error::InvalidConfig(format!("node {} is isolated", x + 1)));
        }
        let mut dests = nbrs[x].clone();
        dests.push(x);
        dests.sort_unstable();
        for &y in &dests {
            let mut next = vec![0.0; N];
            next[y] += 0.8;
            for &z in &nbrs[x] {
                next[z] += 0.2 / nbrs[x].len() as f64;
            }
            let reward = if y == x && x != 5 {
                0.0
            } else if x == 3 && y == 4 {
                -100.0
            } else if y == 5 {
                100.0
            } else {
                -5.0
            };
            pairs.push(PairRecord { state: x, action: y, reward, next });
        }
    }
    let mut mdp = FiniteMdp::new(N, pairs, config.beta)?;
    mdp.edges = config.edges.clone();
    Ok(mdp)
}
