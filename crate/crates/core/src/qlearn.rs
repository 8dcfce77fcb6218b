//! Q-learning: Watkins and its scalar-gain variants, RPJ averaging, Speedy
//! Q-learning, matrix-gain Q(λ), Zap-Q(λ) and batched O(d) Zap-Q.
//!
//! Tables are in cost units: `Q^θ(x,u) = ψ(x,u)ᵀθ` and greedy means argmin.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::numerics::{stationary_pmf, Matrix, RowSampler, Vector};
use crate::sa::{batch_means, gamma_hat, GainEstimate, MatrixSample, RunningAverage, StepSchedule};

/// Feature map over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// `ψ(x,u) = e_k` with `k` the pair index.
    Tabular(usize),
    /// Row `k` is `ψ(x^k, u^k)ᵀ`.
    Linear(Matrix),
}

impl Basis {
    pub fn tabular(mdp: &FiniteMdp) -> Self {
        Basis::Tabular(mdp.n_pairs())
    }

    pub fn dim(&self) -> usize {
        match self {
            Basis::Tabular(d) => *d,
            Basis::Linear(m) => m.ncols(),
        }
    }

    pub fn is_tabular(&self) -> bool {
        matches!(self, Basis::Tabular(_))
    }

    pub fn psi(&self, k: usize) -> Vector {
        match self {
            Basis::Tabular(d) => {
                let mut v = Vector::zeros(*d);
                v[k] = 1.0;
                v
            }
            Basis::Linear(m) => m.row(k).transpose(),
        }
    }

    /// `Q^θ(x^k, u^k)`.
    pub fn q(&self, theta: &Vector, k: usize) -> f64 {
        match self {
            Basis::Tabular(_) => theta[k],
            Basis::Linear(m) => m.row(k).dot(&theta.transpose()),
        }
    }

    /// `Q^θ` over all pairs.
    pub fn q_table(&self, theta: &Vector) -> Vector {
        match self {
            Basis::Tabular(_) => theta.clone(),
            Basis::Linear(m) => m * theta,
        }
    }
}

/// Greedy pair at `x` for `Q^θ`; ties go to the lowest action id.
fn greedy_pair(mdp: &FiniteMdp, basis: &Basis, theta: &Vector, x: usize) -> usize {
    let mut range = mdp.pairs_of(x);
    let mut best = range.next().expect("every state has an action");
    let mut best_q = basis.q(theta, best);
    for k in range {
        let q = basis.q(theta, k);
        if q < best_q {
            best = k;
            best_q = q;
        }
    }
    best
}

/// Randomized behaviour policy generating the data.
#[derive(Debug, Clone)]
pub struct BehaviorPolicy {
    pmf: Vec<Vec<f64>>,
    cdf: Vec<Vec<f64>>,
}

impl BehaviorPolicy {
    /// Per-state pmf over feasible actions, ordered as [`FiniteMdp::actions`].
    pub fn new(mdp: &FiniteMdp, pmf: Vec<Vec<f64>>) -> Result<Self> {
        if pmf.len() != mdp.n_states() {
            return Err(Error::DimensionMismatch(format!("behaviour covers {} states", pmf.len())));
        }
        let mut cdf = Vec::with_capacity(pmf.len());
        for (x, p) in pmf.iter().enumerate() {
            let s: f64 = p.iter().sum();
            if p.len() != mdp.actions(x).len() || p.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!("behaviour at state {x} is not a pmf over its actions")));
            }
            let mut acc = 0.0;
            cdf.push(
                p.iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect(),
            );
        }
        Ok(BehaviorPolicy { pmf, cdf })
    }

    pub fn uniform(mdp: &FiniteMdp) -> Self {
        let pmf = (0..mdp.n_states()).map(|x| vec![1.0 / mdp.actions(x).len() as f64; mdp.actions(x).len()]).collect();
        Self::new(mdp, pmf).expect("uniform pmf is valid")
    }

    pub fn pmf(&self) -> &[Vec<f64>] {
        &self.pmf
    }

    pub fn as_policy(&self) -> crate::mdp::Policy {
        crate::mdp::Policy::Product(self.pmf.clone())
    }

    /// Pair index drawn at state `x`.
    pub fn sample_pair<R: Rng + ?Sized>(&self, mdp: &FiniteMdp, x: usize, rng: &mut R) -> usize {
        let c = &self.cdf[x];
        let u = rng.random::<f64>() * c[c.len() - 1];
        mdp.pairs_of(x).start + c.partition_point(|v| *v <= u).min(c.len() - 1)
    }

    /// Transition matrix of the pair chain and its invariant pmf `ϖ`, which
    /// must be strictly positive.
    pub fn pair_chain_pmf(&self, mdp: &FiniteMdp) -> Result<(Matrix, Vector)> {
        let ps = mdp.pair_chain(&self.as_policy())?;
        let pmf = stationary_pmf(&ps)?;
        if let Some(pair) = pmf.iter().position(|w| *w <= 0.0) {
            return Err(Error::ZeroStationaryMass { pair });
        }
        Ok((ps, pmf))
    }
}

/// One observed transition `(x, u) → x'`, followed by the behaviour action `u'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub pair: usize,
    pub next_state: usize,
    pub next_pair: usize,
}

/// Simulator of the state-action chain under a behaviour policy.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    mdp: &'a FiniteMdp,
    behavior: BehaviorPolicy,
    kernel: RowSampler,
}

impl<'a> PairSampler<'a> {
    pub fn new(mdp: &'a FiniteMdp, behavior: BehaviorPolicy) -> Self {
        PairSampler { mdp, behavior, kernel: RowSampler::new(mdp.kernel()) }
    }

    pub fn mdp(&self) -> &'a FiniteMdp {
        self.mdp
    }

    pub fn behavior(&self) -> &BehaviorPolicy {
        &self.behavior
    }

    pub fn initial_pair<R: Rng + ?Sized>(&self, x0: usize, rng: &mut R) -> usize {
        self.behavior.sample_pair(self.mdp, x0, rng)
    }

    pub fn step<R: Rng + ?Sized>(&self, pair: usize, rng: &mut R) -> Transition {
        let next_state = self.kernel.sample(pair, rng);
        let next_pair = self.behavior.sample_pair(self.mdp, next_state, rng);
        Transition { pair, next_state, next_pair }
    }

    /// `steps` consecutive transitions starting from state `x0`.
    pub fn path<R: Rng + ?Sized>(&self, x0: usize, steps: usize, rng: &mut R) -> Vec<Transition> {
        let mut pair = self.initial_pair(x0, rng);
        (0..steps)
            .map(|_| {
                let t = self.step(pair, rng);
                pair = t.next_pair;
                t
            })
            .collect()
    }
}

/// Entrywise box for the parameter, in cost units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionBox {
    pub lower: f64,
    pub upper: f64,
}

impl ProjectionBox {
    /// Rewards capped at `cap`, i.e. costs bounded below by `-cap`.
    pub fn reward_cap(cap: f64) -> Self {
        ProjectionBox { lower: -cap, upper: f64::INFINITY }
    }

    pub fn apply(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// State shared by all learners: parameter, eligibility vector, matrix
/// estimate, current greedy policy and the policy-switch accumulator.
#[derive(Debug, Clone)]
pub struct QLearnState {
    pub theta: Vector,
    pub zeta: Vector,
    pub gain: GainEstimate,
    policy: Vec<usize>,
    switches: f64,
    /// Completed steps.
    pub n: u64,
}

impl QLearnState {
    pub fn new(mdp: &FiniteMdp, basis: &Basis, theta0: Vector) -> Result<Self> {
        let d = basis.dim();
        if theta0.len() != d {
            return Err(Error::DimensionMismatch(format!("θ₀ has {} entries, basis {d}", theta0.len())));
        }
        if let Basis::Linear(m) = basis {
            if m.nrows() != mdp.n_pairs() {
                return Err(Error::DimensionMismatch(format!("basis has {} rows for {} pairs", m.nrows(), mdp.n_pairs())));
            }
        }
        let policy = (0..mdp.n_states()).map(|x| greedy_pair(mdp, basis, &theta0, x)).collect();
        Ok(QLearnState { theta: theta0, zeta: Vector::zeros(d), gain: GainEstimate::zeros(d), policy, switches: 0.0, n: 0 })
    }

    /// Greedy pair index per state, `φ_n = φ^{θ_n}`.
    pub fn policy_pairs(&self) -> &[usize] {
        &self.policy
    }

    /// Greedy action id per state.
    pub fn policy_actions(&self, mdp: &FiniteMdp) -> Vec<usize> {
        self.policy.iter().map(|k| mdp.pair(*k).1).collect()
    }

    /// `Σ γ_n 1{φ_{n+1} ≠ φ_n}`.
    pub fn q3_diagnostic(&self) -> f64 {
        self.switches
    }

    fn start_trace(&mut self, basis: &Basis, pair: usize) {
        if self.n == 0 {
            self.zeta = basis.psi(pair);
        }
    }

    /// Recompute the greedy policy at `states` and charge `weight` if it moved.
    fn refresh_policy(&mut self, mdp: &FiniteMdp, basis: &Basis, states: impl Iterator<Item = usize>, weight: f64) {
        let mut changed = false;
        for x in states {
            let k = greedy_pair(mdp, basis, &self.theta, x);
            if k != self.policy[x] {
                self.policy[x] = k;
                changed = true;
            }
        }
        if changed {
            self.switches += weight;
        }
    }

    fn refresh_all(&mut self, mdp: &FiniteMdp, basis: &Basis, weight: f64) {
        self.refresh_policy(mdp, basis, 0..mdp.n_states(), weight);
    }
}

/// Common interface of the Q-learning recursions.
pub trait QLearner: Send {
    /// Consume one transition; this is step `n + 1`.
    fn step(&mut self, t: &Transition) -> Result<()>;
    /// The reported estimate (the averaged iterate for RPJ).
    fn estimate(&self) -> &Vector;
    fn state(&self) -> &QLearnState;
    fn name(&self) -> &'static str;
}

fn watkins_update(mdp: &FiniteMdp, st: &mut QLearnState, t: &Transition, alpha: f64, clip: Option<ProjectionBox>) {
    let k = t.pair;
    let target = mdp.cost()[k] + mdp.beta() * st.theta[st.policy[t.next_state]];
    let mut v = st.theta[k] + alpha * (target - st.theta[k]);
    if let Some(b) = clip {
        v = b.apply(v);
    }
    st.theta[k] = v;
    st.n += 1;
    let x = mdp.pair(k).0;
    st.refresh_policy(mdp, &Basis::Tabular(0), std::iter::once(x), alpha);
}

/// Tabular Watkins Q-learning:
/// `θ(x,u) ← θ(x,u) + α_n (c(x,u) + β min_{u'} θ(x',u') − θ(x,u))`.
#[derive(Debug, Clone)]
pub struct Watkins<'a> {
    mdp: &'a FiniteMdp,
    st: QLearnState,
    alpha: StepSchedule,
    clip: Option<ProjectionBox>,
}

impl<'a> Watkins<'a> {
    pub fn new(mdp: &'a FiniteMdp, theta0: Vector, alpha: StepSchedule, clip: Option<ProjectionBox>) -> Result<Self> {
        alpha.validate()?;
        Ok(Watkins { mdp, st: QLearnState::new(mdp, &Basis::tabular(mdp), theta0)?, alpha, clip })
    }
}

impl QLearner for Watkins<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        let a = self.alpha.value(self.st.n + 1);
        watkins_update(self.mdp, &mut self.st, t, a, self.clip);
        Ok(())
    }

    fn estimate(&self) -> &Vector {
        &self.st.theta
    }

    fn state(&self) -> &QLearnState {
        &self.st
    }

    fn name(&self) -> &'static str {
        "watkins"
    }
}

/// Watkins with `α_n = n^{-0.6}` and the uniform running average `θ̄_n` as output.
#[derive(Debug, Clone)]
pub struct Rpj<'a> {
    inner: Watkins<'a>,
    avg: RunningAverage,
}

impl<'a> Rpj<'a> {
    pub fn new(mdp: &'a FiniteMdp, theta0: Vector, clip: Option<ProjectionBox>) -> Result<Self> {
        let d = theta0.len();
        Ok(Rpj { inner: Watkins::new(mdp, theta0, StepSchedule::Power { rho: 0.6 }, clip)?, avg: RunningAverage::new(d) })
    }

    /// The raw iterate `θ_n`.
    pub fn iterate(&self) -> &Vector {
        &self.inner.st.theta
    }

    pub fn average(&self) -> &Vector {
        self.avg.mean()
    }
}

impl QLearner for Rpj<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        self.inner.step(t)?;
        self.avg.push(&self.inner.st.theta);
        Ok(())
    }

    fn estimate(&self) -> &Vector {
        self.avg.mean()
    }

    fn state(&self) -> &QLearnState {
        &self.inner.st
    }

    fn name(&self) -> &'static str {
        "rpj"
    }
}

/// Asynchronous Speedy Q-learning.
///
/// With `T` the empirical Bellman operator of the observed transition,
/// `T θ(x,u) = c(x,u) + β min_{u'} θ(x',u')`, the visited entry moves by
/// `θ(x,u) ← θ(x,u) + α (T θ_prev − θ(x,u)) + (1 − α)(T θ − T θ_prev)`.
/// Each pair runs on its own clock: `θ_prev` is the whole table as it was at
/// the previous visit to `(x,u)`, and `α = 1/(m+1)` after `m` earlier visits.
#[derive(Debug, Clone)]
pub struct Speedy<'a> {
    mdp: &'a FiniteMdp,
    st: QLearnState,
    prev: Vec<Vector>,
    visits: Vec<u64>,
}

impl<'a> Speedy<'a> {
    pub fn new(mdp: &'a FiniteMdp, theta0: Vector) -> Result<Self> {
        let prev = vec![theta0.clone(); mdp.n_pairs()];
        Ok(Speedy { mdp, st: QLearnState::new(mdp, &Basis::tabular(mdp), theta0)?, prev, visits: vec![0; mdp.n_pairs()] })
    }

    /// One Speedy update at the visited pair with an explicit step and
    /// previous table `θ_prev`.
    pub fn speedy_q_step(&mut self, prev: &Vector, t: &Transition, alpha: f64) {
        let mdp = self.mdp;
        let k = t.pair;
        let xs = mdp.pairs_of(t.next_state);
        let min_of = |v: &Vector| xs.clone().map(|j| v[j]).fold(f64::INFINITY, f64::min);
        let t_prev = mdp.cost()[k] + mdp.beta() * min_of(prev);
        let t_cur = mdp.cost()[k] + mdp.beta() * min_of(&self.st.theta);
        let theta_k = self.st.theta[k];
        self.prev[k].copy_from(&self.st.theta);
        self.st.theta[k] = theta_k + alpha * (t_prev - theta_k) + (1.0 - alpha) * (t_cur - t_prev);
        self.st.n += 1;
        self.st.refresh_policy(mdp, &Basis::Tabular(0), std::iter::once(mdp.pair(k).0), alpha);
    }
}

impl QLearner for Speedy<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        let m = self.visits[t.pair];
        self.visits[t.pair] += 1;
        let prev = self.prev[t.pair].clone();
        self.speedy_q_step(&prev, t, 1.0 / (m as f64 + 1.0));
        Ok(())
    }

    fn estimate(&self) -> &Vector {
        &self.st.theta
    }

    fn state(&self) -> &QLearnState {
        &self.st
    }

    fn name(&self) -> &'static str {
        "speedy"
    }
}

/// Matrix-gain Q(λ): `θ ← θ + α_n G ζ_n d_{n+1}`, `ζ ← λβζ + ψ(x',u')`.
#[derive(Debug, Clone)]
pub struct GQLambda<'a> {
    mdp: &'a FiniteMdp,
    basis: Basis,
    st: QLearnState,
    gain: Matrix,
    alpha: StepSchedule,
    lambda: f64,
}

impl<'a> GQLambda<'a> {
    pub fn new(mdp: &'a FiniteMdp, basis: Basis, theta0: Vector, gain: Matrix, alpha: StepSchedule, lambda: f64) -> Result<Self> {
        alpha.validate()?;
        check_lambda(lambda)?;
        let st = QLearnState::new(mdp, &basis, theta0)?;
        if gain.nrows() != basis.dim() || gain.ncols() != basis.dim() {
            return Err(Error::DimensionMismatch("gain matrix does not match the basis".into()));
        }
        Ok(GQLambda { mdp, basis, st, gain, alpha, lambda })
    }

    /// One step with an explicit gain and step size.
    pub fn g_q_lambda_step(&mut self, t: &Transition, gain: &Matrix, alpha: f64) {
        let (mdp, basis, st) = (self.mdp, &self.basis, &mut self.st);
        st.start_trace(basis, t.pair);
        let greedy = st.policy[t.next_state];
        let d = mdp.cost()[t.pair] + mdp.beta() * basis.q(&st.theta, greedy) - basis.q(&st.theta, t.pair);
        let step = gain * &st.zeta;
        st.theta.axpy(alpha * d, &step, 1.0);
        st.zeta.axpy(1.0, &basis.psi(t.next_pair), self.lambda * mdp.beta());
        st.n += 1;
        st.refresh_all(mdp, basis, alpha);
    }
}

impl QLearner for GQLambda<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        let a = self.alpha.value(self.st.n + 1);
        let g = std::mem::replace(&mut self.gain, Matrix::zeros(0, 0));
        self.g_q_lambda_step(t, &g, a);
        self.gain = g;
        Ok(())
    }

    fn estimate(&self) -> &Vector {
        &self.st.theta
    }

    fn state(&self) -> &QLearnState {
        &self.st
    }

    fn name(&self) -> &'static str {
        "gq"
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("trace parameter must lie in [0,1], got {lambda}")))
    }
}

/// Zap-Q(λ).
///
/// Per transition: greedy action `φ_n(x')`, temporal difference `d`,
/// `A_{n+1} = ζ_n(βψ(x', φ_n(x')) − ψ(x,u))ᵀ`, `Â ← Â + γ(A_{n+1} − Â)`,
/// `θ ← θ − α Â⁻¹ ζ_n d`, `ζ ← λβζ + ψ(x',u')`.
#[derive(Debug, Clone)]
pub struct ZapQ<'a> {
    mdp: &'a FiniteMdp,
    basis: Basis,
    st: QLearnState,
    alpha: StepSchedule,
    gamma: StepSchedule,
    lambda: f64,
    frozen: Option<Vec<usize>>,
    last_a: Option<MatrixSample>,
}

impl<'a> ZapQ<'a> {
    pub fn new(
        mdp: &'a FiniteMdp,
        basis: Basis,
        theta0: Vector,
        alpha: StepSchedule,
        gamma: StepSchedule,
        lambda: f64,
    ) -> Result<Self> {
        crate::sa::validate_zap_schedules(&alpha, &gamma)?;
        check_lambda(lambda)?;
        let st = QLearnState::new(mdp, &basis, theta0)?;
        Ok(ZapQ { mdp, basis, st, alpha, gamma, lambda, frozen: None, last_a: None })
    }

    /// Evaluate a fixed policy (action id per state) instead of the greedy one.
    pub fn with_frozen_policy(mut self, actions: &[usize]) -> Result<Self> {
        let pairs = actions
            .iter()
            .enumerate()
            .map(|(x, &u)| self.mdp.pair_index(x, u).ok_or(Error::InfeasibleAction { state: x, action: u }))
            .collect::<Result<Vec<_>>>()?;
        self.frozen = Some(pairs);
        Ok(self)
    }

    /// The sample `A_{n+1}` used by the most recent step.
    pub fn last_sample_matrix(&self) -> Option<&MatrixSample> {
        self.last_a.as_ref()
    }

    /// One step with explicit step sizes.
    pub fn zap_q_lambda_step(&mut self, t: &Transition, alpha: f64, gamma: f64) -> Result<()> {
        let (mdp, basis, st) = (self.mdp, &self.basis, &mut self.st);
        st.start_trace(basis, t.pair);
        let target_pair = match &self.frozen {
            Some(p) => p[t.next_state],
            None => st.policy[t.next_state],
        };
        let d = mdp.cost()[t.pair] + mdp.beta() * basis.q(&st.theta, target_pair) - basis.q(&st.theta, t.pair);
        let v = basis.psi(target_pair) * mdp.beta() - basis.psi(t.pair);
        let sample = MatrixSample::RankOne { u: st.zeta.clone(), v };
        st.gain.update(&sample, gamma)?;
        st.theta.gemv(-alpha * d, st.gain.inverse(), &st.zeta, 1.0);
        st.zeta.axpy(1.0, &basis.psi(t.next_pair), self.lambda * mdp.beta());
        st.n += 1;
        st.refresh_all(mdp, basis, gamma);
        self.last_a = Some(sample);
        Ok(())
    }
}

impl QLearner for ZapQ<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        let n = self.st.n + 1;
        self.zap_q_lambda_step(t, self.alpha.value(n), self.gamma.value(n))
    }

    fn estimate(&self) -> &Vector {
        &self.st.theta
    }

    fn state(&self) -> &QLearnState {
        &self.st
    }

    fn name(&self) -> &'static str {
        "zap"
    }
}

/// O(d) Zap-Q(0): θ and the greedy policy are frozen over a batch of `N`
/// transitions; the batch means of `f` and `∇f` then drive one Zap step with
/// the batch step `α_{i+1}` and `γ̂_{i+1} = 1 − Π(1 − γ_j)`.
#[derive(Debug, Clone)]
pub struct OdZapQ<'a> {
    mdp: &'a FiniteMdp,
    basis: Basis,
    st: QLearnState,
    alpha: StepSchedule,
    gamma: StepSchedule,
    batch_size: usize,
    batch: Vec<(Vector, MatrixSample)>,
    gammas: Vec<f64>,
    batches_done: u64,
}

impl<'a> OdZapQ<'a> {
    /// `alpha` is indexed by batch, `gamma` by sample.
    pub fn new(
        mdp: &'a FiniteMdp,
        basis: Basis,
        theta0: Vector,
        batch_size: usize,
        alpha: StepSchedule,
        gamma: StepSchedule,
    ) -> Result<Self> {
        alpha.validate()?;
        gamma.validate()?;
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let st = QLearnState::new(mdp, &basis, theta0)?;
        Ok(OdZapQ {
            mdp,
            basis,
            st,
            alpha,
            gamma,
            batch_size,
            batch: Vec::with_capacity(batch_size),
            gammas: Vec::with_capacity(batch_size),
            batches_done: 0,
        })
    }

    /// `(f, ∇f)` for one transition at the frozen parameter.
    fn sample(&self, t: &Transition) -> (Vector, MatrixSample) {
        let (mdp, basis, st) = (self.mdp, &self.basis, &self.st);
        let greedy = st.policy[t.next_state];
        let psi = basis.psi(t.pair);
        let d = mdp.cost()[t.pair] + mdp.beta() * basis.q(&st.theta, greedy) - basis.q(&st.theta, t.pair);
        let v = basis.psi(greedy) * mdp.beta() - &psi;
        (&psi * d, MatrixSample::RankOne { u: psi, v })
    }

    /// Apply one batch update with explicit `(α, γ̂)`.
    pub fn od_zap_q_step(&mut self, batch: &[Transition], alpha: f64, gamma_hat: f64) -> Result<()> {
        let samples: Vec<_> = batch.iter().map(|t| self.sample(t)).collect();
        self.apply(&samples, alpha, gamma_hat, batch.len() as u64)
    }

    fn apply(&mut self, samples: &[(Vector, MatrixSample)], alpha: f64, gamma_hat: f64, count: u64) -> Result<()> {
        let (f, grad) = batch_means(samples, self.basis.dim())?;
        let st = &mut self.st;
        if samples.len() == 1 {
            st.gain.update(&samples[0].1, gamma_hat)?;
        } else {
            st.gain.update_dense(&grad, gamma_hat)?;
        }
        st.theta.gemv(-alpha, st.gain.inverse(), &f, 1.0);
        st.n += count;
        self.batches_done += 1;
        st.refresh_all(self.mdp, &self.basis, gamma_hat);
        Ok(())
    }
}

impl QLearner for OdZapQ<'_> {
    fn step(&mut self, t: &Transition) -> Result<()> {
        let j = self.st.n + self.batch.len() as u64 + 1;
        let s = self.sample(t);
        self.batch.push(s);
        self.gammas.push(self.gamma.value(j).min(1.0 - f64::EPSILON));
        if self.batch.len() == self.batch_size {
            let alpha = self.alpha.value(self.batches_done + 1);
            let g = gamma_hat(&self.gammas)?;
            let samples = std::mem::take(&mut self.batch);
            self.gammas.clear();
            self.apply(&samples, alpha, g, samples.len() as u64)?;
        }
        Ok(())
    }

    fn estimate(&self) -> &Vector {
        &self.st.theta
    }

    fn state(&self) -> &QLearnState {
        &self.st
    }

    fn name(&self) -> &'static str {
        "od_zap"
    }
}

/// `Ĉ = −Π⁻¹ Â θ`.
pub fn c_hat(pi: &Vector, a_hat: &Matrix, theta: &Vector) -> Result<Vector> {
    if let Some(pair) = pi.iter().position(|w| *w <= 0.0) {
        return Err(Error::ZeroStationaryMass { pair });
    }
    let mut c = a_hat * theta;
    c.component_div_assign(pi);
    Ok(-c)
}

/// Drive a learner for `steps` transitions from state `x0`, calling
/// `observe(n, learner)` after every step `n`.
pub fn run_learner<R: Rng + ?Sized>(
    learner: &mut dyn QLearner,
    sampler: &PairSampler<'_>,
    x0: usize,
    steps: u64,
    rng: &mut R,
    mut observe: impl FnMut(u64, &dyn QLearner),
) -> Result<()> {
    let mut pair = sampler.initial_pair(x0, rng);
    for n in 1..=steps {
        let t = sampler.step(pair, rng);
        learner.step(&t)?;
        pair = t.next_pair;
        observe(n, &*learner);
    }
    Ok(())
}
