//! Optimal stopping on a window of geometric-Brownian price ratios:
//! Q(0), G-Q(0) and Zap recursions for a linear Q-function, and
//! Monte-Carlo valuation of the induced exercise policy.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bench::{histogram, map_indexed, ExecutionMode, Histogram};
use crate::covariance::sigma_delta_batchmeans;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};
use crate::sa::{GainEstimate, MatrixSample, StepSchedule, ZapState};

/// Payoff thresholds for the outlier table.
pub const OUTLIER_THRESHOLDS: [f64; 4] = [1.0, 0.95, 0.75, 0.5];

/// Log-price increments are `N(drift, σ²)`; the state is the last `window`
/// prices divided by the one before them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbmParams {
    pub sigma: f64,
    pub drift: f64,
    pub window: usize,
}

impl Default for GbmParams {
    fn default() -> Self {
        GbmParams { sigma: 0.02, drift: 0.0004, window: 100 }
    }
}

impl GbmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("volatility must be positive, got {}", self.sigma)));
        }
        if !self.drift.is_finite() {
            return Err(Error::InvalidConfig("drift must be finite".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Infinite stream of ratio states `x_n(i) = p̃_{n−w+i} / p̃_{n−w}`.
#[derive(Debug, Clone)]
pub struct GbmStream {
    logs: VecDeque<f64>,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl GbmStream {
    /// Start from a flat price history, so `x_0` is all ones.
    pub fn new(params: GbmParams, seed: u64) -> Result<Self> {
        Self::from_rng(params, &Vector::from_element(params.window, 1.0), ChaCha8Rng::seed_from_u64(seed))
    }

    /// Start from a given ratio state.
    pub fn from_rng(params: GbmParams, x0: &Vector, rng: ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        if x0.len() != params.window {
            return Err(Error::DimensionMismatch(format!("state has {} entries, window is {}", x0.len(), params.window)));
        }
        if x0.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("ratio state must be strictly positive".into()));
        }
        let mut logs = VecDeque::with_capacity(params.window + 1);
        logs.push_back(0.0);
        logs.extend(x0.iter().map(|v| v.ln()));
        let noise = Normal::new(params.drift, params.sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(GbmStream { logs, noise, rng })
    }

    pub fn state(&self) -> Vector {
        let base = self.logs[0];
        Vector::from_iterator(self.logs.len() - 1, self.logs.iter().skip(1).map(|l| (l - base).exp()))
    }

    fn advance(&mut self) {
        let last = *self.logs.back().expect("window is non-empty");
        self.logs.pop_front();
        self.logs.push_back(last + self.noise.sample(&mut self.rng));
    }
}

impl Iterator for GbmStream {
    type Item = Vector;

    /// Yields the current state, then advances the prices by one step.
    fn next(&mut self) -> Option<Vector> {
        let x = self.state();
        self.advance();
        Some(x)
    }
}

/// `r(x) = x(w)`, the ratio of the latest price to the one `w` steps back.
pub fn reward(x: &Vector) -> f64 {
    x[x.len() - 1]
}

/// Scalar statistics of a ratio window, all written in `z = x − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Constant,
    /// `z(w)`.
    Terminal,
    TerminalSquared,
    TerminalCubed,
    /// Mean of `z` over the window.
    Mean,
    MeanSquared,
    /// `z` at the middle of the window.
    Midpoint,
    TerminalTimesMean,
    /// `max z − min z`.
    Range,
    /// Mean of `z²`.
    MeanSquare,
    /// `max(z(w), 0)`.
    Hinge,
}

impl Feature {
    fn eval(&self, x: &Vector) -> f64 {
        let w = x.len();
        let terminal = x[w - 1] - 1.0;
        let mean = x.mean() - 1.0;
        match self {
            Feature::Constant => 1.0,
            Feature::Terminal => terminal,
            Feature::TerminalSquared => terminal * terminal,
            Feature::TerminalCubed => terminal.powi(3),
            Feature::Mean => mean,
            Feature::MeanSquared => mean * mean,
            Feature::Midpoint => x[w / 2] - 1.0,
            Feature::TerminalTimesMean => terminal * mean,
            Feature::Range => x.max() - x.min(),
            Feature::MeanSquare => x.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / w as f64,
            Feature::Hinge => terminal.max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StoppingBasis {
    pub features: Vec<Feature>,
}

impl Default for StoppingBasis {
    fn default() -> Self {
        use Feature::*;
        StoppingBasis {
            features: vec![
                Constant,
                Terminal,
                TerminalSquared,
                Mean,
                MeanSquared,
                Midpoint,
                TerminalTimesMean,
                Range,
                MeanSquare,
                Hinge,
            ],
        }
    }
}

impl StoppingBasis {
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn psi(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.dim(), self.features.iter().map(|f| f.eval(x)))
    }

    /// Empirical Gram matrix `(1/n) Σ ψψᵀ` over `samples` states of a stream.
    pub fn gram(&self, params: GbmParams, samples: usize, seed: u64) -> Result<Matrix> {
        if samples == 0 {
            return Err(Error::InsufficientData("Gram probe needs at least one sample".into()));
        }
        let d = self.dim();
        let mut g = Matrix::zeros(d, d);
        for x in GbmStream::new(params, seed)?.take(samples) {
            let p = self.psi(&x);
            g.ger(1.0, &p, &p, 1.0);
        }
        Ok(g / samples as f64)
    }

    /// Condition number of the Gram matrix on a probe run.
    pub fn condition_number(&self, params: GbmParams, samples: usize, seed: u64) -> Result<f64> {
        let s = self.gram(params, samples, seed)?.symmetric_eigenvalues();
        let (lo, hi) = (s.min(), s.max());
        Ok(if lo <= 0.0 { f64::INFINITY } else { hi / lo })
    }
}

/// One transition `(x_n, x_{n+1})` reduced to what the recursions read.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingSample {
    pub psi: Vector,
    pub psi_next: Vector,
    pub reward_next: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingProblem {
    pub basis: StoppingBasis,
    pub beta: f64,
    pub gbm: GbmParams,
}

impl Default for StoppingProblem {
    /// `β = e^{−0.0004}`, discounting at the drift rate.
    fn default() -> Self {
        StoppingProblem { basis: StoppingBasis::default(), beta: (-0.0004f64).exp(), gbm: GbmParams::default() }
    }
}

impl StoppingProblem {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("discount factor must lie in [0,1), got {}", self.beta)));
        }
        if self.basis.dim() == 0 {
            return Err(Error::InvalidConfig("basis is empty".into()));
        }
        self.gbm.validate()
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn q(&self, theta: &Vector, x: &Vector) -> f64 {
        theta.dot(&self.basis.psi(x))
    }

    pub fn sample(&self, x: &Vector, x_next: &Vector) -> StoppingSample {
        StoppingSample { psi: self.basis.psi(x), psi_next: self.basis.psi(x_next), reward_next: reward(x_next) }
    }

    /// `n` consecutive transitions of a fresh stream.
    pub fn samples(&self, n: usize, seed: u64) -> Result<Vec<StoppingSample>> {
        let mut stream = GbmStream::new(self.gbm, seed)?;
        let mut x = stream.next().expect("infinite stream");
        let mut out = Vec::with_capacity(n);
        for x_next in stream.take(n) {
            out.push(self.sample(&x, &x_next));
            x = x_next;
        }
        Ok(out)
    }

    /// `β max(r(x'), Q(x')) − Q(x)`.
    pub fn temporal_difference(&self, theta: &Vector, s: &StoppingSample) -> f64 {
        self.beta * s.reward_next.max(theta.dot(&s.psi_next)) - theta.dot(&s.psi)
    }

    /// `∂/∂θ` of `ψ(x) d`: `ψ(x) [β ψ(x') 1{Q(x') ≥ r(x')} − ψ(x)]ᵀ`.
    pub fn linearization(&self, theta: &Vector, s: &StoppingSample) -> MatrixSample {
        let cont = theta.dot(&s.psi_next) >= s.reward_next;
        let v = if cont { &s.psi_next * self.beta - &s.psi } else { -&s.psi };
        MatrixSample::RankOne { u: s.psi.clone(), v }
    }

    /// Q(0): `θ ← θ + α ψ(x) d`.
    pub fn q0_stopping_step(&self, theta: &mut Vector, s: &StoppingSample, alpha: f64) {
        let d = self.temporal_difference(theta, s);
        theta.axpy(alpha * d, &s.psi, 1.0);
    }

    /// G-Q(0): `θ ← θ + g/(b+n) · M_n⁻¹ ψ(x) d` with `M_n` the running Gram mean.
    pub fn gq0_stopping_step(&self, theta: &mut Vector, gram: &mut GramState, s: &StoppingSample) -> Result<()> {
        gram.push(&s.psi)?;
        let d = self.temporal_difference(theta, s);
        let alpha = 1.0 / (gram.b + gram.n as f64);
        theta.gemv(alpha * gram.g * d, gram.est.inverse(), &s.psi, 1.0);
        Ok(())
    }

    /// Zap: `Â ← Â + γ (ψφᵀ − Â)`, `θ ← θ − α Â⁻¹ ψ(x) d`.
    pub fn zap_stopping_step(&self, state: &mut ZapState, s: &StoppingSample, alpha: f64, gamma: f64) -> Result<()> {
        let d = self.temporal_difference(&state.theta, s);
        let grad = self.linearization(&state.theta, s);
        state.zap_nonlinear_step(&(&s.psi * d), &grad, alpha, gamma)
    }
}

/// Running Gram mean for G-Q(0) with its gain constants.
#[derive(Debug, Clone)]
pub struct GramState {
    pub est: GainEstimate,
    pub n: u64,
    pub g: f64,
    pub b: f64,
}

impl GramState {
    pub fn new(d: usize, g: f64, b: f64) -> Result<Self> {
        if !(g >= 0.0 && b >= 0.0) {
            return Err(Error::InvalidConfig(format!("G-Q(0) needs g, b ≥ 0, got g={g}, b={b}")));
        }
        Ok(GramState { est: GainEstimate::zeros(d), n: 0, g, b })
    }

    pub fn push(&mut self, psi: &Vector) -> Result<()> {
        self.n += 1;
        let sample = MatrixSample::RankOne { u: psi.clone(), v: psi.clone() };
        self.est.update(&sample, 1.0 / self.n as f64)
    }

    pub fn mean(&self) -> &Matrix {
        self.est.matrix()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingAlgo {
    Q0 { alpha: StepSchedule },
    Gq0 { g: f64, b: f64 },
    Zap { alpha: StepSchedule, gamma: StepSchedule },
}

impl StoppingAlgo {
    pub fn q0() -> Self {
        StoppingAlgo::Q0 { alpha: StepSchedule::harmonic() }
    }

    pub fn gq0() -> Self {
        StoppingAlgo::Gq0 { g: 100.0, b: 1e4 }
    }

    pub fn zap(rho: f64) -> Result<Self> {
        Ok(StoppingAlgo::Zap { alpha: StepSchedule::harmonic(), gamma: StepSchedule::power(rho)? })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StoppingAlgo::Q0 { .. } => "q0",
            StoppingAlgo::Gq0 { .. } => "gq0",
            StoppingAlgo::Zap { .. } => "zap_stopping",
        }
    }
}

enum Stepper {
    Q0 { theta: Vector, alpha: StepSchedule },
    Gq0 { theta: Vector, gram: GramState },
    Zap { state: ZapState, alpha: StepSchedule, gamma: StepSchedule },
}

/// A stopping recursion together with its step counter.
pub struct StoppingLearner<'a> {
    problem: &'a StoppingProblem,
    stepper: Stepper,
    n: u64,
}

impl<'a> StoppingLearner<'a> {
    pub fn new(problem: &'a StoppingProblem, algo: &StoppingAlgo, theta0: Vector) -> Result<Self> {
        problem.validate()?;
        if theta0.len() != problem.dim() {
            return Err(Error::DimensionMismatch(format!("θ₀ has {} entries, basis {}", theta0.len(), problem.dim())));
        }
        let stepper = match algo {
            StoppingAlgo::Q0 { alpha } => {
                alpha.validate()?;
                Stepper::Q0 { theta: theta0, alpha: *alpha }
            }
            StoppingAlgo::Gq0 { g, b } => Stepper::Gq0 { theta: theta0, gram: GramState::new(problem.dim(), *g, *b)? },
            StoppingAlgo::Zap { alpha, gamma } => {
                crate::sa::validate_zap_schedules(alpha, gamma)?;
                Stepper::Zap { state: ZapState::new(theta0), alpha: *alpha, gamma: *gamma }
            }
        };
        Ok(StoppingLearner { problem, stepper, n: 0 })
    }

    pub fn step(&mut self, s: &StoppingSample) -> Result<()> {
        self.n += 1;
        let n = self.n;
        match &mut self.stepper {
            Stepper::Q0 { theta, alpha } => self.problem.q0_stopping_step(theta, s, alpha.value(n)),
            Stepper::Gq0 { theta, gram } => self.problem.gq0_stopping_step(theta, gram, s)?,
            Stepper::Zap { state, alpha, gamma } => {
                self.problem.zap_stopping_step(state, s, alpha.value(n), gamma.value(n).min(1.0))?
            }
        }
        Ok(())
    }

    pub fn theta(&self) -> &Vector {
        match &self.stepper {
            Stepper::Q0 { theta, .. } | Stepper::Gq0 { theta, .. } => theta,
            Stepper::Zap { state, .. } => &state.theta,
        }
    }

    pub fn steps(&self) -> u64 {
        self.n
    }

    /// Running Gram mean (G-Q(0)) or `Â` (Zap).
    pub fn matrix(&self) -> Option<&Matrix> {
        match &self.stepper {
            Stepper::Q0 { .. } => None,
            Stepper::Gq0 { gram, .. } => Some(gram.mean()),
            Stepper::Zap { state, .. } => Some(state.gain.matrix()),
        }
    }
}

/// Run `steps` transitions of a fresh stream from `θ = 0` and return `θ_n`.
pub fn run_stopping(problem: &StoppingProblem, algo: &StoppingAlgo, steps: usize, seed: u64) -> Result<Vector> {
    let mut learner = StoppingLearner::new(problem, algo, Vector::zeros(problem.dim()))?;
    let mut stream = GbmStream::new(problem.gbm, seed)?;
    let mut x = stream.next().expect("infinite stream");
    for x_next in stream.take(steps) {
        learner.step(&problem.sample(&x, &x_next))?;
        x = x_next;
    }
    Ok(learner.theta().clone())
}

/// Monte-Carlo estimate of `h_{φ^θ}(x₀)`.
#[derive(Debug, Clone)]
pub struct StoppingValue {
    pub mean: f64,
    pub payoffs: Vec<f64>,
    /// Exercise time per path; `None` when truncated at the horizon.
    pub stop_times: Vec<Option<u64>>,
    /// Counts of payoffs strictly below each of [`OUTLIER_THRESHOLDS`].
    pub outliers: [usize; 4],
    /// Largest reward seen along each path up to its stopping time.
    pub path_max_reward: Vec<f64>,
}

impl StoppingValue {
    pub fn histogram(&self, bins: usize) -> Result<Histogram> {
        histogram(&self.payoffs, bins, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub horizon: u64,
    pub seed: u64,
}

/// Exercise at the first `n` with `Q^θ(x_n) ≤ r(x_n)`; payoff `β^τ r(x_τ)`,
/// or `β^H r(x_H)` if no exercise happens by the horizon `H`.
/// Path `i` draws from stream `i` of the generator seeded with `seed`.
pub fn policy_value_mc(
    problem: &StoppingProblem,
    theta: &Vector,
    x0: &Vector,
    mc: McConfig,
    mode: ExecutionMode,
) -> Result<StoppingValue> {
    problem.validate()?;
    if mc.n_paths == 0 {
        return Err(Error::InvalidConfig("need at least one path".into()));
    }
    if theta.len() != problem.dim() {
        return Err(Error::DimensionMismatch(format!("θ has {} entries, basis {}", theta.len(), problem.dim())));
    }
    GbmStream::from_rng(problem.gbm, x0, ChaCha8Rng::seed_from_u64(0))?;
    let paths = map_indexed(mode, mc.n_paths, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
        rng.set_stream(i as u64);
        let stream = GbmStream::from_rng(problem.gbm, x0, rng).expect("validated above");
        let mut max_r = f64::NEG_INFINITY;
        let mut out = (0.0, None, 0.0);
        for (n, x) in stream.enumerate() {
            let n = n as u64;
            let r = reward(&x);
            max_r = max_r.max(r);
            if problem.q(theta, &x) <= r {
                out = (problem.beta.powi(n as i32) * r, Some(n), max_r);
                break;
            }
            if n == mc.horizon {
                out = (problem.beta.powi(n as i32) * r, None, max_r);
                break;
            }
        }
        out
    });
    let payoffs: Vec<f64> = paths.iter().map(|p| p.0).collect();
    let mut outliers = [0; 4];
    for (k, t) in OUTLIER_THRESHOLDS.iter().enumerate() {
        outliers[k] = payoffs.iter().filter(|p| *p < t).count();
    }
    Ok(StoppingValue {
        mean: payoffs.iter().sum::<f64>() / payoffs.len() as f64,
        stop_times: paths.iter().map(|p| p.1).collect(),
        path_max_reward: paths.iter().map(|p| p.2).collect(),
        payoffs,
        outliers,
    })
}

/// Monte-Carlo estimates at a fixed `θ`: `A = E[ψφᵀ]`, the Gram matrix, and a
/// batch-means `Σ_Δ` for `f = ψ d`.
#[derive(Debug, Clone)]
pub struct StoppingDiagnostics {
    pub a: Matrix,
    pub gram: Matrix,
    pub sigma_delta: Matrix,
}

pub fn stopping_diagnostics(
    problem: &StoppingProblem,
    theta: &Vector,
    steps: usize,
    batch_len: usize,
    seed: u64,
) -> Result<StoppingDiagnostics> {
    let d = problem.dim();
    let mut a = Matrix::zeros(d, d);
    let mut gram = Matrix::zeros(d, d);
    let mut f = Vec::with_capacity(steps);
    for s in problem.samples(steps, seed)? {
        problem.linearization(theta, &s).add_scaled_to(&mut a, 1.0);
        gram.ger(1.0, &s.psi, &s.psi, 1.0);
        f.push(&s.psi * problem.temporal_difference(theta, &s));
    }
    let mean = f.iter().fold(Vector::zeros(d), |acc, v| acc + v) / steps.max(1) as f64;
    for v in f.iter_mut() {
        *v -= &mean;
    }
    Ok(StoppingDiagnostics {
        a: a / steps as f64,
        gram: gram / steps as f64,
        sigma_delta: sigma_delta_batchmeans(&f, batch_len)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem() -> StoppingProblem {
        StoppingProblem::default()
    }

    fn all_ones(w: usize) -> Vector {
        Vector::from_element(w, 1.0)
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn gbm_stream_basics() {
        let p = GbmParams { sigma: 1e-300, drift: 0.0, window: 5 };
        for x in GbmStream::new(p, 1).unwrap().take(20) {
            assert_eq!(x, all_ones(5));
        }
        assert!(GbmStream::new(GbmParams { sigma: 0.0, ..p }, 1).is_err());
        let a: Vec<_> = GbmStream::new(GbmParams::default(), 9).unwrap().take(300).collect();
        let b: Vec<_> = GbmStream::new(GbmParams::default(), 9).unwrap().take(300).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.iter().all(|v| *v > 0.0)));
        // Consecutive windows overlap: x_{n+1}(i) = x_n(i+1) / x_n(1).
        for w in a.windows(2) {
            for i in 0..99 {
                assert!((w[1][i] - w[0][i + 1] / w[0][0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_terminal_ratio_has_drift_times_window_mean() {
        let p = GbmParams::default();
        let n = 100_000;
        let logs: Vec<f64> = GbmStream::new(p, 2).unwrap().skip(p.window).take(n).map(|x| reward(&x).ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        // Overlapping windows: roughly n / w independent blocks.
        let se = p.sigma * (p.window as f64).sqrt() / ((n / p.window) as f64).sqrt();
        let target = p.drift * p.window as f64;
        assert!((mean - target).abs() < 3.0 * se, "{mean} vs {target} ± {se}");
    }

    #[test]
    fn default_basis_is_well_posed() {
        let pr = problem();
        assert_eq!(pr.dim(), 10);
        let cond = pr.basis.condition_number(pr.gbm, 10_000, 3).unwrap();
        assert!(cond.is_finite() && cond < 1e10, "condition number {cond}");
        let psi = pr.basis.psi(&all_ones(100));
        assert_eq!(psi[0], 1.0);
        assert!(psi.iter().skip(1).all(|v| *v == 0.0));
    }

    #[test]
    fn q0_trivial_cases() {
        let mut pr = problem();
        pr.beta = 0.0;
        let s = pr.samples(1, 1).unwrap().remove(0);
        let mut theta = Vector::zeros(10);
        pr.q0_stopping_step(&mut theta, &s, 1.0);
        assert_eq!(theta, Vector::zeros(10));

        // Constant basis: θ ← θ + α (β max(r', θ) − θ).
        let pr = StoppingProblem { basis: StoppingBasis { features: vec![Feature::Constant] }, ..problem() };
        let samples = pr.samples(50, 4).unwrap();
        let mut theta = Vector::from_element(1, 0.3);
        let mut hand = 0.3;
        for (n, s) in samples.iter().enumerate() {
            let alpha = 1.0 / (n + 1) as f64;
            pr.q0_stopping_step(&mut theta, s, alpha);
            hand += alpha * (pr.beta * s.reward_next.max(hand) - hand);
        }
        assert!((theta[0] - hand).abs() < 1e-14);
    }

    #[test]
    fn steppers_replay_deterministically() {
        let pr = problem();
        for algo in [StoppingAlgo::q0(), StoppingAlgo::gq0(), StoppingAlgo::zap(0.85).unwrap()] {
            let a = run_stopping(&pr, &algo, 2_000, 5).unwrap();
            let b = run_stopping(&pr, &algo, 2_000, 5).unwrap();
            assert_eq!(a, b, "{}", algo.name());
        }
    }

    #[test]
    fn gq0_gain_is_scaled_identity_for_orthonormal_sample() {
        let d = 3;
        let mut gram = GramState::new(d, 100.0, 0.0).unwrap();
        for i in 0..d {
            let mut e = Vector::zeros(d);
            e[i] = (d as f64).sqrt();
            gram.push(&e).unwrap();
        }
        assert!((gram.est.inverse() - Matrix::identity(d, d)).amax() < 1e-10);
    }

    #[test]
    fn gq0_with_zero_gain_freezes_theta() {
        let pr = problem();
        let mut gram = GramState::new(10, 0.0, 1e4).unwrap();
        let mut theta = Vector::from_element(10, 0.5);
        for s in pr.samples(100, 6).unwrap() {
            pr.gq0_stopping_step(&mut theta, &mut gram, &s).unwrap();
        }
        assert_eq!(theta, Vector::from_element(10, 0.5));
    }

    #[test]
    fn zap_linearization_when_never_continuing() {
        let pr = problem();
        let s = pr.samples(1, 7).unwrap().remove(0);
        let theta = Vector::from_element(10, -1e6);
        let a = pr.linearization(&theta, &s).to_dense();
        assert!((a + &s.psi * s.psi.transpose()).amax() < 1e-15);
    }

    #[test]
    fn zap_matrix_at_fixed_theta_matches_monte_carlo() {
        // A short window keeps the chain's memory short enough for 10⁵ samples.
        let pr = StoppingProblem { gbm: GbmParams { window: 10, ..GbmParams::default() }, ..problem() };
        let theta = run_stopping(&pr, &StoppingAlgo::q0(), 5_000, 8).unwrap();
        let mut st = ZapState::new(theta.clone());
        for (n, s) in pr.samples(100_000, 9).unwrap().iter().enumerate() {
            st.gain.update(&pr.linearization(&theta, s), 1.0 / (n + 1) as f64).unwrap();
        }
        let mc = stopping_diagnostics(&pr, &theta, 1_000_000, 100, 10).unwrap().a;
        let err = rel(st.gain.matrix(), &mc);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn single_time_scale_zap_is_accepted() {
        let algo = StoppingAlgo::Zap { alpha: StepSchedule::harmonic(), gamma: StepSchedule::harmonic() };
        let theta = run_stopping(&problem(), &algo, 1_000, 11).unwrap();
        assert!(theta.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn immediate_exercise_pays_initial_reward() {
        let pr = problem();
        let theta = Vector::from_element(10, 0.0);
        let mut x0 = all_ones(100);
        x0[99] = 1.3;
        let mc = McConfig { n_paths: 20, horizon: 50, seed: 1 };
        let v = policy_value_mc(&pr, &theta, &x0, mc, ExecutionMode::default()).unwrap();
        assert!((v.mean - 1.3).abs() < 1e-15);
        assert!(v.stop_times.iter().all(|t| *t == Some(0)));

        let zero_beta = StoppingProblem { beta: 0.0, ..problem() };
        let mut never = Vector::zeros(10);
        never[0] = 1e9;
        let v = policy_value_mc(&zero_beta, &never, &x0, mc, ExecutionMode::default()).unwrap();
        assert_eq!(v.mean, 0.0);
        assert_eq!(v.outliers, [20; 4]);
    }

    #[test]
    fn policy_value_is_bounded_and_replayable() {
        let pr = problem();
        let theta = run_stopping(&pr, &StoppingAlgo::zap(0.85).unwrap(), 5_000, 12).unwrap();
        let mc = McConfig { n_paths: 200, horizon: 500, seed: 13 };
        let x0 = all_ones(100);
        let a = policy_value_mc(&pr, &theta, &x0, mc, ExecutionMode::default()).unwrap();
        let b = policy_value_mc(&pr, &theta, &x0, mc, ExecutionMode::Sequential).unwrap();
        assert_eq!(a.payoffs, b.payoffs);
        for (p, m) in a.payoffs.iter().zip(&a.path_max_reward) {
            assert!(*p >= 0.0 && p <= m);
        }
        let h = a.histogram(10).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 200);
        assert!(a.outliers.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn value_depends_only_on_exercise_pattern(seed in 0u64..1000, scale in 0.999f64..1.001) {
            let pr = problem();
            let mut theta = Vector::zeros(10);
            theta[0] = 1.05;
            theta[1] = -0.5;
            let x0 = all_ones(100);
            let mc = McConfig { n_paths: 30, horizon: 300, seed };
            let a = policy_value_mc(&pr, &theta, &x0, mc, ExecutionMode::Sequential).unwrap();
            let b = policy_value_mc(&pr, &(&theta * scale), &x0, mc, ExecutionMode::Sequential).unwrap();
            for i in 0..30 {
                if a.stop_times[i] == b.stop_times[i] {
                    prop_assert_eq!(a.payoffs[i], b.payoffs[i]);
                }
            }
        }
    }
}
