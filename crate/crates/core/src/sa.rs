//! Stochastic approximation recursions: scalar and matrix gain, SNR, Zap
//! (two time scales), nonlinear Zap and its batched O(d) form.
//!
//! Every recursion is written as `θ ← θ + α G (A θ − b)` or its nonlinear
//! analogue `θ ← θ − α Â⁻¹ f`. Step indices start at `n = 1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{projected_inverse_default, rank1_inverse_update_in_place, stationary_pmf, Matrix, RowSampler, Vector};

/// Step-size sequence `α_n`, `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    /// `min(1, g/n)`.
    ScaledHarmonic {
        g: f64,
    },
    /// `n^{-ρ}`, `ρ ∈ (1/2, 1]`.
    Power {
        rho: f64,
    },
    /// `1/(b+n)`.
    OffsetHarmonic {
        b: f64,
    },
    Constant {
        value: f64,
    },
}

impl StepSchedule {
    /// `1/n`.
    pub fn harmonic() -> Self {
        StepSchedule::ScaledHarmonic { g: 1.0 }
    }

    pub fn scaled_harmonic(g: f64) -> Result<Self> {
        Self::checked(StepSchedule::ScaledHarmonic { g })
    }

    pub fn power(rho: f64) -> Result<Self> {
        Self::checked(StepSchedule::Power { rho })
    }

    pub fn offset_harmonic(b: f64) -> Result<Self> {
        Self::checked(StepSchedule::OffsetHarmonic { b })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::checked(StepSchedule::Constant { value })
    }

    fn checked(s: Self) -> Result<Self> {
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::ScaledHarmonic { g } if !(g > 0.0 && g.is_finite()) => {
                Err(Error::InvalidSchedule(format!("gain g must be positive, got {g}")))
            }
            StepSchedule::Power { rho } if !(rho > 0.5 && rho <= 1.0) => {
                Err(Error::InvalidSchedule(format!("power exponent must lie in (0.5, 1], got {rho}")))
            }
            StepSchedule::OffsetHarmonic { b } if !(b >= 0.0 && b.is_finite()) => {
                Err(Error::InvalidSchedule(format!("offset b must be non-negative, got {b}")))
            }
            StepSchedule::Constant { value } if !(value > 0.0 && value <= 1.0) => {
                Err(Error::InvalidSchedule(format!("constant step must lie in (0, 1], got {value}")))
            }
            _ => Ok(()),
        }
    }

    /// `α_n`; `n = 0` is treated as `n = 1`.
    pub fn value(&self, n: u64) -> f64 {
        let n = n.max(1) as f64;
        match *self {
            StepSchedule::ScaledHarmonic { g } => (g / n).min(1.0),
            StepSchedule::Power { rho } => n.powf(-rho),
            StepSchedule::OffsetHarmonic { b } => 1.0 / (b + n),
            StepSchedule::Constant { value } => value,
        }
    }

    /// Polynomial decay rate: `α_n ≍ n^{-rate}`.
    pub fn decay_rate(&self) -> f64 {
        match *self {
            StepSchedule::ScaledHarmonic { .. } | StepSchedule::OffsetHarmonic { .. } => 1.0,
            StepSchedule::Power { rho } => rho,
            StepSchedule::Constant { .. } => 0.0,
        }
    }
}

/// Check a Zap schedule pair: either `γ = α` (single time scale) or
/// `α_n / γ_n → 0`.
pub fn validate_zap_schedules(alpha: &StepSchedule, gamma: &StepSchedule) -> Result<()> {
    alpha.validate()?;
    gamma.validate()?;
    if alpha == gamma || alpha.decay_rate() > gamma.decay_rate() {
        Ok(())
    } else {
        Err(Error::InvalidSchedule(format!(
            "matrix step must decay more slowly than the parameter step (rates {} and {})",
            gamma.decay_rate(),
            alpha.decay_rate()
        )))
    }
}

/// Sampled matrix, optionally in factored rank-one form `u vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSample {
    Dense(Matrix),
    RankOne { u: Vector, v: Vector },
}

impl MatrixSample {
    pub fn dim(&self) -> usize {
        match self {
            MatrixSample::Dense(m) => m.nrows(),
            MatrixSample::RankOne { u, .. } => u.len(),
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        match self {
            MatrixSample::Dense(m) => m * x,
            MatrixSample::RankOne { u, v } => u * v.dot(x),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            MatrixSample::Dense(m) => m.clone(),
            MatrixSample::RankOne { u, v } => u * v.transpose(),
        }
    }

    /// `m ← (1-γ) m + γ self`.
    pub fn blend_into(&self, m: &mut Matrix, gamma: f64) {
        *m *= 1.0 - gamma;
        match self {
            MatrixSample::Dense(a) => *m += a * gamma,
            MatrixSample::RankOne { u, v } => m.ger(gamma, u, v, 1.0),
        }
    }

    /// `m ← m + w self`.
    pub fn add_scaled_to(&self, m: &mut Matrix, w: f64) {
        match self {
            MatrixSample::Dense(a) => *m += a * w,
            MatrixSample::RankOne { u, v } => m.ger(w, u, v, 1.0),
        }
    }
}

/// One sample `(A_{n+1}, b_{n+1})` of a linear SA.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSample {
    pub a: MatrixSample,
    pub b: Vector,
}

impl LinearSample {
    /// `A_{n+1} θ − b_{n+1}`.
    pub fn residual(&self, theta: &Vector) -> Vector {
        self.a.apply(theta) - &self.b
    }
}

/// A source of linear SA samples driven by its own Markov chain and RNG.
pub trait LinearSystemStream {
    fn dim(&self) -> usize;
    fn next_sample(&mut self) -> LinearSample;
    /// Steady-state means `(A, b)` when they are known in closed form.
    fn means(&self) -> Option<(Matrix, Vector)> {
        None
    }
}

/// Finite Markov chain `X` with a fixed pair `(A(x), b(x))` per state; the
/// sample at step `n+1` is `(A(X_{n+1}), b(X_{n+1}))`.
#[derive(Debug, Clone)]
pub struct MarkovLinearStream {
    sampler: RowSampler,
    pi: Vector,
    a: Vec<MatrixSample>,
    b: Vec<Vector>,
    state: usize,
    rng: ChaCha8Rng,
}

impl MarkovLinearStream {
    pub fn new(p: &Matrix, a: Vec<MatrixSample>, b: Vec<Vector>, seed: u64) -> Result<Self> {
        let pi = stationary_pmf(p)?;
        let n = p.nrows();
        if a.len() != n || b.len() != n {
            return Err(Error::DimensionMismatch(format!("{n} chain states but {} matrices and {} vectors", a.len(), b.len())));
        }
        let d = b[0].len();
        if a.iter().any(|m| m.dim() != d) || b.iter().any(|v| v.len() != d) {
            return Err(Error::DimensionMismatch("samples have inconsistent dimensions".into()));
        }
        Ok(MarkovLinearStream { sampler: RowSampler::new(p), pi, a, b, state: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// Random chain on `n_states` states with dense Gaussian samples whose
    /// mean is `-I` plus a Gaussian perturbation of size `spread`.
    pub fn random_dense(d: usize, n_states: usize, spread: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_stochastic(n_states, &mut rng);
        let a = (0..n_states)
            .map(|_| MatrixSample::Dense(-Matrix::identity(d, d) + gaussian_matrix(d, d, &mut rng) * spread))
            .collect();
        let b = (0..n_states).map(|_| gaussian_matrix(d, 1, &mut rng).column(0).into()).collect();
        Self::new(&p, a, b, rng.random())
    }

    /// Random chain with rank-one samples `A(x) = u_x v_xᵀ`, where
    /// `u_x = e_{x mod d}` and `v_x = -u_x + spread·N(0, I)`.
    pub fn random_rank_one(d: usize, n_states: usize, spread: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_stochastic(n_states, &mut rng);
        let a = (0..n_states)
            .map(|x| {
                let u = Vector::from_fn(d, |i, _| if i == x % d { 1.0 } else { 0.0 });
                let v = -&u + gaussian_matrix(d, 1, &mut rng).column(0) * spread;
                MatrixSample::RankOne { u, v }
            })
            .collect();
        let b = (0..n_states).map(|_| gaussian_matrix(d, 1, &mut rng).column(0).into()).collect();
        Self::new(&p, a, b, rng.random())
    }

    pub fn stationary(&self) -> &Vector {
        &self.pi
    }
}

fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut p = Matrix::from_fn(n, n, |_, _| rng.random_range(0.1..1.0));
    for mut r in p.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    p
}

fn gaussian_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

impl LinearSystemStream for MarkovLinearStream {
    fn dim(&self) -> usize {
        self.b[0].len()
    }

    fn next_sample(&mut self) -> LinearSample {
        self.state = self.sampler.sample(self.state, &mut self.rng);
        LinearSample { a: self.a[self.state].clone(), b: self.b[self.state].clone() }
    }

    fn means(&self) -> Option<(Matrix, Vector)> {
        let d = self.dim();
        let mut a = Matrix::zeros(d, d);
        let mut b = Vector::zeros(d);
        for (x, w) in self.pi.iter().enumerate() {
            self.a[x].add_scaled_to(&mut a, *w);
            b += &self.b[x] * *w;
        }
        Some((a, b))
    }
}

/// Full refresh period of the maintained inverse.
const REFRESH_EVERY: u64 = 1000;

/// Running matrix estimate `Â` together with its projected inverse.
///
/// While `Â` is nearly singular the inverse is recomputed by SVD with clamped
/// singular values. Once it is well conditioned, rank-one samples are folded
/// in by Sherman–Morrison and the inverse is recomputed in full every
/// thousand updates, or at once if the rank-one update breaks down.
#[derive(Debug, Clone)]
pub struct GainEstimate {
    a_hat: Matrix,
    a_inv: Matrix,
    exact: bool,
    since_refresh: u64,
    updates: u64,
    invertible_since: Option<u64>,
}

impl GainEstimate {
    /// `Â₀ = 0`.
    pub fn zeros(d: usize) -> Self {
        Self::from_matrix(Matrix::zeros(d, d))
    }

    pub fn from_matrix(a: Matrix) -> Self {
        let d = a.nrows();
        let mut g = GainEstimate {
            a_hat: a,
            a_inv: Matrix::zeros(d, d),
            exact: false,
            since_refresh: 0,
            updates: 0,
            invertible_since: None,
        };
        g.refresh();
        g
    }

    pub fn dim(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a_hat
    }

    /// The maintained projected inverse `[Â]⁻¹`.
    pub fn inverse(&self) -> &Matrix {
        &self.a_inv
    }

    /// True when the inverse is exact (no singular value was clamped).
    pub fn is_invertible(&self) -> bool {
        self.exact
    }

    /// Update count at which `Â` last became invertible.
    pub fn invertible_since(&self) -> Option<u64> {
        self.invertible_since
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Replace `Â` and recompute its inverse.
    pub fn set(&mut self, a: Matrix) {
        self.a_hat = a;
        self.refresh();
    }

    fn refresh(&mut self) {
        let p = projected_inverse_default(&self.a_hat);
        self.a_inv = p.inverse;
        let was = self.exact;
        self.exact = !p.clamped;
        if self.exact && !was {
            self.invertible_since = Some(self.updates);
        } else if !self.exact {
            self.invertible_since = None;
        }
        self.since_refresh = 0;
    }

    /// `Â ← Â + γ (A − Â)`.
    pub fn update(&mut self, sample: &MatrixSample, gamma: f64) -> Result<()> {
        if sample.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!("sample is {}-dimensional, estimate {}", sample.dim(), self.dim())));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidSchedule(format!("matrix step must lie in [0,1], got {gamma}")));
        }
        self.updates += 1;
        if gamma == 0.0 {
            return Ok(());
        }
        sample.blend_into(&mut self.a_hat, gamma);
        if let (true, MatrixSample::RankOne { u, v }) = (self.exact && gamma < 1.0, sample) {
            self.since_refresh += 1;
            if self.since_refresh < REFRESH_EVERY && rank1_inverse_update_in_place(&mut self.a_inv, u, v, gamma).is_ok() {
                return Ok(());
            }
        }
        self.refresh();
        Ok(())
    }

    /// Fold in an explicit weighted sum: `Â ← (1-γ) Â + γ M`.
    pub fn update_dense(&mut self, m: &Matrix, gamma: f64) -> Result<()> {
        self.update(&MatrixSample::Dense(m.clone()), gamma)
    }
}

/// Parameter `θ` with the matrix estimate used by SNR and Zap recursions.
#[derive(Debug, Clone)]
pub struct ZapState {
    pub theta: Vector,
    pub gain: GainEstimate,
    /// Completed steps.
    pub n: u64,
}

impl ZapState {
    /// `θ = θ₀`, `Â₀ = 0`.
    pub fn new(theta0: Vector) -> Self {
        let d = theta0.len();
        ZapState { theta: theta0, gain: GainEstimate::zeros(d), n: 0 }
    }

    pub fn with_matrix(theta0: Vector, a0: Matrix) -> Self {
        ZapState { theta: theta0, gain: GainEstimate::from_matrix(a0), n: 0 }
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.theta.len() {
            return Err(Error::DimensionMismatch(format!("sample is {d}-dimensional, θ has {}", self.theta.len())));
        }
        Ok(())
    }

    /// `θ ← θ + α (A θ − b)`.
    pub fn linear_sa_step(&mut self, s: &LinearSample, alpha: f64) -> Result<()> {
        self.check(s.b.len())?;
        let r = s.residual(&self.theta);
        self.theta.axpy(alpha, &r, 1.0);
        self.n += 1;
        Ok(())
    }

    /// `θ ← θ + α G (A θ − b)`.
    pub fn matrix_gain_step(&mut self, s: &LinearSample, alpha: f64, g: &Matrix) -> Result<()> {
        self.check(s.b.len())?;
        let r = g * s.residual(&self.theta);
        self.theta.axpy(alpha, &r, 1.0);
        self.n += 1;
        Ok(())
    }

    /// SNR: `Â ← Â + α (A − Â)`, `θ ← θ − α Â⁻¹ (A θ − b)`.
    pub fn snr_step(&mut self, s: &LinearSample, alpha: f64) -> Result<()> {
        self.zap_step(s, alpha, alpha)
    }

    /// Zap: `Â ← Â + γ (A − Â)`, `θ ← θ − α Â⁻¹ (A θ − b)`.
    pub fn zap_step(&mut self, s: &LinearSample, alpha: f64, gamma: f64) -> Result<()> {
        self.check(s.b.len())?;
        self.gain.update(&s.a, gamma)?;
        let r = s.residual(&self.theta);
        self.theta.gemv(-alpha, self.gain.inverse(), &r, 1.0);
        self.n += 1;
        Ok(())
    }

    /// Nonlinear Zap: `Â ← Â + γ (∇f − Â)`, `θ ← θ − α Â⁻¹ f`.
    pub fn zap_nonlinear_step(&mut self, f: &Vector, grad: &MatrixSample, alpha: f64, gamma: f64) -> Result<()> {
        self.check(f.len())?;
        self.gain.update(grad, gamma)?;
        self.theta.gemv(-alpha, self.gain.inverse(), f, 1.0);
        self.n += 1;
        Ok(())
    }

    /// Batched Zap: average `f` and `∇f` over a batch sampled at the current
    /// (frozen) `θ`, then take one nonlinear Zap step with `(α, γ̂)`.
    pub fn od_zap_batch(&mut self, batch: &[(Vector, MatrixSample)], alpha: f64, gamma_hat: f64) -> Result<()> {
        let (f, grad) = batch_means(batch, self.theta.len())?;
        self.zap_nonlinear_step(&f, &MatrixSample::Dense(grad), alpha, gamma_hat)
    }
}

/// Arithmetic means of a batch of `(f, ∇f)` samples.
pub fn batch_means(batch: &[(Vector, MatrixSample)], d: usize) -> Result<(Vector, Matrix)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut f = Vector::zeros(d);
    let mut grad = Matrix::zeros(d, d);
    for (fi, gi) in batch {
        if fi.len() != d || gi.dim() != d {
            return Err(Error::DimensionMismatch("batch sample has the wrong dimension".into()));
        }
        f.axpy(w, fi, 1.0);
        gi.add_scaled_to(&mut grad, w);
    }
    Ok((f, grad))
}

/// `γ̂ = 1 − Π (1 − γ_j)`, the effective matrix step of a batch.
pub fn gamma_hat(gammas: &[f64]) -> Result<f64> {
    let mut g = 0.0;
    for &gj in gammas {
        if !(0.0..1.0).contains(&gj) {
            return Err(Error::InvalidSchedule(format!("batch step {gj} is outside [0,1)")));
        }
        // 1 − (1 − g)(1 − γ_j), exact for a single factor.
        g += gj * (1.0 - g);
    }
    // Long batches of large steps round to 1; keep the result below it.
    Ok(g.min(1.0 - f64::EPSILON / 2.0))
}

/// `θ_{k+1} = θ_k − ∇f(θ_k)⁻¹ f(θ_k)` for `steps` iterations, stopping early
/// at an exact root.
pub fn newton_raphson(
    f: impl Fn(&Vector) -> Vector,
    grad: impl Fn(&Vector) -> Matrix,
    theta0: &Vector,
    steps: usize,
) -> Result<Vector> {
    let mut theta = theta0.clone();
    for step in 0..steps {
        let fx = f(&theta);
        if fx.iter().all(|v| *v == 0.0) {
            break;
        }
        let delta = grad(&theta).lu().solve(&fx).ok_or(Error::SingularJacobian { step })?;
        theta -= delta;
    }
    Ok(theta)
}

/// Uniform average of the last `window` iterates (all of them by default).
pub fn prj_average(snapshots: &[Vector], window: Option<usize>) -> Result<Vector> {
    let window = window.unwrap_or(snapshots.len());
    if window == 0 || window > snapshots.len() {
        return Err(Error::InsufficientData(format!("window {window} over {} iterates", snapshots.len())));
    }
    let tail = &snapshots[snapshots.len() - window..];
    let mut mean = Vector::zeros(tail[0].len());
    for s in tail {
        mean += s;
    }
    Ok(mean / window as f64)
}

/// Online uniform average `θ̄_n = (1/n) Σ θ_k`.
#[derive(Debug, Clone)]
pub struct RunningAverage {
    mean: Vector,
    count: u64,
}

impl RunningAverage {
    pub fn new(d: usize) -> Self {
        RunningAverage { mean: Vector::zeros(d), count: 0 }
    }

    pub fn push(&mut self, x: &Vector) {
        self.count += 1;
        self.mean.axpy(1.0 / self.count as f64, &(x - &self.mean), 1.0);
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Snapshots `(n, θ_n, tr Â_n)` written out as CSV.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecorder {
    rows: Vec<(u64, Vector, Option<f64>)>,
}

impl TrajectoryRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, step: u64, theta: &Vector, a_hat_trace: Option<f64>) {
        self.rows.push((step, theta.clone(), a_hat_trace));
    }

    pub fn rows(&self) -> &[(u64, Vector, Option<f64>)] {
        &self.rows
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.rows.first().map_or(0, |r| r.1.len());
        let with_trace = self.rows.iter().any(|r| r.2.is_some());
        let mut header = vec!["step".to_string()];
        header.extend((0..d).map(|i| format!("theta_{i}")));
        if with_trace {
            header.push("a_hat_trace".into());
        }
        w.write_record(&header)?;
        for (n, theta, tr) in &self.rows {
            let mut rec = vec![n.to_string()];
            rec.extend(theta.iter().map(|v| v.to_string()));
            if with_trace {
                rec.push(tr.map_or(String::new(), |t| t.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::projected_inverse;
    use proptest::prelude::*;

    fn scalar_sample(a: f64, b: f64) -> LinearSample {
        LinearSample { a: MatrixSample::Dense(Matrix::from_element(1, 1, a)), b: Vector::from_element(1, b) }
    }

    #[test]
    fn schedules() {
        assert_eq!(StepSchedule::harmonic().value(4), 0.25);
        assert_eq!(StepSchedule::scaled_harmonic(70.0).unwrap().value(140), 0.5);
        assert_eq!(StepSchedule::scaled_harmonic(70.0).unwrap().value(7), 1.0);
        assert!((StepSchedule::power(0.85).unwrap().value(100) - 100f64.powf(-0.85)).abs() < 1e-16);
        assert_eq!(StepSchedule::offset_harmonic(3.0).unwrap().value(1), 0.25);
        assert!(StepSchedule::power(0.5).is_err());
        assert!(StepSchedule::power(1.01).is_err());
        assert!(StepSchedule::power(1.0).is_ok());
        assert!(StepSchedule::constant(0.0).is_err());
        assert!(StepSchedule::scaled_harmonic(-1.0).is_err());
    }

    #[test]
    fn zap_schedule_pairs() {
        let a = StepSchedule::harmonic();
        assert!(validate_zap_schedules(&a, &StepSchedule::power(0.85).unwrap()).is_ok());
        assert!(validate_zap_schedules(&a, &a).is_ok());
        assert!(validate_zap_schedules(&StepSchedule::power(0.85).unwrap(), &a).is_err());
    }

    #[test]
    fn schedule_json_shape() {
        let s: StepSchedule = serde_json::from_str(r#"{"kind":"power","rho":0.85}"#).unwrap();
        assert_eq!(s, StepSchedule::Power { rho: 0.85 });
    }

    #[test]
    fn linear_sa_trivial_cases() {
        let mut st = ZapState::new(Vector::from_element(1, 1.0));
        st.linear_sa_step(&scalar_sample(-1.0, 0.0), 1.0).unwrap();
        assert_eq!(st.theta[0], 0.0);
        let mut st = ZapState::new(Vector::from_element(1, 3.0));
        st.linear_sa_step(&scalar_sample(-1.0, 5.0), 0.0).unwrap();
        assert_eq!(st.theta[0], 3.0);
    }

    #[test]
    fn linear_sa_with_harmonic_step_is_running_mean() {
        // A = -1, b = -(1 + W): θ_n is the mean of 1 + W_1..W_n.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut st = ZapState::new(Vector::from_element(1, 0.0));
        let mut sum = 0.0;
        let n = 5000;
        for k in 1..=n {
            let w: f64 = StandardNormal.sample(&mut rng);
            sum += 1.0 + w;
            st.linear_sa_step(&scalar_sample(-1.0, -(1.0 + w)), 1.0 / k as f64).unwrap();
        }
        assert!((st.theta[0] - sum / n as f64).abs() < 1e-12);
        assert!((st.theta[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn matrix_gain_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = -Matrix::identity(3, 3) + gaussian_matrix(3, 3, &mut rng) * 0.3;
        let b: Vector = gaussian_matrix(3, 1, &mut rng).column(0).into();
        let s = LinearSample { a: MatrixSample::Dense(a.clone()), b: b.clone() };
        let theta0 = Vector::from_element(3, 2.0);

        let mut x = ZapState::new(theta0.clone());
        let mut y = ZapState::new(theta0.clone());
        x.matrix_gain_step(&s, 0.3, &Matrix::identity(3, 3)).unwrap();
        y.linear_sa_step(&s, 0.3).unwrap();
        assert_eq!(x.theta, y.theta);

        let mut z = ZapState::new(theta0.clone());
        z.matrix_gain_step(&s, 0.3, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(z.theta, theta0);

        let mut nr = ZapState::new(theta0);
        let g = -a.clone().try_inverse().unwrap();
        nr.matrix_gain_step(&s, 1.0, &g).unwrap();
        let root = a.lu().solve(&b).unwrap();
        assert!((nr.theta - root).amax() < 1e-12);
    }

    #[test]
    fn snr_running_mean_and_one_step_solve() {
        let mut stream = MarkovLinearStream::random_dense(3, 4, 0.5, 9).unwrap();
        let mut st = ZapState::new(Vector::zeros(3));
        let mut mean = Matrix::zeros(3, 3);
        for n in 1..=50u64 {
            let s = stream.next_sample();
            mean += (s.a.to_dense() - &mean) / n as f64;
            st.snr_step(&s, 1.0 / n as f64).unwrap();
        }
        assert!((st.gain.matrix() - mean).amax() < 1e-12);

        let a = Matrix::from_row_slice(2, 2, &[-2.0, 0.5, 0.1, -1.0]);
        let b = Vector::from_vec(vec![1.0, -3.0]);
        let s = LinearSample { a: MatrixSample::Dense(a.clone()), b: b.clone() };
        let mut st = ZapState::new(Vector::from_element(2, 7.0));
        st.snr_step(&s, 1.0).unwrap();
        assert!((st.theta - a.lu().solve(&b).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn snr_matches_direct_estimate() {
        let mut stream = MarkovLinearStream::random_dense(4, 5, 0.4, 21).unwrap();
        let mut st = ZapState::new(Vector::from_element(4, 1.0));
        let mut b_hat = Vector::zeros(4);
        for n in 1..=2000u64 {
            let s = stream.next_sample();
            b_hat += (&s.b - &b_hat) / n as f64;
            st.snr_step(&s, 1.0 / n as f64).unwrap();
            if n % 100 == 0 {
                let direct = st.gain.matrix().clone().lu().solve(&b_hat).unwrap();
                assert!((&st.theta - direct).amax() < 1e-8, "n = {n}");
            }
        }
    }

    #[test]
    fn zap_special_cases() {
        let mut stream = MarkovLinearStream::random_dense(3, 3, 0.5, 5).unwrap();
        let mut snr = ZapState::new(Vector::from_element(3, 1.0));
        let mut zap = snr.clone();
        for n in 1..=100u64 {
            let s = stream.next_sample();
            let a = 1.0 / n as f64;
            snr.snr_step(&s, a).unwrap();
            zap.zap_step(&s, a, a).unwrap();
        }
        assert_eq!(snr.theta, zap.theta);

        let s = stream.next_sample();
        zap.zap_step(&s, 0.1, 1.0).unwrap();
        assert_eq!(*zap.gain.matrix(), s.a.to_dense());
    }

    #[test]
    fn zap_matrix_estimate_tracks_mean() {
        let mut stream = MarkovLinearStream::random_dense(2, 3, 0.5, 17).unwrap();
        let (a_mean, _) = stream.means().unwrap();
        let alpha = StepSchedule::harmonic();
        let gamma = StepSchedule::power(0.85).unwrap();
        let mut st = ZapState::new(Vector::zeros(2));
        for n in 1..=100_000u64 {
            let s = stream.next_sample();
            st.zap_step(&s, alpha.value(n), gamma.value(n)).unwrap();
        }
        let rel = (st.gain.matrix() - &a_mean).norm() / a_mean.norm();
        assert!(rel < 0.02, "relative error {rel}");
    }

    #[test]
    fn stream_empirical_means_match_declared() {
        let mut stream = MarkovLinearStream::random_dense(3, 4, 0.5, 8).unwrap();
        let (a, b) = stream.means().unwrap();
        let mut sa = Matrix::zeros(3, 3);
        let mut sb = Vector::zeros(3);
        let n = 100_000;
        for _ in 0..n {
            let s = stream.next_sample();
            s.a.add_scaled_to(&mut sa, 1.0 / n as f64);
            sb += s.b / n as f64;
        }
        assert!((sa - &a).norm() / a.norm() < 0.05);
        assert!((sb - &b).norm() / b.norm() < 0.05);
    }

    #[test]
    fn rank_one_zap_inverse_stays_consistent() {
        let mut stream = MarkovLinearStream::random_rank_one(4, 8, 0.3, 4).unwrap();
        let gamma = StepSchedule::power(0.85).unwrap();
        let mut st = ZapState::new(Vector::zeros(4));
        for n in 1..=10_000u64 {
            let s = stream.next_sample();
            st.zap_step(&s, 1.0 / n as f64, gamma.value(n)).unwrap();
            if n % 1000 == 0 {
                let direct = projected_inverse_default(st.gain.matrix()).inverse;
                let scale = direct.amax().max(1.0);
                assert!((st.gain.inverse() - &direct).amax() / scale < 1e-8, "n = {n}");
            }
        }
        assert!(st.gain.is_invertible());
    }

    #[test]
    fn gain_estimate_starts_projected() {
        let g = GainEstimate::zeros(3);
        assert!(!g.is_invertible());
        assert_eq!(*g.inverse(), Matrix::identity(3, 3) * 1e8);
        let mut g = GainEstimate::zeros(2);
        g.update(&MatrixSample::Dense(-Matrix::identity(2, 2)), 1.0).unwrap();
        assert!(g.is_invertible());
        assert_eq!(g.invertible_since(), Some(1));
        assert_eq!(*g.inverse(), -Matrix::identity(2, 2));
        let eps = 1e-6;
        let clamped = projected_inverse(&Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0])), eps);
        assert_eq!(clamped[(1, 1)].abs(), 1e6);
    }

    #[test]
    fn nonlinear_zap_cases() {
        // Linear f reproduces zap_step.
        let mut stream = MarkovLinearStream::random_dense(3, 3, 0.4, 2).unwrap();
        let mut lin = ZapState::new(Vector::from_element(3, 0.5));
        let mut non = lin.clone();
        for n in 1..=200u64 {
            let s = stream.next_sample();
            let (a, g) = (1.0 / n as f64, (n as f64).powf(-0.85));
            let f = s.residual(&non.theta);
            lin.zap_step(&s, a, g).unwrap();
            non.zap_nonlinear_step(&f, &s.a, a, g).unwrap();
        }
        assert!((lin.theta - &non.theta).amax() < 1e-12);

        // f = 0 leaves θ alone.
        let theta = non.theta.clone();
        non.zap_nonlinear_step(&Vector::zeros(3), &MatrixSample::Dense(-Matrix::identity(3, 3)), 0.5, 0.5).unwrap();
        assert_eq!(non.theta, theta);
    }

    #[test]
    fn noiseless_zap_with_unit_matrix_step_is_damped_newton() {
        // f(θ) = θ² − 2; γ = 1 makes Â = f'(θ_n) exactly.
        let mut st = ZapState::new(Vector::from_element(1, 3.0));
        let mut hand = 3.0f64;
        for n in 1..=40u64 {
            let a = 1.0 / (n as f64 + 1.0);
            let th = st.theta[0];
            st.zap_nonlinear_step(
                &Vector::from_element(1, th * th - 2.0),
                &MatrixSample::Dense(Matrix::from_element(1, 1, 2.0 * th)),
                a,
                1.0,
            )
            .unwrap();
            hand -= a * (hand * hand - 2.0) / (2.0 * hand);
            assert!((st.theta[0] - hand).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_raphson_cases() {
        let c = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        let root = newton_raphson(|t| t - &c, |_| Matrix::identity(3, 3), &Vector::zeros(3), 1).unwrap();
        assert_eq!(root, c);

        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = Vector::from_vec(vec![1.0, 2.0]);
        let r = newton_raphson(|t| &a * t - &b, |_| a.clone(), &Vector::from_element(2, 9.0), 1).unwrap();
        assert!((&a * r - &b).amax() < 1e-14);

        let cube = newton_raphson(
            |t| Vector::from_element(1, t[0].powi(3) - 1.0),
            |t| Matrix::from_element(1, 1, 3.0 * t[0] * t[0]),
            &Vector::from_element(1, 2.0),
            50,
        )
        .unwrap();
        assert!((cube[0] - 1.0).abs() < 1e-12);

        let singular = newton_raphson(
            |t| Vector::from_element(1, t[0] * t[0] + 1.0),
            |t| Matrix::from_element(1, 1, 2.0 * t[0]),
            &Vector::zeros(1),
            5,
        );
        assert!(matches!(singular, Err(Error::SingularJacobian { step: 0 })));
    }

    #[test]
    fn prj_average_cases() {
        let same = vec![Vector::from_element(2, 4.0); 5];
        assert_eq!(prj_average(&same, None).unwrap(), Vector::from_element(2, 4.0));
        let seq: Vec<Vector> = (0..10).map(|k| Vector::from_element(1, k as f64)).collect();
        assert_eq!(prj_average(&seq, Some(1)).unwrap()[0], 9.0);
        assert_eq!(prj_average(&seq, None).unwrap()[0], 4.5);
        assert!(prj_average(&seq, Some(11)).is_err());
        let mut run = RunningAverage::new(1);
        seq.iter().for_each(|v| run.push(v));
        assert!((run.mean()[0] - 4.5).abs() < 1e-14);
    }

    #[test]
    fn gamma_hat_cases() {
        assert_eq!(gamma_hat(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((gamma_hat(&[0.3]).unwrap() - 0.3).abs() < 1e-16);
        assert!((gamma_hat(&[0.1, 0.1, 0.1]).unwrap() - 0.271).abs() < 1e-15);
        assert!(gamma_hat(&[1.0]).is_err());
    }

    #[test]
    fn od_zap_batch_cases() {
        let mut stream = MarkovLinearStream::random_dense(3, 3, 0.4, 12).unwrap();
        let s = stream.next_sample();
        let mut one = ZapState::new(Vector::from_element(3, 1.0));
        let mut batched = one.clone();
        let f = s.residual(&one.theta);
        one.zap_nonlinear_step(&f, &s.a, 0.5, 0.7).unwrap();
        batched.od_zap_batch(&[(f.clone(), s.a.clone())], 0.5, 0.7).unwrap();
        assert!((one.theta - &batched.theta).amax() < 1e-15);

        let rep = vec![(f.clone(), s.a.clone()); 4];
        let (fm, gm) = batch_means(&rep, 3).unwrap();
        assert!((fm - &f).amax() < 1e-15);
        assert!((gm - s.a.to_dense()).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<_> = (0..37)
            .map(|_| (gaussian_matrix(3, 1, &mut rng).column(0).into(), MatrixSample::Dense(gaussian_matrix(3, 3, &mut rng))))
            .collect();
        let (fm, _) = batch_means(&batch, 3).unwrap();
        let mut sum = Vector::zeros(3);
        batch.iter().for_each(|(v, _)| sum += v);
        assert!((fm - sum / 37.0).amax() < 1e-12);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut stream = MarkovLinearStream::random_dense(3, 4, 0.5, 77).unwrap();
            let mut st = ZapState::new(Vector::zeros(3));
            for n in 1..=500u64 {
                let s = stream.next_sample();
                st.zap_step(&s, 1.0 / n as f64, (n as f64).powf(-0.85)).unwrap();
            }
            st.theta
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trajectory_csv() {
        let mut rec = TrajectoryRecorder::new();
        rec.record(1, &Vector::from_vec(vec![0.5, 1.0]), Some(2.0));
        rec.record(10, &Vector::from_vec(vec![0.25, 1.5]), None);
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,theta_0,theta_1,a_hat_trace\n1,0.5,1,2\n10,0.25,1.5,\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn snr_equals_direct_estimate(seed in 0u64..10_000, d in 1usize..=6) {
            let mut stream = MarkovLinearStream::random_dense(d, d + 2, 0.4, seed).unwrap();
            let mut st = ZapState::new(Vector::zeros(d));
            let mut b_hat = Vector::zeros(d);
            for n in 1..=1000u64 {
                let s = stream.next_sample();
                b_hat += (&s.b - &b_hat) / n as f64;
                st.snr_step(&s, 1.0 / n as f64).unwrap();
            }
            let a_hat = st.gain.matrix().clone();
            let direct = a_hat.lu().solve(&b_hat).unwrap();
            prop_assert!((&st.theta - &direct).amax() <= 1e-8 * direct.amax().max(1.0));
        }

        #[test]
        fn schedule_values_in_unit_interval(n in 1u64..1_000_000, g in 0.01f64..100.0, rho in 0.501f64..1.0, b in 0.0f64..1e4) {
            for s in [
                StepSchedule::scaled_harmonic(g).unwrap(),
                StepSchedule::power(rho).unwrap(),
                StepSchedule::offset_harmonic(b).unwrap(),
            ] {
                let v = s.value(n);
                prop_assert!(v > 0.0 && v <= 1.0);
            }
        }

        #[test]
        fn power_schedule_rejects_out_of_range(rho in prop_oneof![-2.0f64..=0.5, 1.0000001f64..3.0]) {
            prop_assert!(StepSchedule::power(rho).is_err());
        }

        #[test]
        fn gamma_hat_in_unit_interval(gs in proptest::collection::vec(0.0f64..0.999, 1..50)) {
            let g = gamma_hat(&gs).unwrap();
            let direct = 1.0 - gs.iter().map(|x| 1.0 - x).product::<f64>();
            prop_assert!((0.0..1.0).contains(&g));
            prop_assert!((g - direct).abs() < 1e-12);
        }
    }
}
