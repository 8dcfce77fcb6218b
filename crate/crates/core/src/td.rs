//! TD(λ), SNR-TD(λ) and LSTD(λ) for an uncontrolled chain with a linear
//! value-function class `h^θ = Ψ θ`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{check_row_stochastic, stationary_pmf, Matrix, RowSampler, Vector};
use crate::sa::{GainEstimate, LinearSample, LinearSystemStream, MatrixSample};

/// Markov chain with per-state cost and a basis `Ψ` (row `x` is `ψ(x)ᵀ`).
#[derive(Debug, Clone)]
pub struct TdModel {
    p: Matrix,
    cost: Vector,
    beta: f64,
    basis: Matrix,
    pi: Vector,
    sampler: RowSampler,
}

impl TdModel {
    pub fn new(p: Matrix, cost: Vector, beta: f64, basis: Matrix) -> Result<Self> {
        check_row_stochastic(&p, 1e-9)?;
        if cost.len() != p.nrows() || basis.nrows() != p.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} states, {} costs, {} basis rows",
                p.nrows(),
                cost.len(),
                basis.nrows()
            )));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!("discount factor must lie in [0,1), got {beta}")));
        }
        let pi = stationary_pmf(&p)?;
        let sampler = RowSampler::new(&p);
        Ok(TdModel { p, cost, beta, basis, pi, sampler })
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn cost(&self) -> &Vector {
        &self.cost
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn stationary(&self) -> &Vector {
        &self.pi
    }

    /// `ψ(x)`.
    pub fn psi(&self, x: usize) -> Vector {
        self.basis.row(x).transpose()
    }

    pub fn next_state<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> usize {
        self.sampler.sample(x, rng)
    }

    /// States `X_0 = x0, X_1, …, X_steps`.
    pub fn simulate<R: Rng + ?Sized>(&self, x0: usize, steps: usize, rng: &mut R) -> Vec<usize> {
        let mut path = Vec::with_capacity(steps + 1);
        path.push(x0);
        let mut x = x0;
        for _ in 0..steps {
            x = self.next_state(x, rng);
            path.push(x);
        }
        path
    }

    /// Discounted value `h = (I − βP)⁻¹ c`.
    pub fn value(&self) -> Result<Vector> {
        let n = self.n_states();
        (Matrix::identity(n, n) - &self.p * self.beta).lu().solve(&self.cost).ok_or(Error::SingularMatrix)
    }

    /// Steady-state means of the TD(λ) linear system:
    /// `A = ΨᵀD(I − λβP)⁻¹(βP − I)Ψ`, `b = −ΨᵀD(I − λβP)⁻¹c`.
    pub fn galerkin_system(&self, lambda: f64) -> Result<(Matrix, Vector)> {
        let n = self.n_states();
        let id = Matrix::identity(n, n);
        let resolvent = (&id - &self.p * (lambda * self.beta)).try_inverse().ok_or(Error::SingularMatrix)?;
        let left = self.basis.transpose() * Matrix::from_diagonal(&self.pi) * resolvent;
        let a = &left * (&self.p * self.beta - id) * &self.basis;
        let b = -(&left * &self.cost);
        Ok((a, b))
    }

    /// The parameter solving `Aθ = b` for [`TdModel::galerkin_system`].
    pub fn galerkin_fixed_point(&self, lambda: f64) -> Result<Vector> {
        let (a, b) = self.galerkin_system(lambda)?;
        a.lu().solve(&b).ok_or(Error::SingularMatrix)
    }

    /// Same model with basis `εΨ`.
    pub fn with_scaled_basis(&self, eps: f64) -> Self {
        TdModel { basis: &self.basis * eps, ..self.clone() }
    }
}

/// Parameter and eligibility vector of TD(λ).
#[derive(Debug, Clone)]
pub struct TdState {
    pub theta: Vector,
    pub zeta: Vector,
    pub lambda: f64,
    pub beta: f64,
}

impl TdState {
    /// `ζ₀` is usually `ψ(X₀)`.
    pub fn new(theta0: Vector, zeta0: Vector, lambda: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("trace parameter must lie in [0,1], got {lambda}")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!("discount factor must lie in [0,1), got {beta}")));
        }
        if theta0.len() != zeta0.len() {
            return Err(Error::DimensionMismatch("θ and ζ differ in length".into()));
        }
        Ok(TdState { theta: theta0, zeta: zeta0, lambda, beta })
    }

    /// `d = c + (βψ' − ψ)ᵀθ`.
    pub fn temporal_difference(&self, psi: &Vector, psi_next: &Vector, c: f64) -> f64 {
        c + self.beta * psi_next.dot(&self.theta) - psi.dot(&self.theta)
    }

    /// `ζ ← λβζ + ψ'`.
    pub fn advance_trace(&mut self, psi_next: &Vector) {
        self.zeta.axpy(1.0, psi_next, self.lambda * self.beta);
    }

    /// `θ ← θ + α ζ d`, then the trace update.
    pub fn td_lambda_step(&mut self, psi: &Vector, psi_next: &Vector, c: f64, alpha: f64) {
        let d = self.temporal_difference(psi, psi_next, c);
        self.theta.axpy(alpha * d, &self.zeta, 1.0);
        self.advance_trace(psi_next);
    }
}

/// TD(λ) with the SNR matrix gain.
#[derive(Debug, Clone)]
pub struct SnrTdState {
    pub td: TdState,
    pub gain: GainEstimate,
}

impl SnrTdState {
    /// `Â₀ = 0`.
    pub fn new(td: TdState) -> Self {
        let d = td.theta.len();
        SnrTdState { td, gain: GainEstimate::zeros(d) }
    }

    pub fn with_matrix(td: TdState, a0: Matrix) -> Self {
        SnrTdState { td, gain: GainEstimate::from_matrix(a0) }
    }

    /// `Â ← Â + α(ζ(βψ' − ψ)ᵀ − Â)`, `θ ← θ − α Â⁻¹ ζ d`, then the trace update.
    pub fn snr_td_step(&mut self, psi: &Vector, psi_next: &Vector, c: f64, alpha: f64) -> Result<()> {
        let td = &mut self.td;
        let v = psi_next * td.beta - psi;
        self.gain.update(&MatrixSample::RankOne { u: td.zeta.clone(), v }, alpha)?;
        let d = td.temporal_difference(psi, psi_next, c);
        td.theta.gemv(-alpha * d, self.gain.inverse(), &td.zeta, 1.0);
        td.advance_trace(psi_next);
        Ok(())
    }
}

/// Running sums for LSTD(λ); the linear solve happens only in [`Lstd::solve`].
#[derive(Debug, Clone)]
pub struct Lstd {
    sum_a: Matrix,
    sum_zc: Vector,
    zeta: Vector,
    lambda: f64,
    beta: f64,
    n: u64,
}

impl Lstd {
    pub fn new(zeta0: Vector, lambda: f64, beta: f64) -> Self {
        let d = zeta0.len();
        Lstd { sum_a: Matrix::zeros(d, d), sum_zc: Vector::zeros(d), zeta: zeta0, lambda, beta, n: 0 }
    }

    /// Fold in the transition `x → x'` with cost `c(x)`.
    pub fn push(&mut self, psi: &Vector, psi_next: &Vector, c: f64) {
        let v = psi_next * self.beta - psi;
        self.sum_a.ger(1.0, &self.zeta, &v, 1.0);
        self.sum_zc.axpy(c, &self.zeta, 1.0);
        self.zeta.axpy(1.0, psi_next, self.lambda * self.beta);
        self.n += 1;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// `Â_n = (1/n) Σ ζ_{i−1}(βψ(X_i) − ψ(X_{i−1}))ᵀ`.
    pub fn a_hat(&self) -> Matrix {
        &self.sum_a / self.n.max(1) as f64
    }

    /// `(1/n) Σ ζ_{i−1} c(X_{i−1})`.
    pub fn zeta_cost_mean(&self) -> Vector {
        &self.sum_zc / self.n.max(1) as f64
    }

    /// `θ_n = −Â_n⁻¹ (1/n) Σ ζ_{i−1} c(X_{i−1})`, the root of the sampled
    /// projected Bellman equation.
    pub fn solve(&self) -> Result<Vector> {
        if self.n == 0 {
            return Err(Error::InsufficientData("no transitions".into()));
        }
        let sol = self.sum_a.clone().lu().solve(&self.sum_zc).ok_or(Error::SingularMatrix)?;
        Ok(-sol)
    }
}

/// LSTD(λ) estimate from a state path, with `ζ₀ = ψ(X₀)`.
pub fn lstd_direct(model: &TdModel, path: &[usize], lambda: f64) -> Result<Vector> {
    if path.len() < 2 {
        return Err(Error::InsufficientData("path needs at least one transition".into()));
    }
    let mut acc = Lstd::new(model.psi(path[0]), lambda, model.beta());
    for w in path.windows(2) {
        acc.push(&model.psi(w[0]), &model.psi(w[1]), model.cost()[w[0]]);
    }
    acc.solve()
}

/// The TD(λ) recursion as a linear SA stream:
/// `A_{n+1} = ζ_n(βψ(X_{n+1}) − ψ(X_n))ᵀ`, `b_{n+1} = −ζ_n c(X_n)`.
#[derive(Debug, Clone)]
pub struct TdStream<R> {
    model: TdModel,
    lambda: f64,
    state: usize,
    zeta: Vector,
    rng: R,
}

impl<R: Rng> TdStream<R> {
    pub fn new(model: TdModel, lambda: f64, x0: usize, rng: R) -> Self {
        let zeta = model.psi(x0);
        TdStream { model, lambda, state: x0, zeta, rng }
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl<R: Rng> LinearSystemStream for TdStream<R> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn next_sample(&mut self) -> LinearSample {
        let x = self.state;
        let next = self.model.next_state(x, &mut self.rng);
        let psi = self.model.psi(x);
        let psi_next = self.model.psi(next);
        let beta = self.model.beta();
        let sample = LinearSample {
            a: MatrixSample::RankOne { u: self.zeta.clone(), v: &psi_next * beta - psi },
            b: &self.zeta * -self.model.cost()[x],
        };
        self.zeta.axpy(1.0, &psi_next, self.lambda * beta);
        self.state = next;
        sample
    }

    fn means(&self) -> Option<(Matrix, Vector)> {
        self.model.galerkin_system(self.lambda).ok()
    }
}
