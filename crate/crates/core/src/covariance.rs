//! Asymptotic covariance of linear SA and tabular Q-learning: the
//! linearization `A`, the noise covariance `Σ_Δ`, Lyapunov solutions `Σ^G`,
//! the optimal covariance `Σ* = A⁻¹ Σ_Δ A⁻ᵀ`, scalar-gain sweeps and the
//! Perron-Frobenius certificate for infinite variance of Watkins' algorithm.

use std::io::Write;

use nalgebra::Complex;
use serde_json::json;

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::numerics::{eigenvalues, invert, perron_eigenpair, solve_lyapunov, symmetrize, Matrix, Spectrum, Vector};
use crate::qlearn::BehaviorPolicy;

/// Optimal policies closer than this in Q* are treated as tied.
pub const UNIQUENESS_MARGIN: f64 = 1e-9;

/// `A = −Π(I − βPS_{φ*})` with the quantities it was built from.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub a: Matrix,
    /// Invariant pmf `ϖ` of the pair chain under the behaviour policy.
    pub pi: Vector,
    pub q_star: Vector,
    /// Optimal action per state.
    pub policy: Vec<usize>,
    /// Smallest gap between the best and second-best Q* value in a state.
    pub margin: f64,
}

/// Smallest per-state gap between the two lowest Q-values.
pub fn argmin_margin(mdp: &FiniteMdp, q: &Vector) -> f64 {
    let mut margin = f64::INFINITY;
    for x in 0..mdp.n_states() {
        let mut vals: Vec<f64> = mdp.pairs_of(x).map(|k| q[k]).collect();
        if vals.len() < 2 {
            continue;
        }
        vals.sort_by(f64::total_cmp);
        margin = margin.min(vals[1] - vals[0]);
    }
    margin
}

pub fn linearization_a(mdp: &FiniteMdp, behavior: &BehaviorPolicy) -> Result<Linearization> {
    let q_star = mdp.solve_q_star(1e-12)?;
    let margin = argmin_margin(mdp, &q_star);
    if margin < UNIQUENESS_MARGIN {
        return Err(Error::NonUniqueOptimalPolicy { margin });
    }
    let (_, pi) = behavior.pair_chain_pmf(mdp)?;
    let policy = mdp.greedy_actions(&q_star);
    let (_, ps) = mdp.policy_matrices(&crate::mdp::Policy::Deterministic(policy.clone()))?;
    let d = mdp.n_pairs();
    let a = -Matrix::from_diagonal(&pi) * (Matrix::identity(d, d) - ps * mdp.beta());
    Ok(Linearization { a, pi, q_star, policy, margin })
}

/// Diagonal `Σ_Δ` of tabular Watkins at `θ*`: entry `k` is
/// `β² ϖ(k) Var_{x'∼P_k}[h*(x')]`.
pub fn sigma_delta_tabular(mdp: &FiniteMdp, behavior: &BehaviorPolicy) -> Result<Matrix> {
    let q_star = mdp.solve_q_star(1e-12)?;
    let h = mdp.min_per_state(&q_star);
    let (_, pi) = behavior.pair_chain_pmf(mdp)?;
    let beta2 = mdp.beta() * mdp.beta();
    let diag = Vector::from_fn(mdp.n_pairs(), |k, _| {
        let row = mdp.kernel().row(k);
        let mean: f64 = row.iter().zip(h.iter()).map(|(p, v)| p * v).sum();
        let var: f64 = row.iter().zip(h.iter()).map(|(p, v)| p * (v - mean) * (v - mean)).sum();
        beta2 * pi[k] * var.max(0.0)
    });
    Ok(Matrix::from_diagonal(&diag))
}

/// Batch-means estimate `(1/M) Σ_m S_m S_mᵀ / T` of `Σ_Δ` from `M` disjoint
/// batches of length `T`, where `S_m` is the batch sum.
pub fn sigma_delta_batchmeans(samples: &[Vector], batch_len: usize) -> Result<Matrix> {
    if batch_len < 10 {
        return Err(Error::InsufficientData(format!("batch length {batch_len} is below 10")));
    }
    let m = samples.len() / batch_len;
    if m == 0 {
        return Err(Error::InsufficientData(format!("{} samples do not fill one batch of {batch_len}", samples.len())));
    }
    let d = samples[0].len();
    let mut acc = Matrix::zeros(d, d);
    for batch in samples.chunks_exact(batch_len) {
        let mut s = Vector::zeros(d);
        for x in batch {
            s += x;
        }
        acc.ger(1.0, &s, &s, 1.0);
    }
    Ok(acc / (m * batch_len) as f64)
}

/// Gain used in `θ ← θ + α_n G (A_{n+1}θ − b_{n+1})` with `α_n = 1/n`.
#[derive(Debug, Clone, PartialEq)]
pub enum Gain {
    Scalar(f64),
    Matrix(Matrix),
    /// `G* = −A⁻¹`.
    Optimal,
}

impl Gain {
    pub fn label(&self) -> String {
        match self {
            Gain::Scalar(g) => format!("scalar g={g}"),
            Gain::Matrix(_) => "matrix".into(),
            Gain::Optimal => "optimal".into(),
        }
    }

    pub fn matrix(&self, a: &Matrix) -> Result<Matrix> {
        let d = a.nrows();
        match self {
            Gain::Scalar(g) => Ok(Matrix::identity(d, d) * *g),
            Gain::Matrix(g) => {
                if g.shape() != a.shape() {
                    return Err(Error::DimensionMismatch("gain and A differ in shape".into()));
                }
                Ok(g.clone())
            }
            Gain::Optimal => Ok(-invert(a)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Finite,
    /// Some eigenvalue of `GA` has real part `≥ −½` and the noise excites it.
    Infinite,
    /// Some eigenvalue has real part `≥ −½` but the noise does not reach it.
    Undetermined,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Finite => "finite",
            Verdict::Infinite => "infinite",
            Verdict::Undetermined => "undetermined",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub a: Matrix,
    pub sigma_delta: Matrix,
    pub gain: String,
    pub gain_matrix: Matrix,
    /// `Σ_θ`, present exactly when the verdict is finite.
    pub sigma: Option<Matrix>,
    /// Spectrum of `GA`.
    pub spectrum: Spectrum,
    pub verdict: Verdict,
}

impl CovarianceReport {
    pub fn trace(&self) -> Option<f64> {
        self.sigma.as_ref().map(|s| s.trace())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &Matrix| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        json!({
            "gain": self.gain,
            "verdict": self.verdict.as_str(),
            "trace": self.trace(),
            "spectrum_real": self.spectrum.iter().map(|z| z.re).collect::<Vec<_>>(),
            "spectrum_imag": self.spectrum.iter().map(|z| z.im).collect::<Vec<_>>(),
            "a": rows(&self.a),
            "sigma_delta": rows(&self.sigma_delta),
            "gain_matrix": rows(&self.gain_matrix),
            "sigma": self.sigma.as_ref().map(rows),
        })
    }
}

/// Left eigenvector of `m` for eigenvalue `lambda`: the null vector of `m* − λ̄I`.
fn left_eigenvector(m: &Matrix, lambda: Complex<f64>) -> nalgebra::DVector<Complex<f64>> {
    let d = m.nrows();
    let shifted = nalgebra::DMatrix::from_fn(d, d, |i, j| {
        let v = Complex::new(m[(j, i)], 0.0);
        if i == j {
            v - lambda.conj()
        } else {
            v
        }
    });
    let svd = shifted.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let (idx, _) =
        svd.singular_values.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc });
    v_t.row(idx).adjoint()
}

/// Asymptotic covariance of `θ ← θ + (1/n) G (A_{n+1}θ − b_{n+1})`.
pub fn asymptotic_cov(a: &Matrix, sigma_delta: &Matrix, gain: &Gain) -> Result<CovarianceReport> {
    if a.shape() != sigma_delta.shape() || !a.is_square() {
        return Err(Error::DimensionMismatch("A and Σ_Δ must be square and of equal size".into()));
    }
    let d = a.nrows();
    let g = gain.matrix(a)?;
    let ga = &g * a;
    let spectrum = eigenvalues(&ga)?;
    let noise = &g * sigma_delta * g.transpose();
    let stable = spectrum.iter().all(|z| z.re < -0.5);
    let (sigma, verdict) = if stable {
        let sigma = match gain {
            Gain::Optimal => {
                let a_inv = invert(a)?;
                symmetrize(&(&a_inv * sigma_delta * a_inv.transpose()))
            }
            _ => solve_lyapunov(&(&ga + Matrix::identity(d, d) * 0.5), &noise)?,
        };
        (Some(sigma), Verdict::Finite)
    } else {
        let scale = noise.amax().max(f64::MIN_POSITIVE);
        let excited = spectrum.iter().filter(|z| z.re >= -0.5).any(|z| {
            let v = left_eigenvector(&ga, *z);
            let nc = noise.map(|x| Complex::new(x, 0.0));
            let q = (v.adjoint() * nc * &v)[(0, 0)].re;
            q > 1e-12 * scale * v.norm_squared()
        });
        (None, if excited { Verdict::Infinite } else { Verdict::Undetermined })
    };
    Ok(CovarianceReport {
        a: a.clone(),
        sigma_delta: sigma_delta.clone(),
        gain: gain.label(),
        gain_matrix: g,
        sigma,
        spectrum,
        verdict,
    })
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub g: f64,
    pub trace: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct GainSweep {
    /// `g* = max_i −1/(2 Re λ_i(A))`; infinite when `A` is not Hurwitz.
    pub g_star: f64,
    pub points: Vec<SweepPoint>,
}

impl GainSweep {
    /// CSV with columns `g, trace, verdict`; the trace is empty unless finite.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["g", "trace", "verdict"])?;
        for p in &self.points {
            w.write_record([p.g.to_string(), p.trace.map_or(String::new(), |t| t.to_string()), p.verdict.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `g* = max_i −1/(2 Re λ_i(A))`.
pub fn gain_threshold(a: &Matrix) -> Result<f64> {
    let spec = eigenvalues(a)?;
    if spec.max_real() >= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(spec.iter().map(|z| -1.0 / (2.0 * z.re)).fold(0.0, f64::max))
}

pub fn scalar_gain_sweep(a: &Matrix, sigma_delta: &Matrix, grid: &[f64]) -> Result<GainSweep> {
    if grid.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::InvalidConfig("gain grid must be positive".into()));
    }
    let g_star = gain_threshold(a)?;
    let points = grid
        .iter()
        .map(|&g| {
            let r = asymptotic_cov(a, sigma_delta, &Gain::Scalar(g))?;
            Ok(SweepPoint { g, trace: r.trace(), verdict: r.verdict })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GainSweep { g_star, points })
}

/// Perron-Frobenius certificate that some eigenvalue of `A` sits at or
/// above `−(1−β) max ϖ`.
#[derive(Debug, Clone)]
pub struct PfCertificate {
    /// Perron root of `−A⁻¹ = (1−β)⁻¹ T Π⁻¹`.
    pub lambda_pf: f64,
    /// Positive right Perron vector, unit sum; also a right eigenvector of `A`.
    pub v: Vector,
    /// Positive left Perron vector, unit sum: `wᵀA = λ wᵀ`, so `wᵀθ̃` is the
    /// slow scalar mode of the linearized recursion.
    pub w: Vector,
    /// The induced eigenvalue `−1/λ_PF` of `A`.
    pub eigenvalue: f64,
    /// `−(1−β) max ϖ`.
    pub bound: f64,
    /// `v > 0` entrywise and `eigenvalue ≥ bound`.
    pub holds: bool,
    /// `T = (1−β)(I − βPS_{φ*})⁻¹`, a transition matrix.
    pub t: Matrix,
}

pub fn pf_certificate(mdp: &FiniteMdp, behavior: &BehaviorPolicy) -> Result<PfCertificate> {
    let lin = linearization_a(mdp, behavior)?;
    let beta = mdp.beta();
    let d = mdp.n_pairs();
    let (_, ps) = mdp.policy_matrices(&crate::mdp::Policy::Deterministic(lin.policy.clone()))?;
    let t = invert(&(Matrix::identity(d, d) - ps * beta))? * (1.0 - beta);
    let mut m = &t / (1.0 - beta);
    for j in 0..d {
        m.column_mut(j).scale_mut(1.0 / lin.pi[j]);
    }
    // Rounding can leave entries that are exactly zero slightly negative.
    let tiny = 1e-12 * m.amax();
    if m.iter().any(|x| *x < -tiny) {
        return Err(Error::DimensionMismatch("−A⁻¹ has negative entries".into()));
    }
    let m = m.map(|x| x.max(0.0));
    let (lambda_pf, v) = perron_eigenpair(&m, 1e-12, 1_000_000)?;
    let (_, w) = perron_eigenpair(&m.transpose(), 1e-12, 1_000_000)?;
    let eigenvalue = -1.0 / lambda_pf;
    let bound = -(1.0 - beta) * lin.pi.max();
    let holds = v.iter().all(|x| *x > 0.0) && eigenvalue >= bound;
    Ok(PfCertificate { lambda_pf, v, w, eigenvalue, bound, holds, t })
}
