//! Small dense linear-algebra kernel.
//!
//! Everything here works on `nalgebra` dynamic matrices. Problems in this
//! crate are tiny (d = 18 for the six-state model, d = 10 for the stopping
//! basis), so all routines are dense and allocation-happy.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type Complex64 = Complex<f64>;

/// Eigenvalues of a square matrix, in no particular order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum(pub Vec<Complex64>);

impl Spectrum {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Complex64> {
        self.0.iter()
    }

    /// Largest real part, `-inf` for an empty spectrum.
    pub fn max_real(&self) -> f64 {
        self.0.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.0.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
    }

    /// Real parts sorted ascending.
    pub fn sorted_real_parts(&self) -> Vec<f64> {
        let mut re: Vec<f64> = self.0.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        re
    }
}

pub(crate) fn ensure_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!("{what} must be square and non-empty, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!("{what} has non-finite entries")))
    }
}

/// Infinity norm (maximum absolute row sum).
pub fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Solve `F Σ + Σ Fᵀ + S = 0` for a Hurwitz `F`.
///
/// Bartels-Stewart on the complex Schur form of `F`: with `F = U T U*` the
/// equation becomes `T Y + Y T* = -U* S U`, which is solved entry by entry
/// by back substitution since `T` is upper triangular.
pub fn solve_lyapunov(f: &Matrix, s: &Matrix) -> Result<Matrix> {
    let d = ensure_square(f, "F")?;
    if s.nrows() != d || s.ncols() != d {
        return Err(Error::DimensionMismatch(format!("S is {}x{}, F is {d}x{d}", s.nrows(), s.ncols())));
    }
    ensure_finite(f, "F")?;
    ensure_finite(s, "S")?;

    let (u, t) = complex_schur(f)?;

    let max_real = (0..d).map(|i| t[(i, i)].re).fold(f64::NEG_INFINITY, f64::max);
    if max_real >= 0.0 {
        return Err(Error::NotHurwitz { max_real });
    }

    let sc: DMatrix<Complex64> = s.map(|x| Complex64::new(x, 0.0));
    let c = u.adjoint() * sc * &u;
    let mut y = DMatrix::<Complex64>::zeros(d, d);
    for j in (0..d).rev() {
        for i in (0..d).rev() {
            let mut acc = -c[(i, j)];
            for k in i + 1..d {
                acc -= t[(i, k)] * y[(k, j)];
            }
            for k in j + 1..d {
                acc -= y[(i, k)] * t[(j, k)].conj();
            }
            y[(i, j)] = acc / (t[(i, i)] + t[(j, j)].conj());
        }
    }
    let sigma = (&u * y * u.adjoint()).map(|z| z.re);
    Ok(symmetrize(&sigma))
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Residual `‖F Σ + Σ Fᵀ + S‖∞`.
pub fn lyapunov_residual(f: &Matrix, sigma: &Matrix, s: &Matrix) -> f64 {
    norm_inf(&(f * sigma + sigma * f.transpose() + s))
}

/// Complex Schur form `M = U T U*`.
///
/// QR iteration at machine-precision deflation can stall on matrices with
/// clustered eigenvalues; a few ulps of slack usually resolves it. A matrix
/// close to a multiple of the identity (such as `−A⁻¹A`) defeats the shifts
/// entirely, so as a last resort the form is computed for `(M − cI)/s` with
/// `c = tr M / d` and `s = ‖M − cI‖_F`, which has the same Schur vectors and a
/// well-spread spectrum, and mapped back through `T = s T' + cI`.
fn complex_schur(m: &Matrix) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let d = m.nrows();
    let budget = 100 * d.max(1);
    let ladder = |mc: &DMatrix<Complex64>| {
        [1.0, 4.0, 16.0, 64.0].iter().find_map(|k| Schur::try_new(mc.clone(), f64::EPSILON * k, budget)).map(|s| s.unpack())
    };
    let mc: DMatrix<Complex64> = m.map(|x| Complex64::new(x, 0.0));
    if let Some(ut) = ladder(&mc) {
        return Ok(ut);
    }
    let c = m.trace() / d as f64;
    let centered = m - Matrix::identity(d, d) * c;
    let scale = centered.norm();
    if scale == 0.0 {
        return Ok((DMatrix::identity(d, d), mc));
    }
    let (u, t) = ladder(&(centered / scale).map(|x| Complex64::new(x, 0.0))).ok_or(Error::ConvergenceFailure { budget })?;
    Ok((u, t * Complex64::new(scale, 0.0) + DMatrix::identity(d, d) * Complex64::new(c, 0.0)))
}

pub fn eigenvalues(m: &Matrix) -> Result<Spectrum> {
    ensure_square(m, "M")?;
    ensure_finite(m, "M")?;
    let (_, t) = complex_schur(m)?;
    Ok(Spectrum(t.diagonal().iter().copied().collect()))
}

/// Given `M⁻¹`, return the inverse of `(1-γ) M + γ u vᵀ`.
///
/// Uses Sherman-Morrison in the scaled form
/// `M'⁻¹ = (M⁻¹ - γ M⁻¹u vᵀM⁻¹ / ((1-γ) + γ vᵀM⁻¹u)) / (1-γ)`.
pub fn rank1_inverse_update(m_inv: &Matrix, u: &Vector, v: &Vector, gamma: f64) -> Result<Matrix> {
    let mut out = m_inv.clone();
    rank1_inverse_update_in_place(&mut out, u, v, gamma)?;
    Ok(out)
}

/// In-place form of [`rank1_inverse_update`]. On error `m_inv` is untouched.
pub fn rank1_inverse_update_in_place(m_inv: &mut Matrix, u: &Vector, v: &Vector, gamma: f64) -> Result<()> {
    let d = ensure_square(m_inv, "M_inv")?;
    if u.len() != d || v.len() != d {
        return Err(Error::DimensionMismatch(format!("u has {} and v has {} entries, expected {d}", u.len(), v.len())));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidSchedule(format!("rank-one update needs gamma in [0,1), got {gamma}")));
    }
    if gamma == 0.0 {
        return Ok(());
    }
    let w = &*m_inv * u;
    let z = m_inv.tr_mul(v);
    let denominator = (1.0 - gamma) + gamma * v.dot(&w);
    if denominator.abs() < 1e-12 {
        return Err(Error::NumericBreakdown { denominator });
    }
    m_inv.ger(-gamma / denominator, &w, &z, 1.0);
    *m_inv /= 1.0 - gamma;
    Ok(())
}

/// Default projection threshold `1e-8 · max(1, ‖Â‖₂)`.
pub fn default_projection_eps(spectral_norm: f64) -> f64 {
    1e-8 * spectral_norm.max(1.0)
}

/// Result of a projected inversion, with the diagnostics callers need to
/// decide whether the projection was active.
#[derive(Debug, Clone)]
pub struct ProjectedInverse {
    pub inverse: Matrix,
    pub min_singular: f64,
    pub max_singular: f64,
    pub clamped: bool,
}

/// `[Â]⁻¹` where `[Â]` clamps the singular values of `Â` below by `eps`.
///
/// When no clamping is needed this is the ordinary inverse.
pub fn projected_inverse(a: &Matrix, eps: f64) -> Matrix {
    projected_inverse_with_info(a, eps).inverse
}

pub fn projected_inverse_with_info(a: &Matrix, eps: f64) -> ProjectedInverse {
    assert!(eps > 0.0, "projection threshold must be positive");
    projected_inverse_by(a, |_| eps)
}

/// Projected inverse with the threshold [`default_projection_eps`] of `‖Â‖₂`.
pub fn projected_inverse_default(a: &Matrix) -> ProjectedInverse {
    projected_inverse_by(a, default_projection_eps)
}

struct Svd {
    u: Matrix,
    singular_values: Vector,
    v_t: Matrix,
}

impl Svd {
    fn residual(&self, a: &Matrix) -> f64 {
        (&self.u * Matrix::from_diagonal(&self.singular_values) * &self.v_t - a).amax()
    }
}

/// SVD that checks its own reconstruction.
///
/// The default bidiagonal sweep occasionally returns orthonormal factors that
/// do not reproduce a sparse rank-deficient input. Those cases are retried on
/// the transpose and with a tighter convergence tolerance, keeping the most
/// accurate factorization.
fn checked_svd(a: &Matrix) -> Svd {
    let tol = 1e-12 * a.amax().max(f64::MIN_POSITIVE);
    let direct = |m: Matrix, eps: f64| {
        nalgebra::linalg::SVD::try_new(m, true, true, eps, 0).map(|s| Svd {
            u: s.u.expect("svd computed with u"),
            singular_values: s.singular_values,
            v_t: s.v_t.expect("svd computed with v_t"),
        })
    };
    let transposed = |eps: f64| {
        direct(a.transpose(), eps).map(|s| Svd { u: s.v_t.transpose(), singular_values: s.singular_values, v_t: s.u.transpose() })
    };
    let mut best: Option<(f64, Svd)> = None;
    let attempts: [&dyn Fn() -> Option<Svd>; 4] = [
        &|| direct(a.clone(), f64::EPSILON * 5.0),
        &|| transposed(f64::EPSILON * 5.0),
        &|| direct(a.clone(), f64::EPSILON),
        &|| transposed(f64::EPSILON),
    ];
    for attempt in attempts {
        if let Some(svd) = attempt() {
            let r = svd.residual(a);
            if r <= tol {
                return svd;
            }
            if best.as_ref().is_none_or(|(b, _)| r < *b) {
                best = Some((r, svd));
            }
        }
    }
    best.expect("unbounded svd iteration always returns").1
}

fn projected_inverse_by(a: &Matrix, eps_of_norm: impl Fn(f64) -> f64) -> ProjectedInverse {
    let svd = checked_svd(a);
    let sv = &svd.singular_values;
    let min_singular = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let max_singular = sv.iter().copied().fold(0.0, f64::max);
    let eps = eps_of_norm(max_singular);
    if min_singular >= eps {
        if let Some(inv) = a.clone().try_inverse() {
            return ProjectedInverse { inverse: inv, min_singular, max_singular, clamped: false };
        }
    }
    let inv_sv = sv.map(|s| 1.0 / s.max(eps));
    let inverse = svd.v_t.transpose() * Matrix::from_diagonal(&inv_sv) * svd.u.transpose();
    ProjectedInverse { inverse, min_singular, max_singular, clamped: true }
}

/// Inverse-CDF sampling from the rows of a row-stochastic matrix.
#[derive(Debug, Clone)]
pub struct RowSampler {
    cdf: Vec<Vec<f64>>,
}

impl RowSampler {
    pub fn new(p: &Matrix) -> Self {
        let cdf = p
            .row_iter()
            .map(|r| {
                let mut acc = 0.0;
                r.iter()
                    .map(|q| {
                        acc += q;
                        acc
                    })
                    .collect()
            })
            .collect();
        RowSampler { cdf }
    }

    /// Column index drawn from row `row`.
    pub fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        let c = &self.cdf[row];
        let u: f64 = rng.random::<f64>() * c[c.len() - 1];
        c.partition_point(|v| *v <= u).min(c.len() - 1)
    }
}

/// Plain inverse, `SingularMatrix` on failure.
pub fn invert(m: &Matrix) -> Result<Matrix> {
    ensure_square(m, "matrix")?;
    m.clone().try_inverse().ok_or(Error::SingularMatrix)
}

/// Validate that `p` is square, non-negative and has unit row sums.
pub fn check_row_stochastic(p: &Matrix, tol: f64) -> Result<()> {
    ensure_square(p, "P")?;
    for (i, row) in p.row_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite() || *x < -tol) {
            return Err(Error::NotStochastic(format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::NotStochastic(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Invariant pmf `ϖ` of an irreducible row-stochastic matrix.
///
/// Solves `ϖ (P - I) = 0, Σϖ = 1` densely, then polishes with a few power
/// steps `ϖ ← ϖP`.
pub fn stationary_pmf(p: &Matrix) -> Result<Vector> {
    let n = ensure_square(p, "P")?;
    check_row_stochastic(p, 1e-9)?;

    // (Pᵀ - I) ϖ = 0 with the last equation replaced by Σϖ = 1.
    let mut system = p.transpose() - Matrix::identity(n, n);
    let mut rhs = Vector::zeros(n);
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let mut pi = system.lu().solve(&rhs).ok_or(Error::Reducible { index: 0 })?;

    let pt = p.transpose();
    for _ in 0..8 {
        let next = &pt * &pi;
        let s = next.sum();
        let next = next / s;
        let delta = (&next - &pi).amax();
        pi = next;
        if delta <= 1e-15 {
            break;
        }
    }
    let scale = n as f64 * f64::EPSILON * 16.0;
    for (i, x) in pi.iter_mut().enumerate() {
        if *x <= scale {
            return Err(Error::Reducible { index: i });
        }
    }
    let s = pi.sum();
    Ok(pi / s)
}

/// Perron-Frobenius eigenpair of a non-negative matrix by power iteration.
///
/// Returns `(λ_PF, v)` with `v` normalised to unit sum. Iterates until the
/// sup-norm change of the normalised vector falls below `tol`.
pub fn perron_eigenpair(m: &Matrix, tol: f64, max_iter: usize) -> Result<(f64, Vector)> {
    let n = ensure_square(m, "M")?;
    if m.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::DimensionMismatch("Perron iteration needs a non-negative finite matrix".into()));
    }
    let mut v = Vector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iter {
        let w = m * &v;
        let s = w.sum();
        if s <= 0.0 {
            return Err(Error::SingularMatrix);
        }
        let next = w / s;
        let delta = (&next - &v).amax();
        v = next;
        // v had unit sum, so Σ(Mv) is the eigenvalue estimate.
        if delta <= tol {
            return Ok((s, v));
        }
    }
    Err(Error::ConvergenceFailure { budget: max_iter })
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}
