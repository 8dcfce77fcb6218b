//! Seeded trial ensembles, batch-means statistics, Bellman-error bands and
//! histograms.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::FiniteMdp;
use crate::numerics::{Matrix, Vector};
use crate::qlearn::{
    run_learner, Basis, BehaviorPolicy, OdZapQ, PairSampler, ProjectionBox, QLearner, Rpj, Speedy, Watkins, ZapQ,
};
use crate::sa::StepSchedule;

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Rayon worker pool; equivalent to `Sequential` without the `parallel` feature.
    Parallel,
    Sequential,
}

impl Default for ExecutionMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecutionMode::Parallel
        } else {
            ExecutionMode::Sequential
        }
    }
}

/// `(0..n).map(f)`, possibly on the worker pool; output is in index order.
pub fn map_indexed<T, F>(mode: ExecutionMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecutionMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Cap the global worker pool. Only the first call has an effect.
pub fn configure_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidConfig("thread count must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

/// Generator for trial `index`: ChaCha8 keyed by the master seed, with the
/// trial index as its stream id, so trials never share a keystream.
pub fn trial_rng(master: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// `{10², 10³, …}` up to and including `steps` where it lands on a power of ten.
pub fn log_grid(steps: u64) -> Vec<u64> {
    let mut grid = Vec::new();
    let mut n = 100;
    while n <= steps {
        grid.push(n);
        n *= 10;
    }
    grid
}

/// Tabular Q-learning variants runnable in an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QAlgorithm {
    /// `α_n = 1/n`.
    Watkins,
    /// `α_n = min(1, g/n)`.
    WatkinsScaled {
        g: f64,
    },
    /// `α_n = n^{−ρ}`.
    WatkinsPoly {
        rho: f64,
    },
    Rpj,
    Speedy,
    /// `α_n = 1/n`, `γ_n = n^{−ρ}`.
    Zap {
        rho: f64,
    },
    /// `γ_n = α_n = 1/n`.
    ZapSingle,
    /// Batches of `batch` samples; `γ_j = j^{−ρ}` per sample, `α_i = 1/i` per batch.
    OdZap {
        batch: usize,
        rho: f64,
    },
}

impl QAlgorithm {
    pub fn name(&self) -> &'static str {
        match self {
            QAlgorithm::Watkins => "watkins",
            QAlgorithm::WatkinsScaled { .. } => "watkins_scaled",
            QAlgorithm::WatkinsPoly { .. } => "watkins_poly",
            QAlgorithm::Rpj => "rpj",
            QAlgorithm::Speedy => "speedy",
            QAlgorithm::Zap { .. } => "zap",
            QAlgorithm::ZapSingle => "zap_single",
            QAlgorithm::OdZap { .. } => "od_zap",
        }
    }

    pub fn build<'a>(&self, mdp: &'a FiniteMdp, theta0: Vector, clip: Option<ProjectionBox>) -> Result<Box<dyn QLearner + 'a>> {
        let tab = || Basis::tabular(mdp);
        Ok(match self {
            QAlgorithm::Watkins => Box::new(Watkins::new(mdp, theta0, StepSchedule::harmonic(), clip)?),
            QAlgorithm::WatkinsScaled { g } => Box::new(Watkins::new(mdp, theta0, StepSchedule::scaled_harmonic(*g)?, clip)?),
            QAlgorithm::WatkinsPoly { rho } => Box::new(Watkins::new(mdp, theta0, StepSchedule::power(*rho)?, clip)?),
            QAlgorithm::Rpj => Box::new(Rpj::new(mdp, theta0, clip)?),
            QAlgorithm::Speedy => Box::new(Speedy::new(mdp, theta0)?),
            QAlgorithm::Zap { rho } => {
                Box::new(ZapQ::new(mdp, tab(), theta0, StepSchedule::harmonic(), StepSchedule::power(*rho)?, 0.0)?)
            }
            QAlgorithm::ZapSingle => {
                Box::new(ZapQ::new(mdp, tab(), theta0, StepSchedule::harmonic(), StepSchedule::harmonic(), 0.0)?)
            }
            QAlgorithm::OdZap { batch, rho } => {
                Box::new(OdZapQ::new(mdp, tab(), theta0, *batch, StepSchedule::harmonic(), StepSchedule::power(*rho)?)?)
            }
        })
    }
}

/// What each trial runs and how it starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialSpec {
    pub algorithm: QAlgorithm,
    /// `θ₀` is uniform on `[lo, hi]^d`.
    pub theta0_box: [f64; 2],
    pub clip: Option<ProjectionBox>,
}

impl TrialSpec {
    /// Initialization box by discount factor: `±10⁴` for `β ≥ 0.9`, `±10³` below.
    pub fn default_box(beta: f64) -> [f64; 2] {
        if beta >= 0.9 {
            [-1e4, 1e4]
        } else {
            [-1e3, 1e3]
        }
    }

    pub fn new(algorithm: QAlgorithm, beta: f64) -> Self {
        TrialSpec { algorithm, theta0_box: Self::default_box(beta), clip: None }
    }
}

/// Snapshots of `N` independent runs on a common grid of step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEnsemble {
    pub seed: u64,
    pub grid: Vec<u64>,
    /// `snapshots[i][k]` is trial `i` at step `grid[k]`.
    pub snapshots: Vec<Vec<Vector>>,
    pub theta0: Vec<Vector>,
}

impl TrialEnsemble {
    pub fn n_trials(&self) -> usize {
        self.snapshots.len()
    }

    pub fn at(&self, n: u64) -> Result<Vec<&Vector>> {
        let k = self.grid.iter().position(|g| *g == n).ok_or(Error::SnapshotMissing(n))?;
        Ok(self.snapshots.iter().map(|s| &s[k]).collect())
    }
}

fn check_grid(grid: &[u64], steps: u64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("snapshot grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] == 0 {
        return Err(Error::InvalidConfig("snapshot grid must be positive and strictly increasing".into()));
    }
    if *grid.last().unwrap() > steps {
        return Err(Error::InvalidConfig(format!("snapshot {} exceeds the run length {steps}", grid.last().unwrap())));
    }
    Ok(())
}

/// Run `n_trials` independent learners under the uniform behaviour policy.
/// Trial `i` draws `θ₀`, the initial state and its sample path from
/// [`trial_rng`]`(seed, i)`.
pub fn run_trials(
    mdp: &FiniteMdp,
    spec: &TrialSpec,
    n_trials: usize,
    steps: u64,
    grid: &[u64],
    seed: u64,
    mode: ExecutionMode,
) -> Result<TrialEnsemble> {
    if n_trials < 2 {
        return Err(Error::InvalidConfig(format!("an ensemble needs at least 2 trials, got {n_trials}")));
    }
    check_grid(grid, steps)?;
    let [lo, hi] = spec.theta0_box;
    if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidConfig(format!("bad initialization box [{lo}, {hi}]")));
    }
    spec.algorithm.build(mdp, Vector::zeros(mdp.n_pairs()), spec.clip)?;
    let sampler = PairSampler::new(mdp, BehaviorPolicy::uniform(mdp));
    let runs = map_indexed(mode, n_trials, |i| -> Result<(Vector, Vec<Vector>)> {
        let mut rng = trial_rng(seed, i as u64);
        let theta0 = Vector::from_fn(mdp.n_pairs(), |_, _| if lo == hi { lo } else { rng.random_range(lo..=hi) });
        let x0 = rng.random_range(0..mdp.n_states());
        let mut learner = spec.algorithm.build(mdp, theta0.clone(), spec.clip)?;
        let mut snaps = Vec::with_capacity(grid.len());
        let mut next = 0;
        run_learner(learner.as_mut(), &sampler, x0, steps, &mut rng, |n, l| {
            if next < grid.len() && grid[next] == n {
                snaps.push(l.estimate().clone());
                next += 1;
            }
        })?;
        Ok((theta0, snaps))
    });
    let mut theta0 = Vec::with_capacity(n_trials);
    let mut snapshots = Vec::with_capacity(n_trials);
    for r in runs {
        let (t0, s) = r?;
        theta0.push(t0);
        snapshots.push(s);
    }
    Ok(TrialEnsemble { seed, grid: grid.to_vec(), snapshots, theta0 })
}

/// `W^i = √n (θ^i − θ̄)` as rows, with the sample covariance (divisor `N−1`).
pub fn w_statistics(thetas: &[&Vector], n: u64) -> Result<(Matrix, Matrix)> {
    let m = thetas.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!("{m} trials; need at least 2")));
    }
    let d = thetas[0].len();
    let mean = thetas.iter().fold(Vector::zeros(d), |acc, t| acc + *t) / m as f64;
    let scale = (n as f64).sqrt();
    let w = Matrix::from_fn(m, d, |i, k| scale * (thetas[i][k] - mean[k]));
    let cov = w.transpose() * &w / (m - 1) as f64;
    Ok((w, cov))
}

pub fn batch_means_w(ensemble: &TrialEnsemble, n: u64) -> Result<(Matrix, Matrix)> {
    w_statistics(&ensemble.at(n)?, n)
}

/// Per-trial maximal Bellman error at each snapshot with mean ± 2σ bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BellmanTrack {
    pub grid: Vec<u64>,
    /// `per_trial[i][k]`.
    pub per_trial: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BellmanTrack {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "mean", "lower", "upper"])?;
        for k in 0..self.grid.len() {
            w.write_record([
                self.grid[k].to_string(),
                self.mean[k].to_string(),
                self.lower[k].to_string(),
                self.upper[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample mean and standard deviation (divisor `N−1`, zero for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn bellman_error_track(ensemble: &TrialEnsemble, mdp: &FiniteMdp) -> Result<BellmanTrack> {
    if ensemble.snapshots.iter().flatten().any(|t| t.len() != mdp.n_pairs()) {
        return Err(Error::DimensionMismatch("Bellman error needs tabular snapshots".into()));
    }
    let per_trial: Vec<Vec<f64>> =
        ensemble.snapshots.iter().map(|s| s.iter().map(|t| mdp.bellman_error(t).1).collect()).collect();
    let (mut mean, mut lower, mut upper) = (vec![], vec![], vec![]);
    for k in 0..ensemble.grid.len() {
        let col: Vec<f64> = per_trial.iter().map(|r| r[k]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        lower.push(m - 2.0 * s);
        upper.push(m + 2.0 * s);
    }
    Ok(BellmanTrack { grid: ensemble.grid.clone(), per_trial, mean, lower, upper })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Counts normalized to a probability density.
    pub fn density(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().zip(self.edges.windows(2)).map(|(c, w)| *c as f64 / (total * (w[1] - w[0]))).collect()
    }

    /// `N(mean, var)` density at the bin centers.
    pub fn gaussian_overlay(&self, mean: f64, var: f64) -> Vec<f64> {
        let norm = (2.0 * std::f64::consts::PI * var).sqrt();
        self.centers().iter().map(|x| (-(x - mean) * (x - mean) / (2.0 * var)).exp() / norm).collect()
    }

    /// Columns `lo, hi, count, density`, plus `gaussian` when an overlay is given.
    pub fn write_csv<W: Write>(&self, out: W, overlay: Option<&[f64]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["lo", "hi", "count", "density"];
        if overlay.is_some() {
            header.push("gaussian");
        }
        w.write_record(&header)?;
        let dens = self.density();
        for k in 0..self.counts.len() {
            let mut row =
                vec![self.edges[k].to_string(), self.edges[k + 1].to_string(), self.counts[k].to_string(), dens[k].to_string()];
            if let Some(g) = overlay {
                row.push(g[k].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Equal-width bins over `range`, or over the data span when `None`. Values
/// on the upper edge go to the last bin; values outside the range are dropped.
pub fn histogram(values: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::InsufficientData("histogram of no values".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("histogram needs at least one bin".into()));
    }
    let (mut lo, mut hi) =
        range.unwrap_or_else(|| values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v))));
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidConfig(format!("bad histogram range [{lo}, {hi}]")));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for v in values {
        if *v < lo || *v > hi {
            continue;
        }
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}
