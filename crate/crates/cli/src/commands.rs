use rand::Rng;
use serde_json::json;
use zapsa::bench::{
    batch_means_w, bellman_error_track, histogram, map_indexed, run_trials, trial_rng, w_statistics, ExecutionMode, QAlgorithm,
};
use zapsa::covariance::{
    asymptotic_cov, gain_threshold, linearization_a, pf_certificate, scalar_gain_sweep, sigma_delta_tabular, CovarianceReport,
    Gain,
};
use zapsa::mdp::FiniteMdp;
use zapsa::numerics::{invert, Matrix, Vector};
use zapsa::qlearn::{c_hat, run_learner, BehaviorPolicy, PairSampler, QLearner};
use zapsa::sa::{LinearSystemStream, StepSchedule, ZapState};
use zapsa::stopping::{
    policy_value_mc, run_stopping, stopping_diagnostics, GbmStream, McConfig, StoppingAlgo, StoppingLearner, StoppingProblem,
    OUTLIER_THRESHOLDS,
};
use zapsa::td::{TdModel, TdStream};
use zapsa::{Error, Result};

use crate::config::{AlgoName, Env, RunConfig};
use crate::output::{num, opt, Output};

fn need_mdp<'a>(env: &'a Env, command: &str) -> Result<&'a FiniteMdp> {
    match env {
        Env::Mdp(m) => Ok(m),
        Env::Stopping(_) => Err(Error::InvalidConfig(format!("{command} needs a finite MDP environment"))),
    }
}

fn indexed(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{prefix}{k}")).collect()
}

fn header<'a>(fixed: &[&'a str], extra: &'a [String]) -> Vec<&'a str> {
    fixed.iter().copied().chain(extra.iter().map(String::as_str)).collect()
}

fn write_matrix(out: &mut Output, name: &str, m: &Matrix) -> Result<()> {
    let cols = indexed("c", m.ncols());
    out.table(name, &header(&[], &cols), m.row_iter().map(|r| r.iter().map(|x| num(*x)).collect()))
}

pub fn solve(cfg: &RunConfig, env: &Env, out: &mut Output) -> Result<Vec<String>> {
    let mdp = need_mdp(env, "solve")?;
    let q = mdp.solve_q_star(1e-12)?;
    let h = mdp.min_per_state(&q);
    let actions = mdp.greedy_actions(&q);
    let rows = (0..mdp.n_pairs()).map(|k| {
        let (x, u) = mdp.pair(k);
        vec![k.to_string(), x.to_string(), u.to_string(), num(mdp.cost()[k]), num(q[k])]
    });
    out.table("q_star.csv", &["pair", "state", "action", "cost", "q_star"], rows)?;
    let rows = (0..mdp.n_states()).map(|x| vec![x.to_string(), actions[x].to_string(), num(h[x])]);
    out.table("policy.csv", &["state", "action", "h_star"], rows)?;
    Ok(vec![format!(
        "β = {}, d = {}, Bellman residual {:.2e}",
        cfg.beta.unwrap_or_default(),
        mdp.n_pairs(),
        mdp.bellman_error(&q).1
    )])
}

/// Theory gain for the tabular Q-learning variants whose limit is a linear SA
/// recursion with `α_n = 1/n`.
fn q_theory_gain(algo: &QAlgorithm) -> Option<Gain> {
    match algo {
        QAlgorithm::Watkins => Some(Gain::Scalar(1.0)),
        QAlgorithm::WatkinsScaled { g } => Some(Gain::Scalar(*g)),
        QAlgorithm::Zap { .. } | QAlgorithm::ZapSingle | QAlgorithm::OdZap { .. } => Some(Gain::Optimal),
        _ => None,
    }
}

fn stopping_theory_gain(algo: &StoppingAlgo, gram: &Matrix) -> Result<Gain> {
    Ok(match algo {
        StoppingAlgo::Q0 { .. } => Gain::Scalar(1.0),
        StoppingAlgo::Gq0 { g, .. } => Gain::Matrix(invert(gram)? * *g),
        StoppingAlgo::Zap { .. } => Gain::Optimal,
    })
}

fn sweep_grid(g_star: f64, extra: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = if g_star.is_finite() && g_star > 0.0 {
        (0..=32).map(|k| g_star * 0.25 * 64f64.powf(k as f64 / 32.0)).collect()
    } else {
        (0..=32).map(|k| 10f64.powf(-1.0 + k as f64 / 8.0)).collect()
    };
    grid.push(extra);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn report_summary(r: &CovarianceReport) -> String {
    format!("{}: {} (trace {})", r.gain, r.verdict.as_str(), r.trace().map_or("∞".into(), |t| format!("{t:.6e}")))
}

fn cov_outputs(out: &mut Output, a: &Matrix, sd: &Matrix, gain: Gain, gain_scalar: f64) -> Result<Vec<String>> {
    let star = asymptotic_cov(a, sd, &Gain::Optimal)?;
    let chosen = asymptotic_cov(a, sd, &gain)?;
    let g_star = gain_threshold(a)?;
    let sweep = scalar_gain_sweep(a, sd, &sweep_grid(g_star, gain_scalar))?;
    out.csv("sweep.csv", |buf| sweep.write_csv(buf))?;
    out.json("cov_optimal.json", star.to_json())?;
    out.json("cov_gain.json", chosen.to_json())?;
    if let Some(s) = &star.sigma {
        write_matrix(out, "sigma_star.csv", s)?;
    }
    write_matrix(out, "sigma_delta.csv", sd)?;
    out.table(
        "cov_summary.csv",
        &["quantity", "value"],
        [
            vec!["g_star".into(), num(g_star)],
            vec!["trace_sigma_star".into(), opt(star.trace())],
            vec!["gain".into(), chosen.gain.clone()],
            vec!["trace_sigma_gain".into(), opt(chosen.trace())],
            vec!["verdict_gain".into(), chosen.verdict.as_str().into()],
        ],
    )?;
    Ok(vec![format!("g* = {g_star:.4}"), report_summary(&star), report_summary(&chosen)])
}

pub fn cov(cfg: &RunConfig, env: &Env, out: &mut Output) -> Result<Vec<String>> {
    match env {
        Env::Mdp(mdp) => {
            let b = BehaviorPolicy::uniform(mdp);
            let lin = linearization_a(mdp, &b)?;
            let sd = sigma_delta_tabular(mdp, &b)?;
            let mut lines = cov_outputs(out, &lin.a, &sd, Gain::Scalar(cfg.gain), cfg.gain)?;
            let pf = pf_certificate(mdp, &b)?;
            let rows = (0..mdp.n_pairs()).map(|k| {
                let (x, u) = mdp.pair(k);
                vec![k.to_string(), x.to_string(), u.to_string(), num(pf.v[k]), num(pf.w[k])]
            });
            out.table("pf_vectors.csv", &["pair", "state", "action", "v", "w"], rows)?;
            out.json(
                "pf.json",
                json!({
                    "lambda_pf": pf.lambda_pf,
                    "eigenvalue": pf.eigenvalue,
                    "bound": pf.bound,
                    "holds": pf.holds,
                }),
            )?;
            lines.push(format!(
                "PF certificate: eigenvalue {:.6} vs bound {:.6} ({})",
                pf.eigenvalue,
                pf.bound,
                if pf.holds { "holds" } else { "fails" }
            ));
            Ok(lines)
        }
        Env::Stopping(problem) => {
            let algo = cfg.stopping_algorithm()?.expect("paired in resolve");
            let steps = cfg.steps as usize;
            let theta = run_stopping(problem, &algo, steps, cfg.seed)?;
            let diag = stopping_diagnostics(problem, &theta, steps, cfg.batch, cfg.seed.wrapping_add(1))?;
            let gain = stopping_theory_gain(&algo, &diag.gram)?;
            write_matrix(out, "gram.csv", &diag.gram)?;
            out.table("theta.csv", &["k", "theta"], theta.iter().enumerate().map(|(k, t)| vec![k.to_string(), num(*t)]))?;
            cov_outputs(out, &diag.a, &diag.sigma_delta, gain, cfg.gain)
        }
    }
}

pub fn run(cfg: &RunConfig, env: &Env, out: &mut Output) -> Result<Vec<String>> {
    let grid = cfg.grid();
    match env {
        Env::Stopping(problem) => run_stopping_trajectory(cfg, problem, &grid, out),
        Env::Mdp(mdp) => match cfg.algorithm {
            AlgoName::Td | AlgoName::Lstd => run_td(cfg, mdp, &grid, out),
            _ => run_q(cfg, mdp, &grid, out),
        },
    }
}

/// Replays trial 0 of the ensemble that `bench` would run with this config.
fn run_q(cfg: &RunConfig, mdp: &FiniteMdp, grid: &[u64], out: &mut Output) -> Result<Vec<String>> {
    let spec = cfg.trial_spec().expect("Q-learning algorithm");
    let mut rng = trial_rng(cfg.seed, 0);
    let [lo, hi] = spec.theta0_box;
    let theta0 = Vector::from_fn(mdp.n_pairs(), |_, _| if lo == hi { lo } else { rng.random_range(lo..=hi) });
    let x0 = rng.random_range(0..mdp.n_states());
    let behavior = BehaviorPolicy::uniform(mdp);
    let (_, pi) = behavior.pair_chain_pmf(mdp)?;
    let sampler = PairSampler::new(mdp, behavior);
    let mut learner: Box<dyn QLearner + '_> = spec.algorithm.build(mdp, theta0, spec.clip)?;
    let mut rows = Vec::new();
    let mut failure = None;
    let mut next = 0;
    run_learner(learner.as_mut(), &sampler, x0, cfg.steps, &mut rng, |n, l| {
        if next < grid.len() && grid[next] == n {
            next += 1;
            let st = l.state();
            let c_err = if st.gain.is_invertible() {
                match c_hat(&pi, st.gain.matrix(), &st.theta) {
                    Ok(c) => Some((c - mdp.cost()).amax()),
                    Err(e) => {
                        failure.get_or_insert(e);
                        None
                    }
                }
            } else {
                None
            };
            let mut row = vec![n.to_string(), num(mdp.bellman_error(l.estimate()).1), num(st.q3_diagnostic()), opt(c_err)];
            row.extend(l.estimate().iter().map(|t| num(*t)));
            rows.push(row);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let final_b = mdp.bellman_error(learner.estimate()).1;
    let cols = indexed("theta", mdp.n_pairs());
    out.table("trajectory.csv", &header(&["n", "bellman_error", "policy_switches", "c_hat_error"], &cols), rows)?;
    Ok(vec![format!("{} on {} steps: max Bellman error {final_b:.6}", learner.name(), cfg.steps)])
}

/// TD(0)/LSTD(0) evaluation of the uniform behaviour policy on the
/// state-action chain with a tabular basis.
fn run_td(cfg: &RunConfig, mdp: &FiniteMdp, grid: &[u64], out: &mut Output) -> Result<Vec<String>> {
    let d = mdp.n_pairs();
    let (ps, _) = BehaviorPolicy::uniform(mdp).pair_chain_pmf(mdp)?;
    let model = TdModel::new(ps, mdp.cost().clone(), mdp.beta(), Matrix::identity(d, d))?;
    let value = model.value()?;
    let mut rng = trial_rng(cfg.seed, 0);
    let x0 = rng.random_range(0..d);
    let mut stream = TdStream::new(model, cfg.lambda, x0, rng);
    let alpha = StepSchedule::scaled_harmonic(cfg.gain)?;
    let mut td = ZapState::new(Vector::zeros(d));
    let (mut sum_a, mut sum_b) = (Matrix::zeros(d, d), Vector::zeros(d));
    let mut rows = Vec::new();
    let mut next = 0;
    let mut last = Vector::zeros(d);
    for n in 1..=cfg.steps {
        let s = stream.next_sample();
        if cfg.algorithm == AlgoName::Td {
            td.linear_sa_step(&s, alpha.value(n))?;
        } else {
            s.a.add_scaled_to(&mut sum_a, 1.0);
            sum_b += &s.b;
        }
        if next < grid.len() && grid[next] == n {
            next += 1;
            last = if cfg.algorithm == AlgoName::Td {
                td.theta.clone()
            } else {
                sum_a.clone().lu().solve(&sum_b).ok_or(Error::SingularMatrix)?
            };
            let mut row = vec![n.to_string(), num((&last - &value).amax())];
            row.extend(last.iter().map(|t| num(*t)));
            rows.push(row);
        }
    }
    let cols = indexed("theta", d);
    out.table("trajectory.csv", &header(&["n", "value_error"], &cols), rows)?;
    Ok(vec![format!("{} on {} steps: max value error {:.6}", cfg.algorithm_name(), cfg.steps, (&last - &value).amax())])
}

fn run_stopping_trajectory(cfg: &RunConfig, problem: &StoppingProblem, grid: &[u64], out: &mut Output) -> Result<Vec<String>> {
    let algo = cfg.stopping_algorithm()?.expect("paired in resolve");
    let mut learner = StoppingLearner::new(problem, &algo, Vector::zeros(problem.dim()))?;
    let mut stream = GbmStream::new(problem.gbm, cfg.seed)?;
    let mut x = stream.next().expect("infinite stream");
    let mut rows = Vec::new();
    let mut next = 0;
    for x_next in stream.take(cfg.steps as usize) {
        learner.step(&problem.sample(&x, &x_next))?;
        x = x_next;
        let n = learner.steps();
        if next < grid.len() && grid[next] == n {
            next += 1;
            let mut row = vec![n.to_string(), opt(learner.matrix().map(|m| m.trace()))];
            row.extend(learner.theta().iter().map(|t| num(*t)));
            rows.push(row);
        }
    }
    let cols = indexed("theta", problem.dim());
    out.table("trajectory.csv", &header(&["n", "matrix_trace"], &cols), rows)?;
    Ok(vec![format!("{} on {} steps: |θ|∞ = {:.6}", algo.name(), cfg.steps, learner.theta().amax())])
}

/// `W` samples, per-coordinate histograms with the Gaussian implied by the
/// theory covariance, and one covariance-vs-theory row.
fn w_outputs(
    cfg: &RunConfig,
    out: &mut Output,
    thetas: &[&Vector],
    n: u64,
    theory: Option<&CovarianceReport>,
) -> Result<Vec<String>> {
    let (w, cov) = w_statistics(thetas, n)?;
    let d = w.ncols();
    let cols = indexed("w", d);
    let rows = w.row_iter().enumerate().map(|(i, r)| std::iter::once(i.to_string()).chain(r.iter().map(|x| num(*x))).collect());
    out.table("w_samples.csv", &header(&["trial"], &cols), rows)?;
    write_matrix(out, "cov_empirical.csv", &cov)?;
    let sigma = theory.and_then(|r| r.sigma.as_ref());
    for k in 0..d {
        let values: Vec<f64> = w.column(k).iter().copied().collect();
        let h = histogram(&values, cfg.bins, None)?;
        let overlay = sigma.map(|s| h.gaussian_overlay(0.0, s[(k, k)]));
        out.csv(&format!("hist_w{k:02}.csv"), |buf| h.write_csv(buf, overlay.as_deref()))?;
    }
    Ok(vec![format!("n = {n}: trace n·Cov(W) = {:.6e}, theory {}", cov.trace(), theory.map_or("n/a".into(), report_summary))])
}

fn cov_row(n: u64, empirical: f64, theory: Option<&CovarianceReport>) -> Vec<String> {
    let t = theory.and_then(|r| r.trace());
    vec![
        n.to_string(),
        num(empirical),
        opt(t),
        theory.map_or("n/a".into(), |r| r.verdict.as_str().to_string()),
        opt(t.map(|t| empirical / t)),
    ]
}

const COV_HEADER: [&str; 5] = ["n", "trace_empirical", "trace_theory", "verdict", "ratio"];

pub fn bench(cfg: &RunConfig, env: &Env, out: &mut Output) -> Result<Vec<String>> {
    match env {
        Env::Mdp(mdp) => bench_q(cfg, mdp, out),
        Env::Stopping(problem) => bench_stopping(cfg, problem, out),
    }
}

fn bench_q(cfg: &RunConfig, mdp: &FiniteMdp, out: &mut Output) -> Result<Vec<String>> {
    let spec = cfg
        .trial_spec()
        .ok_or_else(|| Error::InvalidConfig(format!("bench runs Q-learning ensembles; {} is run-only", cfg.algorithm_name())))?;
    let grid = cfg.grid();
    let ens = run_trials(mdp, &spec, cfg.trials, cfg.steps, &grid, cfg.seed, ExecutionMode::default())?;
    let track = bellman_error_track(&ens, mdp)?;
    out.csv("bellman.csv", |buf| track.write_csv(buf))?;
    let rows = track
        .per_trial
        .iter()
        .enumerate()
        .flat_map(|(i, row)| grid.iter().zip(row).map(move |(n, b)| vec![i.to_string(), n.to_string(), num(*b)]));
    out.table("bellman_trials.csv", &["trial", "n", "bellman_error"], rows)?;
    let theory = match q_theory_gain(&spec.algorithm) {
        Some(gain) => {
            let b = BehaviorPolicy::uniform(mdp);
            Some(asymptotic_cov(&linearization_a(mdp, &b)?.a, &sigma_delta_tabular(mdp, &b)?, &gain)?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for &n in &grid {
        rows.push(cov_row(n, batch_means_w(&ens, n)?.1.trace(), theory.as_ref()));
    }
    out.table("cov_table.csv", &COV_HEADER, rows)?;
    let n = *grid.last().expect("validated grid");
    let mut lines = w_outputs(cfg, out, &ens.at(n)?, n, theory.as_ref())?;
    let k = grid.len() - 1;
    lines.push(format!("B̄ at n = {n}: mean {:.6}, band [{:.6}, {:.6}]", track.mean[k], track.lower[k], track.upper[k]));
    Ok(lines)
}

fn bench_stopping(cfg: &RunConfig, problem: &StoppingProblem, out: &mut Output) -> Result<Vec<String>> {
    let algo = cfg.stopping_algorithm()?.expect("paired in resolve");
    if cfg.trials < 2 {
        return Err(Error::InvalidConfig(format!("an ensemble needs at least 2 trials, got {}", cfg.trials)));
    }
    let steps = cfg.steps as usize;
    let mode = ExecutionMode::default();
    let thetas = map_indexed(mode, cfg.trials, |i| run_stopping(problem, &algo, steps, trial_rng(cfg.seed, i as u64).random()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let x0 = Vector::from_element(problem.gbm.window, 1.0);
    let mc = McConfig { n_paths: cfg.mc_paths, horizon: cfg.mc_horizon, seed: cfg.seed };
    let values = thetas.iter().map(|t| policy_value_mc(problem, t, &x0, mc, mode)).collect::<Result<Vec<_>>>()?;
    let thresholds: Vec<String> = OUTLIER_THRESHOLDS.iter().map(|t| format!("below_{t}")).collect();
    let rows = values.iter().enumerate().map(|(i, v)| {
        let mut row = vec![i.to_string(), num(v.mean)];
        row.extend(v.outliers.iter().map(|c| c.to_string()));
        row
    });
    out.table("values.csv", &header(&["trial", "value"], &thresholds), rows)?;
    let paths = (cfg.trials * cfg.mc_paths) as f64;
    let rows = OUTLIER_THRESHOLDS.iter().enumerate().map(|(j, t)| {
        let count: usize = values.iter().map(|v| v.outliers[j]).sum();
        vec![num(*t), count.to_string(), num(count as f64 / paths)]
    });
    out.table("outliers.csv", &["threshold", "paths_below", "fraction"], rows)?;
    let means: Vec<f64> = values.iter().map(|v| v.mean).collect();
    let h = histogram(&means, cfg.bins, None)?;
    out.csv("value_hist.csv", |buf| h.write_csv(buf, None))?;

    let refs: Vec<&Vector> = thetas.iter().collect();
    let mean = refs.iter().fold(Vector::zeros(problem.dim()), |acc, t| acc + *t) / refs.len() as f64;
    let diag = stopping_diagnostics(problem, &mean, steps, cfg.batch, cfg.seed.wrapping_add(1))?;
    let theory = asymptotic_cov(&diag.a, &diag.sigma_delta, &stopping_theory_gain(&algo, &diag.gram)?)?;
    let n = cfg.steps;
    out.table("cov_table.csv", &COV_HEADER, [cov_row(n, w_statistics(&refs, n)?.1.trace(), Some(&theory))])?;
    let mut lines = w_outputs(cfg, out, &refs, n, Some(&theory))?;
    let (m, s) = zapsa::bench::mean_std(&means);
    lines.push(format!("policy value over {} trials: mean {m:.6}, std {s:.6}", cfg.trials));
    Ok(lines)
}
