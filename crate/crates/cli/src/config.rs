use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zapsa::bench::{log_grid, QAlgorithm, TrialSpec};
use zapsa::mdp::{build_six_state, FiniteMdp, SixStateConfig};
use zapsa::qlearn::ProjectionBox;
use zapsa::stopping::{GbmParams, StoppingAlgo, StoppingProblem};
use zapsa::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum AlgoName {
    Watkins,
    WatkinsScaled,
    WatkinsPoly,
    Rpj,
    Speedy,
    Zap,
    ZapSingle,
    OdZap,
    Td,
    Lstd,
    Q0,
    Gq0,
    ZapStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    SixState {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges: Option<Vec<[usize; 2]>>,
    },
    /// A JSON model file as written by `FiniteMdp::save`.
    File { path: PathBuf },
    Stopping {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gbm: Option<GbmParams>,
    },
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::SixState { edges: None }
    }
}

/// Everything a run depends on. Unset optional fields are filled in by
/// [`RunConfig::resolve`] so the recorded config is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub algorithm: AlgoName,
    pub beta: Option<f64>,
    /// Scalar gain `g` (scaled Watkins, TD, G-Q(0)).
    pub gain: f64,
    /// Exponent of `γ_n = n^{−ρ}` (Zap) or `α_n = n^{−ρ}` (polynomial Watkins).
    pub rho: f64,
    /// Offset in `α_n = 1/(b + n)` for G-Q(0).
    pub b: f64,
    /// Batch length for O(d) Zap and for batch-means `Σ_Δ` estimates.
    pub batch: usize,
    pub lambda: f64,
    pub steps: u64,
    pub trials: usize,
    pub seed: u64,
    pub grid: Option<Vec<u64>>,
    pub theta0_box: Option<[f64; 2]>,
    pub clip: Option<ProjectionBox>,
    pub bins: usize,
    pub mc_paths: usize,
    pub mc_horizon: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::default(),
            algorithm: AlgoName::Zap,
            beta: None,
            gain: 70.0,
            rho: 0.85,
            b: 1e4,
            batch: 100,
            lambda: 0.0,
            steps: 100_000,
            trials: 100,
            seed: 0,
            grid: None,
            theta0_box: None,
            clip: None,
            bins: 40,
            mc_paths: 200,
            mc_horizon: 2_000,
            out: PathBuf::from("out"),
        }
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub steps: Option<u64>,
    pub algorithm: Option<AlgoName>,
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    pub gain: Option<f64>,
}

/// A loaded model, after the discount factor has been applied.
#[derive(Debug)]
pub enum Env {
    Mdp(FiniteMdp),
    Stopping(StoppingProblem),
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl RunConfig {
    /// Read a config file; a run manifest is accepted too, in which case its
    /// recorded config is used.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if value.get("manifest_version").is_some() {
            value = value["config"].take();
        }
        serde_json::from_value(value).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: Overrides) {
        if let Some(v) = o.out {
            self.out = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.trials {
            self.trials = v;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.algorithm {
            self.algorithm = v;
        }
        if o.beta.is_some() {
            self.beta = o.beta;
        }
        if let Some(v) = o.rho {
            self.rho = v;
        }
        if let Some(v) = o.gain {
            self.gain = v;
        }
    }

    /// Validate, load the environment and pin every defaulted field.
    pub fn resolve(&mut self) -> Result<Env> {
        if self.steps == 0 {
            return Err(config_err("steps must be positive"));
        }
        if self.bins == 0 {
            return Err(config_err("bins must be positive"));
        }
        for (name, v) in [("gain", self.gain), ("rho", self.rho), ("b", self.b), ("lambda", self.lambda)] {
            if !v.is_finite() {
                return Err(config_err(format!("{name} must be finite")));
            }
        }
        let env = match &self.env {
            EnvConfig::SixState { edges } => {
                let mut cfg = SixStateConfig { beta: self.beta.unwrap_or(0.8), ..Default::default() };
                if let Some(e) = edges {
                    cfg.edges = e.clone();
                }
                Env::Mdp(build_six_state(&cfg)?)
            }
            EnvConfig::File { path } => {
                let mdp = FiniteMdp::load(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                Env::Mdp(match self.beta {
                    Some(beta) => mdp.with_beta(beta)?,
                    None => mdp,
                })
            }
            EnvConfig::Stopping { gbm } => {
                let mut p = StoppingProblem::default();
                if let Some(g) = gbm {
                    p.gbm = *g;
                }
                if let Some(beta) = self.beta {
                    p.beta = beta;
                }
                p.validate()?;
                Env::Stopping(p)
            }
        };
        let beta = match &env {
            Env::Mdp(m) => m.beta(),
            Env::Stopping(p) => p.beta,
        };
        self.beta = Some(beta);
        if self.grid.is_none() {
            let mut grid = log_grid(self.steps);
            if grid.last() != Some(&self.steps) {
                grid.push(self.steps);
            }
            self.grid = Some(grid);
        }
        let grid = self.grid.as_deref().unwrap_or_default();
        if grid.is_empty() || grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) || grid[grid.len() - 1] > self.steps {
            return Err(config_err("grid must be non-empty, positive, strictly increasing and within the run length"));
        }
        if self.theta0_box.is_none() {
            self.theta0_box = Some(TrialSpec::default_box(beta));
        }
        let stopping_algo = matches!(self.algorithm, AlgoName::Q0 | AlgoName::Gq0 | AlgoName::ZapStopping);
        if stopping_algo != matches!(env, Env::Stopping(_)) {
            let kind = if stopping_algo { "the stopping environment" } else { "a finite MDP environment" };
            return Err(config_err(format!("algorithm {:?} needs {kind}", self.algorithm_name())));
        }
        Ok(env)
    }

    pub fn algorithm_name(&self) -> String {
        self.algorithm.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
    }

    pub fn grid(&self) -> Vec<u64> {
        self.grid.clone().unwrap_or_else(|| vec![self.steps])
    }

    /// The Q-learning variant, or `None` for TD / stopping algorithms.
    pub fn q_algorithm(&self) -> Option<QAlgorithm> {
        Some(match self.algorithm {
            AlgoName::Watkins => QAlgorithm::Watkins,
            AlgoName::WatkinsScaled => QAlgorithm::WatkinsScaled { g: self.gain },
            AlgoName::WatkinsPoly => QAlgorithm::WatkinsPoly { rho: self.rho },
            AlgoName::Rpj => QAlgorithm::Rpj,
            AlgoName::Speedy => QAlgorithm::Speedy,
            AlgoName::Zap => QAlgorithm::Zap { rho: self.rho },
            AlgoName::ZapSingle => QAlgorithm::ZapSingle,
            AlgoName::OdZap => QAlgorithm::OdZap { batch: self.batch, rho: self.rho },
            _ => return None,
        })
    }

    pub fn stopping_algorithm(&self) -> Result<Option<StoppingAlgo>> {
        Ok(Some(match self.algorithm {
            AlgoName::Q0 => StoppingAlgo::q0(),
            AlgoName::Gq0 => StoppingAlgo::Gq0 { g: self.gain, b: self.b },
            AlgoName::ZapStopping => StoppingAlgo::zap(self.rho)?,
            _ => return Ok(None),
        }))
    }

    pub fn trial_spec(&self) -> Option<TrialSpec> {
        let algorithm = self.q_algorithm()?;
        let beta = self.beta.unwrap_or(0.8);
        Some(TrialSpec { algorithm, theta0_box: self.theta0_box.unwrap_or(TrialSpec::default_box(beta)), clip: self.clip })
    }

    /// SHA-256 of the canonical JSON of the config, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"steps": 10, "stpes": 3}"#).unwrap_err();
        assert!(err.to_string().contains("stpes"));
        assert!(serde_json::from_str::<RunConfig>(r#"{"env": {"kind": "six_state", "beta": 0.5}}"#).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let mut c: RunConfig = serde_json::from_str(r#"{"steps": 10, "seed": 4, "rho": 0.7}"#).unwrap();
        c.apply(Overrides { seed: Some(9), ..Default::default() });
        assert_eq!((c.steps, c.seed, c.rho, c.gain), (10, 9, 0.7, 70.0));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig { out: "elsewhere".into(), ..RunConfig::default() };
        let c = RunConfig { seed: 1, ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn resolve_pins_defaults_and_checks_pairing() {
        let mut c = RunConfig { steps: 1000, ..RunConfig::default() };
        c.resolve().unwrap();
        assert_eq!(c.beta, Some(0.8));
        assert_eq!(c.grid.as_deref(), Some(&[100, 1000][..]));
        let mut short = RunConfig { steps: 2500, ..RunConfig::default() };
        short.resolve().unwrap();
        assert_eq!(short.grid.as_deref(), Some(&[100, 1000, 2500][..]));
        assert_eq!(c.theta0_box, Some([-1e3, 1e3]));
        let mut bad = RunConfig { algorithm: AlgoName::Gq0, ..RunConfig::default() };
        assert!(bad.resolve().unwrap_err().is_config_error());
        let mut stop = RunConfig { env: EnvConfig::Stopping { gbm: None }, algorithm: AlgoName::Zap, ..RunConfig::default() };
        assert!(stop.resolve().unwrap_err().is_config_error());
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in AlgoName::value_variants() {
            let name = a.to_possible_value().unwrap().get_name().to_string();
            let json: AlgoName = serde_json::from_str(&format!("\"{name}\"")).unwrap();
            assert_eq!(json, *a);
        }
    }
}
