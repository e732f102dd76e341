//! Experiment orchestration: run configuration, the continual training
//! loops, metrics/manifest outputs, and cross-run aggregation.

pub mod aggregate;
pub mod csvio;
pub mod metrics;
pub mod runner;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agents::dqn::DqnConfig;
use crate::agents::ppo::PpoConfig;
use crate::baselines::BaselineConfig;
use crate::churn::{AblationMode, ChurnConfig, OutputMode};
use crate::envs::EnvId;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::sl::SlTaskKind;

pub use aggregate::{aggregate_scores, MethodSummary, RunScore};
pub use metrics::MetricsRow;
pub use runner::{run_experiment, run_rl, RunResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Oracle,
    CChain,
    L2Init,
    WeightClip,
    Redo,
    LayerNorm,
    AdamRel,
    ProjOnly,
    OrthOnly,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Oracle => "oracle",
            Method::CChain => "c_chain",
            Method::L2Init => "l2_init",
            Method::WeightClip => "weight_clip",
            Method::Redo => "redo",
            Method::LayerNorm => "layer_norm",
            Method::AdamRel => "adam_rel",
            Method::ProjOnly => "proj_only",
            Method::OrthOnly => "orth_only",
        }
    }

    pub fn uses_churn(&self) -> bool {
        matches!(self, Method::CChain | Method::ProjOnly | Method::OrthOnly)
    }

    pub fn ablation(&self) -> AblationMode {
        match self {
            Method::ProjOnly => AblationMode::ProjOnly,
            Method::OrthOnly => AblationMode::OrthOnly,
            _ => AblationMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Ppo,
    Dqn,
    Sl,
}

/// Continual-RL environment selection; unset fields resolve to the
/// per-environment defaults (CartPole/Acrobot: k = 10, N = 160k,
/// σ = 2.0; MountainCar: k = 5, N = 320k, σ = 0.02).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_id: EnvId,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub budget_n: Option<u64>,
}

impl EnvConfig {
    pub fn resolve(&mut self) {
        let (k, sigma, budget) = match self.env_id {
            EnvId::Cartpole | EnvId::Acrobot => (10, 2.0, 160_000),
            EnvId::Mountaincar => (5, 0.02, 320_000),
        };
        self.k.get_or_insert(k);
        self.sigma.get_or_insert(sigma);
        self.budget_n.get_or_insert(budget);
    }
}

fn default_sl_minibatch() -> usize {
    32
}
fn default_sl_lr() -> f64 {
    1e-3
}
fn default_fixture_per_class() -> usize {
    200
}

/// Continual supervised-learning selection. Defaults: random-label runs
/// 10 tasks × 100 epochs on 1200-image subsets; permuted runs 50 tasks
/// × 1 epoch over the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlConfig {
    pub kind: SlTaskKind,
    #[serde(default)]
    pub num_tasks: Option<usize>,
    #[serde(default)]
    pub per_task_n: Option<usize>,
    #[serde(default)]
    pub epochs_per_task: Option<usize>,
    #[serde(default = "default_sl_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_sl_lr")]
    pub lr: f64,
    /// IDX image/label files; when absent, the bundled synthetic
    /// fixture set is generated in memory.
    #[serde(default)]
    pub dataset_images: Option<PathBuf>,
    #[serde(default)]
    pub dataset_labels: Option<PathBuf>,
    #[serde(default = "default_fixture_per_class")]
    pub fixture_per_class: usize,
}

impl SlConfig {
    /// Fills task-count defaults; `dataset_len` caps per-task subsets.
    pub fn resolve(&mut self, dataset_len: usize) {
        match self.kind {
            SlTaskKind::RandomLabel => {
                self.num_tasks.get_or_insert(10);
                self.per_task_n.get_or_insert(1200.min(dataset_len));
                self.epochs_per_task.get_or_insert(100);
            }
            SlTaskKind::Permuted => {
                self.num_tasks.get_or_insert(50);
                self.per_task_n.get_or_insert(10_000.min(dataset_len));
                self.epochs_per_task.get_or_insert(1);
            }
        }
    }
}

fn default_ema() -> f64 {
    0.99
}

/// Churn-regularizer knobs; β defaults per agent (1e4 for PPO, 0.01 for
/// DQN and supervised runs) when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnOverrides {
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub ref_batch_size: Option<usize>,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub two_phase: bool,
}

impl Default for ChurnOverrides {
    fn default() -> Self {
        ChurnOverrides { beta: None, ref_batch_size: None, ema_decay: default_ema(), two_phase: false }
    }
}

impl ChurnOverrides {
    pub fn resolve(&self, agent: AgentKind, train_batch: usize, method: Method) -> ChurnConfig {
        let mut cfg = match agent {
            AgentKind::Ppo => ChurnConfig::for_ppo(train_batch),
            AgentKind::Dqn => ChurnConfig::for_dqn(train_batch),
            AgentKind::Sl => ChurnConfig {
                beta: 0.01,
                output_mode: OutputMode::PolicyLogprobs,
                ..ChurnConfig::for_dqn(train_batch)
            },
        };
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(r) = self.ref_batch_size {
            cfg.ref_batch_size = r;
        }
        cfg.ema_decay = self.ema_decay;
        cfg.two_phase = self.two_phase;
        cfg.ablation_mode = method.ablation();
        cfg
    }
}

fn default_ntk_batches() -> usize {
    32
}
fn default_ntk_delta() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Collect the NTK every this many training iterations (0 disables).
    #[serde(default)]
    pub ntk_every: u64,
    /// Number of mini-batch gradients per NTK snapshot.
    #[serde(default = "default_ntk_batches")]
    pub ntk_batches: usize,
    /// Approximate-rank threshold δ.
    #[serde(default = "default_ntk_delta")]
    pub ntk_delta: f64,
    /// Write each collected NTK matrix to `ntk_iter{I}.csv`.
    #[serde(default)]
    pub ntk_dump: bool,
    /// Measure update churn every this many iterations (0 disables;
    /// unset: every PPO iteration, every 500 DQN training steps).
    #[serde(default)]
    pub churn_probe_every: Option<u64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            ntk_every: 0,
            ntk_batches: default_ntk_batches(),
            ntk_delta: default_ntk_delta(),
            ntk_dump: false,
            churn_probe_every: None,
        }
    }
}

impl DiagnosticsConfig {
    pub fn probe_every(&self, agent: AgentKind) -> u64 {
        self.churn_probe_every.unwrap_or(match agent {
            AgentKind::Ppo | AgentKind::Sl => 1,
            AgentKind::Dqn => 500,
        })
    }
}

/// Complete experiment selection; JSON keys mirror the field names and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub agent: AgentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env: Option<EnvConfig>,
    #[serde(default)]
    pub sl: Option<SlConfig>,
    /// Hidden-layer widths; defaults to [64, 64] for RL and [256, 256]
    /// for supervised runs.
    #[serde(default)]
    pub hidden_layers: Option<Vec<usize>>,
    /// Defaults: tanh for PPO, relu for DQN and supervised runs.
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    #[serde(default)]
    pub churn: ChurnOverrides,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Adds fresh per-observation Gaussian noise (scale σ) on top of the
    /// fixed per-task offsets.
    #[serde(default)]
    pub per_step_noise: bool,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match self.agent {
            AgentKind::Ppo | AgentKind::Dqn => {
                if self.env.is_none() {
                    return Err(Error::Config(format!(
                        "agent {:?} needs an `env` section",
                        self.agent
                    )));
                }
            }
            AgentKind::Sl => {
                if self.sl.is_none() {
                    return Err(Error::Config("agent `sl` needs an `sl` section".into()));
                }
                if !matches!(
                    self.method,
                    Method::Vanilla | Method::CChain | Method::L2Init | Method::WeightClip
                ) {
                    return Err(Error::Config(format!(
                        "method {} is not defined for supervised runs",
                        self.method.name()
                    )));
                }
            }
        }
        self.ppo.validate()?;
        self.dqn.validate()?;
        self.baseline.validate()?;
        if let Some(h) = &self.hidden_layers {
            if h.iter().any(|&s| s == 0) {
                return Err(Error::Config("hidden layer sizes must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Environment / dataset label used in summaries.
    pub fn env_label(&self) -> String {
        match self.agent {
            AgentKind::Ppo | AgentKind::Dqn => {
                let env = self.env.as_ref().map(|e| format!("{:?}", e.env_id).to_lowercase());
                env.unwrap_or_else(|| "unknown".into())
            }
            AgentKind::Sl => self
                .sl
                .as_ref()
                .map(|s| format!("sl_{:?}", s.kind).to_lowercase())
                .unwrap_or_else(|| "sl".into()),
        }
    }
}

/// Everything needed to reproduce and audit one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    /// Continual-RL task sequence (noise offsets included) for audit.
    #[serde(default)]
    pub tasks: Option<crate::envs::TaskSequence>,
    /// Real wall-clock duration; excluded from the determinism contract.
    pub elapsed_seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_json(
            r#"{"method": "c_chain", "agent": "ppo", "env": {"env_id": "cartpole"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.method, Method::CChain);
        assert_eq!(cfg.ppo.interval, 800);
        assert_eq!(cfg.ppo.lr, 1e-3);
        assert_eq!(cfg.dqn.lr, 3e-4);
        assert_eq!(cfg.seed, 0);

        let err = RunConfig::from_json(
            r#"{"method": "vanilla", "agent": "ppo", "env": {"env_id": "cartpole"}, "bogus": 1}"#,
        );
        assert!(err.is_err(), "unknown keys are rejected");

        let err = RunConfig::from_json(r#"{"method": "vanilla", "agent": "ppo"}"#);
        assert!(matches!(err, Err(Error::Config(_))), "missing env section");

        let err = RunConfig::from_json(
            r#"{"method": "oracle", "agent": "sl", "sl": {"kind": "permuted"}}"#,
        );
        assert!(matches!(err, Err(Error::Config(_))), "oracle is not a supervised method");
    }

    #[test]
    fn env_defaults_follow_the_environment() {
        let mut e = EnvConfig { env_id: EnvId::Cartpole, k: None, sigma: None, budget_n: None };
        e.resolve();
        assert_eq!((e.k, e.sigma, e.budget_n), (Some(10), Some(2.0), Some(160_000)));
        let mut m = EnvConfig { env_id: EnvId::Mountaincar, k: None, sigma: None, budget_n: None };
        m.resolve();
        assert_eq!((m.k, m.sigma, m.budget_n), (Some(5), Some(0.02), Some(320_000)));
    }

    #[test]
    fn churn_beta_defaults_per_agent() {
        let o = ChurnOverrides::default();
        assert_eq!(o.resolve(AgentKind::Ppo, 32, Method::CChain).beta, 1e4);
        assert_eq!(o.resolve(AgentKind::Dqn, 32, Method::CChain).beta, 0.01);
        assert_eq!(
            o.resolve(AgentKind::Ppo, 32, Method::OrthOnly).ablation_mode,
            AblationMode::OrthOnly
        );
        let with_beta = ChurnOverrides { beta: Some(7.0), ..Default::default() };
        assert_eq!(with_beta.resolve(AgentKind::Ppo, 32, Method::CChain).beta, 7.0);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = RunConfig::from_json(
            r#"{"method": "l2_init", "agent": "dqn", "seed": 5,
                "env": {"env_id": "mountaincar", "k": 2, "budget_n": 4000},
                "baseline": {"l2_coeff": 10.0}}"#,
        )
        .unwrap();
        let json = cfg.to_json();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
