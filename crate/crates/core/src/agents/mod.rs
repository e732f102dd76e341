//! Base agents: PPO (discrete actions) and Double DQN, plus the buffers
//! and the per-update plugin seams the continual methods hook into.

pub mod dqn;
pub mod ppo;

use crate::churn::{ChurnConfig, RunningMeans};
use crate::envs::{self, EnvState, TaskSpec};
use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;

/// On-policy trajectory store, filled exactly once per PPO iteration.
#[derive(Debug, Clone)]
pub struct RolloutBuffer {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Environment-defined terminal at this step.
    pub dones: Vec<bool>,
    /// Episode cut without a true terminal (cap or task boundary).
    pub truncations: Vec<bool>,
    pub values: Vec<f64>,
    /// Value of the final observation when a step truncates, else 0.
    pub truncation_values: Vec<f64>,
    /// Value of the observation after the last step (0 if it ended an episode).
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn with_capacity(n: usize) -> Self {
        RolloutBuffer {
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            log_probs: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            truncations: Vec::with_capacity(n),
            values: Vec::with_capacity(n),
            truncation_values: Vec::with_capacity(n),
            bootstrap_value: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Generalized advantage estimation with bootstrap-on-truncation:
/// δ_t = r_t + γ·V(s_{t+1})·(1−done_t) − V(s_t),
/// A_t = δ_t + γλ·(1−done_t)·(1−trunc_t)·A_{t+1}, returns = A + V.
/// Truncated steps use the recorded value of the final observation as
/// V(s_{t+1}); the last step uses `bootstrap_value` when the episode is
/// still running.
#[allow(clippy::too_many_arguments)]
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    truncations: &[bool],
    truncation_values: &[f64],
    gamma: f64,
    lambda: f64,
    bootstrap_value: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n
        || dones.len() != n
        || truncations.len() != n
        || truncation_values.len() != n
    {
        return Err(Error::Dimension("GAE inputs must have equal lengths".into()));
    }
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if truncations[t] {
            truncation_values[t]
        } else if t + 1 == n {
            bootstrap_value
        } else {
            values[t + 1]
        };
        let non_terminal = if dones[t] { 0.0 } else { 1.0 };
        let chain = if dones[t] || truncations[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * non_terminal - values[t];
        acc = delta + gamma * lambda * chain * acc;
        advantages[t] = acc;
        returns[t] = acc + values[t];
    }
    Ok((advantages, returns))
}

/// A completed (or task-boundary-cut) episode within one rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEnd {
    /// Index within the rollout of the episode's final step.
    pub offset: usize,
    pub episode_return: f64,
    pub length: usize,
    pub terminated: bool,
}

/// The environment-side cursor a training loop advances: current state,
/// current (noisy) observation, and in-flight episode accumulators.
#[derive(Debug, Clone)]
pub struct EnvCursor {
    pub state: EnvState,
    pub obs: Vec<f64>,
    pub episode_return: f64,
    pub episode_len: usize,
}

impl EnvCursor {
    pub fn reset(task: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let (state, obs) = envs::reset(task, rng);
        EnvCursor { state, obs, episode_return: 0.0, episode_len: 0 }
    }
}

/// Per-update plugin state owned by the run loop and threaded through
/// agent updates.
#[derive(Debug, Clone)]
pub struct UpdatePlugins {
    pub churn: Option<ChurnPlugin>,
    /// L2-Init coefficient; adds 2c(θ−θ₀) to every main gradient.
    pub l2_init_coeff: Option<f64>,
    /// Clamp every parameter to [−κ, κ] after each optimizer step.
    pub clip_kappa: Option<f64>,
}

impl UpdatePlugins {
    pub fn none() -> Self {
        UpdatePlugins { churn: None, l2_init_coeff: None, clip_kappa: None }
    }
}

#[derive(Debug, Clone)]
pub struct ChurnPlugin {
    pub cfg: ChurnConfig,
    pub means: RunningMeans,
}

impl ChurnPlugin {
    pub fn new(cfg: ChurnConfig) -> Self {
        let means = RunningMeans::new(cfg.ema_decay);
        ChurnPlugin { cfg, means }
    }
}

/// Draws `count` indices uniformly without replacement from
/// `0..n`, excluding `taken`. Deterministic in the generator.
pub(crate) fn sample_disjoint_indices(
    n: usize,
    taken: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    use rand::Rng;
    let mut excluded = vec![false; n];
    for &t in taken {
        excluded[t] = true;
    }
    let pool: Vec<usize> = (0..n).filter(|&i| !excluded[i]).collect();
    assert!(pool.len() >= count, "not enough indices left to sample from");
    // Partial Fisher-Yates over the pool.
    let mut pool = pool;
    for i in 0..count {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let rewards = [1.0, 2.0, 3.0];
        let values = [0.5, 1.5, 2.5];
        let dones = [false, false, false];
        let truncs = [false, false, false];
        let tv = [0.0, 0.0, 0.0];
        let (adv, _) =
            compute_gae(&rewards, &values, &dones, &truncs, &tv, 0.9, 0.0, 4.0).unwrap();
        for t in 0..3 {
            let next = if t == 2 { 4.0 } else { values[t + 1] };
            let delta = rewards[t] + 0.9 * next - values[t];
            assert!((adv[t] - delta).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_monte_carlo_limit_is_suffix_sums() {
        let rewards = [1.0, 2.0, 3.0, 4.0];
        let zeros = [0.0; 4];
        let flags = [false; 4];
        let (adv, ret) =
            compute_gae(&rewards, &zeros, &flags, &flags, &zeros, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(adv, vec![10.0, 9.0, 7.0, 4.0]);
        assert_eq!(ret, adv);
    }

    #[test]
    fn gae_matches_brute_force_recursion_with_terminal() {
        let rewards = [1.0, 1.0, 1.0];
        let values = [0.5, 0.5, 0.5];
        let dones = [false, false, true];
        let truncs = [false; 3];
        let tv = [0.0; 3];
        let (gamma, lambda) = (0.99, 0.95);
        let (adv, ret) =
            compute_gae(&rewards, &values, &dones, &truncs, &tv, gamma, lambda, 9.0).unwrap();
        // Brute-force expansion of the recursion, written out by hand.
        let d2 = rewards[2] - values[2]; // terminal: no bootstrap
        let d1 = rewards[1] + gamma * values[2] - values[1];
        let d0 = rewards[0] + gamma * values[1] - values[0];
        let a2 = d2;
        let a1 = d1 + gamma * lambda * a2;
        let a0 = d0 + gamma * lambda * a1;
        assert!((adv[2] - a2).abs() < 1e-15);
        assert!((adv[1] - a1).abs() < 1e-15);
        assert!((adv[0] - a0).abs() < 1e-15);
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gae_truncation_bootstraps_with_recorded_value() {
        let rewards = [1.0, 1.0];
        let values = [0.0, 5.0];
        let dones = [false, false];
        let truncs = [true, false];
        let tv = [3.0, 0.0];
        let (adv, _) =
            compute_gae(&rewards, &values, &dones, &truncs, &tv, 1.0, 1.0, 0.0).unwrap();
        // Step 0 truncates: δ = 1 + 3 − 0, and the chain to step 1 is cut.
        assert!((adv[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn gae_rejects_ragged_inputs() {
        let res = compute_gae(&[1.0], &[1.0, 2.0], &[false], &[false], &[0.0], 0.9, 0.9, 0.0);
        assert!(matches!(res, Err(Error::Dimension(_))));
    }

    #[test]
    fn disjoint_sampling_avoids_taken_indices() {
        let mut rng = stream_rng(1, Stream::Agent, 0);
        for _ in 0..50 {
            let taken = [3usize, 4, 5];
            let picked = sample_disjoint_indices(20, &taken, 8, &mut rng);
            assert_eq!(picked.len(), 8);
            for &p in &picked {
                assert!(!taken.contains(&p));
                assert!(p < 20);
            }
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 8, "indices are distinct");
        }
    }
}
