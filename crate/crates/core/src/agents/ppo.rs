//! Discrete-action PPO with a shared-trunk actor-critic, clipped
//! surrogate objective, and GAE. The update loop is where the continual
//! methods plug in: the churn regularizer wraps every minibatch step,
//! L2-Init adds its pull-to-init gradient, weight clipping clamps after
//! each step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    compute_gae, sample_disjoint_indices, EnvCursor, EpisodeEnd, RolloutBuffer, UpdatePlugins,
};
use crate::baselines::l2_init_penalty;
use crate::churn::{self, chain_step, log_softmax, measure_churn, mode_outputs};
use crate::envs::{self, TaskSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Network, ParamVector};
use crate::optim::Optimizer;

fn default_lr() -> f64 {
    1e-3
}
fn default_gamma() -> f64 {
    0.99
}
fn default_gae_lambda() -> f64 {
    0.95
}
fn default_interval() -> usize {
    800
}
fn default_minibatch() -> usize {
    32
}
fn default_epochs() -> usize {
    5
}
fn default_clip() -> f64 {
    0.2
}
fn default_value_coef() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_gae_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "default_interval")]
    pub interval: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    #[serde(default = "default_value_coef")]
    pub value_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            lr: default_lr(),
            gamma: default_gamma(),
            gae_lambda: default_gae_lambda(),
            interval: default_interval(),
            minibatch: default_minibatch(),
            epochs: default_epochs(),
            clip_eps: default_clip(),
            entropy_coef: 0.0,
            value_coef: default_value_coef(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae lambda must lie in [0, 1]".into()));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config("clip epsilon must be positive".into()));
        }
        if self.interval == 0 || self.minibatch == 0 {
            return Err(Error::Config("interval and minibatch must be positive".into()));
        }
        Ok(())
    }
}

/// One agent decision at collection time.
#[derive(Debug, Clone, Copy)]
pub struct ActionSample {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

pub struct PpoAgent {
    pub net: Network,
    pub opt: Optimizer,
    pub cfg: PpoConfig,
}

impl PpoAgent {
    pub fn new(net: Network, cfg: PpoConfig) -> Result<Self> {
        cfg.validate()?;
        if net.config().value_head != Some(1) {
            return Err(Error::Config("PPO needs a network with a scalar value head".into()));
        }
        let opt = Optimizer::adam(cfg.lr, net.param_count());
        Ok(PpoAgent { net, opt, cfg })
    }

    fn policy_value(&self, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let x = Matrix::from_rows(&[obs.to_vec()])?;
        let out = self.net.snapshot_outputs(&x)?;
        let p = self.net.config().policy_dim();
        let logits = out.row(0)[..p].to_vec();
        let value = out.get(0, p);
        Ok((logits, value))
    }

    /// Samples an action from the softmax policy.
    pub fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<ActionSample> {
        let (logits, value) = self.policy_value(obs)?;
        let log_probs = log_softmax(&logits);
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut action = log_probs.len() - 1;
        for (i, lp) in log_probs.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                action = i;
                break;
            }
        }
        Ok(ActionSample { action, log_prob: log_probs[action], value })
    }

    pub fn value_of(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.policy_value(obs)?.1)
    }
}

/// Runs the policy for exactly `interval` environment steps on one task,
/// resetting on episode ends. With `cut_at_boundary`, an episode still
/// running after the final step is recorded as truncated (the continual
/// scheduler is about to switch tasks).
pub fn collect_rollout(
    agent: &PpoAgent,
    task: &TaskSpec,
    cursor: &mut EnvCursor,
    interval: usize,
    cut_at_boundary: bool,
    env_rng: &mut ChaCha8Rng,
    agent_rng: &mut ChaCha8Rng,
) -> Result<(RolloutBuffer, Vec<EpisodeEnd>)> {
    let mut buf = RolloutBuffer::with_capacity(interval);
    let mut episodes = Vec::new();
    for step in 0..interval {
        let sample = agent.act(&cursor.obs, agent_rng)?;
        let outcome = envs::step(task, &cursor.state, sample.action)?;
        cursor.episode_return += outcome.reward;
        cursor.episode_len += 1;

        buf.observations.push(cursor.obs.clone());
        buf.actions.push(sample.action);
        buf.log_probs.push(sample.log_prob);
        buf.rewards.push(outcome.reward);
        buf.values.push(sample.value);

        let last_step = step + 1 == interval;
        let boundary_cut = last_step && cut_at_boundary && !outcome.terminated && !outcome.truncated;
        let truncated = outcome.truncated || boundary_cut;
        buf.dones.push(outcome.terminated);
        buf.truncations.push(truncated);
        buf.truncation_values
            .push(if truncated { agent.value_of(&outcome.obs)? } else { 0.0 });

        if outcome.terminated || truncated {
            episodes.push(EpisodeEnd {
                offset: step,
                episode_return: cursor.episode_return,
                length: cursor.episode_len,
                terminated: outcome.terminated,
            });
            *cursor = EnvCursor::reset(task, env_rng);
        } else {
            cursor.state = outcome.state;
            cursor.obs = outcome.obs;
        }
    }
    // Bootstrap for an episode still in flight after the last step.
    let last = interval - 1;
    buf.bootstrap_value = if buf.dones[last] || buf.truncations[last] {
        0.0
    } else {
        agent.value_of(&cursor.obs)?
    };
    Ok((buf, episodes))
}

/// Per-sample pieces of the PPO objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct PpoLossParts {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

impl PpoLossParts {
    pub fn total(&self, cfg: &PpoConfig) -> f64 {
        self.policy_loss + cfg.value_coef * self.value_loss - cfg.entropy_coef * self.entropy
    }
}

/// Clipped-surrogate loss and its analytic gradient on one minibatch.
/// Advantages are expected to be normalized already.
pub fn ppo_loss(
    net: &Network,
    x: &Matrix,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<(PpoLossParts, ParamVector)> {
    let b = x.rows();
    if actions.len() != b || old_log_probs.len() != b || advantages.len() != b || returns.len() != b
    {
        return Err(Error::Dimension("minibatch arrays must have equal lengths".into()));
    }
    let cache = net.forward(x)?;
    let out = &cache.outputs;
    let pdim = net.config().policy_dim();
    let mut dl = Matrix::zeros(b, out.cols());
    let mut parts = PpoLossParts::default();
    for i in 0..b {
        let logits = &out.row(i)[..pdim];
        let log_probs = log_softmax(logits);
        let probs: Vec<f64> = log_probs.iter().map(|&v| v.exp()).collect();
        let a = actions[i];
        let ratio = (log_probs[a] - old_log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite PPO ratio at sample {i}: new {} old {}",
                log_probs[a], old_log_probs[i]
            )));
        }
        let adv = advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        parts.policy_loss += -unclipped.min(clipped);
        // Gradient flows through the ratio only when the unclipped branch
        // is active (the clipped branch is flat outside the clip range).
        let d_ratio = if unclipped <= clipped { -adv } else { 0.0 };

        let value = out.get(i, pdim);
        let verr = value - returns[i];
        parts.value_loss += verr * verr;

        let entropy: f64 = -log_probs.iter().zip(&probs).map(|(lp, p)| p * lp).sum::<f64>();
        parts.entropy += entropy;

        for k in 0..pdim {
            let indicator = if k == a { 1.0 } else { 0.0 };
            let d_logp_a = indicator - probs[k];
            let mut g = d_ratio * ratio * d_logp_a;
            if cfg.entropy_coef != 0.0 {
                // d(−c_H·H)/dz_k = c_H·p_k·(log p_k + H).
                g += cfg.entropy_coef * probs[k] * (log_probs[k] + entropy);
            }
            dl.set(i, k, g);
        }
        dl.set(i, pdim, cfg.value_coef * 2.0 * verr);
    }
    let bf = b as f64;
    parts.policy_loss /= bf;
    parts.value_loss /= bf;
    parts.entropy /= bf;
    let grad = net.backward(&cache, &dl)?;
    Ok((parts, grad))
}

/// Normalizes advantages to zero mean and unit variance (std floored).
pub fn normalize_advantages(advantages: &mut [f64]) {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in advantages.iter_mut() {
        *a = (*a - mean) / std;
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoUpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub churn_loss: f64,
    pub lambda: f64,
    /// Churn of the first minibatch step of this update, measured on a
    /// probe batch drawn from the diagnostics stream.
    pub probed_churn: Option<f64>,
    pub minibatch_steps: usize,
}

impl PpoAgent {
    /// One PPO iteration: GAE, advantage normalization, then
    /// epochs × shuffled minibatch passes with the active plugins.
    pub fn update(
        &mut self,
        buffer: &RolloutBuffer,
        plugins: &mut UpdatePlugins,
        agent_rng: &mut ChaCha8Rng,
        mut churn_probe: Option<&mut ChaCha8Rng>,
    ) -> Result<PpoUpdateStats> {
        let n = buffer.len();
        if n == 0 {
            return Err(Error::State("update on an empty rollout".into()));
        }
        let (mut advantages, returns) = compute_gae(
            &buffer.rewards,
            &buffer.values,
            &buffer.dones,
            &buffer.truncations,
            &buffer.truncation_values,
            self.cfg.gamma,
            self.cfg.gae_lambda,
            buffer.bootstrap_value,
        )?;
        normalize_advantages(&mut advantages);
        let all_x = Matrix::from_rows(&buffer.observations)?;

        // Frozen iteration-start network: churn snapshots are taken
        // against the policy the rollout was collected with.
        let iter_start_net = plugins.churn.as_ref().map(|_| self.net.clone());

        let mut stats = PpoUpdateStats::default();
        let mut indices: Vec<usize> = (0..n).collect();
        for _epoch in 0..self.cfg.epochs {
            for i in (1..indices.len()).rev() {
                let j = agent_rng.gen_range(0..=i);
                indices.swap(i, j);
            }
            let mut start = 0;
            while start < n {
                let end = (start + self.cfg.minibatch).min(n);
                let mb: Vec<usize> = indices[start..end].to_vec();
                start = end;

                let x = all_x.select_rows(&mb);
                let acts: Vec<usize> = mb.iter().map(|&i| buffer.actions[i]).collect();
                let olp: Vec<f64> = mb.iter().map(|&i| buffer.log_probs[i]).collect();
                let adv: Vec<f64> = mb.iter().map(|&i| advantages[i]).collect();
                let ret: Vec<f64> = mb.iter().map(|&i| returns[i]).collect();

                let probe_net = if stats.minibatch_steps == 0 {
                    churn_probe.as_deref_mut().map(|prng| {
                        let idx = sample_disjoint_indices(n, &mb, self.cfg.minibatch.min(n - mb.len()), prng);
                        (self.net.clone(), all_x.select_rows(&idx))
                    })
                } else {
                    None
                };

                let cfg = self.cfg.clone();
                let l2 = plugins.l2_init_coeff;
                if let Some(plugin) = plugins.churn.as_mut() {
                    let ref_idx =
                        sample_disjoint_indices(n, &mb, plugin.cfg.ref_batch_size.min(n - mb.len()), agent_rng);
                    let ref_x = all_x.select_rows(&ref_idx);
                    let old_net = iter_start_net.as_ref().unwrap();
                    let snapshot = mode_outputs(old_net, &ref_x, plugin.cfg.output_mode)?;
                    let mut captured = PpoLossParts::default();
                    let step_stats = chain_step(
                        &mut self.net,
                        &mut self.opt,
                        &mb,
                        &ref_idx,
                        &ref_x,
                        &snapshot,
                        |net| {
                            let (parts, mut g) = ppo_loss(net, &x, &acts, &olp, &adv, &ret, &cfg)?;
                            captured = parts;
                            if let Some(c) = l2 {
                                let (_, g_l2) = l2_init_penalty(net.params(), net.init_params(), c)?;
                                g.axpy(&g_l2, 1.0);
                            }
                            Ok((parts.policy_loss, g))
                        },
                        &plugin.cfg,
                        &mut plugin.means,
                    )?;
                    stats.churn_loss += step_stats.churn_loss;
                    stats.lambda += step_stats.lambda;
                    stats.policy_loss += captured.policy_loss;
                    stats.value_loss += captured.value_loss;
                    stats.entropy += captured.entropy;
                } else {
                    let (parts, mut grad) = ppo_loss(&self.net, &x, &acts, &olp, &adv, &ret, &self.cfg)?;
                    if let Some(c) = plugins.l2_init_coeff {
                        let (_, g_l2) = l2_init_penalty(self.net.params(), self.net.init_params(), c)?;
                        grad.axpy(&g_l2, 1.0);
                    }
                    let new_params = self.opt.step(self.net.params(), &grad)?;
                    self.net.set_params(new_params)?;
                    stats.policy_loss += parts.policy_loss;
                    stats.value_loss += parts.value_loss;
                    stats.entropy += parts.entropy;
                }
                if let Some(kappa) = plugins.clip_kappa {
                    let clipped = crate::baselines::weight_clip(self.net.params(), kappa);
                    self.net.set_params(clipped)?;
                }
                if let Some((before, probe_x)) = probe_net {
                    stats.probed_churn = Some(measure_churn(
                        &before,
                        &self.net,
                        &probe_x,
                        churn::OutputMode::PolicyLogprobs,
                    )?);
                }
                stats.minibatch_steps += 1;
            }
        }
        let steps = stats.minibatch_steps.max(1) as f64;
        stats.policy_loss /= steps;
        stats.value_loss /= steps;
        stats.entropy /= steps;
        stats.churn_loss /= steps;
        stats.lambda /= steps;
        Ok(stats)
    }

    /// Gradient of the clipped policy surrogate on a subset of the
    /// rollout, with ratios against the stored collection-time log
    /// probabilities. This is the per-minibatch gradient the NTK
    /// diagnostics collect before each update.
    pub fn policy_surrogate_grad(
        &self,
        buffer: &RolloutBuffer,
        advantages: &[f64],
        indices: &[usize],
    ) -> Result<ParamVector> {
        let x: Vec<Vec<f64>> = indices.iter().map(|&i| buffer.observations[i].clone()).collect();
        let x = Matrix::from_rows(&x)?;
        let acts: Vec<usize> = indices.iter().map(|&i| buffer.actions[i]).collect();
        let olp: Vec<f64> = indices.iter().map(|&i| buffer.log_probs[i]).collect();
        let adv: Vec<f64> = indices.iter().map(|&i| advantages[i]).collect();
        let ret = vec![0.0; indices.len()];
        let mut cfg = self.cfg.clone();
        cfg.value_coef = 0.0;
        cfg.entropy_coef = 0.0;
        let (_, grad) = ppo_loss(&self.net, &x, &acts, &olp, &adv, &ret, &cfg)?;
        Ok(grad)
    }

    /// GAE advantages of a full rollout, normalized, as used by updates
    /// and by the NTK collection.
    pub fn advantages_for(&self, buffer: &RolloutBuffer) -> Result<Vec<f64>> {
        let (mut advantages, _) = compute_gae(
            &buffer.rewards,
            &buffer.values,
            &buffer.dones,
            &buffer.truncations,
            &buffer.truncation_values,
            self.cfg.gamma,
            self.cfg.gae_lambda,
            buffer.bootstrap_value,
        )?;
        normalize_advantages(&mut advantages);
        Ok(advantages)
    }
}
