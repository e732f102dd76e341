//! Double DQN: ring replay buffer, ε-greedy collection, TD updates with
//! a hard-replaced target network. The churn regularizer hooks into the
//! per-step update against a one-step-lagged parameter snapshot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_disjoint_indices, UpdatePlugins};
use crate::baselines::l2_init_penalty;
use crate::churn::{chain_step, measure_churn, mode_outputs, OutputMode};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Network, ParamVector};
use crate::optim::Optimizer;

fn default_lr() -> f64 {
    3e-4
}
fn default_gamma() -> f64 {
    0.99
}
fn default_batch() -> usize {
    32
}
fn default_target_replace() -> u64 {
    1000
}
fn default_eps_start() -> f64 {
    1.0
}
fn default_eps_end() -> f64 {
    0.1
}
fn default_warmup() -> u64 {
    1000
}
fn default_capacity() -> usize {
    100_000
}
fn default_train_interval() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqnConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Hard target-copy interval, in training steps.
    #[serde(default = "default_target_replace")]
    pub target_replace: u64,
    #[serde(default = "default_eps_start")]
    pub eps_start: f64,
    #[serde(default = "default_eps_end")]
    pub eps_end: f64,
    /// Linear ε decay horizon in environment steps; when absent the run
    /// loop scales it to the first task's budget.
    #[serde(default)]
    pub eps_decay_steps: Option<u64>,
    /// Uniform-random action steps before learning starts.
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_capacity")]
    pub replay_capacity: usize,
    #[serde(default = "default_train_interval")]
    pub train_interval: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            lr: default_lr(),
            gamma: default_gamma(),
            batch: default_batch(),
            target_replace: default_target_replace(),
            eps_start: default_eps_start(),
            eps_end: default_eps_end(),
            eps_decay_steps: None,
            warmup_steps: default_warmup(),
            replay_capacity: default_capacity(),
            train_interval: default_train_interval(),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.replay_capacity < 2 * self.batch {
            return Err(Error::Config("replay capacity must hold at least two batches".into()));
        }
        if self.eps_end > self.eps_start {
            return Err(Error::Config("epsilon schedule must be non-increasing".into()));
        }
        if self.target_replace == 0 || self.train_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { data: Vec::with_capacity(capacity.min(4096)), capacity, cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.cursor = 0;
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Indices of the most recent `n` insertions, oldest first.
    pub fn recent_indices(&self, n: usize) -> Vec<usize> {
        let n = n.min(self.data.len());
        let len = self.data.len();
        if len < self.capacity {
            (len - n..len).collect()
        } else {
            (0..n)
                .map(|i| (self.cursor + self.capacity - n + i) % self.capacity)
                .collect()
        }
    }
}

/// Double-DQN targets: y = r + γ·(1−done)·Q⁻(s′, argmax_a Q(s′, a)).
pub fn double_dqn_target(
    q_net: &Network,
    target_net: &Network,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let next_rows: Vec<Vec<f64>> = batch.iter().map(|t| t.next_obs.clone()).collect();
    let next_x = Matrix::from_rows(&next_rows)?;
    let online = q_net.snapshot_outputs(&next_x)?;
    let target = target_net.snapshot_outputs(&next_x)?;
    let mut ys = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let row = online.row(i);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        let cont = if t.done { 0.0 } else { 1.0 };
        ys.push(t.reward + gamma * cont * target.get(i, best));
    }
    Ok(ys)
}

/// TD loss ½·mean(Q(s,a) − y)² with its analytic gradient.
pub fn td_loss(
    q_net: &Network,
    obs: &Matrix,
    actions: &[usize],
    targets: &[f64],
) -> Result<(f64, ParamVector)> {
    let b = obs.rows();
    if actions.len() != b || targets.len() != b {
        return Err(Error::Dimension("batch arrays must align".into()));
    }
    let cache = q_net.forward(obs)?;
    let mut dl = Matrix::zeros(b, cache.outputs.cols());
    let mut loss = 0.0;
    for i in 0..b {
        let q = cache.outputs.get(i, actions[i]);
        let err = q - targets[i];
        loss += 0.5 * err * err;
        dl.set(i, actions[i], err);
    }
    loss /= b as f64;
    let grad = q_net.backward(&cache, &dl)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DqnStepStats {
    pub td_loss: f64,
    pub churn_loss: f64,
    pub lambda: f64,
    pub probed_churn: Option<f64>,
    pub target_replaced: bool,
}

pub struct DqnAgent {
    pub q_net: Network,
    pub target_net: Network,
    pub opt: Optimizer,
    pub cfg: DqnConfig,
    /// Environment steps this agent has taken (drives ε decay).
    pub steps_done: u64,
    /// Training steps taken (drives target replacement).
    pub train_steps: u64,
    /// One-step-lagged parameters: the churn snapshot source.
    lagged_params: ParamVector,
}

impl DqnAgent {
    pub fn new(q_net: Network, cfg: DqnConfig) -> Result<Self> {
        cfg.validate()?;
        if q_net.config().value_head.is_some() {
            return Err(Error::Config("Q-networks have no separate value head".into()));
        }
        let target_net = q_net.clone();
        let opt = Optimizer::adam(cfg.lr, q_net.param_count());
        let lagged_params = q_net.params().clone();
        Ok(DqnAgent { q_net, target_net, opt, cfg, steps_done: 0, train_steps: 0, lagged_params })
    }

    /// Current exploration rate: linear decay over the configured
    /// horizon, then flat.
    pub fn epsilon(&self, decay_steps: u64) -> f64 {
        if decay_steps == 0 {
            return self.cfg.eps_end;
        }
        let frac = (self.steps_done as f64 / decay_steps as f64).min(1.0);
        self.cfg.eps_start + frac * (self.cfg.eps_end - self.cfg.eps_start)
    }

    /// ε-greedy action; uniform during warmup.
    pub fn act(
        &self,
        obs: &[f64],
        action_count: usize,
        decay_steps: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        if self.steps_done < self.cfg.warmup_steps {
            return Ok(rng.gen_range(0..action_count));
        }
        if rng.gen::<f64>() < self.epsilon(decay_steps) {
            return Ok(rng.gen_range(0..action_count));
        }
        let x = Matrix::from_rows(&[obs.to_vec()])?;
        let q = self.q_net.snapshot_outputs(&x)?;
        let row = q.row(0);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn ready_to_train(&self, replay_len: usize) -> bool {
        self.steps_done >= self.cfg.warmup_steps && replay_len >= 2 * self.cfg.batch
    }

    /// One TD training step on a sampled batch; hard target copy every
    /// `target_replace` training steps. Churn regularization (when the
    /// plugin is attached) snapshots against the previous step's
    /// parameters and uses a disjoint reference batch from the replay.
    pub fn train_step(
        &mut self,
        replay: &ReplayBuffer,
        plugins: &mut UpdatePlugins,
        agent_rng: &mut ChaCha8Rng,
        churn_probe: Option<&mut ChaCha8Rng>,
    ) -> Result<DqnStepStats> {
        if !self.ready_to_train(replay.len()) {
            return Err(Error::State("training before warmup or with a thin replay".into()));
        }
        let n = replay.len();
        let batch_idx = sample_disjoint_indices(n, &[], self.cfg.batch, agent_rng);
        let batch: Vec<&Transition> = batch_idx.iter().map(|&i| replay.get(i)).collect();
        let obs_rows: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
        let obs = Matrix::from_rows(&obs_rows)?;
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let targets = double_dqn_target(&self.q_net, &self.target_net, &batch, self.cfg.gamma)?;

        let mut stats = DqnStepStats::default();
        let probe = match churn_probe {
            Some(prng) => {
                let idx = sample_disjoint_indices(n, &batch_idx, self.cfg.batch.min(n - batch_idx.len()), prng);
                let rows: Vec<Vec<f64>> = idx.iter().map(|i| replay.get(*i).obs.clone()).collect();
                Some((self.q_net.clone(), Matrix::from_rows(&rows)?))
            }
            None => None,
        };

        let pre_step_params = self.q_net.params().clone();
        let l2 = plugins.l2_init_coeff;
        if let Some(plugin) = plugins.churn.as_mut() {
            let ref_idx =
                sample_disjoint_indices(n, &batch_idx, plugin.cfg.ref_batch_size.min(n - batch_idx.len()), agent_rng);
            let ref_rows: Vec<Vec<f64>> = ref_idx.iter().map(|i| replay.get(*i).obs.clone()).collect();
            let ref_x = Matrix::from_rows(&ref_rows)?;
            let mut lagged_net = self.q_net.clone();
            lagged_net.set_params(self.lagged_params.clone())?;
            let snapshot = mode_outputs(&lagged_net, &ref_x, plugin.cfg.output_mode)?;
            let step_stats = chain_step(
                &mut self.q_net,
                &mut self.opt,
                &batch_idx,
                &ref_idx,
                &ref_x,
                &snapshot,
                |net| {
                    let (loss, mut g) = td_loss(net, &obs, &actions, &targets)?;
                    if let Some(c) = l2 {
                        let (_, g_l2) = l2_init_penalty(net.params(), net.init_params(), c)?;
                        g.axpy(&g_l2, 1.0);
                    }
                    Ok((loss, g))
                },
                &plugin.cfg,
                &mut plugin.means,
            )?;
            stats.td_loss = step_stats.main_loss;
            stats.churn_loss = step_stats.churn_loss;
            stats.lambda = step_stats.lambda;
        } else {
            let (loss, mut grad) = td_loss(&self.q_net, &obs, &actions, &targets)?;
            if let Some(c) = l2 {
                let (_, g_l2) = l2_init_penalty(self.q_net.params(), self.q_net.init_params(), c)?;
                grad.axpy(&g_l2, 1.0);
            }
            let new_params = self.opt.step(self.q_net.params(), &grad)?;
            self.q_net.set_params(new_params)?;
            stats.td_loss = loss;
        }
        if let Some(kappa) = plugins.clip_kappa {
            let clipped = crate::baselines::weight_clip(self.q_net.params(), kappa);
            self.q_net.set_params(clipped)?;
        }
        self.lagged_params = pre_step_params;

        if let Some((before, probe_x)) = probe {
            stats.probed_churn =
                Some(measure_churn(&before, &self.q_net, &probe_x, OutputMode::QValues)?);
        }

        self.train_steps += 1;
        if self.train_steps % self.cfg.target_replace == 0 {
            self.target_net.set_params(self.q_net.params().clone())?;
            stats.target_replaced = true;
        }
        Ok(stats)
    }

    /// Full reset bookkeeping shared by the oracle baseline.
    pub fn reset_counters(&mut self) {
        self.steps_done = 0;
        self.train_steps = 0;
        self.lagged_params = self.q_net.params().clone();
        self.target_net = self.q_net.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_network, Activation, InitScheme, MlpConfig};
    use crate::rng::{stream_rng, Stream};

    fn q_net(seed: u64) -> Network {
        let mut cfg = MlpConfig::new(vec![2, 16, 3], Activation::Relu);
        cfg.init_scheme = InitScheme::UniformFanin;
        init_network(cfg, seed).unwrap()
    }

    fn transition(obs: [f64; 2], action: usize, reward: f64, next: [f64; 2], done: bool) -> Transition {
        Transition { obs: obs.to_vec(), action, reward, next_obs: next.to_vec(), done }
    }

    #[test]
    fn replay_ring_overwrites_fifo() {
        let mut rb = ReplayBuffer::new(3);
        for i in 0..5 {
            rb.push(transition([i as f64, 0.0], 0, i as f64, [0.0, 0.0], false));
        }
        assert_eq!(rb.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| rb.get(i).reward).collect();
        // Slots hold insertions 3, 4, 2 (ring), so no reward older than
        // capacity insertions survives.
        assert!(rewards.contains(&2.0) && rewards.contains(&3.0) && rewards.contains(&4.0));
        let recent = rb.recent_indices(2);
        let recent_rewards: Vec<f64> = recent.iter().map(|&i| rb.get(i).reward).collect();
        assert_eq!(recent_rewards, vec![3.0, 4.0]);
    }

    #[test]
    fn double_dqn_target_terminal_and_gamma_zero() {
        let q = q_net(1);
        let t = q_net(2);
        let term = transition([0.1, 0.2], 1, 1.0, [0.3, 0.4], true);
        let ys = double_dqn_target(&q, &t, &[&term], 0.99).unwrap();
        assert_eq!(ys, vec![1.0]);

        let cont = transition([0.1, 0.2], 1, 0.7, [0.3, 0.4], false);
        let ys = double_dqn_target(&q, &t, &[&cont], 0.0).unwrap();
        assert_eq!(ys, vec![0.7]);
    }

    #[test]
    fn double_dqn_target_matches_hand_computed_two_state_mdp() {
        // Known Q tables on a 2-state MDP, encoded as linear networks:
        // obs (1,0) = state A, (0,1) = state B; online picks the argmax,
        // the target net evaluates it.
        let mut online = init_network(
            MlpConfig::new(vec![2, 2], Activation::Tanh),
            0,
        )
        .unwrap();
        // W maps one-hot states to Q rows: Q(A) = (1, 2), Q(B) = (3, 0).
        online
            .set_params(ParamVector(vec![1.0, 3.0, 2.0, 0.0, 0.0, 0.0]))
            .unwrap();
        let mut target = online.clone();
        // Target net disagrees: Q⁻(A) = (5, 7), Q⁻(B) = (11, 13).
        target
            .set_params(ParamVector(vec![5.0, 11.0, 7.0, 13.0, 0.0, 0.0]))
            .unwrap();
        // From state A we transition to B: online argmax at B is action 0
        // (3 > 0), target evaluates Q⁻(B, 0) = 11; y = 2 + 0.5·11 = 7.5.
        let tr = transition([1.0, 0.0], 0, 2.0, [0.0, 1.0], false);
        let ys = double_dqn_target(&online, &target, &[&tr], 0.5).unwrap();
        assert!((ys[0] - 7.5).abs() < 1e-12);
    }

    #[test]
    fn td_loss_gradient_matches_finite_differences() {
        let net = q_net(5);
        let mut rng = stream_rng(5, Stream::Agent, 0);
        use rand::Rng;
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..2).map(|_| rng.gen::<f64>()).collect()).collect();
        let obs = Matrix::from_rows(&rows).unwrap();
        let actions: Vec<usize> = (0..6).map(|_| rng.gen_range(0..3)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let (_, analytic) = td_loss(&net, &obs, &actions, &targets).unwrap();
        let fd = crate::gradcheck::central_diff_net(&net, 1e-5, |n| {
            td_loss(n, &obs, &actions, &targets).unwrap().0
        });
        assert!(crate::gradcheck::rel_err(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn no_training_before_warmup_and_target_copies_on_schedule() {
        let mut agent = DqnAgent::new(q_net(7), DqnConfig {
            batch: 4,
            warmup_steps: 10,
            target_replace: 3,
            replay_capacity: 64,
            ..DqnConfig::default()
        })
        .unwrap();
        let mut replay = ReplayBuffer::new(64);
        let mut rng = stream_rng(7, Stream::Agent, 0);
        for i in 0..20 {
            replay.push(transition([i as f64 * 0.01, 0.0], i % 3, -1.0, [0.0, 0.1], false));
        }
        assert!(!agent.ready_to_train(replay.len()), "warmup not reached");
        assert!(agent
            .train_step(&replay, &mut UpdatePlugins::none(), &mut rng, None)
            .is_err());
        agent.steps_done = 10;
        let mut replaced = Vec::new();
        for _ in 0..6 {
            let stats = agent
                .train_step(&replay, &mut UpdatePlugins::none(), &mut rng, None)
                .unwrap();
            replaced.push(stats.target_replaced);
        }
        assert_eq!(replaced, vec![false, false, true, false, false, true]);
        // At the copy instant the target equals the online net.
        assert_eq!(agent.target_net.params(), agent.q_net.params());
    }

    #[test]
    fn td_loss_decreases_on_fixed_bandit_batch() {
        // Bandit-like task: fixed batch, fixed targets; repeated steps
        // should fit them.
        let mut agent = DqnAgent::new(q_net(9), DqnConfig {
            batch: 8,
            warmup_steps: 0,
            target_replace: 1_000_000,
            replay_capacity: 64,
            lr: 1e-2,
            gamma: 0.0,
            ..DqnConfig::default()
        })
        .unwrap();
        let mut replay = ReplayBuffer::new(64);
        let mut rng = stream_rng(11, Stream::Agent, 0);
        use rand::Rng;
        for _ in 0..16 {
            let obs = [rng.gen::<f64>(), rng.gen::<f64>()];
            replay.push(transition(obs, rng.gen_range(0..3), rng.gen::<f64>(), [0.0, 0.0], true));
        }
        agent.steps_done = 1;
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let stats = agent
                .train_step(&replay, &mut UpdatePlugins::none(), &mut rng, None)
                .unwrap();
            first.get_or_insert(stats.td_loss);
            last = stats.td_loss;
        }
        assert!(last < first.unwrap() * 0.5, "TD loss trend: {} -> {last}", first.unwrap());
    }

    #[test]
    fn epsilon_schedule_is_monotone() {
        let mut agent = DqnAgent::new(q_net(3), DqnConfig::default()).unwrap();
        let mut last = f64::INFINITY;
        for steps in [0u64, 100, 1000, 5000, 10_000, 20_000] {
            agent.steps_done = steps;
            let eps = agent.epsilon(10_000);
            assert!(eps <= last);
            assert!(eps >= 0.1 - 1e-12 && eps <= 1.0);
            last = eps;
        }
        assert_eq!(agent.epsilon(0), 0.1);
    }
}
