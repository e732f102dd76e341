//! Classic-control environments and the continual task schedule.
//!
//! The three environments re-implement the standard Gym dynamics in f64
//! with fixed-order arithmetic, so a (state, action) pair always maps to
//! the same successor. A continual sequence chains `k` instances of one
//! environment, each with a per-task observation-noise offset drawn once
//! at sequence construction and added to every observation of that task.

mod acrobot;
mod cartpole;
mod mountaincar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{next_gaussian, stream_rng, Stream};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Cartpole,
    Acrobot,
    Mountaincar,
}

impl EnvId {
    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::Cartpole => EnvSpec { env_id: self, max_episode_steps: 500, obs_dim: 4, action_count: 2 },
            EnvId::Acrobot => EnvSpec { env_id: self, max_episode_steps: 500, obs_dim: 6, action_count: 3 },
            EnvId::Mountaincar => EnvSpec { env_id: self, max_episode_steps: 200, obs_dim: 2, action_count: 3 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub max_episode_steps: usize,
    pub obs_dim: usize,
    pub action_count: usize,
}

/// One task of a continual sequence: an environment plus its fixed
/// observation-noise offset and interaction budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub env: EnvSpec,
    pub noise_offset: Vec<f64>,
    pub budget_n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub tasks: Vec<TaskSpec>,
}

impl TaskSequence {
    pub fn from_tasks(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("task sequence needs at least one task".into()));
        }
        Ok(TaskSequence { tasks })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_budget(&self) -> u64 {
        self.tasks.iter().map(|t| t.budget_n).sum()
    }

    /// Maps a global step to (task index, is-first-step-of-task).
    pub fn advance_schedule(&self, global_step: u64) -> Result<(usize, bool)> {
        let mut start = 0u64;
        for (i, t) in self.tasks.iter().enumerate() {
            if global_step < start + t.budget_n {
                return Ok((i, global_step == start));
            }
            start += t.budget_n;
        }
        Err(Error::EndOfSequence)
    }
}

/// Builds a sequence of `k` tasks on the same environment, each with an
/// i.i.d. N(0, σ²) offset per observation dimension drawn once per task.
pub fn make_task_sequence(
    env_id: EnvId,
    k: usize,
    sigma: f64,
    budget_n: u64,
    seed: u64,
) -> Result<TaskSequence> {
    if k < 1 {
        return Err(Error::Config("task count k must be >= 1".into()));
    }
    if budget_n == 0 {
        return Err(Error::Config("per-task budget must be positive".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config("sigma must be finite and non-negative".into()));
    }
    let spec = env_id.spec();
    let mut rng = stream_rng(seed, Stream::Sequence, 0);
    let tasks = (0..k)
        .map(|_| {
            let noise_offset = (0..spec.obs_dim).map(|_| sigma * next_gaussian(&mut rng)).collect();
            TaskSpec { env: spec, noise_offset, budget_n }
        })
        .collect();
    Ok(TaskSequence { tasks })
}

/// Continuous environment state plus the in-episode step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub vars: Vec<f64>,
    pub step_count: usize,
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    /// Noisy observation (raw observation + the task's offset).
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Environment-defined success/failure end.
    pub terminated: bool,
    /// Episode cap reached; bootstrap-worthy, not a true terminal.
    pub truncated: bool,
}

fn add_offset(mut raw: Vec<f64>, offset: &[f64]) -> Vec<f64> {
    for (o, n) in raw.iter_mut().zip(offset) {
        *o += n;
    }
    raw
}

/// Samples an initial state from the environment's standard initial
/// distribution and returns it with the (noisy) initial observation.
pub fn reset(task: &TaskSpec, rng: &mut ChaCha8Rng) -> (EnvState, Vec<f64>) {
    let vars = match task.env.env_id {
        EnvId::Cartpole => cartpole::reset(rng),
        EnvId::Acrobot => acrobot::reset(rng),
        EnvId::Mountaincar => mountaincar::reset(rng),
    };
    let state = EnvState { vars, step_count: 0 };
    let obs = add_offset(observe_raw(task, &state), &task.noise_offset);
    (state, obs)
}

/// Raw (offset-free) observation of a state.
pub fn observe_raw(task: &TaskSpec, state: &EnvState) -> Vec<f64> {
    match task.env.env_id {
        EnvId::Cartpole => state.vars.clone(),
        EnvId::Acrobot => acrobot::observe(&state.vars),
        EnvId::Mountaincar => state.vars.clone(),
    }
}

/// Advances the dynamics one step. Deterministic in (state, action).
pub fn step(task: &TaskSpec, state: &EnvState, action: usize) -> Result<StepOutcome> {
    if action >= task.env.action_count {
        return Err(Error::Input(format!(
            "action {action} out of range for {:?} ({} actions)",
            task.env.env_id, task.env.action_count
        )));
    }
    let (vars, reward, terminated) = match task.env.env_id {
        EnvId::Cartpole => cartpole::step(&state.vars, action),
        EnvId::Acrobot => acrobot::step(&state.vars, action),
        EnvId::Mountaincar => mountaincar::step(&state.vars, action),
    };
    let step_count = state.step_count + 1;
    let truncated = !terminated && step_count >= task.env.max_episode_steps;
    let next = EnvState { vars, step_count };
    let obs = add_offset(observe_raw(task, &next), &task.noise_offset);
    Ok(StepOutcome { state: next, obs, reward, terminated, truncated })
}
