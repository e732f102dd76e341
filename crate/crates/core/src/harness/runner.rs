//! The continual training loops: PPO and DQN over a task sequence, the
//! supervised sequence, method plumbing (oracle resets, AdamRel,
//! dormant-neuron recycling), diagnostics collection, and run outputs
//! (`manifest.json`, `metrics.csv`, NTK dumps).

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::csvio;
use super::metrics::{avg_performance, MetricsRow};
use super::{AgentKind, Manifest, Method, RunConfig};
use crate::agents::dqn::{DqnAgent, ReplayBuffer, Transition};
use crate::agents::ppo::{collect_rollout, PpoAgent};
use crate::agents::{ChurnPlugin, EnvCursor, UpdatePlugins};
use crate::baselines::{oracle_reset, redo_recycle};
use crate::envs::{self, make_task_sequence, TaskSequence};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{init_network, Activation, InitScheme, MlpConfig, ParamVector};
use crate::ntk::{collect_minibatch_grads, ntk_report};
use crate::optim::{Optimizer, SwitchMode};
use crate::rng::{next_gaussian, stream_rng, Stream};
use crate::sl;

/// In-memory outcome of one run (files are optional).
#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    pub final_params: ParamVector,
    pub per_task_j: Vec<Option<f64>>,
    pub j_overall: Option<f64>,
    pub method: Method,
    pub env_label: String,
    pub seed: u64,
    pub ntk_snapshots: usize,
    pub out_dir: Option<PathBuf>,
}

fn build_plugins(cfg: &RunConfig, train_batch: usize) -> UpdatePlugins {
    let mut plugins = UpdatePlugins::none();
    if cfg.method.uses_churn() {
        plugins.churn = Some(ChurnPlugin::new(cfg.churn.resolve(cfg.agent, train_batch, cfg.method)));
    }
    match cfg.method {
        Method::L2Init => plugins.l2_init_coeff = Some(cfg.baseline.l2_coeff),
        Method::WeightClip => plugins.clip_kappa = Some(cfg.baseline.clip_kappa),
        _ => {}
    }
    plugins
}

fn rl_net_config(cfg: &RunConfig, obs_dim: usize, action_count: usize) -> MlpConfig {
    let hidden = cfg.hidden_layers.clone().unwrap_or_else(|| vec![64, 64]);
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(obs_dim);
    sizes.extend(hidden);
    sizes.push(action_count);
    match cfg.agent {
        AgentKind::Ppo => MlpConfig {
            layer_sizes: sizes,
            activation: cfg.activation.unwrap_or(Activation::Tanh),
            use_layer_norm: cfg.method == Method::LayerNorm,
            init_scheme: InitScheme::OrthogonalScaled,
            value_head: Some(1),
        },
        _ => MlpConfig {
            layer_sizes: sizes,
            activation: cfg.activation.unwrap_or(Activation::Relu),
            use_layer_norm: cfg.method == Method::LayerNorm,
            init_scheme: InitScheme::UniformFanin,
            value_head: None,
        },
    }
}

/// Runs the configured experiment, writing `manifest.json`,
/// `metrics.csv`, and any NTK dumps into `out_dir` when given.
pub fn run_experiment(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let started = Instant::now();
    let mut cfg = cfg.clone();
    let result = match cfg.agent {
        AgentKind::Ppo | AgentKind::Dqn => {
            let env_cfg = cfg.env.as_mut().expect("validated");
            env_cfg.resolve();
            let env_cfg = env_cfg.clone();
            let seq = make_task_sequence(
                env_cfg.env_id,
                env_cfg.k.unwrap(),
                env_cfg.sigma.unwrap(),
                env_cfg.budget_n.unwrap(),
                cfg.seed,
            )?;
            let mut result = run_rl(&cfg, &seq, 0, out_dir)?;
            if let Some(dir) = out_dir {
                write_manifest(dir, &cfg, Some(&seq), started.elapsed().as_secs_f64())?;
                csvio::write_metrics_csv(&result.rows, &dir.join("metrics.csv"))?;
                result.out_dir = Some(dir.to_path_buf());
            }
            result
        }
        AgentKind::Sl => {
            let mut result = run_sl_experiment(&mut cfg)?;
            if let Some(dir) = out_dir {
                write_manifest(dir, &cfg, None, started.elapsed().as_secs_f64())?;
                csvio::write_metrics_csv(&result.rows, &dir.join("metrics.csv"))?;
                result.out_dir = Some(dir.to_path_buf());
            }
            result
        }
    };
    Ok(result)
}

fn write_manifest(
    dir: &Path,
    cfg: &RunConfig,
    tasks: Option<&TaskSequence>,
    elapsed_seconds: f64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        tasks: tasks.cloned(),
        elapsed_seconds,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Per-run RNG bundle; the oracle method reseeds every stream at each
/// task switch so each task segment is a self-contained fresh run.
struct Streams {
    env: ChaCha8Rng,
    agent: ChaCha8Rng,
    diag: ChaCha8Rng,
}

impl Streams {
    fn at(seed: u64, index: u64) -> Self {
        Streams {
            env: stream_rng(seed, Stream::Env, index),
            agent: stream_rng(seed, Stream::Agent, index),
            diag: stream_rng(seed, Stream::Diag, index),
        }
    }
}

fn maybe_per_step_noise(obs: &mut [f64], cfg: &RunConfig, env_rng: &mut ChaCha8Rng) {
    if cfg.per_step_noise {
        let sigma = cfg.env.as_ref().and_then(|e| e.sigma).unwrap_or(0.0);
        for v in obs.iter_mut() {
            *v += sigma * next_gaussian(env_rng);
        }
    }
}

/// Runs a continual-RL experiment over an explicit task sequence.
/// `stream_index` offsets the per-task seed derivation; the default 0 is
/// what `run_experiment` uses, and single-task reference runs can pass
/// the oracle's task index to reproduce one segment bit-exactly.
pub fn run_rl(
    cfg: &RunConfig,
    seq: &TaskSequence,
    stream_index: u64,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    match cfg.agent {
        AgentKind::Ppo => run_ppo(cfg, seq, stream_index, out_dir),
        AgentKind::Dqn => run_dqn(cfg, seq, stream_index, out_dir),
        AgentKind::Sl => Err(Error::Config("supervised runs take no task sequence".into())),
    }
}

/// Shared diagnostics state: the latest collected values attach to every
/// subsequent metrics row until refreshed.
#[derive(Default, Clone, Copy)]
struct DiagState {
    l_main: f64,
    l_churn: f64,
    lambda: f64,
    measured_churn: Option<f64>,
    srank: Option<usize>,
    offdiag: Option<f64>,
    diag: Option<f64>,
}

fn run_ppo(
    cfg: &RunConfig,
    seq: &TaskSequence,
    stream_index: u64,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let interval = cfg.ppo.interval as u64;
    for t in &seq.tasks {
        if t.budget_n % interval != 0 {
            return Err(Error::Config(format!(
                "task budget {} is not a multiple of the training interval {}",
                t.budget_n, interval
            )));
        }
    }
    let spec = seq.tasks[0].env;
    let net_cfg = rl_net_config(cfg, spec.obs_dim, spec.action_count);
    let seed = cfg.seed;
    let mut agent = PpoAgent::new(
        init_network(net_cfg.clone(), crate::rng::derive_seed(seed, Stream::NetInit, stream_index))?,
        cfg.ppo.clone(),
    )?;
    let mut streams = Streams::at(seed, stream_index);
    let mut plugins = build_plugins(cfg, cfg.ppo.minibatch);
    let probe_every = cfg.diagnostics.probe_every(cfg.agent);

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut diag_state = DiagState::default();
    let mut ntk_snapshots = 0usize;
    let mut global_iter = 0u64;
    let mut task_start_step = 0u64;

    for (task_idx, task) in seq.tasks.iter().enumerate() {
        if task_idx > 0 {
            match cfg.method {
                Method::Oracle => {
                    let idx = stream_index + task_idx as u64;
                    oracle_reset(
                        &mut agent.net,
                        &mut agent.opt,
                        crate::rng::derive_seed(seed, Stream::NetInit, idx),
                    )?;
                    streams = Streams::at(seed, idx);
                    plugins = build_plugins(cfg, cfg.ppo.minibatch);
                    diag_state = DiagState::default();
                }
                Method::AdamRel => agent.opt.task_switch(SwitchMode::AdamRel),
                _ => {}
            }
        }
        let mut cursor = EnvCursor::reset(task, &mut streams.env);
        maybe_per_step_noise(&mut cursor.obs, cfg, &mut streams.env);
        let iters = task.budget_n / interval;
        for it in 0..iters {
            let boundary = it + 1 == iters;
            let (buffer, episodes) = collect_rollout(
                &agent,
                task,
                &mut cursor,
                interval as usize,
                boundary,
                &mut streams.env,
                &mut streams.agent,
            )?;

            // NTK snapshot before the update.
            if cfg.diagnostics.ntk_every > 0 && it % cfg.diagnostics.ntk_every == 0 {
                let advantages = agent.advantages_for(&buffer)?;
                let m = cfg.diagnostics.ntk_batches;
                let grads = collect_minibatch_grads(buffer.len(), m, &mut streams.diag, |idx| {
                    agent.policy_surrogate_grad(&buffer, &advantages, idx)
                })?;
                let report = ntk_report(&grads, cfg.diagnostics.ntk_delta, global_iter, task_idx);
                diag_state.srank = Some(report.srank);
                diag_state.offdiag = Some(report.offdiag_abs_sum);
                diag_state.diag = Some(report.diag_abs_sum);
                ntk_snapshots += 1;
                if cfg.diagnostics.ntk_dump {
                    if let Some(dir) = out_dir {
                        std::fs::write(
                            dir.join(format!("ntk_iter{global_iter}.csv")),
                            csvio::matrix_to_csv(&report.matrix),
                        )?;
                    }
                }
            }

            let probe = probe_every > 0 && it % probe_every == 0;
            let stats = agent.update(
                &buffer,
                &mut plugins,
                &mut streams.agent,
                probe.then_some(&mut streams.diag),
            )?;
            diag_state.l_main = stats.policy_loss;
            diag_state.l_churn = stats.churn_loss;
            diag_state.lambda = stats.lambda;
            if let Some(c) = stats.probed_churn {
                diag_state.measured_churn = Some(c);
            }

            if cfg.method == Method::Redo && (global_iter + 1) % cfg.baseline.redo_interval == 0 {
                let probe_rows = buffer.observations.len().min(256);
                let probe_x = Matrix::from_rows(&buffer.observations[..probe_rows])?;
                redo_recycle(&mut agent.net, &probe_x, cfg.baseline.redo_tau, &mut streams.agent)?;
            }

            for e in &episodes {
                rows.push(MetricsRow {
                    global_step: task_start_step + it * interval + e.offset as u64 + 1,
                    task_index: task_idx,
                    episode_return: e.episode_return,
                    l_main: diag_state.l_main,
                    l_churn: diag_state.l_churn,
                    lambda: diag_state.lambda,
                    measured_churn: diag_state.measured_churn,
                    srank: diag_state.srank,
                    offdiag_abs_sum: diag_state.offdiag,
                    diag_abs_sum: diag_state.diag,
                    wall_time: 0.0,
                });
            }
            global_iter += 1;
        }
        task_start_step += task.budget_n;
    }

    let (j_overall, per_task_j) = avg_performance(&rows, seq.len());
    Ok(RunResult {
        rows,
        final_params: agent.net.params().clone(),
        per_task_j,
        j_overall,
        method: cfg.method,
        env_label: cfg.env_label(),
        seed,
        ntk_snapshots,
        out_dir: out_dir.map(|p| p.to_path_buf()),
    })
}

fn run_dqn(
    cfg: &RunConfig,
    seq: &TaskSequence,
    stream_index: u64,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    let spec = seq.tasks[0].env;
    let net_cfg = rl_net_config(cfg, spec.obs_dim, spec.action_count);
    let seed = cfg.seed;
    let mut agent = DqnAgent::new(
        init_network(net_cfg.clone(), crate::rng::derive_seed(seed, Stream::NetInit, stream_index))?,
        cfg.dqn.clone(),
    )?;
    let mut streams = Streams::at(seed, stream_index);
    let mut replay = ReplayBuffer::new(cfg.dqn.replay_capacity);
    let mut plugins = build_plugins(cfg, cfg.dqn.batch);
    let eps_decay = cfg.dqn.eps_decay_steps.unwrap_or(seq.tasks[0].budget_n);
    let probe_every = cfg.diagnostics.probe_every(cfg.agent);

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut diag_state = DiagState::default();
    let mut ntk_snapshots = 0usize;
    let mut task_start_step = 0u64;

    for (task_idx, task) in seq.tasks.iter().enumerate() {
        if task_idx > 0 {
            match cfg.method {
                Method::Oracle => {
                    let idx = stream_index + task_idx as u64;
                    oracle_reset(
                        &mut agent.q_net,
                        &mut agent.opt,
                        crate::rng::derive_seed(seed, Stream::NetInit, idx),
                    )?;
                    agent.reset_counters();
                    replay.clear();
                    streams = Streams::at(seed, idx);
                    plugins = build_plugins(cfg, cfg.dqn.batch);
                    diag_state = DiagState::default();
                }
                Method::AdamRel => agent.opt.task_switch(SwitchMode::AdamRel),
                _ => {}
            }
        }
        let mut cursor = EnvCursor::reset(task, &mut streams.env);
        maybe_per_step_noise(&mut cursor.obs, cfg, &mut streams.env);
        for step_in_task in 0..task.budget_n {
            let action =
                agent.act(&cursor.obs, spec.action_count, eps_decay, &mut streams.agent)?;
            let outcome = envs::step(task, &cursor.state, action)?;
            let mut next_obs = outcome.obs.clone();
            maybe_per_step_noise(&mut next_obs, cfg, &mut streams.env);
            cursor.episode_return += outcome.reward;
            cursor.episode_len += 1;
            agent.steps_done += 1;
            replay.push(Transition {
                obs: cursor.obs.clone(),
                action,
                reward: outcome.reward,
                next_obs: next_obs.clone(),
                done: outcome.terminated,
            });

            let boundary = step_in_task + 1 == task.budget_n;
            if outcome.terminated || outcome.truncated || boundary {
                rows.push(MetricsRow {
                    global_step: task_start_step + step_in_task + 1,
                    task_index: task_idx,
                    episode_return: cursor.episode_return,
                    l_main: diag_state.l_main,
                    l_churn: diag_state.l_churn,
                    lambda: diag_state.lambda,
                    measured_churn: diag_state.measured_churn,
                    srank: diag_state.srank,
                    offdiag_abs_sum: diag_state.offdiag,
                    diag_abs_sum: diag_state.diag,
                    wall_time: 0.0,
                });
                cursor = EnvCursor::reset(task, &mut streams.env);
                maybe_per_step_noise(&mut cursor.obs, cfg, &mut streams.env);
            } else {
                cursor.state = outcome.state;
                cursor.obs = next_obs;
            }

            if agent.ready_to_train(replay.len())
                && agent.steps_done % cfg.dqn.train_interval == 0
            {
                // NTK snapshot (training-step granularity) before the update.
                if cfg.diagnostics.ntk_every > 0 && agent.train_steps % cfg.diagnostics.ntk_every == 0
                {
                    let window = replay.recent_indices(replay.len().min(800));
                    let m = cfg.diagnostics.ntk_batches;
                    if window.len() >= m {
                        let q_net = &agent.q_net;
                        let target_net = &agent.target_net;
                        let gamma = cfg.dqn.gamma;
                        let grads =
                            collect_minibatch_grads(window.len(), m, &mut streams.diag, |idx| {
                                let batch: Vec<&Transition> =
                                    idx.iter().map(|&i| replay.get(window[i])).collect();
                                let obs_rows: Vec<Vec<f64>> =
                                    batch.iter().map(|t| t.obs.clone()).collect();
                                let obs = Matrix::from_rows(&obs_rows)?;
                                let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
                                let ys = crate::agents::dqn::double_dqn_target(
                                    q_net, target_net, &batch, gamma,
                                )?;
                                let (_, g) = crate::agents::dqn::td_loss(q_net, &obs, &actions, &ys)?;
                                Ok(g)
                            })?;
                        let report = ntk_report(
                            &grads,
                            cfg.diagnostics.ntk_delta,
                            agent.train_steps,
                            task_idx,
                        );
                        diag_state.srank = Some(report.srank);
                        diag_state.offdiag = Some(report.offdiag_abs_sum);
                        diag_state.diag = Some(report.diag_abs_sum);
                        ntk_snapshots += 1;
                        if cfg.diagnostics.ntk_dump {
                            if let Some(dir) = out_dir {
                                std::fs::write(
                                    dir.join(format!("ntk_iter{}.csv", agent.train_steps)),
                                    csvio::matrix_to_csv(&report.matrix),
                                )?;
                            }
                        }
                    }
                }

                let probe = probe_every > 0 && agent.train_steps % probe_every == 0;
                let stats = agent.train_step(
                    &replay,
                    &mut plugins,
                    &mut streams.agent,
                    probe.then_some(&mut streams.diag),
                )?;
                diag_state.l_main = stats.td_loss;
                diag_state.l_churn = stats.churn_loss;
                diag_state.lambda = stats.lambda;
                if let Some(c) = stats.probed_churn {
                    diag_state.measured_churn = Some(c);
                }

                if cfg.method == Method::Redo && agent.train_steps % cfg.baseline.redo_interval == 0
                {
                    let idx = replay.recent_indices(replay.len().min(256));
                    let probe_rows: Vec<Vec<f64>> =
                        idx.iter().map(|&i| replay.get(i).obs.clone()).collect();
                    let probe_x = Matrix::from_rows(&probe_rows)?;
                    redo_recycle(&mut agent.q_net, &probe_x, cfg.baseline.redo_tau, &mut streams.agent)?;
                }
            }
        }
        task_start_step += task.budget_n;
    }

    let (j_overall, per_task_j) = avg_performance(&rows, seq.len());
    Ok(RunResult {
        rows,
        final_params: agent.q_net.params().clone(),
        per_task_j,
        j_overall,
        method: cfg.method,
        env_label: cfg.env_label(),
        seed,
        ntk_snapshots,
        out_dir: out_dir.map(|p| p.to_path_buf()),
    })
}

fn run_sl_experiment(cfg: &mut RunConfig) -> Result<RunResult> {
    let sl_cfg = cfg.sl.as_mut().expect("validated");
    let dataset = match (&sl_cfg.dataset_images, &sl_cfg.dataset_labels) {
        (Some(images), Some(labels)) => sl::load_idx(images, labels)?,
        (None, None) => sl::synthetic_digits(sl_cfg.fixture_per_class, 0xD161_75),
        _ => {
            return Err(Error::Config(
                "dataset_images and dataset_labels must be given together".into(),
            ))
        }
    };
    sl_cfg.resolve(dataset.len());
    let sl_cfg = sl_cfg.clone();

    let hidden = cfg.hidden_layers.clone().unwrap_or_else(|| vec![256, 256]);
    let mut sizes = vec![dataset.pixel_count()];
    sizes.extend(hidden);
    sizes.push(dataset.classes);
    let net_cfg = MlpConfig {
        layer_sizes: sizes,
        activation: cfg.activation.unwrap_or(Activation::Relu),
        use_layer_norm: false,
        init_scheme: InitScheme::UniformFanin,
        value_head: None,
    };
    let seed = cfg.seed;
    let mut net = init_network(net_cfg, crate::rng::derive_seed(seed, Stream::NetInit, 0))?;
    let mut opt = Optimizer::adam(sl_cfg.lr, net.param_count());
    let sequence = sl::make_sl_sequence(
        &dataset,
        sl_cfg.kind,
        sl_cfg.num_tasks.unwrap(),
        sl_cfg.per_task_n.unwrap(),
        sl_cfg.epochs_per_task.unwrap(),
        seed,
    )?;
    let mut plugins = build_plugins(cfg, sl_cfg.minibatch);
    let mut agent_rng = stream_rng(seed, Stream::Agent, 0);

    let mut rows: Vec<MetricsRow> = Vec::new();
    let (summary, per_task) = sl::train_sl(
        &mut net,
        &mut opt,
        &dataset,
        &sequence,
        sl_cfg.minibatch,
        &mut plugins,
        &mut agent_rng,
        |s| {
            rows.push(MetricsRow {
                global_step: s.samples_seen,
                task_index: s.task,
                episode_return: s.online_accuracy,
                l_main: s.loss,
                l_churn: s.churn_loss,
                lambda: s.lambda,
                measured_churn: None,
                srank: None,
                offdiag_abs_sum: None,
                diag_abs_sum: None,
                wall_time: 0.0,
            });
        },
    )?;

    Ok(RunResult {
        rows,
        final_params: net.params().clone(),
        per_task_j: per_task.iter().map(|&a| Some(a)).collect(),
        j_overall: Some(summary.average_accuracy),
        method: cfg.method,
        env_label: cfg.env_label(),
        seed,
        ntk_snapshots: 0,
        out_dir: None,
    })
}

/// Recomputes approximate rank and off-diagonal statistics from a run
/// directory's dumped NTK matrices; returns (iteration, srank, offdiag,
/// diag) per file, sorted by iteration.
pub fn diagnose_run(dir: &Path, delta: f64) -> Result<Vec<(u64, usize, f64, f64)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(iter_str) = name.strip_prefix("ntk_iter").and_then(|s| s.strip_suffix(".csv")) {
            let iteration: u64 = iter_str
                .parse()
                .map_err(|_| Error::Format(format!("bad NTK dump name {name}")))?;
            let matrix = csvio::read_matrix_csv(&entry.path())?;
            let rank = crate::ntk::srank(&matrix, delta);
            let (off, diag) = crate::ntk::offdiag_stats(&matrix);
            out.push((iteration, rank, off, diag));
        }
    }
    out.sort_by_key(|&(i, ..)| i);
    Ok(out)
}
