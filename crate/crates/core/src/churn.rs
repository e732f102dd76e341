//! Churn measurement and reduction.
//!
//! Churn is the change a parameter update induces in network outputs on
//! data outside the training batch. This module measures it exactly
//! (double forward), predicts it to first order from the empirical NTK,
//! and implements the churn-reduction update used by the continual
//! agents: each minibatch step takes the main-loss gradient on the
//! training batch, the churn gradient on a disjoint reference batch
//! against output targets snapshotted from this same network earlier
//! (pre-update parameters: the iteration-start policy for PPO, the
//! previous step's parameters for DQN), and commits a single optimizer
//! step on `g_main + λ·g_churn`. The coefficient λ is auto-adjusted to
//! hold a target relative scale β between the running mean absolute
//! main loss and churn loss; because the churn running mean tracks the
//! committed steps' drift, over-regularization lowers later λ values
//! and the loop self-stabilizes.
//!
//! A `two_phase` flag switches to the literal two-pass variant: commit
//! the main step, re-snapshot, then commit a second optimizer step on
//! the churn gradient alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Network, ParamVector};
use crate::optim::Optimizer;

const LAMBDA_FLOOR: f64 = 1e-12;

/// Which network outputs the churn distance is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Log-softmax of the policy logits (value-head columns excluded).
    PolicyLogprobs,
    /// The raw action-value vector.
    QValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Use the full churn gradient.
    Full,
    /// Keep only the component parallel to the main gradient.
    ProjOnly,
    /// Keep only the component orthogonal to the main gradient.
    OrthOnly,
    /// Disable the regularizer; reduces to the vanilla step exactly.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnConfig {
    /// Target relative loss scale between main and churn terms.
    pub beta: f64,
    /// Reference batch size (defaults to the training minibatch size).
    pub ref_batch_size: usize,
    /// Exponential-moving-average decay for the running means.
    pub ema_decay: f64,
    pub output_mode: OutputMode,
    pub ablation_mode: AblationMode,
    /// Literal two-step variant: commit the main step, then a second
    /// optimizer step on the churn gradient.
    pub two_phase: bool,
}

impl ChurnConfig {
    pub fn for_ppo(minibatch: usize) -> Self {
        ChurnConfig {
            beta: 1e4,
            ref_batch_size: minibatch,
            ema_decay: 0.99,
            output_mode: OutputMode::PolicyLogprobs,
            ablation_mode: AblationMode::Full,
            two_phase: false,
        }
    }

    pub fn for_dqn(batch: usize) -> Self {
        ChurnConfig {
            beta: 0.01,
            ref_batch_size: batch,
            ema_decay: 0.99,
            output_mode: OutputMode::QValues,
            ablation_mode: AblationMode::Full,
            two_phase: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("churn beta must be positive".into()));
        }
        if self.ref_batch_size == 0 {
            return Err(Error::Config("reference batch size must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema decay must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Running means of |main loss| and |churn loss|.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMeans {
    pub mean_abs_main_loss: f64,
    pub mean_abs_churn_loss: f64,
    main_initialized: bool,
    churn_initialized: bool,
    decay: f64,
}

impl RunningMeans {
    pub fn new(decay: f64) -> Self {
        RunningMeans {
            mean_abs_main_loss: 0.0,
            mean_abs_churn_loss: 0.0,
            main_initialized: false,
            churn_initialized: false,
            decay,
        }
    }

    pub fn initialized(&self) -> bool {
        self.main_initialized && self.churn_initialized
    }

    pub fn update_main(&mut self, loss: f64) {
        let v = loss.abs();
        if self.main_initialized {
            self.mean_abs_main_loss = self.decay * self.mean_abs_main_loss + (1.0 - self.decay) * v;
        } else {
            self.mean_abs_main_loss = v;
            self.main_initialized = true;
        }
    }

    pub fn update_churn(&mut self, loss: f64) {
        let v = loss.abs();
        if self.churn_initialized {
            self.mean_abs_churn_loss = self.decay * self.mean_abs_churn_loss + (1.0 - self.decay) * v;
        } else {
            self.mean_abs_churn_loss = v;
            self.churn_initialized = true;
        }
    }
}

/// λ = β·|L̄_main| / max(|L̄_churn|, floor); zero until both means have
/// seen a value, so the very first step is unregularized.
pub fn auto_lambda(rm: &RunningMeans, beta: f64) -> f64 {
    if !rm.initialized() {
        return 0.0;
    }
    beta * rm.mean_abs_main_loss / rm.mean_abs_churn_loss.max(LAMBDA_FLOOR)
}

/// Outputs in the configured churn space: log-softmax of the policy
/// logits, or the raw action-value vector.
pub fn mode_outputs(net: &Network, x: &Matrix, mode: OutputMode) -> Result<Matrix> {
    let out = net.snapshot_outputs(x)?;
    Ok(match mode {
        OutputMode::QValues => out,
        OutputMode::PolicyLogprobs => {
            let p = net.config().policy_dim();
            let mut lp = Matrix::zeros(out.rows(), p);
            for i in 0..out.rows() {
                let row = log_softmax(&out.row(i)[..p]);
                lp.row_mut(i).copy_from_slice(&row);
            }
            lp
        }
    })
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lp = log_softmax(logits);
    lp.iter().map(|&v| v.exp()).collect()
}

/// Exact churn between two networks on a reference batch: the mean over
/// rows of the squared L2 distance between outputs in the churn space.
pub fn measure_churn(
    net_before: &Network,
    net_after: &Network,
    ref_x: &Matrix,
    mode: OutputMode,
) -> Result<f64> {
    if net_before.config() != net_after.config() {
        return Err(Error::Config("churn requires identical architectures".into()));
    }
    let a = mode_outputs(net_before, ref_x, mode)?;
    let b = mode_outputs(net_after, ref_x, mode)?;
    let mut total = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let d = b.get(i, j) - a.get(i, j);
            total += d * d;
        }
    }
    Ok(total / a.rows() as f64)
}

/// Signed per-point output change for scalar-output networks,
/// f_after(x_i) − f_before(x_i).
pub fn output_deltas(net_before: &Network, net_after: &Network, x: &Matrix) -> Result<Vec<f64>> {
    if net_before.config().output_dim() != 1 {
        return Err(Error::Config("output deltas need a scalar-output network".into()));
    }
    let a = net_before.snapshot_outputs(x)?;
    let b = net_after.snapshot_outputs(x)?;
    Ok((0..a.rows()).map(|i| b.get(i, 0) - a.get(i, 0)).collect())
}

/// First-order churn prediction −η·N_θ·S·G_L at every datapoint, with
/// N_θ(i,j) = gᵢ·gⱼ and S the 0/1 training-column mask. Entries at
/// reference rows predict churn; entries at training rows predict the
/// direct training change.
pub fn predict_churn_ntk(
    grads: &[ParamVector],
    train_mask: &[bool],
    loss_grads: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    let n = grads.len();
    if train_mask.len() != n || loss_grads.len() != n {
        return Err(Error::Dimension(format!(
            "gradients ({n}), mask ({}) and loss gradients ({}) must align",
            train_mask.len(),
            loss_grads.len()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = grads[0].len();
    if grads.iter().any(|g| g.len() != d) {
        return Err(Error::Dimension("gradient lengths differ".into()));
    }
    let mut out = vec![0.0; n];
    for (i, gi) in grads.iter().enumerate() {
        let mut acc = 0.0;
        for (j, gj) in grads.iter().enumerate() {
            if train_mask[j] && loss_grads[j] != 0.0 {
                acc += gi.dot(gj) * loss_grads[j];
            }
        }
        out[i] = -eta * acc;
    }
    Ok(out)
}

/// Churn-reduction loss L = ½·mean over rows of ‖outputs(net) − snapshot‖²
/// in the churn output space, with its analytic gradient.
pub fn churn_loss_and_grad(
    net: &Network,
    snapshot: &Matrix,
    ref_x: &Matrix,
    mode: OutputMode,
) -> Result<(f64, ParamVector)> {
    let cache = net.forward(ref_x)?;
    let out = &cache.outputs;
    let pdim = net.config().policy_dim();
    let (mode_cols, full_cols) = match mode {
        OutputMode::PolicyLogprobs => (pdim, out.cols()),
        OutputMode::QValues => (out.cols(), out.cols()),
    };
    if snapshot.rows() != out.rows() || snapshot.cols() != mode_cols {
        return Err(Error::Dimension(format!(
            "snapshot is {}x{}, expected {}x{}",
            snapshot.rows(),
            snapshot.cols(),
            out.rows(),
            mode_cols
        )));
    }
    let rows = out.rows();
    let mut loss = 0.0;
    let mut dl = Matrix::zeros(rows, full_cols);
    match mode {
        OutputMode::QValues => {
            for i in 0..rows {
                for j in 0..mode_cols {
                    let d = out.get(i, j) - snapshot.get(i, j);
                    loss += d * d;
                    dl.set(i, j, d);
                }
            }
        }
        OutputMode::PolicyLogprobs => {
            for i in 0..rows {
                let lp = log_softmax(&out.row(i)[..pdim]);
                let probs: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
                let mut diff_sum = 0.0;
                let mut diffs = vec![0.0; pdim];
                for j in 0..pdim {
                    let d = lp[j] - snapshot.get(i, j);
                    loss += d * d;
                    diffs[j] = d;
                    diff_sum += d;
                }
                // d‖lp − snap‖²/2 through log-softmax: diff − p·Σdiff.
                for j in 0..pdim {
                    dl.set(i, j, diffs[j] - probs[j] * diff_sum);
                }
            }
        }
    }
    loss *= 0.5 / rows as f64;
    let grad = net.backward(&cache, &dl)?;
    Ok((loss, grad))
}

/// Splits a churn gradient into its projection onto the main gradient
/// and the orthogonal remainder; proj + orth reconstructs the input.
pub fn decompose_gradient(g_cr: &ParamVector, g_main: &ParamVector) -> (ParamVector, ParamVector) {
    assert_eq!(g_cr.len(), g_main.len());
    let denom = g_main.dot(g_main);
    if denom <= 0.0 {
        return (ParamVector::zeros(g_cr.len()), g_cr.clone());
    }
    let coef = g_cr.dot(g_main) / denom;
    let proj = g_main.scaled(coef);
    let orth = g_cr.sub(&proj);
    (proj, orth)
}

/// Per-step record from [`chain_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainStepStats {
    pub lambda: f64,
    pub main_loss: f64,
    pub churn_loss: f64,
    /// Exact churn of the committed step, measured on the reference batch.
    pub measured_churn: f64,
}

/// One regularized update. The main loss/gradient comes from the caller
/// via `main_loss_fn` on the training batch; the reference batch enters
/// through its inputs plus `snapshot`, the churn targets captured from
/// this same network earlier at pre-update parameters. Training and
/// reference index sets must be disjoint.
#[allow(clippy::too_many_arguments)]
pub fn chain_step<F>(
    net: &mut Network,
    opt: &mut Optimizer,
    train_indices: &[usize],
    ref_indices: &[usize],
    ref_x: &Matrix,
    snapshot: &Matrix,
    main_loss_fn: F,
    cfg: &ChurnConfig,
    means: &mut RunningMeans,
) -> Result<ChainStepStats>
where
    F: FnOnce(&Network) -> Result<(f64, ParamVector)>,
{
    for i in train_indices {
        if ref_indices.contains(i) {
            return Err(Error::Config(format!(
                "training and reference batches overlap at index {i}"
            )));
        }
    }
    let mode = cfg.output_mode;
    let (main_loss, g_main) = main_loss_fn(net)?;

    if matches!(cfg.ablation_mode, AblationMode::Off) {
        let before = net.clone();
        let new_params = opt.step(net.params(), &g_main)?;
        net.set_params(new_params)?;
        let measured = measure_churn(&before, net, ref_x, mode)?;
        means.update_main(main_loss);
        return Ok(ChainStepStats { lambda: 0.0, main_loss, churn_loss: 0.0, measured_churn: measured });
    }

    let lambda = auto_lambda(means, cfg.beta);
    let stats = if cfg.two_phase {
        // Literal two-pass variant: main step, then a churn step.
        let before = net.clone();
        let after_main = opt.step(net.params(), &g_main)?;
        net.set_params(after_main)?;
        let (churn_loss, g_churn_raw) = churn_loss_and_grad(net, snapshot, ref_x, mode)?;
        let g_churn = apply_ablation(cfg.ablation_mode, &g_churn_raw, &g_main);
        let final_params = opt.step(net.params(), &g_churn.scaled(lambda))?;
        net.set_params(final_params)?;
        let measured = measure_churn(&before, net, ref_x, mode)?;
        ChainStepStats { lambda, main_loss, churn_loss, measured_churn: measured }
    } else {
        // Fused step: one committed update on the combined gradient.
        let (churn_loss, g_churn_raw) = churn_loss_and_grad(net, snapshot, ref_x, mode)?;
        let g_churn = apply_ablation(cfg.ablation_mode, &g_churn_raw, &g_main);
        let before = net.clone();
        let combined = g_main.add_scaled(&g_churn, lambda);
        let final_params = opt.step(net.params(), &combined)?;
        net.set_params(final_params)?;
        let measured = measure_churn(&before, net, ref_x, mode)?;
        ChainStepStats { lambda, main_loss, churn_loss, measured_churn: measured }
    };
    means.update_main(main_loss);
    means.update_churn(stats.churn_loss);
    Ok(stats)
}

fn apply_ablation(mode: AblationMode, g_churn: &ParamVector, g_main: &ParamVector) -> ParamVector {
    match mode {
        AblationMode::Full | AblationMode::Off => g_churn.clone(),
        AblationMode::ProjOnly => decompose_gradient(g_churn, g_main).0,
        AblationMode::OrthOnly => decompose_gradient(g_churn, g_main).1,
    }
}
