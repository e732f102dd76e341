//! Empirical NTK collection and plasticity diagnostics.
//!
//! Once per training iteration (before the update) the iteration's data
//! is partitioned into m random mini-batches; the per-mini-batch policy
//! gradients g_i form the m×m kernel N(i,j) = gᵢ·gⱼ. From the kernel we
//! track the approximate rank (smallest k whose top singular values hold
//! a 1−δ share of the total mass) and the absolute off-diagonal/diagonal
//! sums. Collection is a read-only probe: it draws randomness from its
//! own stream and never touches the training trajectory.
//!
//! The regression sandbox at the bottom demonstrates the first-order
//! error-dynamics law ℰ_{t+1} ≈ (I − ηNS)ℰ_t on fixed-target tasks with
//! squared loss, where S masks the sampled training columns.

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigenvalues, Matrix};
use crate::nn::{Network, ParamVector};
use crate::optim;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One NTK snapshot with its derived statistics.
#[derive(Debug, Clone)]
pub struct NtkReport {
    pub matrix: Matrix,
    pub srank: usize,
    pub offdiag_abs_sum: f64,
    pub diag_abs_sum: f64,
    pub iteration: u64,
    pub task_index: usize,
}

/// Randomly partitions `0..n_points` into `m` disjoint mini-batches
/// covering every index exactly once (sizes differ by at most one) and
/// returns `grad_fn`'s gradient for each.
pub fn collect_minibatch_grads<F>(
    n_points: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
    mut grad_fn: F,
) -> Result<Vec<ParamVector>>
where
    F: FnMut(&[usize]) -> Result<ParamVector>,
{
    if m == 0 || n_points < m {
        return Err(Error::Config(format!(
            "cannot partition {n_points} points into {m} mini-batches"
        )));
    }
    let mut indices: Vec<usize> = (0..n_points).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let base = n_points / m;
    let extra = n_points % m;
    let mut grads = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let size = base + usize::from(i < extra);
        let batch = &indices[start..start + size];
        start += size;
        grads.push(grad_fn(batch)?);
    }
    Ok(grads)
}

/// N(i,j) = gᵢ·gⱼ; symmetric PSD by construction.
pub fn empirical_ntk(grads: &[ParamVector]) -> Matrix {
    let m = grads.len();
    let mut n = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = grads[i].dot(&grads[j]);
            n.set(i, j, v);
            n.set(j, i, v);
        }
    }
    n
}

/// Smallest k whose top-k singular values hold at least a (1−δ) share
/// of the total singular-value mass. The all-zero matrix maps to 0.
pub fn srank(matrix: &Matrix, delta: f64) -> usize {
    // Symmetric PSD: singular values are the eigenvalue magnitudes.
    let sigmas: Vec<f64> = symmetric_eigenvalues(matrix).iter().map(|v| v.abs()).collect();
    let mut sorted = sigmas;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        log::warn!("srank of an all-zero matrix; reporting 0");
        return 0;
    }
    let threshold = (1.0 - delta) * total;
    let mut cum = 0.0;
    for (k, s) in sorted.iter().enumerate() {
        cum += s;
        if cum >= threshold {
            return k + 1;
        }
    }
    sorted.len()
}

/// (Σ off-diagonal |entries|, Σ diagonal |entries|).
pub fn offdiag_stats(matrix: &Matrix) -> (f64, f64) {
    assert_eq!(matrix.rows(), matrix.cols(), "offdiag stats need a square matrix");
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..matrix.rows() {
        for j in 0..matrix.cols() {
            let v = matrix.get(i, j).abs();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    (off, diag)
}

/// N·S with S the 0/1 diagonal selecting training columns; reference
/// columns are zeroed.
pub fn masked_ntk(matrix: &Matrix, train_indices: &[usize]) -> Result<Matrix> {
    let m = matrix.rows();
    let mut mask = vec![false; m];
    for &i in train_indices {
        if i >= m {
            return Err(Error::Dimension(format!(
                "training index {i} out of range for {m} columns"
            )));
        }
        mask[i] = true;
    }
    let mut out = Matrix::zeros(m, matrix.cols());
    for i in 0..m {
        for j in 0..matrix.cols() {
            if mask[j] {
                out.set(i, j, matrix.get(i, j));
            }
        }
    }
    Ok(out)
}

/// Full report for one iteration's gradients.
pub fn ntk_report(
    grads: &[ParamVector],
    delta: f64,
    iteration: u64,
    task_index: usize,
) -> NtkReport {
    let matrix = empirical_ntk(grads);
    let rank = srank(&matrix, delta);
    let (offdiag_abs_sum, diag_abs_sum) = offdiag_stats(&matrix);
    NtkReport { matrix, srank: rank, offdiag_abs_sum, diag_abs_sum, iteration, task_index }
}

/// One step of the error-dynamics sandbox trace.
#[derive(Debug, Clone, Copy)]
pub struct SandboxStep {
    pub step: usize,
    pub task: usize,
    /// ‖ℰ‖ before the update.
    pub err_norm: f64,
    /// ‖actual ℰ_{t+1} − (I − ηNS)ℰ_t‖.
    pub residual: f64,
}

/// Regression sandbox on fixed targets with squared per-point loss
/// L_i = ½(f*_i − f_θ(x_i))²: per step the masked points take one SGD
/// step on their summed loss (Δθ = η Σ_{i∈S} ℰ_i g_i), and the trace
/// records the realized error against the first-order prediction.
/// `schedule` maps each step to a task (a row of `targets_per_task`);
/// scalar-output networks only.
pub fn error_dynamics_sandbox(
    net: &mut Network,
    x: &Matrix,
    targets_per_task: &[Vec<f64>],
    schedule: &[usize],
    train_mask: &[bool],
    eta: f64,
) -> Result<Vec<SandboxStep>> {
    if net.config().output_dim() != 1 {
        return Err(Error::Config("sandbox needs a scalar-output network".into()));
    }
    let n = x.rows();
    if train_mask.len() != n {
        return Err(Error::Dimension("mask must cover every datapoint".into()));
    }
    for t in targets_per_task {
        if t.len() != n {
            return Err(Error::Dimension("targets must cover every datapoint".into()));
        }
    }
    let mut trace = Vec::with_capacity(schedule.len());
    for (step, &task) in schedule.iter().enumerate() {
        let targets = targets_per_task
            .get(task)
            .ok_or_else(|| Error::Config(format!("schedule references unknown task {task}")))?;
        // Per-point gradients and current errors.
        let mut grads = Vec::with_capacity(n);
        let mut errors = vec![0.0; n];
        for i in 0..n {
            let xi = Matrix::from_rows(&[x.row(i).to_vec()])?;
            let cache = net.forward(&xi)?;
            errors[i] = targets[i] - cache.outputs.get(0, 0);
            let dl = Matrix::from_rows(&[vec![1.0]])?;
            grads.push(net.backward(&cache, &dl)?);
        }
        let err_norm = errors.iter().map(|e| e * e).sum::<f64>().sqrt();

        // Predicted next error: ℰ' = (I − ηNS)ℰ.
        let mut predicted = vec![0.0; n];
        for i in 0..n {
            let mut coupling = 0.0;
            for j in 0..n {
                if train_mask[j] {
                    coupling += grads[i].dot(&grads[j]) * errors[j];
                }
            }
            predicted[i] = errors[i] - eta * coupling;
        }

        // SGD on the summed loss of the masked points: ∇_f L = −ℰ.
        let mut update = ParamVector::zeros(net.param_count());
        for j in 0..n {
            if train_mask[j] {
                update.axpy(&grads[j], -errors[j]);
            }
        }
        let new_params = optim::sgd_step(net.params(), &update, eta)?;
        net.set_params(new_params)?;

        // Realized error and residual against the prediction.
        let out = net.snapshot_outputs(x)?;
        let mut residual_sq = 0.0;
        for i in 0..n {
            let actual = targets[i] - out.get(i, 0);
            let d = actual - predicted[i];
            residual_sq += d * d;
        }
        trace.push(SandboxStep { step, task, err_norm, residual: residual_sq.sqrt() });
    }
    Ok(trace)
}
