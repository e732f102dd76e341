//! First-order optimizers as pure functions of (state, params, grad),
//! plus the task-switch handling used by the continual experiments:
//! `adam_rel` restarts the bias-correction timestep at a task boundary,
//! `full_reset` additionally zeroes the moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: ParamVector::zeros(dim),
            v: ParamVector::zeros(dim),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// What happens to optimizer state when the task switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    Keep,
    /// Reset the timestep only; bias correction restarts, moments persist.
    AdamRel,
    /// Zero the moments and the timestep.
    FullReset,
}

fn check_pair(params: &ParamVector, grad: &ParamVector) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "params have {} entries, grad has {}",
            params.len(),
            grad.len()
        )));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(())
}

/// params − η·grad.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    check_pair(params, grad)?;
    Ok(params.add_scaled(grad, -lr))
}

/// One Adam step with bias correction; returns the new parameters and
/// the advanced state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamVector,
    lr: f64,
) -> Result<(ParamVector, AdamState)> {
    check_pair(params, grad)?;
    if state.m.len() != params.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    let t = state.t + 1;
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut out = params.clone();
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grad.0[i];
        m.0[i] = state.beta1 * m.0[i] + (1.0 - state.beta1) * g;
        v.0[i] = state.beta2 * v.0[i] + (1.0 - state.beta2) * g * g;
        let m_hat = m.0[i] / bc1;
        let v_hat = v.0[i] / bc2;
        out.0[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok((out, AdamState { m, v, t, ..*state }))
}

/// Task-boundary handling for the optimizer state.
pub fn on_task_switch(state: &AdamState, mode: SwitchMode) -> AdamState {
    match mode {
        SwitchMode::Keep => state.clone(),
        SwitchMode::AdamRel => AdamState { t: 0, ..state.clone() },
        SwitchMode::FullReset => AdamState {
            m: ParamVector::zeros(state.m.len()),
            v: ParamVector::zeros(state.v.len()),
            t: 0,
            ..*state
        },
    }
}

/// An optimizer bound to a learning rate, with owned state. This is the
/// form the training loops use; the pure functions above stay available
/// for direct calls.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, state: AdamState },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, dim: usize) -> Self {
        Optimizer::Adam { lr, state: AdamState::new(dim) }
    }

    /// Applies one step, committing any internal state.
    pub fn step(&mut self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
            Optimizer::Adam { lr, state } => {
                let (p, s) = adam_step(state, params, grad, *lr)?;
                *state = s;
                Ok(p)
            }
        }
    }

    /// Computes the parameters one step would produce without committing
    /// optimizer state.
    pub fn peek_step(&self, params: &ParamVector, grad: &ParamVector) -> Result<ParamVector> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
            Optimizer::Adam { lr, state } => Ok(adam_step(state, params, grad, *lr)?.0),
        }
    }

    pub fn task_switch(&mut self, mode: SwitchMode) {
        if let Optimizer::Adam { state, .. } = self {
            *state = on_task_switch(state, mode);
        }
    }

    /// Fresh state of the same kind, for full agent resets.
    pub fn reset(&mut self, dim: usize) {
        if let Optimizer::Adam { state, .. } = self {
            *state = AdamState::new(dim);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector(v.to_vec())
    }

    #[test]
    fn sgd_basics() {
        let p = pv(&[1.0, 1.0]);
        assert_eq!(sgd_step(&p, &pv(&[0.0, 0.0]), 0.5).unwrap(), p);
        assert_eq!(sgd_step(&p, &pv(&[1.0, -1.0]), 0.5).unwrap(), pv(&[0.5, 1.5]));
        // Pure: calling twice with the same inputs gives the same output,
        // and the input is untouched.
        let a = sgd_step(&p, &pv(&[1.0, -1.0]), 0.25).unwrap();
        let b = sgd_step(&p, &pv(&[1.0, -1.0]), 0.25).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, pv(&[1.0, 1.0]));
    }

    #[test]
    fn sgd_rejects_bad_inputs() {
        let p = pv(&[1.0, 1.0]);
        assert!(matches!(sgd_step(&p, &pv(&[1.0]), 0.1), Err(Error::Dimension(_))));
        assert!(matches!(sgd_step(&p, &pv(&[1.0, f64::NAN]), 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn first_adam_step_matches_hand_formula() {
        // At t = 1 the bias corrections cancel exactly:
        // m̂ = g, v̂ = g², so Δ = −η g/(|g| + ε).
        let st = AdamState::new(2);
        let p = pv(&[1.0, -2.0]);
        let g = pv(&[0.5, -2.0]);
        let lr = 0.1;
        let (next, st2) = adam_step(&st, &p, &g, lr).unwrap();
        for i in 0..2 {
            let want = p.0[i] - lr * g.0[i] / (g.0[i].abs() + st.eps);
            assert!((next.0[i] - want).abs() < 1e-15);
        }
        assert_eq!(st2.t, 1);
    }

    #[test]
    fn zero_grad_fresh_state_leaves_params_unchanged() {
        let st = AdamState::new(3);
        let p = pv(&[0.1, 0.2, 0.3]);
        let (next, _) = adam_step(&st, &p, &pv(&[0.0, 0.0, 0.0]), 0.01).unwrap();
        assert_eq!(next, p);
    }

    #[test]
    fn adam_replay_is_deterministic() {
        let grads = [pv(&[0.1, -0.3]), pv(&[0.2, 0.05]), pv(&[-0.4, 0.4])];
        let run = || {
            let mut st = AdamState::new(2);
            let mut p = pv(&[0.0, 0.0]);
            for g in &grads {
                let (np, ns) = adam_step(&st, &p, g, 0.05).unwrap();
                p = np;
                st = ns;
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn degenerate_adam_reduces_to_normalized_sgd() {
        // β1 = β2 = 0, ε → 0: update = −η g/|g| elementwise.
        let mut st = AdamState::new(3);
        st.beta1 = 0.0;
        st.beta2 = 0.0;
        st.eps = 1e-12;
        let p = pv(&[0.0, 0.0, 0.0]);
        let g = pv(&[0.3, -7.0, 0.001]);
        let (next, _) = adam_step(&st, &p, &g, 0.1).unwrap();
        for i in 0..3 {
            let want = -0.1 * g.0[i].signum();
            assert!((next.0[i] - want).abs() < 1e-8, "{} vs {}", next.0[i], want);
        }
    }

    #[test]
    fn task_switch_modes() {
        let mut st = AdamState::new(2);
        let p = pv(&[1.0, 1.0]);
        let g = pv(&[0.5, 0.5]);
        for _ in 0..10 {
            let (_, ns) = adam_step(&st, &p, &g, 0.01).unwrap();
            st = ns;
        }
        let kept = on_task_switch(&st, SwitchMode::Keep);
        assert_eq!(kept, st);

        let rel = on_task_switch(&st, SwitchMode::AdamRel);
        assert_eq!(rel.t, 0);
        assert_eq!(rel.m, st.m);
        assert_eq!(rel.v, st.v);
        // One step after adam_rel applies t = 1 bias correction again.
        let (_, after) = adam_step(&rel, &p, &g, 0.01).unwrap();
        assert_eq!(after.t, 1);

        let full = on_task_switch(&st, SwitchMode::FullReset);
        assert_eq!(full.t, 0);
        assert!(full.m.0.iter().all(|&v| v == 0.0));
        assert!(full.v.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn peek_step_does_not_commit_state() {
        let mut opt = Optimizer::adam(0.01, 2);
        let p = pv(&[1.0, 2.0]);
        let g = pv(&[0.3, -0.3]);
        let peeked = opt.peek_step(&p, &g).unwrap();
        let stepped = opt.step(&p, &g).unwrap();
        assert_eq!(peeked, stepped);
        if let Optimizer::Adam { state, .. } = &opt {
            assert_eq!(state.t, 1);
        }
    }
}
