//! Competing plasticity mechanisms: L2-Init (pull parameters toward
//! their initialization), absolute weight clipping, ReDo-style dormant
//! neuron recycling, and the oracle full reset at task switches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_network, BatchOutput, InitScheme, Network, ParamVector};
use crate::optim::Optimizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    L2Init,
    WeightClip,
    Redo,
    OracleReset,
    LayerNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_l2")]
    pub l2_coeff: f64,
    #[serde(default = "default_kappa")]
    pub clip_kappa: f64,
    #[serde(default = "default_tau")]
    pub redo_tau: f64,
    #[serde(default = "default_redo_interval")]
    pub redo_interval: u64,
}

fn default_l2() -> f64 {
    // Sweep grid {0.1, 1, 10, 100, 1000}; 1.0 is the desk default.
    1.0
}
fn default_kappa() -> f64 {
    // Sweep grid {0.1, 0.5, 1, 10}.
    1.0
}
fn default_tau() -> f64 {
    0.1
}
fn default_redo_interval() -> u64 {
    1000
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            l2_coeff: default_l2(),
            clip_kappa: default_kappa(),
            redo_tau: default_tau(),
            redo_interval: default_redo_interval(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2_coeff < 0.0 {
            return Err(Error::Config("l2 coefficient must be non-negative".into()));
        }
        if !(self.clip_kappa > 0.0) {
            return Err(Error::Config("clip bound must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.redo_tau) {
            return Err(Error::Config("redo tau must lie in [0, 1)".into()));
        }
        if self.redo_interval == 0 {
            return Err(Error::Config("redo interval must be positive".into()));
        }
        Ok(())
    }
}

/// Penalty c·‖θ−θ₀‖² and its gradient 2c(θ−θ₀).
pub fn l2_init_penalty(
    params: &ParamVector,
    init_params: &ParamVector,
    c: f64,
) -> Result<(f64, ParamVector)> {
    if params.len() != init_params.len() {
        return Err(Error::Dimension("init parameters do not match".into()));
    }
    let diff = params.sub(init_params);
    let penalty = c * diff.dot(&diff);
    Ok((penalty, diff.scaled(2.0 * c)))
}

/// Element-wise clamp of every parameter to [−κ, κ].
pub fn weight_clip(params: &ParamVector, kappa: f64) -> ParamVector {
    ParamVector(params.0.iter().map(|&v| v.clamp(-kappa, kappa)).collect())
}

/// Dormancy scores per hidden layer: mean |activation| per unit,
/// normalized by the layer's mean over units.
pub fn dormancy_scores(cache: &BatchOutput) -> Vec<Vec<f64>> {
    cache
        .hidden_activations()
        .iter()
        .map(|h| {
            let units = h.cols();
            let mut means = vec![0.0; units];
            for i in 0..h.rows() {
                for (j, m) in means.iter_mut().enumerate() {
                    *m += h.get(i, j).abs();
                }
            }
            for m in means.iter_mut() {
                *m /= h.rows() as f64;
            }
            let layer_mean: f64 = means.iter().sum::<f64>() / units as f64;
            if layer_mean <= 0.0 {
                vec![0.0; units]
            } else {
                means.iter().map(|&m| m / layer_mean).collect()
            }
        })
        .collect()
}

/// Recycles dormant hidden units: any unit whose normalized mean
/// activation magnitude is ≤ τ gets its incoming weights re-drawn, its
/// bias zeroed, and its outgoing weights zeroed, so the network's
/// outputs on the probe batch are unchanged at the recycle instant.
/// Returns the number of recycled units.
pub fn redo_recycle(
    net: &mut Network,
    activation_batch: &crate::linalg::Matrix,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if activation_batch.rows() == 0 {
        return Err(Error::Input("dormancy probe batch is empty".into()));
    }
    let cache = net.forward(activation_batch)?;
    let scores = dormancy_scores(&cache);
    let layout = net.layout().clone();
    let scheme = net.config().init_scheme;
    let n_trunk = layout.trunk.len();
    let mut recycled = 0;
    for (l, layer_scores) in scores.iter().enumerate() {
        let slot = layout.trunk[l];
        for (unit, &score) in layer_scores.iter().enumerate() {
            if score > tau {
                continue;
            }
            recycled += 1;
            let params = net.params_mut();
            // Fresh incoming weights, zero bias.
            let row = &mut params.0[slot.w_off + unit * slot.in_dim..slot.w_off + (unit + 1) * slot.in_dim];
            match scheme {
                InitScheme::UniformFanin => {
                    let limit = 1.0 / (slot.in_dim as f64).sqrt();
                    for w in row.iter_mut() {
                        *w = (rng.gen::<f64>() * 2.0 - 1.0) * limit;
                    }
                }
                InitScheme::OrthogonalScaled => {
                    // Per-unit re-draw approximating the row scale of the
                    // orthogonal init: Gaussian with std √2/√in.
                    let std = std::f64::consts::SQRT_2 / (slot.in_dim as f64).sqrt();
                    for w in row.iter_mut() {
                        *w = std * crate::rng::next_gaussian(rng);
                    }
                }
            }
            params.0[slot.b_off + unit] = 0.0;
            if let Some((g_off, beta_off)) = slot.ln_off {
                params.0[g_off + unit] = 1.0;
                params.0[beta_off + unit] = 0.0;
            }
            // Zero outgoing weights: the next trunk layer's column, plus
            // the value head's column when this is the last hidden layer.
            let next = layout.trunk[l + 1];
            for o in 0..next.out_dim {
                params.0[next.w_off + o * next.in_dim + unit] = 0.0;
            }
            if l + 2 == n_trunk {
                if let Some(vslot) = layout.value {
                    for o in 0..vslot.out_dim {
                        params.0[vslot.w_off + o * vslot.in_dim + unit] = 0.0;
                    }
                }
            }
        }
    }
    Ok(recycled)
}

/// Full agent re-initialization at a task switch: fresh parameter draw
/// (deterministic in the seed) and cleared optimizer state. The caller
/// clears its buffers.
pub fn oracle_reset(net: &mut Network, opt: &mut Optimizer, seed: u64) -> Result<()> {
    *net = init_network(net.config().clone(), seed)?;
    opt.reset(net.param_count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::linalg::Matrix;
    use crate::nn::{Activation, MlpConfig};
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn l2_init_basics_and_gradient() {
        let p0 = ParamVector(vec![1.0, 2.0]);
        let (pen, grad) = l2_init_penalty(&p0, &p0, 10.0).unwrap();
        assert_eq!(pen, 0.0);
        assert!(grad.0.iter().all(|&v| v == 0.0));

        let p = ParamVector(vec![2.0, 2.0]); // θ−θ₀ = (1, 0)
        let (pen, grad) = l2_init_penalty(&p, &p0, 10.0).unwrap();
        assert_eq!(pen, 10.0);
        assert_eq!(grad.0, vec![20.0, 0.0]);

        assert!(l2_init_penalty(&p, &ParamVector::zeros(3), 1.0).is_err());
    }

    #[test]
    fn l2_init_gradient_matches_finite_differences() {
        let net = crate::nn::init_network(MlpConfig::new(vec![3, 6, 2], Activation::Tanh), 3).unwrap();
        let mut moved = net.clone();
        for (i, v) in moved.params_mut().0.iter_mut().enumerate() {
            *v += 0.01 * (i as f64 % 7.0 - 3.0);
        }
        let c = 2.5;
        let (_, analytic) = l2_init_penalty(moved.params(), moved.init_params(), c).unwrap();
        let init = moved.init_params().clone();
        let fd = gradcheck::central_diff_net(&moved, 1e-6, |n| {
            l2_init_penalty(n.params(), &init, c).unwrap().0
        });
        assert!(gradcheck::rel_err(&analytic, &fd) < 1e-5);
    }

    #[test]
    fn weight_clip_clamps_and_is_idempotent() {
        let p = ParamVector(vec![1.5, -0.3, -2.0, 0.9]);
        let c = weight_clip(&p, 1.0);
        assert_eq!(c.0, vec![1.0, -0.3, -1.0, 0.9]);
        assert_eq!(weight_clip(&c, 1.0), c);
        // Inside the bound: unchanged.
        let small = ParamVector(vec![0.1, -0.2]);
        assert_eq!(weight_clip(&small, 1.0), small);
        assert!(c.0.iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn redo_zero_activation_unit_is_recycled_and_outputs_preserved() {
        let mut cfg = MlpConfig::new(vec![3, 8, 4, 2], Activation::Relu);
        cfg.init_scheme = InitScheme::UniformFanin;
        let mut net = crate::nn::init_network(cfg, 5).unwrap();
        // Kill unit 2 of layer 0: zero incoming weights and a very
        // negative bias make it identically zero under ReLU.
        let slot = net.layout().trunk[0];
        {
            let p = net.params_mut();
            for i in 0..slot.in_dim {
                p.0[slot.w_off + 2 * slot.in_dim + i] = 0.0;
            }
            p.0[slot.b_off + 2] = -5.0;
        }
        let mut rng = stream_rng(8, Stream::Agent, 0);
        let mut probe = Matrix::zeros(16, 3);
        for v in probe.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let before = net.snapshot_outputs(&probe).unwrap();
        let count = redo_recycle(&mut net, &probe, 0.0, &mut rng).unwrap();
        assert!(count >= 1, "the dead unit is recycled even at tau = 0");
        let after = net.snapshot_outputs(&probe).unwrap();
        assert!(
            before.max_abs_diff(&after) < 1e-12,
            "outputs unchanged at the recycle instant"
        );
        // The recycled unit's incoming weights are fresh (non-zero).
        let w2: f64 = (0..slot.in_dim)
            .map(|i| net.params().0[slot.w_off + 2 * slot.in_dim + i].abs())
            .sum();
        assert!(w2 > 0.0);
    }

    #[test]
    fn redo_all_active_units_recycles_nothing() {
        let mut cfg = MlpConfig::new(vec![3, 8, 2], Activation::Tanh);
        cfg.init_scheme = InitScheme::UniformFanin;
        let mut net = crate::nn::init_network(cfg, 6).unwrap();
        let mut rng = stream_rng(9, Stream::Agent, 0);
        let mut probe = Matrix::zeros(16, 3);
        for v in probe.data_mut() {
            *v = rng.gen::<f64>() * 2.0 - 1.0;
        }
        let before = net.params().clone();
        let count = redo_recycle(&mut net, &probe, 0.0, &mut rng).unwrap();
        assert_eq!(count, 0);
        assert_eq!(&before, net.params());
    }

    #[test]
    fn oracle_reset_matches_fresh_init_and_is_deterministic() {
        let cfg = MlpConfig::new(vec![4, 8, 2], Activation::Tanh);
        let mut net = crate::nn::init_network(cfg.clone(), 1).unwrap();
        let mut opt = Optimizer::adam(1e-3, net.param_count());
        // Disturb both.
        for v in net.params_mut().0.iter_mut() {
            *v += 1.0;
        }
        let g = ParamVector(vec![0.1; net.param_count()]);
        let p = opt.step(net.params(), &g).unwrap();
        net.set_params(p).unwrap();

        oracle_reset(&mut net, &mut opt, 99).unwrap();
        let fresh = crate::nn::init_network(cfg, 99).unwrap();
        assert_eq!(net.params(), fresh.params());
        assert_eq!(net.init_params(), fresh.init_params());
        if let Optimizer::Adam { state, .. } = &opt {
            assert_eq!(state.t, 0);
            assert!(state.m.0.iter().all(|&v| v == 0.0));
        }
    }
}
