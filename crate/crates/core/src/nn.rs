//! Dense MLPs in f64 with analytic reverse-mode gradients.
//!
//! Networks are flat-parameter machines: all weights, biases, and
//! layer-norm scales live in one [`ParamVector`] addressed through a
//! [`ParamLayout`]. That flat view is the coordinate system shared by the
//! optimizers, the churn/NTK machinery, weight clipping, and L2-Init.
//!
//! A network is `layer_sizes[0] -> hidden... -> layer_sizes[last]` with
//! the configured activation on hidden layers and a linear output layer.
//! With `value_head: Some(v)` an extra linear head of width `v` reads the
//! last hidden activation (shared-trunk actor-critic); its columns are
//! appended after the policy logits in every output matrix.
//!
//! Layer norm, when enabled, is applied to hidden pre-activations
//! (affine -> normalize -> scale/shift -> activation) with learned
//! per-unit scale and shift. Rows with variance below 1e-8 normalize to
//! zero instead of dividing by a vanishing variance.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{householder_thin_q, Matrix};
use crate::rng::next_gaussian;

const LN_VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Orthogonal weights: gain √2 on hidden layers, 0.01 on the policy
    /// logits head, 1.0 on the value head. Biases zero.
    OrthogonalScaled,
    /// U(-1/√fan_in, 1/√fan_in) weights, biases zero.
    UniformFanin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input dim, hidden sizes, output (policy) dim.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub use_layer_norm: bool,
    pub init_scheme: InitScheme,
    /// Extra linear head on the last hidden activation.
    pub value_head: Option<usize>,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        MlpConfig {
            layer_sizes,
            activation,
            use_layer_norm: false,
            init_scheme: InitScheme::OrthogonalScaled,
            value_head: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("need at least input and output sizes".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        if self.value_head == Some(0) {
            return Err(Error::Config("value head size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width of the policy/primary output.
    pub fn policy_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Total output width: policy dim plus value-head dim.
    pub fn output_dim(&self) -> usize {
        self.policy_dim() + self.value_head.unwrap_or(0)
    }

    fn n_affine(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Flat view of all network parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// self + c * other, as a new vector.
    pub fn add_scaled(&self, other: &ParamVector, c: f64) -> ParamVector {
        assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + c * b).collect())
    }

    /// self += c * other, in place.
    pub fn axpy(&mut self, other: &ParamVector, c: f64) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.add_scaled(other, -1.0)
    }
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w_off: usize,
    pub b_off: usize,
    /// Offsets of layer-norm (scale, shift), hidden layers only.
    pub ln_off: Option<(usize, usize)>,
}

/// Parameter addressing for a given [`MlpConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub trunk: Vec<LayerSlot>,
    pub value: Option<LayerSlot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(config: &MlpConfig) -> ParamLayout {
        let n = config.n_affine();
        let mut off = 0;
        let mut trunk = Vec::with_capacity(n);
        for l in 0..n {
            let in_dim = config.layer_sizes[l];
            let out_dim = config.layer_sizes[l + 1];
            let w_off = off;
            off += in_dim * out_dim;
            let b_off = off;
            off += out_dim;
            let hidden = l + 1 < config.layer_sizes.len() - 1;
            let ln_off = if config.use_layer_norm && hidden {
                let g = off;
                off += out_dim;
                let b = off;
                off += out_dim;
                Some((g, b))
            } else {
                None
            };
            trunk.push(LayerSlot { in_dim, out_dim, w_off, b_off, ln_off });
        }
        let value = config.value_head.map(|v| {
            let in_dim = config.layer_sizes[config.layer_sizes.len() - 2];
            let slot = LayerSlot { in_dim, out_dim: v, w_off: off, b_off: off + in_dim * v, ln_off: None };
            off += in_dim * v + v;
            slot
        });
        ParamLayout { trunk, value, total: off }
    }
}

/// Per-layer forward cache kept for backpropagation.
#[derive(Debug, Clone)]
struct LayerCache {
    /// Normalized pre-activation (before scale/shift), layer-norm layers only.
    ln_hat: Option<Matrix>,
    ln_inv_std: Option<Vec<f64>>,
    /// true per row when the variance floor was active.
    ln_floored: Option<Vec<bool>>,
    /// Layer output after activation (for the final trunk layer: the raw logits).
    h: Matrix,
}

/// Forward outputs plus the activation caches backpropagation needs.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// batch × (policy dim + value dim).
    pub outputs: Matrix,
    input: Matrix,
    caches: Vec<LayerCache>,
    param_len: usize,
}

impl BatchOutput {
    pub fn batch_size(&self) -> usize {
        self.outputs.rows()
    }

    /// Post-activation hidden-layer outputs on this batch (the final
    /// linear layer is excluded).
    pub fn hidden_activations(&self) -> Vec<&Matrix> {
        self.caches[..self.caches.len() - 1].iter().map(|c| &c.h).collect()
    }
}

/// A dense network: configuration, live parameters, and a frozen copy of
/// the parameters at initialization (the anchor for L2-Init).
#[derive(Debug, Clone)]
pub struct Network {
    config: MlpConfig,
    layout: ParamLayout,
    params: ParamVector,
    init_params: ParamVector,
}

/// Builds a network deterministically from (config, seed).
pub fn init_network(config: MlpConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(layout.total);
    let n = layout.trunk.len();
    for (l, slot) in layout.trunk.iter().enumerate() {
        let is_policy_head = l == n - 1 && config.value_head.is_some();
        let is_output = l == n - 1;
        let gain = match config.init_scheme {
            InitScheme::OrthogonalScaled => {
                if is_policy_head {
                    0.01
                } else if is_output {
                    1.0
                } else {
                    std::f64::consts::SQRT_2
                }
            }
            InitScheme::UniformFanin => 1.0,
        };
        init_weight(&mut params.0, slot, config.init_scheme, gain, &mut rng);
        if let Some((g_off, _)) = slot.ln_off {
            for i in 0..slot.out_dim {
                params.0[g_off + i] = 1.0;
            }
        }
    }
    if let Some(slot) = layout.value {
        init_weight(&mut params.0, &slot, config.init_scheme, 1.0, &mut rng);
    }
    let init_params = params.clone();
    Ok(Network { config, layout, params, init_params })
}

fn init_weight(
    flat: &mut [f64],
    slot: &LayerSlot,
    scheme: InitScheme,
    gain: f64,
    rng: &mut ChaCha8Rng,
) {
    let (out_dim, in_dim) = (slot.out_dim, slot.in_dim);
    match scheme {
        InitScheme::OrthogonalScaled => {
            // Draw a Gaussian matrix tall-side-first so the thin QR yields
            // orthonormal columns, then orient it to out×in.
            let (rows, cols) = if out_dim >= in_dim { (out_dim, in_dim) } else { (in_dim, out_dim) };
            let mut a = Matrix::zeros(rows, cols);
            for v in a.data_mut() {
                *v = next_gaussian(rng);
            }
            let q = householder_thin_q(&a);
            for o in 0..out_dim {
                for i in 0..in_dim {
                    let v = if out_dim >= in_dim { q.get(o, i) } else { q.get(i, o) };
                    flat[slot.w_off + o * in_dim + i] = gain * v;
                }
            }
        }
        InitScheme::UniformFanin => {
            let limit = 1.0 / (in_dim as f64).sqrt();
            for o in 0..out_dim {
                for i in 0..in_dim {
                    flat[slot.w_off + o * in_dim + i] = (rng.gen::<f64>() * 2.0 - 1.0) * limit;
                }
            }
        }
    }
    // Biases stay zero.
}

impl Network {
    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Parameters as frozen right after initialization.
    pub fn init_params(&self) -> &ParamVector {
        &self.init_params
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Copies layer `l`'s weight matrix (out×in).
    pub fn weight_matrix(&self, l: usize) -> Matrix {
        let slot = &self.layout.trunk[l];
        Matrix::from_vec(
            slot.out_dim,
            slot.in_dim,
            self.params.0[slot.w_off..slot.w_off + slot.out_dim * slot.in_dim].to_vec(),
        )
        .unwrap()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.config.input_dim()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Input("non-finite input".into()));
        }
        Ok(())
    }

    fn affine(&self, slot: &LayerSlot, a: &Matrix) -> Matrix {
        let b = a.rows();
        let mut z = Matrix::zeros(b, slot.out_dim);
        let w = &self.params.0[slot.w_off..slot.w_off + slot.out_dim * slot.in_dim];
        let bias = &self.params.0[slot.b_off..slot.b_off + slot.out_dim];
        // z = a Wᵀ + bias; the k-inner loop keeps both sides contiguous.
        for i in 0..b {
            let arow = a.row(i);
            let zrow = z.row_mut(i);
            for (o, zv) in zrow.iter_mut().enumerate() {
                *zv = crate::linalg::dot(arow, &w[o * slot.in_dim..(o + 1) * slot.in_dim]) + bias[o];
            }
        }
        z
    }

    /// Forward pass keeping the caches needed by [`Network::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<BatchOutput> {
        self.check_input(x)?;
        let n = self.layout.trunk.len();
        let mut caches: Vec<LayerCache> = Vec::with_capacity(n);
        let mut a = x.clone();
        for (l, slot) in self.layout.trunk.iter().enumerate() {
            let mut z = self.affine(slot, &a);
            let is_output = l == n - 1;
            let (ln_hat, ln_inv_std, ln_floored) = if let Some((g_off, b_off)) = slot.ln_off {
                let gamma = &self.params.0[g_off..g_off + slot.out_dim];
                let beta = &self.params.0[b_off..b_off + slot.out_dim];
                let mut hat = Matrix::zeros(z.rows(), z.cols());
                let mut inv_stds = Vec::with_capacity(z.rows());
                let mut floored = Vec::with_capacity(z.rows());
                for i in 0..z.rows() {
                    let row = z.row(i);
                    let h = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / h;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
                    let is_floored = var < LN_VAR_FLOOR;
                    let inv_std = 1.0 / var.max(LN_VAR_FLOOR).sqrt();
                    inv_stds.push(inv_std);
                    floored.push(is_floored);
                    for j in 0..row.len() {
                        hat.set(i, j, (row[j] - mean) * inv_std);
                    }
                }
                for i in 0..z.rows() {
                    for j in 0..z.cols() {
                        z.set(i, j, gamma[j] * hat.get(i, j) + beta[j]);
                    }
                }
                (Some(hat), Some(inv_stds), Some(floored))
            } else {
                (None, None, None)
            };
            let h = if is_output {
                z
            } else {
                let mut h = z;
                match self.config.activation {
                    Activation::Tanh => {
                        for v in h.data_mut() {
                            *v = v.tanh();
                        }
                    }
                    Activation::Relu => {
                        for v in h.data_mut() {
                            if *v <= 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                }
                h
            };
            caches.push(LayerCache { ln_hat, ln_inv_std, ln_floored, h });
            a = caches[l].h.clone();
        }
        let policy = caches[n - 1].h.clone();
        let outputs = if let Some(vslot) = &self.layout.value {
            let trunk_in = if n >= 2 { &caches[n - 2].h } else { x };
            let v = self.affine(vslot, trunk_in);
            let mut out = Matrix::zeros(policy.rows(), policy.cols() + v.cols());
            for i in 0..policy.rows() {
                out.row_mut(i)[..policy.cols()].copy_from_slice(policy.row(i));
                out.row_mut(i)[policy.cols()..].copy_from_slice(v.row(i));
            }
            out
        } else {
            policy
        };
        if !outputs.is_finite() {
            return Err(Error::Numeric("non-finite network output".into()));
        }
        Ok(BatchOutput { outputs, input: x.clone(), caches, param_len: self.layout.total })
    }

    /// Detached forward outputs; later parameter updates do not affect
    /// the returned matrix.
    pub fn snapshot_outputs(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.outputs)
    }

    /// Mean-over-batch gradient of Σ_k dl[i,k]·f_k(x_i) with respect to
    /// the flat parameters, using the caches from a prior [`forward`].
    ///
    /// [`forward`]: Network::forward
    pub fn backward(&self, cache: &BatchOutput, dl_doutput: &Matrix) -> Result<ParamVector> {
        if cache.param_len != self.layout.total {
            return Err(Error::State("forward cache does not match this network".into()));
        }
        if dl_doutput.rows() != cache.outputs.rows() || dl_doutput.cols() != cache.outputs.cols() {
            return Err(Error::Dimension(format!(
                "adjoint is {}x{}, outputs are {}x{}",
                dl_doutput.rows(),
                dl_doutput.cols(),
                cache.outputs.rows(),
                cache.outputs.cols()
            )));
        }
        let batch = cache.outputs.rows() as f64;
        let n = self.layout.trunk.len();
        let pdim = self.config.policy_dim();
        let mut grad = ParamVector::zeros(self.layout.total);

        // Upstream over policy columns, scaled by 1/B once here.
        let mut d_policy = Matrix::zeros(dl_doutput.rows(), pdim);
        for i in 0..dl_doutput.rows() {
            for j in 0..pdim {
                d_policy.set(i, j, dl_doutput.get(i, j) / batch);
            }
        }

        // Value head contributes to the last hidden activation's adjoint.
        let mut d_hidden_extra: Option<Matrix> = None;
        if let Some(vslot) = &self.layout.value {
            let vdim = vslot.out_dim;
            let mut d_v = Matrix::zeros(dl_doutput.rows(), vdim);
            for i in 0..dl_doutput.rows() {
                for j in 0..vdim {
                    d_v.set(i, j, dl_doutput.get(i, pdim + j) / batch);
                }
            }
            let trunk_in = if n >= 2 { &cache.caches[n - 2].h } else { &cache.input };
            self.accumulate_affine_grads(vslot, &d_v, trunk_in, &mut grad);
            d_hidden_extra = Some(self.input_adjoint(vslot, &d_v));
        }

        // Trunk, output layer first.
        let mut d_h = d_policy;
        for l in (0..n).rev() {
            let slot = &self.layout.trunk[l];
            let is_output = l == n - 1;
            let layer_cache = &cache.caches[l];
            let d_taken = std::mem::replace(&mut d_h, Matrix::zeros(0, 0));
            let mut d_z = if is_output {
                d_taken
            } else {
                // Through the activation.
                let mut d = d_taken;
                let h = &layer_cache.h;
                match self.config.activation {
                    Activation::Tanh => {
                        for i in 0..d.rows() {
                            for j in 0..d.cols() {
                                let hv = h.get(i, j);
                                d.set(i, j, d.get(i, j) * (1.0 - hv * hv));
                            }
                        }
                    }
                    Activation::Relu => {
                        for i in 0..d.rows() {
                            for j in 0..d.cols() {
                                if h.get(i, j) <= 0.0 {
                                    d.set(i, j, 0.0);
                                }
                            }
                        }
                    }
                }
                d
            };
            if !is_output && l == n - 2 {
                if let Some(extra) = d_hidden_extra.take() {
                    // extra is an adjoint on h, not on z; push it through
                    // the activation as well.
                    let h = &layer_cache.h;
                    for i in 0..d_z.rows() {
                        for j in 0..d_z.cols() {
                            let a = match self.config.activation {
                                Activation::Tanh => {
                                    let hv = h.get(i, j);
                                    extra.get(i, j) * (1.0 - hv * hv)
                                }
                                Activation::Relu => {
                                    if h.get(i, j) > 0.0 {
                                        extra.get(i, j)
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            d_z.set(i, j, d_z.get(i, j) + a);
                        }
                    }
                }
            }
            if let Some((g_off, b_off)) = slot.ln_off {
                d_z = self.layer_norm_backward(slot, layer_cache, d_z, g_off, b_off, &mut grad);
            }
            let layer_in = if l == 0 { &cache.input } else { &cache.caches[l - 1].h };
            self.accumulate_affine_grads(slot, &d_z, layer_in, &mut grad);
            if l > 0 {
                d_h = self.input_adjoint(slot, &d_z);
            }
        }
        Ok(grad)
    }

    /// dW += d_zᵀ · input, db += column sums of d_z.
    fn accumulate_affine_grads(
        &self,
        slot: &LayerSlot,
        d_z: &Matrix,
        input: &Matrix,
        grad: &mut ParamVector,
    ) {
        for i in 0..d_z.rows() {
            let irow = input.row(i);
            let drow = d_z.row(i);
            for (o, &dv) in drow.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let w = &mut grad.0[slot.w_off + o * slot.in_dim..slot.w_off + (o + 1) * slot.in_dim];
                for (g, &x) in w.iter_mut().zip(irow.iter()) {
                    *g += dv * x;
                }
                grad.0[slot.b_off + o] += dv;
            }
        }
    }

    /// d_input = d_z · W.
    fn input_adjoint(&self, slot: &LayerSlot, d_z: &Matrix) -> Matrix {
        let w = &self.params.0[slot.w_off..slot.w_off + slot.out_dim * slot.in_dim];
        let mut d_in = Matrix::zeros(d_z.rows(), slot.in_dim);
        for i in 0..d_z.rows() {
            let drow = d_z.row(i);
            let orow = d_in.row_mut(i);
            for (o, &dv) in drow.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let wrow = &w[o * slot.in_dim..(o + 1) * slot.in_dim];
                for (out, &wv) in orow.iter_mut().zip(wrow.iter()) {
                    *out += dv * wv;
                }
            }
        }
        d_in
    }

    /// Adjoint of affine -> normalize -> scale/shift. `d_y` is the
    /// gradient at the scale/shift output; returns the gradient at the
    /// affine pre-activation and accumulates scale/shift gradients.
    fn layer_norm_backward(
        &self,
        slot: &LayerSlot,
        cache: &LayerCache,
        d_y: Matrix,
        g_off: usize,
        b_off: usize,
        grad: &mut ParamVector,
    ) -> Matrix {
        let hat = cache.ln_hat.as_ref().expect("layer-norm cache");
        let inv_std = cache.ln_inv_std.as_ref().expect("layer-norm cache");
        let floored = cache.ln_floored.as_ref().expect("layer-norm cache");
        let gamma = &self.params.0[g_off..g_off + slot.out_dim];
        let width = slot.out_dim as f64;
        let mut d_z = Matrix::zeros(d_y.rows(), d_y.cols());
        for i in 0..d_y.rows() {
            let mut mean_dhat = 0.0;
            let mut mean_dhat_hat = 0.0;
            for j in 0..slot.out_dim {
                let dy = d_y.get(i, j);
                grad.0[b_off + j] += dy;
                grad.0[g_off + j] += dy * hat.get(i, j);
                let dhat = dy * gamma[j];
                mean_dhat += dhat;
                mean_dhat_hat += dhat * hat.get(i, j);
            }
            mean_dhat /= width;
            mean_dhat_hat /= width;
            for j in 0..slot.out_dim {
                let dhat = d_y.get(i, j) * gamma[j];
                let v = if floored[i] {
                    // Variance pinned at the floor: only the mean shift
                    // back-propagates.
                    inv_std[i] * (dhat - mean_dhat)
                } else {
                    inv_std[i] * (dhat - mean_dhat - hat.get(i, j) * mean_dhat_hat)
                };
                d_z.set(i, j, v);
            }
        }
        d_z
    }

    /// Gradient of the mean per-sample scalar loss defined by `adjoint`,
    /// which maps batch outputs to (total scalar for reporting, per-sample
    /// dL/d output). Used for NTK collection and loss plumbing.
    pub fn grad_of_scalar<F>(&self, x: &Matrix, adjoint: F) -> Result<(f64, ParamVector)>
    where
        F: FnOnce(&Matrix) -> (f64, Matrix),
    {
        let cache = self.forward(x)?;
        let (loss, dl) = adjoint(&cache.outputs);
        let grad = self.backward(&cache, &dl)?;
        Ok((loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn cfg(sizes: &[usize]) -> MlpConfig {
        MlpConfig::new(sizes.to_vec(), Activation::Tanh)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(cfg(&[4, 8, 2]), 42).unwrap();
        let b = init_network(cfg(&[4, 8, 2]), 42).unwrap();
        assert_eq!(a.params(), b.params());
        let c = init_network(cfg(&[4, 8, 2]), 43).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn param_count_matches_arithmetic() {
        let net = init_network(cfg(&[4, 8, 2]), 0).unwrap();
        assert_eq!(net.param_count(), 4 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(net.params().len(), 58);
        assert_eq!(net.init_params().len(), 58);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(init_network(cfg(&[4]), 0).is_err());
        assert!(init_network(cfg(&[4, 0, 2]), 0).is_err());
    }

    #[test]
    fn orthogonal_hidden_weights_satisfy_wt_w_2i() {
        let net = init_network(cfg(&[4, 8, 2]), 7).unwrap();
        let w = net.weight_matrix(0); // 8x4, gain sqrt(2)
        let wtw = w.t_matmul(&w);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!(
                    (wtw.get(i, j) - want).abs() < 1e-10,
                    "WtW[{i}{j}] = {}",
                    wtw.get(i, j)
                );
            }
        }
    }

    #[test]
    fn policy_head_gain_is_small_and_biases_zero() {
        let mut c = cfg(&[4, 8, 2]);
        c.value_head = Some(1);
        let net = init_network(c, 3).unwrap();
        let head = net.weight_matrix(1); // 2x8 policy head, gain 0.01
        let wwt = head.matmul(&head.t_matmul(&Matrix::eye(2)));
        for i in 0..2 {
            assert!((wwt.get(i, i) - 1e-4).abs() < 1e-12);
        }
        let slot = net.layout().trunk[0];
        for i in 0..slot.out_dim {
            assert_eq!(net.params().0[slot.b_off + i], 0.0);
        }
    }

    #[test]
    fn forward_zero_weights_gives_zero_outputs() {
        let mut net = init_network(cfg(&[3, 5, 2]), 0).unwrap();
        net.set_params(ParamVector::zeros(net.param_count())).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 0.0, 0.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        assert!(out.outputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let mut net = init_network(cfg(&[3, 3]), 0).unwrap();
        let mut p = ParamVector::zeros(net.param_count());
        for i in 0..3 {
            p.0[i * 3 + i] = 1.0; // W = I, b = 0
        }
        net.set_params(p).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 4.5]]).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.outputs, x);
    }

    #[test]
    fn shape_and_input_errors() {
        let net = init_network(cfg(&[3, 2]), 0).unwrap();
        let bad = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(net.forward(&bad), Err(Error::Dimension(_))));
        let nan = Matrix::from_rows(&[vec![1.0, f64::NAN, 0.0]]).unwrap();
        assert!(matches!(net.forward(&nan), Err(Error::Input(_))));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero_before_shift() {
        let mut c = cfg(&[3, 4, 2]);
        c.use_layer_norm = true;
        let mut net = init_network(c, 1).unwrap();
        // Zero first-layer weights: pre-activation rows are constant (= bias = 0).
        let slot = net.layout().trunk[0];
        for i in 0..slot.out_dim * slot.in_dim {
            net.params_mut().0[slot.w_off + i] = 0.0;
        }
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        // Constant pre-activation -> normalized to 0 -> scale/shift keeps 0
        // (beta = 0) -> tanh(0) = 0 -> later layers see zeros; with zero
        // bias output must be exactly 0.
        assert!(out.outputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut c = cfg(&[5, 16, 2]);
        c.use_layer_norm = true;
        let net = init_network(c, 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.7, -0.2]]).unwrap();
        let out = net.forward(&x).unwrap();
        let hat = out.caches[0].ln_hat.as_ref().unwrap();
        let row = hat.row(0);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn backward_zero_adjoint_gives_zero_gradient() {
        let net = init_network(cfg(&[3, 6, 2]), 5).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, -0.4, 1.0]]).unwrap();
        let cache = net.forward(&x).unwrap();
        let dl = Matrix::zeros(1, 2);
        let g = net.backward(&cache, &dl).unwrap();
        assert!(g.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_model_gradient_is_mean_of_rows() {
        // f(x) = Wx + b with W 1x3: d/dW of mean f = mean of rows.
        let net = init_network(cfg(&[3, 1]), 2).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 4.0, 5.0]]).unwrap();
        let cache = net.forward(&x).unwrap();
        let dl = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let g = net.backward(&cache, &dl).unwrap();
        assert_eq!(&g.0[..3], &[2.0, 3.0, 4.0]);
        assert_eq!(g.0[3], 1.0); // bias adjoint: mean of ones
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        // Covers tanh/relu, layer norm on/off, and the value head.
        let mut cases = Vec::new();
        for &act in &[Activation::Tanh, Activation::Relu] {
            for &ln in &[false, true] {
                for &vh in &[None, Some(1)] {
                    let mut c = MlpConfig::new(vec![4, 12, 8, 3], act);
                    c.use_layer_norm = ln;
                    c.value_head = vh;
                    cases.push(c);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (i, c) in cases.into_iter().enumerate() {
            let net = init_network(c.clone(), 100 + i as u64).unwrap();
            let mut rows = Vec::new();
            for _ in 0..5 {
                rows.push((0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect::<Vec<_>>());
            }
            let x = Matrix::from_rows(&rows).unwrap();
            // Random fixed adjoint defines the scalar: mean_i Σ_k dl[i,k] f_k(x_i).
            let odim = c.output_dim();
            let mut dl = Matrix::zeros(5, odim);
            for v in dl.data_mut() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
            let cache = net.forward(&x).unwrap();
            let analytic = net.backward(&cache, &dl).unwrap();
            let fd = gradcheck::central_diff(&net, &x, 1e-5, |out| {
                let mut s = 0.0;
                for r in 0..out.rows() {
                    for k in 0..out.cols() {
                        s += dl.get(r, k) * out.get(r, k);
                    }
                }
                s / out.rows() as f64
            });
            let rel = gradcheck::rel_err(&analytic, &fd);
            assert!(rel < 1e-5, "case {i}: rel err {rel}");
        }
    }

    #[test]
    fn grad_of_scalar_is_mean_invariant_and_matches_backward() {
        let net = init_network(cfg(&[3, 8, 1]), 4).unwrap();
        let row = vec![0.4, -0.7, 0.9];
        let x1 = Matrix::from_rows(&[row.clone()]).unwrap();
        let x3 = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let adj = |out: &Matrix| {
            let mut dl = Matrix::zeros(out.rows(), out.cols());
            for v in dl.data_mut() {
                *v = 1.0;
            }
            (out.data().iter().sum::<f64>() / out.rows() as f64, dl)
        };
        let (_, g1) = net.grad_of_scalar(&x1, adj).unwrap();
        let (_, g3) = net.grad_of_scalar(&x3, adj).unwrap();
        for (a, b) in g1.0.iter().zip(&g3.0) {
            assert!((a - b).abs() < 1e-14);
        }
        // Same thing through forward + backward by hand.
        let cache = net.forward(&x1).unwrap();
        let dl = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let g_manual = net.backward(&cache, &dl).unwrap();
        assert_eq!(g1, g_manual);
    }

    #[test]
    fn single_point_linear_gradient_is_the_input() {
        let net = init_network(cfg(&[3, 1]), 6).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
        let (_, g) = net
            .grad_of_scalar(&x, |out| (out.get(0, 0), Matrix::from_rows(&[vec![1.0]]).unwrap()))
            .unwrap();
        assert_eq!(&g.0[..3], &[0.5, -1.5, 2.0]);
        assert_eq!(g.0[3], 1.0);
    }

    #[test]
    fn snapshot_is_detached_from_later_updates() {
        let mut net = init_network(cfg(&[3, 6, 2]), 8).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let snap = net.snapshot_outputs(&x).unwrap();
        let live = net.forward(&x).unwrap().outputs;
        assert_eq!(snap, live);
        for v in net.params_mut().0.iter_mut() {
            *v += 0.5;
        }
        let moved = net.forward(&x).unwrap().outputs;
        assert!(snap.max_abs_diff(&moved) > 1e-3);
        assert_eq!(snap, live);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let net_a = init_network(cfg(&[3, 6, 2]), 0).unwrap();
        let net_b = init_network(cfg(&[3, 4, 2]), 0).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let cache = net_a.forward(&x).unwrap();
        let dl = Matrix::zeros(1, 2);
        assert!(matches!(net_b.backward(&cache, &dl), Err(Error::State(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        // One unit exactly at 0 pre-activation: gradient through it is 0.
        let mut net = init_network(MlpConfig::new(vec![1, 1, 1], Activation::Relu), 0).unwrap();
        let mut p = ParamVector::zeros(net.param_count());
        p.0[0] = 0.0; // W0 = 0 -> z = 0 exactly
        p.0[2] = 3.0; // W1
        net.set_params(p).unwrap();
        let x = Matrix::from_rows(&[vec![5.0]]).unwrap();
        let cache = net.forward(&x).unwrap();
        let dl = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let g = net.backward(&cache, &dl).unwrap();
        assert_eq!(g.0[0], 0.0, "no gradient through the dead unit's weight");
    }
}
