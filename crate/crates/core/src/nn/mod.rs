//! Feedforward networks `a_I ∘ tanh ∘ a_{I-1} ∘ ... ∘ tanh ∘ a_1` with optional
//! batch normalization, trained by Adam.
//!
//! Batch normalization sits between the affine map and the `tanh` of each
//! hidden layer (and optionally on the raw input). All trainable parameters
//! live in one flat vector so optimizers and gradient checks can treat a
//! network as a point in `R^q`.

mod adam;
pub mod gradcheck;
mod snapshot;

pub use adam::{AdamState, StepSchedule};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm_ab, gemm_abt, gemm_atb};
use crate::rng::RngStreamKey;

/// `tanh` via one `exp`; agrees with `f64::tanh` to a couple of ulps and is
/// considerably cheaper.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let x = x.clamp(-20.0, 20.0);
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Node counts `q_0, ..., q_I`.
    pub widths: Vec<usize>,
    /// Batch normalization on hidden layers.
    pub batch_norm: bool,
    /// Batch normalization on the input features.
    #[serde(default)]
    pub input_batch_norm: bool,
    pub bn_eps: f64,
    /// Weight of the old value in running-statistics updates.
    pub bn_momentum: f64,
}

impl MlpSpec {
    /// `tanh` network with batch-normalized hidden layers.
    pub fn new(widths: Vec<usize>) -> Self {
        Self {
            widths,
            batch_norm: true,
            input_batch_norm: false,
            bn_eps: 1e-6,
            bn_momentum: 0.99,
        }
    }

    pub fn without_batch_norm(mut self) -> Self {
        self.batch_norm = false;
        self
    }

    /// `depth` affine layers of which `depth - 1` hidden ones of width `hidden`.
    pub fn uniform(input: usize, hidden: usize, depth: usize, output: usize) -> Self {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(hidden, depth.saturating_sub(1)));
        widths.push(output);
        Self::new(widths)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("widths", "need at least input and output widths"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("widths", "all widths must be >= 1"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_eps/bn_momentum", "eps > 0 and momentum in [0, 1)"));
        }
        Ok(())
    }

    /// `q = sum_i q_i (q_{i-1} + 1)`.
    pub fn affine_param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Batch-norm scales and shifts.
    pub fn norm_param_count(&self) -> usize {
        let hidden: usize = if self.batch_norm {
            self.widths[1..self.depth()].iter().sum()
        } else {
            0
        };
        let input = if self.input_batch_norm { self.widths[0] } else { 0 };
        2 * (hidden + input)
    }

    pub fn param_count(&self) -> usize {
        self.affine_param_count() + self.norm_param_count()
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let input_norm = if self.input_batch_norm {
            let q = self.widths[0];
            let n = NormOffsets { gamma: off, beta: off + q };
            off += 2 * q;
            Some(n)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(self.depth());
        for i in 1..=self.depth() {
            let (qin, qout) = (self.widths[i - 1], self.widths[i]);
            let w = off;
            let b = w + qout * qin;
            off = b + qout;
            let norm = if self.batch_norm && i < self.depth() {
                let n = NormOffsets { gamma: off, beta: off + qout };
                off += 2 * qout;
                Some(n)
            } else {
                None
            };
            layers.push(LayerOffsets { qin, qout, w, b, norm });
        }
        debug_assert_eq!(off, self.param_count());
        Layout { input_norm, layers }
    }
}

#[derive(Debug, Clone, Copy)]
struct NormOffsets {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    qin: usize,
    qout: usize,
    w: usize,
    b: usize,
    norm: Option<NormOffsets>,
}

#[derive(Debug, Clone)]
struct Layout {
    input_norm: Option<NormOffsets>,
    layers: Vec<LayerOffsets>,
}

/// Running statistics of one batch-norm layer, used in inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }
}

/// A network: spec, flat trainable parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
    /// Input statistics (if enabled) followed by one entry per normalized hidden layer.
    stats: Vec<BnStats>,
    layout_cache: LayoutCache,
}

#[derive(Debug, Clone)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Per-layer values kept from a train-mode forward pass.
#[derive(Debug, Clone)]
struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Intermediate values of a train-mode forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    rows: usize,
    input_norm: Option<NormCache>,
    /// Layer inputs `a_0, ..., a_{I-1}`.
    acts: Vec<Vec<f64>>,
    norms: Vec<Option<NormCache>>,
    /// Network output, `rows * q_I`.
    pub output: Vec<f64>,
}

fn normalize_train(z: &mut [f64], rows: usize, width: usize, eps: f64) -> NormCache {
    let mut mean = vec![0.0; width];
    for r in z.chunks(width) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let inv_rows = 1.0 / rows as f64;
    mean.iter_mut().for_each(|m| *m *= inv_rows);
    let mut var = vec![0.0; width];
    for r in z.chunks(width) {
        for j in 0..width {
            let c = r[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv_rows);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for r in z.chunks_mut(width) {
        for j in 0..width {
            r[j] = (r[j] - mean[j]) * inv_std[j];
        }
    }
    NormCache {
        xhat: z.to_vec(),
        inv_std,
        batch_mean: mean,
        batch_var: var,
    }
}

fn scale_shift(x: &mut [f64], width: usize, gamma: &[f64], beta: &[f64]) {
    for r in x.chunks_mut(width) {
        for j in 0..width {
            r[j] = gamma[j] * r[j] + beta[j];
        }
    }
}

/// Backward pass through `y = gamma * xhat + beta` with batch statistics.
/// Writes scale/shift gradients and overwrites `dy` with the gradient w.r.t. the
/// normalized layer's input.
fn normalize_backward(dy: &mut [f64], cache: &NormCache, gamma: &[f64], width: usize, rows: usize, g_gamma: &mut [f64], g_beta: &mut [f64]) {
    let mut mean_dxhat = vec![0.0; width];
    let mut mean_dxhat_xhat = vec![0.0; width];
    g_gamma.fill(0.0);
    g_beta.fill(0.0);
    for (d, xh) in dy.chunks(width).zip(cache.xhat.chunks(width)) {
        for j in 0..width {
            g_gamma[j] += d[j] * xh[j];
            g_beta[j] += d[j];
            let dxh = d[j] * gamma[j];
            mean_dxhat[j] += dxh;
            mean_dxhat_xhat[j] += dxh * xh[j];
        }
    }
    let inv_rows = 1.0 / rows as f64;
    for j in 0..width {
        mean_dxhat[j] *= inv_rows;
        mean_dxhat_xhat[j] *= inv_rows;
    }
    for (d, xh) in dy.chunks_mut(width).zip(cache.xhat.chunks(width)) {
        for j in 0..width {
            let dxh = d[j] * gamma[j];
            d[j] = cache.inv_std[j] * (dxh - mean_dxhat[j] - xh[j] * mean_dxhat_xhat[j]);
        }
    }
}

fn column_sums(x: &[f64], width: usize, out: &mut [f64]) {
    out.fill(0.0);
    for r in x.chunks(width) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases, unit scales, zero shifts.
    pub fn xavier(spec: MlpSpec, key: RngStreamKey) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; spec.param_count()];
        let mut rng = key.rng();
        if let Some(n) = layout.input_norm {
            params[n.gamma..n.beta].fill(1.0);
        }
        for l in &layout.layers {
            let a = (6.0 / (l.qin + l.qout) as f64).sqrt();
            for w in &mut params[l.w..l.b] {
                *w = a * (2.0 * rng.random::<f64>() - 1.0);
            }
            if let Some(n) = l.norm {
                params[n.gamma..n.beta].fill(1.0);
            }
        }
        Ok(Self::from_parts(spec, params, None))
    }

    /// All-zero parameters (unit batch-norm scales).
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; spec.param_count()];
        if let Some(n) = layout.input_norm {
            params[n.gamma..n.beta].fill(1.0);
        }
        for l in &layout.layers {
            if let Some(n) = l.norm {
                params[n.gamma..n.beta].fill(1.0);
            }
        }
        Ok(Self::from_parts(spec, params, None))
    }

    fn from_parts(spec: MlpSpec, params: Vec<f64>, stats: Option<Vec<BnStats>>) -> Self {
        let layout = spec.layout();
        let stats = stats.unwrap_or_else(|| {
            let mut s = Vec::new();
            if layout.input_norm.is_some() {
                s.push(BnStats::new(spec.widths[0]));
            }
            for l in &layout.layers {
                if l.norm.is_some() {
                    s.push(BnStats::new(l.qout));
                }
            }
            s
        });
        Self {
            spec,
            params,
            stats,
            layout_cache: LayoutCache(layout),
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.stats
    }

    fn layout(&self) -> &Layout {
        &self.layout_cache.0
    }

    /// Weight matrix `A_i` (`q_i x q_{i-1}`, row-major) of layer `i` in `1..=I`.
    pub fn weight(&self, layer: usize) -> &[f64] {
        let l = &self.layout().layers[layer - 1];
        &self.params[l.w..l.b]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout().layers[layer - 1];
        &mut self.params[l.w..l.b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let l = &self.layout().layers[layer - 1];
        &self.params[l.b..l.b + l.qout]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let l = self.layout().layers[layer - 1];
        &mut self.params[l.b..l.b + l.qout]
    }

    fn affine(&self, l: &LayerOffsets, x: &[f64], rows: usize) -> Vec<f64> {
        let bias = &self.params[l.b..l.b + l.qout];
        let mut z = Vec::with_capacity(rows * l.qout);
        for _ in 0..rows {
            z.extend_from_slice(bias);
        }
        gemm_abt(rows, l.qin, l.qout, x, &self.params[l.w..l.b], 1.0, &mut z);
        z
    }

    /// Inference-mode forward pass using running batch-norm statistics.
    /// Rows are processed independently.
    pub fn predict(&self, x: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(x.len(), rows * self.spec.input_dim(), "input shape");
        let eps = self.spec.bn_eps;
        let layout = self.layout();
        let mut stats = self.stats.iter();
        let mut a: Vec<f64>;
        let mut input = x;
        let normalized_input;
        if let Some(n) = layout.input_norm {
            let st = stats.next().unwrap();
            let q = self.spec.widths[0];
            let mut v = x.to_vec();
            let (g, b) = (&self.params[n.gamma..n.beta], &self.params[n.beta..n.beta + q]);
            for r in v.chunks_mut(q) {
                for j in 0..q {
                    r[j] = g[j] * (r[j] - st.mean[j]) / (st.var[j] + eps).sqrt() + b[j];
                }
            }
            normalized_input = v;
            input = &normalized_input;
        }
        let last = layout.layers.len() - 1;
        let mut owned: Option<Vec<f64>> = None;
        for (i, l) in layout.layers.iter().enumerate() {
            let src = owned.as_deref().unwrap_or(input);
            a = self.affine(l, src, rows);
            if i < last {
                if let Some(n) = l.norm {
                    let st = stats.next().unwrap();
                    let (g, b) = (&self.params[n.gamma..n.beta], &self.params[n.beta..n.beta + l.qout]);
                    let scale: Vec<f64> = (0..l.qout).map(|j| g[j] / (st.var[j] + eps).sqrt()).collect();
                    for r in a.chunks_mut(l.qout) {
                        for j in 0..l.qout {
                            r[j] = tanh(scale[j] * (r[j] - st.mean[j]) + b[j]);
                        }
                    }
                } else {
                    a.iter_mut().for_each(|v| *v = tanh(*v));
                }
            }
            owned = Some(a);
        }
        owned.unwrap()
    }

    /// Train-mode forward pass with batch statistics; does not touch running statistics.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<ForwardCache> {
        assert_eq!(x.len(), rows * self.spec.input_dim(), "input shape");
        let uses_bn = self.spec.batch_norm && self.spec.depth() > 1 || self.spec.input_batch_norm;
        if uses_bn && rows < 2 {
            return Err(Error::BatchTooSmall { rows });
        }
        let eps = self.spec.bn_eps;
        let layout = self.layout();
        let mut a0 = x.to_vec();
        let input_norm = layout.input_norm.map(|n| {
            let q = self.spec.widths[0];
            let c = normalize_train(&mut a0, rows, q, eps);
            scale_shift(&mut a0, q, &self.params[n.gamma..n.beta], &self.params[n.beta..n.beta + q]);
            c
        });
        let last = layout.layers.len() - 1;
        let mut acts = vec![a0];
        let mut norms = Vec::with_capacity(last);
        let mut output = Vec::new();
        for (i, l) in layout.layers.iter().enumerate() {
            let mut z = self.affine(l, acts.last().unwrap(), rows);
            if i == last {
                output = z;
                break;
            }
            let nc = l.norm.map(|n| {
                let c = normalize_train(&mut z, rows, l.qout, eps);
                scale_shift(&mut z, l.qout, &self.params[n.gamma..n.beta], &self.params[n.beta..n.beta + l.qout]);
                c
            });
            z.iter_mut().for_each(|v| *v = tanh(*v));
            norms.push(nc);
            acts.push(z);
        }
        Ok(ForwardCache {
            rows,
            input_norm,
            acts,
            norms,
            output,
        })
    }

    /// Train-mode forward pass that also folds the batch statistics into the
    /// running statistics.
    pub fn forward_train(&mut self, x: &[f64], rows: usize) -> Result<ForwardCache> {
        let cache = self.forward_batch(x, rows)?;
        let mom = self.spec.bn_momentum;
        let batch_stats = cache.input_norm.iter().chain(cache.norms.iter().flatten());
        for (st, c) in self.stats.iter_mut().zip(batch_stats) {
            for j in 0..st.mean.len() {
                st.mean[j] = mom * st.mean[j] + (1.0 - mom) * c.batch_mean[j];
                st.var[j] = mom * st.var[j] + (1.0 - mom) * c.batch_var[j];
            }
        }
        Ok(cache)
    }

    /// Gradient of a scalar loss w.r.t. all trainable parameters, given
    /// `d loss / d output` (`rows * q_I`). The result has the flat parameter layout.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, dout, &mut grad);
        grad
    }

    pub fn backward_into(&self, cache: &ForwardCache, dout: &[f64], grad: &mut [f64]) {
        let rows = cache.rows;
        let layout = self.layout();
        assert_eq!(dout.len(), rows * self.spec.output_dim(), "upstream gradient shape");
        assert_eq!(grad.len(), self.params.len());
        let mut delta = dout.to_vec();
        let n_layers = layout.layers.len();
        for i in (0..n_layers).rev() {
            let l = &layout.layers[i];
            if i < n_layers - 1 {
                // delta is d/d(tanh output) of this layer; go back through tanh and BN
                let a = &cache.acts[i + 1];
                for (d, y) in delta.iter_mut().zip(a) {
                    *d *= 1.0 - y * y;
                }
                if let (Some(n), Some(nc)) = (l.norm, cache.norms[i].as_ref()) {
                    let gamma = &self.params[n.gamma..n.beta];
                    let (gg, gb) = grad[n.gamma..n.beta + l.qout].split_at_mut(l.qout);
                    normalize_backward(&mut delta, nc, gamma, l.qout, rows, gg, gb);
                }
            }
            let input = &cache.acts[i];
            gemm_atb(l.qout, rows, l.qin, &delta, input, 0.0, &mut grad[l.w..l.b]);
            column_sums(&delta, l.qout, &mut grad[l.b..l.b + l.qout]);
            if i > 0 || layout.input_norm.is_some() {
                let mut next = vec![0.0; rows * l.qin];
                gemm_ab(rows, l.qout, l.qin, &delta, &self.params[l.w..l.b], 0.0, &mut next);
                delta = next;
            }
        }
        if let (Some(n), Some(nc)) = (layout.input_norm, cache.input_norm.as_ref()) {
            let q = self.spec.widths[0];
            let gamma = &self.params[n.gamma..n.beta];
            let (gg, gb) = grad[n.gamma..n.beta + q].split_at_mut(q);
            normalize_backward(&mut delta, nc, gamma, q, rows, gg, gb);
        }
    }
}
