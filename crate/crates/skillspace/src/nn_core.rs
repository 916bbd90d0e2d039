//! Minimal differentiable building blocks: dense networks with analytic
//! gradients, a Gaussian likelihood head, and the optimizer.
//!
//! Shapes are fixed at construction and mismatches are programmer error, so
//! they panic via `assert!` rather than returning `Result`. Every gradient
//! path here is checked against central finite differences (see the tests
//! and [`crate::gradcheck`]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Additive floor keeping predicted standard deviations strictly positive.
pub const SOFTPLUS_FLOOR: f64 = 1e-6;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// One dense layer: `y = act(W x + b)` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Output dimension.
    pub rows: usize,
    /// Input dimension.
    pub cols: usize,
    pub activation: Activation,
}

/// A feed-forward network as a plain list of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

impl MlpParams {
    /// He-uniform initialization over the given layer widths. `dims` lists
    /// `[input, hidden.., output]`; all layers but the last use relu, the
    /// last is linear.
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpParams {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (cols, rows) = (dims[i], dims[i + 1]);
            let limit = (6.0 / cols as f64).sqrt();
            let weight = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
            let activation =
                if i + 1 == dims.len() - 1 { Activation::Identity } else { Activation::Relu };
            layers.push(DenseLayer { weight, bias: vec![0.0; rows], rows, cols, activation });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().expect("non-empty mlp").cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Per-layer pre-activations and outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

/// Gradients matching one [`DenseLayer`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients matching one [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> MlpGrads {
        MlpGrads {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }
}

fn apply_activation(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
    }
}

fn activation_grad(a: Activation, pre: f64) -> f64 {
    match a {
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

/// Forward pass; the cache feeds [`mlp_backward`].
pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> (Vec<f64>, ForwardCache) {
    assert_eq!(x.len(), p.input_dim(), "input length mismatch");
    let mut cache = ForwardCache { input: x.to_vec(), pre: Vec::new(), post: Vec::new() };
    let mut cur = x.to_vec();
    for layer in &p.layers {
        let mut pre = vec![0.0; layer.rows];
        for r in 0..layer.rows {
            let row = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
            let mut acc = layer.bias[r];
            for (w, v) in row.iter().zip(cur.iter()) {
                acc += w * v;
            }
            pre[r] = acc;
        }
        let post: Vec<f64> = pre.iter().map(|&z| apply_activation(layer.activation, z)).collect();
        cache.pre.push(pre);
        cache.post.push(post.clone());
        cur = post;
    }
    (cur, cache)
}

/// Reverse-mode gradients of the forward map for the scalar objective whose
/// output gradient is `dy`. Returns `(dparams, dx)`.
pub fn mlp_backward(p: &MlpParams, cache: &ForwardCache, dy: &[f64]) -> (MlpGrads, Vec<f64>) {
    let mut grads = MlpGrads::zeros_like(p);
    let dx = mlp_backward_acc(p, cache, dy, &mut grads);
    (grads, dx)
}

/// Like [`mlp_backward`] but accumulates into an existing gradient buffer;
/// used by training loops that sum gradients over many points.
pub fn mlp_backward_acc(
    p: &MlpParams,
    cache: &ForwardCache,
    dy: &[f64],
    grads: &mut MlpGrads,
) -> Vec<f64> {
    assert_eq!(dy.len(), p.output_dim(), "dy length mismatch");
    assert_eq!(cache.pre.len(), p.layers.len(), "cache does not match network");

    let mut delta = dy.to_vec();
    for (li, layer) in p.layers.iter().enumerate().rev() {
        let pre = &cache.pre[li];
        for r in 0..layer.rows {
            delta[r] *= activation_grad(layer.activation, pre[r]);
        }
        let below: &[f64] = if li == 0 { &cache.input } else { &cache.post[li - 1] };
        let g = &mut grads.layers[li];
        for r in 0..layer.rows {
            let d = delta[r];
            g.bias[r] += d;
            let wrow = &mut g.weight[r * layer.cols..(r + 1) * layer.cols];
            for (gw, x) in wrow.iter_mut().zip(below.iter()) {
                *gw += d * x;
            }
        }
        let mut next = vec![0.0; layer.cols];
        for r in 0..layer.rows {
            let d = delta[r];
            let wrow = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
            for (nx, w) in next.iter_mut().zip(wrow.iter()) {
                *nx += d * w;
            }
        }
        delta = next;
    }
    delta
}

/// Gradient w.r.t. the network input only, skipping parameter gradients;
/// for optimization loops that hold the parameters frozen.
pub fn mlp_input_grad(p: &MlpParams, cache: &ForwardCache, dy: &[f64]) -> Vec<f64> {
    assert_eq!(dy.len(), p.output_dim(), "dy length mismatch");
    assert_eq!(cache.pre.len(), p.layers.len(), "cache does not match network");
    let mut delta = dy.to_vec();
    for (li, layer) in p.layers.iter().enumerate().rev() {
        let pre = &cache.pre[li];
        for r in 0..layer.rows {
            delta[r] *= activation_grad(layer.activation, pre[r]);
        }
        let mut next = vec![0.0; layer.cols];
        for r in 0..layer.rows {
            let d = delta[r];
            let wrow = &layer.weight[r * layer.cols..(r + 1) * layer.cols];
            for (nx, w) in next.iter_mut().zip(wrow.iter()) {
                *nx += d * w;
            }
        }
        delta = next;
    }
    delta
}

// ---------------------------------------------------------------------------
// Gaussian likelihood head
// ---------------------------------------------------------------------------

/// Predicted diagonal Gaussian over a sensorimotor vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mu: Vec<f64>,
    /// Strictly positive, elementwise.
    pub sigma: Vec<f64>,
}

/// Negative log likelihood of `target` under the prediction, with analytic
/// gradients w.r.t. mu and sigma. Summed over channels.
pub fn gaussian_nll(pred: &GaussianPrediction, target: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(pred.mu.len(), target.len(), "mu/target length mismatch");
    assert_eq!(pred.sigma.len(), target.len(), "sigma/target length mismatch");
    let mut loss = 0.0;
    let mut dmu = vec![0.0; target.len()];
    let mut dsigma = vec![0.0; target.len()];
    for j in 0..target.len() {
        let sigma = pred.sigma[j];
        assert!(sigma > 0.0, "sigma must be strictly positive, got {sigma}");
        let r = target[j] - pred.mu[j];
        loss += sigma.ln() + r * r / (2.0 * sigma * sigma) + 0.5 * LN_2PI;
        dmu[j] = -r / (sigma * sigma);
        dsigma[j] = 1.0 / sigma - r * r / (sigma * sigma * sigma);
    }
    (loss, dmu, dsigma)
}

/// Elementwise `softplus(x) + floor`, strictly positive and monotone.
pub fn softplus_positive(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&x| softplus_scalar(x)).collect()
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    assert!(x.is_finite(), "softplus input must be finite");
    x.max(0.0) + (-x.abs()).exp().ln_1p() + SOFTPLUS_FLOOR
}

/// Derivative of [`softplus_positive`]: the logistic sigmoid.
pub(crate) fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper::with_lr(1e-4)
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Standard Adam update with bias correction, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], st: &mut AdamState, h: &AdamHyper) {
    assert_eq!(params.len(), grads.len(), "param/grad length mismatch");
    assert_eq!(params.len(), st.m.len(), "param/state length mismatch");
    st.step += 1;
    let bc1 = 1.0 - h.beta1.powi(st.step as i32);
    let bc2 = 1.0 - h.beta2.powi(st.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        st.m[i] = h.beta1 * st.m[i] + (1.0 - h.beta1) * g;
        st.v[i] = h.beta2 * st.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Scale the whole gradient set so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(tensors: &mut [&mut [f64]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0;
    for t in tensors.iter() {
        for &g in t.iter() {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in tensors.iter_mut() {
            for g in t.iter_mut() {
                *g *= s;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
