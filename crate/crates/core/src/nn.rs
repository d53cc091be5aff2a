//! Dense feed-forward networks with reverse-mode gradients and Adam.
//!
//! Hidden layers use a rectifier, the output layer is affine. Everything is
//! `f64` and single-threaded so that training runs are bit-reproducible.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Standard normal weights scaled by `1/sqrt(fan_in)`, zero biases.
    #[default]
    FanInScaled,
    /// Unscaled standard normal weights and biases.
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in_dim x out_dim`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Activations recorded by [`DenseNet::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    /// Flat iteration in the same order as [`DenseNet::params`].
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

impl DenseNet {
    /// Builds a net with layer widths `sizes = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], init: InitScheme, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = match init {
                    InitScheme::FanInScaled => 1.0 / (fan_in as f64).sqrt(),
                    InitScheme::StandardNormal => 1.0,
                };
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    scale * rng.sample::<f64, _>(StandardNormal)
                });
                let bias = match init {
                    InitScheme::FanInScaled => Array1::zeros(fan_out),
                    InitScheme::StandardNormal => {
                        Array1::from_shape_simple_fn(fan_out, || rng.sample(StandardNormal))
                    }
                };
                Dense { weights, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::ShapeMismatch {
                expected: "at least one layer".into(),
                got: "0".into(),
            });
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: format!("layer {} input {}", i + 1, pair[0].out_dim()),
                    got: pair[1].in_dim().to_string(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: format!("bias length {}", l.out_dim()),
                    got: l.bias.len().to_string(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Dense::out_dim));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("input width {}", self.input_dim()),
                got: cols.to_string(),
            });
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let view = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass over a `batch x input` matrix.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, inputs: ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut h = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            layer_inputs.push(h);
            h = z;
        }
        Ok(ForwardCache {
            inputs: layer_inputs,
            output: h,
        })
    }

    /// Reverse-mode pass. Returns parameter gradients and the gradient with
    /// respect to the network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        if grad_output.dim() != cache.output.dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", cache.output.dim()),
                got: format!("{:?}", grad_output.dim()),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let mut prev = delta.dot(&layer.weights.t());
            if i > 0 {
                // input to layer i is relu(z_{i-1}); zero where inactive
                ndarray::Zip::from(&mut prev)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            grads.push((gw, gb));
            delta = prev;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// Smallest absolute hidden pre-activation for `input`; values near zero
    /// sit on a rectifier kink where finite differences are unreliable.
    pub fn kink_margin(&self, input: &[f64]) -> f64 {
        let mut h = Array1::from(input.to_vec());
        let mut margin = f64::INFINITY;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weights) + &layer.bias;
            if i < last {
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                h = z.mapv(|v| v.max(0.0));
            } else {
                h = z;
            }
        }
        margin
    }

    /// `self <- (1 - tau) * self + tau * source`
    pub fn soft_update_from(&mut self, source: &DenseNet, tau: f64) {
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weights.zip_mut_with(&src.weights, |d, &s| *d = (1.0 - tau) * *d + tau * s);
            dst.bias.zip_mut_with(&src.bias, |d, &s| *d = (1.0 - tau) * *d + tau * s);
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    /// Applies one update. Non-finite gradients are rejected and leave both
    /// the net and the moments untouched.
    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            ndarray::Zip::from(&mut layer.weights)
                .and(gw)
                .and(mw)
                .and(vw)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

/// Backpropagates `output_gradients` (d loss / d output, already averaged
/// over the batch) and takes one Adam step. Returns the gradient norm.
pub fn backward_update(
    net: &mut DenseNet,
    inputs: ArrayView2<f64>,
    output_gradients: ArrayView2<f64>,
    adam: &mut Adam,
) -> Result<f64, NnError> {
    let cache = net.forward_cached(inputs)?;
    let (grads, _) = net.backward(&cache, output_gradients)?;
    adam.apply(net, &grads)?;
    Ok(grads.norm())
}

/// Central finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so vanishing gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares `analytic` against central differences of `loss` over every
/// parameter of `net`. Returns the maximum relative error.
pub fn finite_difference_error<F>(net: &DenseNet, analytic: &Gradients, mut loss: F) -> f64
where
    F: FnMut(&DenseNet) -> f64,
{
    let mut probe = net.clone();
    let analytic: Vec<f64> = analytic.iter().collect();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let original = net.params().nth(k).expect("param index");
        *probe.params_mut().nth(k).expect("param index") = original + FD_STEP;
        let plus = loss(&probe);
        *probe.params_mut().nth(k).expect("param index") = original - FD_STEP;
        let minus = loss(&probe);
        *probe.params_mut().nth(k).expect("param index") = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

/// Result of [`gradient_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Input actually checked (nudged away from rectifier kinks if needed).
    pub input: Vec<f64>,
}

/// Checks reverse-mode parameter gradients of `loss(net(input))` against
/// central differences. `loss` returns the value and its gradient with
/// respect to the network output.
pub fn gradient_check<L>(net: &DenseNet, input: &[f64], loss: L) -> Result<GradCheck, NnError>
where
    L: Fn(&[f64]) -> (f64, Vec<f64>),
{
    // A parameter perturbation of FD_STEP moves a pre-activation by at most
    // FD_STEP * (1 + |input|); keep every hidden unit well clear of zero.
    let mut x = input.to_vec();
    let mut nudge = 1e-2;
    for _ in 0..50 {
        let bound = FD_STEP * 100.0 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        if net.kink_margin(&x) > bound {
            break;
        }
        for (i, v) in x.iter_mut().enumerate() {
            *v += nudge * (1.0 + i as f64).sin();
        }
        nudge *= 1.5;
    }
    let view = ArrayView2::from_shape((1, x.len()), &x).expect("row view");
    let cache = net.forward_cached(view)?;
    let (_, dout) = loss(cache.output().row(0).as_slice().expect("contiguous"));
    let dout = Array2::from_shape_vec((1, dout.len()), dout).map_err(|e| NnError::ShapeMismatch {
        expected: "output-sized loss gradient".into(),
        got: e.to_string(),
    })?;
    let (grads, _) = net.backward(&cache, dout.view())?;
    let err = finite_difference_error(net, &grads, |n| {
        let out = n.forward(&x).expect("shape checked");
        loss(&out).0
    });
    Ok(GradCheck {
        max_relative_error: err,
        input: x,
    })
}

const CHECKPOINT_FORMAT: &str = "evstation-densenet";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerDump {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Versioned JSON checkpoint of a [`DenseNet`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetCheckpoint {
    pub format: String,
    pub version: u32,
    pub sizes: Vec<usize>,
    pub layers: Vec<LayerDump>,
}

impl From<&DenseNet> for NetCheckpoint {
    fn from(net: &DenseNet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sizes: net.sizes(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerDump {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetCheckpoint> for DenseNet {
    type Error = NnError;

    fn try_from(ck: NetCheckpoint) -> Result<Self, NnError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let layers = ck
            .layers
            .into_iter()
            .map(|l| {
                let weights = Array2::from_shape_vec((l.in_dim, l.out_dim), l.weights)
                    .map_err(|e| NnError::Checkpoint(e.to_string()))?;
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        let net = DenseNet::from_layers(layers)?;
        if net.sizes() != ck.sizes {
            return Err(NnError::Checkpoint(format!(
                "declared sizes {:?} do not match layers {:?}",
                ck.sizes,
                net.sizes()
            )));
        }
        Ok(net)
    }
}

impl Serialize for DenseNet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        NetCheckpoint::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseNet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let ck = NetCheckpoint::deserialize(d)?;
        DenseNet::try_from(ck).map_err(serde::de::Error::custom)
    }
}
