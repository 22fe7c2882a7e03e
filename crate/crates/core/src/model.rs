//! L-layer perceptron for binary classification: ReLU hidden layers, a
//! bias-free linear output unit and a sigmoid link.
//!
//! Parameters live in one flat vector in canonical order: layer by layer,
//! each layer's weight matrix row-major (`outputs × inputs`) followed by its
//! bias. The output layer `W_L` has no bias, so the final pre-activation is
//! exactly `z_L = <W_L, z_{L-1}>`. Gradients, optimizer updates and the
//! privacy mechanism all operate on this flat layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clip_norm, dot, l2_norm, sigmoid, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub bias: bool,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.inputs * self.outputs + if self.bias { self.outputs } else { 0 }
    }
}

/// Borrowed view of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub shape: LayerShape,
    /// Row-major `outputs × inputs`.
    pub weights: &'a [f64],
    pub bias: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl ModelParams {
    /// Zero-initialised network `input_dim -> hidden[0] -> ... -> 1`.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer width", "all widths must be positive"));
        }
        let mut shapes = Vec::with_capacity(hidden.len() + 1);
        let mut inputs = input_dim;
        for &h in hidden {
            shapes.push(LayerShape {
                inputs,
                outputs: h,
                bias: true,
            });
            inputs = h;
        }
        shapes.push(LayerShape {
            inputs,
            outputs: 1,
            bias: false,
        });
        Self::from_shapes(shapes, None)
    }

    /// Weights and biases uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn init(input_dim: usize, hidden: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(input_dim, hidden)?;
        for j in 0..p.shapes.len() {
            let bound = 1.0 / (p.shapes[j].inputs as f64).sqrt();
            let range = p.layer_range(j);
            for w in &mut p.data[range] {
                *w = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(p)
    }

    fn from_shapes(shapes: Vec<LayerShape>, data: Option<Vec<f64>>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::invalid("layers", "at least one layer is required"));
        }
        for w in shapes.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        let last = shapes.last().unwrap();
        if last.outputs != 1 || last.bias {
            return Err(Error::invalid("layers", "output layer must have one unit and no bias"));
        }
        let mut offsets = Vec::with_capacity(shapes.len() + 1);
        let mut total = 0;
        for s in &shapes {
            offsets.push(total);
            total += s.len();
        }
        offsets.push(total);
        let data = match data {
            Some(d) if d.len() != total => {
                return Err(Error::DimensionMismatch {
                    expected: total,
                    actual: d.len(),
                })
            }
            Some(d) => d,
            None => vec![0.0; total],
        };
        Ok(ModelParams { shapes, offsets, data })
    }

    /// Rebuild from shapes and a flat vector in canonical order.
    pub fn from_flat(shapes: Vec<LayerShape>, data: Vec<f64>) -> Result<Self> {
        Self::from_shapes(shapes, Some(data))
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layer_range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn layer(&self, j: usize) -> LayerView<'_> {
        let shape = self.shapes[j];
        let start = self.offsets[j];
        let nw = shape.inputs * shape.outputs;
        LayerView {
            shape,
            weights: &self.data[start..start + nw],
            bias: shape.bias.then(|| &self.data[start + nw..start + nw + shape.outputs]),
        }
    }

    /// Range of `W_L` within the flat vector (also its range within a gradient).
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        self.layer_range(self.shapes.len() - 1)
    }

    pub fn last_layer(&self) -> &[f64] {
        &self.data[self.last_layer_range()]
    }

    pub fn last_layer_mut(&mut self) -> &mut [f64] {
        let r = self.last_layer_range();
        &mut self.data[r]
    }

    /// Width `f` of the penultimate activation `z_{L-1}`.
    pub fn penultimate_dim(&self) -> usize {
        self.shapes.last().unwrap().inputs
    }

    fn same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.shapes != other.shapes {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: other.num_params(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[L-1]` is `z_{L-1}`.
    pub activations: Vec<Vec<f64>>,
    /// Hidden-layer pre-activations, `pre_activations[j]` feeds `activations[j+1]`.
    pub pre_activations: Vec<Vec<f64>>,
    /// Output pre-activation `z_L`.
    pub logit: f64,
}

impl ForwardTrace {
    pub fn penultimate(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }

    /// Hard label; `z_L > 0` predicts 1, ties go to 0.
    pub fn label(&self) -> u8 {
        u8::from(self.logit > 0.0)
    }
}

#[inline]
fn dense(view: &LayerView<'_>, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = view.shape.inputs;
    for o in 0..view.shape.outputs {
        let mut v = dot(&view.weights[o * n_in..(o + 1) * n_in], x);
        if let Some(b) = view.bias {
            v += b[o];
        }
        out.push(v);
    }
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: x.len(),
        });
    }
    let l = params.num_layers();
    let mut activations = Vec::with_capacity(l);
    let mut pre_activations = Vec::with_capacity(l - 1);
    activations.push(x.to_vec());
    for j in 0..l - 1 {
        let mut pre = Vec::new();
        dense(&params.layer(j), &activations[j], &mut pre);
        activations.push(pre.iter().map(|&v| v.max(0.0)).collect());
        pre_activations.push(pre);
    }
    let logit = dot(params.last_layer(), &activations[l - 1]);
    Ok(ForwardTrace {
        activations,
        pre_activations,
        logit,
    })
}

/// `z_{L-1}` for input `x` without keeping the full trace.
pub fn penultimate(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut next = Vec::new();
    for j in 0..params.num_layers() - 1 {
        dense(&params.layer(j), &cur, &mut next);
        for v in &mut next {
            *v = v.max(0.0);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

pub fn logit(params: &ModelParams, x: &[f64]) -> f64 {
    dot(params.last_layer(), &penultimate(params, x))
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed stably.
pub fn bce_from_logit(z: f64, y: u8) -> f64 {
    // log(1 + e^z) - y z
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - f64::from(y) * z
}

pub fn loss(params: &ModelParams, x: &[f64], y: u8) -> f64 {
    bce_from_logit(logit(params, x), y)
}

/// Gradient of the cross-entropy loss at `(x, y)` with respect to every
/// parameter, in canonical flat order. `W_L`'s slice is
/// `grad[params.last_layer_range()]`.
pub fn per_example_grad(params: &ModelParams, x: &[f64], y: u8) -> Result<Vec<f64>> {
    per_example_grad_and_loss(params, x, y).map(|(g, _)| g)
}

/// [`per_example_grad`] together with the loss from the same forward pass.
pub fn per_example_grad_and_loss(params: &ModelParams, x: &[f64], y: u8) -> Result<(Vec<f64>, f64)> {
    let trace = forward(params, x)?;
    let loss = bce_from_logit(trace.logit, y);
    let mut grad = vec![0.0; params.num_params()];
    let l = params.num_layers();

    // dℓ/dz_L
    let mut delta = vec![sigmoid(trace.logit) - f64::from(y)];
    for j in (0..l).rev() {
        let view = params.layer(j);
        let n_in = view.shape.inputs;
        let input = &trace.activations[j];
        let start = params.offsets[j];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut grad[start + o * n_in..start + (o + 1) * n_in];
            for (g, &a) in row.iter_mut().zip(input) {
                *g = d * a;
            }
        }
        if view.shape.bias {
            let b_start = start + n_in * view.shape.outputs;
            grad[b_start..b_start + view.shape.outputs].copy_from_slice(&delta);
        }
        if j == 0 {
            break;
        }
        // back through W_j, then through the ReLU of layer j-1
        let pre = &trace.pre_activations[j - 1];
        let mut next = vec![0.0; n_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (nv, &w) in next.iter_mut().zip(&view.weights[o * n_in..(o + 1) * n_in]) {
                *nv += d * w;
            }
        }
        for (nv, &p) in next.iter_mut().zip(pre) {
            if p <= 0.0 {
                *nv = 0.0;
            }
        }
        delta = next;
    }
    Ok((grad, loss))
}

/// `W_L ← W_L · min(1, M / ||W_L||_2)`; other layers untouched.
pub fn clip_last_layer(params: &mut ModelParams, max_norm: f64) -> f64 {
    clip_norm(params.last_layer_mut(), max_norm)
}

pub fn last_layer_norm(params: &ModelParams) -> f64 {
    l2_norm(params.last_layer())
}

/// Coordinate-wise mean of parameter sets with identical shapes.
///
/// Each coordinate is summed in sorted order, so the result does not depend
/// on the order of `models`.
pub fn average(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("models", "cannot average an empty list"))?;
    for m in &models[1..] {
        first.same_shape(m)?;
    }
    let mut out = first.clone();
    let cols: Vec<&[f64]> = models.iter().map(|m| m.data.as_slice()).collect();
    order_free_mean(&cols, &mut out.data);
    Ok(out)
}

/// `out[i] = mean_k cols[k][i]`, summing each coordinate in ascending order.
pub(crate) fn order_free_mean(cols: &[&[f64]], out: &mut [f64]) {
    let k = cols.len() as f64;
    let mut buf = Vec::with_capacity(cols.len());
    for (i, o) in out.iter_mut().enumerate() {
        buf.clear();
        buf.extend(cols.iter().map(|c| c[i]));
        buf.sort_by(f64::total_cmp);
        *o = buf.iter().sum::<f64>() / k;
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerMode {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    mode: OptimizerMode,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(OptimizerState {
            mode: OptimizerMode::Sgd,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn adam(lr: f64, num_params: usize) -> Result<Self> {
        check_lr(lr)?;
        Ok(OptimizerState {
            mode: OptimizerMode::Adam,
            lr,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        })
    }

    /// Switch to plain SGD, discarding the Adam moments.
    pub fn switch_to_sgd(&mut self, lr: f64) -> Result<()> {
        *self = Self::sgd(lr)?;
        Ok(())
    }

    pub fn mode(&self) -> OptimizerMode {
        self.mode
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid("learning rate", format!("must be > 0, got {lr}")));
    }
    Ok(())
}

/// Apply one optimizer update in place. In SGD mode this is exactly
/// `θ ← θ − η · update`.
pub fn step(params: &mut ModelParams, opt: &mut OptimizerState, update: &[f64]) -> Result<()> {
    if update.len() != params.num_params() {
        return Err(Error::DimensionMismatch {
            expected: params.num_params(),
            actual: update.len(),
        });
    }
    match opt.mode {
        OptimizerMode::Sgd => {
            for (p, g) in params.data.iter_mut().zip(update) {
                *p -= opt.lr * g;
            }
        }
        OptimizerMode::Adam => {
            if opt.m.len() != update.len() {
                return Err(Error::DimensionMismatch {
                    expected: opt.m.len(),
                    actual: update.len(),
                });
            }
            opt.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(opt.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(opt.t as i32);
            for i in 0..update.len() {
                let g = update[i];
                opt.m[i] = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
                opt.v[i] = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = opt.m[i] / bc1;
                let v_hat = opt.v[i] / bc2;
                params.data[i] -= opt.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Anything that maps a feature vector to `Pr(ŷ = 1 | x)`.
pub trait Classifier: Sync {
    fn predict_proba(&self, x: &[f64]) -> f64;
}

impl Classifier for ModelParams {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(logit(self, x))
    }
}

pub const CHECKPOINT_FORMAT: &str = "fairdp-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layers: Vec<LayerShape>,
    params: Vec<f64>,
}

impl ModelParams {
    /// Versioned JSON checkpoint. Floats round-trip bit-exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layers: self.shapes.clone(),
            params: self.data.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Domain(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Self::from_flat(c.layers, c.params)
    }
}
