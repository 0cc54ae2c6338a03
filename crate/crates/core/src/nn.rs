//! Small dense networks with hand-written backpropagation, an Adam
//! optimizer and weight clipping. These back both the discriminator
//! (scalar sigmoid head) and the encoder (shape-parameter head).

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::dist::{Family, ShapeParams, SHAPE_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    // derivative expressed through the pre-activation
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "family", rename_all = "snake_case")]
pub enum Head {
    SigmoidScalar,
    Shape(Family),
}

impl Head {
    pub fn arity(self) -> usize {
        match self {
            Head::SigmoidScalar => 1,
            Head::Shape(f) => f.arity(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// Upper bound that keeps sigmoid outputs strictly below one.
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Weight matrix is `rows x cols`, row-major, mapping `cols` inputs to `rows` outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Layer { rows, cols, weights: vec![0.0; rows * cols], biases: vec![0.0; rows] }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            out.push(dot + self.biases[r]);
        }
    }
}

/// Fixed (non-trainable) input standardization `x' = (x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::Shape { expected: shift.len(), got: scale.len() });
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("input scales must be positive: {scale:?}")));
        }
        Ok(InputNorm { shift, scale })
    }

    /// Standardize with the column means and standard deviations of `rows`;
    /// constant columns get unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Domain("cannot fit a scaler on no rows".into()))?;
        let q = first.len();
        let n = rows.len() as f64;
        let mut shift = vec![0.0; q];
        for r in rows {
            for (s, x) in shift.iter_mut().zip(r) {
                *s += x / n;
            }
        }
        let mut scale = vec![0.0; q];
        for r in rows {
            for ((s, x), m) in scale.iter_mut().zip(r).zip(&shift) {
                *s += (x - m).powi(2) / n;
            }
        }
        let scale = scale
            .into_iter()
            .map(|v| {
                let sd = v.sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        InputNorm::new(shift, scale)
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.shift).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_head: Head,
    pub layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<InputNorm>,
}

/// Activations recorded during a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    // inputs[i] is the input seen by layer i (inputs[0] is the normalized network input)
    inputs: Vec<Vec<f64>>,
    // pre-activations of every layer; the last entry is the raw head input
    pre: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// One gradient array per weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], biases: vec![0.0; l.biases.len()] })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += k * y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += k * y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|x| *x *= k);
        }
    }

    /// Flattened in the same order as [`Network::params`].
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

impl Network {
    /// Glorot-uniform initialization from `rng`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Network::zeros(dims, hidden, head)?;
        for layer in &mut net.layers {
            let a = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            let u = Uniform::new_inclusive(-a, a).expect("finite bounds");
            layer.weights.iter_mut().for_each(|w| *w = u.sample(rng));
            layer.biases.iter_mut().for_each(|b| *b = u.sample(rng));
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], hidden: Activation, head: Head) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {dims:?}")));
        }
        if *dims.last().unwrap() != head.arity() {
            return Err(Error::Config(format!(
                "last layer width {} does not match head arity {}",
                dims.last().unwrap(),
                head.arity()
            )));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[1], w[0])).collect();
        Ok(Network {
            layer_dims: dims.to_vec(),
            hidden_activation: hidden,
            output_head: head,
            layers,
            input_norm: None,
        })
    }

    pub fn with_input_norm(mut self, norm: InputNorm) -> Result<Self> {
        if norm.shift.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: norm.shift.len() });
        }
        self.input_norm = Some(norm);
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.output_head.arity()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                return &mut l.weights[idx];
            }
            idx -= l.weights.len();
            if idx < l.biases.len() {
                return &mut l.biases[idx];
            }
            idx -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), got: input.len() });
        }
        Ok(())
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let x = match &self.input_norm {
            Some(n) => n.apply(input),
            None => input.to_vec(),
        };
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.rows);
            layer.affine(&inputs[i], &mut z);
            if i < last {
                inputs.push(z.iter().map(|&v| self.hidden_activation.apply(v)).collect());
            }
            pre.push(z);
        }
        let out = self.head_output(&pre[last]);
        Ok((out, ForwardCache { inputs, pre }))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_cached(input).map(|(out, _)| out)
    }

    /// The raw last-layer output before the head transform.
    pub fn pre_head(&self, input: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_cached(input)?;
        Ok(cache.pre.last().cloned().unwrap_or_default())
    }

    /// Scalar output of a sigmoid-head network.
    pub fn score(&self, input: &[f64]) -> Result<f64> {
        match self.output_head {
            Head::SigmoidScalar => Ok(self.forward(input)?[0]),
            Head::Shape(_) => Err(Error::State("score() needs a sigmoid head".into())),
        }
    }

    /// Shape parameters from a shape-head network.
    pub fn shapes(&self, input: &[f64]) -> Result<ShapeParams> {
        match self.output_head {
            Head::Shape(family) => {
                let out = self.forward(input)?;
                ShapeParams::new(family, [out[0], out[1]])
            }
            Head::SigmoidScalar => Err(Error::State("shapes() needs a shape head".into())),
        }
    }

    fn head_output(&self, raw: &[f64]) -> Vec<f64> {
        match self.output_head {
            Head::SigmoidScalar => vec![sigmoid(raw[0]).clamp(f64::MIN_POSITIVE, SIGMOID_MAX)],
            Head::Shape(Family::Beta) => raw.iter().map(|&r| softplus(r) + SHAPE_FLOOR).collect(),
            Head::Shape(Family::Gaussian) => vec![raw[0], softplus(raw[1]) + SHAPE_FLOOR],
        }
    }

    fn head_deriv(&self, raw: &[f64]) -> Vec<f64> {
        match self.output_head {
            Head::SigmoidScalar => {
                let s = sigmoid(raw[0]);
                vec![s * (1.0 - s)]
            }
            Head::Shape(Family::Beta) => raw.iter().map(|&r| sigmoid(r)).collect(),
            Head::Shape(Family::Gaussian) => vec![1.0, sigmoid(raw[1])],
        }
    }

    /// Gradients of `upstream . output` with respect to every weight and
    /// bias, plus the gradient with respect to the (unnormalized) input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let n = self.layers.len();
        if cache.pre.len() != n || cache.inputs.len() != n {
            return Err(Error::State(format!(
                "cache holds {} layers, network has {n}",
                cache.pre.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.inputs[i].len() != layer.cols || cache.pre[i].len() != layer.rows {
                return Err(Error::State(format!("cached activations of layer {i} have the wrong shape")));
            }
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), got: upstream.len() });
        }

        let mut grads = Gradients::zeros_like(self);
        let mut delta: Vec<f64> =
            self.head_deriv(&cache.pre[n - 1]).iter().zip(upstream).map(|(d, u)| d * u).collect();
        let mut input_grad = Vec::new();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let a_in = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for r in 0..layer.rows {
                let d = delta[r];
                g.biases[r] = d;
                for c in 0..layer.cols {
                    g.weights[r * layer.cols + c] = d * a_in[c];
                }
            }
            let mut back = vec![0.0; layer.cols];
            for r in 0..layer.rows {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (c, b) in back.iter_mut().enumerate() {
                    *b += layer.weights[r * layer.cols + c] * d;
                }
            }
            if i > 0 {
                delta = back
                    .iter()
                    .zip(&cache.pre[i - 1])
                    .map(|(b, z)| b * self.hidden_activation.deriv(*z))
                    .collect();
            } else {
                input_grad = back;
            }
        }
        if let Some(norm) = &self.input_norm {
            input_grad.iter_mut().zip(&norm.scale).for_each(|(g, s)| *g /= s);
        }
        Ok((grads, input_grad))
    }

    /// Clamp every weight and bias into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.biases.iter_mut()).for_each(|w| *w = w.clamp(-c, c));
        }
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.params().iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    fn validate(&self) -> Result<()> {
        let fresh = Network::zeros(&self.layer_dims, self.hidden_activation, self.output_head)?;
        if fresh.layers.len() != self.layers.len() {
            return Err(Error::Config("checkpoint layer count disagrees with dims".into()));
        }
        for (i, (a, b)) in fresh.layers.iter().zip(&self.layers).enumerate() {
            if a.rows != b.rows || a.cols != b.cols || b.weights.len() != a.weights.len() || b.biases.len() != a.biases.len() {
                return Err(Error::Config(format!("checkpoint layer {i} has inconsistent shape")));
            }
        }
        if let Some(n) = &self.input_norm {
            InputNorm::new(n.shift.clone(), n.scale.clone())?;
            if n.shift.len() != self.input_dim() {
                return Err(Error::Config("checkpoint input normalization width mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Network::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: Gradients,
    pub second: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(net: &Network) -> Self {
        OptimizerState {
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step minimizing the objective whose gradient is `grads`.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.layers.len() != net.layers.len() || state.first.layers.len() != net.layers.len() {
        return Err(Error::State("gradient layer count does not match the network".into()));
    }
    for (i, (g, l)) in grads.layers.iter().zip(&net.layers).enumerate() {
        if g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len() {
            return Err(Error::State(format!("gradient shape mismatch in layer {i}")));
        }
        if g.weights.iter().chain(&g.biases).any(|v| !v.is_finite()) {
            return Err(Error::Numeric { layer: i, msg: "non-finite gradient".into() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first.layers)
        .zip(&mut state.second.layers)
    {
        for k in 0..layer.weights.len() {
            update(&mut layer.weights[k], g.weights[k], &mut m.weights[k], &mut v.weights[k]);
        }
        for k in 0..layer.biases.len() {
            update(&mut layer.biases[k], g.biases[k], &mut m.biases[k], &mut v.biases[k]);
        }
    }
    Ok(())
}

/// Max relative error between `grads` and central finite differences of
/// `upstream . forward(input)`, step `1e-5`.
pub fn finite_diff_check_with(net: &Network, input: &[f64], upstream: &[f64], grads: &Gradients) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let objective = |n: &Network| -> Result<f64> {
        Ok(n.forward(input)?.iter().zip(upstream).map(|(o, u)| o * u).sum())
    };
    let analytic = grads.flat();
    if analytic.len() != net.num_params() {
        return Err(Error::State("gradient size does not match the network".into()));
    }
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (idx, a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(idx);
        *probe.param_mut(idx) = orig + STEP;
        let up = objective(&probe)?;
        *probe.param_mut(idx) = orig - STEP;
        let down = objective(&probe)?;
        *probe.param_mut(idx) = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max((a - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

pub fn finite_diff_check(net: &Network, input: &[f64], upstream: &[f64]) -> Result<f64> {
    let (_, cache) = net.forward_cached(input)?;
    let (grads, _) = net.backward(&cache, upstream)?;
    finite_diff_check_with(net, input, upstream, &grads)
}
