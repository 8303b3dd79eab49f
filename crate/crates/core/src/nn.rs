//! Feed-forward networks with exact reverse-mode gradients, AdamW and
//! global-norm gradient clipping.
//!
//! Every network in the crate (teacher, fake score, generators, discriminator
//! heads) is an [`Mlp`]: dense layers with SiLU on hidden layers and an
//! identity output. Batches are [`Matrix`] values with one sample per row.
//! Weights use `(out_dim, in_dim)` row-major layout; the flat parameter order
//! is layer by layer, weights before biases.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{gemm_g_w, gemm_gt_x, gemm_x_wt, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Silu => "silu",
        }
    }
}

/// Dense layer `y = act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-style fan-in initialization, zero bias.
    pub fn he<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut layer.weights {
            *w = normal.sample(rng);
        }
        layer
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != in_dim * out_dim {
            return Err(Error::dim("Layer weights", in_dim * out_dim, weights.len()));
        }
        if bias.len() != out_dim {
            return Err(Error::dim("Layer bias", out_dim, bias.len()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    #[inline]
    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Row-major `(out_dim, in_dim)`.
    #[inline]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.in_dim + inp]
    }
}

/// Activations recorded by [`Mlp::forward`], enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    pub fn batch(&self) -> usize {
        self.output.rows()
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Pre-activation of layer `l`.
    pub fn pre_activation(&self, l: usize) -> &Matrix {
        &self.pre[l]
    }

    /// Post-activation of layer `l`.
    pub fn post_activation(&self, l: usize) -> &Matrix {
        if l + 1 < self.inputs.len() {
            &self.inputs[l + 1]
        } else {
            &self.output
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter-shaped gradients plus the optional gradient w.r.t. the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    pub input: Option<Matrix>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: None,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Global ℓ2 norm over parameter gradients (the input gradient is excluded).
    pub fn global_norm(&self) -> f64 {
        self.params().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|g| g.is_finite()) && self.input.as_ref().is_none_or(Matrix::is_finite)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params_mut() {
            *g *= factor;
        }
        if let Some(inp) = &mut self.input {
            for g in inp.as_mut_slice() {
                *g *= factor;
            }
        }
    }

    /// `self += factor · other` on parameter gradients.
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) -> Result<()> {
        if self.num_params() != other.num_params() || self.layers.len() != other.layers.len() {
            return Err(Error::dim(
                "Gradients::add_scaled",
                self.num_params(),
                other.num_params(),
            ));
        }
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// He-initialized network; SiLU on every layer except the identity output.
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Silu
                };
                Layer::he(layer_sizes[i], layer_sizes[i + 1], act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    /// All-zero parameters with the default activation layout.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::validate_sizes(layer_sizes)?;
        let n = layer_sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Silu
                };
                Layer::zeros(layer_sizes[i], layer_sizes[i + 1], act)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim(
                    format!("layer {} input", i + 1),
                    pair[0].out_dim,
                    pair[1].in_dim,
                ));
            }
        }
        Ok(Self { layers })
    }

    fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_sizes needs an input and an output dimension".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::dim("Mlp::set_flat", self.num_params(), flat.len()));
        }
        for (p, v) in self.params_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|p| p.is_finite())
    }

    /// Compact architecture descriptor, e.g. `26-128-128-2:silu`.
    pub fn descriptor(&self) -> String {
        let sizes: Vec<String> = self.layer_sizes().iter().map(|s| s.to_string()).collect();
        format!("{}:silu", sizes.join("-"))
    }

    /// SHA-256 over the little-endian parameter bytes, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        hex_digest(&h.finalize())
    }

    fn check_input(&self, input: &Matrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), input.cols()));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        self.check_input(input)?;
        let mut cur = input.clone();
        for layer in &self.layers {
            let mut z = Matrix::zeros(cur.rows(), layer.out_dim);
            affine(layer, &cur, &mut z);
            if layer.activation != Activation::Identity {
                for v in z.as_mut_slice() {
                    *v = layer.activation.apply(*v);
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            let mut z = Matrix::zeros(cur.rows(), layer.out_dim);
            affine(layer, &cur, &mut z);
            let mut a = z.clone();
            if layer.activation != Activation::Identity {
                for v in a.as_mut_slice() {
                    *v = layer.activation.apply(*v);
                }
            }
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        let cache = ForwardCache {
            inputs,
            pre,
            output: cur.clone(),
        };
        Ok((cur, cache))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.depth() != self.layers.len() {
            return Err(Error::dim(
                "forward cache depth",
                self.layers.len(),
                cache.depth(),
            ));
        }
        for (l, (layer, z)) in self.layers.iter().zip(&cache.pre).enumerate() {
            if z.cols() != layer.out_dim {
                return Err(Error::dim(format!("cache layer {l}"), layer.out_dim, z.cols()));
            }
        }
        Ok(())
    }

    /// Exact parameter and input gradients for the cotangent `output_grad`.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Gradients> {
        self.backward_from(cache, self.layers.len() - 1, output_grad)
    }

    /// Backpropagates a cotangent placed on the post-activation of layer `layer`.
    ///
    /// Layers above `layer` receive zero gradient. With `layer = depth - 2` this
    /// differentiates the penultimate ("bottleneck") features.
    pub fn backward_from(&self, cache: &ForwardCache, layer: usize, grad: &Matrix) -> Result<Gradients> {
        self.check_cache(cache)?;
        if layer >= self.layers.len() {
            return Err(Error::dim("backward start layer", self.layers.len() - 1, layer));
        }
        let batch = cache.batch();
        if grad.rows() != batch || grad.cols() != self.layers[layer].out_dim {
            return Err(Error::dim(
                format!("cotangent at layer {layer}"),
                batch * self.layers[layer].out_dim,
                grad.rows() * grad.cols(),
            ));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut upstream = grad.clone();
        for l in (0..=layer).rev() {
            let lay = &self.layers[l];
            let z = &cache.pre[l];
            let mut dz = upstream;
            if lay.activation != Activation::Identity {
                for (d, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *d *= lay.activation.derivative(zv);
                }
            }
            let x = &cache.inputs[l];
            gemm_gt_x(
                dz.as_slice(),
                x.as_slice(),
                &mut grads.layers[l].weights,
                batch,
                lay.out_dim,
                lay.in_dim,
            );
            let gb = &mut grads.layers[l].bias;
            for i in 0..batch {
                for (b, d) in gb.iter_mut().zip(dz.row(i)) {
                    *b += d;
                }
            }
            let mut dx = Matrix::zeros(batch, lay.in_dim);
            gemm_g_w(
                dz.as_slice(),
                &lay.weights,
                dx.as_mut_slice(),
                batch,
                lay.out_dim,
                lay.in_dim,
            );
            upstream = dx;
        }
        grads.input = Some(upstream);
        Ok(grads)
    }
}

fn affine(layer: &Layer, x: &Matrix, z: &mut Matrix) {
    gemm_x_wt(
        x.as_slice(),
        &layer.weights,
        z.as_mut_slice(),
        x.rows(),
        layer.in_dim,
        layer.out_dim,
    );
    for i in 0..x.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Central-difference estimate of `d loss / d param` for every parameter.
pub fn finite_diff_grad<F>(mut loss_fn: F, net: &Mlp, step: f64) -> Result<Gradients>
where
    F: FnMut(&Mlp) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut probe = net.clone();
    let base = net.to_flat();
    let mut flat = vec![0.0; base.len()];
    for (i, g) in flat.iter_mut().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        probe.set_flat(&p)?;
        let up = loss_fn(&probe);
        p[i] = base[i] - step;
        probe.set_flat(&p)?;
        let down = loss_fn(&probe);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing parameter {i}")));
        }
        *g = (up - down) / (2.0 * step);
    }
    let mut grads = Gradients::zeros_like(net);
    for (dst, v) in grads.params_mut().zip(flat) {
        *dst = v;
    }
    Ok(grads)
}

/// Scales `grads` so the global norm does not exceed `max_norm`; returns the factor applied.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        grads.scale(s);
        Ok(s)
    } else {
        Ok(1.0)
    }
}

/// AdamW optimizer state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWState {
    pub fn new(net: &Mlp, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let n = net.num_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Betas (0.9, 0.999), ε = 1e-8.
    pub fn with_defaults(net: &Mlp) -> Self {
        Self::new(net, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moments serialized as `[m..., v...]`.
    pub fn moments_flat(&self) -> Vec<f64> {
        let mut out = self.m.clone();
        out.extend_from_slice(&self.v);
        out
    }

    pub fn from_moments(flat: &[f64], step: u64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !flat.len().is_multiple_of(2) {
            return Err(Error::dim("AdamW moments", flat.len() + 1, flat.len()));
        }
        let n = flat.len() / 2;
        Ok(Self {
            m: flat[..n].to_vec(),
            v: flat[n..].to_vec(),
            step,
            beta1,
            beta2,
            epsilon,
        })
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        let n = net.num_params();
        if self.m.len() != n || grads.num_params() != n {
            return Err(Error::dim("AdamW parameter count", n, grads.num_params()));
        }
        if !grads.params().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to AdamW".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p *= decay;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
