//! Minimal dense-network substrate: MLPs with hand-written reverse-mode
//! gradients.
//!
//! Activations are applied between layers, identity at the output. Weight
//! `i` has shape `dims[i] x dims[i+1]` (row-major, input index first).
//! Initialization is uniform in `±sqrt(6/(fan_in+fan_out))`, biases zero.
//!
//! Forward caches carry a version stamp; mutating parameters invalidates any
//! outstanding cache so a backward pass against stale activations is an
//! error rather than a silent wrong gradient.

use rand::distributions::{Distribution, Uniform};
use rand::rngs::StdRng;

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Dense feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    /// Layer parameters in order: weight 0, bias 0, weight 1, bias 1, ...
    params: Vec<Tensor>,
    /// Bumped on every mutable parameter access; stamps forward caches.
    version: u64,
}

/// Activations recorded by [`Mlp::forward`], consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    input: Tensor,
    /// Pre-activation of each layer, batch-shaped.
    zs: Vec<Tensor>,
}

impl Mlp {
    /// Fan-scaled uniform init, zero biases, deterministic per seed.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 layer dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("zero width in dims {layer_dims:?}")));
        }
        let mut rng = rng_from(seed);
        let mut params = Vec::with_capacity(2 * (layer_dims.len() - 1));
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], weight)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self { dims: layer_dims.to_vec(), activation, params, version: 0 })
    }

    /// Rebuild from explicit parameters (checkpoint loading); shapes must
    /// match the layer layout.
    pub fn from_params(layer_dims: &[usize], activation: Activation, params: Vec<Tensor>) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!("need at least 2 layer dims, got {layer_dims:?}")));
        }
        if params.len() != 2 * (layer_dims.len() - 1) {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * (layer_dims.len() - 1),
                params.len()
            )));
        }
        for (i, w) in layer_dims.windows(2).enumerate() {
            if params[2 * i].shape() != [w[0], w[1]] {
                return Err(Error::Shape(format!("weight {i} shape {:?}", params[2 * i].shape())));
            }
            if params[2 * i + 1].shape() != [w[1]] {
                return Err(Error::Shape(format!("bias {i} shape {:?}", params[2 * i + 1].shape())));
            }
        }
        Ok(Self { dims: layer_dims.to_vec(), activation, params, version: 0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable parameter view; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version += 1;
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.params[2 * layer + 1]
    }

    /// Zero the final layer so the net starts as the constant-zero map.
    pub fn zero_output_layer(&mut self) {
        let n = self.params.len();
        for p in &mut self.params[n - 2..] {
            p.data_mut().fill(0.0);
        }
        self.version += 1;
    }

    /// Fresh zeroed gradient buffer matching the parameter layout.
    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Forward pass for a single sample or a batch (last extent is the
    /// feature width).
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, MlpCache)> {
        if input.row_len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match net input {}",
                input.row_len(),
                self.in_dim()
            )));
        }
        let rows = input.rows();
        let n_layers = self.n_layers();
        let mut zs = Vec::with_capacity(n_layers);
        let mut cur = input.clone();
        for layer in 0..n_layers {
            let z = self.affine(layer, &cur);
            if layer + 1 < n_layers {
                let mut a = z.clone();
                for v in a.data_mut() {
                    *v = self.activation.apply(*v);
                }
                zs.push(z);
                cur = a;
            } else {
                zs.push(z.clone());
                cur = z;
            }
        }
        let out_shape = out_shape_like(input.shape(), self.out_dim());
        let out = cur.reshaped(out_shape)?;
        debug_assert_eq!(out.rows(), rows);
        let cache = MlpCache { version: self.version, input: input.clone(), zs };
        Ok((out, cache))
    }

    /// Forward without keeping a cache.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Reverse-mode gradients of the forward map.
    ///
    /// `output_grad` is dL/d(output); returns parameter gradients in the
    /// [`Mlp::params`] layout plus dL/d(input). Batch rows accumulate into
    /// the parameter gradients in row order.
    pub fn backward(&self, cache: &MlpCache, output_grad: &Tensor) -> Result<(MlpGrads, Tensor)> {
        if cache.version != self.version {
            return Err(Error::Contract(
                "stale forward cache: parameters changed since forward".into(),
            ));
        }
        let n_layers = self.n_layers();
        let last_z = &cache.zs[n_layers - 1];
        if output_grad.rows() != last_z.rows() || output_grad.row_len() != self.out_dim() {
            return Err(Error::Shape(format!(
                "output_grad shape {:?} does not match forward output",
                output_grad.shape()
            )));
        }

        let mut grads = self.zero_grads();
        // dZ of the output layer equals the upstream gradient (identity output).
        let mut dz = output_grad.clone().reshaped(vec![output_grad.rows(), self.out_dim()])?;

        for layer in (0..n_layers).rev() {
            // Input that fed this layer.
            let layer_in: Tensor = if layer == 0 {
                cache
                    .input
                    .clone()
                    .reshaped(vec![cache.input.rows(), self.in_dim()])?
            } else {
                let mut a = cache.zs[layer - 1].clone();
                for v in a.data_mut() {
                    *v = self.activation.apply(*v);
                }
                a
            };
            let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
            let rows = layer_in.rows();

            // dW = layer_in^T . dz ; db = column sums of dz.
            {
                let dw = grads.tensors[2 * layer].data_mut();
                for r in 0..rows {
                    let x = layer_in.row(r);
                    let g = dz.row(r);
                    for i in 0..n_in {
                        let xi = x[i];
                        if xi != 0.0 {
                            let row = &mut dw[i * n_out..(i + 1) * n_out];
                            for (w, gj) in row.iter_mut().zip(g) {
                                *w += xi * gj;
                            }
                        }
                    }
                }
            }
            {
                let db = grads.tensors[2 * layer + 1].data_mut();
                for r in 0..rows {
                    for (b, gj) in db.iter_mut().zip(dz.row(r)) {
                        *b += gj;
                    }
                }
            }

            // d(input of layer) = dz . W^T, then through the activation that
            // produced that input (none before layer 0).
            let w = self.weight(layer).data();
            let mut d_in = Tensor::zeros(&[rows, n_in]);
            for r in 0..rows {
                let g = dz.row(r);
                let out_row = d_in.row_mut(r);
                for i in 0..n_in {
                    out_row[i] = crate::tensor::slice_dot(&w[i * n_out..(i + 1) * n_out], g);
                }
            }
            if layer > 0 {
                let z_prev = &cache.zs[layer - 1];
                for (d, z) in d_in.data_mut().iter_mut().zip(z_prev.data()) {
                    *d *= self.activation.grad(*z);
                }
            }
            dz = d_in;
        }

        let input_grad = dz.reshaped(cache.input.shape().to_vec())?;
        Ok((grads, input_grad))
    }

    /// `input . W[layer] + b[layer]`, batched over rows.
    fn affine(&self, layer: usize, input: &Tensor) -> Tensor {
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        let rows = input.rows();
        let w = self.weight(layer).data();
        let b = self.bias(layer).data();
        let mut out = Tensor::zeros(&[rows, n_out]);
        for r in 0..rows {
            let x = input.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(b);
            for i in 0..n_in {
                let xi = x[i];
                if xi != 0.0 {
                    let wr = &w[i * n_out..(i + 1) * n_out];
                    for (oj, wj) in o.iter_mut().zip(wr) {
                        *oj += xi * wj;
                    }
                }
            }
        }
        out
    }
}

fn out_shape_like(input_shape: &[usize], out_dim: usize) -> Vec<usize> {
    let mut s = input_shape.to_vec();
    *s.last_mut().unwrap() = out_dim;
    s
}

/// Gradient buffer matching an [`Mlp`]'s parameter layout.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    tensors: Vec<Tensor>,
}

impl MlpGrads {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }
}

/// Softmax cross-entropy on one logit row; returns the loss and d(loss)/d(logits).
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    debug_assert!(label < logits.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Argmax index of a slice (first maximum wins).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Draw a standard-normal tensor of the given shape.
pub fn randn(shape: &[usize], rng: &mut StdRng) -> Tensor {
    use rand_distr::StandardNormal;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}
