//! Dense multilayer perceptron with hand-written backpropagation and Adam.
//!
//! Parameters of a network live in one flat `Vec<f64>`; layer `l` stores its
//! weight matrix row-major with shape `(fan_in, fan_out)` followed by its bias.
//! Keeping everything flat makes the optimizer, Polyak averaging and finite
//! difference checks plain slice loops.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, QvpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Mish,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Mish => mish_derivative(x),
            Activation::Identity => 1.0,
        }
    }
}

/// `x * tanh(softplus(x))`, evaluated with a single exponential.
#[inline]
pub fn mish(x: f64) -> f64 {
    if x > 20.0 {
        return x;
    }
    // tanh(ln(1 + e^x)) = n / (n + 2) with n = e^x (e^x + 2)
    let e = x.exp();
    let n = e * (e + 2.0);
    x * n / (n + 2.0)
}

#[inline]
pub fn mish_derivative(x: f64) -> f64 {
    if x > 20.0 {
        return 1.0;
    }
    let e = x.exp();
    let n = e * (e + 2.0);
    let tanh_sp = n / (n + 2.0);
    let sigmoid = e / (1.0 + e);
    tanh_sp + x * (1.0 - tanh_sp * tanh_sp) * sigmoid
}

/// Fully connected network. Hidden layers use `hidden_activation`, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden_activation: Activation,
    params: Vec<f64>,
}

/// Gradient with the exact layout of an [`Mlp`]'s parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<f64>);

impl ParamGrads {
    pub fn zeros(len: usize) -> Self {
        ParamGrads(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|g| *g == 0.0)
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b;
        }
    }
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer, `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pre_activations: Vec<Array2<f64>>,
}

impl Mlp {
    /// Network with weights and biases drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden_activation)?;
        for layer in 0..net.num_layers() {
            let bound = 1.0 / (dims[layer] as f64).sqrt();
            let (start, end) = net.layer_range(layer);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    /// Two hidden layers of `hidden` units with mish activations.
    pub fn two_hidden<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(&[input_dim, hidden, hidden, output_dim], Activation::Mish, rng)
    }

    pub fn zeros(dims: &[usize], hidden_activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(QvpoError::Config(format!(
                "network needs at least two non-zero layer sizes, got {dims:?}"
            )));
        }
        let len = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            dims: dims.to_vec(),
            hidden_activation,
            params: vec![0.0; len],
        })
    }

    pub fn from_params(
        dims: &[usize],
        hidden_activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, hidden_activation)?;
        check_len("mlp parameter vector", net.params.len(), params.len())?;
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(QvpoError::NonFinite(format!(
                "parameter {i} (layer {})",
                net.layer_of(i)
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims has at least two entries")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.dims == other.dims
    }

    /// Flat index of the first parameter of `layer`.
    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flat index range `[start, end)` holding layer `layer`'s weights and bias.
    fn layer_range(&self, layer: usize) -> (usize, usize) {
        let start = self.layer_offset(layer);
        let end = start + self.dims[layer] * self.dims[layer + 1] + self.dims[layer + 1];
        (start, end)
    }

    /// Layer that owns flat parameter index `index`.
    pub fn layer_of(&self, index: usize) -> usize {
        (0..self.num_layers())
            .find(|&l| index < self.layer_range(l).1)
            .unwrap_or(self.num_layers() - 1)
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (start, _) = self.layer_range(layer);
        let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
        ArrayView2::from_shape((fan_in, fan_out), &self.params[start..start + fan_in * fan_out])
            .expect("layer slice matches its shape")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (_, end) = self.layer_range(layer);
        ArrayView1::from(&self.params[end - self.dims[layer + 1]..end])
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden_activation
        }
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.input_dim(), input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch whose rows are samples.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_len("mlp input", self.input_dim(), input.ncols())?;
        let mut x = input.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = x.dot(&self.weight(layer));
            z += &self.bias(layer);
            let act = self.activation_of(layer);
            if act != Activation::Identity {
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Forward pass that also records what [`Mlp::backward_batch`] needs.
    pub fn forward_cached(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        check_len("mlp input", self.input_dim(), input.ncols())?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_activations = Vec::with_capacity(self.num_layers());
        let mut x = input.to_owned();
        for layer in 0..self.num_layers() {
            let mut z = x.dot(&self.weight(layer));
            z += &self.bias(layer);
            let act = self.activation_of(layer);
            let out = if act == Activation::Identity {
                z.clone()
            } else {
                z.mapv(|v| act.apply(v))
            };
            inputs.push(x);
            pre_activations.push(z);
            x = out;
        }
        Ok((
            x,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Gradients of `sum_rows(upstream · output)` with respect to the parameters
    /// and to the input rows.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(ParamGrads, Array2<f64>)> {
        check_len("mlp upstream gradient", self.output_dim(), upstream.ncols())?;
        check_len(
            "mlp upstream batch",
            cache.inputs[0].nrows(),
            upstream.nrows(),
        )?;
        let mut grads = ParamGrads::zeros(self.num_params());
        let mut delta = upstream.to_owned();
        for layer in (0..self.num_layers()).rev() {
            let act = self.activation_of(layer);
            if act != Activation::Identity {
                delta.zip_mut_with(&cache.pre_activations[layer], |d, &z| {
                    *d *= act.derivative(z)
                });
            }
            let (start, end) = self.layer_range(layer);
            let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
            let dw = cache.inputs[layer].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let slot = &mut grads.0[start..end];
            for (g, v) in slot[..fan_in * fan_out].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in slot[fan_in * fan_out..].iter_mut().zip(db.iter()) {
                *g = *v;
            }
            delta = delta.dot(&self.weight(layer).t());
        }
        Ok((grads, delta))
    }

    /// Single-sample backward pass; recomputes the forward activations.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(ParamGrads, Vec<f64>)> {
        check_len("mlp input", self.input_dim(), input.len())?;
        check_len("mlp upstream gradient", self.output_dim(), upstream.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (_, cache) = self.forward_cached(x)?;
        let (grads, dx) = self.backward_batch(&cache, up)?;
        Ok((grads, dx.into_raw_vec_and_offset().0))
    }

    /// `self <- tau * source + (1 - tau) * self`, parameter-wise.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        debug_assert!(self.same_shape(source));
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + (1.0 - tau) * *t;
        }
    }
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn for_mlp(net: &Mlp, lr: f64) -> Self {
        Self::new(net.num_params(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One bias-corrected Adam update of `net` along `grads`.
    ///
    /// Gradients are validated before anything is mutated, so a rejected
    /// update leaves both the network and the optimizer untouched.
    pub fn step(&mut self, net: &mut Mlp, grads: &ParamGrads) -> Result<()> {
        check_len("adam parameters", self.first_moment.len(), net.num_params())?;
        check_len("adam gradients", self.first_moment.len(), grads.len())?;
        if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
            return Err(QvpoError::NonFinite(format!(
                "gradient entry {i} in layer {}",
                net.layer_of(i)
            )));
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in net
            .params
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over a seeded subset of at most `max_coords` parameters.
///
/// `loss` must be deterministic in the network parameters; it returns the
/// loss value together with its analytic gradient.
pub fn gradient_check<F>(net: &Mlp, mut loss: F, max_coords: usize, seed: u64) -> f64
where
    F: FnMut(&Mlp) -> (f64, ParamGrads),
{
    use rand::SeedableRng;
    const STEP: f64 = 1e-5;

    let (_, analytic) = loss(net);
    let n = net.num_params();
    let coords: Vec<usize> = if max_coords >= n {
        (0..n).collect()
    } else {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, n, max_coords).into_vec()
    };

    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in coords {
        let original = probe.params[i];
        probe.params[i] = original + STEP;
        let (up, _) = loss(&probe);
        probe.params[i] = original - STEP;
        let (down, _) = loss(&probe);
        probe.params[i] = original;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.0[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Builds a `(rows, cols)` matrix from equally long row slices.
pub fn stack_rows(rows: &[Vec<f64>], cols: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.iter().enumerate() {
        check_len("row", cols, row.len())?;
        out.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
    }
    Ok(out)
}

pub(crate) fn row_to_vec(row: ArrayView1<'_, f64>) -> Vec<f64> {
    row.iter().copied().collect()
}
