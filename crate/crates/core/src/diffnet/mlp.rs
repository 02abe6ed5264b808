use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_len, DiffnetError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    #[inline]
    pub fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, DiffnetError> {
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense stack over `dims` with `hidden` activations between layers and
    /// `output` on the last one.
    pub fn dense(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self, DiffnetError> {
        if dims.len() < 2 {
            return Err(DiffnetError::InvalidSpec("need at least input and output dims".into()));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec::new(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<(), DiffnetError> {
        if self.layers.is_empty() {
            return Err(DiffnetError::InvalidSpec("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(DiffnetError::InvalidSpec(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(DiffnetError::InvalidSpec(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Block {
    rows: usize,
    cols: usize,
    weights: usize,
    bias: usize,
}

fn layout(spec: &MlpSpec) -> Vec<Block> {
    let mut offset = 0;
    spec.layers
        .iter()
        .map(|l| {
            let block = Block {
                rows: l.out_dim,
                cols: l.in_dim,
                weights: offset,
                bias: offset + l.out_dim * l.in_dim,
            };
            offset = block.bias + l.out_dim;
            block
        })
        .collect()
}

/// Flat parameter storage for one network. Weights are row-major
/// `out_dim x in_dim`, followed by the bias, layer after layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    blocks: Vec<Block>,
}

impl ParamStore {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            data: vec![0.0; spec.param_count()],
            blocks: layout(spec),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            data: vec![0.0; self.data.len()],
            blocks: self.blocks.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let b = self.blocks[layer];
        &self.data[b.weights..b.bias]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let b = self.blocks[layer];
        &mut self.data[b.weights..b.bias]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let b = self.blocks[layer];
        &self.data[b.bias..b.bias + b.rows]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let b = self.blocks[layer];
        &mut self.data[b.bias..b.bias + b.rows]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_scaled(&mut self, other: &ParamStore, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Activation trace of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }

    pub fn output(&self) -> &[f64] {
        &self.activations[self.activations.len() - 1]
    }
}

/// A dense multi-layer perceptron: spec plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = DiffnetError;

    fn try_from(repr: MlpRepr) -> Result<Self, Self::Error> {
        repr.spec.validate()?;
        let mut params = ParamStore::zeros(&repr.spec);
        check_len("checkpoint parameters", params.len(), repr.params.len())?;
        params.data = repr.params;
        if !params.all_finite() {
            return Err(DiffnetError::NonFinite("checkpoint parameters"));
        }
        Ok(Self {
            spec: repr.spec,
            params,
        })
    }
}

impl From<Mlp> for MlpRepr {
    fn from(mlp: Mlp) -> Self {
        Self {
            spec: mlp.spec,
            params: mlp.params.data,
        }
    }
}

impl Mlp {
    /// Uniform fan-in/fan-out initialisation, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, DiffnetError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::zeros(&spec);
        for (i, layer) in spec.layers.iter().enumerate() {
            let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for w in params.weights_mut(i) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: ParamStore) -> Result<Self, DiffnetError> {
        spec.validate()?;
        check_len("parameter store", spec.param_count(), params.len())?;
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn layer_forward(&self, layer: usize, input: &[f64], out: &mut Vec<f64>) {
        let spec = self.spec.layers[layer];
        let w = self.params.weights(layer);
        let b = self.params.bias(layer);
        out.clear();
        out.extend(w.chunks_exact(spec.in_dim).zip(b).map(|(row, bias)| {
            let z: f64 = row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + bias;
            spec.activation.apply(z)
        }));
    }

    fn check_input(&self, input: &[f64]) -> Result<(), DiffnetError> {
        check_len("network input", self.input_dim(), input.len())?;
        if input.iter().any(|x| !x.is_finite()) {
            return Err(DiffnetError::NonFinite("network input"));
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, DiffnetError> {
        self.check_input(input)?;
        let mut current = input.to_vec();
        let mut next = Vec::new();
        for layer in 0..self.spec.layers.len() {
            self.layer_forward(layer, &current, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), DiffnetError> {
        self.check_input(input)?;
        let mut activations = Vec::with_capacity(self.spec.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in 0..self.spec.layers.len() {
            let mut out = Vec::with_capacity(self.spec.layers[layer].out_dim);
            self.layer_forward(layer, &activations[layer], &mut out);
            activations.push(out);
        }
        let output = activations[activations.len() - 1].clone();
        Ok((output, ForwardCache { activations }))
    }

    /// Accumulates the gradient of `<output_grad, output>` into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut ParamStore,
    ) -> Result<Vec<f64>, DiffnetError> {
        check_len("output gradient", self.output_dim(), output_grad.len())?;
        check_len("gradient store", self.params.len(), grads.len())?;
        if cache.activations.len() != self.spec.layers.len() + 1 {
            return Err(DiffnetError::DimensionMismatch {
                what: "forward cache layers",
                expected: self.spec.layers.len() + 1,
                got: cache.activations.len(),
            });
        }
        let mut upstream = output_grad.to_vec();
        for layer in (0..self.spec.layers.len()).rev() {
            let spec = self.spec.layers[layer];
            let input = &cache.activations[layer];
            let output = &cache.activations[layer + 1];
            check_len("cached activation", spec.out_dim, output.len())?;
            let delta: Vec<f64> = upstream
                .iter()
                .zip(output)
                .map(|(g, y)| g * spec.activation.derivative_at_output(*y))
                .collect();
            {
                let gw = grads.weights_mut(layer);
                for (row, d) in gw.chunks_exact_mut(spec.in_dim).zip(&delta) {
                    if *d != 0.0 {
                        for (g, x) in row.iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            for (g, d) in grads.bias_mut(layer).iter_mut().zip(&delta) {
                *g += d;
            }
            let w = self.params.weights(layer);
            let mut input_grad = vec![0.0; spec.in_dim];
            for (row, d) in w.chunks_exact(spec.in_dim).zip(&delta) {
                if *d != 0.0 {
                    for (g, a) in input_grad.iter_mut().zip(row) {
                        *g += d * a;
                    }
                }
            }
            upstream = input_grad;
        }
        Ok(upstream)
    }

    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<(ParamStore, Vec<f64>), DiffnetError> {
        let mut grads = self.params.zeros_like();
        let input_grad = self.backward_into(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }
}
