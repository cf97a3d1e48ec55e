use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{inverse_softplus, softplus, Activation, BnnError, LayerKind, NetworkSpec};
use crate::rng::{self, tag};

/// Initial posterior `rho`; `softplus(-5) ≈ 6.7e-3`.
pub const INIT_RHO: f64 = -5.0;
/// Initial prior spread.
pub const INIT_PRIOR_SIGMA: f64 = 1.0;

/// Where one layer's parameters live in the flat parameter vector.
///
/// Deterministic layers store `[w (out x in), b (out)]`. Variational layers
/// store `[w_mu, w_rho, b_mu, b_rho, prior_mu, prior_rho]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub kind: LayerKind,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
    pub offset: usize,
}

impl LayerLayout {
    fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn param_len(&self) -> usize {
        let base = self.weight_len() + self.out_dim;
        match self.kind {
            LayerKind::Deterministic => base,
            LayerKind::Variational => 2 * base + 2,
        }
    }

    /// Point weights, or posterior means for variational layers.
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn biases(&self) -> Range<usize> {
        let start = match self.kind {
            LayerKind::Deterministic => self.offset + self.weight_len(),
            LayerKind::Variational => self.offset + 2 * self.weight_len(),
        };
        start..start + self.out_dim
    }

    /// Posterior `rho` of the weights (variational layers only).
    pub fn weight_rho(&self) -> Range<usize> {
        let start = self.offset + self.weight_len();
        start..start + self.weight_len()
    }

    pub fn bias_rho(&self) -> Range<usize> {
        let start = self.offset + 2 * self.weight_len() + self.out_dim;
        start..start + self.out_dim
    }

    /// Index of the layer prior's `mu`; `rho` follows it.
    pub fn prior(&self) -> usize {
        self.offset + 2 * (self.weight_len() + self.out_dim)
    }

    /// Number of noise draws per forward call.
    pub fn noise_len(&self) -> usize {
        match self.kind {
            LayerKind::Deterministic => 0,
            LayerKind::Variational => self.weight_len() + self.out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<LayerLayout>,
    params: Vec<f64>,
}

impl Network {
    /// Zero-filled network of the given shape.
    pub fn zeros(spec: NetworkSpec) -> Self {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_dim = spec.input_dim;
        let mut offset = 0;
        for l in &spec.layers {
            let layout = LayerLayout {
                kind: l.kind,
                activation: l.activation,
                in_dim,
                out_dim: l.width,
                offset,
            };
            offset += layout.param_len();
            in_dim = l.width;
            layers.push(layout);
        }
        Network {
            spec,
            layers,
            params: vec![0.0; offset],
        }
    }

    /// Fan-in uniform weights (He bound for ReLU layers, LeCun bound for the
    /// linear head), zero biases. Variational layers take the same draws as
    /// their means, so a `V` and a `D` layer initialize identically.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut net = Network::zeros(spec);
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let prior_rho = inverse_softplus(INIT_PRIOR_SIGMA);
        for layout in net.layers.clone() {
            let gain = match layout.activation {
                Activation::Relu => 6.0,
                Activation::Linear => 3.0,
            };
            let bound = (gain / layout.in_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for w in &mut net.params[layout.weights()] {
                *w = dist.sample(&mut rng);
            }
            if layout.kind == LayerKind::Variational {
                net.params[layout.weight_rho()].fill(INIT_RHO);
                net.params[layout.bias_rho()].fill(INIT_RHO);
                net.params[layout.prior()] = 0.0;
                net.params[layout.prior() + 1] = prior_rho;
            }
        }
        net
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replace all parameters; the length must match the layout.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), BnnError> {
        if params.len() != self.params.len() {
            return Err(BnnError::InputDim {
                expected: self.params.len(),
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// Set every posterior `rho` (weights and biases) of every variational layer.
    pub fn set_posterior_rho(&mut self, rho: f64) {
        for layout in self.layers.clone() {
            if layout.kind == LayerKind::Variational {
                self.params[layout.weight_rho()].fill(rho);
                self.params[layout.bias_rho()].fill(rho);
            }
        }
    }

    pub fn noise_len(&self) -> usize {
        self.layers.iter().map(LayerLayout::noise_len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

pub fn init_network(spec: NetworkSpec, seed: u64) -> Network {
    Network::init(spec, seed)
}

/// Standard-normal draws for every variational parameter, per layer; empty
/// vectors for deterministic layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Epsilon {
    pub layers: Vec<Vec<f64>>,
}

impl Epsilon {
    /// Weights first (row-major), then biases, layer by layer.
    pub fn draw<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| (0..l.noise_len()).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        Epsilon { layers }
    }

    pub fn zeros(net: &Network) -> Self {
        Epsilon {
            layers: net.layers.iter().map(|l| vec![0.0; l.noise_len()]).collect(),
        }
    }
}

/// Cached quantities of one batch forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub batch: usize,
    /// Input of each layer, `batch x in_dim` row-major.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer, `batch x out_dim`.
    pub pre: Vec<Vec<f64>>,
    /// Weights and biases actually used by each layer.
    pub weights: Vec<(Vec<f64>, Vec<f64>)>,
    /// Network outputs, one per row.
    pub output: Vec<f64>,
}

fn effective_layer(net: &Network, layout: &LayerLayout, eps: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let p = &net.params;
    let mu_w = &p[layout.weights()];
    let mu_b = &p[layout.biases()];
    match (layout.kind, eps) {
        (LayerKind::Variational, Some(eps)) => {
            let (eps_w, eps_b) = eps.split_at(mu_w.len());
            let w = mu_w
                .iter()
                .zip(&p[layout.weight_rho()])
                .zip(eps_w)
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            let b = mu_b
                .iter()
                .zip(&p[layout.bias_rho()])
                .zip(eps_b)
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            (w, b)
        }
        _ => (mu_w.to_vec(), mu_b.to_vec()),
    }
}

fn dense(input: &[f64], w: &[f64], b: &[f64], in_dim: usize, out: &mut [f64]) {
    for (row_in, row_out) in input.chunks_exact(in_dim).zip(out.chunks_exact_mut(b.len())) {
        for (k, z) in row_out.iter_mut().enumerate() {
            let wk = &w[k * in_dim..(k + 1) * in_dim];
            *z = b[k] + wk.iter().zip(row_in).map(|(a, x)| a * x).sum::<f64>();
        }
    }
}

/// Batch forward pass. `eps = None` evaluates posterior means.
pub fn forward_batch(net: &Network, inputs: &[f64], eps: Option<&Epsilon>) -> Result<Tape, BnnError> {
    let dim = net.input_dim();
    if inputs.is_empty() {
        return Err(BnnError::EmptyBatch);
    }
    if !inputs.len().is_multiple_of(dim) {
        return Err(BnnError::InputDim {
            expected: dim,
            got: inputs.len() % dim,
        });
    }
    let batch = inputs.len() / dim;
    let mut tape = Tape {
        batch,
        inputs: Vec::with_capacity(net.layers.len()),
        pre: Vec::with_capacity(net.layers.len()),
        weights: Vec::with_capacity(net.layers.len()),
        output: Vec::new(),
    };
    let mut current = inputs.to_vec();
    for (l, layout) in net.layers.iter().enumerate() {
        let layer_eps = eps.map(|e| e.layers[l].as_slice());
        let (w, b) = effective_layer(net, layout, layer_eps);
        let mut z = vec![0.0; batch * layout.out_dim];
        dense(&current, &w, &b, layout.in_dim, &mut z);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(BnnError::NonFinite(l));
        }
        let activated = match layout.activation {
            Activation::Relu => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Linear => z.clone(),
        };
        tape.inputs.push(std::mem::replace(&mut current, activated));
        tape.pre.push(z);
        tape.weights.push((w, b));
    }
    tape.output = current;
    Ok(tape)
}

fn check_input(net: &Network, x: &[f64]) -> Result<(), BnnError> {
    if x.len() != net.input_dim() {
        return Err(BnnError::InputDim {
            expected: net.input_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// One stochastic pass with freshly drawn parameters.
pub fn forward_sample<R: Rng + ?Sized>(net: &Network, x: &[f64], rng: &mut R) -> Result<(f64, Tape), BnnError> {
    check_input(net, x)?;
    let eps = Epsilon::draw(net, rng);
    let tape = forward_batch(net, x, Some(&eps))?;
    Ok((tape.output[0], tape))
}

/// Pass with every variational parameter at its posterior mean.
pub fn forward_mean(net: &Network, x: &[f64]) -> Result<f64, BnnError> {
    check_input(net, x)?;
    Ok(forward_batch(net, x, None)?.output[0])
}

/// Allocation-light single-input evaluator with cached posterior spreads.
///
/// Draws noise in the same order as [`Epsilon::draw`], so for a given RNG
/// state [`Predictor::sample`] equals [`forward_sample`].
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    net: &'a Network,
    sigma: Vec<Vec<f64>>,
    width: usize,
}

/// Scratch buffers for [`Predictor`].
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl<'a> Predictor<'a> {
    pub fn new(net: &'a Network) -> Self {
        let sigma = net
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Deterministic => Vec::new(),
                LayerKind::Variational => net.params[l.weight_rho()]
                    .iter()
                    .chain(&net.params[l.bias_rho()])
                    .map(|r| softplus(*r))
                    .collect(),
            })
            .collect();
        let width = net.layers.iter().map(|l| l.out_dim.max(l.in_dim)).max().unwrap_or(1);
        Predictor { net, sigma, width }
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            a: vec![0.0; self.width],
            b: vec![0.0; self.width],
        }
    }

    fn run<R: Rng + ?Sized>(&self, x: &[f64], mut rng: Option<&mut R>, scratch: &mut Scratch) -> f64 {
        let p = &self.net.params;
        scratch.a[..x.len()].copy_from_slice(x);
        for (l, layout) in self.net.layers.iter().enumerate() {
            let (input, out) = (&scratch.a[..layout.in_dim], &mut scratch.b[..layout.out_dim]);
            let w = &p[layout.weights()];
            let bias = &p[layout.biases()];
            match (layout.kind, rng.as_deref_mut()) {
                (LayerKind::Variational, Some(rng)) => {
                    let sigma = &self.sigma[l];
                    let n_w = w.len();
                    for (k, z) in out.iter_mut().enumerate() {
                        let row = k * layout.in_dim..(k + 1) * layout.in_dim;
                        let mut acc = 0.0;
                        for ((m, s), xi) in w[row.clone()].iter().zip(&sigma[row]).zip(input) {
                            let e: f64 = StandardNormal.sample(rng);
                            acc += (m + s * e) * xi;
                        }
                        *z = acc;
                    }
                    for (k, z) in out.iter_mut().enumerate() {
                        let e: f64 = StandardNormal.sample(rng);
                        *z += bias[k] + sigma[n_w + k] * e;
                    }
                }
                _ => {
                    for (k, z) in out.iter_mut().enumerate() {
                        let wk = &w[k * layout.in_dim..(k + 1) * layout.in_dim];
                        *z = bias[k] + wk.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            if layout.activation == Activation::Relu {
                for z in out.iter_mut() {
                    *z = z.max(0.0);
                }
            }
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        scratch.a[0]
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, scratch: &mut Scratch) -> f64 {
        self.run(x, Some(rng), scratch)
    }

    pub fn mean(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        self.run::<crate::rng::StreamRng>(x, None, scratch)
    }
}
