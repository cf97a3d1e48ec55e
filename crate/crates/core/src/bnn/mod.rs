//! Hybrid Bayesian neural networks built from scratch.
//!
//! A network is a stack of dense layers. Deterministic layers hold point
//! weights. Variational layers hold a factorized Gaussian posterior per
//! weight and bias, parameterized as `(mu, rho)` with `sigma = softplus(rho)`,
//! and one trainable Gaussian prior shared by the whole layer. A stochastic
//! forward pass draws `w = mu + sigma * eps` once per parameter per call.
//!
//! Training minimizes a weighted squared error plus a scaled KL divergence
//! between posteriors and priors, using reverse-mode gradients through the
//! reparameterization and Adam.

mod adam;
mod loss;
mod network;
mod train;

use std::fmt;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use loss::{kl_gaussian, loss_and_grads, loss_and_grads_with_eps, loss_with_eps, network_kl, Batch, LossEval};
pub use network::{
    forward_batch, forward_mean, forward_sample, init_network, Epsilon, LayerLayout, Network, Predictor, Scratch, Tape,
    INIT_PRIOR_SIGMA, INIT_RHO,
};
pub use train::{mean_mse, train, History, KlScale, TrainConfig, TrainingData};

#[derive(Debug, Error, PartialEq)]
pub enum BnnError {
    #[error("bad architecture token {token:?}: {reason}")]
    BadToken { token: String, reason: String },
    #[error("architecture output layer has width {0}, expected 1")]
    BadHead(usize),
    #[error("architecture is empty")]
    EmptyArchitecture,
    #[error("non-finite activation in layer {0}")]
    NonFinite(usize),
    #[error("input has {got} values, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch weights sum to zero")]
    ZeroWeight,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Deterministic,
    Variational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn has_variational(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Variational)
    }
}

/// `V64-D32-D16-D1` notation.
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            let letter = match layer.kind {
                LayerKind::Deterministic => 'D',
                LayerKind::Variational => 'V',
            };
            write!(f, "{letter}{}", layer.width)?;
        }
        Ok(())
    }
}

/// Parse `V<n>`/`D<n>` tokens joined by `-`. Hidden layers use ReLU, the
/// last layer is linear and must have width 1.
pub fn parse_architecture(text: &str, input_dim: usize) -> Result<NetworkSpec, BnnError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(BnnError::EmptyArchitecture);
    }
    if input_dim == 0 {
        return Err(BnnError::BadToken {
            token: text.to_string(),
            reason: "input dimension must be positive".into(),
        });
    }
    let tokens: Vec<&str> = text.split('-').map(str::trim).collect();
    let mut layers = Vec::with_capacity(tokens.len());
    for (i, token) in tokens.iter().enumerate() {
        let bad = |reason: &str| BnnError::BadToken {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let mut chars = token.chars();
        let kind = match chars.next().map(|c| c.to_ascii_uppercase()) {
            Some('V') => LayerKind::Variational,
            Some('D') => LayerKind::Deterministic,
            _ => return Err(bad("expected V<n> or D<n>")),
        };
        let width: usize = chars.as_str().parse().map_err(|_| bad("width is not a positive integer"))?;
        if width == 0 {
            return Err(bad("width must be at least 1"));
        }
        let activation = if i + 1 == tokens.len() {
            Activation::Linear
        } else {
            Activation::Relu
        };
        layers.push(LayerSpec { kind, width, activation });
    }
    let head = layers.last().map(|l| l.width).unwrap_or(0);
    if head != 1 {
        return Err(BnnError::BadHead(head));
    }
    Ok(NetworkSpec { input_dim, layers })
}

/// Gaussian with spread `softplus(rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParam {
    pub mu: f64,
    pub rho: f64,
}

impl GaussianParam {
    pub fn new(mu: f64, rho: f64) -> Self {
        GaussianParam { mu, rho }
    }

    pub fn from_sigma(mu: f64, sigma: f64) -> Self {
        GaussianParam {
            mu,
            rho: inverse_softplus(sigma),
        }
    }

    pub fn sigma(&self) -> f64 {
        softplus(self.rho)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
