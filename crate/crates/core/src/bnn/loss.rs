use rand::Rng;

use super::network::{forward_batch, Epsilon, Network, Tape};
use super::{sigmoid, softplus, Activation, BnnError, GaussianParam, LayerKind};

/// A contiguous minibatch: `inputs` is `len x input_dim` row-major.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
    pub weights: &'a [f64],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    /// `data + kl_weight * kl`.
    pub loss: f64,
    /// Weighted mean squared error.
    pub data: f64,
    pub kl: f64,
    /// Same layout as [`Network::params`].
    pub grads: Vec<f64>,
}

/// Closed-form `KL(q || p)` between two univariate Gaussians.
pub fn kl_gaussian(q: GaussianParam, p: GaussianParam) -> f64 {
    let (sq, sp) = (q.sigma(), p.sigma());
    let dm = q.mu - p.mu;
    (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
}

fn layer_posteriors(net: &Network, l: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    let layout = net.layers()[l];
    layout
        .weights()
        .zip(layout.weight_rho())
        .chain(layout.biases().zip(layout.bias_rho()))
}

/// Sum of `KL(posterior || layer prior)` over every variational parameter.
pub fn network_kl(net: &Network) -> f64 {
    let p = net.params();
    let mut total = 0.0;
    for (l, layout) in net.layers().iter().enumerate() {
        if layout.kind != LayerKind::Variational {
            continue;
        }
        let prior = GaussianParam::new(p[layout.prior()], p[layout.prior() + 1]);
        total += layer_posteriors(net, l)
            .map(|(m, r)| kl_gaussian(GaussianParam::new(p[m], p[r]), prior))
            .sum::<f64>();
    }
    total
}

/// Accumulate KL gradients into `grads`, scaled by `scale`.
fn kl_grads(net: &Network, scale: f64, grads: &mut [f64]) {
    let p = net.params();
    for (l, layout) in net.layers().iter().enumerate() {
        if layout.kind != LayerKind::Variational {
            continue;
        }
        let (pm, pr) = (layout.prior(), layout.prior() + 1);
        let sp = softplus(p[pr]);
        let dsp = sigmoid(p[pr]);
        let mut g_prior_mu = 0.0;
        let mut g_prior_sigma = 0.0;
        for (m, r) in layer_posteriors(net, l) {
            let sq = softplus(p[r]);
            let dm = p[m] - p[pm];
            grads[m] += scale * dm / (sp * sp);
            grads[r] += scale * (sq / (sp * sp) - 1.0 / sq) * sigmoid(p[r]);
            g_prior_mu -= dm / (sp * sp);
            g_prior_sigma += 1.0 / sp - (sq * sq + dm * dm) / (sp * sp * sp);
        }
        grads[pm] += scale * g_prior_mu;
        grads[pr] += scale * g_prior_sigma * dsp;
    }
}

fn check_batch(net: &Network, batch: &Batch<'_>) -> Result<f64, BnnError> {
    if batch.is_empty() {
        return Err(BnnError::EmptyBatch);
    }
    if batch.inputs.len() != batch.len() * net.input_dim() || batch.weights.len() != batch.len() {
        return Err(BnnError::InputDim {
            expected: batch.len() * net.input_dim(),
            got: batch.inputs.len(),
        });
    }
    let total: f64 = batch.weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(BnnError::ZeroWeight);
    }
    Ok(total)
}

fn data_loss(tape: &Tape, batch: &Batch<'_>, weight_sum: f64) -> f64 {
    tape.output
        .iter()
        .zip(batch.targets)
        .zip(batch.weights)
        .map(|((y_hat, y), w)| w * (y - y_hat) * (y - y_hat))
        .sum::<f64>()
        / weight_sum
}

/// Loss only, for a fixed noise draw.
pub fn loss_with_eps(net: &Network, batch: &Batch<'_>, eps: &Epsilon, kl_weight: f64) -> Result<f64, BnnError> {
    let weight_sum = check_batch(net, batch)?;
    let tape = forward_batch(net, batch.inputs, Some(eps))?;
    let kl = if kl_weight != 0.0 { network_kl(net) } else { 0.0 };
    let loss = data_loss(&tape, batch, weight_sum) + kl_weight * kl;
    if !loss.is_finite() {
        return Err(BnnError::NonFiniteLoss);
    }
    Ok(loss)
}

/// Loss and gradients for a fixed noise draw.
pub fn loss_and_grads_with_eps(
    net: &Network,
    batch: &Batch<'_>,
    eps: &Epsilon,
    kl_weight: f64,
) -> Result<LossEval, BnnError> {
    let weight_sum = check_batch(net, batch)?;
    let tape = forward_batch(net, batch.inputs, Some(eps))?;
    let data = data_loss(&tape, batch, weight_sum);
    let kl = if kl_weight != 0.0 { network_kl(net) } else { 0.0 };
    let loss = data + kl_weight * kl;
    if !loss.is_finite() {
        return Err(BnnError::NonFiniteLoss);
    }

    let n = tape.batch;
    let params = net.params();
    let mut grads = vec![0.0; params.len()];

    // dL/d(output)
    let mut upstream: Vec<f64> = tape
        .output
        .iter()
        .zip(batch.targets)
        .zip(batch.weights)
        .map(|((y_hat, y), w)| -2.0 * w * (y - y_hat) / weight_sum)
        .collect();

    for (l, layout) in net.layers().iter().enumerate().rev() {
        let (in_dim, out_dim) = (layout.in_dim, layout.out_dim);
        if layout.activation == Activation::Relu {
            for (g, z) in upstream.iter_mut().zip(&tape.pre[l]) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = &tape.inputs[l];
        let (w_eff, _) = &tape.weights[l];

        let mut d_w = vec![0.0; in_dim * out_dim];
        let mut d_b = vec![0.0; out_dim];
        for r in 0..n {
            let a = &input[r * in_dim..(r + 1) * in_dim];
            for k in 0..out_dim {
                let g = upstream[r * out_dim + k];
                if g == 0.0 {
                    continue;
                }
                d_b[k] += g;
                for (dw, x) in d_w[k * in_dim..(k + 1) * in_dim].iter_mut().zip(a) {
                    *dw += g * x;
                }
            }
        }

        if l > 0 {
            let mut next = vec![0.0; n * in_dim];
            for r in 0..n {
                let out_row = &mut next[r * in_dim..(r + 1) * in_dim];
                for k in 0..out_dim {
                    let g = upstream[r * out_dim + k];
                    if g == 0.0 {
                        continue;
                    }
                    for (o, w) in out_row.iter_mut().zip(&w_eff[k * in_dim..(k + 1) * in_dim]) {
                        *o += g * w;
                    }
                }
            }
            upstream = next;
        }

        // w = mu + softplus(rho) * eps: dw/dmu = 1, dw/drho = eps * sigmoid(rho).
        grads[layout.weights()].copy_from_slice(&d_w);
        grads[layout.biases()].copy_from_slice(&d_b);
        if layout.kind == LayerKind::Variational {
            let (eps_w, eps_b) = eps.layers[l].split_at(d_w.len());
            for (((g, dw), e), r) in grads[layout.weight_rho()]
                .iter_mut()
                .zip(&d_w)
                .zip(eps_w)
                .zip(&params[layout.weight_rho()])
            {
                *g = dw * e * sigmoid(*r);
            }
            for (((g, db), e), r) in grads[layout.bias_rho()]
                .iter_mut()
                .zip(&d_b)
                .zip(eps_b)
                .zip(&params[layout.bias_rho()])
            {
                *g = db * e * sigmoid(*r);
            }
        }
    }

    if kl_weight != 0.0 {
        kl_grads(net, kl_weight, &mut grads);
    }
    Ok(LossEval { loss, data, kl, grads })
}

/// Draw one noise sample (shared by every row of the batch) and evaluate.
pub fn loss_and_grads<R: Rng + ?Sized>(
    net: &Network,
    batch: &Batch<'_>,
    rng: &mut R,
    kl_weight: f64,
) -> Result<LossEval, BnnError> {
    let eps = Epsilon::draw(net, rng);
    loss_and_grads_with_eps(net, batch, &eps, kl_weight)
}

#[cfg(test)]
mod tests {
    use super::super::{inverse_softplus, parse_architecture};
    use super::*;
    use crate::rng;
    use rand::SeedableRng;

    #[test]
    fn kl_closed_form_cases() {
        let p = GaussianParam::from_sigma(0.0, 1.0);
        assert!(kl_gaussian(p, p).abs() < 1e-15);
        let q = GaussianParam::from_sigma(1.0, 1.0);
        assert!((kl_gaussian(q, p) - 0.5).abs() < 1e-12);
        let wide = GaussianParam::from_sigma(0.0, 2.0);
        assert!((kl_gaussian(wide, p) - (1.5 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn kl_of_network() {
        let det = Network::init(parse_architecture("D8-D1", 4).unwrap(), 1);
        assert_eq!(network_kl(&det), 0.0);

        let mut net = Network::init(parse_architecture("V3-D1", 2).unwrap(), 1);
        let layout = net.layers()[0];
        let prior_rho = inverse_softplus(0.7);
        let p = net.params_mut();
        p[layout.weights()].fill(0.25);
        p[layout.biases()].fill(0.25);
        p[layout.weight_rho()].fill(prior_rho);
        p[layout.bias_rho()].fill(prior_rho);
        p[layout.prior()] = 0.25;
        p[layout.prior() + 1] = prior_rho;
        assert!(network_kl(&net).abs() < 1e-12);

        // Every posterior identical: KL is 9 copies of one term; a layer
        // with twice the parameters doubles it.
        let p = net.params_mut();
        p[layout.weights()].fill(1.25);
        p[layout.biases()].fill(1.25);
        let one = kl_gaussian(GaussianParam::new(1.25, prior_rho), GaussianParam::new(0.25, prior_rho));
        assert!((network_kl(&net) - 9.0 * one).abs() < 1e-12);

        let mut wider = Network::init(parse_architecture("V6-D1", 2).unwrap(), 1);
        let lw = wider.layers()[0];
        let p = wider.params_mut();
        p[lw.weights()].fill(1.25);
        p[lw.biases()].fill(1.25);
        p[lw.weight_rho()].fill(prior_rho);
        p[lw.bias_rho()].fill(prior_rho);
        p[lw.prior()] = 0.25;
        p[lw.prior() + 1] = prior_rho;
        assert!((network_kl(&wider) - 2.0 * network_kl(&net)).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_data_grads() {
        // Single linear layer y = 2 x0 - x1, collapsed posterior equal to prior.
        let mut net = Network::zeros(parse_architecture("V1", 2).unwrap());
        let layout = net.layers()[0];
        let p = net.params_mut();
        p[layout.weights()].copy_from_slice(&[2.0, -1.0]);
        p[layout.weight_rho()].fill(-40.0);
        p[layout.bias_rho()].fill(-40.0);
        let inputs = [1.0, 0.0, 0.5, 2.0, -1.0, 1.0];
        let targets = [2.0, -1.0, -3.0];
        let batch = Batch {
            inputs: &inputs,
            targets: &targets,
            weights: &[1.0; 3],
        };
        let eval = loss_and_grads(&net, &batch, &mut rng::StreamRng::seed_from_u64(0), 0.0).unwrap();
        assert!(eval.loss.abs() < 1e-20);
        assert!(eval.grads.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_kl_weight_is_weighted_mse() {
        let net = Network::init(parse_architecture("V4-D3-D1", 3).unwrap(), 2);
        let inputs = [0.1, 0.2, 0.3, -1.0, 0.5, 0.25, 2.0, -0.5, 0.0];
        let targets = [0.4, -0.2, 1.1];
        let weights = [1.0, 2.0, 0.5];
        let batch = Batch {
            inputs: &inputs,
            targets: &targets,
            weights: &weights,
        };
        let eps = Epsilon::draw(&net, &mut rng::StreamRng::seed_from_u64(7));
        let eval = loss_and_grads_with_eps(&net, &batch, &eps, 0.0).unwrap();
        let tape = forward_batch(&net, &inputs, Some(&eps)).unwrap();
        let reference: f64 = tape
            .output
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((a, b), w)| w * (a - b).powi(2))
            .sum::<f64>()
            / 3.5;
        assert!((eval.loss - reference).abs() < 1e-14);
        assert_eq!(eval.loss, eval.data);
    }

    #[test]
    fn degenerate_batches_rejected() {
        let net = Network::init(parse_architecture("D2-D1", 1).unwrap(), 2);
        let eps = Epsilon::zeros(&net);
        let empty = Batch {
            inputs: &[],
            targets: &[],
            weights: &[],
        };
        assert_eq!(loss_and_grads_with_eps(&net, &empty, &eps, 0.0), Err(BnnError::EmptyBatch));
        let zero = Batch {
            inputs: &[1.0],
            targets: &[1.0],
            weights: &[0.0],
        };
        assert_eq!(loss_and_grads_with_eps(&net, &zero, &eps, 0.0), Err(BnnError::ZeroWeight));
    }
}
