//! Ensemble prediction. The estimate is the mean of repeated stochastic
//! forward passes (or of a bag of models) and the uncertainty their sample
//! standard deviation.

use std::fmt::Write as _;

use chrono::NaiveDateTime;
use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::bnn::{Predictor, Scratch};
use crate::checkpoint::Model;
use crate::dataset::{encode, ENCODED_DIM};
use crate::ionex::{GridSpec, IonexError, IonexFile, IonexHeader, TecMap};
use crate::rng::{self, tag};
use crate::spaceweather::{build_feature, FeatureVector, SpaceWeatherError, SpaceWeatherTable};

pub const DEFAULT_K: usize = 100;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("ensemble size {0} is too small, need at least 2")]
    EnsembleSize(usize),
    #[error("non-finite ensemble member")]
    NonFinite,
    #[error("model expects {0} inputs, features encode to {ENCODED_DIM}")]
    InputDim(usize),
    #[error("bagged models differ: {0}")]
    Mismatch(String),
    #[error("no epochs to predict")]
    NoEpochs,
    #[error(transparent)]
    Coverage(#[from] SpaceWeatherError),
    #[error(transparent)]
    Ionex(#[from] IonexError),
}

/// Mean and sample standard deviation (divisor `k - 1`) of an ensemble, TECU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsemblePrediction {
    pub mean_vtec: f64,
    pub sigma: f64,
    pub k: usize,
}

impl EnsemblePrediction {
    pub fn from_samples(samples: &[f64]) -> Result<Self, InferenceError> {
        let k = samples.len();
        if k < 2 {
            return Err(InferenceError::EnsembleSize(k));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(InferenceError::NonFinite);
        }
        let mean = samples.iter().sum::<f64>() / k as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (k - 1) as f64;
        Ok(EnsemblePrediction {
            mean_vtec: mean,
            sigma: var.sqrt(),
            k,
        })
    }
}

fn check_model(model: &Model) -> Result<(), InferenceError> {
    match model.network.input_dim() {
        ENCODED_DIM => Ok(()),
        d => Err(InferenceError::InputDim(d)),
    }
}

fn check_k(k: usize) -> Result<(), InferenceError> {
    if k < 2 {
        Err(InferenceError::EnsembleSize(k))
    } else {
        Ok(())
    }
}

/// `k` stochastic passes of one model at one input, denormalized.
fn ensemble_at(
    model: &Model,
    predictor: &Predictor<'_>,
    feature: &FeatureVector,
    k: usize,
    rng: &mut rng::StreamRng,
    scratch: &mut Scratch,
    samples: &mut Vec<f64>,
) -> Result<EnsemblePrediction, InferenceError> {
    let mut x = [0.0; ENCODED_DIM];
    model.normalizer.normalize_input(&encode(feature), &mut x);
    samples.clear();
    for _ in 0..k {
        let z = predictor.sample(&x, rng, scratch);
        samples.push(model.normalizer.denormalize_target(z));
    }
    EnsemblePrediction::from_samples(samples)
}

/// `k` independent stochastic forward passes at one point. No clamping.
pub fn predict_point(
    model: &Model,
    feature: &FeatureVector,
    k: usize,
    seed: u64,
) -> Result<EnsemblePrediction, InferenceError> {
    check_model(model)?;
    check_k(k)?;
    let predictor = Predictor::new(&model.network);
    let mut scratch = predictor.scratch();
    let mut rng = rng::stream(seed, &[tag::PREDICT]);
    ensemble_at(model, &predictor, feature, k, &mut rng, &mut scratch, &mut Vec::with_capacity(k))
}

/// Mean and sigma maps over a grid at a list of epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedMapSet {
    pub grid: GridSpec,
    pub epochs: Vec<NaiveDateTime>,
    pub mean_maps: Vec<TecMap>,
    pub sigma_maps: Vec<TecMap>,
    /// Nodes whose ensemble mean was negative and was set to zero.
    pub clamped: usize,
}

impl PredictedMapSet {
    /// Read back a set written by [`export_predicted_ionex`].
    pub fn from_ionex(file: &IonexFile) -> Result<Self, InferenceError> {
        file.validate()?;
        if file.tec_maps.is_empty() {
            return Err(InferenceError::NoEpochs);
        }
        if file.rms_maps.len() != file.tec_maps.len() {
            return Err(IonexError::Invalid("predicted maps need one RMS map per TEC map".into()).into());
        }
        Ok(PredictedMapSet {
            grid: file.header.grid,
            epochs: file.tec_maps.iter().map(|m| m.epoch).collect(),
            mean_maps: file.tec_maps.clone(),
            sigma_maps: file.rms_maps.clone(),
            clamped: 0,
        })
    }

    pub fn node_count(&self) -> usize {
        self.epochs.len() * self.grid.len()
    }
}

/// Evaluate `node` at every node of every epoch in parallel and assemble maps.
/// `node(e, i, j, feature)` must depend only on its arguments.
fn grid_maps<F>(
    epochs: &[NaiveDateTime],
    grid: GridSpec,
    sw: &SpaceWeatherTable,
    node: F,
) -> Result<PredictedMapSet, InferenceError>
where
    F: Fn(usize, usize, usize, &FeatureVector) -> Result<EnsemblePrediction, InferenceError> + Sync,
{
    grid.validate()?;
    if epochs.is_empty() {
        return Err(InferenceError::NoEpochs);
    }
    let n_lon = grid.n_lon();
    let mut features = Vec::with_capacity(epochs.len() * grid.len());
    for &t in epochs {
        for i in 0..grid.n_lat() {
            for j in 0..n_lon {
                features.push(build_feature(t, grid.lat(i), grid.lon(j), sw)?);
            }
        }
    }
    let per_epoch = grid.len();
    let results: Vec<EnsemblePrediction> = features
        .par_iter()
        .enumerate()
        .map(|(idx, f)| {
            let (e, cell) = (idx / per_epoch, idx % per_epoch);
            node(e, cell / n_lon, cell % n_lon, f)
        })
        .collect::<Result<_, _>>()?;

    let mut clamped = 0;
    let mut mean_maps = Vec::with_capacity(epochs.len());
    let mut sigma_maps = Vec::with_capacity(epochs.len());
    for (&t, chunk) in epochs.iter().zip(results.chunks(per_epoch)) {
        let mut means = Vec::with_capacity(per_epoch);
        for p in chunk {
            if p.mean_vtec < 0.0 {
                clamped += 1;
            }
            means.push(Some(p.mean_vtec.max(0.0)));
        }
        mean_maps.push(TecMap::new(t, grid, means)?);
        sigma_maps.push(TecMap::new(t, grid, chunk.iter().map(|p| Some(p.sigma)).collect())?);
    }
    if clamped > 0 {
        info!("clamped {clamped} negative mean predictions to 0 TECU");
    }
    Ok(PredictedMapSet {
        grid,
        epochs: epochs.to_vec(),
        mean_maps,
        sigma_maps,
        clamped,
    })
}

/// Stream of grid node `(e, i, j)`; independent of evaluation order.
fn node_stream(seed: u64, t: u64, e: usize, i: usize, j: usize) -> rng::StreamRng {
    rng::stream(seed, &[t, e as u64, i as u64, j as u64])
}

/// Ensemble prediction at every grid node of every epoch.
pub fn predict_grid(
    model: &Model,
    epochs: &[NaiveDateTime],
    grid: GridSpec,
    sw: &SpaceWeatherTable,
    k: usize,
    seed: u64,
) -> Result<PredictedMapSet, InferenceError> {
    check_model(model)?;
    check_k(k)?;
    let predictor = Predictor::new(&model.network);
    grid_maps(epochs, grid, sw, |e, i, j, f| {
        let mut rng = node_stream(seed, tag::PREDICT, e, i, j);
        let mut scratch = predictor.scratch();
        ensemble_at(model, &predictor, f, k, &mut rng, &mut scratch, &mut Vec::with_capacity(k))
    })
}

fn check_bag(models: &[Model]) -> Result<(), InferenceError> {
    check_k(models.len())?;
    for m in models {
        check_model(m)?;
    }
    let spec = models[0].network.spec();
    if let Some(other) = models.iter().find(|m| m.network.spec() != spec) {
        return Err(InferenceError::Mismatch(format!("{} vs {}", spec, other.network.spec())));
    }
    Ok(())
}

fn bagged_at(
    models: &[Model],
    predictors: &[Predictor<'_>],
    feature: &FeatureVector,
    mut rng_for: impl FnMut(usize) -> rng::StreamRng,
) -> Result<EnsemblePrediction, InferenceError> {
    let encoded = encode(feature);
    let mut x = [0.0; ENCODED_DIM];
    let mut outputs = Vec::with_capacity(models.len());
    let mut scratch = predictors[0].scratch();
    for (m, (model, predictor)) in models.iter().zip(predictors).enumerate() {
        model.normalizer.normalize_input(&encoded, &mut x);
        let z = if model.network.spec().has_variational() {
            predictor.sample(&x, &mut rng_for(m), &mut scratch)
        } else {
            predictor.mean(&x, &mut scratch)
        };
        outputs.push(model.normalizer.denormalize_target(z));
    }
    EnsemblePrediction::from_samples(&outputs)
}

/// One forward pass per model: the posterior mean for deterministic nets, a
/// stochastic draw otherwise. Each model applies its own normalizer.
pub fn predict_bagged(models: &[Model], feature: &FeatureVector, seed: u64) -> Result<EnsemblePrediction, InferenceError> {
    check_bag(models)?;
    let predictors: Vec<_> = models.iter().map(|m| Predictor::new(&m.network)).collect();
    bagged_at(models, &predictors, feature, |m| rng::stream(seed, &[tag::BAGGED, m as u64]))
}

pub fn predict_grid_bagged(
    models: &[Model],
    epochs: &[NaiveDateTime],
    grid: GridSpec,
    sw: &SpaceWeatherTable,
    seed: u64,
) -> Result<PredictedMapSet, InferenceError> {
    check_bag(models)?;
    let predictors: Vec<_> = models.iter().map(|m| Predictor::new(&m.network)).collect();
    grid_maps(epochs, grid, sw, |e, i, j, f| {
        bagged_at(models, &predictors, f, |m| {
            rng::stream(seed, &[tag::BAGGED, e as u64, i as u64, j as u64, m as u64])
        })
    })
}

/// Finest exponent (down to -3) whose scaled maximum stays below the sentinel.
fn choose_exponent(max_value: f64) -> i32 {
    (-3..)
        .find(|&e| (max_value / 10f64.powi(e)).round() <= 9998.0)
        .unwrap()
}

/// IONEX file with the mean maps as TEC maps and sigma maps as RMS maps.
pub fn export_predicted_ionex(p: &PredictedMapSet) -> Result<IonexFile, InferenceError> {
    if p.epochs.is_empty() {
        return Err(InferenceError::NoEpochs);
    }
    let max = p
        .mean_maps
        .iter()
        .chain(&p.sigma_maps)
        .flat_map(|m| m.values.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b));
    let mut header = IonexHeader::for_maps(p.grid, &p.epochs, choose_exponent(max));
    header.description.push("Ensemble mean VTEC in TEC maps, ensemble sigma in RMS maps".to_string());
    let file = IonexFile {
        header,
        tec_maps: p.mean_maps.clone(),
        rms_maps: p.sigma_maps.clone(),
    };
    file.validate()?;
    Ok(file)
}

/// `epoch,lat,lon,vtec,sigma`, one row per node.
pub fn predictions_csv(p: &PredictedMapSet) -> String {
    let mut out = String::from("epoch,lat,lon,vtec,sigma\n");
    for (mean, sigma) in p.mean_maps.iter().zip(&p.sigma_maps) {
        let epoch = mean.epoch.format("%Y-%m-%dT%H:%M:%S");
        for i in 0..p.grid.n_lat() {
            for j in 0..p.grid.n_lon() {
                let idx = i * p.grid.n_lon() + j;
                let (Some(v), Some(s)) = (mean.values[idx], sigma.values[idx]) else {
                    continue;
                };
                let _ = writeln!(out, "{epoch},{},{},{v:.4},{s:.4}", p.grid.lat(i), p.grid.lon(j));
            }
        }
    }
    out
}
