//! Training samples from IONEX maps and space-weather indices: input
//! encoding, holdout split, z-score normalization, batching and bootstrap
//! resampling.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use chrono::{NaiveDate, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::bnn::TrainingData;
use crate::ionex::IonexFile;
use crate::rng::{self, tag};
use crate::spaceweather::{build_feature, FeatureVector, SpaceWeatherError, SpaceWeatherTable};

pub const ENCODED_DIM: usize = 10;
/// Identifies the channel layout produced by [`encode`]; stored in checkpoints.
pub const ENCODING_ID: &str = "cyc10-v1";
/// Lower bound on the RMS used for inverse-variance weights, TECU.
pub const RMS_FLOOR: f64 = 0.5;
const DAYS_PER_YEAR: f64 = 365.25;
const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("epoch {epoch} not covered by space-weather table: {source}")]
    Uncovered {
        epoch: NaiveDateTime,
        #[source]
        source: SpaceWeatherError,
    },
    #[error("RMS weighting requested but file {0} has no RMS maps")]
    MissingRms(usize),
    #[error("sample set is empty")]
    Empty,
    #[error("holdout leaves no training samples")]
    EmptyTrain,
    #[error("invalid sample: {0}")]
    Invalid(String),
}

/// Cyclical encoding of the raw features:
/// `[f107, kp, sin/cos(doy), sin/cos(sod), sin/cos(lon), sin(lat), lat/90]`.
pub fn encode(f: &FeatureVector) -> [f64; ENCODED_DIM] {
    let doy = 2.0 * PI * f.doy / DAYS_PER_YEAR;
    let sod = 2.0 * PI * f.sod / SECONDS_PER_DAY;
    let lon = f.lon.to_radians();
    [
        f.f107,
        f.kp,
        doy.sin(),
        doy.cos(),
        sod.sin(),
        sod.cos(),
        lon.sin(),
        lon.cos(),
        f.lat.to_radians().sin(),
        f.lat / 90.0,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub epoch: NaiveDateTime,
    pub features: FeatureVector,
    pub encoded: [f64; ENCODED_DIM],
    /// Truth VTEC, TECU.
    pub target_vtec: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub first_day: Option<NaiveDate>,
    pub last_day: Option<NaiveDate>,
}

impl Provenance {
    pub fn describe(&self) -> String {
        let range = match (self.first_day, self.last_day) {
            (Some(a), Some(b)) => format!("{a}..{b}"),
            _ => "empty".to_string(),
        };
        format!("days {range}; sources [{}]", self.sources.join(", "))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn from_samples(samples: Vec<Sample>, sources: Vec<String>) -> Self {
        let first_day = samples.iter().map(|s| s.epoch.date()).min();
        let last_day = samples.iter().map(|s| s.epoch.date()).max();
        SampleSet {
            samples,
            provenance: Provenance {
                sources,
                first_day,
                last_day,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn subset(&self, samples: Vec<Sample>) -> SampleSet {
        SampleSet::from_samples(samples, self.provenance.sources.clone())
    }
}

/// One sample per present TEC cell of every map.
///
/// With `use_rms_weights` each sample is weighted by `1 / max(rms, RMS_FLOOR)^2`
/// from the matching RMS map; cells whose RMS is missing keep the floor weight.
pub fn build_samples(
    ionex: &[IonexFile],
    sw: &SpaceWeatherTable,
    use_rms_weights: bool,
) -> Result<SampleSet, DatasetError> {
    let mut samples = Vec::new();
    for (file_index, file) in ionex.iter().enumerate() {
        if use_rms_weights && file.rms_maps.is_empty() {
            return Err(DatasetError::MissingRms(file_index));
        }
        for (map_index, map) in file.tec_maps.iter().enumerate() {
            let rms = if use_rms_weights { file.rms_for(map_index) } else { None };
            let grid = map.grid;
            let n_lon = grid.n_lon();
            for lat_index in 0..grid.n_lat() {
                let lat = grid.lat(lat_index);
                for lon_index in 0..n_lon {
                    let cell = lat_index * n_lon + lon_index;
                    let Some(vtec) = map.values[cell] else { continue };
                    let features = build_feature(map.epoch, lat, grid.lon(lon_index), sw)
                        .map_err(|source| DatasetError::Uncovered { epoch: map.epoch, source })?;
                    let weight = match rms {
                        Some(r) => {
                            let sigma = r.values[cell].unwrap_or(RMS_FLOOR).max(RMS_FLOOR);
                            1.0 / (sigma * sigma)
                        }
                        None => 1.0,
                    };
                    samples.push(Sample {
                        epoch: map.epoch,
                        features,
                        encoded: encode(&features),
                        target_vtec: vtec,
                        weight,
                    });
                }
            }
        }
    }
    Ok(SampleSet::from_samples(samples, Vec::new()))
}

/// Partition by the UTC date of each sample's epoch.
pub fn split_holdout(
    set: &SampleSet,
    holdout_days: &BTreeSet<NaiveDate>,
) -> Result<(SampleSet, SampleSet), DatasetError> {
    let (validation, train): (Vec<Sample>, Vec<Sample>) = set
        .samples
        .iter()
        .cloned()
        .partition(|s| holdout_days.contains(&s.epoch.date()));
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    Ok((set.subset(train), set.subset(validation)))
}

/// Per-channel z-score parameters for the encoded inputs and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

/// Mean and population std; a zero-variance channel maps to the identity.
fn channel_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std > 1e-12 * mean.abs().max(1.0) {
        (mean, std)
    } else {
        (0.0, 1.0)
    }
}

pub fn fit_normalizer(train: &SampleSet) -> Result<Normalizer, DatasetError> {
    let n = train.len();
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let mut input_mean = Vec::with_capacity(ENCODED_DIM);
    let mut input_std = Vec::with_capacity(ENCODED_DIM);
    for c in 0..ENCODED_DIM {
        let (m, s) = channel_stats(train.samples.iter().map(move |x| x.encoded[c]), n);
        input_mean.push(m);
        input_std.push(s);
    }
    let (target_mean, target_std) = channel_stats(train.samples.iter().map(|x| x.target_vtec), n);
    Ok(Normalizer {
        input_mean,
        input_std,
        target_mean,
        target_std,
    })
}

impl Normalizer {
    /// Identity transform on `dim` inputs and the target.
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn normalize_input(&self, encoded: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(encoded).zip(&self.input_mean).zip(&self.input_std) {
            *o = (x - m) / s;
        }
    }

    pub fn denormalize_input(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_std)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    pub fn normalize_target(&self, vtec: f64) -> f64 {
        (vtec - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }

    /// Normalized inputs and target of one sample.
    pub fn apply(&self, sample: &Sample) -> (Vec<f64>, f64) {
        let mut x = vec![0.0; self.input_dim()];
        self.normalize_input(&sample.encoded, &mut x);
        (x, self.normalize_target(sample.target_vtec))
    }

    /// Flattened network-ready copy of a sample set.
    pub fn apply_set(&self, set: &SampleSet) -> TrainingData {
        let dim = self.input_dim();
        let mut inputs = vec![0.0; set.len() * dim];
        for (row, s) in inputs.chunks_exact_mut(dim).zip(&set.samples) {
            self.normalize_input(&s.encoded, row);
        }
        TrainingData {
            dim,
            inputs,
            targets: set.samples.iter().map(|s| self.normalize_target(s.target_vtec)).collect(),
            weights: set.samples.iter().map(|s| s.weight).collect(),
        }
    }
}

/// Shuffled index batches over `len` items.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Deterministic shuffled batches of `set`; all full-size except possibly the last.
pub fn batches(set: &SampleSet, batch_size: usize, seed: u64) -> Vec<Vec<Sample>> {
    batch_indices(set.len(), batch_size, seed)
        .into_iter()
        .map(|b| b.into_iter().map(|i| set.samples[i].clone()).collect())
        .collect()
}

/// `n` indices drawn uniformly with replacement from `0..n`.
pub fn bootstrap_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[tag::BOOTSTRAP]);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

pub fn bootstrap_resample(set: &SampleSet, seed: u64) -> Result<SampleSet, DatasetError> {
    if set.is_empty() {
        return Err(DatasetError::Empty);
    }
    let samples = bootstrap_indices(set.len(), seed)
        .into_iter()
        .map(|i| set.samples[i].clone())
        .collect();
    Ok(set.subset(samples))
}
