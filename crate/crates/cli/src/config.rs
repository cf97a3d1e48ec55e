//! Run configuration: a TOML key-value file whose entries can be overridden
//! by command-line flags.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::Args;
use serde::Deserialize;
use vtec_bnn::bnn::{AdamConfig, KlScale, TrainConfig};
use vtec_bnn::calibrate::DEFAULT_BAND_WIDTH;
use vtec_bnn::inference::DEFAULT_K;

use crate::error::CliError;

pub const DEFAULT_ARCHITECTURE: &str = "V64-D32-D16-D1";

/// Every key the config file may carry.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Glob matching the IONEX training files.
    pub ionex: Option<String>,
    pub spaceweather: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub architecture: Option<String>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Constant KL weight; `batch_size / N_train` when absent.
    pub kl_weight: Option<f64>,
    pub rms_weights: Option<bool>,
    pub holdout: Option<Vec<NaiveDate>>,
    pub k: Option<usize>,
    pub band_width: Option<f64>,
    pub seed: Option<u64>,
}

/// Flags shared by every command that reads a config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Glob matching IONEX training files.
    #[arg(long)]
    pub ionex: Option<String>,
    /// Space-weather CSV (date,f107_adjusted,kp1..kp8).
    #[arg(long)]
    pub spaceweather: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    /// Weight samples by inverse RMS variance.
    #[arg(long)]
    pub rms_weights: Option<bool>,
    /// Held-out UTC days, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub holdout: Option<Vec<NaiveDate>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (if any) with the flags applied on top.
    pub fn from_args(args: &ConfigArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(path) => Self::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! overlay {
            ($($field:ident),*) => {$(
                if let Some(v) = &args.$field {
                    cfg.$field = Some(v.clone());
                }
            )*};
        }
        overlay!(
            ionex,
            spaceweather,
            output_dir,
            architecture,
            batch_size,
            epochs,
            learning_rate,
            kl_weight,
            rms_weights,
            holdout,
            seed
        );
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required (config key `seed` or --seed)".into()))
    }

    pub fn require_ionex(&self) -> Result<&str, CliError> {
        self.ionex
            .as_deref()
            .ok_or_else(|| CliError::Config("no IONEX glob (config key `ionex` or --ionex)".into()))
    }

    pub fn require_spaceweather(&self) -> Result<&Path, CliError> {
        self.spaceweather
            .as_deref()
            .ok_or_else(|| CliError::Config("no space-weather CSV (config key `spaceweather` or --spaceweather)".into()))
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn architecture(&self) -> &str {
        self.architecture.as_deref().unwrap_or(DEFAULT_ARCHITECTURE)
    }

    pub fn holdout(&self) -> BTreeSet<NaiveDate> {
        self.holdout.iter().flatten().copied().collect()
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    pub fn band_width(&self) -> f64 {
        self.band_width.unwrap_or(DEFAULT_BAND_WIDTH)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            adam: AdamConfig {
                learning_rate: self.learning_rate.unwrap_or(defaults.adam.learning_rate),
                ..defaults.adam
            },
            kl_scale: self.kl_weight.map(KlScale::Constant).unwrap_or(KlScale::PerSample),
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
