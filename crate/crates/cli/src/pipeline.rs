//! File loading and the train step shared by several commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use vtec_bnn::bnn::{parse_architecture, train, History, Network};
use vtec_bnn::checkpoint::{load_model, save_model, Model};
use vtec_bnn::dataset::{bootstrap_resample, build_samples, fit_normalizer, split_holdout, ENCODED_DIM};
use vtec_bnn::ionex::{parse_ionex, IonexFile};
use vtec_bnn::spaceweather::{parse_spaceweather, SpaceWeatherTable};

use crate::config::RunConfig;
use crate::error::CliError;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load_spaceweather(path: &Path) -> Result<SpaceWeatherTable, CliError> {
    parse_spaceweather(&read_text(path)?).map_err(|e| CliError::data(path.display().to_string(), e))
}

pub fn load_ionex(path: &Path) -> Result<IonexFile, CliError> {
    parse_ionex(&read_text(path)?).map_err(|e| CliError::data(path.display().to_string(), e))
}

/// Paths matching each pattern, sorted; a pattern without wildcards is taken literally.
pub fn expand(patterns: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for pattern in patterns {
        let matches: Vec<PathBuf> = glob::glob(pattern)
            .map_err(|e| CliError::Config(format!("bad glob {pattern:?}: {e}")))?
            .filter_map(Result::ok)
            .collect();
        if matches.is_empty() {
            let literal = PathBuf::from(pattern);
            if !pattern.contains(['*', '?', '[']) {
                // Let the read report the I/O error.
                paths.push(literal);
                continue;
            }
            return Err(CliError::Config(format!("no files match {pattern:?}")));
        }
        paths.extend(matches);
    }
    paths.sort();
    paths.dedup();
    Ok(paths)
}

/// Every TEC map of several files as one file, ordered by epoch.
pub fn merge_ionex(files: Vec<IonexFile>) -> Result<IonexFile, CliError> {
    let mut iter = files.into_iter();
    let mut merged = iter.next().ok_or_else(|| CliError::Config("no IONEX files".into()))?;
    merged.rms_maps.clear();
    for file in iter {
        if !file.header.grid.same_nodes(&merged.header.grid) {
            return Err(CliError::data("IONEX", "files use different grids"));
        }
        merged.tec_maps.extend(file.tec_maps);
    }
    merged.tec_maps.sort_by_key(|m| m.epoch);
    merged.tec_maps.dedup_by_key(|m| m.epoch);
    Ok(merged)
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_model_file(path: &Path) -> Result<Model, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    load_model(&bytes).map_err(|e| CliError::data(path.display().to_string(), e))
}

pub struct Trained {
    pub model: Model,
    pub history: History,
    pub train_samples: usize,
    pub validation_samples: usize,
}

/// Build the dataset from the config, optionally bootstrap-resample the
/// training part, then fit the normalizer and train.
pub fn train_from_config(cfg: &RunConfig, seed: u64, bootstrap: bool) -> Result<Trained, CliError> {
    let train_cfg = cfg.train_config(seed)?;
    let spec = parse_architecture(cfg.architecture(), ENCODED_DIM)?;
    let sw = load_spaceweather(cfg.require_spaceweather()?)?;
    let paths = expand(&[cfg.require_ionex()?.to_string()])?;
    let files = paths.iter().map(|p| load_ionex(p)).collect::<Result<Vec<_>, _>>()?;

    let mut samples = build_samples(&files, &sw, cfg.rms_weights.unwrap_or(false))?;
    samples.provenance.sources = paths.iter().map(|p| file_name(p)).collect();
    let (mut train_set, validation_set) = split_holdout(&samples, &cfg.holdout())?;
    if bootstrap {
        train_set = bootstrap_resample(&train_set, seed)?;
    }
    info!(
        "{} training and {} validation samples",
        train_set.len(),
        validation_set.len()
    );
    let normalizer = fit_normalizer(&train_set)?;
    let data = normalizer.apply_set(&train_set);
    let validation = normalizer.apply_set(&validation_set);

    let mut network = Network::init(spec, seed);
    let history = train(&mut network, &data, Some(&validation), &train_cfg)?;
    let provenance = format!("{}; seed {seed}{}", train_set.provenance.describe(), if bootstrap { "; bootstrap" } else { "" });
    let model = Model::new(network, normalizer, provenance)?;
    Ok(Trained {
        model,
        history,
        train_samples: train_set.len(),
        validation_samples: validation_set.len(),
    })
}

/// `epoch,train_loss,validation_mse_tecu2`; the validation column is empty
/// without held-out data.
pub fn history_csv(history: &History, target_std: f64) -> String {
    let mut out = String::from("epoch,train_loss,validation_mse_tecu2\n");
    for (e, (loss, val)) in history.train_loss.iter().zip(&history.validation_mse).enumerate() {
        let val = if val.is_nan() {
            String::new()
        } else {
            format!("{:.6}", val * target_std * target_std)
        };
        let _ = writeln!(out, "{},{loss:.6},{val}", e + 1);
    }
    out
}

pub fn save_trained(trained: &Trained, checkpoint: &Path, history: &Path) -> Result<(), CliError> {
    write_file(checkpoint, save_model(&trained.model))?;
    write_file(history, history_csv(&trained.history, trained.model.normalizer.target_std))
}
