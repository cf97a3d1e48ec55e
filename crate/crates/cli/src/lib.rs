//! The `vtecbnn` command line: ingest, train, predict, calibrate and evaluate.

pub mod config;
pub mod error;
pub mod pipeline;

use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::{Datelike, NaiveDate, NaiveDateTime, NaiveTime};
use clap::{Parser, Subcommand, ValueEnum};
use vtec_bnn::calibrate::{fit_calibration, CalibrationModel, CalibrationPair};
use vtec_bnn::eval::{apply_to_records, band_stats, band_stats_csv, coverage_ratio, error_records, records_csv, summarize, ErrorRecord};
use vtec_bnn::inference::{export_predicted_ionex, predict_grid, predict_grid_bagged, predictions_csv, PredictedMapSet};
use vtec_bnn::ionex::{write_ionex, GridSpec, IonexFile};
use vtec_bnn::synth::{synth_day, SynthConfig};

use crate::config::{ConfigArgs, RunConfig};
use crate::error::CliError;
use crate::pipeline::*;

#[derive(Debug, Parser)]
#[command(name = "vtecbnn", version, about = "Global VTEC maps from Bayesian neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Summary,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a summary or the cells of an IONEX file.
    IonexDump {
        file: PathBuf,
        /// Only the map at this UTC time of day, HH:MM.
        #[arg(long, value_parser = parse_hhmm)]
        epoch: Option<NaiveTime>,
        #[arg(long, value_enum, default_value = "summary")]
        format: DumpFormat,
    },
    /// Train one network and write a checkpoint plus its loss history.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint path; defaults to <output-dir>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train several networks, each on its own bootstrap resample.
    Bag {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        models: usize,
    },
    /// Predict VTEC and sigma on the global grid for whole UTC days.
    Predict {
        /// One checkpoint for stochastic passes, several for a bagged ensemble.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "date", required = true, value_delimiter = ',')]
        dates: Vec<NaiveDate>,
        #[arg(long)]
        spaceweather: Option<PathBuf>,
        /// Stochastic passes per node (single checkpoint only).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 12)]
        maps_per_day: u32,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare a prediction with truth maps.
    Evaluate {
        #[arg(long)]
        predicted: PathBuf,
        /// Truth IONEX files or globs.
        #[arg(long, required = true)]
        truth: Vec<String>,
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        band_width: Option<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the latitude-band sigma calibration on a prediction and its truth.
    Calibrate {
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long, required = true)]
        truth: Vec<String>,
        #[arg(long)]
        band_width: Option<f64>,
        /// Defaults to <output-dir>/calibration.csv.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write synthetic IGS-layout day files driven by a space-weather table.
    Synth {
        #[arg(long)]
        spaceweather: PathBuf,
        #[arg(long)]
        start: NaiveDate,
        #[arg(long, default_value_t = 1)]
        days: u32,
        #[arg(long, default_value_t = SynthConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

fn parse_hhmm(s: &str) -> Result<NaiveTime, String> {
    NaiveTime::parse_from_str(s, "%H:%M").map_err(|e| format!("expected HH:MM: {e}"))
}

/// Run a command, returning what it prints on standard output.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::IonexDump { file, epoch, format } => ionex_dump(&file, epoch, format),
        Command::Train { config, checkpoint } => cmd_train(&config, checkpoint),
        Command::Bag { config, models } => cmd_bag(&config, models),
        Command::Predict {
            checkpoints,
            dates,
            spaceweather,
            k,
            seed,
            maps_per_day,
            output_dir,
            config,
        } => {
            let mut cfg = optional_config(config)?;
            cfg.spaceweather = spaceweather.or(cfg.spaceweather);
            cfg.k = k.or(cfg.k);
            cfg.seed = seed.or(cfg.seed);
            cfg.output_dir = output_dir.or(cfg.output_dir);
            cmd_predict(&cfg, &checkpoints, &dates, maps_per_day)
        }
        Command::Evaluate {
            predicted,
            truth,
            calibration,
            band_width,
            output_dir,
            config,
        } => {
            let mut cfg = optional_config(config)?;
            cfg.band_width = band_width.or(cfg.band_width);
            cfg.output_dir = output_dir.or(cfg.output_dir);
            cmd_evaluate(&cfg, &predicted, &truth, calibration)
        }
        Command::Calibrate {
            predicted,
            truth,
            band_width,
            output,
            output_dir,
            config,
        } => {
            let mut cfg = optional_config(config)?;
            cfg.band_width = band_width.or(cfg.band_width);
            cfg.output_dir = output_dir.or(cfg.output_dir);
            cmd_calibrate(&cfg, &predicted, &truth, output)
        }
        Command::Synth {
            spaceweather,
            start,
            days,
            seed,
            output_dir,
        } => cmd_synth(&spaceweather, start, days, seed, &output_dir),
    }
}

fn optional_config(path: Option<PathBuf>) -> Result<RunConfig, CliError> {
    path.map(|p| RunConfig::load(&p)).transpose().map(Option::unwrap_or_default)
}

fn ionex_dump(path: &std::path::Path, epoch: Option<NaiveTime>, format: DumpFormat) -> Result<String, CliError> {
    let file = load_ionex(path)?;
    let selected: Vec<usize> = (0..file.tec_maps.len())
        .filter(|&i| epoch.is_none_or(|t| file.tec_maps[i].epoch.time() == t))
        .collect();
    if let (Some(t), true) = (epoch, selected.is_empty()) {
        return Err(CliError::data(path.display().to_string(), format!("no map at {}", t.format("%H:%M"))));
    }
    let grid = file.header.grid;
    let mut out = String::new();
    match format {
        DumpFormat::Summary => {
            let h = &file.header;
            let _ = writeln!(out, "file: {}", file_name(path));
            let _ = writeln!(out, "maps: {} TEC, {} RMS", file.tec_maps.len(), file.rms_maps.len());
            let _ = writeln!(
                out,
                "grid: lat {}..{} step {} ({}), lon {}..{} step {} ({}), height {} km",
                grid.lat_start,
                grid.lat_stop,
                grid.lat_step,
                grid.n_lat(),
                grid.lon_start,
                grid.lon_stop,
                grid.lon_step,
                grid.n_lon(),
                grid.height
            );
            let _ = writeln!(out, "exponent: {}", h.exponent);
            let _ = writeln!(out, "values: {}", file.tec_value_count());
            let _ = writeln!(out, "epoch,present,min,mean,max");
            for &i in &selected {
                let map = &file.tec_maps[i];
                let present: Vec<f64> = map.values.iter().flatten().copied().collect();
                let (min, max) = present
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
                let _ = writeln!(out, "{},{},{min:.1},{mean:.2},{max:.1}", iso(map.epoch), present.len());
            }
        }
        DumpFormat::Csv => {
            out.push_str("epoch,lat,lon,vtec,rms\n");
            for &i in &selected {
                let map = &file.tec_maps[i];
                let rms = file.rms_for(i);
                for li in 0..grid.n_lat() {
                    for lj in 0..grid.n_lon() {
                        let idx = li * grid.n_lon() + lj;
                        let cell = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_default();
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{}",
                            iso(map.epoch),
                            grid.lat(li),
                            grid.lon(lj),
                            cell(map.values[idx]),
                            cell(rms.and_then(|r| r.values[idx]))
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

fn iso(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

fn cmd_train(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<String, CliError> {
    let cfg = RunConfig::from_args(args)?;
    let seed = cfg.seed()?;
    let out_dir = cfg.output_dir();
    let checkpoint = checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .unwrap_or_else(|| out_dir.join("model.ckpt"));
    let trained = train_from_config(&cfg, seed, false)?;
    save_trained(&trained, &checkpoint, &out_dir.join("history.csv"))?;
    let mut out = format!(
        "trained {} on {} samples ({} held out)\n",
        trained.model.network.spec(),
        trained.train_samples,
        trained.validation_samples
    );
    out.push_str(&epoch_lines(&trained));
    let _ = writeln!(out, "checkpoint: {}", checkpoint.display());
    Ok(out)
}

fn epoch_lines(trained: &Trained) -> String {
    let std2 = trained.model.normalizer.target_std.powi(2);
    let mut out = String::new();
    for (e, (loss, val)) in trained
        .history
        .train_loss
        .iter()
        .zip(&trained.history.validation_mse)
        .enumerate()
    {
        let _ = write!(out, "epoch {}: loss {loss:.6}", e + 1);
        if !val.is_nan() {
            let _ = write!(out, ", validation mse {:.4} TECU^2", val * std2);
        }
        out.push('\n');
    }
    out
}

fn cmd_bag(args: &ConfigArgs, models: usize) -> Result<String, CliError> {
    if models == 0 {
        return Err(CliError::Config("--models must be at least 1".into()));
    }
    let cfg = RunConfig::from_args(args)?;
    let seed = cfg.seed()?;
    let out_dir = cfg.output_dir();
    let mut out = String::new();
    for m in 0..models {
        let model_seed = seed.wrapping_add(m as u64);
        let trained = train_from_config(&cfg, model_seed, true)?;
        let checkpoint = out_dir.join(format!("model_{m:02}.ckpt"));
        save_trained(&trained, &checkpoint, &out_dir.join(format!("history_{m:02}.csv")))?;
        let _ = writeln!(out, "model {m} (seed {model_seed}):");
        out.push_str(&epoch_lines(&trained));
        let _ = writeln!(out, "checkpoint: {}", checkpoint.display());
    }
    Ok(out)
}

fn day_epochs(dates: &[NaiveDate], maps_per_day: u32) -> Result<Vec<NaiveDateTime>, CliError> {
    if maps_per_day == 0 || 86_400 % maps_per_day != 0 {
        return Err(CliError::Config(format!("maps per day {maps_per_day} must divide 24 h")));
    }
    let mut dates = dates.to_vec();
    dates.sort();
    dates.dedup();
    let step = 86_400 / maps_per_day as i64;
    Ok(dates
        .iter()
        .flat_map(|d| {
            (0..maps_per_day as i64)
                .map(move |k| d.and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::seconds(k * step))
        })
        .collect())
}

fn cmd_predict(cfg: &RunConfig, checkpoints: &[PathBuf], dates: &[NaiveDate], maps_per_day: u32) -> Result<String, CliError> {
    let seed = cfg.seed()?;
    let sw = load_spaceweather(cfg.require_spaceweather()?)?;
    let epochs = day_epochs(dates, maps_per_day)?;
    let models = checkpoints.iter().map(|p| load_model_file(p)).collect::<Result<Vec<_>, _>>()?;
    let grid = GridSpec::igs();
    let set = if models.len() == 1 {
        predict_grid(&models[0], &epochs, grid, &sw, cfg.k(), seed)?
    } else {
        predict_grid_bagged(&models, &epochs, grid, &sw, seed)?
    };
    let out_dir = cfg.output_dir();
    let file = export_predicted_ionex(&set)?;
    let ionex_path = out_dir.join("prediction.ionex");
    let csv_path = out_dir.join("prediction.csv");
    write_file(&ionex_path, write_ionex(&file)?)?;
    write_file(&csv_path, predictions_csv(&set))?;

    let members = if models.len() == 1 {
        format!("k = {}", cfg.k())
    } else {
        format!("{} bagged models", models.len())
    };
    Ok(format!(
        "predicted {} nodes over {} epochs ({members}); {} negative means clamped\nwrote {} and {}\n",
        set.node_count(),
        epochs.len(),
        set.clamped,
        ionex_path.display(),
        csv_path.display()
    ))
}

fn load_pair(predicted: &std::path::Path, truth: &[String]) -> Result<Vec<ErrorRecord>, CliError> {
    let pred = PredictedMapSet::from_ionex(&load_ionex(predicted)?)?;
    let truth_files = expand(truth)?
        .iter()
        .map(|p| load_ionex(p))
        .collect::<Result<Vec<IonexFile>, _>>()?;
    let truth = merge_ionex(truth_files)?;
    let records = error_records(&pred, &truth)?;
    if records.is_empty() {
        return Err(CliError::data("evaluation", "prediction and truth share no cells"));
    }
    Ok(records)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    predicted: &std::path::Path,
    truth: &[String],
    calibration: Option<PathBuf>,
) -> Result<String, CliError> {
    let mut records = load_pair(predicted, truth)?;
    if let Some(path) = &calibration {
        let model = CalibrationModel::from_csv(&read_text(path)?)
            .map_err(|e| CliError::data(path.display().to_string(), e))?;
        apply_to_records(&mut records, &model);
    }
    let width = cfg.band_width();
    let stats = band_stats(&records, width)?;
    let raw = coverage_ratio(&records, false, width)?;
    let cal = calibration
        .is_some()
        .then(|| coverage_ratio(&records, true, width))
        .transpose()?;

    let mut coverage = String::from("band_lo,band_hi,count,ratio_raw,ratio_cal\n");
    for (i, b) in raw.iter().enumerate() {
        let fmt = |r: Option<f64>| r.map(|x| format!("{x:.4}")).unwrap_or_default();
        let c = cal.as_ref().and_then(|c| c[i].ratio);
        let _ = writeln!(coverage, "{},{},{},{},{}", b.lo, b.hi, b.count, fmt(b.ratio), fmt(c));
    }
    let out_dir = cfg.output_dir();
    write_file(&out_dir.join("band_stats.csv"), band_stats_csv(&stats))?;
    write_file(&out_dir.join("coverage.csv"), coverage)?;
    write_file(&out_dir.join("records.csv"), records_csv(&records))?;
    Ok(format!("{}\n", summarize(&records)))
}

fn cmd_calibrate(
    cfg: &RunConfig,
    predicted: &std::path::Path,
    truth: &[String],
    output: Option<PathBuf>,
) -> Result<String, CliError> {
    let records = load_pair(predicted, truth)?;
    let pairs: Vec<CalibrationPair> = records
        .iter()
        .map(|r| CalibrationPair {
            sigma_raw: r.sigma_raw,
            abs_error: r.eps.abs(),
            lat: r.lat,
        })
        .collect();
    let model = fit_calibration(&pairs, cfg.band_width())?;
    let path = output.unwrap_or_else(|| cfg.output_dir().join("calibration.csv"));
    write_file(&path, model.to_csv())?;
    Ok(format!("calibration from {} pairs in {} bands: {}\n", pairs.len(), model.bands.len(), path.display()))
}

/// IGS-style day file name, e.g. `synt0010.09i`.
pub fn synth_file_name(day: NaiveDate) -> String {
    format!("synt{:03}0.{:02}i", day.ordinal(), day.year().rem_euclid(100))
}

fn cmd_synth(
    spaceweather: &std::path::Path,
    start: NaiveDate,
    days: u32,
    seed: u64,
    out_dir: &std::path::Path,
) -> Result<String, CliError> {
    let sw = load_spaceweather(spaceweather)?;
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let mut out = String::new();
    for day in start.iter_days().take(days as usize) {
        let file = synth_day(day, &sw, &cfg)?;
        let path = out_dir.join(synth_file_name(day));
        write_file(&path, write_ionex(&file)?)?;
        let _ = writeln!(out, "{}", path.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_epochs_are_sorted_and_spaced() {
        let d = |day| NaiveDate::from_ymd_opt(2009, 1, day).unwrap();
        let e = day_epochs(&[d(2), d(1)], 12).unwrap();
        assert_eq!(e.len(), 24);
        assert_eq!(e[0], d(1).and_hms_opt(0, 0, 0).unwrap());
        assert_eq!(e[13], d(2).and_hms_opt(2, 0, 0).unwrap());
        assert!(day_epochs(&[d(1)], 7).is_err());
    }

    #[test]
    fn file_names() {
        assert_eq!(synth_file_name(NaiveDate::from_ymd_opt(2009, 1, 1).unwrap()), "synt0010.09i");
        assert_eq!(synth_file_name(NaiveDate::from_ymd_opt(2008, 12, 31).unwrap()), "synt3660.08i");
    }

    #[test]
    fn hhmm() {
        assert_eq!(parse_hhmm("12:00").unwrap(), NaiveTime::from_hms_opt(12, 0, 0).unwrap());
        assert!(parse_hhmm("25:00").is_err());
    }
}
