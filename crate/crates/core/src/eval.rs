//! Predicted maps against IONEX truth: signed errors, latitude-band
//! statistics split by day and night, and sigma-versus-error coverage.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};

use chrono::{NaiveDateTime, Timelike};
use thiserror::Error;

use crate::calibrate::{apply_calibration, band_edges, band_index, CalibrationError, CalibrationModel};
use crate::inference::PredictedMapSet;
use crate::ionex::IonexFile;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predicted and truth grids differ")]
    GridMismatch,
    #[error("predicted epoch {0} has no truth map")]
    EpochMismatch(NaiveDateTime),
    #[error("no overlapping cells between prediction and truth")]
    NoOverlap,
    #[error(transparent)]
    Bands(#[from] CalibrationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Day,
    Night,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Day => "day",
            Regime::Night => "night",
        })
    }
}

/// Day iff local solar time `UTC + lon/15` lies in [6, 18) hours.
pub fn day_night(epoch: NaiveDateTime, lon: f64) -> Regime {
    let utc = epoch.num_seconds_from_midnight() as f64 / 3600.0;
    let lt = (utc + lon / 15.0).rem_euclid(24.0);
    if (6.0..18.0).contains(&lt) {
        Regime::Day
    } else {
        Regime::Night
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRecord {
    pub epoch: NaiveDateTime,
    pub lat: f64,
    pub lon: f64,
    /// Predicted minus truth, TECU.
    pub eps: f64,
    pub sigma_raw: f64,
    pub sigma_cal: Option<f64>,
    pub regime: Regime,
}

/// One record per cell present in both the prediction and the truth.
/// Every predicted epoch must have a truth map; extra truth maps are ignored.
pub fn error_records(pred: &PredictedMapSet, truth: &IonexFile) -> Result<Vec<ErrorRecord>, EvalError> {
    if !pred.grid.same_nodes(&truth.header.grid) {
        return Err(EvalError::GridMismatch);
    }
    let by_epoch: HashMap<NaiveDateTime, usize> =
        truth.tec_maps.iter().enumerate().map(|(i, m)| (m.epoch, i)).collect();
    let grid = pred.grid;
    let mut records = Vec::with_capacity(pred.node_count());
    for (mean, sigma) in pred.mean_maps.iter().zip(&pred.sigma_maps) {
        let t = *by_epoch.get(&mean.epoch).ok_or(EvalError::EpochMismatch(mean.epoch))?;
        let truth_map = &truth.tec_maps[t];
        for i in 0..grid.n_lat() {
            for j in 0..grid.n_lon() {
                let idx = i * grid.n_lon() + j;
                let (Some(p), Some(s), Some(y)) = (mean.values[idx], sigma.values[idx], truth_map.values[idx]) else {
                    continue;
                };
                let lon = grid.lon(j);
                records.push(ErrorRecord {
                    epoch: mean.epoch,
                    lat: grid.lat(i),
                    lon,
                    eps: p - y,
                    sigma_raw: s,
                    sigma_cal: None,
                    regime: day_night(mean.epoch, lon),
                });
            }
        }
    }
    Ok(records)
}

pub fn apply_to_records(records: &mut [ErrorRecord], model: &CalibrationModel) {
    for r in records {
        r.sigma_cal = Some(apply_calibration(model, r.sigma_raw, r.lat));
    }
}

/// Statistics of one latitude band in one regime. Error values are in TECU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandStats {
    pub lo: f64,
    pub hi: f64,
    pub regime: Regime,
    pub count: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub rms_error: f64,
    pub mean_sigma: f64,
    /// Present when every record in the band carries a calibrated sigma.
    pub mean_sigma_cal: Option<f64>,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    count: usize,
    abs: f64,
    max: f64,
    sq: f64,
    sigma: f64,
    sigma_cal: f64,
    cal_count: usize,
}

impl Acc {
    fn add(&mut self, r: &ErrorRecord) {
        self.count += 1;
        self.abs += r.eps.abs();
        self.max = self.max.max(r.eps.abs());
        self.sq += r.eps * r.eps;
        self.sigma += r.sigma_raw;
        if let Some(c) = r.sigma_cal {
            self.sigma_cal += c;
            self.cal_count += 1;
        }
    }
}

/// Per band and regime, bands ordered south to north, day before night.
/// Empty cells report count 0 and zero statistics.
pub fn band_stats(records: &[ErrorRecord], band_width: f64) -> Result<Vec<BandStats>, EvalError> {
    let edges = band_edges(band_width)?;
    let mut acc = vec![[Acc::default(); 2]; edges.len()];
    for r in records {
        acc[band_index(&edges, r.lat)][r.regime as usize].add(r);
    }
    let mut out = Vec::with_capacity(2 * edges.len());
    for (&(lo, hi), pair) in edges.iter().zip(&acc) {
        for (regime, a) in [Regime::Day, Regime::Night].into_iter().zip(pair) {
            let n = a.count.max(1) as f64;
            out.push(BandStats {
                lo,
                hi,
                regime,
                count: a.count,
                mean_abs_error: a.abs / n,
                max_abs_error: a.max,
                rms_error: (a.sq / n).sqrt(),
                mean_sigma: a.sigma / n,
                mean_sigma_cal: (a.count > 0 && a.cal_count == a.count).then(|| a.sigma_cal / n),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandRatio {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `mean|eps| / (sqrt(2/pi) * mean sigma)`; `None` for empty bands or zero sigma.
    pub ratio: Option<f64>,
}

/// Coverage ratio per latitude band, both regimes pooled. Above 1 means the
/// sigma underestimates the error.
pub fn coverage_ratio(records: &[ErrorRecord], use_calibrated: bool, band_width: f64) -> Result<Vec<BandRatio>, EvalError> {
    let edges = band_edges(band_width)?;
    let mut sums = vec![(0usize, 0.0, 0.0); edges.len()];
    for r in records {
        let s = if use_calibrated {
            r.sigma_cal.unwrap_or(f64::NAN)
        } else {
            r.sigma_raw
        };
        let e = &mut sums[band_index(&edges, r.lat)];
        e.0 += 1;
        e.1 += r.eps.abs();
        e.2 += s;
    }
    let k = (2.0 / PI).sqrt();
    Ok(edges
        .iter()
        .zip(sums)
        .map(|(&(lo, hi), (count, abs, sigma))| BandRatio {
            lo,
            hi,
            count,
            ratio: (count > 0 && sigma > 0.0).then(|| abs / (k * sigma)),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub rms_error: f64,
    pub mean_sigma: f64,
}

pub fn summarize(records: &[ErrorRecord]) -> Summary {
    let mut a = Acc::default();
    records.iter().for_each(|r| a.add(r));
    let n = a.count.max(1) as f64;
    Summary {
        count: a.count,
        mean_abs_error: a.abs / n,
        max_abs_error: a.max,
        rms_error: (a.sq / n).sqrt(),
        mean_sigma: a.sigma / n,
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "records {} mean_abs_error {:.4} max_abs_error {:.4} rms_error {:.4} mean_sigma {:.4}",
            self.count, self.mean_abs_error, self.max_abs_error, self.rms_error, self.mean_sigma
        )
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// `epoch,lat,lon,regime,eps,sigma_raw,sigma_cal`.
pub fn records_csv(records: &[ErrorRecord]) -> String {
    let mut out = String::from("epoch,lat,lon,regime,eps,sigma_raw,sigma_cal\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{}",
            r.epoch.format("%Y-%m-%dT%H:%M:%S"),
            r.lat,
            r.lon,
            r.regime,
            r.eps,
            r.sigma_raw,
            opt(r.sigma_cal)
        );
    }
    out
}

/// `band_lo,band_hi,regime,count,mean_abs_error,max_abs_error,rms_error,mean_sigma_raw,mean_sigma_cal`.
pub fn band_stats_csv(stats: &[BandStats]) -> String {
    let mut out =
        String::from("band_lo,band_hi,regime,count,mean_abs_error,max_abs_error,rms_error,mean_sigma_raw,mean_sigma_cal\n");
    for s in stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
            s.lo,
            s.hi,
            s.regime,
            s.count,
            s.mean_abs_error,
            s.max_abs_error,
            s.rms_error,
            s.mean_sigma,
            opt(s.mean_sigma_cal)
        );
    }
    out
}
