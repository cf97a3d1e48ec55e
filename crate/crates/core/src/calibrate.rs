//! Latitude-banded affine recalibration of ensemble sigma.
//!
//! Under a Gaussian error model `E|eps| = sqrt(2/pi) * sigma`, so each band
//! regresses `|eps| * sqrt(pi/2)` on the raw sigma to get
//! `sigma_cal = scale * sigma_raw + offset`.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use thiserror::Error;

/// Bands with fewer pairs than this use the global fit.
pub const MIN_BAND_PAIRS: usize = 30;
pub const DEFAULT_BAND_WIDTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no calibration pairs")]
    NoPairs,
    #[error("band width {0} must be positive and at most 180")]
    BandWidth(f64),
    #[error("invalid calibration pair: {0}")]
    InvalidPair(String),
    #[error("calibration file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPair {
    pub sigma_raw: f64,
    pub abs_error: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub bands: Vec<Band>,
}

/// Uniform band edges from -90 to 90; the last band may be narrower.
pub fn band_edges(band_width: f64) -> Result<Vec<(f64, f64)>, CalibrationError> {
    if !(band_width > 0.0 && band_width <= 180.0) {
        return Err(CalibrationError::BandWidth(band_width));
    }
    let n = (180.0 / band_width - 1e-9).ceil() as usize;
    Ok((0..n)
        .map(|b| {
            let lo = -90.0 + b as f64 * band_width;
            (lo, (lo + band_width).min(90.0))
        })
        .collect())
}

/// Index of the lower-inclusive band containing `lat`; 90 goes to the last band.
pub fn band_index(edges: &[(f64, f64)], lat: f64) -> usize {
    edges
        .iter()
        .position(|&(lo, hi)| lat >= lo && lat < hi)
        .unwrap_or(if lat < -90.0 { 0 } else { edges.len() - 1 })
}

/// Least-squares `y ~ scale * x + offset` with both coefficients kept
/// non-negative. Clamped fits keep `mean(fit) = mean(y)`.
fn fit_affine(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let through_origin = || if mx > 0.0 { (my / mx, 0.0) } else { (0.0, my) };
    if sxx <= 1e-12 * mx.abs().max(1.0).powi(2) * n {
        return through_origin();
    }
    let scale = sxy / sxx;
    let offset = my - scale * mx;
    if scale < 0.0 {
        (0.0, my)
    } else if offset < 0.0 {
        through_origin()
    } else {
        (scale, offset)
    }
}

pub fn fit_calibration(pairs: &[CalibrationPair], band_width: f64) -> Result<CalibrationModel, CalibrationError> {
    let edges = band_edges(band_width)?;
    if pairs.is_empty() {
        return Err(CalibrationError::NoPairs);
    }
    if let Some(p) = pairs.iter().find(|p| {
        !(p.sigma_raw >= 0.0 && p.abs_error >= 0.0 && p.sigma_raw.is_finite() && p.abs_error.is_finite())
            || !(-90.0..=90.0).contains(&p.lat)
    }) {
        return Err(CalibrationError::InvalidPair(format!("{p:?}")));
    }
    let k = FRAC_PI_2.sqrt();
    let mut xs = vec![Vec::new(); edges.len()];
    let mut ys = vec![Vec::new(); edges.len()];
    for p in pairs {
        let b = band_index(&edges, p.lat);
        xs[b].push(p.sigma_raw);
        ys[b].push(p.abs_error * k);
    }
    let all_x: Vec<f64> = pairs.iter().map(|p| p.sigma_raw).collect();
    let all_y: Vec<f64> = pairs.iter().map(|p| p.abs_error * k).collect();
    let global = fit_affine(&all_x, &all_y);
    let bands = edges
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(&(lo, hi), (x, y))| {
            let (scale, offset) = if x.len() >= MIN_BAND_PAIRS {
                fit_affine(x, y)
            } else {
                global
            };
            Band { lo, hi, scale, offset }
        })
        .collect();
    Ok(CalibrationModel { bands })
}

impl CalibrationModel {
    pub fn identity(band_width: f64) -> Result<Self, CalibrationError> {
        Ok(CalibrationModel {
            bands: band_edges(band_width)?
                .into_iter()
                .map(|(lo, hi)| Band {
                    lo,
                    hi,
                    scale: 1.0,
                    offset: 0.0,
                })
                .collect(),
        })
    }

    fn edges(&self) -> Vec<(f64, f64)> {
        self.bands.iter().map(|b| (b.lo, b.hi)).collect()
    }

    pub fn band_for(&self, lat: f64) -> &Band {
        let idx = self
            .bands
            .iter()
            .position(|b| lat >= b.lo && lat < b.hi)
            .unwrap_or_else(|| band_index(&self.edges(), lat));
        &self.bands[idx]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("band_lo,band_hi,scale,offset\n");
        for b in &self.bands {
            let _ = writeln!(out, "{},{},{},{}", b.lo, b.hi, b.scale, b.offset);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, CalibrationError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["band_lo", "band_hi", "scale", "offset"] {
            return Err(CalibrationError::Format(format!("unexpected header {headers:?}")));
        }
        let mut bands = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| -> Result<f64, CalibrationError> {
                record[i]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| CalibrationError::Format(format!("bad number {:?}", &record[i])))
            };
            let band = Band {
                lo: field(0)?,
                hi: field(1)?,
                scale: field(2)?,
                offset: field(3)?,
            };
            if band.scale < 0.0 || band.offset < 0.0 || band.hi <= band.lo {
                return Err(CalibrationError::Format(format!("invalid band {band:?}")));
            }
            bands.push(band);
        }
        let contiguous = bands.windows(2).all(|w| w[0].hi == w[1].lo);
        let covers = bands.first().map(|b| b.lo) == Some(-90.0) && bands.last().map(|b| b.hi) == Some(90.0);
        if !contiguous || !covers {
            return Err(CalibrationError::Format("bands must tile [-90, 90]".into()));
        }
        Ok(CalibrationModel { bands })
    }
}

pub fn apply_calibration(model: &CalibrationModel, sigma_raw: f64, lat: f64) -> f64 {
    let band = model.band_for(lat);
    band.scale * sigma_raw + band.offset
}
