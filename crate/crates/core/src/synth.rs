//! Synthetic global ionosphere maps in IGS layout.
//!
//! An empirical climatology driven by the same inputs the network sees
//! (F10.7, Kp, season, time of day, position) plus day-to-day "weather":
//! a smooth random multiplicative field and a per-cell jitter, both seeded
//! by the day. The weather part is what a model of the inputs cannot learn,
//! so held-out errors stay well above zero.
//!
//! Shape: a diurnal bulge peaking near 14 LT whose latitude centre follows
//! the subsolar point, equatorial anomaly crests at +-15 deg geomagnetic
//! latitude, a night-time floor and a Kp-driven auroral enhancement.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ionex::{GridSpec, IonexError, IonexFile, IonexHeader, TecMap};
use crate::rng::{self, tag};
use crate::spaceweather::{lookup_f107, lookup_kp, SpaceWeatherError, SpaceWeatherTable};

/// Geomagnetic north pole of a centred dipole, degrees.
const POLE_LAT: f64 = 80.1;
const POLE_LON: f64 = -72.2;
const WAVES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub maps_per_day: u32,
    pub exponent: i32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 2009,
            grid: GridSpec::igs(),
            maps_per_day: 12,
            exponent: -1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    SpaceWeather(#[from] SpaceWeatherError),
    #[error(transparent)]
    Ionex(#[from] IonexError),
    #[error("maps_per_day must divide 24 hours evenly, got {0}")]
    MapsPerDay(u32),
}

pub fn geomagnetic_lat(lat: f64, lon: f64) -> f64 {
    let (p, l) = (POLE_LAT.to_radians(), lat.to_radians());
    let s = l.sin() * p.sin() + l.cos() * p.cos() * (lon - POLE_LON).to_radians().cos();
    s.clamp(-1.0, 1.0).asin().to_degrees()
}

fn declination(doy: f64) -> f64 {
    23.44 * (2.0 * std::f64::consts::PI * (doy - 81.0) / 365.25).sin()
}

fn bump(x: f64, centre: f64, width: f64) -> f64 {
    (-((x - centre) / width).powi(2)).exp()
}

/// Smooth part of the model, TECU.
pub fn climatology(t: NaiveDateTime, lat: f64, lon: f64, f107: f64, kp: f64) -> f64 {
    let hours = t.num_seconds_from_midnight() as f64 / 3600.0;
    let lt = (hours + lon / 15.0).rem_euclid(24.0);
    let from_peak = (lt - 14.0 + 12.0).rem_euclid(24.0) - 12.0;
    let diurnal = (-0.5 * (from_peak / 3.5).powi(2)).exp();
    let dec = declination(t.ordinal() as f64);
    let mlat = geomagnetic_lat(lat, lon);

    let solar = ((f107 - 40.0) / 30.0).max(0.2);
    let envelope = bump(lat, 0.4 * dec, 50.0);
    let anomaly = 1.0 + 0.6 * (bump(mlat, 15.0, 7.0) + bump(mlat, -15.0, 7.0)) - 0.25 * bump(mlat, 0.0, 5.0);
    let day = 14.0 * (0.4 + 0.6 * solar) * diurnal * envelope * (1.0 + (anomaly - 1.0) * diurnal);
    let night = (1.5 + 2.0 * lat.to_radians().cos()) * (0.7 + 0.3 * solar);
    let aurora = 0.8 * kp * bump(mlat.abs(), 68.0, 8.0);
    day + night + aurora
}

/// Random smooth multiplicative perturbation for one day.
struct Weather {
    global: f64,
    waves: [(f64, f64, f64, f64, f64); WAVES],
}

impl Weather {
    fn for_day(seed: u64, day: NaiveDate) -> Self {
        let mut rng = rng::stream(seed, &[tag::SYNTH, day.num_days_from_ce() as u64]);
        let n: f64 = StandardNormal.sample(&mut rng);
        let global = 1.0 + 0.06 * n;
        let waves = std::array::from_fn(|_| {
            (
                rng.random_range(0.02..0.05),
                rng.random_range(1..=3) as f64,
                rng.random_range(1..=4) as f64,
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        });
        Weather { global, waves }
    }

    fn factor(&self, hours: f64, lat: f64, lon: f64) -> f64 {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        let field: f64 = self
            .waves
            .iter()
            .map(|&(amp, m, n, omega, phase)| amp * (m * lo + n * la + omega * hours / 4.0 + phase).sin())
            .sum();
        self.global * (1.0 + field)
    }
}

/// Deterministic jitter in [-1, 1) for one cell.
fn jitter(seed: u64, t: NaiveDateTime, i: usize, j: usize, stream: u64) -> f64 {
    let s = rng::derive_seed(seed, &[tag::SYNTH, t.and_utc().timestamp() as u64, i as u64, j as u64, stream]);
    (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// One day of maps with matching RMS maps.
pub fn synth_day(day: NaiveDate, sw: &SpaceWeatherTable, cfg: &SynthConfig) -> Result<IonexFile, SynthError> {
    cfg.grid.validate()?;
    if cfg.maps_per_day == 0 || 86_400 % cfg.maps_per_day != 0 {
        return Err(SynthError::MapsPerDay(cfg.maps_per_day));
    }
    let step = 86_400 / cfg.maps_per_day;
    let epochs: Vec<NaiveDateTime> = (0..cfg.maps_per_day)
        .map(|k| day.and_hms_opt(0, 0, 0).unwrap() + chrono::Duration::seconds((k * step) as i64))
        .collect();
    let weather = Weather::for_day(cfg.seed, day);
    let f107 = lookup_f107(sw, day)?;
    let quantum = 10f64.powi(cfg.exponent);
    let grid = cfg.grid;

    let mut tec_maps = Vec::with_capacity(epochs.len());
    let mut rms_maps = Vec::with_capacity(epochs.len());
    for &t in &epochs {
        let kp = lookup_kp(sw, t)?;
        let hours = t.num_seconds_from_midnight() as f64 / 3600.0;
        let mut tec = Vec::with_capacity(grid.len());
        let mut rms = Vec::with_capacity(grid.len());
        for i in 0..grid.n_lat() {
            let lat = grid.lat(i);
            for j in 0..grid.n_lon() {
                // The two edge meridians are the same place.
                let wraps = j + 1 == grid.n_lon() && (grid.lon(j) - grid.lon(0) - 360.0).abs() < 1e-9;
                let (jj, lon) = if wraps { (0, grid.lon(0)) } else { (j, grid.lon(j)) };
                let base = climatology(t, lat, lon, f107, kp) * weather.factor(hours, lat, lon);
                let v = (base + 0.3 * jitter(cfg.seed, t, i, jj, 0)).max(0.1);
                let r = 0.8 + 0.08 * v + 0.8 * (1.0 - lat.to_radians().cos()) + 0.1 * jitter(cfg.seed, t, i, jj, 1);
                tec.push(Some((v / quantum).round() * quantum));
                rms.push(Some((r / quantum).round() * quantum));
            }
        }
        tec_maps.push(TecMap::new(t, grid, tec)?);
        rms_maps.push(TecMap::new(t, grid, rms)?);
    }

    let mut header = IonexHeader::for_maps(grid, &epochs, cfg.exponent);
    header.program = "vtecbnn synth".to_string();
    header.mapping_function = "COSZ".to_string();
    header.elevation_cutoff = 10.0;
    header.observables = "TEC".to_string();
    header.description.push("Synthetic climatological VTEC with daily variability".to_string());
    let file = IonexFile {
        header,
        tec_maps,
        rms_maps,
    };
    file.validate()?;
    Ok(file)
}
