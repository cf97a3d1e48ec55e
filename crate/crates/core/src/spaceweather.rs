//! Daily adjusted F10.7 and 3-hourly Kp indices, and the raw model inputs
//! built from them.
//!
//! The CSV schema is `date,f107_adjusted,kp1,...,kp8` with ISO-8601 dates and
//! a header row. Lines starting with `#` are ignored.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use thiserror::Error;

pub const KP_BINS: usize = 8;
const KP_BIN_SECONDS: u32 = 10_800;
const COLUMNS: [&str; 10] = [
    "date",
    "f107_adjusted",
    "kp1",
    "kp2",
    "kp3",
    "kp4",
    "kp5",
    "kp6",
    "kp7",
    "kp8",
];

#[derive(Debug, Error)]
pub enum SpaceWeatherError {
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?}")]
    MissingColumn(&'static str),
    #[error("line {line}: {detail}")]
    Invalid { line: u64, detail: String },
    #[error("line {line}: duplicate day {day}")]
    DuplicateDay { line: u64, day: NaiveDate },
    #[error("line {line}: {field} value {value} out of range")]
    OutOfRange { line: u64, field: String, value: f64 },
    #[error("no space-weather entry for {0}")]
    MissingDay(NaiveDate),
    #[error("invalid feature: {0}")]
    InvalidFeature(String),
}

/// Indices for one UTC day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyIndices {
    /// 1 AU adjusted 10.7 cm flux, sfu.
    pub f107_adjusted: f64,
    /// Kp for the eight 3-hour bins starting at 00, 03, ..., 21 UT.
    pub kp: [f64; KP_BINS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpaceWeatherTable {
    days: BTreeMap<NaiveDate, DailyIndices>,
}

impl SpaceWeatherTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace one day, validating ranges.
    pub fn insert(&mut self, day: NaiveDate, indices: DailyIndices) -> Result<(), SpaceWeatherError> {
        validate(0, &indices)?;
        self.days.insert(day, indices);
        Ok(())
    }

    pub fn get(&self, day: NaiveDate) -> Option<&DailyIndices> {
        self.days.get(&day)
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn first_day(&self) -> Option<NaiveDate> {
        self.days.keys().next().copied()
    }

    pub fn last_day(&self) -> Option<NaiveDate> {
        self.days.keys().next_back().copied()
    }

    pub fn covers(&self, day: NaiveDate) -> bool {
        self.days.contains_key(&day)
    }

    /// Days between the first and last entry that have no row.
    pub fn gaps(&self) -> Vec<NaiveDate> {
        let (Some(first), Some(last)) = (self.first_day(), self.last_day()) else {
            return Vec::new();
        };
        first
            .iter_days()
            .take_while(|d| *d <= last)
            .filter(|d| !self.days.contains_key(d))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NaiveDate, &DailyIndices)> {
        self.days.iter()
    }
}

fn validate(line: u64, indices: &DailyIndices) -> Result<(), SpaceWeatherError> {
    let f = indices.f107_adjusted;
    if !f.is_finite() || f <= 0.0 {
        return Err(SpaceWeatherError::OutOfRange {
            line,
            field: "f107_adjusted".into(),
            value: f,
        });
    }
    for (k, kp) in indices.kp.iter().enumerate() {
        if !kp.is_finite() || !(0.0..=9.0).contains(kp) {
            return Err(SpaceWeatherError::OutOfRange {
                line,
                field: format!("kp{}", k + 1),
                value: *kp,
            });
        }
    }
    Ok(())
}

/// Parse the space-weather CSV.
pub fn parse_spaceweather(text: &str) -> Result<SpaceWeatherTable, SpaceWeatherError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let mut table = SpaceWeatherTable::new();
    if text.lines().all(|l| l.trim().is_empty() || l.trim_start().starts_with('#')) {
        return Ok(table);
    }
    let headers = reader.headers()?.clone();
    let mut positions = [0usize; COLUMNS.len()];
    for (slot, name) in positions.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or(SpaceWeatherError::MissingColumn(name))?;
    }

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> Result<&str, SpaceWeatherError> {
            record.get(positions[idx]).ok_or_else(|| SpaceWeatherError::Invalid {
                line,
                detail: format!("missing {} field", COLUMNS[idx]),
            })
        };
        let number = |idx: usize| -> Result<f64, SpaceWeatherError> {
            let raw = field(idx)?;
            raw.parse::<f64>().map_err(|_| SpaceWeatherError::Invalid {
                line,
                detail: format!("{} is not a number: {raw:?}", COLUMNS[idx]),
            })
        };

        let raw_date = field(0)?;
        let day = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|_| SpaceWeatherError::Invalid {
            line,
            detail: format!("bad date {raw_date:?}"),
        })?;
        let mut kp = [0.0; KP_BINS];
        for (k, slot) in kp.iter_mut().enumerate() {
            *slot = number(2 + k)?;
        }
        let indices = DailyIndices {
            f107_adjusted: number(1)?,
            kp,
        };
        validate(line, &indices)?;
        if table.days.insert(day, indices).is_some() {
            return Err(SpaceWeatherError::DuplicateDay { line, day });
        }
    }
    Ok(table)
}

/// Serialize back to the CSV schema.
pub fn write_spaceweather(table: &SpaceWeatherTable) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for (day, idx) in table.iter() {
        out.push_str(&format!("{},{}", day.format("%Y-%m-%d"), idx.f107_adjusted));
        for kp in idx.kp {
            out.push_str(&format!(",{kp}"));
        }
        out.push('\n');
    }
    out
}

pub fn lookup_f107(table: &SpaceWeatherTable, day: NaiveDate) -> Result<f64, SpaceWeatherError> {
    table
        .get(day)
        .map(|d| d.f107_adjusted)
        .ok_or(SpaceWeatherError::MissingDay(day))
}

/// Kp of the 3-hour bin containing `t`.
pub fn lookup_kp(table: &SpaceWeatherTable, t: NaiveDateTime) -> Result<f64, SpaceWeatherError> {
    let day = t.date();
    let entry = table.get(day).ok_or(SpaceWeatherError::MissingDay(day))?;
    let bin = (t.num_seconds_from_midnight() / KP_BIN_SECONDS) as usize;
    Ok(entry.kp[bin.min(KP_BINS - 1)])
}

/// The six raw model inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub f107: f64,
    pub kp: f64,
    /// Day of year, 1-366.
    pub doy: f64,
    /// Second of day, 0-86399.
    pub sod: f64,
    /// Degrees in (-180, 180].
    pub lon: f64,
    pub lat: f64,
}

/// Wrap a longitude into (-180, 180].
pub fn normalize_lon(lon: f64) -> f64 {
    let mut wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped <= -180.0 {
        wrapped += 360.0;
    }
    wrapped
}

pub fn build_feature(
    t: NaiveDateTime,
    lat: f64,
    lon: f64,
    table: &SpaceWeatherTable,
) -> Result<FeatureVector, SpaceWeatherError> {
    if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
        return Err(SpaceWeatherError::InvalidFeature(format!("latitude {lat}")));
    }
    if !lon.is_finite() {
        return Err(SpaceWeatherError::InvalidFeature(format!("longitude {lon}")));
    }
    Ok(FeatureVector {
        f107: lookup_f107(table, t.date())?,
        kp: lookup_kp(table, t)?,
        doy: t.ordinal() as f64,
        sod: t.num_seconds_from_midnight() as f64,
        lon: normalize_lon(lon),
        lat,
    })
}
