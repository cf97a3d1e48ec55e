//! IONEX 1.0 reader and writer for two-dimensional TEC and RMS maps.
//!
//! Records are 80-character lines with the label in columns 61-80. Map data
//! lines hold up to sixteen 5-character integer fields which are scaled by
//! `10^EXPONENT` to obtain TECU. The value `9999` marks a missing cell.
//!
//! Values are held as floating TECU in memory; the scaled integers only exist
//! at the text boundary.

use std::fmt::Write as _;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use log::warn;
use thiserror::Error;

/// Raw field value that marks a missing cell, independent of the exponent.
pub const MISSING_SENTINEL: i64 = 9999;
/// Largest magnitude a scaled value may take in a 5-character field.
pub const MAX_SCALED: i64 = 99998;
const VALUES_PER_LINE: usize = 16;
const FIELD_WIDTH: usize = 5;
const GRID_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum IonexError {
    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("cell ({lat_index}, {lon_index}) outside {n_lat}x{n_lon} grid")]
    IndexOutOfRange {
        lat_index: usize,
        lon_index: usize,
        n_lat: usize,
        n_lon: usize,
    },
    #[error("point (lat {lat}, lon {lon}) outside grid bounds")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("interpolation node ({lat_index}, {lon_index}) is missing")]
    MissingNode { lat_index: usize, lon_index: usize },
    #[error("value {value} TECU does not fit a 5-column field with exponent {exponent}")]
    Overflow { value: f64, exponent: i32 },
    #[error("invalid IONEX content: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseErrorKind {
    #[error("malformed header label {0:?}")]
    MalformedLabel(String),
    #[error("bad field in {label:?} record: {detail}")]
    BadField { label: String, detail: String },
    #[error("grid record inconsistent with header: {0}")]
    GridMismatch(String),
    #[error("truncated map block: {0}")]
    Truncated(String),
    #[error("non-numeric value field {0:?}")]
    NonNumeric(String),
    #[error("missing required header record {0:?}")]
    MissingHeader(&'static str),
    #[error("unsupported content: {0}")]
    Unsupported(String),
}

/// Regular latitude/longitude grid of a single-layer map.
///
/// Steps are signed; IGS maps run from 87.5 down to -87.5 in latitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lat_start: f64,
    pub lat_stop: f64,
    pub lat_step: f64,
    pub lon_start: f64,
    pub lon_stop: f64,
    pub lon_step: f64,
    /// Shell height in km.
    pub height: f64,
}

fn node_count(start: f64, stop: f64, step: f64) -> Option<usize> {
    if step == 0.0 || !step.is_finite() || !start.is_finite() || !stop.is_finite() {
        return None;
    }
    let ratio = (stop - start) / step;
    let rounded = ratio.round();
    if rounded < 0.0 || (ratio - rounded).abs() > GRID_TOLERANCE {
        return None;
    }
    Some(rounded as usize + 1)
}

impl GridSpec {
    pub fn new(
        lat: (f64, f64, f64),
        lon: (f64, f64, f64),
        height: f64,
    ) -> Result<Self, IonexError> {
        let grid = GridSpec {
            lat_start: lat.0,
            lat_stop: lat.1,
            lat_step: lat.2,
            lon_start: lon.0,
            lon_stop: lon.1,
            lon_step: lon.2,
            height,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// The 2.5° x 5° global grid of the IGS products at 450 km.
    pub fn igs() -> Self {
        GridSpec {
            lat_start: 87.5,
            lat_stop: -87.5,
            lat_step: -2.5,
            lon_start: -180.0,
            lon_stop: 180.0,
            lon_step: 5.0,
            height: 450.0,
        }
    }

    pub fn validate(&self) -> Result<(), IonexError> {
        let n_lat = node_count(self.lat_start, self.lat_stop, self.lat_step).ok_or_else(|| {
            IonexError::InvalidGrid(format!(
                "latitude {} .. {} step {} is not a whole number of steps",
                self.lat_start, self.lat_stop, self.lat_step
            ))
        })?;
        let n_lon = node_count(self.lon_start, self.lon_stop, self.lon_step).ok_or_else(|| {
            IonexError::InvalidGrid(format!(
                "longitude {} .. {} step {} is not a whole number of steps",
                self.lon_start, self.lon_stop, self.lon_step
            ))
        })?;
        if n_lat < 2 || n_lon < 2 {
            return Err(IonexError::InvalidGrid(format!(
                "grid needs at least 2x2 nodes, got {n_lat}x{n_lon}"
            )));
        }
        Ok(())
    }

    pub fn n_lat(&self) -> usize {
        node_count(self.lat_start, self.lat_stop, self.lat_step).unwrap_or(0)
    }

    pub fn n_lon(&self) -> usize {
        node_count(self.lon_start, self.lon_stop, self.lon_step).unwrap_or(0)
    }

    /// Number of nodes in the grid.
    pub fn len(&self) -> usize {
        self.n_lat() * self.n_lon()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lat(&self, lat_index: usize) -> f64 {
        self.lat_start + lat_index as f64 * self.lat_step
    }

    pub fn lon(&self, lon_index: usize) -> f64 {
        self.lon_start + lon_index as f64 * self.lon_step
    }

    fn approx_eq(&self, other: &GridSpec) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= GRID_TOLERANCE;
        close(self.lat_start, other.lat_start)
            && close(self.lat_stop, other.lat_stop)
            && close(self.lat_step, other.lat_step)
            && close(self.lon_start, other.lon_start)
            && close(self.lon_stop, other.lon_stop)
            && close(self.lon_step, other.lon_step)
            && close(self.height, other.height)
    }

    /// Whether two grids have the same nodes, within a micro-degree.
    pub fn same_nodes(&self, other: &GridSpec) -> bool {
        self.approx_eq(other)
    }
}

/// One epoch of a global grid, in TECU, stored latitude-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TecMap {
    pub epoch: NaiveDateTime,
    pub grid: GridSpec,
    /// `n_lat * n_lon` cells, `None` where the file carried the sentinel.
    pub values: Vec<Option<f64>>,
}

impl TecMap {
    pub fn new(epoch: NaiveDateTime, grid: GridSpec, values: Vec<Option<f64>>) -> Result<Self, IonexError> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(IonexError::Invalid(format!(
                "map has {} cells, grid expects {}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(bad) = values.iter().flatten().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(IonexError::Invalid(format!("cell value {bad} is not a finite non-negative TECU value")));
        }
        Ok(TecMap { epoch, grid, values })
    }

    /// Map with every cell set to `value`.
    pub fn filled(epoch: NaiveDateTime, grid: GridSpec, value: f64) -> Self {
        TecMap {
            epoch,
            grid,
            values: vec![Some(value); grid.len()],
        }
    }

    fn index(&self, lat_index: usize, lon_index: usize) -> Result<usize, IonexError> {
        let (n_lat, n_lon) = (self.grid.n_lat(), self.grid.n_lon());
        if lat_index >= n_lat || lon_index >= n_lon {
            return Err(IonexError::IndexOutOfRange {
                lat_index,
                lon_index,
                n_lat,
                n_lon,
            });
        }
        Ok(lat_index * n_lon + lon_index)
    }

    pub fn get(&self, lat_index: usize, lon_index: usize) -> Result<Option<f64>, IonexError> {
        Ok(self.values[self.index(lat_index, lon_index)?])
    }

    pub fn set(&mut self, lat_index: usize, lon_index: usize, value: Option<f64>) -> Result<(), IonexError> {
        let idx = self.index(lat_index, lon_index)?;
        self.values[idx] = value;
        Ok(())
    }

    pub fn present_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Stored cell at grid indices; no interpolation.
pub fn grid_value(map: &TecMap, lat_index: usize, lon_index: usize) -> Result<Option<f64>, IonexError> {
    map.get(lat_index, lon_index)
}

/// Bilinear blend of the four nodes surrounding `(lat, lon)`.
///
/// Nodes carrying zero weight (queries on a grid line) may be missing.
pub fn interpolate_bilinear(map: &TecMap, lat: f64, lon: f64) -> Result<f64, IonexError> {
    let grid = &map.grid;
    let out = || IonexError::OutOfBounds { lat, lon };
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    let fi = (lat - grid.lat_start) / grid.lat_step;
    let fj = (lon - grid.lon_start) / grid.lon_step;
    let span = |f: f64, n: usize| f >= -GRID_TOLERANCE && f <= (n - 1) as f64 + GRID_TOLERANCE;
    if !fi.is_finite() || !fj.is_finite() || !span(fi, n_lat) || !span(fj, n_lon) {
        return Err(out());
    }
    let fi = fi.clamp(0.0, (n_lat - 1) as f64);
    let fj = fj.clamp(0.0, (n_lon - 1) as f64);
    let i0 = (fi.floor() as usize).min(n_lat - 2);
    let j0 = (fj.floor() as usize).min(n_lon - 2);
    let mut ti = fi - i0 as f64;
    let mut tj = fj - j0 as f64;
    if ti.abs() < 1e-12 {
        ti = 0.0;
    }
    if tj.abs() < 1e-12 {
        tj = 0.0;
    }

    let mut total = 0.0;
    for (di, wi) in [(0, 1.0 - ti), (1, ti)] {
        for (dj, wj) in [(0, 1.0 - tj), (1, tj)] {
            let weight = wi * wj;
            if weight == 0.0 {
                continue;
            }
            let (li, lj) = (i0 + di, j0 + dj);
            let value = map.get(li, lj)?.ok_or(IonexError::MissingNode {
                lat_index: li,
                lon_index: lj,
            })?;
            total += weight * value;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonexHeader {
    pub version: f64,
    /// Column 21 of the version record, `I` for ionosphere maps.
    pub file_type: char,
    pub satellite_system: String,
    pub program: String,
    pub run_by: String,
    pub date: String,
    pub description: Vec<String>,
    pub comments: Vec<String>,
    pub epoch_first: NaiveDateTime,
    pub epoch_last: NaiveDateTime,
    /// Seconds between maps.
    pub interval: u32,
    pub map_count: usize,
    pub mapping_function: String,
    pub elevation_cutoff: f64,
    pub observables: String,
    pub station_count: Option<u32>,
    pub satellite_count: Option<u32>,
    pub base_radius: f64,
    pub map_dimension: u8,
    pub grid: GridSpec,
    /// Power of ten applied to every stored integer.
    pub exponent: i32,
}

impl IonexHeader {
    /// Header for a set of maps on `grid`, filled with IGS-style defaults.
    pub fn for_maps(grid: GridSpec, epochs: &[NaiveDateTime], exponent: i32) -> Self {
        let first = epochs.first().copied().unwrap_or_default();
        let last = epochs.last().copied().unwrap_or_default();
        let interval = if epochs.len() >= 2 {
            (epochs[1] - epochs[0]).num_seconds().max(0) as u32
        } else {
            0
        };
        IonexHeader {
            version: 1.0,
            file_type: 'I',
            satellite_system: "GPS".to_string(),
            program: "vtecbnn".to_string(),
            run_by: String::new(),
            date: first.format("%d-%b-%y %H:%M").to_string().to_uppercase(),
            description: Vec::new(),
            comments: Vec::new(),
            epoch_first: first,
            epoch_last: last,
            interval,
            map_count: epochs.len(),
            mapping_function: "NONE".to_string(),
            elevation_cutoff: 0.0,
            observables: String::new(),
            station_count: None,
            satellite_count: None,
            base_radius: 6371.0,
            map_dimension: 2,
            grid,
            exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IonexFile {
    pub header: IonexHeader,
    pub tec_maps: Vec<TecMap>,
    pub rms_maps: Vec<TecMap>,
}

impl IonexFile {
    /// Check map ordering, grids and the RMS/TEC pairing.
    pub fn validate(&self) -> Result<(), IonexError> {
        self.header.grid.validate()?;
        for pair in self.tec_maps.windows(2) {
            if pair[1].epoch <= pair[0].epoch {
                return Err(IonexError::Invalid(format!(
                    "TEC map epochs not strictly increasing at {}",
                    pair[1].epoch
                )));
            }
        }
        for map in self.tec_maps.iter().chain(&self.rms_maps) {
            if !map.grid.same_nodes(&self.header.grid) {
                return Err(IonexError::Invalid(format!("map at {} uses a different grid", map.epoch)));
            }
            if map.values.len() != self.header.grid.len() {
                return Err(IonexError::Invalid(format!("map at {} has wrong cell count", map.epoch)));
            }
        }
        if !self.rms_maps.is_empty() {
            if self.rms_maps.len() != self.tec_maps.len() {
                return Err(IonexError::Invalid(format!(
                    "{} RMS maps for {} TEC maps",
                    self.rms_maps.len(),
                    self.tec_maps.len()
                )));
            }
            for (tec, rms) in self.tec_maps.iter().zip(&self.rms_maps) {
                if tec.epoch != rms.epoch {
                    return Err(IonexError::Invalid(format!(
                        "RMS map epoch {} does not match TEC map epoch {}",
                        rms.epoch, tec.epoch
                    )));
                }
            }
        }
        Ok(())
    }

    /// Total grid values carried by the TEC maps.
    pub fn tec_value_count(&self) -> usize {
        self.tec_maps.iter().map(|m| m.values.len()).sum()
    }

    /// RMS map with the same epoch as `tec_index`, if any.
    pub fn rms_for(&self, tec_index: usize) -> Option<&TecMap> {
        self.rms_maps.get(tec_index)
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Record<'a> {
    number: usize,
    content: &'a str,
    label: &'a str,
    /// Whole line; data records use all 80 columns.
    raw: &'a str,
}

fn column(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        return "";
    }
    line.get(start..end).unwrap_or("")
}

fn split_record(number: usize, line: &str) -> Record<'_> {
    let line = line.trim_end_matches(['\r', '\n']);
    Record {
        number,
        content: column(line, 0, 60),
        label: column(line, 60, 80).trim(),
        raw: line,
    }
}

fn parse_err(line: usize, kind: ParseErrorKind) -> IonexError {
    IonexError::Parse { line, kind }
}

fn bad_field(rec: &Record<'_>, detail: impl Into<String>) -> IonexError {
    parse_err(
        rec.number,
        ParseErrorKind::BadField {
            label: rec.label.to_string(),
            detail: detail.into(),
        },
    )
}

fn parse_f64(rec: &Record<'_>, start: usize, end: usize) -> Result<f64, IonexError> {
    let text = column(rec.content, start, end).trim();
    text.parse::<f64>()
        .map_err(|_| bad_field(rec, format!("columns {}-{}: {text:?}", start + 1, end)))
}

fn parse_int<T: std::str::FromStr>(rec: &Record<'_>, start: usize, end: usize) -> Result<T, IonexError> {
    let text = column(rec.content, start, end).trim();
    text.parse::<T>()
        .map_err(|_| bad_field(rec, format!("columns {}-{}: {text:?}", start + 1, end)))
}

fn parse_epoch(rec: &Record<'_>) -> Result<NaiveDateTime, IonexError> {
    let mut parts = [0i64; 6];
    for (k, slot) in parts.iter_mut().enumerate() {
        *slot = parse_int(rec, 6 * k, 6 * k + 6)?;
    }
    let [year, month, day, hour, minute, second] = parts;
    let date = NaiveDate::from_ymd_opt(year as i32, month as u32, day as u32)
        .ok_or_else(|| bad_field(rec, format!("invalid date {year}-{month}-{day}")))?;
    if !(0..=24).contains(&hour) || !(0..60).contains(&minute) || !(0..=60).contains(&second) {
        return Err(bad_field(rec, format!("invalid time {hour}:{minute}:{second}")));
    }
    // Day files commonly end with a 24:00:00 map.
    let midnight = date.and_hms_opt(0, 0, 0).expect("midnight is valid");
    Ok(midnight + Duration::seconds(hour * 3600 + minute * 60 + second))
}

fn parse_triplet(rec: &Record<'_>) -> Result<(f64, f64, f64), IonexError> {
    Ok((parse_f64(rec, 2, 8)?, parse_f64(rec, 8, 14)?, parse_f64(rec, 14, 20)?))
}

struct Cursor<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor {
            lines: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    /// Next non-blank record.
    fn next(&mut self) -> Option<Record<'a>> {
        for (idx, line) in self.lines.by_ref() {
            self.last_line = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(split_record(idx + 1, line));
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<Record<'a>, IonexError> {
        let line = self.last_line + 1;
        self.next()
            .ok_or_else(|| parse_err(line, ParseErrorKind::Truncated(format!("end of input, expected {what}"))))
    }
}

#[derive(Default)]
struct HeaderDraft {
    version: Option<(f64, char, String)>,
    program: (String, String, String),
    description: Vec<String>,
    comments: Vec<String>,
    epoch_first: Option<NaiveDateTime>,
    epoch_last: Option<NaiveDateTime>,
    interval: Option<u32>,
    map_count: Option<usize>,
    mapping_function: Option<String>,
    elevation_cutoff: Option<f64>,
    observables: String,
    station_count: Option<u32>,
    satellite_count: Option<u32>,
    base_radius: Option<f64>,
    map_dimension: Option<u8>,
    heights: Option<(f64, f64, f64)>,
    lat: Option<(f64, f64, f64)>,
    lon: Option<(f64, f64, f64)>,
    exponent: Option<i32>,
}

fn parse_header(cursor: &mut Cursor<'_>) -> Result<IonexHeader, IonexError> {
    let mut draft = HeaderDraft::default();
    let mut in_aux = false;
    let end_line = loop {
        let rec = cursor.expect("END OF HEADER")?;
        if in_aux {
            if rec.label == "END OF AUX DATA" {
                in_aux = false;
            }
            continue;
        }
        match rec.label {
            "IONEX VERSION / TYPE" => {
                let version = parse_f64(&rec, 0, 8)?;
                let file_type = column(rec.content, 20, 21).chars().next().unwrap_or(' ');
                let system = column(rec.content, 40, 60).trim().to_string();
                draft.version = Some((version, file_type, system));
            }
            "PGM / RUN BY / DATE" => {
                draft.program = (
                    column(rec.content, 0, 20).trim_end().to_string(),
                    column(rec.content, 20, 40).trim_end().to_string(),
                    column(rec.content, 40, 60).trim_end().to_string(),
                );
            }
            "DESCRIPTION" => draft.description.push(rec.content.trim_end().to_string()),
            "COMMENT" => draft.comments.push(rec.content.trim_end().to_string()),
            "EPOCH OF FIRST MAP" => draft.epoch_first = Some(parse_epoch(&rec)?),
            "EPOCH OF LAST MAP" => draft.epoch_last = Some(parse_epoch(&rec)?),
            "INTERVAL" => draft.interval = Some(parse_int(&rec, 0, 6)?),
            "# OF MAPS IN FILE" => draft.map_count = Some(parse_int(&rec, 0, 6)?),
            "MAPPING FUNCTION" => draft.mapping_function = Some(column(rec.content, 2, 6).trim().to_string()),
            "ELEVATION CUTOFF" => draft.elevation_cutoff = Some(parse_f64(&rec, 0, 8)?),
            "OBSERVABLES USED" => draft.observables = rec.content.trim_end().to_string(),
            "# OF STATIONS" => draft.station_count = Some(parse_int(&rec, 0, 6)?),
            "# OF SATELLITES" => draft.satellite_count = Some(parse_int(&rec, 0, 6)?),
            "BASE RADIUS" => draft.base_radius = Some(parse_f64(&rec, 0, 8)?),
            "MAP DIMENSION" => draft.map_dimension = Some(parse_int(&rec, 0, 6)?),
            "HGT1 / HGT2 / DHGT" => draft.heights = Some(parse_triplet(&rec)?),
            "LAT1 / LAT2 / DLAT" => draft.lat = Some(parse_triplet(&rec)?),
            "LON1 / LON2 / DLON" => draft.lon = Some(parse_triplet(&rec)?),
            "EXPONENT" => draft.exponent = Some(parse_int(&rec, 0, 6)?),
            "START OF AUX DATA" => in_aux = true,
            "END OF HEADER" => break rec.number,
            other => {
                return Err(parse_err(rec.number, ParseErrorKind::MalformedLabel(other.to_string())));
            }
        }
    };

    let missing = |name: &'static str| parse_err(end_line, ParseErrorKind::MissingHeader(name));
    let (version, file_type, satellite_system) = draft.version.ok_or_else(|| missing("IONEX VERSION / TYPE"))?;
    let heights = draft.heights.ok_or_else(|| missing("HGT1 / HGT2 / DHGT"))?;
    let map_dimension = draft.map_dimension.unwrap_or(2);
    if map_dimension != 2 || heights.2 != 0.0 {
        return Err(parse_err(
            end_line,
            ParseErrorKind::Unsupported("only 2-D single-layer maps are supported".into()),
        ));
    }
    let lat = draft.lat.ok_or_else(|| missing("LAT1 / LAT2 / DLAT"))?;
    let lon = draft.lon.ok_or_else(|| missing("LON1 / LON2 / DLON"))?;
    let grid = GridSpec::new(lat, lon, heights.0).map_err(|e| {
        parse_err(end_line, ParseErrorKind::GridMismatch(e.to_string()))
    })?;

    Ok(IonexHeader {
        version,
        file_type,
        satellite_system,
        program: draft.program.0,
        run_by: draft.program.1,
        date: draft.program.2,
        description: draft.description,
        comments: draft.comments,
        epoch_first: draft.epoch_first.ok_or_else(|| missing("EPOCH OF FIRST MAP"))?,
        epoch_last: draft.epoch_last.ok_or_else(|| missing("EPOCH OF LAST MAP"))?,
        interval: draft.interval.unwrap_or(0),
        map_count: draft.map_count.ok_or_else(|| missing("# OF MAPS IN FILE"))?,
        mapping_function: draft.mapping_function.unwrap_or_else(|| "NONE".into()),
        elevation_cutoff: draft.elevation_cutoff.unwrap_or(0.0),
        observables: draft.observables,
        station_count: draft.station_count,
        satellite_count: draft.satellite_count,
        base_radius: draft.base_radius.unwrap_or(6371.0),
        map_dimension,
        grid,
        exponent: draft.exponent.unwrap_or(-1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MapKind {
    Tec,
    Rms,
    Height,
}

impl MapKind {
    fn end_label(self) -> &'static str {
        match self {
            MapKind::Tec => "END OF TEC MAP",
            MapKind::Rms => "END OF RMS MAP",
            MapKind::Height => "END OF HEIGHT MAP",
        }
    }
}

/// Labels that may legitimately interrupt a map; data lines never carry them.
fn is_map_structure(label: &str) -> bool {
    matches!(
        label,
        "LAT/LON1/LON2/DLON/H"
            | "END OF TEC MAP"
            | "END OF RMS MAP"
            | "END OF HEIGHT MAP"
            | "START OF TEC MAP"
            | "START OF RMS MAP"
            | "START OF HEIGHT MAP"
            | "EPOCH OF CURRENT MAP"
            | "END OF FILE"
    )
}

fn parse_map(cursor: &mut Cursor<'_>, header: &IonexHeader, kind: MapKind) -> Result<TecMap, IonexError> {
    let grid = header.grid;
    let (n_lat, n_lon) = (grid.n_lat(), grid.n_lon());
    let scale = 10f64.powi(header.exponent);
    let truncated = |line: usize, what: String| parse_err(line, ParseErrorKind::Truncated(what));

    let rec = cursor.expect("EPOCH OF CURRENT MAP")?;
    if rec.label != "EPOCH OF CURRENT MAP" {
        return Err(truncated(rec.number, format!("expected EPOCH OF CURRENT MAP, found {:?}", rec.label)));
    }
    let epoch = parse_epoch(&rec)?;

    let mut values = Vec::with_capacity(n_lat * n_lon);
    for lat_index in 0..n_lat {
        let rec = cursor.expect("LAT/LON1/LON2/DLON/H")?;
        if rec.label != "LAT/LON1/LON2/DLON/H" {
            return Err(truncated(
                rec.number,
                format!("expected latitude row {} of {n_lat}, found {:?}", lat_index + 1, rec.label),
            ));
        }
        let row = [
            parse_f64(&rec, 2, 8)?,
            parse_f64(&rec, 8, 14)?,
            parse_f64(&rec, 14, 20)?,
            parse_f64(&rec, 20, 26)?,
            parse_f64(&rec, 26, 32)?,
        ];
        let expected = [grid.lat(lat_index), grid.lon_start, grid.lon_stop, grid.lon_step, grid.height];
        if row.iter().zip(&expected).any(|(a, b)| (a - b).abs() > GRID_TOLERANCE) {
            return Err(parse_err(
                rec.number,
                ParseErrorKind::GridMismatch(format!("row {row:?}, header implies {expected:?}")),
            ));
        }

        let mut remaining = n_lon;
        while remaining > 0 {
            let rec = cursor.expect("map data")?;
            if is_map_structure(rec.label) {
                return Err(truncated(
                    rec.number,
                    format!("{remaining} values short in latitude row {}, found {:?}", lat_index + 1, rec.label),
                ));
            }
            let on_line = remaining.min(VALUES_PER_LINE);
            for k in 0..on_line {
                let raw = column(rec.raw, k * FIELD_WIDTH, (k + 1) * FIELD_WIDTH).trim();
                if raw.is_empty() {
                    return Err(truncated(rec.number, format!("expected {on_line} values, found {k}")));
                }
                let raw: i64 = raw
                    .parse()
                    .map_err(|_| parse_err(rec.number, ParseErrorKind::NonNumeric(raw.to_string())))?;
                values.push(if raw == MISSING_SENTINEL { None } else { Some(raw as f64 * scale) });
            }
            let extra = column(rec.raw, on_line * FIELD_WIDTH, rec.raw.len()).trim();
            if !extra.is_empty() {
                return Err(parse_err(
                    rec.number,
                    ParseErrorKind::GridMismatch(format!("unexpected extra values {extra:?}")),
                ));
            }
            remaining -= on_line;
        }
    }

    let rec = cursor.expect(kind.end_label())?;
    if rec.label != kind.end_label() {
        return Err(truncated(rec.number, format!("expected {}, found {:?}", kind.end_label(), rec.label)));
    }
    Ok(TecMap { epoch, grid, values })
}

/// Parse a complete IONEX 1.0 document.
pub fn parse_ionex(text: &str) -> Result<IonexFile, IonexError> {
    let mut cursor = Cursor::new(text);
    let header = parse_header(&mut cursor)?;
    let mut tec_maps = Vec::new();
    let mut rms_maps = Vec::new();

    while let Some(rec) = cursor.next() {
        let kind = match rec.label {
            "START OF TEC MAP" => MapKind::Tec,
            "START OF RMS MAP" => MapKind::Rms,
            "START OF HEIGHT MAP" => MapKind::Height,
            "END OF FILE" => break,
            other => return Err(parse_err(rec.number, ParseErrorKind::MalformedLabel(other.to_string()))),
        };
        let map = parse_map(&mut cursor, &header, kind)?;
        match kind {
            MapKind::Tec => tec_maps.push(map),
            MapKind::Rms => rms_maps.push(map),
            MapKind::Height => {}
        }
    }

    if tec_maps.len() != header.map_count {
        warn!("header announces {} maps, file carries {}", header.map_count, tec_maps.len());
    }
    if let (Some(first), Some(last)) = (tec_maps.first(), tec_maps.last()) {
        if first.epoch != header.epoch_first || last.epoch != header.epoch_last {
            warn!(
                "header epochs {}..{} disagree with map epochs {}..{}",
                header.epoch_first, header.epoch_last, first.epoch, last.epoch
            );
        }
    }

    let file = IonexFile { header, tec_maps, rms_maps };
    file.validate()?;
    Ok(file)
}

// ---------------------------------------------------------------------------
// Writing

fn push_record(out: &mut String, content: &str, label: &str) {
    let content: String = content.chars().take(60).collect();
    let _ = writeln!(out, "{content:<60}{label}");
}

fn epoch_fields(epoch: &NaiveDateTime) -> String {
    format!(
        "{:>6}{:>6}{:>6}{:>6}{:>6}{:>6}",
        epoch.year(),
        epoch.month(),
        epoch.day(),
        epoch.hour(),
        epoch.minute(),
        epoch.second()
    )
}

fn scaled_value(value: f64, exponent: i32) -> Result<i64, IonexError> {
    let scaled = (value / 10f64.powi(exponent)).round();
    if !scaled.is_finite() || scaled > MAX_SCALED as f64 || scaled < -9999.0 {
        return Err(IonexError::Overflow { value, exponent });
    }
    let scaled = scaled as i64;
    if scaled == MISSING_SENTINEL {
        // Would read back as a missing cell.
        return Err(IonexError::Overflow { value, exponent });
    }
    Ok(scaled)
}

fn write_map(out: &mut String, index: usize, map: &TecMap, exponent: i32, kind: MapKind) -> Result<(), IonexError> {
    let (start, end) = match kind {
        MapKind::Tec => ("START OF TEC MAP", "END OF TEC MAP"),
        MapKind::Rms => ("START OF RMS MAP", "END OF RMS MAP"),
        MapKind::Height => ("START OF HEIGHT MAP", "END OF HEIGHT MAP"),
    };
    let grid = map.grid;
    let n_lon = grid.n_lon();
    push_record(out, &format!("{index:>6}"), start);
    push_record(out, &epoch_fields(&map.epoch), "EPOCH OF CURRENT MAP");
    for lat_index in 0..grid.n_lat() {
        push_record(
            out,
            &format!(
                "  {:>6.1}{:>6.1}{:>6.1}{:>6.1}{:>6.1}",
                grid.lat(lat_index),
                grid.lon_start,
                grid.lon_stop,
                grid.lon_step,
                grid.height
            ),
            "LAT/LON1/LON2/DLON/H",
        );
        let row = &map.values[lat_index * n_lon..(lat_index + 1) * n_lon];
        for chunk in row.chunks(VALUES_PER_LINE) {
            let mut line = String::with_capacity(VALUES_PER_LINE * FIELD_WIDTH);
            for cell in chunk {
                let raw = match cell {
                    Some(v) => scaled_value(*v, exponent)?,
                    None => MISSING_SENTINEL,
                };
                let _ = write!(line, "{raw:>5}");
            }
            out.push_str(&line);
            out.push('\n');
        }
    }
    push_record(out, &format!("{index:>6}"), end);
    Ok(())
}

/// Serialize to IONEX 1.0 text. No RMS section is written when `rms_maps` is empty.
pub fn write_ionex(file: &IonexFile) -> Result<String, IonexError> {
    file.validate()?;
    let h = &file.header;
    let mut out = String::new();
    push_record(
        &mut out,
        &format!("{:>8.1}{:12}{:<20}{:<20}", h.version, "", "IONOSPHERE MAPS", h.satellite_system),
        "IONEX VERSION / TYPE",
    );
    push_record(
        &mut out,
        &format!("{:<20}{:<20}{:<20}", h.program, h.run_by, h.date),
        "PGM / RUN BY / DATE",
    );
    for line in &h.description {
        push_record(&mut out, line, "DESCRIPTION");
    }
    for line in &h.comments {
        push_record(&mut out, line, "COMMENT");
    }
    push_record(&mut out, &epoch_fields(&h.epoch_first), "EPOCH OF FIRST MAP");
    push_record(&mut out, &epoch_fields(&h.epoch_last), "EPOCH OF LAST MAP");
    push_record(&mut out, &format!("{:>6}", h.interval), "INTERVAL");
    push_record(&mut out, &format!("{:>6}", file.tec_maps.len()), "# OF MAPS IN FILE");
    push_record(&mut out, &format!("  {:<4}", h.mapping_function), "MAPPING FUNCTION");
    push_record(&mut out, &format!("{:>8.1}", h.elevation_cutoff), "ELEVATION CUTOFF");
    push_record(&mut out, &h.observables, "OBSERVABLES USED");
    if let Some(n) = h.station_count {
        push_record(&mut out, &format!("{n:>6}"), "# OF STATIONS");
    }
    if let Some(n) = h.satellite_count {
        push_record(&mut out, &format!("{n:>6}"), "# OF SATELLITES");
    }
    push_record(&mut out, &format!("{:>8.1}", h.base_radius), "BASE RADIUS");
    push_record(&mut out, &format!("{:>6}", h.map_dimension), "MAP DIMENSION");
    let g = h.grid;
    push_record(
        &mut out,
        &format!("  {:>6.1}{:>6.1}{:>6.1}", g.height, g.height, 0.0),
        "HGT1 / HGT2 / DHGT",
    );
    push_record(
        &mut out,
        &format!("  {:>6.1}{:>6.1}{:>6.1}", g.lat_start, g.lat_stop, g.lat_step),
        "LAT1 / LAT2 / DLAT",
    );
    push_record(
        &mut out,
        &format!("  {:>6.1}{:>6.1}{:>6.1}", g.lon_start, g.lon_stop, g.lon_step),
        "LON1 / LON2 / DLON",
    );
    push_record(&mut out, &format!("{:>6}", h.exponent), "EXPONENT");
    push_record(&mut out, "", "END OF HEADER");

    for (i, map) in file.tec_maps.iter().enumerate() {
        write_map(&mut out, i + 1, map, h.exponent, MapKind::Tec)?;
    }
    for (i, map) in file.rms_maps.iter().enumerate() {
        write_map(&mut out, i + 1, map, h.exponent, MapKind::Rms)?;
    }
    push_record(&mut out, "", "END OF FILE");
    Ok(out)
}

/// Scaled integers of every TEC and RMS cell, `None` for missing cells.
pub fn scaled_integers(file: &IonexFile) -> Vec<Option<i64>> {
    let scale = 10f64.powi(file.header.exponent);
    file.tec_maps
        .iter()
        .chain(&file.rms_maps)
        .flat_map(|m| m.values.iter())
        .map(|v| v.map(|x| (x / scale).round() as i64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec::new((10.0, 0.0, -5.0), (0.0, 20.0, 5.0), 450.0).unwrap()
    }

    fn t0() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2009, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    fn small_file(values: Vec<Option<f64>>) -> IonexFile {
        let grid = small_grid();
        let map = TecMap::new(t0(), grid, values).unwrap();
        let header = IonexHeader::for_maps(grid, &[t0()], -1);
        IonexFile {
            header,
            tec_maps: vec![map],
            rms_maps: vec![],
        }
    }

    #[test]
    fn igs_grid_counts() {
        let g = GridSpec::igs();
        assert_eq!(g.n_lat(), 71);
        assert_eq!(g.n_lon(), 73);
        assert_eq!(g.len() * 12, 62196);
        assert_eq!(g.lat(70), -87.5);
        assert_eq!(g.lon(72), 180.0);
    }

    #[test]
    fn grid_rejects_fractional_steps() {
        assert!(GridSpec::new((10.0, 0.0, -3.0), (0.0, 20.0, 5.0), 450.0).is_err());
        assert!(GridSpec::new((10.0, 0.0, 5.0), (0.0, 20.0, 5.0), 450.0).is_err());
        assert!(GridSpec::new((10.0, 10.0, -5.0), (0.0, 20.0, 5.0), 450.0).is_err());
        assert!(GridSpec::new((10.0, 0.0, 0.0), (0.0, 20.0, 5.0), 450.0).is_err());
    }

    #[test]
    fn raw_85_with_exponent_minus_one_is_8_5_tecu() {
        let mut values = vec![Some(1.0); 15];
        values[0] = Some(8.5);
        let text = write_ionex(&small_file(values)).unwrap();
        // First data line follows the first LAT/LON1 record.
        let data_line = text
            .lines()
            .skip_while(|l| !l.ends_with("LAT/LON1/LON2/DLON/H"))
            .nth(1)
            .unwrap();
        assert_eq!(&data_line[0..5], "   85");
        let parsed = parse_ionex(&text).unwrap();
        assert_eq!(parsed.tec_maps[0].get(0, 0).unwrap(), Some(8.5));
    }

    #[test]
    fn sentinel_becomes_missing() {
        let mut values = vec![Some(2.0); 15];
        values[7] = None;
        let text = write_ionex(&small_file(values)).unwrap();
        assert!(text.contains(" 9999"));
        let parsed = parse_ionex(&text).unwrap();
        assert_eq!(parsed.tec_maps[0].get(1, 2).unwrap(), None);
        assert_eq!(parsed.tec_maps[0].present_count(), 14);
    }

    #[test]
    fn full_data_lines_span_the_label_columns() {
        let grid = GridSpec::new((5.0, 0.0, -5.0), (-180.0, 180.0, 5.0), 450.0).unwrap();
        let values = (0..grid.len()).map(|k| Some((k % 400) as f64 * 0.1)).collect();
        let file = IonexFile {
            header: IonexHeader::for_maps(grid, &[t0()], -1),
            tec_maps: vec![TecMap::new(t0(), grid, values).unwrap()],
            rms_maps: vec![],
        };
        let text = write_ionex(&file).unwrap();
        assert!(text.lines().any(|l| l.len() == 80 && !l.contains("MAP") && !l.contains('/')));
        assert_eq!(parse_ionex(&text).unwrap(), file);
    }

    #[test]
    fn no_rms_section_when_empty() {
        let text = write_ionex(&small_file(vec![Some(1.0); 15])).unwrap();
        assert!(!text.contains("RMS MAP"));
        assert!(text.trim_end().ends_with("END OF FILE"));
    }

    #[test]
    fn overflow_reported() {
        let mut values = vec![Some(1.0); 15];
        values[3] = Some(10_000.0);
        assert!(matches!(
            write_ionex(&small_file(values)),
            Err(IonexError::Overflow { .. })
        ));
    }

    #[test]
    fn grid_value_corners_and_range() {
        let values: Vec<Option<f64>> = (0..15).map(|v| Some(v as f64)).collect();
        let file = small_file(values);
        let map = &file.tec_maps[0];
        assert_eq!(grid_value(map, 0, 0).unwrap(), Some(0.0));
        assert_eq!(grid_value(map, 2, 4).unwrap(), Some(14.0));
        assert!(matches!(grid_value(map, 3, 0), Err(IonexError::IndexOutOfRange { .. })));
        assert!(matches!(grid_value(map, 0, 5), Err(IonexError::IndexOutOfRange { .. })));
    }

    #[test]
    fn bilinear_cases() {
        let grid = small_grid();
        let constant = TecMap::filled(t0(), grid, 1.0);
        assert!((interpolate_bilinear(&constant, 7.5, 2.5).unwrap() - 1.0).abs() < 1e-12);

        // Rows 10° and 5°: 0 and 10.
        let mut ramp = TecMap::filled(t0(), grid, 0.0);
        for j in 0..5 {
            ramp.set(1, j, Some(10.0)).unwrap();
            ramp.set(2, j, Some(20.0)).unwrap();
        }
        assert!((interpolate_bilinear(&ramp, 7.5, 2.5).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(interpolate_bilinear(&ramp, 5.0, 10.0).unwrap(), 10.0);
        assert_eq!(interpolate_bilinear(&ramp, 0.0, 20.0).unwrap(), 20.0);

        assert!(matches!(
            interpolate_bilinear(&ramp, 11.0, 2.0),
            Err(IonexError::OutOfBounds { .. })
        ));
        ramp.set(0, 1, None).unwrap();
        assert!(matches!(
            interpolate_bilinear(&ramp, 7.5, 2.5),
            Err(IonexError::MissingNode { .. })
        ));
        // On-node query ignores zero-weight neighbours.
        assert_eq!(interpolate_bilinear(&ramp, 5.0, 5.0).unwrap(), 10.0);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = write_ionex(&small_file(vec![Some(1.0); 15])).unwrap();

        let bad_label = text.replacen("MAPPING FUNCTION", "MAPPING FUNCTON ", 1);
        match parse_ionex(&bad_label) {
            Err(IonexError::Parse { line, kind: ParseErrorKind::MalformedLabel(_) }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }

        let non_numeric = text.replacen("   10   10", "   1x   10", 1);
        assert!(matches!(
            parse_ionex(&non_numeric),
            Err(IonexError::Parse { kind: ParseErrorKind::NonNumeric(_), .. })
        ));

        let bad_grid = text.replacen("     5.0   0.0  20.0   5.0 450.0", "     5.0   0.0  25.0   5.0 450.0", 1);
        assert!(matches!(
            parse_ionex(&bad_grid),
            Err(IonexError::Parse { kind: ParseErrorKind::GridMismatch(_), .. })
        ));

        let cut: String = text.lines().take(22).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            parse_ionex(&cut),
            Err(IonexError::Parse { kind: ParseErrorKind::Truncated(_), .. })
        ));
    }

    #[test]
    fn hour_24_epoch_rolls_to_next_day() {
        let rec = split_record(1, "  2009     1     1    24     0     0                        EPOCH OF CURRENT MAP");
        let epoch = parse_epoch(&rec).unwrap();
        assert_eq!(epoch, t0() + Duration::days(1));
    }

    #[test]
    fn rms_maps_must_pair_with_tec_maps() {
        let mut file = small_file(vec![Some(1.0); 15]);
        let mut rms = file.tec_maps[0].clone();
        rms.epoch += Duration::hours(2);
        file.rms_maps.push(rms);
        assert!(matches!(write_ionex(&file), Err(IonexError::Invalid(_))));
    }
}
