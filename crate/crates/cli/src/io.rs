//! CSV schemas, validating readers and fixed-precision writers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lidarmc_core::dynamics::Label;
use lidarmc_core::{ImuSample, LidarPoint, Vec3};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::CliError;

pub const POINTS_HEADER: &[&str] = &["t", "x", "y", "z", "channel"];
pub const IMU_HEADER: &[&str] = &["t", "ax", "ay", "az", "wx", "wy", "wz"];
pub const CORRECTED_HEADER: &[&str] = &["t", "x", "y", "z", "channel", "window_id"];
pub const LABELLED_HEADER: &[&str] = &["t", "x", "y", "z", "score", "label"];
pub const TRUTH_HEADER: &[&str] = &["t", "x", "y", "z", "score", "label", "body_id"];

/// Timestamps keep nanosecond resolution.
pub fn fmt_time(t: f64) -> String {
    format!("{t:.9}")
}

/// Nine significant digits, trailing zeros trimmed.
pub fn fmt_value(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..9).contains(&magnitude) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct PointRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub channel: u32,
}

impl PointRow {
    pub fn point(&self) -> LidarPoint {
        LidarPoint { t: self.t, position: Vec3::new(self.x, self.y, self.z), channel: self.channel }
    }

    fn finite(&self) -> bool {
        [self.t, self.x, self.y, self.z].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct ImuRow {
    pub t: f64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
}

impl ImuRow {
    pub fn sample(&self) -> ImuSample {
        ImuSample { t: self.t, accel: Vec3::new(self.ax, self.ay, self.az), gyro: Vec3::new(self.wx, self.wy, self.wz) }
    }

    fn finite(&self) -> bool {
        [self.t, self.ax, self.ay, self.az, self.wx, self.wy, self.wz].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct CorrectedRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub channel: u32,
    pub window_id: usize,
}

impl CorrectedRow {
    pub fn position(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    fn finite(&self) -> bool {
        [self.t, self.x, self.y, self.z].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct LabelledRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub score: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, Deserialize)]
pub struct TruthRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub score: f64,
    pub label: Label,
    pub body_id: usize,
}

/// Rows of a CSV file with an exact header, paired with their line numbers.
pub struct CsvRows<T> {
    path: PathBuf,
    reader: csv::Reader<File>,
    record: csv::StringRecord,
    headers: csv::StringRecord,
    _row: std::marker::PhantomData<T>,
}

impl<T: DeserializeOwned> CsvRows<T> {
    pub fn open(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader.headers().map_err(|e| CliError::data(path, 1, e.to_string()))?.clone();
        if headers.iter().ne(header.iter().copied()) {
            let found: Vec<&str> = headers.iter().collect();
            return Err(CliError::data(path, 1, format!("expected header `{}`, found `{}`", header.join(","), found.join(","))));
        }
        Ok(Self { path: path.to_path_buf(), reader, record: csv::StringRecord::new(), headers, _row: std::marker::PhantomData })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl<T: DeserializeOwned> Iterator for CsvRows<T> {
    type Item = Result<(u64, T), CliError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.reader.read_record(&mut self.record) {
            Ok(false) => None,
            Ok(true) => {
                let line = self.record.position().map_or(0, |p| p.line());
                Some(
                    self.record
                        .deserialize(Some(&self.headers))
                        .map(|row| (line, row))
                        .map_err(|e| CliError::data(&self.path, line, e.to_string())),
                )
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Some(Err(CliError::data(&self.path, line, e.to_string())))
            }
        }
    }
}

/// First error raised by a fallible stream adapted for an infallible consumer.
#[derive(Debug, Clone, Default)]
pub struct ErrorSlot(Arc<Mutex<Option<CliError>>>);

impl ErrorSlot {
    fn set(&self, e: CliError) {
        let mut slot = self.0.lock().expect("error slot poisoned");
        slot.get_or_insert(e);
    }

    pub fn take(&self) -> Option<CliError> {
        self.0.lock().expect("error slot poisoned").take()
    }
}

/// Stops at the first error, recording it in `slot`.
pub fn until_error<T>(rows: impl Iterator<Item = Result<(u64, T), CliError>>, slot: ErrorSlot) -> impl Iterator<Item = T> {
    rows.map_while(move |r| match r {
        Ok((_, row)) => Some(row),
        Err(e) => {
            slot.set(e);
            None
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointsSummary {
    pub rows: usize,
    /// Rows are also ordered across channels.
    pub globally_ordered: bool,
}

/// Checks values are finite and each channel's timestamps strictly increase.
pub fn validate_points(path: &Path) -> Result<PointsSummary, CliError> {
    let mut last_by_channel: HashMap<u32, f64> = HashMap::new();
    let mut last = f64::NEG_INFINITY;
    let mut summary = PointsSummary { rows: 0, globally_ordered: true };
    for row in CsvRows::<PointRow>::open(path, POINTS_HEADER)? {
        let (line, row) = row?;
        if !row.finite() {
            return Err(CliError::data(path, line, "non-finite value"));
        }
        let prev = last_by_channel.entry(row.channel).or_insert(f64::NEG_INFINITY);
        if !(row.t > *prev) {
            return Err(CliError::data(path, line, format!("channel {} time {} does not increase", row.channel, row.t)));
        }
        *prev = row.t;
        summary.globally_ordered &= row.t >= last;
        last = row.t;
        summary.rows += 1;
    }
    Ok(summary)
}

/// Checks values are finite and timestamps strictly increase.
pub fn validate_imu(path: &Path) -> Result<usize, CliError> {
    let mut last = f64::NEG_INFINITY;
    let mut rows = 0;
    for row in CsvRows::<ImuRow>::open(path, IMU_HEADER)? {
        let (line, row) = row?;
        if !row.finite() {
            return Err(CliError::data(path, line, "non-finite value"));
        }
        if !(row.t > last) {
            return Err(CliError::data(path, line, format!("time {} does not increase", row.t)));
        }
        last = row.t;
        rows += 1;
    }
    Ok(rows)
}

/// Checks values are finite and window ids never decrease.
pub fn validate_corrected(path: &Path) -> Result<usize, CliError> {
    let mut last_window = 0;
    let mut rows = 0;
    for row in CsvRows::<CorrectedRow>::open(path, CORRECTED_HEADER)? {
        let (line, row) = row?;
        if !row.finite() {
            return Err(CliError::data(path, line, "non-finite value"));
        }
        if row.window_id < last_window {
            return Err(CliError::data(path, line, format!("window_id {} after {last_window}", row.window_id)));
        }
        last_window = row.window_id;
        rows += 1;
    }
    Ok(rows)
}

pub fn read_all<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<(u64, T)>, CliError> {
    CsvRows::open(path, header)?.collect()
}

/// Buffered writer of one CSV file.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file) };
        w.line(&header.join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.out, "{s}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn point(&mut self, p: &LidarPoint) -> Result<(), CliError> {
        let v = &p.position;
        self.line(&format!("{},{},{},{},{}", fmt_time(p.t), fmt_value(v.x), fmt_value(v.y), fmt_value(v.z), p.channel))
    }

    pub fn imu(&mut self, s: &ImuSample) -> Result<(), CliError> {
        let (a, w) = (&s.accel, &s.gyro);
        let values = [a.x, a.y, a.z, w.x, w.y, w.z].map(fmt_value);
        self.line(&format!("{},{}", fmt_time(s.t), values.join(",")))
    }

    pub fn corrected(&mut self, t: f64, p: &Vec3, channel: u32, window_id: usize) -> Result<(), CliError> {
        self.line(&format!("{},{},{},{},{channel},{window_id}", fmt_time(t), fmt_value(p.x), fmt_value(p.y), fmt_value(p.z)))
    }

    pub fn labelled(&mut self, t: f64, p: &Vec3, score: Option<f64>, label: Label) -> Result<(), CliError> {
        let score = score.map_or_else(|| "nan".into(), fmt_value);
        self.line(&format!("{},{},{},{},{score},{}", fmt_time(t), fmt_value(p.x), fmt_value(p.y), fmt_value(p.z), label.as_str()))
    }

    pub fn truth(&mut self, t: f64, p: &Vec3, dynamic: bool, body: usize) -> Result<(), CliError> {
        let (score, label) = if dynamic { ("1", Label::Dynamic) } else { ("0", Label::Static) };
        let (x, y, z) = (fmt_value(p.x), fmt_value(p.y), fmt_value(p.z));
        self.line(&format!("{},{x},{y},{z},{score},{},{body}", fmt_time(t), label.as_str()))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}
