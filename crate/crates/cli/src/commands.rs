use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use lidarmc_core::dynamics::{classify, Label, SpacetimePoint};
use lidarmc_core::evaluation::{classification_metrics, mean_best_distance, ClassificationMetrics, Metric};
use lidarmc_core::pipeline::{run_streaming, SkipReason, WindowOutcome};
use lidarmc_core::simulator::{synth_imu, synth_sweep};
use lidarmc_core::{LidarPoint, Vec3};
use serde::Serialize;

use crate::config::{load_scene, load_sensors, load_trajectory, RunConfig};
use crate::error::{CliError, Completion};
use crate::io::{self, CorrectedRow, CsvRows, CsvWriter, ErrorSlot, ImuRow, LabelledRow, PointRow, TruthRow};

pub const POINTS_FILE: &str = "points.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const CORRECTED_FILE: &str = "corrected.csv";
pub const STATES_FILE: &str = "states.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::io(path, e.into()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

/// Synthesises `points.csv`, `imu.csv` and `truth.csv` over `[0, duration)`.
///
/// Truth rows carry the noise-free lidar-frame position of each return.
pub fn simulate(scene: &Path, trajectory: &Path, sensors: &Path, out_dir: &Path, seed: u64) -> Result<Completion, CliError> {
    let scene = load_scene(scene)?;
    let traj = load_trajectory(trajectory)?;
    let sensors = load_sensors(sensors)?;
    let sim = synth_sweep(&traj, &scene, &sensors.lidar, 0.0, traj.duration, seed);
    let imu = synth_imu(&traj, &sensors.imu, 0.0, traj.duration, seed);
    create_dir(out_dir)?;

    let mut points = CsvWriter::create(&out_dir.join(POINTS_FILE), io::POINTS_HEADER)?;
    let mut truth = CsvWriter::create(&out_dir.join(TRUTH_FILE), io::TRUTH_HEADER)?;
    let extrinsic = sensors.lidar.extrinsic.to_transform();
    for s in &sim {
        points.point(&s.point)?;
        let lidar_from_world = (traj.pose(s.point.t) * extrinsic).inverse();
        truth.truth(s.point.t, &lidar_from_world.transform_point(&s.world), s.dynamic, s.body)?;
    }
    points.finish()?;
    truth.finish()?;

    let mut imu_out = CsvWriter::create(&out_dir.join(IMU_FILE), io::IMU_HEADER)?;
    for s in &imu {
        imu_out.imu(s)?;
    }
    imu_out.finish()?;
    log::info!("simulated {} points and {} IMU samples", sim.len(), imu.len());
    Ok(Completion::Full)
}

#[derive(Debug, Serialize)]
struct StateRecord {
    accel_bias: [f64; 3],
    gyro_bias: [f64; 3],
    velocity: [f64; 3],
    gravity_angles: [f64; 2],
    gravity: [f64; 3],
}

#[derive(Debug, Serialize)]
struct IterationRecord {
    edge_associations: usize,
    planar_associations: usize,
    residuals: usize,
    lm_iterations: usize,
    frozen_directions: usize,
    cost_trace: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct WindowRecord {
    window_id: usize,
    t_f0: f64,
    t_f1: f64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<SkipReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    state: Option<StateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cold_start: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_cost: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_abs_residual: Option<f64>,
    points: usize,
    outer_iterations: Vec<IterationRecord>,
}

fn array3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn window_record(outcome: &WindowOutcome) -> WindowRecord {
    match outcome {
        WindowOutcome::Corrected(c) => WindowRecord {
            window_id: c.window_id,
            t_f0: c.window.t_f0,
            t_f1: c.window.t_f1,
            status: "corrected",
            reason: None,
            state: Some(StateRecord {
                accel_bias: array3(&c.state.accel_bias),
                gyro_bias: array3(&c.state.gyro_bias),
                velocity: array3(&c.state.velocity),
                gravity_angles: c.state.gravity.angles(),
                gravity: array3(&c.state.gravity_vector()),
            }),
            cold_start: Some(c.cold_start),
            converged: Some(c.report.converged),
            final_cost: Some(c.report.final_cost),
            residual_count: Some(c.report.residual_count),
            mean_abs_residual: Some(c.report.mean_abs_residual),
            points: c.points.len(),
            outer_iterations: c
                .report
                .outer
                .iter()
                .map(|o| IterationRecord {
                    edge_associations: o.edge_associations,
                    planar_associations: o.planar_associations,
                    residuals: o.residuals,
                    lm_iterations: o.lm.iterations,
                    frozen_directions: o.lm.frozen_directions,
                    cost_trace: std::iter::once(o.lm.initial_cost).chain(o.lm.cost_trace.iter().copied()).collect(),
                })
                .collect(),
        },
        WindowOutcome::Skipped(s) => WindowRecord {
            window_id: s.window_id,
            t_f0: s.window.t_f0,
            t_f1: s.window.t_f1,
            status: "skipped",
            reason: Some(s.reason.clone()),
            state: None,
            cold_start: None,
            converged: None,
            final_cost: None,
            residual_count: None,
            mean_abs_residual: None,
            points: 0,
            outer_iterations: Vec::new(),
        },
    }
}

/// Motion-corrects `points` with `imu`, writing `corrected.csv` and `states.json`.
pub fn undistort(points: &Path, imu: &Path, config: Option<&Path>, out_dir: &Path) -> Result<Completion, CliError> {
    let config = RunConfig::load_or_default(config)?;
    let summary = io::validate_points(points)?;
    io::validate_imu(imu)?;
    create_dir(out_dir)?;
    let corrected_path = out_dir.join(CORRECTED_FILE);
    let mut writer = CsvWriter::create(&corrected_path, io::CORRECTED_HEADER)?;

    let slot = ErrorSlot::default();
    let point_stream: Box<dyn Iterator<Item = LidarPoint> + Send> = if summary.globally_ordered {
        Box::new(io::until_error(CsvRows::<PointRow>::open(points, io::POINTS_HEADER)?, slot.clone()).map(|r| r.point()))
    } else {
        log::info!("{} is ordered per channel only; sorting in memory", points.display());
        let mut all: Vec<LidarPoint> =
            io::read_all::<PointRow>(points, io::POINTS_HEADER)?.into_iter().map(|(_, r)| r.point()).collect();
        all.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.channel.cmp(&b.channel)));
        Box::new(all.into_iter())
    };
    let imu_stream = io::until_error(CsvRows::<ImuRow>::open(imu, io::IMU_HEADER)?, slot.clone()).map(|r| r.sample());

    let mut records = Vec::new();
    let mut write_error = None;
    let mut skipped = 0;
    run_streaming(point_stream, imu_stream, &config.pipeline, |outcome| {
        match &outcome {
            WindowOutcome::Corrected(c) => {
                for p in &c.points {
                    if let Err(e) = writer.corrected(p.t, &p.position, p.channel, c.window_id) {
                        write_error.get_or_insert(e);
                    }
                }
            }
            WindowOutcome::Skipped(s) => {
                skipped += 1;
                log::warn!("window {} [{:.6}, {:.6}) skipped: {}", s.window_id, s.window.t_f0, s.window.t_f1, s.reason);
            }
        }
        records.push(window_record(&outcome));
    })
    .map_err(|e| CliError::Invalid(e.to_string()))?;
    if let Some(e) = slot.take().or(write_error) {
        return Err(e);
    }
    writer.finish()?;
    write_json(&out_dir.join(STATES_FILE), &records)?;
    log::info!("{} windows, {skipped} skipped", records.len());
    Ok(if skipped > 0 { Completion::Partial } else { Completion::Full })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TimeKey(f64);

impl Eq for TimeKey {}

impl PartialOrd for TimeKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    centre_distance: f64,
    position: Vec3,
    score: Option<f64>,
    label: Label,
}

fn flush_before(pending: &mut BTreeMap<TimeKey, Candidate>, t: Option<f64>, out: &mut CsvWriter) -> Result<(), CliError> {
    let rest = match t {
        Some(t) => pending.split_off(&TimeKey(t)),
        None => BTreeMap::new(),
    };
    for (k, c) in std::mem::replace(pending, rest) {
        out.labelled(k.0, &c.position, c.score, c.label)?;
    }
    Ok(())
}

fn classify_group(rows: &[CorrectedRow], config: &RunConfig, pending: &mut BTreeMap<TimeKey, Candidate>) {
    let t0 = rows.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let t1 = rows.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
    let centre = 0.5 * (t0 + t1);
    let points: Vec<SpacetimePoint> = rows.iter().map(|r| SpacetimePoint::new(r.position(), r.t - t0)).collect();
    for (row, l) in rows.iter().zip(classify(&points, &config.dynamics)) {
        let candidate = Candidate { centre_distance: (row.t - centre).abs(), position: row.position(), score: l.score, label: l.label };
        pending
            .entry(TimeKey(row.t))
            .and_modify(|c| {
                if candidate.centre_distance < c.centre_distance {
                    *c = candidate;
                }
            })
            .or_insert(candidate);
    }
}

/// Labels corrected points window by window, writing a time-ordered labelled CSV.
///
/// A point present in several windows keeps the label from the window whose
/// time centre is nearest.
pub fn detect(corrected: &Path, config: Option<&Path>, out: &Path) -> Result<Completion, CliError> {
    let config = RunConfig::load_or_default(config)?;
    io::validate_corrected(corrected)?;
    let mut writer = CsvWriter::create(out, io::LABELLED_HEADER)?;
    let mut pending = BTreeMap::new();
    let mut group: Vec<CorrectedRow> = Vec::new();
    let mut windows = 0;
    for row in CsvRows::<CorrectedRow>::open(corrected, io::CORRECTED_HEADER)? {
        let (_, row) = row?;
        if group.first().is_some_and(|g| g.window_id != row.window_id) {
            classify_group(&group, &config, &mut pending);
            windows += 1;
            group.clear();
        }
        if group.is_empty() {
            flush_before(&mut pending, Some(row.t), &mut writer)?;
        }
        group.push(row);
    }
    if !group.is_empty() {
        classify_group(&group, &config, &mut pending);
        windows += 1;
    }
    flush_before(&mut pending, None, &mut writer)?;
    writer.finish()?;
    log::info!("classified {windows} windows");
    Ok(Completion::Full)
}

#[derive(Debug, Serialize)]
pub struct LabelReport {
    pub mode: &'static str,
    pub range_gate: f64,
    pub matched: usize,
    /// Truth rows without a prediction.
    pub unmatched_truth: usize,
    pub metrics: ClassificationMetrics,
}

#[derive(Debug, Serialize)]
pub struct MapReport {
    pub mode: &'static str,
    pub fraction: f64,
    pub points: usize,
    pub reference_points: usize,
    pub mean_best_distance: f64,
}

fn metric_cell(m: Metric) -> String {
    m.value().map_or_else(|| "undefined".into(), |v| format!("{v:.4}"))
}

impl LabelReport {
    pub fn table(&self) -> String {
        let m = &self.metrics;
        let c = m.counts;
        let mut s = format!("{:<20}{:>12}\n", "metric", "value");
        for (name, v) in [
            ("iou", metric_cell(m.iou)),
            ("recall", metric_cell(m.recall)),
            ("precision", metric_cell(m.precision)),
            ("accuracy", metric_cell(m.accuracy)),
            ("f1", metric_cell(m.f1)),
            ("false_positive_rate", metric_cell(m.false_positive_rate)),
            ("tp", c.tp.to_string()),
            ("fp", c.fp.to_string()),
            ("fn", c.fn_.to_string()),
            ("tn", c.tn.to_string()),
            ("excluded", m.excluded.to_string()),
            ("unmatched_truth", self.unmatched_truth.to_string()),
        ] {
            s.push_str(&format!("{name:<20}{v:>12}\n"));
        }
        s
    }
}

impl MapReport {
    pub fn table(&self) -> String {
        format!(
            "{:<20}{:>12}\n{:<20}{:>12.6}\n{:<20}{:>12}\n{:<20}{:>12}\n",
            "metric", "value", "mean_best_distance", self.mean_best_distance, "points", self.points, "reference_points", self.reference_points
        )
    }
}

/// Scores predicted labels against simulator truth, joined on timestamp.
/// The range gate uses the truth position's distance from the lidar.
pub fn evaluate_labels(predicted: &Path, truth: &Path, config: Option<&Path>, out: &Path) -> Result<LabelReport, CliError> {
    let config = RunConfig::load_or_default(config)?;
    let truth_rows: Vec<(u64, TruthRow)> = io::read_all(truth, io::TRUTH_HEADER)?;
    let mut by_time: BTreeMap<TimeKey, TruthRow> = BTreeMap::new();
    for (line, r) in truth_rows {
        if by_time.insert(TimeKey(r.t), r).is_some() {
            return Err(CliError::data(truth, line, format!("duplicate time {}", r.t)));
        }
    }
    let (mut labels, mut dynamic, mut ranges) = (Vec::new(), Vec::new(), Vec::new());
    for row in CsvRows::<LabelledRow>::open(predicted, io::LABELLED_HEADER)? {
        let (line, p) = row?;
        let Some(t) = by_time.get(&TimeKey(p.t)) else {
            return Err(CliError::data(predicted, line, format!("no truth row at time {}", p.t)));
        };
        labels.push(p.label);
        dynamic.push(t.label == Label::Dynamic);
        ranges.push(Vec3::new(t.x, t.y, t.z).norm());
    }
    let gate = config.evaluation.range_gate;
    let metrics = classification_metrics(&labels, &dynamic, &ranges, gate).map_err(|e| CliError::Invalid(e.to_string()))?;
    let report = LabelReport { mode: "labels", range_gate: gate, matched: labels.len(), unmatched_truth: by_time.len() - labels.len(), metrics };
    write_json(out, &report)?;
    Ok(report)
}

/// Positions from any CSV whose header starts with `t,x,y,z`.
pub fn read_positions(path: &Path) -> Result<Vec<(f64, Vec3)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| CliError::data(path, 1, e.to_string()))?.clone();
    if headers.len() < 4 || headers.iter().take(4).ne(["t", "x", "y", "z"]) {
        return Err(CliError::data(path, 1, "header must start with `t,x,y,z`"));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::data(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut v = [0.0; 4];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = record[i].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                CliError::data(path, line, format!("column {}: invalid number `{}`", headers[i].to_string(), &record[i]))
            })?;
        }
        out.push((v[0], Vec3::new(v[1], v[2], v[3])));
    }
    Ok(out)
}

/// Mean distance of the best-matching fraction of `cloud` to `reference`.
pub fn evaluate_map(cloud: &Path, reference: &Path, config: Option<&Path>, out: &Path) -> Result<MapReport, CliError> {
    let config = RunConfig::load_or_default(config)?;
    let cloud: Vec<Vec3> = read_positions(cloud)?.into_iter().map(|(_, p)| p).collect();
    let reference: Vec<Vec3> = read_positions(reference)?.into_iter().map(|(_, p)| p).collect();
    let fraction = config.evaluation.best_fraction;
    let distance = mean_best_distance(&cloud, &reference, fraction).map_err(|e| CliError::Invalid(e.to_string()))?;
    let report = MapReport { mode: "map", fraction, points: cloud.len(), reference_points: reference.len(), mean_best_distance: distance };
    write_json(out, &report)?;
    Ok(report)
}

/// ASCII PLY with double `x y z t` vertex properties.
pub fn export_ply(input: &Path, out: &Path) -> Result<Completion, CliError> {
    let points = read_positions(input)?;
    let file = File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut w = BufWriter::new(file);
    let result = (|| {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
        writeln!(w, "property double x\nproperty double y\nproperty double z\nproperty double t\nend_header")?;
        for (t, p) in &points {
            writeln!(w, "{} {} {} {}", io::fmt_value(p.x), io::fmt_value(p.y), io::fmt_value(p.z), io::fmt_time(*t))?;
        }
        w.flush()
    })();
    result.map_err(|e| CliError::io(out, e))?;
    Ok(Completion::Full)
}

/// Reads an ASCII PLY with `x`, `y`, `z` and optional `t` and `channel`
/// vertex properties into a points CSV.
pub fn import_ply(input: &Path, out: &Path) -> Result<Completion, CliError> {
    let file = File::open(input).map_err(|e| CliError::io(input, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut line_no = 0u64;
    let mut next_line = |line_no: &mut u64| -> Result<Option<String>, CliError> {
        *line_no += 1;
        lines.next().transpose().map_err(|e| CliError::io(input, e))
    };
    let bad = |line: u64, m: &str| CliError::data(input, line, m.to_string());

    if next_line(&mut line_no)?.as_deref().map(str::trim) != Some("ply") {
        return Err(bad(1, "missing `ply` magic"));
    }
    let mut vertices = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let Some(l) = next_line(&mut line_no)? else { return Err(bad(line_no, "missing end_header")) };
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(bad(line_no, "only ascii PLY is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertices = Some(n.parse::<usize>().map_err(|_| bad(line_no, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] if in_vertex => return Err(bad(line_no, "list properties on vertices are not supported")),
            ["property", _, name] if in_vertex => properties.push(name.to_string()),
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(bad(line_no, "unrecognised header line")),
        }
    }
    let n = vertices.ok_or_else(|| bad(line_no, "no vertex element"))?;
    let column = |name: &str| properties.iter().position(|p| p == name);
    let (Some(ix), Some(iy), Some(iz)) = (column("x"), column("y"), column("z")) else {
        return Err(bad(line_no, "vertex needs x, y and z properties"));
    };
    let (it, ic) = (column("t"), column("channel"));

    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let Some(l) = next_line(&mut line_no)? else { return Err(bad(line_no, "fewer vertices than declared")) };
        let values: Vec<f64> = l.split_whitespace().map(|w| w.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad(line_no, "bad number"))?;
        if values.len() != properties.len() {
            return Err(bad(line_no, "wrong number of vertex values"));
        }
        points.push(LidarPoint {
            t: it.map_or(0.0, |i| values[i]),
            position: Vec3::new(values[ix], values[iy], values[iz]),
            channel: ic.map_or(0, |i| values[i] as u32),
        });
    }
    let mut w = CsvWriter::create(out, io::POINTS_HEADER)?;
    for p in &points {
        w.point(p)?;
    }
    w.finish()?;
    Ok(Completion::Full)
}
