//! Sliding-window motion correction: windows of `K` segments advance one
//! segment at a time, each solved from the previous window's propagated
//! state, and every raw point of a solved window is re-expressed in the IMU
//! frame at the window start.

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{AssociationParams, Window};
use crate::features::{extract_features_salted, FeatureParams, FeaturePoint, LidarPoint};
use crate::geom::{RigidTransform, TransformSpec, Vec3};
use crate::preintegration::{correct_bias, preintegrate, ImuSample, PreintegrationError, PreintegrationGrid, COVERAGE_SLACK};
use crate::simulator::stable_hash;
use crate::solver::{SolveReport, SolverError, SolverParams, WindowProblem, WindowState};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// s.
    pub window_length: f64,
    /// s.
    pub segment_length: f64,
    /// Preintegration grid rate (Hz).
    pub preint_rate: f64,
    /// Lidar-to-IMU transform.
    pub extrinsic: TransformSpec,
    /// Emit every point of every window instead of once per point.
    pub emit_all_window_points: bool,
    /// A gap between IMU samples longer than this many nominal periods skips the window.
    pub max_imu_gap_periods: f64,
    /// Windows buffered between the reader and the solver.
    pub queue_capacity: usize,
    pub features: FeatureParams,
    pub association: AssociationParams,
    pub solver: SolverParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_length: 0.45,
            segment_length: 0.15,
            preint_rate: 1000.0,
            extrinsic: TransformSpec { rotation: [0.0; 3], translation: [0.0; 3] },
            emit_all_window_points: false,
            max_imu_gap_periods: 2.0,
            queue_capacity: 2,
            features: FeatureParams::default(),
            association: AssociationParams::default(),
            solver: SolverParams::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stream} timestamps decrease at record {index}")]
    NonMonotonic { stream: &'static str, index: usize },
    #[error("non-finite {stream} record {index}")]
    NonFinite { stream: &'static str, index: usize },
}

impl PipelineConfig {
    /// Segments per window.
    pub fn segments(&self) -> usize {
        (self.window_length / self.segment_length).round() as usize
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if !(self.window_length > 0.0) || !(self.segment_length > 0.0) {
            return err("window_length and segment_length must be > 0".into());
        }
        let k = self.segments();
        if (k as f64 * self.segment_length - self.window_length).abs() > 1e-9 * self.window_length.max(1.0) {
            return err(format!(
                "window_length {} is not an integer multiple of segment_length {}",
                self.window_length, self.segment_length
            ));
        }
        if k < 2 {
            return err("a window needs at least 2 segments".into());
        }
        if !(self.preint_rate > 0.0) || !(self.max_imu_gap_periods >= 1.0) || self.queue_capacity == 0 {
            return err("preint_rate > 0, max_imu_gap_periods >= 1 and queue_capacity >= 1 required".into());
        }
        self.features.validate().map_err(PipelineError::Config)?;
        self.solver.validate().map_err(PipelineError::Config)?;
        if !(self.association.gate > 0.0) || self.association.kd_leaf_size == 0 {
            return err("association gate must be > 0 and kd_leaf_size >= 1".into());
        }
        Ok(())
    }

    pub fn extrinsic(&self) -> RigidTransform {
        self.extrinsic.to_transform()
    }
}

/// Window start times for data spanning `[t_start, t_end]`.
pub fn schedule(t_start: f64, t_end: f64, config: &PipelineConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t_f0 = t_start + k as f64 * config.segment_length;
        if t_f0 + config.window_length > t_end + TIME_EPS {
            break;
        }
        out.push(t_f0);
        k += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedPoint {
    pub t: f64,
    /// IMU frame at the window start.
    pub position: Vec3,
    pub channel: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedCloud {
    pub window_id: usize,
    pub window: Window,
    pub points: Vec<CorrectedPoint>,
    pub state: WindowState,
    pub report: SolveReport,
    /// True when the solve started from the cold initialisation.
    pub cold_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkipReason {
    ImuGap { at: f64, gap: f64 },
    ImuCoverage { message: String },
    UnderConstrained { residuals: usize, required: usize },
    Solver { message: String },
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::ImuGap { at, gap } => write!(f, "IMU gap of {gap:.6} s at t = {at:.6}"),
            SkipReason::ImuCoverage { message } => write!(f, "{message}"),
            SkipReason::UnderConstrained { residuals, required } => {
                write!(f, "under-constrained: {residuals} residuals, {required} required")
            }
            SkipReason::Solver { message } => write!(f, "{message}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedWindow {
    pub window_id: usize,
    pub window: Window,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WindowOutcome {
    Corrected(CorrectedCloud),
    Skipped(SkippedWindow),
}

impl WindowOutcome {
    pub fn window_id(&self) -> usize {
        match self {
            WindowOutcome::Corrected(c) => c.window_id,
            WindowOutcome::Skipped(s) => s.window_id,
        }
    }
}

/// Raw data of one window.
#[derive(Debug, Clone)]
pub struct WindowInput {
    pub window_id: usize,
    pub window: Window,
    /// Absolute index of the first segment.
    pub first_segment: usize,
    pub points: Vec<LidarPoint>,
    pub imu: Vec<ImuSample>,
}

/// `v(t)` and `g` rotated into the IMU frame at `t_new`; biases unchanged.
pub fn propagate_state(state: &WindowState, grid: &PreintegrationGrid, t_new: f64) -> Result<WindowState, PreintegrationError> {
    let f = correct_bias(&grid.query(t_new)?, &state.biases());
    let g = state.gravity_vector();
    let rt = f.delta_r.transpose();
    let v = rt.rotate(&f.velocity_at(&state.velocity, &g));
    let mut out = WindowState::from_gravity(rt.rotate(&g));
    out.velocity = v;
    out.accel_bias = state.accel_bias;
    out.gyro_bias = state.gyro_bias;
    Ok(out)
}

fn median_period(imu: &[ImuSample]) -> Option<f64> {
    let mut dts: Vec<f64> = imu.windows(2).map(|w| w[1].t - w[0].t).collect();
    if dts.is_empty() {
        return None;
    }
    let mid = dts.len() / 2;
    Some(*dts.select_nth_unstable_by(mid, f64::total_cmp).1)
}

/// First IMU gap longer than `periods` nominal periods.
pub fn find_imu_gap(imu: &[ImuSample], periods: f64) -> Option<(f64, f64)> {
    let nominal = median_period(imu)?;
    imu.windows(2)
        .map(|w| (w[0].t, w[1].t - w[0].t))
        .find(|&(_, dt)| dt > periods * nominal * (1.0 + 1e-6))
}

/// Sequential window processor holding the warm-start state.
pub struct Pipeline {
    config: PipelineConfig,
    extrinsic: RigidTransform,
    warm: Option<(usize, WindowState)>,
    emitted_until: f64,
    feature_cache: BTreeMap<usize, Vec<FeaturePoint>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            extrinsic: config.extrinsic(),
            config,
            warm: None,
            emitted_until: f64::NEG_INFINITY,
            feature_cache: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn segment_features(&mut self, input: &WindowInput) -> Vec<FeaturePoint> {
        let k = self.config.segments();
        let first = input.first_segment;
        self.feature_cache.retain(|&s, _| s >= first);
        let missing: Vec<usize> = (first..first + k).filter(|s| !self.feature_cache.contains_key(s)).collect();
        let params = self.config.features;
        let extracted: Vec<(usize, Vec<FeaturePoint>)> = missing
            .par_iter()
            .map(|&s| {
                let (a, b) = input.window.segment_bounds(s - first);
                let pts: Vec<LidarPoint> = input.points.iter().filter(|p| p.t >= a && p.t < b).copied().collect();
                (s, extract_features_salted(&pts, &params, stable_hash(params.seed, s as u64)).features)
            })
            .collect();
        self.feature_cache.extend(extracted);
        (first..first + k).flat_map(|s| self.feature_cache[&s].iter().copied()).filter(|f| input.window.contains(f.point.t)).collect()
    }

    fn skip(&mut self, input: &WindowInput, reason: SkipReason) -> WindowOutcome {
        log::warn!("window {} [{:.6}, {:.6}) skipped: {}", input.window_id, input.window.t_f0, input.window.t_f1, reason);
        self.warm = None;
        WindowOutcome::Skipped(SkippedWindow { window_id: input.window_id, window: input.window, reason })
    }

    pub fn process(&mut self, input: WindowInput) -> WindowOutcome {
        let w = input.window;
        if let Some((at, gap)) = find_imu_gap(&input.imu, self.config.max_imu_gap_periods) {
            return self.skip(&input, SkipReason::ImuGap { at, gap });
        }
        let warm = self.warm.take().filter(|(id, _)| *id + 1 == input.window_id).map(|(_, s)| s);
        let cold_start = warm.is_none();
        let init = warm.unwrap_or_else(|| WindowState::cold(&input.imu, w.t_f0, w.t_f1));
        let rate = self.config.preint_rate;
        let grid = match preintegrate(&input.imu, w.t_f0, w.t_f1, rate, &init.biases()) {
            Ok(g) => g,
            Err(e) => return self.skip(&input, SkipReason::ImuCoverage { message: e.to_string() }),
        };
        let features = self.segment_features(&input);
        let problem = WindowProblem { features: &features, grid: &grid, window: w, extrinsic: self.extrinsic };
        let (state, report) = match problem.solve(&init, &self.config.solver, &self.config.association) {
            Ok(r) => r,
            Err(SolverError::UnderConstrained { residuals, required }) => {
                return self.skip(&input, SkipReason::UnderConstrained { residuals, required })
            }
            Err(e) => return self.skip(&input, SkipReason::Solver { message: e.to_string() }),
        };
        let final_grid = match preintegrate(&input.imu, w.t_f0, w.t_f1, rate, &state.biases()) {
            Ok(g) => g,
            Err(e) => return self.skip(&input, SkipReason::ImuCoverage { message: e.to_string() }),
        };
        let from = if self.config.emit_all_window_points { w.t_f0 } else { w.t_f0.max(self.emitted_until) };
        let extrinsic = self.extrinsic;
        let points: Vec<CorrectedPoint> = input
            .points
            .par_iter()
            .filter(|p| p.t >= from && w.contains(p.t))
            .map(|p| {
                let f = final_grid.query(p.t).expect("window covered by grid");
                CorrectedPoint { t: p.t, position: crate::solver::project_point(&f, &state, &extrinsic, &p.position), channel: p.channel }
            })
            .collect();
        self.emitted_until = self.emitted_until.max(w.t_f1);
        let next_t0 = w.t_f0 + self.config.segment_length;
        self.warm = propagate_state(&state, &final_grid, next_t0.min(w.t_f1)).ok().map(|s| (input.window_id, s));
        WindowOutcome::Corrected(CorrectedCloud { window_id: input.window_id, window: w, points, state, report, cold_start })
    }
}

/// Runs the pipeline over in-memory, time-ordered streams.
pub fn run(points: &[LidarPoint], imu: &[ImuSample], config: &PipelineConfig) -> Result<Vec<WindowOutcome>, PipelineError> {
    let mut out = Vec::new();
    run_streaming(points.iter().copied(), imu.iter().copied(), config, |o| out.push(o))?;
    Ok(out)
}

/// Window slicing on a reader thread feeding the sequential solver through a
/// bounded queue; `sink` receives outcomes in window order.
pub fn run_streaming<P, I, S>(points: P, imu: I, config: &PipelineConfig, mut sink: S) -> Result<(), PipelineError>
where
    P: Iterator<Item = LidarPoint> + Send,
    I: Iterator<Item = ImuSample> + Send,
    S: FnMut(WindowOutcome),
{
    let mut pipeline = Pipeline::new(*config)?;
    let (tx, rx) = sync_channel::<WindowInput>(config.queue_capacity);
    std::thread::scope(|scope| {
        let producer = scope.spawn(move || slice_windows(points, imu, config, |w| tx.send(w).is_ok()));
        for input in rx {
            sink(pipeline.process(input));
        }
        producer.join().expect("window reader panicked")
    })
}

/// Cuts the streams into window inputs; stops early when `emit` returns false.
pub fn slice_windows<P, I, E>(points: P, imu: I, config: &PipelineConfig, mut emit: E) -> Result<(), PipelineError>
where
    P: Iterator<Item = LidarPoint>,
    I: Iterator<Item = ImuSample>,
    E: FnMut(WindowInput) -> bool,
{
    let k = config.segments();
    let mut points = points.enumerate().peekable();
    let mut imu = imu.enumerate().peekable();
    let mut buffer: Vec<LidarPoint> = Vec::new();
    let mut imu_buffer: Vec<ImuSample> = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    let mut last_imu_t = f64::NEG_INFINITY;
    let mut t_start = None;
    let mut window_id = 0usize;
    let mut exhausted = false;
    loop {
        let Some(start) = t_start.or_else(|| points.peek().map(|(_, p)| p.t)) else {
            return Ok(());
        };
        t_start = Some(start);
        let t_f0 = start + window_id as f64 * config.segment_length;
        let t_f1 = t_f0 + config.window_length;
        while !exhausted && buffer.last().is_none_or(|p| p.t < t_f1) {
            match points.next() {
                Some((index, p)) => {
                    if !p.t.is_finite() || p.position.iter().any(|x| !x.is_finite()) {
                        return Err(PipelineError::NonFinite { stream: "lidar", index });
                    }
                    if p.t < last_t {
                        return Err(PipelineError::NonMonotonic { stream: "lidar", index });
                    }
                    last_t = p.t;
                    buffer.push(p);
                }
                None => exhausted = true,
            }
        }
        if exhausted {
            let mut dts: Vec<f64> = buffer.windows(2).map(|w| w[1].t - w[0].t).collect();
            let dt = if dts.is_empty() {
                0.0
            } else {
                let mid = dts.len() / 2;
                *dts.select_nth_unstable_by(mid, f64::total_cmp).1
            };
            if buffer.last().is_none_or(|p| p.t + dt < t_f1 - TIME_EPS) {
                return Ok(());
            }
        }
        while imu.peek().is_some() && last_imu_t < t_f1 + 2.0 * COVERAGE_SLACK {
            let (index, s) = imu.next().expect("peeked");
            if !s.t.is_finite() || s.accel.iter().chain(s.gyro.iter()).any(|x| !x.is_finite()) {
                return Err(PipelineError::NonFinite { stream: "imu", index });
            }
            if s.t <= last_imu_t {
                return Err(PipelineError::NonMonotonic { stream: "imu", index });
            }
            last_imu_t = s.t;
            imu_buffer.push(s);
        }
        let lo = imu_buffer.partition_point(|s| s.t < t_f0 - 2.0 * COVERAGE_SLACK).saturating_sub(1);
        let window = Window::new(t_f0, t_f1, k).map_err(|e| PipelineError::Config(e.to_string()))?;
        let input = WindowInput {
            window_id,
            window,
            first_segment: window_id,
            points: buffer.iter().filter(|p| p.t >= t_f0 && p.t < t_f1).copied().collect(),
            imu: imu_buffer[lo..].iter().filter(|s| s.t <= t_f1 + 2.0 * COVERAGE_SLACK).copied().collect(),
        };
        if !emit(input) {
            return Ok(());
        }
        window_id += 1;
        let next_t0 = start + window_id as f64 * config.segment_length;
        buffer.retain(|p| p.t >= next_t0);
        let keep = imu_buffer.partition_point(|s| s.t < next_t0 - 2.0 * COVERAGE_SLACK).saturating_sub(1);
        imu_buffer.drain(..keep);
    }
}
