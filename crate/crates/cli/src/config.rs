use std::path::Path;

use lidarmc_core::evaluation::DEFAULT_RANGE_GATE;
use lidarmc_core::simulator::{ImuSpec, LidarSpec, Scene, TrajectorySpec};
use lidarmc_core::{DynamicsParams, PipelineConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_CONFIG_JSON: &str = include_str!("../default_config.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Points at or beyond this lidar range are ignored (m).
    pub range_gate: f64,
    pub best_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { range_gate: DEFAULT_RANGE_GATE, best_fraction: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub dynamics: DynamicsParams,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.pipeline.validate().map_err(|e| e.to_string())?;
        self.dynamics.validate()?;
        let e = self.evaluation;
        if !(e.range_gate > 0.0) || !(e.best_fraction > 0.0 && e.best_fraction <= 1.0) {
            return Err("evaluation.range_gate must be > 0 and best_fraction in (0, 1]".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config: RunConfig = read_json(path)?;
        config.validate().map_err(|m| CliError::config(path, m))?;
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}

/// Lidar and IMU models for simulation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorsSpec {
    pub lidar: LidarSpec,
    pub imu: ImuSpec,
}

/// Parses a JSON document, reporting the line and column of schema errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(path, format!("line {} column {}: {e}", e.line(), e.column())))
}

pub fn load_scene(path: &Path) -> Result<Scene, CliError> {
    let scene: Scene = read_json(path)?;
    scene.validate().map_err(|e| CliError::config(path, e.to_string()))?;
    Ok(scene)
}

pub fn load_trajectory(path: &Path) -> Result<TrajectorySpec, CliError> {
    let traj: TrajectorySpec = read_json(path)?;
    traj.validate().map_err(|e| CliError::config(path, e.to_string()))?;
    Ok(traj)
}

pub fn load_sensors(path: &Path) -> Result<SensorsSpec, CliError> {
    let sensors: SensorsSpec = read_json(path)?;
    sensors.lidar.validate().map_err(|e| CliError::config(path, e.to_string()))?;
    sensors.imu.validate().map_err(|e| CliError::config(path, e.to_string()))?;
    Ok(sensors)
}
