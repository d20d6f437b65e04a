//! Run configuration: one TOML document holding every tunable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crloc_core::envmap::MapBuildOptions;
use crloc_core::factors::NoiseModel;
use crloc_core::solver::{SolverOptions, WindowOptions};
use crloc_sim::mesh_io::read_mesh_file;
use crloc_sim::scene::{apply_anomalies, default_scene, SceneEdit, SimScene};
use crloc_sim::sensors::{RobotSpec, SensorSpec};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinScene {
    /// 1 m room with three obstacles.
    Desk,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSource {
    /// OBJ or STL file, relative to the config file.
    pub path: PathBuf,
    pub label: String,
}

/// The modelled (prior) scene plus the edits that produce the scene the
/// sensors actually see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub builtin: BuiltinScene,
    pub meshes: Vec<MeshSource>,
    pub anomalies: Vec<SceneEdit>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { builtin: BuiltinScene::Desk, meshes: Vec::new(), anomalies: Vec::new() }
    }
}

impl SceneConfig {
    /// Labels of objects present in the true scene but not in the prior.
    pub fn unmodelled_labels(&self) -> Vec<String> {
        self.anomalies
            .iter()
            .filter_map(|e| match e {
                SceneEdit::AddBox { label, .. } => Some(label.clone()),
                SceneEdit::RemoveLabel { .. } => None,
            })
            .collect()
    }

    pub fn prior_scene(&self, base_dir: &Path) -> Result<SimScene, CliError> {
        let mut scene = match self.builtin {
            BuiltinScene::Desk => default_scene(),
            BuiltinScene::Empty => SimScene::default(),
        };
        for m in &self.meshes {
            let path = base_dir.join(&m.path);
            scene.meshes.push(read_mesh_file(&path, &m.label).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?);
        }
        scene.validate().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(scene)
    }

    pub fn true_scene(&self, base_dir: &Path) -> Result<SimScene, CliError> {
        apply_anomalies(&self.prior_scene(base_dir)?, &self.anomalies).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// Poisson-disk spacing of simulated prior maps, meters.
    pub sample_spacing: f64,
    pub voxel_size: f64,
    pub k_neighbors: usize,
    /// Isotropic standard deviation of each map point, meters.
    pub prior_sigma: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        let d = MapBuildOptions::default();
        Self { sample_spacing: 0.01, voxel_size: d.voxel_size, k_neighbors: d.k_neighbors, prior_sigma: d.prior_sigma }
    }
}

impl MapConfig {
    pub fn build_options(&self) -> MapBuildOptions {
        MapBuildOptions { voxel_size: self.voxel_size, k_neighbors: self.k_neighbors, viewpoint: None, prior_sigma: self.prior_sigma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Squared Mahalanobis gate.
    pub tau: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { tau: 9.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Simulated run length, seconds.
    pub duration: f64,
    /// Leading stationary span used for gyro bias calibration, seconds.
    pub calibration_duration: f64,
    /// Label written into metrics rows.
    pub condition: String,
    pub robot: RobotSpec,
    pub sensors: SensorSpec,
    pub scene: SceneConfig,
    pub map: MapConfig,
    pub noise: NoiseModel,
    pub solver: SolverOptions,
    pub window: WindowOptions,
    pub detect: DetectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            duration: 10.0,
            calibration_duration: 0.5,
            condition: "matched".into(),
            robot: RobotSpec::default(),
            sensors: SensorSpec::default(),
            scene: SceneConfig::default(),
            map: MapConfig::default(),
            noise: NoiseModel::default(),
            solver: SolverOptions::default(),
            window: WindowOptions::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Load and validate; mesh paths must exist relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for m in &cfg.scene.meshes {
            if !dir.join(&m.path).is_file() {
                return Err(CliError::Config(format!("mesh file {} not found", dir.join(&m.path).display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        self.robot.validate().map_err(|e| cfg(&e))?;
        self.sensors.validate().map_err(|e| cfg(&e))?;
        self.noise.validate().map_err(|e| cfg(&e))?;
        self.window.validate().map_err(|e| cfg(&e))?;
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(CliError::Config("duration must be non-negative".into()));
        }
        if !(self.calibration_duration >= 0.0) {
            return Err(CliError::Config("calibration_duration must be non-negative".into()));
        }
        for (name, v) in [
            ("map.sample_spacing", self.map.sample_spacing),
            ("map.voxel_size", self.map.voxel_size),
            ("map.prior_sigma", self.map.prior_sigma),
            ("solver.max_radius", self.solver.max_radius),
            ("solver.step_tolerance", self.solver.step_tolerance),
            ("solver.max_damping", self.solver.max_damping),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CliError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.map.k_neighbors < 3 {
            return Err(CliError::Config("map.k_neighbors must be at least 3".into()));
        }
        if self.solver.max_iterations == 0 {
            return Err(CliError::Config("solver.max_iterations must be at least 1".into()));
        }
        if self.detect.tau.is_nan() || self.detect.tau < 0.0 {
            return Err(CliError::Config("detect.tau must be non-negative".into()));
        }
        Ok(())
    }
}
