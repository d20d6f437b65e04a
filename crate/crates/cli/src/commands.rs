//! Pipeline stages. Each reads its inputs from disk and writes artifacts
//! into an output directory; outputs depend only on inputs and config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use nalgebra::Vector3;
use serde::Serialize;

use crloc_core::envmap::EnvironmentMap;
use crloc_core::ply;
use crloc_core::recon::{cloud_to_map_rmse, detect_anomalies, evaluate_localization, reconstruct_scene, AnomalyReport, LocalizationMetrics, ReconstructedCloud};
use crloc_core::records::{read_sensor_log, read_truth, write_sensor_log, write_truth, SensorLog};
use crloc_core::solver::{estimate_gyro_bias, localize, SolveReport};
use crloc_core::state::{GridDocument, StateGrid};
use crloc_sim::mapgen::make_prior_map;
use crloc_sim::scene::SimScene;
use crloc_sim::sensors::simulate;

use crate::config::RunConfig;
use crate::CliError;

pub const SENSOR_LOG: &str = "sensors.jsonl";
pub const TRUTH_LOG: &str = "truth.jsonl";
pub const PRIOR_MAP: &str = "prior_map.ply";
pub const TRUE_MAP: &str = "true_map.ply";
pub const ESTIMATE: &str = "estimate.json";
pub const SOLVE_REPORT: &str = "solve_report.json";
pub const CLOUD: &str = "cloud.ply";
pub const ANOMALIES: &str = "anomalies.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn data(path: &Path) -> impl Fn(crloc_core::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Prior map of `scene`: Poisson-disk samples augmented with normals and
/// planarity.
pub fn build_map(scene: &SimScene, cfg: &RunConfig) -> Result<EnvironmentMap, CliError> {
    let samples = make_prior_map(scene, cfg.map.sample_spacing, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let positions: Vec<Vector3<f64>> = samples.iter().map(|s| s.position).collect();
    Ok(EnvironmentMap::build(&positions, &cfg.map.build_options())?)
}

pub fn load_map(path: &Path, cfg: &RunConfig) -> Result<EnvironmentMap, CliError> {
    let table = ply::read_file(path).map_err(data(path))?;
    EnvironmentMap::from_table(&table, &cfg.map.build_options()).map_err(data(path))
}

pub fn load_log(path: &Path) -> Result<SensorLog, CliError> {
    read_sensor_log(open(path)?).map_err(data(path))
}

pub fn load_estimate(path: &Path) -> Result<StateGrid, CliError> {
    let doc: GridDocument = serde_json::from_reader(open(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    StateGrid::from_document(&doc).map_err(data(path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub tof_scans: usize,
    pub gyro_samples: usize,
    pub strain_samples: usize,
    pub truth_records: usize,
    pub prior_map_points: usize,
    pub true_map_points: usize,
}

/// Sensor log and ground truth from the true scene; maps of both scenes.
pub fn cmd_simulate(cfg: &RunConfig, base_dir: &Path, out: &Path) -> Result<SimulateSummary, CliError> {
    let prior = cfg.scene.prior_scene(base_dir)?;
    let truth_scene = cfg.scene.true_scene(base_dir)?;
    let sim = simulate(&truth_scene, &cfg.robot, &cfg.sensors, cfg.duration, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let mut w = create(&out.join(SENSOR_LOG))?;
    write_sensor_log(&mut w, &sim.log)?;
    w.flush()?;
    let mut w = create(&out.join(TRUTH_LOG))?;
    write_truth(&mut w, &sim.truth)?;
    w.flush()?;
    let prior_map = build_map(&prior, cfg)?;
    let true_map = build_map(&truth_scene, cfg)?;
    ply::write_file(out.join(PRIOR_MAP), &prior_map.to_table(), Some("prior scene map"))?;
    ply::write_file(out.join(TRUE_MAP), &true_map.to_table(), Some("true scene map"))?;
    let m = &sim.log.measurements;
    Ok(SimulateSummary {
        tof_scans: m.tof.len(),
        gyro_samples: m.gyro.len(),
        strain_samples: m.strain.len(),
        truth_records: sim.truth.len(),
        prior_map_points: prior_map.len(),
        true_map_points: true_map.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizeReport {
    pub skipped_records: usize,
    pub bias_calibrated: bool,
    pub gyro_biases: BTreeMap<u32, [f64; 3]>,
    pub weakly_observable: bool,
    pub windows: Vec<SolveReport>,
}

pub fn cmd_localize(cfg: &RunConfig, log_path: &Path, map_path: Option<&Path>, out: &Path) -> Result<LocalizeReport, CliError> {
    let log = load_log(log_path)?;
    if log.skipped > 0 {
        warn!("{} unparseable log records skipped", log.skipped);
    }
    let m = &log.measurements;
    let (t0, _) = m.time_span().ok_or_else(|| CliError::Data(format!("{}: no measurements", log_path.display())))?;
    let map = map_path.map(|p| load_map(p, cfg)).transpose()?;
    let still: Vec<_> = m.gyro.iter().filter(|g| g.timestamp <= t0 + cfg.calibration_duration).cloned().collect();
    let (biases, calibrated) = match estimate_gyro_bias(&still) {
        Ok(b) => (b, true),
        Err(e) => {
            warn!("gyro bias calibration skipped: {e}");
            (BTreeMap::new(), false)
        }
    };
    let loc = localize(m, cfg.robot.length(), cfg.robot.base_pose(), &biases, &cfg.noise, &cfg.solver, &cfg.window, map.as_ref())?;
    info!("localized {} windows", loc.reports.len());
    write_json(&out.join(ESTIMATE), &loc.trajectory.to_document())?;
    let report = LocalizeReport {
        skipped_records: log.skipped,
        bias_calibrated: calibrated,
        gyro_biases: biases.iter().map(|(k, v)| (*k, [v.x, v.y, v.z])).collect(),
        weakly_observable: loc.reports.iter().any(|r| r.weakly_observable),
        windows: loc.reports,
    };
    write_json(&out.join(SOLVE_REPORT), &report)?;
    Ok(report)
}

/// Point cloud with per-point covariance. Returns from objects in
/// `unmodelled_labels` are marked as true anomalies when the log carries
/// hit labels.
pub fn cmd_reconstruct(cfg: &RunConfig, log_path: &Path, estimate_path: &Path, out: &Path) -> Result<ReconstructedCloud, CliError> {
    let log = load_log(log_path)?;
    let grid = load_estimate(estimate_path)?;
    let anomalous = cfg.scene.unmodelled_labels();
    let truth: Option<Vec<Vec<bool>>> = log
        .tof_hits
        .iter()
        .map(|h| h.as_ref().map(|labels| labels.iter().map(|l| l.as_ref().is_some_and(|l| anomalous.contains(l))).collect()))
        .collect();
    let cloud = reconstruct_scene(&grid, &log.measurements.tof, &cfg.noise, truth.as_deref())?;
    ply::write_file(out.join(CLOUD), &cloud.to_table(), Some("reconstructed cloud"))?;
    Ok(cloud)
}

pub fn cmd_detect(cfg: &RunConfig, cloud_path: &Path, map_path: &Path, tau: f64, out: &Path) -> Result<AnomalyReport, CliError> {
    let table = ply::read_file(cloud_path).map_err(data(cloud_path))?;
    let cloud = ReconstructedCloud::from_table(&table).map_err(data(cloud_path))?;
    let map = load_map(map_path, cfg)?;
    let report = detect_anomalies(&cloud, &map, tau)?;
    write_json(&out.join(ANOMALIES), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub condition: String,
    pub localization: LocalizationMetrics,
    /// RMS point-to-map distance of the reconstructed cloud, when given.
    pub cloud_rmse: Option<f64>,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    estimate_path: &Path,
    truth_path: &Path,
    cloud_and_map: Option<(&Path, &Path)>,
    out: &Path,
) -> Result<EvalReport, CliError> {
    let grid = load_estimate(estimate_path)?;
    let truth = read_truth(open(truth_path)?).map_err(data(truth_path))?;
    let metrics = evaluate_localization(&grid, &truth)?;
    let mut w = create(&out.join(METRICS_CSV))?;
    metrics.write_csv(&mut w, &cfg.condition)?;
    w.flush()?;
    let cloud_rmse = match cloud_and_map {
        Some((c, m)) => {
            let table = ply::read_file(c).map_err(data(c))?;
            let cloud = ReconstructedCloud::from_table(&table).map_err(data(c))?;
            cloud_to_map_rmse(&cloud, &load_map(m, cfg)?)
        }
        None => None,
    };
    let report = EvalReport { condition: cfg.condition.clone(), localization: metrics, cloud_rmse };
    write_json(&out.join(METRICS_JSON), &report)?;
    Ok(report)
}
