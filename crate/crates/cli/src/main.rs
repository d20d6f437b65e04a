use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crloc::commands::{self, ANOMALIES, CLOUD, ESTIMATE, METRICS_CSV, PRIOR_MAP, SENSOR_LOG, SOLVE_REPORT, TRUTH_LOG};
use crloc::config::{RunConfig, SceneConfig};
use crloc::CliError;

/// Continuum-robot localization against a prior map.
///
/// Every flag can also be set through an environment variable with the
/// `CRLOC_` prefix, e.g. `CRLOC_SEED=7`.
#[derive(Debug, Parser)]
#[command(name = "crloc", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true, env = "CRLOC_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, env = "CRLOC_OUT", default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "CRLOC_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate sensor data, ground truth and scene maps.
    Simulate {
        /// TOML scene description replacing the config's [scene] table.
        #[arg(long, env = "CRLOC_SCENE")]
        scene: Option<PathBuf>,
    },
    /// Estimate the robot trajectory from a sensor log.
    Localize {
        #[arg(long, env = "CRLOC_LOG")]
        log: Option<PathBuf>,
        /// Prior map PLY.
        #[arg(long, env = "CRLOC_MAP")]
        map: Option<PathBuf>,
        /// Run without a prior map (gyro and strain only).
        #[arg(long, conflicts_with = "map")]
        no_map: bool,
        /// Sliding-window length, seconds.
        #[arg(long, env = "CRLOC_WINDOW")]
        window: Option<f64>,
    },
    /// Project ToF returns through the estimate into a point cloud.
    Reconstruct {
        #[arg(long, env = "CRLOC_LOG")]
        log: Option<PathBuf>,
        #[arg(long, env = "CRLOC_ESTIMATE")]
        estimate: Option<PathBuf>,
    },
    /// Flag reconstructed points inconsistent with the prior map.
    Detect {
        #[arg(long, env = "CRLOC_CLOUD")]
        cloud: Option<PathBuf>,
        #[arg(long, env = "CRLOC_MAP")]
        map: Option<PathBuf>,
        /// Squared Mahalanobis threshold; `inf` disables flagging.
        #[arg(long, env = "CRLOC_TAU")]
        tau: Option<f64>,
    },
    /// Localization error metrics against ground truth.
    Eval {
        #[arg(long, env = "CRLOC_ESTIMATE")]
        estimate: Option<PathBuf>,
        #[arg(long, env = "CRLOC_TRUTH")]
        truth: Option<PathBuf>,
        /// Also report the cloud-to-map RMSE of this cloud.
        #[arg(long, requires = "map")]
        cloud: Option<PathBuf>,
        #[arg(long, env = "CRLOC_MAP")]
        map: Option<PathBuf>,
    },
}

fn or_default(p: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut cfg, base_dir) = match &cli.config {
        Some(path) => (RunConfig::load(path)?, path.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::default(), PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    match cli.command {
        Command::Simulate { scene } => {
            let mut base = base_dir;
            if let Some(path) = scene {
                let text = std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                cfg.scene = toml::from_str::<SceneConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            }
            let summary = commands::cmd_simulate(&cfg, &base, out)?;
            println!(
                "{} ToF scans, {} gyro and {} strain samples, {} truth records -> {}",
                summary.tof_scans,
                summary.gyro_samples,
                summary.strain_samples,
                summary.truth_records,
                out.display()
            );
        }
        Command::Localize { log, map, no_map, window } => {
            if let Some(w) = window {
                cfg.window.window_length = w;
                cfg.validate()?;
            }
            let map = (!no_map).then(|| or_default(map, out, PRIOR_MAP));
            let report = commands::cmd_localize(&cfg, &or_default(log, out, SENSOR_LOG), map.as_deref(), out)?;
            println!(
                "{} windows solved, {} records skipped{} -> {}, {}",
                report.windows.len(),
                report.skipped_records,
                if report.weakly_observable { ", weakly observable" } else { "" },
                out.join(ESTIMATE).display(),
                out.join(SOLVE_REPORT).display()
            );
        }
        Command::Reconstruct { log, estimate } => {
            let cloud = commands::cmd_reconstruct(&cfg, &or_default(log, out, SENSOR_LOG), &or_default(estimate, out, ESTIMATE), out)?;
            println!("{} points -> {}", cloud.len(), out.join(CLOUD).display());
        }
        Command::Detect { cloud, map, tau } => {
            let tau = tau.unwrap_or(cfg.detect.tau);
            if tau.is_nan() || tau < 0.0 {
                return Err(CliError::Config(format!("tau must be non-negative, got {tau}")));
            }
            let report = commands::cmd_detect(&cfg, &or_default(cloud, out, CLOUD), &or_default(map, out, PRIOR_MAP), tau, out)?;
            println!("{} of {} points flagged -> {}", report.flagged.len(), report.num_points, out.join(ANOMALIES).display());
        }
        Command::Eval { estimate, truth, cloud, map } => {
            let cm = cloud.zip(map);
            let report = commands::cmd_eval(
                &cfg,
                &or_default(estimate, out, ESTIMATE),
                &or_default(truth, out, TRUTH_LOG),
                cm.as_ref().map(|(c, m)| (c.as_path(), m.as_path())),
                out,
            )?;
            let p = &report.localization.pooled;
            println!(
                "translation MAE {:.3} cm, rotation MAE {:.3} deg -> {}",
                p.translation.mae * 100.0,
                p.rotation.mae.to_degrees(),
                out.join(METRICS_CSV).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
