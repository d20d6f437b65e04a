//! JSON-lines sensor logs and ground-truth ring poses.
//!
//! Sensor records look like
//! `{"type": "gyro", "sensor_id": 100, "timestamp": 0.01, "arclength": 0.2, "payload": {...}}`;
//! truth records like
//! `{"timestamp": 0.01, "ring": 0, "arclength": 0.2, "rotation": [9 values, row-major], "translation": [3]}`.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{ray_grid, GyroMeasurement, StrainMeasurement, ToFScan};
use crate::geom::Transform;
use crate::recon::RingPose;
use crate::solver::MeasurementSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RecordType {
    Tof,
    Gyro,
    Strain,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(rename = "type")]
    kind: RecordType,
    sensor_id: u32,
    timestamp: f64,
    arclength: f64,
    payload: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TofPayload {
    rotation: [f64; 9],
    translation: [f64; 3],
    /// Square ray grid, when the directions follow [`ray_grid`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    directions: Option<Vec<[f64; 3]>>,
    ranges: Vec<Option<f64>>,
    /// Label of the surface each ray hit (simulated logs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hits: Option<Vec<Option<String>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GyroPayload {
    angular_rate: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrainPayload {
    bending_angle: f64,
    curvature: f64,
}

/// A parsed sensor log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorLog {
    pub measurements: MeasurementSet,
    /// Per ToF scan (same order), the hit label of each ray when recorded.
    pub tof_hits: Vec<Option<Vec<Option<String>>>>,
    /// Lines that failed to parse.
    pub skipped: usize,
}

/// `(resolution, fov)` when `dirs` is exactly `ray_grid(resolution, fov)`.
fn detect_grid(dirs: &[Vector3<f64>]) -> Option<(usize, f64)> {
    let n = (dirs.len() as f64).sqrt().round() as usize;
    if n == 0 || n * n != dirs.len() {
        return None;
    }
    let half_angle = (-dirs[0].x / dirs[0].z).atan();
    let fov = 2.0 * half_angle / (1.0 - 1.0 / n as f64);
    let expected = ray_grid(n, fov);
    expected.iter().zip(dirs).all(|(a, b)| (a - b).amax() < 1e-14).then_some((n, fov))
}

fn tof_record(scan: &ToFScan, hits: Option<&Vec<Option<String>>>) -> Result<Record> {
    let grid = detect_grid(&scan.directions);
    let payload = TofPayload {
        rotation: scan.extrinsic.row_major_rotation(),
        translation: scan.extrinsic.translation.into(),
        grid,
        directions: grid.is_none().then(|| scan.directions.iter().map(|d| (*d).into()).collect()),
        ranges: scan.ranges.clone(),
        hits: hits.cloned(),
    };
    Ok(Record {
        kind: RecordType::Tof,
        sensor_id: scan.sensor_id,
        timestamp: scan.timestamp,
        arclength: scan.arclength,
        payload: serde_json::to_value(payload)?,
    })
}

/// Write records sorted by timestamp, then type, then sensor id.
pub fn write_sensor_log<W: Write>(mut out: W, log: &SensorLog) -> Result<()> {
    let m = &log.measurements;
    let mut records: Vec<Record> = Vec::with_capacity(m.tof.len() + m.gyro.len() + m.strain.len());
    for (i, scan) in m.tof.iter().enumerate() {
        records.push(tof_record(scan, log.tof_hits.get(i).and_then(|h| h.as_ref()))?);
    }
    for g in &m.gyro {
        records.push(Record {
            kind: RecordType::Gyro,
            sensor_id: g.sensor_id,
            timestamp: g.timestamp,
            arclength: g.arclength,
            payload: serde_json::to_value(GyroPayload { angular_rate: g.angular_rate.into() })?,
        });
    }
    for s in &m.strain {
        records.push(Record {
            kind: RecordType::Strain,
            sensor_id: s.sensor_id,
            timestamp: s.timestamp,
            arclength: s.arclength,
            payload: serde_json::to_value(StrainPayload { bending_angle: s.bending_angle, curvature: s.curvature })?,
        });
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.kind.cmp(&b.kind)).then(a.sensor_id.cmp(&b.sensor_id)));
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn parse_line(line: &str, log: &mut SensorLog) -> Result<()> {
    let r: Record = serde_json::from_str(line)?;
    if !r.timestamp.is_finite() || !r.arclength.is_finite() {
        return Err(Error::Parse("non-finite timestamp or arclength".into()));
    }
    match r.kind {
        RecordType::Tof => {
            let p: TofPayload = serde_json::from_value(r.payload)?;
            let directions: Vec<Vector3<f64>> = match (p.grid, p.directions) {
                (Some((n, fov)), None) => ray_grid(n, fov),
                (None, Some(d)) => d.into_iter().map(Vector3::from).collect(),
                _ => return Err(Error::Parse("ToF record needs exactly one of grid or directions".into())),
            };
            if directions.len() != p.ranges.len() {
                return Err(Error::DimensionMismatch { expected: directions.len(), got: p.ranges.len() });
            }
            log.measurements.tof.push(ToFScan {
                sensor_id: r.sensor_id,
                timestamp: r.timestamp,
                arclength: r.arclength,
                extrinsic: Transform::from_row_major(&p.rotation, &p.translation),
                directions,
                ranges: p.ranges,
            });
            log.tof_hits.push(p.hits);
        }
        RecordType::Gyro => {
            let p: GyroPayload = serde_json::from_value(r.payload)?;
            log.measurements.gyro.push(GyroMeasurement {
                angular_rate: Vector3::from(p.angular_rate),
                arclength: r.arclength,
                timestamp: r.timestamp,
                sensor_id: r.sensor_id,
            });
        }
        RecordType::Strain => {
            let p: StrainPayload = serde_json::from_value(r.payload)?;
            if !(p.curvature >= 0.0) {
                return Err(Error::Parse("negative curvature".into()));
            }
            log.measurements.strain.push(StrainMeasurement {
                bending_angle: p.bending_angle,
                curvature: p.curvature,
                arclength: r.arclength,
                timestamp: r.timestamp,
                sensor_id: r.sensor_id,
            });
        }
    }
    Ok(())
}

/// Read a sensor log. Blank lines are ignored; malformed lines are skipped
/// and counted.
pub fn read_sensor_log<R: BufRead>(input: R) -> Result<SensorLog> {
    let mut log = SensorLog::default();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Err(e) = parse_line(&line, &mut log) {
            log::warn!("skipping log line {}: {e}", no + 1);
            log.skipped += 1;
        }
    }
    Ok(log)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    timestamp: f64,
    ring: usize,
    arclength: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

pub fn write_truth<W: Write>(mut out: W, poses: &[RingPose]) -> Result<()> {
    for p in poses {
        let r = TruthRecord {
            timestamp: p.timestamp,
            ring: p.ring,
            arclength: p.arclength,
            rotation: p.pose.row_major_rotation(),
            translation: p.pose.translation.into(),
        };
        serde_json::to_writer(&mut out, &r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read ring ground truth; malformed lines are errors since evaluation
/// needs every record.
pub fn read_truth<R: BufRead>(input: R) -> Result<Vec<RingPose>> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TruthRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("truth line {}: {e}", no + 1)))?;
        out.push(RingPose {
            timestamp: r.timestamp,
            ring: r.ring,
            arclength: r.arclength,
            pose: Transform::from_row_major(&r.rotation, &r.translation),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{rot_x, rot_z};

    fn sample_log() -> SensorLog {
        let extrinsic = Transform::new(rot_x(1.1) * rot_z(0.3), Vector3::new(0.0, 0.02, -0.01));
        let dirs = ray_grid(4, 45f64.to_radians());
        let ranges = (0..16).map(|i| (i % 5 != 0).then_some(0.1 + i as f64 / 7.0)).collect();
        let mut m = MeasurementSet::default();
        m.tof.push(ToFScan { sensor_id: 2, timestamp: 0.2, arclength: 0.34, extrinsic, directions: dirs, ranges });
        m.tof.push(ToFScan {
            sensor_id: 3,
            timestamp: 0.1,
            arclength: 0.5,
            extrinsic: Transform::identity(),
            directions: vec![Vector3::new(0.3, 0.0, 1.0).normalize()],
            ranges: vec![Some(1.0 / 3.0)],
        });
        m.gyro.push(GyroMeasurement { angular_rate: Vector3::new(0.1, -1e-17, 3.0), arclength: 0.2, timestamp: 0.1, sensor_id: 100 });
        m.strain.push(StrainMeasurement { bending_angle: -2.5, curvature: 0.7, arclength: 0.03, timestamp: 0.05, sensor_id: 200 });
        SensorLog { measurements: m, tof_hits: vec![None, Some(vec![Some("wall".into())])], skipped: 0 }
    }

    #[test]
    fn sensor_log_round_trip() {
        let log = sample_log();
        let mut buf = Vec::new();
        write_sensor_log(&mut buf, &log).unwrap();
        let back = read_sensor_log(buf.as_slice()).unwrap();
        assert_eq!(back.skipped, 0);
        // records come back in time order
        assert_eq!(back.measurements.tof[0], log.measurements.tof[1]);
        assert_eq!(back.measurements.tof[1].ranges, log.measurements.tof[0].ranges);
        assert_eq!(back.measurements.tof[1].extrinsic, log.measurements.tof[0].extrinsic);
        for (a, b) in back.measurements.tof[1].directions.iter().zip(&log.measurements.tof[0].directions) {
            assert!((a - b).amax() < 1e-15);
        }
        assert_eq!(back.tof_hits, vec![Some(vec![Some("wall".into())]), None]);
        assert_eq!(back.measurements.gyro, log.measurements.gyro);
        assert_eq!(back.measurements.strain, log.measurements.strain);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains("\"type\":\"strain\""));
    }

    #[test]
    fn malformed_lines_are_counted() {
        let mut buf = Vec::new();
        write_sensor_log(&mut buf, &sample_log()).unwrap();
        buf.extend_from_slice(b"not json\n\n{\"type\":\"gyro\",\"sensor_id\":1}\n");
        buf.extend_from_slice(b"{\"type\":\"strain\",\"sensor_id\":1,\"timestamp\":0,\"arclength\":0,\"payload\":{\"bending_angle\":0,\"curvature\":-1}}\n");
        let log = read_sensor_log(buf.as_slice()).unwrap();
        assert_eq!(log.skipped, 3);
        assert_eq!(log.measurements.gyro.len(), 1);
    }

    #[test]
    fn truth_round_trip() {
        let poses = vec![
            RingPose { timestamp: 0.0, ring: 0, arclength: 0.2, pose: Transform::new(rot_z(0.7), Vector3::new(0.1, 0.2, 0.3)) },
            RingPose { timestamp: 0.01, ring: 2, arclength: 0.5, pose: Transform::identity() },
        ];
        let mut buf = Vec::new();
        write_truth(&mut buf, &poses).unwrap();
        assert_eq!(read_truth(buf.as_slice()).unwrap(), poses);
        assert!(read_truth("{\"timestamp\":0}\n".as_bytes()).is_err());
    }
}
