//! Text artifacts: measurement lists, state tables and solve reports.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use stgp_core::{Mat24, Measurement, MeasurementKind, NodeState, Pose, Rotation, SolveReport, Twist};

use crate::config::{check_version, SCHEMA_VERSION};
use crate::error::CliError;

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
pub fn quaternion_wxyz(r: &Rotation) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r.matrix()));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.w, q.i, q.j, q.k]
}

pub fn rotation_from_wxyz(q: [f64; 4]) -> Result<Rotation, CliError> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    if !(raw.norm() > 0.0 && raw.norm().is_finite()) {
        return Err(CliError::Invalid(format!("bad quaternion {q:?}")));
    }
    let m = UnitQuaternion::from_quaternion(raw).to_rotation_matrix().into_inner();
    Rotation::from_matrix(m).map_err(|e| CliError::Invalid(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReadingRecord {
    Strain6 { value: [f64; 6], mask: [bool; 6] },
    Gyro3 { value: [f64; 3] },
    Pose6 { translation: [f64; 3], quaternion: [f64; 4] },
    Position3 { value: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub s: f64,
    pub t: f64,
    #[serde(flatten)]
    pub reading: ReadingRecord,
    /// Row-major noise covariance.
    pub noise_cov: Vec<Vec<f64>>,
}

impl MeasurementRecord {
    pub fn from_measurement(m: &Measurement) -> Self {
        let reading = match &m.kind {
            MeasurementKind::Strain { value, mask } => ReadingRecord::Strain6 { value: (*value).into(), mask: *mask },
            MeasurementKind::Gyro { value } => ReadingRecord::Gyro3 { value: (*value).into() },
            MeasurementKind::Pose { value } => ReadingRecord::Pose6 {
                translation: value.translation.into(),
                quaternion: quaternion_wxyz(&value.rotation),
            },
            MeasurementKind::Position { value } => ReadingRecord::Position3 { value: (*value).into() },
        };
        let c = &m.noise_cov;
        let noise_cov = (0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect();
        MeasurementRecord { s: m.s, t: m.t, reading, noise_cov }
    }

    pub fn to_measurement(&self) -> Result<Measurement, CliError> {
        let kind = match &self.reading {
            ReadingRecord::Strain6 { value, mask } => {
                MeasurementKind::Strain { value: Twist::from_column_slice(value), mask: *mask }
            }
            ReadingRecord::Gyro3 { value } => MeasurementKind::Gyro { value: Vector3::from(*value) },
            ReadingRecord::Pose6 { translation, quaternion } => MeasurementKind::Pose {
                value: Pose::new(rotation_from_wxyz(*quaternion)?, Vector3::from(*translation)),
            },
            ReadingRecord::Position3 { value } => MeasurementKind::Position { value: Vector3::from(*value) },
        };
        let n = self.noise_cov.len();
        if self.noise_cov.iter().any(|r| r.len() != n) {
            return Err(CliError::Invalid("noise_cov must be square".into()));
        }
        let cov = DMatrix::from_fn(n, n, |i, j| self.noise_cov[i][j]);
        Ok(Measurement::new(kind, self.s, self.t, cov))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFile {
    pub schema_version: String,
    pub seed: u64,
    pub measurements: Vec<MeasurementRecord>,
}

pub fn write_measurements(path: &Path, seed: u64, measurements: &[Measurement]) -> Result<(), CliError> {
    let file = MeasurementFile {
        schema_version: SCHEMA_VERSION.to_string(),
        seed,
        measurements: measurements.iter().map(MeasurementRecord::from_measurement).collect(),
    };
    let text = serde_json::to_string_pretty(&file).expect("measurements serialize");
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: serde_json::Error| CliError::Invalid(format!("{}: {e}", path.display()));
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    check_version(&doc, path)?;
    let file: MeasurementFile = serde_json::from_value(doc).map_err(bad)?;
    file.measurements.iter().map(MeasurementRecord::to_measurement).collect()
}

const TWIST_LABELS: [&str; 6] = ["rho_x", "rho_y", "rho_z", "phi_x", "phi_y", "phi_z"];

/// Header of a state table; `with_std` appends the 24 marginal std-devs.
pub fn state_header(with_std: bool) -> Vec<String> {
    let mut h: Vec<String> = ["s", "t", "x", "y", "z", "qw", "qx", "qy", "qz"].iter().map(|c| c.to_string()).collect();
    for prefix in ["strain", "velocity", "strain_velocity"] {
        h.extend(TWIST_LABELS.iter().map(|c| format!("{prefix}_{c}")));
    }
    if with_std {
        h.extend((0..24).map(|i| format!("std_{i}")));
    }
    h
}

pub fn state_row(s: f64, t: f64, x: &NodeState, cov: Option<&Mat24>) -> Vec<f64> {
    let mut row = vec![s, t];
    row.extend(x.pose.translation.iter());
    row.extend(quaternion_wxyz(&x.pose.rotation));
    for v in [&x.strain, &x.velocity, &x.strain_velocity] {
        row.extend(v.iter());
    }
    if let Some(c) = cov {
        row.extend((0..24).map(|i| c[(i, i)].max(0.0).sqrt()));
    }
    row
}

/// Writes a header and rows as comma-separated text.
pub fn write_table<W: Write>(out: W, header: &[String], rows: &[Vec<f64>]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_table(std::io::BufWriter::new(f), header, rows).map_err(|e| CliError::io(path, e.into()))
}

/// Header and numeric rows of a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    let header = r.headers().map_err(|e| CliError::io(path, e.into()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::io(path, e.into()))?;
        let row: Result<Vec<f64>, _> = rec.iter().map(str::parse).collect();
        rows.push(row.map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?);
    }
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub linearize_seconds: f64,
    pub factorize_seconds: f64,
    pub covariance_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: String,
    pub n_space: usize,
    pub n_time: usize,
    pub measurements: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_cost: f64,
    pub cost_trace: Vec<f64>,
    pub update_norms: Vec<f64>,
    pub step_scales: Vec<f64>,
    pub touched_blocks: usize,
    pub timing: Timing,
    /// Set when the solve stopped with an error instead of a posterior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ReportFile {
    pub fn new(n_space: usize, n_time: usize, measurements: usize, r: &SolveReport) -> Self {
        ReportFile {
            schema_version: SCHEMA_VERSION.to_string(),
            n_space,
            n_time,
            measurements,
            iterations: r.iterations,
            converged: r.converged,
            final_cost: r.final_cost,
            cost_trace: r.cost_trace.clone(),
            update_norms: r.update_norms.clone(),
            step_scales: r.step_scales.clone(),
            touched_blocks: r.touched_blocks,
            timing: Timing {
                linearize_seconds: r.linearize_seconds,
                factorize_seconds: r.factorize_seconds,
                covariance_seconds: r.covariance_seconds,
                total_seconds: r.total_seconds,
            },
            failure: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let bad = |e: serde_json::Error| CliError::Invalid(format!("{}: {e}", path.display()));
        let doc: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        check_version(&doc, path)?;
        serde_json::from_value(doc).map_err(bad)
    }
}
