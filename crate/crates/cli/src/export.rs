//! Deterministic study exports: CSV tables, JSON artifacts with the build
//! identity, and field grids for plotting.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use periodic_helmholtz::mesh::Mesh;
use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::study::ErrorTable;
use crate::HarnessError;

/// Build identity stamped into artifacts (git describe, or "unknown" when
/// the tree was built outside version control).
pub fn build_describe() -> &'static str {
    env!("PHELM_BUILD")
}

/// CSV form of an error table: a header plus one `N,h,err` row per cell in
/// row-major order. Floats print shortest round-trip, so equal tables give
/// byte-identical text.
pub fn table_csv(table: &ErrorTable) -> String {
    let mut out = String::from("N,h,err\n");
    for (i, &n) in table.bloch_counts.iter().enumerate() {
        for (j, &h) in table.mesh_widths.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", n, h, table.errors[i][j]);
        }
    }
    out
}

pub fn write_table_csv(path: &Path, table: &ErrorTable) -> Result<(), HarnessError> {
    std::fs::write(path, table_csv(table))?;
    Ok(())
}

/// Everything needed to re-read and reproduce one study run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyArtifact {
    pub build: String,
    pub config: StudyConfig,
    pub table: ErrorTable,
}

pub fn artifact_json(config: &StudyConfig, table: &ErrorTable) -> Result<String, HarnessError> {
    let artifact = StudyArtifact {
        build: build_describe().to_string(),
        config: config.clone(),
        table: table.clone(),
    };
    Ok(serde_json::to_string_pretty(&artifact)?)
}

pub fn read_artifact(text: &str) -> Result<StudyArtifact, HarnessError> {
    Ok(serde_json::from_str(text)?)
}

/// One sampled field value on the physical strip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub x1: f64,
    pub x2: f64,
    pub re: f64,
    pub im: f64,
    pub magnitude: f64,
}

impl FieldSample {
    pub fn new(x: [f64; 2], v: Complex64) -> Self {
        Self {
            x1: x[0],
            x2: x[1],
            re: v.re,
            im: v.im,
            magnitude: v.norm(),
        }
    }
}

/// Field given at the free nodes of a mesh, paired with node positions.
pub fn nodal_field(mesh: &Mesh, values: &[Complex64]) -> Vec<FieldSample> {
    mesh.nodes()
        .iter()
        .zip(values)
        .map(|(&x, &v)| FieldSample::new(x, v))
        .collect()
}

/// The incident plane wave `exp(i(alpha x1 - beta0 x2))` sampled on a
/// uniform grid: the closed-form reference for exported fields.
pub fn incident_field(
    k: f64,
    alpha: f64,
    lo: [f64; 2],
    hi: [f64; 2],
    n1: usize,
    n2: usize,
) -> Vec<FieldSample> {
    let beta = (k * k - alpha * alpha).sqrt();
    let (n1, n2) = (n1.max(1), n2.max(1));
    let mut out = Vec::with_capacity((n1 + 1) * (n2 + 1));
    for j2 in 0..=n2 {
        let x2 = lo[1] + (hi[1] - lo[1]) * j2 as f64 / n2 as f64;
        for j1 in 0..=n1 {
            let x1 = lo[0] + (hi[0] - lo[0]) * j1 as f64 / n1 as f64;
            let phase = alpha * x1 - beta * x2;
            out.push(FieldSample::new(
                [x1, x2],
                Complex64::new(phase.cos(), phase.sin()),
            ));
        }
    }
    out
}

/// CSV form of a field grid, one `x1,x2,re,im,abs` row per sample.
pub fn field_csv(samples: &[FieldSample]) -> String {
    let mut out = String::from("x1,x2,re,im,abs\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{},{},{}", s.x1, s.x2, s.re, s.im, s.magnitude);
    }
    out
}

pub fn write_field_csv(path: &Path, samples: &[FieldSample]) -> Result<(), HarnessError> {
    std::fs::write(path, field_csv(samples))?;
    Ok(())
}
