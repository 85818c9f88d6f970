//! Study configuration: what to solve and how finely to sweep it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Brillouin discretization family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Uniform panels with exact per-panel phase integrals.
    Standard,
    /// Cutoff-clustered collocation nodes on a reparametrized zone.
    HighOrder,
}

/// Clustering map used by the high-order method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReparamName {
    /// Polynomial map, flat to third order at the cutoffs.
    #[serde(rename = "g1")]
    G1,
    /// Exponential map, flat to all orders at the cutoffs.
    #[serde(rename = "g2")]
    G2,
}

/// The run every other cell of a study is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceRule {
    /// Brillouin resolution of the reference solve.
    pub n: usize,
    /// Mesh width of the reference solve.
    pub h: f64,
}

/// One convergence study: a surface, an incident wave, a solver, and the
/// resolution ladders to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Surface name: "flat", "gamma1", or "gamma2".
    pub surface: String,
    /// Height of the flat surface; ignored for the catalog surfaces.
    #[serde(default = "default_surface_height")]
    pub surface_height: f64,
    /// Perturbation name: "none", "p1", or "p2".
    pub perturbation: String,
    /// Multiplier on the perturbation amplitude; zero is a valid null test.
    #[serde(default = "default_one")]
    pub perturbation_scale: f64,
    /// Wavenumber of the incident plane wave.
    pub k: f64,
    /// Horizontal wavevector component of the incident wave.
    pub alpha: f64,
    /// Surface period.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Height of the artificial boundary the problem is truncated at.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    /// Blend calibration height; the domain map relaxes toward the identity
    /// between here and the truncation line.
    #[serde(default = "default_blend_height")]
    pub blend_height: f64,
    pub method: Method,
    /// Clustering map when `method = "high-order"`; ignored otherwise.
    #[serde(default = "default_reparam")]
    pub reparam: ReparamName,
    /// Mesh widths to sweep, strictly descending.
    pub mesh_widths: Vec<f64>,
    /// Brillouin resolutions to sweep, strictly ascending.
    pub bloch_counts: Vec<usize>,
    pub reference: ReferenceRule,
    /// Override for the number of trace modes kept in the radiation block;
    /// unset picks the wavenumber-matched default.
    #[serde(default)]
    pub modes: Option<i64>,
    /// Error table destination (CSV), if any.
    #[serde(default)]
    pub csv_out: Option<PathBuf>,
    /// Full study artifact destination (JSON), if any.
    #[serde(default)]
    pub json_out: Option<PathBuf>,
}

fn default_surface_height() -> f64 {
    1.75
}

fn default_one() -> f64 {
    1.0
}

fn default_period() -> f64 {
    2.0 * std::f64::consts::PI
}

fn default_truncation() -> f64 {
    4.0
}

fn default_blend_height() -> f64 {
    3.9
}

fn default_reparam() -> ReparamName {
    ReparamName::G1
}

pub const SURFACE_NAMES: [&str; 3] = ["flat", "gamma1", "gamma2"];
pub const PERTURBATION_NAMES: [&str; 3] = ["none", "p1", "p2"];

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: StudyConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Reject configurations the solvers cannot honor, with the reason.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !SURFACE_NAMES.contains(&self.surface.as_str()) {
            return bad(format!(
                "unknown surface {:?}; expected one of {:?}",
                self.surface, SURFACE_NAMES
            ));
        }
        if !PERTURBATION_NAMES.contains(&self.perturbation.as_str()) {
            return bad(format!(
                "unknown perturbation {:?}; expected one of {:?}",
                self.perturbation, PERTURBATION_NAMES
            ));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return bad(format!("wavenumber k = {} must be positive", self.k));
        }
        if !(self.alpha.abs() < self.k) {
            return bad(format!(
                "incidence requires |alpha| < k, got alpha = {}, k = {}",
                self.alpha, self.k
            ));
        }
        if !(self.period > 0.0) || !self.period.is_finite() {
            return bad(format!("period {} must be positive", self.period));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        if self.surface != "flat" && (self.period - two_pi).abs() > 1e-12 * two_pi {
            return bad(format!(
                "surface {:?} is defined on period 2*pi, config says {}",
                self.surface, self.period
            ));
        }
        if !self.perturbation_scale.is_finite() {
            return bad(format!(
                "perturbation_scale {} must be finite",
                self.perturbation_scale
            ));
        }
        if !(self.blend_height < self.truncation) {
            return bad(format!(
                "blend height {} must lie below the truncation {}",
                self.blend_height, self.truncation
            ));
        }
        if self.mesh_widths.is_empty() {
            return bad("mesh_widths must not be empty".into());
        }
        if self
            .mesh_widths
            .iter()
            .any(|h| !(h.is_finite() && *h > 0.0))
        {
            return bad(format!("mesh_widths {:?} must be positive", self.mesh_widths));
        }
        if self.mesh_widths.windows(2).any(|w| !(w[0] > w[1])) {
            return bad(format!(
                "mesh_widths {:?} must be strictly descending",
                self.mesh_widths
            ));
        }
        if self.bloch_counts.is_empty() {
            return bad("bloch_counts must not be empty".into());
        }
        if self.bloch_counts.windows(2).any(|w| !(w[0] < w[1])) {
            return bad(format!(
                "bloch_counts {:?} must be strictly ascending",
                self.bloch_counts
            ));
        }
        if self.bloch_counts[0] == 0 {
            return bad("bloch_counts must be positive".into());
        }
        if !(self.reference.h.is_finite() && self.reference.h > 0.0) {
            return bad(format!("reference.h {} must be positive", self.reference.h));
        }
        if self.reference.h > self.mesh_widths[self.mesh_widths.len() - 1] {
            return bad(format!(
                "reference.h {} is coarser than the finest swept width {}",
                self.reference.h,
                self.mesh_widths[self.mesh_widths.len() - 1]
            ));
        }
        if self.reference.n < self.bloch_counts[self.bloch_counts.len() - 1] {
            return bad(format!(
                "reference.n {} is below the largest swept resolution {}",
                self.reference.n,
                self.bloch_counts[self.bloch_counts.len() - 1]
            ));
        }
        if self.method == Method::HighOrder {
            // The zone always splits into two quadrature subintervals, so
            // resolutions must be even to distribute nodes evenly.
            for &n in self.bloch_counts.iter().chain([self.reference.n].iter()) {
                if n % 2 != 0 {
                    return bad(format!(
                        "high-order resolutions must be even, got {n}"
                    ));
                }
            }
        }
        if let Some(j) = self.modes {
            if j < 0 {
                return bad(format!("modes override {j} must be nonnegative"));
            }
        }
        Ok(())
    }
}
