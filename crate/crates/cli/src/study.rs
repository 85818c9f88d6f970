//! Convergence studies: sweep mesh widths and Brillouin resolutions against
//! a pinned reference run and tabulate trace errors of the difference field.

use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use periodic_helmholtz::bloch::BrillouinGrid;
use periodic_helmholtz::coupled::{solve_perturbed, CoupledOptions, PerturbedSolution};
use periodic_helmholtz::geometry::{
    catalog, BlendProfile, DomainSpec, Perturbation, SurfaceProfile, SurfaceSelect,
    TransformCoefficients,
};
use periodic_helmholtz::highorder::{anomaly_set, transformed_grid, ReparamKind};
use periodic_helmholtz::mesh::{trace_l2_error, Mesh};
use periodic_helmholtz::quasiperiodic::CellOperator;
use serde::{Deserialize, Serialize};

use crate::config::{Method, ReparamName, StudyConfig};
use crate::HarnessError;

/// Error table of one study. Rows sweep the Brillouin resolution, columns
/// sweep the mesh width; each entry is the relative L2 distance between that
/// run's difference-field trace on the truncation line and the reference
/// run's. The reference cell, if it coincides with a swept cell, is excluded
/// from the fitted rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub bloch_counts: Vec<usize>,
    pub mesh_widths: Vec<f64>,
    /// `errors[i][j]` belongs to `(bloch_counts[i], mesh_widths[j])`.
    pub errors: Vec<Vec<f64>>,
    pub reference_n: usize,
    pub reference_h: f64,
    /// Observed mesh order per row, fitted over the finest usable widths.
    pub row_orders: Vec<Option<f64>>,
    /// Observed Brillouin order per column, fitted over the largest usable
    /// resolutions; positive means the error shrinks as the resolution grows.
    pub col_orders: Vec<Option<f64>>,
}

/// Least-squares slope through `(x, y)` pairs; `None` below two points.
fn ls_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

impl ErrorTable {
    /// Cells per line entering the fitted rates.
    pub const ORDER_WINDOW: usize = 3;

    pub fn with_orders(
        bloch_counts: Vec<usize>,
        mesh_widths: Vec<f64>,
        errors: Vec<Vec<f64>>,
        reference_n: usize,
        reference_h: f64,
    ) -> Self {
        let usable = |n: usize, h: f64, e: f64| {
            !(n == reference_n && h == reference_h) && e > 0.0 && e.is_finite()
        };
        let fit = |pts: Vec<(f64, f64)>| {
            let tail = pts.len().saturating_sub(Self::ORDER_WINDOW);
            ls_slope(&pts[tail..])
        };
        let row_orders = bloch_counts
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                fit(mesh_widths
                    .iter()
                    .enumerate()
                    .filter(|&(j, &h)| usable(n, h, errors[i][j]))
                    .map(|(j, &h)| (h.ln(), errors[i][j].ln()))
                    .collect())
            })
            .collect();
        let col_orders = mesh_widths
            .iter()
            .enumerate()
            .map(|(j, &h)| {
                fit(bloch_counts
                    .iter()
                    .enumerate()
                    .filter(|&(i, &n)| usable(n, h, errors[i][j]))
                    .map(|(i, &n)| ((n as f64).ln(), errors[i][j].ln()))
                    .collect())
                // err ~ N^(-q): report the decay rate q positive.
                .map(|s: f64| -s)
            })
            .collect();
        Self {
            bloch_counts,
            mesh_widths,
            errors,
            reference_n,
            reference_h,
            row_orders,
            col_orders,
        }
    }

    pub fn is_reference_cell(&self, i: usize, j: usize) -> bool {
        self.bloch_counts[i] == self.reference_n && self.mesh_widths[j] == self.reference_h
    }
}

/// Resolve a surface name from the catalog.
pub fn named_surface(
    name: &str,
    period: f64,
    flat_height: f64,
) -> Result<SurfaceProfile, HarnessError> {
    match name {
        "flat" => Ok(SurfaceProfile::new(period, move |_| [flat_height, 0.0])?),
        "gamma1" => Ok(catalog::f1()),
        "gamma2" => Ok(catalog::f2()),
        other => Err(HarnessError::Config(format!("unknown surface {other:?}"))),
    }
}

/// Resolve a perturbation name, applying the amplitude multiplier.
pub fn named_perturbation(
    name: &str,
    scale: f64,
) -> Result<Option<Perturbation>, HarnessError> {
    let base = match name {
        "none" => return Ok(None),
        "p1" => catalog::p1(),
        "p2" => catalog::p2(),
        other => {
            return Err(HarnessError::Config(format!(
                "unknown perturbation {other:?}"
            )))
        }
    };
    if scale == 1.0 {
        return Ok(Some(base));
    }
    let support = base.support();
    Ok(Some(Perturbation::new(support, move |x| {
        let [v, d] = base.eval(x);
        [scale * v, scale * d]
    })?))
}

/// The configured surface with its perturbation attached.
pub fn surface_profile(cfg: &StudyConfig) -> Result<SurfaceProfile, HarnessError> {
    let base = named_surface(&cfg.surface, cfg.period, cfg.surface_height)?;
    match named_perturbation(&cfg.perturbation, cfg.perturbation_scale)? {
        None => Ok(base),
        Some(p) => Ok(base.with_perturbation(p)?),
    }
}

/// The configured scene as transformed coefficients on the unperturbed strip.
pub fn transform_coefficients(cfg: &StudyConfig) -> Result<TransformCoefficients, HarnessError> {
    let profile = surface_profile(cfg)?;
    let spec = DomainSpec::new(cfg.truncation, cfg.blend_height);
    Ok(TransformCoefficients::new(profile, spec, BlendProfile::Cubic)?)
}

/// Grid divisions for a target mesh width: columns fit the period, rows fit
/// the tallest column of the strip.
pub fn divisions(profile: &SurfaceProfile, truncation: f64, h: f64) -> (usize, usize) {
    const SCAN: usize = 2048;
    let period = profile.period();
    let mut floor = f64::INFINITY;
    for i in 0..=SCAN {
        let x = (i as f64 / SCAN as f64 - 0.5) * period;
        floor = floor.min(profile.eval(x, SurfaceSelect::Base)[0]);
    }
    let nx = (period / h).round().max(4.0) as usize;
    let ny = ((truncation - floor) / h).round().max(4.0) as usize;
    (nx, ny)
}

/// Mesh and cell operator for one mesh width; Brillouin sweeps reuse it.
pub fn operator_at(
    cfg: &StudyConfig,
    tc: &TransformCoefficients,
    h: f64,
) -> Result<CellOperator, HarnessError> {
    let (nx, ny) = divisions(tc.profile(), cfg.truncation, h);
    let mesh = Arc::new(Mesh::build(
        tc.profile(),
        SurfaceSelect::Base,
        cfg.truncation,
        nx,
        ny,
    )?);
    Ok(match cfg.modes {
        Some(j) => CellOperator::with_modes(mesh, cfg.k, j),
        None => CellOperator::new(mesh, cfg.k),
    })
}

pub fn reparam_kind(name: ReparamName) -> ReparamKind {
    match name {
        ReparamName::G1 => ReparamKind::Polynomial,
        ReparamName::G2 => ReparamKind::Exponential,
    }
}

/// Solve one study cell on a prepared operator.
pub fn solve_cell(
    cfg: &StudyConfig,
    tc: &TransformCoefficients,
    op: &CellOperator,
    n: usize,
) -> Result<PerturbedSolution, HarnessError> {
    let opts = CoupledOptions::default();
    let grid = match cfg.method {
        Method::Standard => BrillouinGrid::uniform(cfg.period, n)?,
        Method::HighOrder => {
            let anomalies = anomaly_set(cfg.k, cfg.period)?;
            transformed_grid(n, &anomalies, reparam_kind(cfg.reparam))?
        }
    };
    Ok(solve_perturbed(op, tc, cfg.alpha, &grid, &opts)?)
}

/// Top-trace abscissae and difference-field values of one study cell.
pub fn difference_trace(
    cfg: &StudyConfig,
    tc: &TransformCoefficients,
    op: &CellOperator,
    n: usize,
) -> Result<(Vec<f64>, Vec<Complex64>), HarnessError> {
    let sol = solve_cell(cfg, tc, op, n)?;
    let xs = sol.mesh().top_abscissae();
    let vs = sol.mesh().top_trace(&sol.difference_at_nodes(0));
    Ok((xs, vs))
}

pub fn run_study(cfg: &StudyConfig) -> Result<ErrorTable, HarnessError> {
    run_study_with(cfg, |_| {})
}

/// Run a full study, reporting each finished cell through `progress`.
///
/// The reference run comes first; every swept cell is then compared against
/// its difference-field trace. Cells are solved sequentially in row-major
/// order, so equal configs produce bitwise-equal tables.
pub fn run_study_with(
    cfg: &StudyConfig,
    mut progress: impl FnMut(&str),
) -> Result<ErrorTable, HarnessError> {
    cfg.validate()?;
    let tc = transform_coefficients(cfg)?;

    let t0 = Instant::now();
    let (rx, rv) = {
        let op = operator_at(cfg, &tc, cfg.reference.h)?;
        difference_trace(cfg, &tc, &op, cfg.reference.n)?
    };
    progress(&format!(
        "reference N = {}, h = {}: {:.1}s",
        cfg.reference.n,
        cfg.reference.h,
        t0.elapsed().as_secs_f64()
    ));

    let rows = cfg.bloch_counts.len();
    let cols = cfg.mesh_widths.len();
    let mut errors = vec![vec![0.0f64; cols]; rows];
    for (j, &h) in cfg.mesh_widths.iter().enumerate() {
        let op = operator_at(cfg, &tc, h)?;
        for (i, &n) in cfg.bloch_counts.iter().enumerate() {
            if n == cfg.reference.n && h == cfg.reference.h {
                // The reference compared against itself.
                errors[i][j] = 0.0;
                continue;
            }
            let t = Instant::now();
            let (xs, vs) = difference_trace(cfg, &tc, &op, n)?;
            let e = trace_l2_error(&xs, &vs, &rx, &rv, cfg.period);
            progress(&format!(
                "N = {n}, h = {h}: err = {e:.3e} ({:.1}s)",
                t.elapsed().as_secs_f64()
            ));
            errors[i][j] = e;
        }
    }
    Ok(ErrorTable::with_orders(
        cfg.bloch_counts.clone(),
        cfg.mesh_widths.clone(),
        errors,
        cfg.reference.n,
        cfg.reference.h,
    ))
}
