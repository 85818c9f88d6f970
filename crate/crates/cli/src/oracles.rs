//! Analytic oracle suite: fast cross-checks of every module against closed
//! forms or independently recomputed references, runnable from the CLI.
//!
//! Each oracle names the invariant it guards and reports the measured
//! numbers next to the bounds they must satisfy. The mutation knobs exist
//! only to prove the suite would catch a miswired solver.

use std::sync::Arc;

use num_complex::Complex64;
use periodic_helmholtz::bloch::BrillouinGrid;
use periodic_helmholtz::coupled::{solve_perturbed, solve_perturbed_dense, CoupledOptions};
use periodic_helmholtz::geometry::{
    catalog, BlendProfile, CoefficientSample, DomainSpec, SurfaceProfile, SurfaceSelect,
    TransformCoefficients,
};
use periodic_helmholtz::highorder::{solve_high_order, ReparamKind};
use periodic_helmholtz::mesh::{trace_l2_error, Mesh};
use periodic_helmholtz::quasiperiodic::CellOperator;

use crate::study::divisions;
use crate::HarnessError;

const PI: f64 = std::f64::consts::PI;

/// Outcome of one oracle.
#[derive(Clone, Debug)]
pub struct OracleOutcome {
    /// Invariant the oracle guards.
    pub name: &'static str,
    pub passed: bool,
    /// Measured numbers next to the bounds they must satisfy.
    pub detail: String,
}

/// Diagnostic mutations proving the suite can catch a miswired solver.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleKnobs {
    /// Negate the coupling form in the production solver; the dense arbiter
    /// stays unmutated, so the agreement oracle must fail.
    pub flip_coupling_sign: bool,
    /// Force the radiation block to keep this many trace modes.
    pub modes_override: Option<i64>,
}

pub fn oracle_suite() -> Vec<OracleOutcome> {
    oracle_suite_with(OracleKnobs::default())
}

pub fn oracle_suite_with(knobs: OracleKnobs) -> Vec<OracleOutcome> {
    vec![
        flat_surface_trace(),
        energy_balance(knobs),
        bloch_round_trip(),
        panel_phase_integrals(),
        null_perturbation(knobs),
        dense_agreement(knobs),
        coefficient_jacobians(),
    ]
}

fn outcome(name: &'static str, body: Result<(bool, String), HarnessError>) -> OracleOutcome {
    match body {
        Ok((passed, detail)) => OracleOutcome {
            name,
            passed,
            detail,
        },
        Err(e) => OracleOutcome {
            name,
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

/// Deterministic uniform samples in [0, 1); splitmix64 with a fixed seed.
struct Rng(u64);

impl Rng {
    fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    fn in_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// The image-source solution for a flat sound-soft surface is exact; the
/// computed top trace must land on it at second order in the mesh width.
fn flat_surface_trace() -> OracleOutcome {
    let name = "flat surface trace matches the image-source closed form";
    let body = || -> Result<(bool, String), HarnessError> {
        let (k, alpha, height, trunc) = (1.0, 0.3, 1.75, 4.0);
        let profile = SurfaceProfile::new(2.0 * PI, move |_| [height, 0.0])?;
        let (nx, ny) = divisions(&profile, trunc, 0.08);
        let mesh = Arc::new(Mesh::build(
            &profile,
            SurfaceSelect::Base,
            trunc,
            nx,
            ny,
        )?);
        let op = CellOperator::new(mesh, k);
        let sol = op.solve_incident(alpha)?;
        let top = op.mesh().top_trace(&sol.values);
        let beta = (k * k - alpha * alpha).sqrt();
        // Incident plus image-reflected wave, as a periodic factor on the
        // truncation line.
        let want = (-Complex64::i() * beta * trunc).exp()
            - (Complex64::i() * beta * (trunc - 2.0 * height)).exp();
        let err = top
            .iter()
            .map(|v| (v - want).norm())
            .fold(0.0, f64::max)
            / want.norm();
        const BOUND: f64 = 2.0e-3;
        Ok((
            err < BOUND,
            format!("relative trace error {err:.3e} (bound {BOUND:.1e}) at h = 0.08"),
        ))
    };
    outcome(name, body())
}

/// The discrete energy identity holds to roundoff at any resolution, and
/// the reported reflection modes must cover every propagating order; a
/// radiation block truncated below the propagating count yields a wrong yet
/// perfectly balanced solution, which only the coverage clause catches.
fn energy_balance(knobs: OracleKnobs) -> OracleOutcome {
    let name = "reflected energy balances the incident flux over all propagating orders";
    let body = || -> Result<(bool, String), HarnessError> {
        let (k, alpha) = (10.0f64.sqrt(), 0.5);
        let profile = catalog::f2();
        let dual = 2.0 * PI / profile.period();
        let mesh = Arc::new(Mesh::build(&profile, SurfaceSelect::Base, 4.0, 24, 10)?);
        let op = match knobs.modes_override {
            Some(j) => CellOperator::with_modes(mesh, k, j),
            None => CellOperator::new(mesh, k),
        };
        let sol = op.solve_incident(alpha)?;
        let modes = op.reflection_coefficients(alpha, &sol);
        let defect = op.energy_defect(alpha, &modes);

        let lo = ((-k - alpha) / dual).ceil() as i64;
        let hi = ((k - alpha) / dual).floor() as i64;
        let missing: Vec<i64> = (lo..=hi)
            .filter(|&n| (alpha + n as f64 * dual).abs() < k)
            .filter(|&n| !modes.iter().any(|m| m.n == n))
            .collect();
        const BOUND: f64 = 1.0e-8;
        Ok((
            defect < BOUND && missing.is_empty(),
            format!(
                "defect {defect:.2e} (bound {BOUND:.0e}), missing propagating orders {missing:?}"
            ),
        ))
    };
    outcome(name, body())
}

/// Transforming pointwise samples back to panel coefficients inverts the
/// panel synthesis exactly on resolved data.
fn bloch_round_trip() -> OracleOutcome {
    let name = "Brillouin synthesis then analysis returns the panel coefficients";
    let body = || -> Result<(bool, String), HarnessError> {
        let mut rng = Rng(0x0BADC0FFEE);
        let mut worst = 0.0f64;
        for n in [16usize, 200] {
            let g = BrillouinGrid::uniform(2.0 * PI, n)?;
            let coeffs: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.in_range(-1.0, 1.0), rng.in_range(-1.0, 1.0)))
                .collect();
            for &x in &[0.3, -2.9] {
                let field = g.inverse_at(x, &coeffs, &g.window());
                let back = g.forward_at(x, &field)?;
                let err = coeffs
                    .iter()
                    .zip(&back)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
        const BOUND: f64 = 1.0e-10;
        Ok((
            worst < BOUND,
            format!("worst round-trip error {worst:.3e} (bound {BOUND:.0e}) at n = 16, 200"),
        ))
    };
    outcome(name, body())
}

/// Panel phase integrals have a closed form; composite Simpson quadrature
/// of the defining integral must reproduce it to near roundoff.
fn panel_phase_integrals() -> OracleOutcome {
    let name = "closed-form panel phase integrals match quadrature";
    let body = || -> Result<(bool, String), HarnessError> {
        let n = 8usize;
        let g = BrillouinGrid::uniform(2.0 * PI, n)?;
        let mut rng = Rng(0x5EED);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let j = (rng.next_f64() * n as f64) as usize % n;
            let y = rng.in_range(-25.0, 25.0);
            // Uniform panels are centered on their nodes with width equal
            // to the panel weight.
            let w = g.weight(j);
            let lo = g.node(j) - 0.5 * w;
            let exact = g.panel_phase_integral(j, y);
            // 512 panels keep the Simpson error itself well under the bound
            // for the sampled phase range.
            let quad = simpson_phase(lo, lo + w, y, 512);
            worst = worst.max((exact - quad).norm());
        }
        const BOUND: f64 = 1.0e-12;
        Ok((
            worst < BOUND,
            format!("worst |closed form - quadrature| {worst:.3e} (bound {BOUND:.0e}) over 100 samples"),
        ))
    };
    outcome(name, body())
}

/// Composite Simpson rule for the phase integral over one panel.
fn simpson_phase(lo: f64, hi: f64, y: f64, panels: usize) -> Complex64 {
    let f = |a: f64| (Complex64::i() * a * y).exp();
    let dx = (hi - lo) / panels as f64;
    let mut acc = Complex64::ZERO;
    for m in 0..panels {
        let a = lo + dx * m as f64;
        acc += (f(a) + 4.0 * f(a + 0.5 * dx) + f(a + dx)) * (dx / 6.0);
    }
    acc
}

/// With no perturbation the difference field must vanish identically, for
/// both the uniform-panel and the clustered-grid solvers. The sign mutation
/// cannot disturb this: with nothing to couple to, a flipped coupling still
/// produces zero.
fn null_perturbation(knobs: OracleKnobs) -> OracleOutcome {
    let name = "null perturbation leaves a vanishing difference field";
    let body = || -> Result<(bool, String), HarnessError> {
        let (k, alpha) = (1.0, 0.3);
        let profile = catalog::f1();
        let period = profile.period();
        let mesh = Arc::new(Mesh::build(&profile, SurfaceSelect::Base, 4.0, 24, 10)?);
        let op = CellOperator::new(mesh, k);
        let tc = TransformCoefficients::new(
            catalog::f1(),
            DomainSpec::new(4.0, 3.9),
            BlendProfile::Cubic,
        )?;
        let opts = CoupledOptions {
            flip_coupling_sign: knobs.flip_coupling_sign,
            ..CoupledOptions::default()
        };
        let grid = BrillouinGrid::uniform(period, 4)?;
        let a = solve_perturbed(&op, &tc, alpha, &grid, &opts)?;
        let b = solve_high_order(&op, &tc, alpha, 4, ReparamKind::Polynomial, &opts)?;
        let mut worst = 0.0f64;
        for sol in [&a, &b] {
            let xs = sol.mesh().top_abscissae();
            let vs = sol.mesh().top_trace(&sol.difference_at_nodes(0));
            let zeros = vec![Complex64::ZERO; xs.len()];
            worst = worst.max(trace_l2_error(&xs, &vs, &xs, &zeros, period));
        }
        const BOUND: f64 = 1.0e-9;
        Ok((
            worst < BOUND,
            format!("worst difference-trace norm {worst:.3e} (bound {BOUND:.0e})"),
        ))
    };
    outcome(name, body())
}

/// The Schur-eliminated production solve and the dense block solve answer
/// the same linear system; their solutions must agree to solver precision.
/// The dense arm never receives the mutation knobs.
fn dense_agreement(knobs: OracleKnobs) -> OracleOutcome {
    let name = "Schur elimination agrees with the dense block arbiter";
    let body = || -> Result<(bool, String), HarnessError> {
        let (k, alpha) = (1.0, 0.3);
        let profile = catalog::f1().with_perturbation(catalog::p1())?;
        let period = profile.period();
        let mesh = Arc::new(Mesh::build(&profile, SurfaceSelect::Base, 4.0, 12, 5)?);
        let op = CellOperator::new(mesh, k);
        let tc = TransformCoefficients::new(
            profile,
            DomainSpec::new(4.0, 3.9),
            BlendProfile::Cubic,
        )?;
        let grid = BrillouinGrid::uniform(period, 4)?;
        let schur_opts = CoupledOptions {
            flip_coupling_sign: knobs.flip_coupling_sign,
            ..CoupledOptions::default()
        };
        let a = solve_perturbed(&op, &tc, alpha, &grid, &schur_opts)?;
        let b = solve_perturbed_dense(&op, &tc, alpha, &grid, &CoupledOptions::default())?;

        let mut scale = 0.0f64;
        let mut gap = 0.0f64;
        for (x, y) in a.coupled_values.iter().zip(&b.coupled_values) {
            scale = scale.max(y.norm());
            gap = gap.max((x - y).norm());
        }
        for (ca, cb) in a.components.iter().zip(&b.components) {
            for (x, y) in ca.iter().zip(cb) {
                scale = scale.max(y.norm());
                gap = gap.max((x - y).norm());
            }
        }
        let rel = gap / scale;
        const BOUND: f64 = 1.0e-10;
        Ok((
            rel < BOUND,
            format!("relative solution gap {rel:.3e} (bound {BOUND:.0e})"),
        ))
    };
    outcome(name, body())
}

/// Jacobian of the domain map by central differences, recomputed here
/// independently of the geometry module.
pub fn fd_jacobian(
    tc: &TransformCoefficients,
    x1: f64,
    x2: f64,
    step: f64,
) -> Result<[[f64; 2]; 2], HarnessError> {
    let f = |a: f64, b: f64| tc.map_point(a, b);
    let (pp, pm) = (f(x1 + step, x2)?, f(x1 - step, x2)?);
    let (qp, qm) = (f(x1, x2 + step)?, f(x1, x2 - step)?);
    Ok([
        [
            (pp[0] - pm[0]) / (2.0 * step),
            (qp[0] - qm[0]) / (2.0 * step),
        ],
        [
            (pp[1] - pm[1]) / (2.0 * step),
            (qp[1] - qm[1]) / (2.0 * step),
        ],
    ])
}

/// Transform coefficients implied by a Jacobian: the determinant-weighted
/// inverse Gram matrix and the determinant itself.
pub fn coeffs_from_jacobian(j: [[f64; 2]; 2]) -> CoefficientSample {
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let inv = [
        [j[1][1] / det, -j[0][1] / det],
        [-j[1][0] / det, j[0][0] / det],
    ];
    let mut a = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            a[r][c] = det.abs() * (inv[r][0] * inv[c][0] + inv[r][1] * inv[c][1]);
        }
    }
    CoefficientSample { a, c: det.abs() }
}

/// Largest entrywise gap between two coefficient samples.
pub fn sample_gap(s: &CoefficientSample, t: &CoefficientSample) -> f64 {
    let mut gap = (s.c - t.c).abs();
    for r in 0..2 {
        for c in 0..2 {
            gap = gap.max((s.a[r][c] - t.a[r][c]).abs());
        }
    }
    gap
}

/// The analytic transform coefficients must match the ones rebuilt from a
/// finite-difference Jacobian of the map, improving at second order as the
/// step shrinks.
fn coefficient_jacobians() -> OracleOutcome {
    let name = "analytic transform coefficients match finite differences of the map";
    let body = || -> Result<(bool, String), HarnessError> {
        let profile = catalog::f1().with_perturbation(catalog::p1())?;
        let tc = TransformCoefficients::new(
            profile,
            DomainSpec::new(4.0, 3.9),
            BlendProfile::Cubic,
        )?;
        let mut rng = Rng(0xFD_CAFE);
        let (mut worst_fine, mut worst_ratio) = (0.0f64, f64::INFINITY);
        for _ in 0..20 {
            let x1 = rng.in_range(-0.8, 0.8);
            let x2 = rng.in_range(2.8, 3.6);
            let want = tc.sample(x1, x2)?;
            let coarse = sample_gap(&coeffs_from_jacobian(fd_jacobian(&tc, x1, x2, 1e-3)?), &want);
            let fine = sample_gap(&coeffs_from_jacobian(fd_jacobian(&tc, x1, x2, 5e-4)?), &want);
            worst_fine = worst_fine.max(fine);
            // Points where both errors sit on the roundoff floor carry no
            // order information.
            if coarse > 1e-12 {
                worst_ratio = worst_ratio.min(coarse / fine.max(f64::MIN_POSITIVE));
            }
        }
        const FLOOR: f64 = 3.0;
        const FINE: f64 = 1.0e-6;
        Ok((
            worst_ratio > FLOOR && worst_fine < FINE,
            format!(
                "halving the step shrank the gap by at least {worst_ratio:.2}x (needs > {FLOOR}), worst fine-step gap {worst_fine:.2e} (bound {FINE:.0e})"
            ),
        ))
    };
    outcome(name, body())
}
