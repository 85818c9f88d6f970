//! Single-cell solver for the quasi-periodic Helmholtz problem with a
//! Fourier-mode radiation condition on the truncation line.
//!
//! The field with phase shift `alpha` across one period is written as
//! `exp(i alpha x1)` times a periodic factor; everything here works with that
//! periodic factor on the mesh of one cell. The variational system is
//!
//! `[S + i alpha T + (alpha^2 - k^2) M - B(alpha)] w = load`
//!
//! where `S`, `T`, `M` are the stiffness, first-order (antisymmetric), and
//! mass matrices of the cell with periodic identification and eliminated
//! surface row, and `B(alpha)` couples the truncation-line nodes through the
//! radiating mode expansion. The load is the incident-wave data for the total
//! field of a sound-soft surface.

use num_complex::Complex64;
use std::sync::Arc;
use thiserror::Error;

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::mesh::Mesh;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("incident direction requires |alpha| < k, got alpha={alpha}, k={k}")]
    EvanescentIncidence { alpha: f64, k: f64 },
    #[error("phase shift alpha={alpha} is numerically at a cutoff frequency (mode {mode})")]
    AtCutoff { alpha: f64, mode: i64 },
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("solve left relative residual {residual}, above {limit}")]
    BadResidual { residual: f64, limit: f64 },
}

/// One Rayleigh mode of the field above the truncation line.
#[derive(Clone, Copy, Debug)]
pub struct ReflectionMode {
    /// Mode index: transverse wavenumber is `alpha + 2 pi n / period`.
    pub n: i64,
    /// Vertical wavenumber: real for propagating, positive imaginary for
    /// evanescent modes.
    pub beta: Complex64,
    /// Amplitude of the scattered mode at the truncation line.
    pub amplitude: Complex64,
}

/// Vertical wavenumber of mode `n` at phase shift `alpha`:
/// `sqrt(k^2 - t^2)` for `t = alpha + dual * n`, continued as `i sqrt(t^2 - k^2)`
/// past cutoff.
pub fn beta_mode(k: f64, alpha: f64, dual: f64, n: i64) -> Complex64 {
    let t = alpha + dual * n as f64;
    let d = k * k - t * t;
    if d >= 0.0 {
        Complex64::new(d.sqrt(), 0.0)
    } else {
        Complex64::new(0.0, (-d).sqrt())
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Default number of retained modes on each side of 0: enough to cover all
/// propagating modes with a fixed evanescent margin.
pub fn default_mode_count(k: f64, period: f64) -> i64 {
    let prop = (k * period / (2.0 * std::f64::consts::PI)).ceil() as i64;
    (prop + 8).max(16)
}

/// Assembled cell operator: holds the mesh and the three alpha-independent
/// volume matrices in triplet form, and builds the full system per alpha.
pub struct CellOperator {
    mesh: Arc<Mesh>,
    k: f64,
    modes: i64,
    /// (row, col, stiffness, first-order, mass) per element contribution;
    /// duplicates are summed when the sparse matrix is built.
    vol: Vec<(usize, usize, f64, f64, f64)>,
}

impl CellOperator {
    pub fn new(mesh: Arc<Mesh>, k: f64) -> Self {
        let modes = default_mode_count(k, mesh.period());
        Self::with_modes(mesh, k, modes)
    }

    pub fn with_modes(mesh: Arc<Mesh>, k: f64, modes: i64) -> Self {
        let mut vol = Vec::with_capacity(9 * mesh.elements().len());
        for el in mesh.elements() {
            let area = 0.5 * el.double_area();
            let g = el.basis_gradients();
            for r in 0..3 {
                let Some(dr) = el.dof[r] else { continue };
                for c in 0..3 {
                    let Some(dc) = el.dof[c] else { continue };
                    let s = area * (g[r][0] * g[c][0] + g[r][1] * g[c][1]);
                    // integral of (phi_c d1 phi_r - phi_r d1 phi_c)
                    let t = area / 3.0 * (g[r][0] - g[c][0]);
                    let m = area / 12.0 * if r == c { 2.0 } else { 1.0 };
                    vol.push((dr, dc, s, t, m));
                }
            }
        }
        Self {
            mesh,
            k,
            modes,
            vol,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn wavenumber(&self) -> f64 {
        self.k
    }

    pub fn modes(&self) -> i64 {
        self.modes
    }

    /// Dual period of the mode lattice.
    pub fn dual(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.mesh.period()
    }

    pub fn beta(&self, alpha: f64, n: i64) -> Complex64 {
        beta_mode(self.k, alpha, self.dual(), n)
    }

    /// Smallest |beta_n| over retained modes; zero signals a cutoff frequency
    /// where the radiation condition degenerates.
    pub fn cutoff_distance(&self, alpha: f64) -> f64 {
        (-self.modes..=self.modes)
            .map(|n| self.beta(alpha, n).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Fourier coefficient of the truncation-line hat function at node `l`
    /// for mode `n`, times the period: `spacing * sinc^2(pi n / nx) * exp(-i dual n x_l)`.
    pub fn trace_factor(&self, n: i64, l: usize) -> Complex64 {
        let nx = self.mesh.columns();
        let d = self.mesh.top_spacing();
        let f = d * sinc(std::f64::consts::PI * n as f64 / nx as f64).powi(2);
        let x = self.mesh.top_abscissae()[l];
        f * Complex64::from_polar(1.0, -self.dual() * n as f64 * x)
    }

    /// Mode coefficients of a truncation-line trace: entry `j` is the
    /// coefficient of mode `n = j - modes`.
    pub fn trace_modes(&self, top_values: &[Complex64]) -> Vec<Complex64> {
        let nx = self.mesh.columns();
        let period = self.mesh.period();
        let d = self.mesh.top_spacing();
        let xs = self.mesh.top_abscissae();
        let mut out = Vec::with_capacity((2 * self.modes + 1) as usize);
        for n in -self.modes..=self.modes {
            let f = d * sinc(std::f64::consts::PI * n as f64 / nx as f64).powi(2);
            let mut acc = Complex64::ZERO;
            for (l, &v) in top_values.iter().enumerate() {
                acc += v * Complex64::from_polar(1.0, -self.dual() * n as f64 * xs[l]);
            }
            out.push(acc * f / period);
        }
        out
    }

    /// Full system matrix `S + i alpha T + (alpha^2 - k^2) M - B(alpha)`.
    pub fn system_matrix(&self, alpha: f64) -> Result<SparseColMat<usize, Complex64>, CellError> {
        let m = self.mesh.free_count();
        let nx = self.mesh.columns();
        let top0 = self.mesh.top_dofs().start;
        let mut tri: Vec<Triplet<usize, usize, Complex64>> =
            Vec::with_capacity(self.vol.len() + nx * nx);
        let shift = alpha * alpha - self.k * self.k;
        for &(r, c, s, t, mm) in &self.vol {
            tri.push(Triplet::new(r, c, Complex64::new(s + shift * mm, alpha * t)));
        }

        // Radiation block on the truncation line. With uniform spacing the
        // block is circulant: entry (r, c) depends on (r - c) mod nx only.
        //   B[r, c] = (i / period) sum_n conj(tau_n(r)) beta_n tau_n(c)
        //           = (i / period) sum_n f_n^2 beta_n exp(i dual n d (r - c))
        let period = self.mesh.period();
        let d = self.mesh.top_spacing();
        let mut ring = vec![Complex64::ZERO; nx];
        for n in -self.modes..=self.modes {
            let f = d * sinc(std::f64::consts::PI * n as f64 / nx as f64).powi(2);
            let w = Complex64::new(0.0, 1.0) / period * f * f * self.beta(alpha, n);
            let step = self.dual() * n as f64 * d;
            for (q, slot) in ring.iter_mut().enumerate() {
                *slot += w * Complex64::from_polar(1.0, step * q as f64);
            }
        }
        for r in 0..nx {
            for c in 0..nx {
                let q = (r + nx - c) % nx;
                tri.push(Triplet::new(top0 + r, top0 + c, -ring[q]));
            }
        }

        SparseColMat::<usize, Complex64>::try_new_from_triplets(m, m, &tri)
            .map_err(|e| CellError::Factorization(format!("assembly: {e:?}")))
    }

    /// Right-hand side for the total field of an incident plane wave with
    /// phase shift `alpha` (downward direction, unit amplitude): the data is
    /// constant along the truncation line, so its pairing with each hat
    /// function is exact.
    pub fn incident_load(&self, alpha: f64) -> Result<Mat<Complex64>, CellError> {
        if alpha.abs() >= self.k {
            return Err(CellError::EvanescentIncidence { alpha, k: self.k });
        }
        let beta0 = (self.k * self.k - alpha * alpha).sqrt();
        let m = self.mesh.free_count();
        let d = self.mesh.top_spacing();
        let amp = Complex64::new(0.0, -2.0 * beta0)
            * Complex64::from_polar(1.0, -beta0 * self.mesh.truncation())
            * d;
        let mut rhs = Mat::<Complex64>::zeros(m, 1);
        for dof in self.mesh.top_dofs() {
            rhs[(dof, 0)] = amp;
        }
        Ok(rhs)
    }

    /// Factor the system at one phase shift for repeated solves.
    pub fn factor(&self, alpha: f64) -> Result<CellFactor, CellError> {
        let tol = 1e-9 * self.k.max(1.0);
        if self.cutoff_distance(alpha) < tol {
            let mode = (-self.modes..=self.modes)
                .min_by(|&a, &b| {
                    self.beta(alpha, a)
                        .norm()
                        .partial_cmp(&self.beta(alpha, b).norm())
                        .unwrap()
                })
                .unwrap();
            return Err(CellError::AtCutoff { alpha, mode });
        }
        let a = self.system_matrix(alpha)?;
        let symbolic = SymbolicLu::try_new(a.symbolic())
            .map_err(|e| CellError::Factorization(format!("symbolic: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(symbolic, a.as_ref())
            .map_err(|e| CellError::Factorization(format!("numeric: {e:?}")))?;
        Ok(CellFactor { matrix: a, lu })
    }

    /// Solve the incident-wave problem at one phase shift and return the
    /// periodic factor of the total field at the free nodes.
    pub fn solve_incident(&self, alpha: f64) -> Result<CellSolution, CellError> {
        let factor = self.factor(alpha)?;
        let rhs = self.incident_load(alpha)?;
        let sol = factor.solve_checked(&rhs)?;
        let values: Vec<Complex64> = (0..self.mesh.free_count()).map(|i| sol[(i, 0)]).collect();
        Ok(CellSolution { alpha, values })
    }

    /// Rayleigh modes of the scattered field read off a total-field solution.
    pub fn reflection_coefficients(
        &self,
        alpha: f64,
        solution: &CellSolution,
    ) -> Vec<ReflectionMode> {
        let top = self.mesh.top_trace(&solution.values);
        let coeffs = self.trace_modes(&top);
        let beta0 = self.beta(alpha, 0);
        let incident_at_top = Complex64::from_polar(1.0, -beta0.re * self.mesh.truncation());
        coeffs
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let n = j as i64 - self.modes;
                let amplitude = if n == 0 { c - incident_at_top } else { c };
                ReflectionMode {
                    n,
                    beta: self.beta(alpha, n),
                    amplitude,
                }
            })
            .collect()
    }

    /// Deviation of the propagating-mode energy flux from the incident flux;
    /// zero for an exact solution of the discrete system.
    pub fn energy_defect(&self, alpha: f64, modes: &[ReflectionMode]) -> f64 {
        let beta0 = self.beta(alpha, 0).re;
        let flux: f64 = modes
            .iter()
            .filter(|m| m.beta.im == 0.0 && m.beta.re > 0.0)
            .map(|m| m.beta.re / beta0 * m.amplitude.norm_sqr())
            .sum();
        (flux - 1.0).abs()
    }
}

/// LU factorization of one cell system, reusable across right-hand sides.
pub struct CellFactor {
    matrix: SparseColMat<usize, Complex64>,
    lu: Lu<usize, Complex64>,
}

impl CellFactor {
    pub fn solve(&self, rhs: &Mat<Complex64>) -> Mat<Complex64> {
        self.lu.solve(rhs)
    }

    /// Overwrite `rhs` with the solution; avoids allocating per call in
    /// multi-right-hand-side loops.
    pub fn solve_in_place(&self, rhs: &mut Mat<Complex64>) {
        self.lu.solve_in_place(rhs.as_mut());
    }

    /// Solve and verify the relative residual of the first column.
    pub fn solve_checked(&self, rhs: &Mat<Complex64>) -> Result<Mat<Complex64>, CellError> {
        let x = self.lu.solve(rhs);
        let r = self.residual(&x, rhs);
        const LIMIT: f64 = 1e-8;
        if !(r < LIMIT) {
            return Err(CellError::BadResidual {
                residual: r,
                limit: LIMIT,
            });
        }
        Ok(x)
    }

    /// Relative residual `|A x - b| / |b|` over all columns.
    pub fn residual(&self, x: &Mat<Complex64>, b: &Mat<Complex64>) -> f64 {
        let a = &self.matrix;
        let mut num = 0.0;
        let mut den = 0.0;
        for col in 0..b.ncols() {
            let mut ax = vec![Complex64::ZERO; a.nrows()];
            for j in 0..a.ncols() {
                let xj = x[(j, col)];
                if xj == Complex64::ZERO {
                    continue;
                }
                for (i, v) in a.row_idx_of_col(j).zip(a.val_of_col(j)) {
                    ax[i] += *v * xj;
                }
            }
            for i in 0..a.nrows() {
                num += (ax[i] - b[(i, col)]).norm_sqr();
                den += b[(i, col)].norm_sqr();
            }
        }
        // A zero right-hand side (possibly via squared-norm underflow) has
        // no relative residual; report exact success or exact failure.
        if den == 0.0 {
            return if num == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (num / den).sqrt()
    }

    pub fn matrix(&self) -> &SparseColMat<usize, Complex64> {
        &self.matrix
    }
}

/// Periodic factor of a one-cell solution at the free nodes.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub alpha: f64,
    pub values: Vec<Complex64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{catalog, SurfaceProfile, SurfaceSelect};
    use crate::mesh::Mesh;

    fn flat_profile(c: f64) -> SurfaceProfile {
        SurfaceProfile::from_fourier(2.0 * std::f64::consts::PI, c, &[], &[]).unwrap()
    }

    fn build(profile: &SurfaceProfile, nx: usize, ny: usize) -> Arc<Mesh> {
        Arc::new(Mesh::build(profile, SurfaceSelect::Base, 4.0, nx, ny).unwrap())
    }

    #[test]
    fn beta_values_match_frozen() {
        // Independently computed for k=1, alpha=0.3, dual=1.
        let cases = [
            (-2, Complex64::new(0.0, 1.3747727084867518)),
            (-1, Complex64::new(0.714142842854285, 0.0)),
            (0, Complex64::new(0.9539392014169457, 0.0)),
            (1, Complex64::new(0.0, 0.8306623862918076)),
            (2, Complex64::new(0.0, 2.071231517720798)),
        ];
        for (n, want) in cases {
            let got = beta_mode(1.0, 0.3, 1.0, n);
            assert!((got - want).norm() < 1e-14, "mode {n}: {got} vs {want}");
        }
    }

    #[test]
    fn default_mode_count_covers_propagating() {
        let l = 2.0 * std::f64::consts::PI;
        assert_eq!(default_mode_count(1.0, l), 16);
        assert_eq!(default_mode_count(10.0, l), 18);
        // All propagating modes fit: |alpha + n| <= k implies |n| <= k + 1/2.
        let j = default_mode_count(10.0, l);
        assert!(j as f64 > 10.0 + 0.5);
    }

    #[test]
    fn trace_factor_matches_quadrature() {
        // The closed form is the integral of the periodic hat at a top node
        // against exp(-i dual n x); check against fine Simpson quadrature.
        let mesh = build(&catalog::f1(), 12, 5);
        let op = CellOperator::new(mesh.clone(), 1.0);
        let d = mesh.top_spacing();
        let xs = mesh.top_abscissae();
        for &(n, l) in &[(0i64, 0usize), (1, 3), (-2, 7), (5, 11), (12, 2)] {
            let xl = xs[l];
            // hat(x) supported on [xl - d, xl + d]
            let steps = 4000;
            let mut acc = Complex64::ZERO;
            for s in 0..steps {
                let (x0, x1) = (
                    xl - d + 2.0 * d * s as f64 / steps as f64,
                    xl - d + 2.0 * d * (s + 1) as f64 / steps as f64,
                );
                let f = |x: f64| {
                    let hat = 1.0 - (x - xl).abs() / d;
                    hat * Complex64::from_polar(1.0, -(n as f64) * op.dual() * x)
                };
                acc += (x1 - x0) / 6.0 * (f(x0) + 4.0 * f(0.5 * (x0 + x1)) + f(x1));
            }
            let got = op.trace_factor(n, l);
            assert!((got - acc).norm() < 1e-10, "n={n} l={l}: {got} vs {acc}");
        }
    }

    #[test]
    fn stiffness_annihilates_constants_and_first_order_sums_vanish() {
        // Rows of S and T against the all-ones vector vanish for nodes whose
        // support avoids the surface row; exercises the periodic
        // identification as well.
        let mesh = build(&catalog::f1(), 10, 6);
        let op = CellOperator::new(mesh.clone(), 1.0);
        let m = mesh.free_count();
        let mut s_row = vec![0.0; m];
        let mut t_row = vec![0.0; m];
        for &(r, _, s, t, _) in &op.vol {
            s_row[r] += s;
            t_row[r] += t;
        }
        // Rows in grid rows >= 2 (dof index >= 2*nx) have full interior support.
        for dof in 2 * 10..m {
            assert!(s_row[dof].abs() < 1e-12, "S row {dof}: {}", s_row[dof]);
            assert!(t_row[dof].abs() < 1e-12, "T row {dof}: {}", t_row[dof]);
        }
    }

    #[test]
    fn flat_surface_single_mode_and_energy_exact() {
        // Flat surface: the discrete solution is a single Rayleigh mode, the
        // zeroth reflection coefficient has unit modulus to roundoff, and the
        // energy balance closes exactly.
        let profile = flat_profile(1.75);
        let mesh = build(&profile, 32, 11);
        let op = CellOperator::new(mesh, 1.0);
        let alpha = 0.3;
        let sol = op.solve_incident(alpha).unwrap();
        let modes = op.reflection_coefficients(alpha, &sol);
        let r0 = modes.iter().find(|m| m.n == 0).unwrap().amplitude;
        assert!((r0.norm() - 1.0).abs() < 1e-12, "|R0| = {}", r0.norm());
        for m in &modes {
            if m.n != 0 {
                assert!(m.amplitude.norm() < 1e-12, "mode {} leaked", m.n);
            }
        }
        assert!(op.energy_defect(alpha, &modes) < 1e-12);
    }

    #[test]
    fn flat_surface_phase_converges_second_order() {
        // The phase of R0 carries the grid dispersion error, which must decay
        // at second order; the frozen exact value is -exp(i beta0 (H - 2c)).
        let profile = flat_profile(1.75);
        let exact = Complex64::new(-0.8883902231479387, -0.45908911053863577);
        let alpha = 0.3;
        let err = |nx: usize, ny: usize| {
            let op = CellOperator::new(build(&profile, nx, ny), 1.0);
            let sol = op.solve_incident(alpha).unwrap();
            let modes = op.reflection_coefficients(alpha, &sol);
            (modes.iter().find(|m| m.n == 0).unwrap().amplitude - exact).norm()
        };
        let (e1, e2) = (err(16, 6), err(32, 12));
        let rate = e1 / e2;
        assert!(rate > 3.0 && rate < 5.2, "rate {rate}, errors {e1} {e2}");
    }

    #[test]
    fn flat_surface_trace_matches_analytic() {
        // Periodic factor on the truncation line for the flat surface, frozen
        // from the closed-form solution.
        let profile = flat_profile(1.75);
        let op = CellOperator::new(build(&profile, 48, 18), 1.0);
        let sol = op.solve_incident(0.3).unwrap();
        let top = op.mesh().top_trace(&sol.values);
        let want = Complex64::new(-1.6696192206260045, 0.1651554356925799);
        for v in top {
            assert!((v - want).norm() < 6e-3, "{v} vs {want}");
        }
    }

    #[test]
    fn corrugated_surface_conserves_energy_exactly() {
        // Energy balance is a discrete identity, independent of resolution;
        // it validates every sign in the volume terms, radiation block, and
        // load at once.
        let op = CellOperator::new(build(&catalog::f1(), 20, 9), 1.0);
        let alpha = 0.3;
        let sol = op.solve_incident(alpha).unwrap();
        let modes = op.reflection_coefficients(alpha, &sol);
        assert!(
            op.energy_defect(alpha, &modes) < 1e-10,
            "defect {}",
            op.energy_defect(alpha, &modes)
        );
        // Multiple propagating modes carry energy for k > 1.
        let op = CellOperator::new(build(&catalog::f2(), 24, 10), 10.0f64.sqrt());
        let alpha = 0.5;
        let sol = op.solve_incident(alpha).unwrap();
        let modes = op.reflection_coefficients(alpha, &sol);
        assert!(op.energy_defect(alpha, &modes) < 1e-10);
        let carrying = modes
            .iter()
            .filter(|m| m.beta.im == 0.0 && m.amplitude.norm() > 1e-6)
            .count();
        assert!(carrying > 1, "expected several propagating modes");
    }

    #[test]
    fn rejects_cutoff_and_evanescent_incidence() {
        let op = CellOperator::new(build(&catalog::f1(), 8, 4), 1.0);
        // alpha = 0: mode -1 and +1 sit exactly at cutoff for k = 1? No:
        // |0 + 1| = 1 = k, so beta_1 = 0 exactly.
        assert!(matches!(op.factor(0.0), Err(CellError::AtCutoff { .. })));
        assert!(op.incident_load(1.5).is_err());
        // A generic interior alpha is accepted.
        assert!(op.factor(0.3).is_ok());
    }

    #[test]
    fn residual_check_passes_on_solve() {
        let op = CellOperator::new(build(&catalog::f1(), 16, 7), 2.0);
        let f = op.factor(0.4).unwrap();
        let rhs = op.incident_load(0.4).unwrap();
        let x = f.solve_checked(&rhs).unwrap();
        assert!(f.residual(&x, &rhs) < 1e-10);
    }
}
