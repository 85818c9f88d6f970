//! Surface profiles, the domain-flattening diffeomorphism, and the transformed
//! PDE coefficients it induces.
//!
//! A scattering surface is the graph of a periodic function `zeta`; a locally
//! perturbed surface adds a compactly supported bump `p`. The diffeomorphism
//! maps the unperturbed domain onto the perturbed one by blending the bump into
//! the strip between the surface and the truncation line, which turns the
//! perturbed-domain Helmholtz problem into one on the fixed domain with
//! variable matrix/scalar coefficients.

use std::sync::Arc;
use thiserror::Error;

/// Value and first derivative of a scalar function of one variable.
pub type Jet1 = [f64; 2];

type SurfaceFn = Arc<dyn Fn(f64) -> Jet1 + Send + Sync>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("period must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("point x2={x2} outside the strip [{lower}, {upper}] at x1={x1}")]
    OutsideStrip {
        x1: f64,
        x2: f64,
        lower: f64,
        upper: f64,
    },
    #[error("heights must satisfy sup(surface) < blend height < truncation height; got sup={sup}, blend={blend}, trunc={trunc}")]
    BadHeights { sup: f64, blend: f64, trunc: f64 },
    #[error("perturbation support [{0}, {1}] is not inside one period")]
    BadSupport(f64, f64),
    #[error("mapping is orientation-degenerate at x1={x1}, x2={x2} (det={det})")]
    Degenerate { x1: f64, x2: f64, det: f64 },
}

/// Compactly supported surface perturbation with analytic derivative.
#[derive(Clone)]
pub struct Perturbation {
    support: (f64, f64),
    eval: SurfaceFn,
}

impl Perturbation {
    /// `eval` must return value and derivative, and must vanish (with its
    /// derivative) outside `support`.
    pub fn new(
        support: (f64, f64),
        eval: impl Fn(f64) -> Jet1 + Send + Sync + 'static,
    ) -> Result<Self, GeometryError> {
        if !(support.0 < support.1) || !support.0.is_finite() || !support.1.is_finite() {
            return Err(GeometryError::BadSupport(support.0, support.1));
        }
        Ok(Self {
            support,
            eval: Arc::new(eval),
        })
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn eval(&self, x1: f64) -> Jet1 {
        if x1 <= self.support.0 || x1 >= self.support.1 {
            [0.0, 0.0]
        } else {
            (self.eval)(x1)
        }
    }
}

/// Periodic surface profile, optionally carrying a perturbation.
///
/// `base_eval` is the periodic background surface; `perturbed_eval` adds the
/// bump. Derivatives are supplied analytically by the callbacks; nothing in the
/// hot path differentiates numerically.
#[derive(Clone)]
pub struct SurfaceProfile {
    period: f64,
    base: SurfaceFn,
    perturbation: Option<Perturbation>,
}

/// Which surface a query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfaceSelect {
    Base,
    Perturbed,
}

impl SurfaceProfile {
    pub fn new(
        period: f64,
        base: impl Fn(f64) -> Jet1 + Send + Sync + 'static,
    ) -> Result<Self, GeometryError> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(GeometryError::BadPeriod(period));
        }
        Ok(Self {
            period,
            base: Arc::new(base),
            perturbation: None,
        })
    }

    /// Truncated Fourier series `a0 + sum_m ac[m] cos(m w x) + as[m] sin(m w x)`
    /// with `w = 2 pi / period`; the usual way to define surfaces in config files.
    pub fn from_fourier(
        period: f64,
        a0: f64,
        cos_coeffs: &[f64],
        sin_coeffs: &[f64],
    ) -> Result<Self, GeometryError> {
        let w = 2.0 * std::f64::consts::PI / period;
        let ac: Vec<f64> = cos_coeffs.to_vec();
        let as_: Vec<f64> = sin_coeffs.to_vec();
        Self::new(period, move |x| {
            let mut v = a0;
            let mut d = 0.0;
            for (m, &c) in ac.iter().enumerate() {
                let f = (m + 1) as f64 * w;
                v += c * (f * x).cos();
                d -= c * f * (f * x).sin();
            }
            for (m, &s) in as_.iter().enumerate() {
                let f = (m + 1) as f64 * w;
                v += s * (f * x).sin();
                d += s * f * (f * x).cos();
            }
            [v, d]
        })
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Result<Self, GeometryError> {
        let half = 0.5 * self.period;
        if p.support.0 < -half || p.support.1 > half {
            return Err(GeometryError::BadSupport(p.support.0, p.support.1));
        }
        self.perturbation = Some(p);
        Ok(self)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn perturbation(&self) -> Option<&Perturbation> {
        self.perturbation.as_ref()
    }

    /// Support of the perturbation, if any.
    pub fn support(&self) -> Option<(f64, f64)> {
        self.perturbation.as_ref().map(|p| p.support)
    }

    pub fn base_eval(&self, x1: f64) -> Jet1 {
        (self.base)(x1)
    }

    pub fn perturbation_eval(&self, x1: f64) -> Jet1 {
        self.perturbation
            .as_ref()
            .map(|p| p.eval(x1))
            .unwrap_or([0.0, 0.0])
    }

    pub fn eval(&self, x1: f64, which: SurfaceSelect) -> Jet1 {
        let b = self.base_eval(x1);
        match which {
            SurfaceSelect::Base => b,
            SurfaceSelect::Perturbed => {
                let p = self.perturbation_eval(x1);
                [b[0] + p[0], b[1] + p[1]]
            }
        }
    }

    /// Sampled supremum of a surface over one period (used for height checks).
    pub fn sampled_sup(&self, which: SurfaceSelect) -> f64 {
        let n = 4096;
        let half = 0.5 * self.period;
        (0..=n)
            .map(|i| {
                let x = -half + self.period * i as f64 / n as f64;
                self.eval(x, which)[0]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Vertical extent of the computational strip: the truncation line sits at
/// `truncation`; the blend between perturbed and unperturbed geometry is
/// calibrated against `blend_height` (strictly between the surface and the
/// truncation line).
#[derive(Clone, Copy, Debug)]
pub struct DomainSpec {
    pub truncation: f64,
    pub blend_height: f64,
}

impl DomainSpec {
    pub fn new(truncation: f64, blend_height: f64) -> Self {
        Self {
            truncation,
            blend_height,
        }
    }

    pub fn validate(&self, profile: &SurfaceProfile) -> Result<(), GeometryError> {
        let sup = profile
            .sampled_sup(SurfaceSelect::Base)
            .max(profile.sampled_sup(SurfaceSelect::Perturbed));
        if !(sup < self.blend_height && self.blend_height < self.truncation) {
            return Err(GeometryError::BadHeights {
                sup,
                blend: self.blend_height,
                trunc: self.truncation,
            });
        }
        Ok(())
    }
}

/// Vertical decay profile of the diffeomorphism.
///
/// `Cubic` blends with `((x2-H)/(zeta-H))^3` all the way up to the truncation
/// line (the shipped default). `CubicCapped` multiplies the same blend by a
/// smooth vertical cutoff so the map is exactly the identity above
/// `blend_height`; both variants move the surface identically and are checked
/// against the same oracles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlendProfile {
    #[default]
    Cubic,
    CubicCapped,
}

/// The diffeomorphism between the unperturbed strip and the perturbed one,
/// together with the coefficients the change of variables induces in the
/// Helmholtz form.
#[derive(Clone)]
pub struct TransformCoefficients {
    profile: SurfaceProfile,
    spec: DomainSpec,
    blend: BlendProfile,
    /// Surfaces stay below this level; the capped blend is 1 below it.
    plateau: f64,
}

/// Symmetric 2x2 matrix coefficient and scalar coefficient at one point.
#[derive(Clone, Copy, Debug)]
pub struct CoefficientSample {
    /// Row-major symmetric matrix replacing the identity in the gradient term.
    pub a: [[f64; 2]; 2],
    /// Scalar replacing 1 in the zeroth-order term (the Jacobian determinant).
    pub c: f64,
}

impl CoefficientSample {
    pub const IDENTITY: Self = Self {
        a: [[1.0, 0.0], [0.0, 1.0]],
        c: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        self.a == Self::IDENTITY.a && self.c == 1.0
    }
}

/// Smooth step equal to 1 at `t <= 0`, 0 at `t >= 1`; value and derivative in `t`.
fn smooth_step_down(t: f64) -> Jet1 {
    fn q(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (-1.0 / t).exp()
        }
    }
    if t <= 0.0 {
        return [1.0, 0.0];
    }
    if t >= 1.0 {
        return [0.0, 0.0];
    }
    let (a, b) = (q(1.0 - t), q(t));
    let v = a / (a + b);
    // d/dt q(t) = q(t)/t^2; d/dt q(1-t) = -q(1-t)/(1-t)^2
    let da = -a / ((1.0 - t) * (1.0 - t));
    let db = b / (t * t);
    let d = (da * (a + b) - a * (da + db)) / ((a + b) * (a + b));
    [v, d]
}

impl TransformCoefficients {
    pub fn new(
        profile: SurfaceProfile,
        spec: DomainSpec,
        blend: BlendProfile,
    ) -> Result<Self, GeometryError> {
        spec.validate(&profile)?;
        let plateau = profile
            .sampled_sup(SurfaceSelect::Base)
            .max(profile.sampled_sup(SurfaceSelect::Perturbed));
        Ok(Self {
            profile,
            spec,
            blend,
            plateau,
        })
    }

    pub fn profile(&self) -> &SurfaceProfile {
        &self.profile
    }

    pub fn spec(&self) -> DomainSpec {
        self.spec
    }

    pub fn blend(&self) -> BlendProfile {
        self.blend
    }

    /// Horizontal interval where the coefficients may differ from the identity.
    pub fn horizontal_support(&self) -> Option<(f64, f64)> {
        self.profile.support()
    }

    /// Level above which the coefficients are exactly the identity.
    pub fn vertical_top(&self) -> f64 {
        match self.blend {
            BlendProfile::Cubic => self.spec.truncation,
            BlendProfile::CubicCapped => self.spec.blend_height,
        }
    }

    fn outside_support(&self, x1: f64) -> bool {
        match self.profile.support() {
            None => true,
            Some((a, b)) => x1 <= a || x1 >= b,
        }
    }

    /// Vertical shift `psi` added to `x2`, plus its two partial derivatives.
    /// Identity region returns exact zeros (by branch, not arithmetic).
    fn shift(&self, x1: f64, x2: f64) -> [f64; 3] {
        if self.outside_support(x1) || x2 >= self.vertical_top() {
            return [0.0, 0.0, 0.0];
        }
        let h = self.spec.truncation;
        let [z, dz] = self.profile.base_eval(x1);
        let [p, dp] = self.profile.perturbation_eval(x1);
        if p == 0.0 && dp == 0.0 {
            return [0.0, 0.0, 0.0];
        }
        let denom = z - h; // negative: the surface is below the truncation line
        let r = (x2 - h) / denom; // 1 at the surface, 0 at the truncation line
        let r2 = r * r;
        let r3 = r2 * r;
        let mut psi = r3 * p;
        let mut d1 = r3 * dp - 3.0 * r3 * p * dz / denom;
        let mut d2 = 3.0 * r2 * p / denom;
        if self.blend == BlendProfile::CubicCapped {
            // chi(x2): 1 below the surfaces' plateau, 0 above the blend height.
            let span = self.spec.blend_height - self.plateau;
            let t = (x2 - self.plateau) / span;
            let [chi, dchi_dt] = smooth_step_down(t);
            let dchi = dchi_dt / span;
            d1 *= chi;
            d2 = d2 * chi + psi * dchi;
            psi *= chi;
        }
        [psi, d1, d2]
    }

    /// Apply the diffeomorphism to a point of the unperturbed strip.
    pub fn map_point(&self, x1: f64, x2: f64) -> Result<[f64; 2], GeometryError> {
        let z = self.profile.base_eval(x1)[0];
        let h = self.spec.truncation;
        if x2 < z - 1e-12 || x2 > h + 1e-12 {
            return Err(GeometryError::OutsideStrip {
                x1,
                x2,
                lower: z,
                upper: h,
            });
        }
        let psi = self.shift(x1, x2)[0];
        Ok([x1, x2 + psi])
    }

    /// Transformed coefficients at a point of the unperturbed strip.
    ///
    /// With the Jacobian `J = [[1, 0], [d1 psi, 1 + d2 psi]]` this returns
    /// `a = |det J| J^{-1} J^{-T}` and `c = |det J|`; `a` is symmetric and
    /// positive definite whenever the map preserves orientation.
    pub fn sample(&self, x1: f64, x2: f64) -> Result<CoefficientSample, GeometryError> {
        let [psi, d1, d2] = self.shift(x1, x2);
        if psi == 0.0 && d1 == 0.0 && d2 == 0.0 {
            return Ok(CoefficientSample::IDENTITY);
        }
        let det = 1.0 + d2;
        if det <= 1e-10 {
            return Err(GeometryError::Degenerate { x1, x2, det });
        }
        let a = [[det, -d1], [-d1, (1.0 + d1 * d1) / det]];
        Ok(CoefficientSample { a, c: det })
    }
}

/// Built-in surfaces and perturbations used throughout the examples and tests.
pub mod catalog {
    use super::*;

    /// Smooth cutoff on `(a, b)`: 1 at the midpoint, 0 (with all derivatives)
    /// at the endpoints. Returns value and derivative.
    pub fn cutoff(a: f64, b: f64, t: f64) -> Jet1 {
        let s = (2.0 * t - a - b) / (b - a);
        if s.abs() >= 1.0 {
            return [0.0, 0.0];
        }
        let one_minus = 1.0 - s * s;
        let v = (1.0 - 1.0 / one_minus).exp();
        let dv_ds = v * (-2.0 * s / (one_minus * one_minus));
        [v, dv_ds * 2.0 / (b - a)]
    }

    /// Oscillatory periodic surface used as the first reference geometry.
    pub fn f1() -> SurfaceProfile {
        SurfaceProfile::new(2.0 * std::f64::consts::PI, |x| {
            [
                1.9 + x.sin() / 3.0 - (2.0 * x).cos() / 4.0,
                x.cos() / 3.0 + (2.0 * x).sin() / 2.0,
            ]
        })
        .expect("valid period")
    }

    /// Gentle cosine surface used as the second reference geometry.
    pub fn f2() -> SurfaceProfile {
        SurfaceProfile::new(2.0 * std::f64::consts::PI, |x| {
            [2.0 - x.cos() / 4.0, x.sin() / 4.0]
        })
        .expect("valid period")
    }

    /// Sign-changing bump supported in (-1, 1).
    pub fn p1() -> Perturbation {
        Perturbation::new((-1.0, 1.0), |x| {
            let g = x * x - 1.0;
            if g >= 0.0 {
                return [0.0, 0.0];
            }
            let q = (1.0 / g).exp();
            let dq = q * (-2.0 * x / (g * g));
            let s = (std::f64::consts::PI * (x + 1.0)).sin();
            let ds = std::f64::consts::PI * (std::f64::consts::PI * (x + 1.0)).cos();
            let [c, dc] = cutoff(-1.0, 1.0, x);
            [q * s * c, dq * s * c + q * ds * c + q * s * dc]
        })
        .expect("valid support")
    }

    /// Nonnegative wide bump supported in (-pi, pi).
    pub fn p2() -> Perturbation {
        let pi = std::f64::consts::PI;
        Perturbation::new((-pi, pi), move |x| {
            let v = (1.0 + x.cos()) / 4.0;
            let dv = -x.sin() / 4.0;
            let [c, dc] = cutoff(-pi, pi, x);
            [v * c, dv * c + v * dc]
        })
        .expect("valid support")
    }
}
