//! Discretization of the dual (Brillouin) interval and the transform pair
//! between a field on many cells and its per-phase-shift components.
//!
//! A field `u` on the unbounded strip decomposes into quasi-periodic
//! components: `u(y) = scale * integral over the dual interval of
//! w(alpha, y) exp(i alpha y) d alpha`, with `w` periodic in `y` and
//! `scale = sqrt(period / (2 pi))`. The grid splits the dual interval into
//! panels with one collocation node each and freezes `w(., y)` per panel, so
//! the inverse transform becomes a finite sum of closed-form panel integrals.
//! The forward transform inverts that reconstruction exactly on a window of
//! one sample point per cell, which is what makes round trips exact instead
//! of first-order accurate.

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("grid needs at least one panel")]
    Empty,
    #[error("panel {index} is degenerate or out of order: [{lo}, {hi}], node {node}")]
    BadPanel { index: usize, lo: f64, hi: f64, node: f64 },
    #[error("panels must tile the dual interval: widths sum to {got}, expected {want}")]
    NotATiling { got: f64, want: f64 },
    #[error("window size {got} does not match panel count {want}")]
    WindowMismatch { got: usize, want: usize },
    #[error("need one weight and one panel per node ({nodes}), got {weights} weights, {panels} panels")]
    CountMismatch {
        nodes: usize,
        weights: usize,
        panels: usize,
    },
    #[error("weight {weight} at node {index} must be finite and nonnegative")]
    BadWeight { index: usize, weight: f64 },
    #[error("node {node} at index {index} lies outside the dual zone [{lo}, {hi}]")]
    NodeOutsideZone {
        index: usize,
        node: f64,
        lo: f64,
        hi: f64,
    },
}

/// Panel decomposition of one dual period with a collocation node per panel.
///
/// Two transform rules share this container. The panel rule (default)
/// freezes the periodic factor over each panel, so the factor of panel `j`
/// at depth `y` is the exact integral of `exp(i alpha y)` over the panel.
/// The collocation rule carries explicit per-node quadrature weights and
/// uses `weight_j exp(i node_j y)` instead; reparametrized grids need it
/// because only pure midpoint sampling in the flattened variable cancels the
/// endpoint error terms that cap the panel rule at second order.
#[derive(Clone, Debug)]
pub struct BrillouinGrid {
    period: f64,
    dual: f64,
    nodes: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    uniform: bool,
    // collocation-rule weights; None selects the panel rule
    node_weights: Option<Vec<f64>>,
}

impl BrillouinGrid {
    /// Uniform midpoint panels over `(-dual/2, dual/2]`.
    pub fn uniform(period: f64, n: usize) -> Result<Self, BlochError> {
        let dual = 2.0 * std::f64::consts::PI / period;
        Self::uniform_anchored(period, n, -0.5 * dual)
    }

    /// Uniform midpoint panels over `(anchor, anchor + dual]`; used when the
    /// zone is re-anchored to avoid cutoff frequencies at interior panel
    /// boundaries.
    pub fn uniform_anchored(period: f64, n: usize, anchor: f64) -> Result<Self, BlochError> {
        if n == 0 {
            return Err(BlochError::Empty);
        }
        let dual = 2.0 * std::f64::consts::PI / period;
        let w = dual / n as f64;
        let lo: Vec<f64> = (0..n).map(|j| anchor + w * j as f64).collect();
        let hi: Vec<f64> = (0..n).map(|j| anchor + w * (j + 1) as f64).collect();
        let nodes: Vec<f64> = (0..n).map(|j| anchor + w * (j as f64 + 0.5)).collect();
        Ok(Self {
            period,
            dual,
            nodes,
            lo,
            hi,
            uniform: true,
            node_weights: None,
        })
    }

    /// Arbitrary panels `[lo[j], hi[j]]` with collocation nodes inside; the
    /// panels must tile one dual period in order.
    pub fn from_panels(
        period: f64,
        nodes: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self, BlochError> {
        let n = nodes.len();
        if n == 0 {
            return Err(BlochError::Empty);
        }
        let dual = 2.0 * std::f64::consts::PI / period;
        let mut width = 0.0;
        for j in 0..n {
            if !(lo[j] < hi[j]) || !(lo[j] <= nodes[j] && nodes[j] <= hi[j]) {
                return Err(BlochError::BadPanel {
                    index: j,
                    lo: lo[j],
                    hi: hi[j],
                    node: nodes[j],
                });
            }
            if j + 1 < n && (hi[j] - lo[j + 1]).abs() > 1e-10 * dual {
                return Err(BlochError::BadPanel {
                    index: j + 1,
                    lo: lo[j + 1],
                    hi: hi[j + 1],
                    node: nodes[j + 1],
                });
            }
            width += hi[j] - lo[j];
        }
        if (width - dual).abs() > 1e-8 * dual {
            return Err(BlochError::NotATiling {
                got: width,
                want: dual,
            });
        }
        Ok(Self {
            period,
            dual,
            nodes,
            lo,
            hi,
            uniform: false,
            node_weights: None,
        })
    }

    /// Collocation nodes with explicit quadrature weights over a tiling of
    /// one dual period. The panels record the tiling and keep the exact
    /// zone bookkeeping; the transform itself uses the point rule
    /// `sum_j weight_j w_j exp(i node_j y)`. A node therefore does not have
    /// to sit inside its own panel: grids clustered at cutoff frequencies
    /// nudge the nearest nodes away from the cutoff even when the matching
    /// panel image is narrower than the nudge.
    pub fn from_weighted_nodes(
        period: f64,
        nodes: Vec<f64>,
        weights: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    ) -> Result<Self, BlochError> {
        let n = nodes.len();
        if n == 0 {
            return Err(BlochError::Empty);
        }
        if weights.len() != n || lo.len() != n || hi.len() != n {
            return Err(BlochError::CountMismatch {
                nodes: n,
                weights: weights.len(),
                panels: lo.len().min(hi.len()),
            });
        }
        let dual = 2.0 * std::f64::consts::PI / period;
        let slack = 1e-10 * dual;
        let (zone_lo, zone_hi) = (lo[0], hi[n - 1]);
        let mut width = 0.0;
        for j in 0..n {
            // Zero-width panels are allowed: a clustering map can compress a
            // panel image below resolvable width, and under the point rule
            // the panel only carries bookkeeping, not quadrature mass.
            if !(lo[j] <= hi[j]) {
                return Err(BlochError::BadPanel {
                    index: j,
                    lo: lo[j],
                    hi: hi[j],
                    node: nodes[j],
                });
            }
            if j + 1 < n && (hi[j] - lo[j + 1]).abs() > slack {
                return Err(BlochError::BadPanel {
                    index: j + 1,
                    lo: lo[j + 1],
                    hi: hi[j + 1],
                    node: nodes[j + 1],
                });
            }
            if !weights[j].is_finite() || !(weights[j] >= 0.0) {
                return Err(BlochError::BadWeight {
                    index: j,
                    weight: weights[j],
                });
            }
            if !nodes[j].is_finite() || nodes[j] < zone_lo - slack || nodes[j] > zone_hi + slack {
                return Err(BlochError::NodeOutsideZone {
                    index: j,
                    node: nodes[j],
                    lo: zone_lo,
                    hi: zone_hi,
                });
            }
            width += hi[j] - lo[j];
        }
        if (width - dual).abs() > 1e-8 * dual {
            return Err(BlochError::NotATiling {
                got: width,
                want: dual,
            });
        }
        Ok(Self {
            period,
            dual,
            nodes,
            lo,
            hi,
            uniform: false,
            node_weights: Some(weights),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn dual(&self) -> f64 {
        self.dual
    }

    pub fn node(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn panel(&self, j: usize) -> (f64, f64) {
        (self.lo[j], self.hi[j])
    }

    /// Quadrature mass of node `j`: the panel width under the panel rule,
    /// the explicit weight under the collocation rule.
    pub fn weight(&self, j: usize) -> f64 {
        match &self.node_weights {
            Some(w) => w[j],
            None => self.hi[j] - self.lo[j],
        }
    }

    /// Normalization of the transform pair: `sqrt(period / (2 pi))`.
    pub fn scale(&self) -> f64 {
        (self.period / (2.0 * std::f64::consts::PI)).sqrt()
    }

    /// Transform factor of node `j` at depth `y`: the exact integral of
    /// `exp(i alpha y)` over panel `j` under the panel rule, or
    /// `weight_j exp(i node_j y)` under the collocation rule. Either way it
    /// is the elementary building block of the inverse transform.
    pub fn panel_phase_integral(&self, j: usize, y: f64) -> Complex64 {
        match &self.node_weights {
            Some(w) => Complex64::from_polar(1.0, self.nodes[j] * y) * w[j],
            None => panel_integral(self.lo[j], self.hi[j], y),
        }
    }

    /// Reconstruct the field at `x + period * m` for each requested cell `m`
    /// from the periodic-factor values `coeffs[j] = w(node_j, x)`.
    pub fn inverse_at(&self, x: f64, coeffs: &[Complex64], cells: &[i64]) -> Vec<Complex64> {
        assert_eq!(coeffs.len(), self.len());
        let s = self.scale();
        cells
            .iter()
            .map(|&m| {
                let y = x + self.period * m as f64;
                let mut acc = Complex64::ZERO;
                for j in 0..self.len() {
                    acc += self.panel_phase_integral(j, y) * coeffs[j];
                }
                acc * s
            })
            .collect()
    }

    /// Centered window of cell indices with one sample per panel.
    pub fn window(&self) -> Vec<i64> {
        let n = self.len() as i64;
        let m0 = -(n / 2);
        (m0..m0 + n).collect()
    }

    /// Recover the periodic-factor values at the nodes from samples of the
    /// field at `x + period * m` over the centered window: the exact inverse
    /// of `inverse_at` restricted to that window.
    pub fn forward_at(&self, x: f64, samples: &[Complex64]) -> Result<Vec<Complex64>, BlochError> {
        let n = self.len();
        if samples.len() != n {
            return Err(BlochError::WindowMismatch {
                got: samples.len(),
                want: n,
            });
        }
        let window = self.window();
        if self.uniform {
            // Midpoint panels share one envelope: the reconstruction matrix is
            // diag(scale * rho(y_m)) F diag(exp(i node_j x)) with
            // F[m, j] = exp(i node_j period m) unitary up to sqrt(n), so the
            // inverse needs no factorization.
            let w = self.dual / n as f64;
            let rho = |y: f64| {
                if y.abs() < 1e-30 {
                    w
                } else {
                    2.0 * (0.5 * w * y).sin() / y
                }
            };
            let s = self.scale();
            let mut out = vec![Complex64::ZERO; n];
            for (j, slot) in out.iter_mut().enumerate() {
                let mut acc = Complex64::ZERO;
                for (mi, &m) in window.iter().enumerate() {
                    let y = x + self.period * m as f64;
                    let fh = Complex64::from_polar(1.0, -self.nodes[j] * self.period * m as f64);
                    acc += fh * samples[mi] / (s * rho(y));
                }
                *slot = acc / n as f64 * Complex64::from_polar(1.0, -self.nodes[j] * x);
            }
            Ok(out)
        } else {
            // General panels: solve the dense reconstruction system.
            let s = self.scale();
            let mut v = faer::Mat::<Complex64>::zeros(n, n);
            let mut b = faer::Mat::<Complex64>::zeros(n, 1);
            for (mi, &m) in window.iter().enumerate() {
                let y = x + self.period * m as f64;
                for j in 0..n {
                    v[(mi, j)] = self.panel_phase_integral(j, y) * s;
                }
                b[(mi, 0)] = samples[mi];
            }
            use faer::prelude::Solve;
            let sol = v.partial_piv_lu().solve(&b);
            Ok((0..n).map(|j| sol[(j, 0)]).collect())
        }
    }
}

/// `integral of exp(i alpha y) d alpha` over `[lo, hi]`.
fn panel_integral(lo: f64, hi: f64, y: f64) -> Complex64 {
    if y.abs() < 1e-30 {
        return Complex64::new(hi - lo, 0.0);
    }
    // Midpoint form keeps precision when the panel is narrow:
    // (exp(i hi y) - exp(i lo y)) / (i y) = exp(i mid y) 2 sin(half y) / y.
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    Complex64::from_polar(1.0, mid * y) * (2.0 * (half * y).sin() / y)
}
