//! Structured triangulation of one period cell of the strip between a surface
//! graph and the flat truncation line above it.
//!
//! The grid has `nx` uniform columns over one period and `ny` element rows per
//! column, graded linearly from the surface up to the truncation line. Each
//! quad is split into two triangles along the same diagonal. Degrees of
//! freedom are the vertical-boundary-identified nodes away from the surface:
//! the surface row carries homogeneous Dirichlet data and is eliminated, and
//! the left column is identified with the right one (the cell is periodic).
//! Free nodes are numbered row by row from just above the surface, so the
//! truncation-line nodes are the trailing `nx` indices.

use num_complex::Complex64;
use thiserror::Error;

use crate::geometry::{SurfaceProfile, SurfaceSelect};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("grid must have at least 2 columns and 1 row, got {nx}x{ny}")]
    TooCoarse { nx: usize, ny: usize },
    #[error("surface reaches the truncation line at x1={x1} (value {value} >= {trunc})")]
    SurfaceTooHigh { x1: f64, value: f64, trunc: f64 },
}

/// One triangle: vertex coordinates plus the free-node index of each vertex
/// (`None` marks an eliminated surface vertex).
#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub xy: [[f64; 2]; 3],
    pub dof: [Option<usize>; 3],
}

impl Element {
    /// Twice the signed area; positive for counterclockwise vertices.
    pub fn double_area(&self) -> f64 {
        let [a, b, c] = self.xy;
        (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    }

    pub fn diameter(&self) -> f64 {
        let [a, b, c] = self.xy;
        let e = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        e(a, b).max(e(b, c)).max(e(c, a))
    }

    /// Constant gradients of the three barycentric basis functions.
    pub fn basis_gradients(&self) -> [[f64; 2]; 3] {
        let [a, b, c] = self.xy;
        let d = self.double_area();
        [
            [(b[1] - c[1]) / d, (c[0] - b[0]) / d],
            [(c[1] - a[1]) / d, (a[0] - c[0]) / d],
            [(a[1] - b[1]) / d, (b[0] - a[0]) / d],
        ]
    }
}

/// Triangulated period cell with periodic identification and eliminated
/// surface row. See the module docs for the numbering convention.
#[derive(Clone, Debug)]
pub struct Mesh {
    period: f64,
    truncation: f64,
    nx: usize,
    ny: usize,
    elements: Vec<Element>,
    /// Coordinates of free nodes (a representative; periodic images differ by
    /// the period in the first coordinate).
    node_xy: Vec<[f64; 2]>,
    h_max: f64,
    h_min: f64,
}

impl Mesh {
    /// Triangulate the strip between the selected surface and `truncation`.
    pub fn build(
        profile: &SurfaceProfile,
        which: SurfaceSelect,
        truncation: f64,
        nx: usize,
        ny: usize,
    ) -> Result<Self, MeshError> {
        if nx < 2 || ny < 1 {
            return Err(MeshError::TooCoarse { nx, ny });
        }
        let period = profile.period();
        let dx = period / nx as f64;
        let x_of = |i: usize| -0.5 * period + dx * i as f64;

        // Surface heights per column; column nx is the periodic image of 0.
        let mut zeta = Vec::with_capacity(nx + 1);
        for i in 0..=nx {
            let x1 = x_of(i);
            let z = profile.eval(x1, which)[0];
            if z >= truncation {
                return Err(MeshError::SurfaceTooHigh {
                    x1,
                    value: z,
                    trunc: truncation,
                });
            }
            zeta.push(z);
        }

        // Free-node index of grid node (i, j); surface row j=0 is eliminated,
        // column 0 is identified with column nx.
        let dof_of = |i: usize, j: usize| -> Option<usize> {
            if j == 0 {
                return None;
            }
            let col = if i == 0 { nx } else { i };
            Some((j - 1) * nx + (col - 1))
        };
        let xy_of = |i: usize, j: usize| -> [f64; 2] {
            let t = j as f64 / ny as f64;
            [x_of(i), zeta[i] + (truncation - zeta[i]) * t]
        };

        let mut node_xy = vec![[0.0; 2]; nx * ny];
        for j in 1..=ny {
            for i in 1..=nx {
                node_xy[dof_of(i, j).unwrap()] = xy_of(i, j);
            }
        }

        let mut elements = Vec::with_capacity(2 * nx * ny);
        let mut h_max: f64 = 0.0;
        let mut h_min = f64::INFINITY;
        for j in 0..ny {
            for i in 0..nx {
                let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
                for tri in [[0, 1, 2], [0, 2, 3]] {
                    let el = Element {
                        xy: tri.map(|v| xy_of(corners[v].0, corners[v].1)),
                        dof: tri.map(|v| dof_of(corners[v].0, corners[v].1)),
                    };
                    debug_assert!(el.double_area() > 0.0);
                    let d = el.diameter();
                    h_max = h_max.max(d);
                    h_min = h_min.min(d);
                    elements.push(el);
                }
            }
        }

        Ok(Self {
            period,
            truncation,
            nx,
            ny,
            elements,
            node_xy,
            h_max,
            h_min,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn columns(&self) -> usize {
        self.nx
    }

    pub fn rows(&self) -> usize {
        self.ny
    }

    /// Number of free nodes (unknowns per cell problem).
    pub fn free_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    /// Representative coordinates of free node `dof`.
    pub fn node(&self, dof: usize) -> [f64; 2] {
        self.node_xy[dof]
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.node_xy
    }

    /// Largest element diameter.
    pub fn h_max(&self) -> f64 {
        self.h_max
    }

    /// Ratio of largest to smallest element diameter.
    pub fn grading(&self) -> f64 {
        self.h_max / self.h_min
    }

    /// Horizontal node spacing on the truncation line.
    pub fn top_spacing(&self) -> f64 {
        self.period / self.nx as f64
    }

    /// Free-node indices on the truncation line, left to right: the trailing
    /// block of the numbering.
    pub fn top_dofs(&self) -> std::ops::Range<usize> {
        (self.ny - 1) * self.nx..self.ny * self.nx
    }

    /// Abscissae of the truncation-line nodes, same order as `top_dofs`.
    pub fn top_abscissae(&self) -> Vec<f64> {
        self.top_dofs().map(|d| self.node_xy[d][0]).collect()
    }

    /// Values of a nodal field on the truncation line, same order as `top_dofs`.
    pub fn top_trace(&self, field: &[Complex64]) -> Vec<Complex64> {
        self.top_dofs().map(|d| field[d]).collect()
    }
}

/// Relative L2 distance over one period between two piecewise-linear periodic
/// traces given by (abscissae, values) pairs on possibly different grids; the
/// second pair is the reference the error is scaled by. Against a vanishing
/// reference the distance degrades gracefully to the absolute L2 norm.
///
/// Both traces are interpolated on the union of their breakpoints, where the
/// difference is piecewise linear, so the quadrature below is exact.
pub fn trace_l2_error(
    xa: &[f64],
    va: &[Complex64],
    xb: &[f64],
    vb: &[Complex64],
    period: f64,
) -> f64 {
    assert_eq!(xa.len(), va.len());
    assert_eq!(xb.len(), vb.len());
    // Periodic piecewise-linear evaluation on a sorted abscissa set.
    let eval = |xs: &[f64], vs: &[Complex64], x: f64| -> Complex64 {
        let n = xs.len();
        let wrap = |mut t: f64| {
            while t < xs[0] {
                t += period;
            }
            while t >= xs[0] + period {
                t -= period;
            }
            t
        };
        let t = wrap(x);
        // Find the interval [xs[i], xs[i+1]) containing t; the last interval
        // wraps around to xs[0] + period.
        let i = match xs.binary_search_by(|p| p.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(0) => n - 1,
            Err(i) => i - 1,
        };
        let (x0, v0) = (xs[i], vs[i]);
        let (x1, v1) = if i + 1 < n {
            (xs[i + 1], vs[i + 1])
        } else {
            (xs[0] + period, vs[0])
        };
        let s = (t - x0) / (x1 - x0);
        v0 * (1.0 - s) + v1 * s
    };

    let mut breaks: Vec<f64> = Vec::with_capacity(xa.len() + xb.len());
    let base = xa[0];
    for &x in xa {
        breaks.push(x);
    }
    for &x in xb {
        let mut t = x;
        while t < base {
            t += period;
        }
        while t >= base + period {
            t -= period;
        }
        breaks.push(t);
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    breaks.push(base + period);

    // Two-point Gauss per subinterval: exact for the quadratic integrands.
    const G: f64 = 0.577_350_269_189_625_8; // 1/sqrt(3)
    let mut num = 0.0;
    let mut den = 0.0;
    for w in breaks.windows(2) {
        let (l, r) = (w[0], w[1]);
        let half = 0.5 * (r - l);
        if half <= 0.0 {
            continue;
        }
        let mid = 0.5 * (l + r);
        for g in [-G, G] {
            let x = mid + half * g;
            let fa = eval(xa, va, x);
            let fb = eval(xb, vb, x);
            num += half * (fa - fb).norm_sqr();
            den += half * fb.norm_sqr();
        }
    }
    if den == 0.0 {
        return num.sqrt();
    }
    (num / den).sqrt()
}
