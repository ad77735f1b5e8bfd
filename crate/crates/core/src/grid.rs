//! Geometric size grid, quadrature, interpolation and convolution.
//!
//! The size axis (0, infinity) is truncated to [x_min, x_max] and partitioned
//! into cells whose edges form a geometric progression. Each cell carries one
//! node at its geometric midpoint and a midpoint-rule weight equal to the cell
//! width. Because the nodes are uniformly spaced in log x, locating a size in
//! the grid is O(1) and log-linear interpolation needs no search.
//!
//! All reductions run in serial index order so results are bit-reproducible
//! regardless of how callers parallelize around this module.

use std::sync::Arc;

use crate::error::{CoagError, Result};

/// Relative slack used when snapping interpolation queries onto nodes.
const NODE_SNAP_TOL: f64 = 1e-9;

/// Truncated geometric partition of the size axis.
///
/// Immutable after construction; share it with [`Arc`].
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGrid {
    x_min: f64,
    x_max: f64,
    n_cells: usize,
    nodes: Vec<f64>,
    edges: Vec<f64>,
    weights: Vec<f64>,
    log_min: f64,
    dlog: f64,
}

impl SizeGrid {
    /// Builds a geometric grid with `n_cells` cells on [x_min, x_max].
    ///
    /// Edges satisfy edges[i] = x_min * r^i with r = (x_max/x_min)^(1/n_cells);
    /// nodes sit at sqrt(edges[i] * edges[i+1]).
    pub fn geometric(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_min <= 0.0 || x_max <= x_min || n_cells == 0
        {
            return Err(CoagError::InvalidBounds { x_min, x_max, n_cells });
        }
        let log_min = x_min.ln();
        let log_max = x_max.ln();
        let dlog = (log_max - log_min) / n_cells as f64;
        let mut edges = Vec::with_capacity(n_cells + 1);
        edges.push(x_min);
        for i in 1..n_cells {
            edges.push((log_min + dlog * i as f64).exp());
        }
        edges.push(x_max);
        let nodes: Vec<f64> = (0..n_cells).map(|i| (edges[i] * edges[i + 1]).sqrt()).collect();
        let weights: Vec<f64> = (0..n_cells).map(|i| edges[i + 1] - edges[i]).collect();
        Ok(Self { x_min, x_max, n_cells, nodes, edges, weights, log_min, dlog })
    }

    /// Rebuilds an already-geometric grid from explicit arrays.
    ///
    /// Used by the exact scaling action, which maps every edge by the same
    /// factor and therefore preserves the log spacing bit-for-bit.
    pub(crate) fn from_parts(nodes: Vec<f64>, edges: Vec<f64>, weights: Vec<f64>) -> Self {
        let n_cells = nodes.len();
        let x_min = edges[0];
        let x_max = edges[n_cells];
        let log_min = x_min.ln();
        let dlog = (x_max.ln() - log_min) / n_cells as f64;
        Self { x_min, x_max, n_cells, nodes, edges, weights, log_min, dlog }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Common edge ratio edges[i+1]/edges[i].
    pub fn ratio(&self) -> f64 {
        self.dlog.exp()
    }

    /// Uniform node spacing in log x.
    pub fn dlog(&self) -> f64 {
        self.dlog
    }

    /// Integral of a per-cell function by the midpoint rule.
    ///
    /// The sum runs left to right in index order.
    pub fn integrate(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_cells {
            return Err(CoagError::LengthMismatch { expected: self.n_cells, got: values.len() });
        }
        let mut acc = 0.0;
        for (v, w) in values.iter().zip(self.weights.iter()) {
            acc += v * w;
        }
        Ok(acc)
    }

    /// Weighted moment sum(x_i^m * values[i] * w_i), serial order.
    pub fn moment(&self, values: &[f64], m: f64) -> Result<f64> {
        if values.len() != self.n_cells {
            return Err(CoagError::LengthMismatch { expected: self.n_cells, got: values.len() });
        }
        let mut acc = 0.0;
        for i in 0..self.n_cells {
            acc += self.nodes[i].powf(m) * values[i] * self.weights[i];
        }
        Ok(acc)
    }

    /// Fractional node coordinate of a size: node i sits at coordinate i.
    #[inline]
    pub(crate) fn node_coord(&self, x: f64) -> f64 {
        (x.ln() - self.log_min) / self.dlog - 0.5
    }

    /// Index of the cell containing x, clamped to the grid.
    #[inline]
    pub(crate) fn cell_of(&self, x: f64) -> usize {
        let raw = (x.ln() - self.log_min) / self.dlog;
        let mut k = raw.floor() as isize;
        if k < 0 {
            k = 0;
        }
        if k as usize >= self.n_cells {
            k = self.n_cells as isize - 1;
        }
        // Floating-point fixup near edges.
        let mut k = k as usize;
        while k > 0 && x < self.edges[k] {
            k -= 1;
        }
        while k + 1 < self.n_cells && x >= self.edges[k + 1] {
            k += 1;
        }
        k
    }

    /// Log-linear interpolation of per-cell node values.
    ///
    /// Inside [x_min, x_max] the value is linear in log x between bracketing
    /// nodes and clamped to the boundary cells beyond the first or last node.
    /// Outside the truncated domain the profile is zero. Queries within
    /// roundoff of a node snap to the stored value.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n_cells);
        if !(x > 0.0) || x < self.x_min || x > self.x_max {
            return 0.0;
        }
        let s = self.node_coord(x);
        if s <= 0.0 {
            return values[0];
        }
        let last = (self.n_cells - 1) as f64;
        if s >= last {
            return values[self.n_cells - 1];
        }
        let j = s.floor() as usize;
        let frac = s - j as f64;
        if frac < NODE_SNAP_TOL {
            return values[j];
        }
        if frac > 1.0 - NODE_SNAP_TOL {
            return values[j + 1];
        }
        values[j] + frac * (values[j + 1] - values[j])
    }

    /// Interpolation without the node snap, continuous in x.
    ///
    /// The solver's resampling step perturbs nodes by amounts that shrink
    /// below the snap window as it converges, so it needs the unsnapped
    /// variant to avoid a jitter floor.
    pub(crate) fn interpolate_smooth(&self, values: &[f64], x: f64) -> f64 {
        debug_assert_eq!(values.len(), self.n_cells);
        if !(x > 0.0) || x < self.x_min || x > self.x_max {
            return 0.0;
        }
        let s = self.node_coord(x);
        if s <= 0.0 {
            return values[0];
        }
        let last = (self.n_cells - 1) as f64;
        if s >= last {
            return values[self.n_cells - 1];
        }
        let j = s.floor() as usize;
        let frac = s - j as f64;
        values[j] + frac * (values[j + 1] - values[j])
    }
}

/// Anything evaluable at a positive size.
pub trait SizeFn {
    fn eval(&self, z: f64) -> f64;
}

impl<F: Fn(f64) -> f64> SizeFn for F {
    #[inline]
    fn eval(&self, z: f64) -> f64 {
        self(z)
    }
}

/// Grid function made evaluable everywhere on (0, infinity).
///
/// Below x_min it returns the supplied small-size limit, above x_max zero,
/// in between the grid interpolant.
pub struct GridFn<'a> {
    grid: &'a SizeGrid,
    values: &'a [f64],
    below_min: f64,
}

impl<'a> GridFn<'a> {
    pub fn new(grid: &'a SizeGrid, values: &'a [f64], below_min: f64) -> Self {
        debug_assert_eq!(values.len(), grid.n_cells());
        Self { grid, values, below_min }
    }
}

impl SizeFn for GridFn<'_> {
    #[inline]
    fn eval(&self, z: f64) -> f64 {
        if z < self.grid.x_min {
            return self.below_min;
        }
        self.grid.interpolate(self.values, z)
    }
}

/// Convolution (f*g)(x) = integral over (0, x) of f(y) g(x-y) dy at points.
///
/// Quadrature sums node contributions of every cell fully below the point and
/// one midpoint term for the clipped cell containing it; f is interpolated at
/// off-node locations, g is evaluated directly. Mass of f below x_min is
/// dropped, so results carry an O(x_min) truncation at small sizes.
pub(crate) fn convolve_at(
    grid: &SizeGrid,
    f: &[f64],
    g: &impl SizeFn,
    points: &[f64],
) -> Vec<f64> {
    let nodes = grid.nodes();
    let weights = grid.weights();
    let edges = grid.edges();
    let _n = grid.n_cells();
    // Premultiplied node terms f_j * w_j.
    let fw: Vec<f64> = f.iter().zip(weights.iter()).map(|(a, b)| a * b).collect();
    points
        .iter()
        .map(|&x| {
            if x <= grid.x_min() {
                return 0.0;
            }
            let k = grid.cell_of(x.min(grid.x_max()));
            let mut acc = 0.0;
            for j in 0..k {
                acc += fw[j] * g.eval(x - nodes[j]);
            }
            // Clipped remainder [edges[k], x) of the cell containing x.
            let left = edges[k];
            if x > left {
                let m = (left * x).sqrt();
                let fm = grid.interpolate(f, m);
                if fm != 0.0 {
                    acc += fm * g.eval(x - m) * (x - left);
                }
            }
            acc
        })
        .collect()
}

/// Convolution evaluated at the grid nodes.
pub fn convolve(grid: &SizeGrid, f: &[f64], g: &impl SizeFn) -> Result<Vec<f64>> {
    if f.len() != grid.n_cells() {
        return Err(CoagError::LengthMismatch { expected: grid.n_cells(), got: f.len() });
    }
    let out = convolve_at(grid, f, g, grid.nodes());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CoagError::NonFinite { context: "convolve" });
    }
    Ok(out)
}

/// Shared handle type used across the crate.
pub type GridHandle = Arc<SizeGrid>;
