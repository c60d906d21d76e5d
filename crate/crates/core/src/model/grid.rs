use crate::{Error, Result};

/// Uniform grid on `[0, 1]` with `intervals` cells and trapezoidal weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    intervals: usize,
}

impl Grid {
    pub fn new(intervals: usize) -> Result<Self> {
        if intervals < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 intervals, got {intervals}"
            )));
        }
        Ok(Self { intervals })
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn du(&self) -> f64 {
        1.0 / self.intervals as f64
    }

    pub fn node(&self, m: usize) -> f64 {
        m as f64 / self.intervals as f64
    }

    /// Trapezoidal quadrature weight of node `m`.
    pub fn weight(&self, m: usize) -> f64 {
        if m == 0 || m == self.intervals {
            0.5 * self.du()
        } else {
            self.du()
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.nodes()).map(|m| self.weight(m)).collect()
    }

    /// Index of the node closest to `u`.
    pub fn nearest_node(&self, u: f64) -> usize {
        ((u.clamp(0.0, 1.0) * self.intervals as f64).round() as usize).min(self.intervals)
    }
}

/// Values of a path on the grid nodes, stored node-major (`values[m * dim + k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    dim: usize,
    values: Vec<f64>,
}

impl Path {
    pub fn zeros(grid: &Grid, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; grid.nodes() * dim],
        }
    }

    pub fn from_values(grid: &Grid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.nodes() * dim {
            return Err(Error::DimensionMismatch(format!(
                "path of {} values does not fit {} nodes x {dim} components",
                values.len(),
                grid.nodes()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("path entry {i}")));
        }
        Ok(Self { dim, values })
    }

    /// Path `u ↦ f(u)` sampled on the grid.
    pub fn from_fn(grid: &Grid, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(grid.nodes() * dim);
        for m in 0..grid.nodes() {
            let v = f(grid.node(m));
            assert_eq!(v.len(), dim);
            values.extend(v);
        }
        Self { dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn node(&self, m: usize) -> &[f64] {
        &self.values[m * self.dim..(m + 1) * self.dim]
    }

    pub fn node_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.values[m * self.dim..(m + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    pub fn matches(&self, grid: &Grid, dim: usize) -> bool {
        self.dim == dim && self.values.len() == grid.nodes() * dim
    }
}
