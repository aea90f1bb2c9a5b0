//! Sampled time series and the relative L1 deviation between two of them.

use crate::error::{invalid, Result};

/// Real observable columns sampled on a common uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    grid: Vec<f64>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(grid: Vec<f64>, names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if grid.is_empty() {
            return Err(invalid("grid", "must not be empty"));
        }
        if grid.iter().any(|t| !t.is_finite()) {
            return Err(invalid("grid", "must be finite"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("grid", "must be strictly increasing"));
        }
        if grid.len() > 2 {
            let h = grid[1] - grid[0];
            if grid
                .windows(2)
                .any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(1.0))
            {
                return Err(invalid("grid", "must be uniform"));
            }
        }
        if names.len() != columns.len() {
            return Err(invalid("columns", "one name per column required"));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != grid.len()) {
            return Err(invalid(
                "columns",
                format!("length {} differs from grid length {}", c.len(), grid.len()),
            ));
        }
        Ok(Self {
            grid,
            names,
            columns,
        })
    }

    /// Grid `u * dt` for `u = 0..=intervals`.
    pub fn uniform_grid(dt: f64, intervals: usize) -> Vec<f64> {
        (0..=intervals).map(|u| u as f64 * dt).collect()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Row `u`, one value per column.
    pub fn row(&self, u: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[u]).collect()
    }
}

fn trapezoid(grid: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    grid.windows(2)
        .enumerate()
        .map(|(i, w)| 0.5 * (w[1] - w[0]) * (f(i) + f(i + 1)))
        .sum()
}

/// `2 int |f - g| dt / int (|f| + |g|) dt` by the trapezoidal rule on a shared grid.
pub fn deviation(grid: &[f64], f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(crate::Error::DimensionMismatch {
            expected: grid.len(),
            found: if f.len() != grid.len() {
                f.len()
            } else {
                g.len()
            },
        });
    }
    if grid.len() < 2 {
        return Err(invalid("grid", "needs at least two instants"));
    }
    let den = trapezoid(grid, |i| f[i].abs() + g[i].abs());
    if den == 0.0 {
        return Err(crate::Error::UndefinedMetric);
    }
    Ok(2.0 * trapezoid(grid, |i| (f[i] - g[i]).abs()) / den)
}

/// [`deviation`] between two series of the same named column. The grids
/// must coincide to within `1e-9` relative.
pub fn column_deviation(a: &TimeSeries, b: &TimeSeries, name: &str) -> Result<f64> {
    if a.len() != b.len()
        || a.grid
            .iter()
            .zip(&b.grid)
            .any(|(x, y)| (x - y).abs() > 1e-9 * x.abs().max(1.0))
    {
        return Err(invalid("grid", "series grids differ"));
    }
    let f = a
        .column(name)
        .ok_or_else(|| invalid("column", format!("no column {name}")))?;
    let g = b
        .column(name)
        .ok_or_else(|| invalid("column", format!("no column {name}")))?;
    deviation(&a.grid, f, g)
}
