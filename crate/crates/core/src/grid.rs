//! Gridded climate states and per-window normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default guard added to σ before dividing.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Shared grid description: variable names and coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub var_names: Vec<String>,
    /// Latitudes in degrees, strictly monotone, within [-90, 90].
    pub lats: Vec<f64>,
    /// Longitudes in degrees, within [0, 360).
    pub lons: Vec<f64>,
}

impl GridSpec {
    pub fn new(var_names: Vec<String>, lats: Vec<f64>, lons: Vec<f64>) -> Result<Self> {
        let spec = GridSpec {
            var_names,
            lats,
            lons,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Equiangular cell-centred grid with `n_lat` rows from north to south.
    pub fn equiangular(var_names: Vec<String>, n_lat: usize, n_lon: usize) -> Result<Self> {
        let dlat = 180.0 / n_lat as f64;
        let lats = (0..n_lat).map(|m| 90.0 - (m as f64 + 0.5) * dlat).collect();
        let lons = (0..n_lon).map(|n| n as f64 * 360.0 / n_lon as f64).collect();
        GridSpec::new(var_names, lats, lons)
    }

    pub fn validate(&self) -> Result<()> {
        if self.var_names.is_empty() {
            return Err(Error::invalid("grid needs at least one variable"));
        }
        if self.lats.len() < 2 || self.lons.len() < 2 {
            return Err(Error::invalid(format!(
                "grid needs at least 2x2 points, got {}x{}",
                self.lats.len(),
                self.lons.len()
            )));
        }
        if self.lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::invalid("latitudes must lie in [-90, 90]"));
        }
        let inc = self.lats.windows(2).all(|w| w[1] > w[0]);
        let dec = self.lats.windows(2).all(|w| w[1] < w[0]);
        if !inc && !dec {
            return Err(Error::invalid("latitudes must be strictly monotone"));
        }
        if self
            .lons
            .iter()
            .any(|l| !l.is_finite() || *l < 0.0 || *l >= 360.0)
        {
            return Err(Error::invalid("longitudes must lie in [0, 360)"));
        }
        Ok(())
    }

    pub fn n_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn n_lat(&self) -> usize {
        self.lats.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lons.len()
    }

    /// Values per variable slice (M·N).
    pub fn plane(&self) -> usize {
        self.n_lat() * self.n_lon()
    }

    pub fn len(&self) -> usize {
        self.n_vars() * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A climate state `X[v, m, n]` stored variable-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Arc<GridSpec>,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!(
                "field has {} values, grid expects {}",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field contains non-finite values"));
        }
        Ok(GridField { grid, values })
    }

    pub fn zeros(grid: Arc<GridSpec>) -> Self {
        let n = grid.len();
        GridField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn filled(grid: Arc<GridSpec>, value: f64) -> Self {
        let n = grid.len();
        GridField {
            grid,
            values: vec![value; n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.grid.n_vars()
    }

    pub fn n_lat(&self) -> usize {
        self.grid.n_lat()
    }

    pub fn n_lon(&self) -> usize {
        self.grid.n_lon()
    }

    #[inline]
    pub fn at(&self, v: usize, m: usize, n: usize) -> f64 {
        self.values[(v * self.n_lat() + m) * self.n_lon() + n]
    }

    /// The `M x N` plane of variable `v`.
    pub fn var(&self, v: usize) -> &[f64] {
        let p = self.grid.plane();
        &self.values[v * p..(v + 1) * p]
    }

    pub fn var_mut(&mut self, v: usize) -> &mut [f64] {
        let p = self.grid.plane();
        &mut self.values[v * p..(v + 1) * p]
    }

    pub fn same_shape(&self, other: &GridField) -> bool {
        self.grid.n_vars() == other.grid.n_vars()
            && self.grid.n_lat() == other.grid.n_lat()
            && self.grid.n_lon() == other.grid.n_lon()
    }

    pub fn check_same_shape(&self, other: &GridField) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "fields differ in shape: {}x{}x{} vs {}x{}x{}",
                self.n_vars(),
                self.n_lat(),
                self.n_lon(),
                other.n_vars(),
                other.n_lat(),
                other.n_lon()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rolls every variable plane by `shift` columns along longitude.
    pub fn roll_lon(&self, shift: usize) -> GridField {
        let (m, n) = (self.n_lat(), self.n_lon());
        let mut out = self.clone();
        for v in 0..self.n_vars() {
            for r in 0..m {
                for c in 0..n {
                    out.values[(v * m + r) * n + (c + shift) % n] = self.at(v, r, c);
                }
            }
        }
        out
    }
}

/// `L` consecutive states ending just before the forecast target.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub steps: Vec<GridField>,
    /// Hours, strictly increasing.
    pub timestamps: Vec<f64>,
}

impl HistoryWindow {
    pub fn new(steps: Vec<GridField>, timestamps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("history window is empty"));
        }
        if steps.len() != timestamps.len() {
            return Err(Error::shape("one timestamp per step required"));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("timestamps must increase strictly"));
        }
        for s in &steps[1..] {
            steps[0].check_same_shape(s)?;
        }
        Ok(HistoryWindow { steps, timestamps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.steps[0].grid
    }

    pub fn last(&self) -> &GridField {
        self.steps.last().expect("window is nonempty")
    }

    /// Drops the oldest state and appends `next` one timestep later.
    pub fn advance(&self, next: GridField, dt_hours: f64) -> Result<HistoryWindow> {
        self.steps[0].check_same_shape(&next)?;
        let mut steps = self.steps[1..].to_vec();
        steps.push(next);
        let mut timestamps = self.timestamps[1..].to_vec();
        timestamps.push(self.timestamps.last().copied().unwrap_or(0.0) + dt_hours);
        Ok(HistoryWindow { steps, timestamps })
    }
}

/// Per-variable mean and population standard deviation of a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, epsilon: f64) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::shape("mu and sigma lengths differ"));
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("sigma must be nonnegative"));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        Ok(NormStats { mu, sigma, epsilon })
    }

    /// Denominator `σ + ε` of variable `v`.
    pub fn scale(&self, v: usize) -> f64 {
        self.sigma[v] + self.epsilon
    }

    fn check(&self, field: &GridField) -> Result<()> {
        if self.mu.len() != field.n_vars() {
            return Err(Error::shape(format!(
                "stats cover {} variables, field has {}",
                self.mu.len(),
                field.n_vars()
            )));
        }
        Ok(())
    }
}

pub fn compute_norm_stats(history: &HistoryWindow, epsilon: f64) -> Result<NormStats> {
    if history.is_empty() {
        return Err(Error::invalid("history window is empty"));
    }
    if history.steps.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("history contains non-finite values"));
    }
    let nv = history.grid().n_vars();
    let count = (history.len() * history.grid().plane()) as f64;
    let mut mu = vec![0.0; nv];
    let mut sigma = vec![0.0; nv];
    for v in 0..nv {
        let sum: f64 = history.steps.iter().flat_map(|s| s.var(v)).sum();
        let mean = sum / count;
        let ss: f64 = history
            .steps
            .iter()
            .flat_map(|s| s.var(v))
            .map(|x| (x - mean) * (x - mean))
            .sum();
        mu[v] = mean;
        sigma[v] = (ss / count).sqrt();
    }
    NormStats::new(mu, sigma, epsilon)
}

pub fn normalize(field: &GridField, stats: &NormStats) -> Result<GridField> {
    stats.check(field)?;
    let mut out = field.clone();
    for v in 0..field.n_vars() {
        let (mu, d) = (stats.mu[v], stats.scale(v));
        for x in out.var_mut(v) {
            *x = (*x - mu) / d;
        }
    }
    Ok(out)
}

pub fn denormalize(field: &GridField, stats: &NormStats) -> Result<GridField> {
    stats.check(field)?;
    let mut out = field.clone();
    for v in 0..field.n_vars() {
        let (mu, d) = (stats.mu[v], stats.scale(v));
        for x in out.var_mut(v) {
            *x = *x * d + mu;
        }
    }
    Ok(out)
}
