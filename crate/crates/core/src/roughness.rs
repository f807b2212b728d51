//! Sa, median Sa, and bearing area curves evaluated on a shared quantile grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{HeightMatrix, StageRecord};
use crate::stats::mean_and_variance;

pub const DEFAULT_GRID_SIZE: usize = 1000;
/// Valleys deeper than this quantile are left off the default grid.
pub const DEFAULT_S_MAX: f64 = 0.998;
pub const DEFAULT_TAU: f64 = 0.25;

/// Arithmetic mean absolute deviation of the finite heights about their mean.
pub fn compute_sa(m: &HeightMatrix) -> Result<f64> {
    let n = m.len();
    if n == 0 {
        return Err(Error::invalid("Sa of an empty matrix"));
    }
    // Offsets from the first height keep a constant surface at exactly zero.
    let z0 = m.heights().next().unwrap_or(0.0);
    let offset = m.heights().map(|z| z - z0).sum::<f64>() / n as f64;
    Ok(m.heights().map(|z| (z - z0 - offset).abs()).sum::<f64>() / n as f64)
}

/// Median of the per-location Sa values of a stage.
pub fn median_sa(rec: &StageRecord) -> Result<f64> {
    let values = rec
        .locations
        .iter()
        .map(compute_sa)
        .collect::<Result<Vec<_>>>()?;
    median(&values).ok_or_else(|| Error::invalid("median Sa of an empty stage"))
}

/// Median with the mean-of-middle-two convention; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pixel heights sorted from the highest peak (s = 0) to the deepest valley (s = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BearingAreaCurve {
    sorted_heights: Vec<f64>,
    pub location_id: String,
    pub stage_id: String,
}

impl BearingAreaCurve {
    pub fn new(
        sorted_heights: Vec<f64>,
        location_id: impl Into<String>,
        stage_id: impl Into<String>,
    ) -> Result<Self> {
        if sorted_heights.len() < 2 {
            return Err(Error::invalid("a bearing area curve needs at least 2 heights"));
        }
        if sorted_heights.windows(2).any(|w| !(w[0] >= w[1])) {
            return Err(Error::invalid("bearing area curve heights must be non-increasing and finite"));
        }
        Ok(BearingAreaCurve {
            sorted_heights,
            location_id: location_id.into(),
            stage_id: stage_id.into(),
        })
    }

    pub fn sorted_heights(&self) -> &[f64] {
        &self.sorted_heights
    }

    /// Empirical quantile at `s`, interpolating linearly between order statistics.
    pub fn value_at(&self, s: f64) -> f64 {
        let h = &self.sorted_heights;
        let u = s.clamp(0.0, 1.0) * (h.len() - 1) as f64;
        let lo = u.floor() as usize;
        let hi = (u.ceil() as usize).min(h.len() - 1);
        let frac = u - lo as f64;
        h[lo] + (h[hi] - h[lo]) * frac
    }
}

pub fn extract_bac(m: &HeightMatrix) -> Result<BearingAreaCurve> {
    let mut heights: Vec<f64> = m.heights().collect();
    if heights.len() < 2 {
        return Err(Error::invalid(format!(
            "location {} has {} finite pixels, need at least 2",
            m.location_id,
            heights.len()
        )));
    }
    heights.sort_unstable_by(|a, b| b.total_cmp(a));
    BearingAreaCurve::new(heights, m.location_id.clone(), m.stage_id.clone())
}

pub fn evaluate_on_grid(bac: &BearingAreaCurve, grid: &QuantileGrid) -> Vec<f64> {
    grid.points().iter().map(|&s| bac.value_at(s)).collect()
}

/// Evaluation points s_1 < … < s_m in [0, 1] and the tail cut-off τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    points: Vec<f64>,
    tau: f64,
}

impl QuantileGrid {
    pub fn new(points: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 0.5) {
            return Err(Error::invalid(format!("tau must lie in (0, 0.5), got {tau}")));
        }
        if points.is_empty() {
            return Err(Error::invalid("quantile grid is empty"));
        }
        if points.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("quantile grid points must lie in [0, 1]"));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("quantile grid points must be strictly increasing"));
        }
        let grid = QuantileGrid { points, tau };
        if grid.upper_domain().is_empty() || grid.lower_domain().is_empty() {
            return Err(Error::invalid(format!(
                "quantile grid needs points in [0, {tau}] and [{}, 1]",
                1.0 - tau
            )));
        }
        Ok(grid)
    }

    /// `m` equally spaced points on `[0, s_max]`.
    pub fn uniform(m: usize, s_max: f64, tau: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("quantile grid needs at least 2 points"));
        }
        if !(s_max > 0.0 && s_max <= 1.0) {
            return Err(Error::invalid(format!("s_max must lie in (0, 1], got {s_max}")));
        }
        let step = s_max / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|k| k as f64 * step).collect();
        points[m - 1] = s_max;
        Self::new(points, tau)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn s_max(&self) -> f64 {
        *self.points.last().expect("grid is non-empty")
    }

    /// Indices with s ≤ τ (peaks).
    pub fn upper_domain(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&k| self.points[k] <= self.tau)
            .collect()
    }

    /// Indices with s ≥ 1 − τ (valleys).
    pub fn lower_domain(&self) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&k| self.points[k] >= 1.0 - self.tau)
            .collect()
    }

    pub fn full_domain(&self) -> Vec<usize> {
        (0..self.points.len()).collect()
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        QuantileGrid::uniform(DEFAULT_GRID_SIZE, DEFAULT_S_MAX, DEFAULT_TAU)
            .expect("default grid is valid")
    }
}

/// One stage's curves evaluated on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSample {
    curves: Vec<Vec<f64>>,
    grid: QuantileGrid,
    pub stage_id: String,
}

impl StageSample {
    pub fn new(curves: Vec<Vec<f64>>, grid: QuantileGrid, stage_id: impl Into<String>) -> Result<Self> {
        if curves.len() < 2 {
            return Err(Error::invalid(format!(
                "a stage sample needs at least 2 curves, got {}",
                curves.len()
            )));
        }
        if let Some(c) = curves.iter().find(|c| c.len() != grid.len()) {
            return Err(Error::invalid(format!(
                "curve has {} values, grid has {}",
                c.len(),
                grid.len()
            )));
        }
        if curves.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("curve values must be finite"));
        }
        Ok(StageSample {
            curves,
            grid,
            stage_id: stage_id.into(),
        })
    }

    pub fn curves(&self) -> &[Vec<f64>] {
        &self.curves
    }

    pub fn grid(&self) -> &QuantileGrid {
        &self.grid
    }

    /// Number of curves J.
    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn mean_curve(&self) -> Vec<f64> {
        mean_and_variance(&self.curves).0
    }

    pub fn variance_curve(&self) -> Vec<f64> {
        mean_and_variance(&self.curves).1
    }
}

pub fn build_stage_sample(rec: &StageRecord, grid: &QuantileGrid) -> Result<StageSample> {
    let curves = rec
        .locations
        .par_iter()
        .map(|m| extract_bac(m).map(|bac| evaluate_on_grid(&bac, grid)))
        .collect::<Result<Vec<_>>>()?;
    StageSample::new(curves, grid.clone(), rec.stage_id.clone())
}
