//! Synthetic stages: spherical caps carrying a random texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::{HeightMatrix, StageRecord, DEFAULT_DX_UM, DEFAULT_DY_UM};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStage {
    pub rows: usize,
    pub cols: usize,
    pub dx: f64,
    pub dy: f64,
    pub n_locations: usize,
    pub radius_um: f64,
    /// Standard deviation of the surface texture.
    pub roughness_um: f64,
    /// Location-to-location spread of the roughness, relative.
    pub roughness_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticStage {
    fn default() -> Self {
        SyntheticStage {
            rows: 48,
            cols: 64,
            dx: DEFAULT_DX_UM,
            dy: DEFAULT_DY_UM,
            n_locations: 9,
            radius_um: 60.0,
            roughness_um: 0.05,
            roughness_spread: 0.1,
            seed: 1,
        }
    }
}

impl SyntheticStage {
    pub fn with_roughness(self, roughness_um: f64) -> Self {
        SyntheticStage { roughness_um, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SyntheticStage { seed, ..self }
    }

    pub fn generate(&self, stage_id: &str, stage_label: &str) -> Result<StageRecord> {
        let half_w = self.cols as f64 * self.dx / 2.0;
        let half_h = self.rows as f64 * self.dy / 2.0;
        if self.radius_um * self.radius_um <= 4.0 * (half_w * half_w + half_h * half_h) {
            return Err(Error::invalid("sphere radius too small for the field of view"));
        }
        if !(self.roughness_um >= 0.0) || !(self.roughness_spread >= 0.0) {
            return Err(Error::invalid("roughness parameters must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let locations = (0..self.n_locations)
            .map(|k| {
                let xc = half_w + rng.gen_range(-half_w..half_w) * 0.5;
                let yc = half_h + rng.gen_range(-half_h..half_h) * 0.5;
                let zc = rng.gen_range(-5.0..5.0) - self.radius_um;
                let sd = self.roughness_um * (1.0 + self.roughness_spread * rng.gen_range(-1.0..1.0));
                let noise = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
                let z = (0..self.rows * self.cols)
                    .map(|i| {
                        let x = (i % self.cols) as f64 * self.dx - xc;
                        let y = (i / self.cols) as f64 * self.dy - yc;
                        let cap = zc + (self.radius_um.powi(2) - x * x - y * y).sqrt();
                        cap + noise.sample(&mut rng)
                    })
                    .collect();
                HeightMatrix::new(
                    self.rows,
                    self.cols,
                    self.dx,
                    self.dy,
                    z,
                    format!("loc{k:02}"),
                    stage_id,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        StageRecord::new(stage_id, stage_label, locations, None)
    }
}
