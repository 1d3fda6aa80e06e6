use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ego-centred BEV raster. Column index grows with +x, row index with +y;
/// the ego sits at the geometric centre of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    /// Metres per cell edge.
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            height: 200,
            width: 200,
            resolution: 0.5,
        }
    }
}

impl GridSpec {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self> {
        let g = Self {
            height,
            width,
            resolution,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "grid must be non-empty, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!(
                "grid resolution must be positive, got {}",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Metric centre of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5 - self.width as f64 / 2.0) * self.resolution,
            (row as f64 + 0.5 - self.height as f64 / 2.0) * self.resolution,
        )
    }

    /// Fractional cell coordinates of a metric point; cell centres map to
    /// integers.
    pub fn to_cell(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.resolution + self.width as f64 / 2.0 - 0.5,
            y / self.resolution + self.height as f64 / 2.0 - 0.5,
        )
    }

    /// Half of the grid's extent along x and y in metres.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution / 2.0,
            self.height as f64 * self.resolution / 2.0,
        )
    }
}
