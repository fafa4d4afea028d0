use serde::{Deserialize, Serialize};

use super::{DspError, Result, AZIMUTH_FOV_DEG, MAX_RANGE_M, N_AZIMUTH, N_SAMPLES, RANGE_BIN_M};

/// Range/angle lattice: row `i` sits at `i * range_bin_m`, column `k` at
/// `first_angle_deg + k * angle_step_deg`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub range_bins: usize,
    pub range_bin_m: f64,
    pub cols: usize,
    pub first_angle_deg: f64,
    pub angle_step_deg: f64,
}

impl Default for PolarGrid {
    fn default() -> Self {
        Self {
            range_bins: N_SAMPLES,
            range_bin_m: RANGE_BIN_M,
            cols: N_AZIMUTH,
            first_angle_deg: -AZIMUTH_FOV_DEG,
            angle_step_deg: 2.0 * AZIMUTH_FOV_DEG / (N_AZIMUTH - 1) as f64,
        }
    }
}

impl PolarGrid {
    fn validate(&self) -> Result<()> {
        if self.range_bins == 0 || self.cols == 0 {
            return Err(DspError::Grid("polar grid has no cells".into()));
        }
        if !(self.range_bin_m > 0.0) || !(self.angle_step_deg > 0.0) {
            return Err(DspError::Grid("polar grid steps must be positive".into()));
        }
        Ok(())
    }

    /// Fractional (row, column) of a Cartesian point.
    pub fn locate(&self, x: f64, y: f64) -> (f64, f64) {
        let r = x.hypot(y);
        let theta = y.atan2(x).to_degrees();
        (r / self.range_bin_m, (theta - self.first_angle_deg) / self.angle_step_deg)
    }

    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        let r = row as f64 * self.range_bin_m;
        let t = (self.first_angle_deg + col as f64 * self.angle_step_deg).to_radians();
        (r * t.cos(), r * t.sin())
    }
}

/// Metric grid, rows along `x` (forward, row 0 nearest) and columns along
/// `y`. Cell centres sit half a step inside the bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartesianGrid {
    pub rows: usize,
    pub cols: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for CartesianGrid {
    fn default() -> Self {
        let half_width = MAX_RANGE_M * AZIMUTH_FOV_DEG.to_radians().sin();
        Self {
            rows: 128,
            cols: 128,
            x_min: 0.0,
            x_max: MAX_RANGE_M,
            y_min: -half_width,
            y_max: half_width,
        }
    }
}

impl CartesianGrid {
    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(DspError::Grid("Cartesian grid has no cells".into()));
        }
        if !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(DspError::Grid("Cartesian bounds are empty".into()));
        }
        Ok(())
    }

    fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.rows as f64
    }

    fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.cols as f64
    }

    pub fn point(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (row as f64 + 0.5) * self.dx(),
            self.y_min + (col as f64 + 0.5) * self.dy(),
        )
    }

    pub fn locate(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x_min) / self.dx() - 0.5, (y - self.y_min) / self.dy() - 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    PolarToCart,
    CartToPolar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    Nearest,
    Bilinear,
}

/// Reads `src` at a fractional index. The domain is each cell's half-width
/// around the outermost centres; anything beyond returns `None`.
fn sample(src: &[f64], rows: usize, cols: usize, fi: f64, fj: f64, interp: Interp) -> Option<f64> {
    let inside = |f: f64, n: usize| f >= -0.5 && f <= n as f64 - 0.5;
    if !fi.is_finite() || !fj.is_finite() || !inside(fi, rows) || !inside(fj, cols) {
        return None;
    }
    let clamp = |f: f64, n: usize| f.max(0.0).min((n - 1) as f64);
    let (fi, fj) = (clamp(fi, rows), clamp(fj, cols));
    match interp {
        Interp::Nearest => {
            let i = (fi.round() as usize).min(rows - 1);
            let j = (fj.round() as usize).min(cols - 1);
            Some(src[i * cols + j])
        }
        Interp::Bilinear => {
            let (i0, j0) = (fi.floor() as usize, fj.floor() as usize);
            let (i1, j1) = ((i0 + 1).min(rows - 1), (j0 + 1).min(cols - 1));
            let (ti, tj) = (fi - i0 as f64, fj - j0 as f64);
            let at = |i: usize, j: usize| src[i * cols + j];
            let top = at(i0, j0) * (1.0 - tj) + at(i0, j1) * tj;
            let bottom = at(i1, j0) * (1.0 - tj) + at(i1, j1) * tj;
            Some(top * (1.0 - ti) + bottom * ti)
        }
    }
}

fn check_len(src: &[f64], rows: usize, cols: usize) -> Result<()> {
    if src.len() != rows * cols {
        return Err(DspError::Grid(format!(
            "source has {} cells, grid expects {}",
            src.len(),
            rows * cols
        )));
    }
    Ok(())
}

pub fn polar_to_cartesian(
    src: &[f64],
    polar: &PolarGrid,
    cart: &CartesianGrid,
    interp: Interp,
    fill: f64,
) -> Result<Vec<f64>> {
    polar.validate()?;
    cart.validate()?;
    check_len(src, polar.range_bins, polar.cols)?;
    let mut out = Vec::with_capacity(cart.rows * cart.cols);
    for i in 0..cart.rows {
        for j in 0..cart.cols {
            let (x, y) = cart.point(i, j);
            let (fi, fj) = polar.locate(x, y);
            out.push(sample(src, polar.range_bins, polar.cols, fi, fj, interp).unwrap_or(fill));
        }
    }
    Ok(out)
}

pub fn cartesian_to_polar(
    src: &[f64],
    cart: &CartesianGrid,
    polar: &PolarGrid,
    interp: Interp,
    fill: f64,
) -> Result<Vec<f64>> {
    polar.validate()?;
    cart.validate()?;
    check_len(src, cart.rows, cart.cols)?;
    let mut out = Vec::with_capacity(polar.range_bins * polar.cols);
    for i in 0..polar.range_bins {
        for j in 0..polar.cols {
            let (x, y) = polar.point(i, j);
            let (fi, fj) = cart.locate(x, y);
            out.push(sample(src, cart.rows, cart.cols, fi, fj, interp).unwrap_or(fill));
        }
    }
    Ok(out)
}

/// Resamples `src`, laid out on the source grid implied by `direction`.
pub fn polar_cartesian_resample(
    src: &[f64],
    polar: &PolarGrid,
    cart: &CartesianGrid,
    direction: Direction,
    interp: Interp,
    fill: f64,
) -> Result<Vec<f64>> {
    match direction {
        Direction::PolarToCart => polar_to_cartesian(src, polar, cart, interp, fill),
        Direction::CartToPolar => cartesian_to_polar(src, cart, polar, interp, fill),
    }
}
