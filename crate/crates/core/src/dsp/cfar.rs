use serde::{Deserialize, Serialize};

use super::{DspError, Result};

/// Cell-averaging CFAR window. Per-axis counts are `[rows, cols]` and extend
/// on both sides of the cell under test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfarSpec {
    pub guard_cells: [usize; 2],
    pub training_cells: [usize; 2],
    pub scale_alpha: f64,
}

impl CfarSpec {
    /// Training cells around an interior cell.
    pub fn interior_training_count(&self) -> usize {
        let outer = |a: usize| 2 * (self.guard_cells[a] + self.training_cells[a]) + 1;
        let inner = |a: usize| 2 * self.guard_cells[a] + 1;
        outer(0) * outer(1) - inner(0) * inner(1)
    }
}

/// Threshold multiplier giving false-alarm probability `pfa` on exponential
/// noise averaged over `n_train` cells: `N (pfa^(-1/N) - 1)`.
pub fn cfar_alpha_for_pfa(n_train: usize, pfa: f64) -> f64 {
    let n = n_train as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// Flags `power[i]` when it exceeds `alpha` times the mean of its training
/// ring. Windows are clipped at the borders.
pub fn ca_cfar_2d(power: &[f64], rows: usize, cols: usize, spec: &CfarSpec) -> Result<Vec<bool>> {
    if power.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(DspError::Cfar(format!(
            "{} cells for a {rows}x{cols} map",
            power.len()
        )));
    }
    if spec.training_cells == [0, 0] {
        return Err(DspError::Cfar("training window empty".into()));
    }
    // summed-area table with a zero border row and column
    let w = cols + 1;
    let mut sat = vec![0.0f64; (rows + 1) * w];
    for i in 0..rows {
        let mut row_sum = 0.0;
        for j in 0..cols {
            row_sum += power[i * cols + j];
            sat[(i + 1) * w + j + 1] = sat[i * w + j + 1] + row_sum;
        }
    }
    let rect = |i: usize, j: usize, hr: usize, hc: usize| {
        let (r0, r1) = (i.saturating_sub(hr), (i + hr + 1).min(rows));
        let (c0, c1) = (j.saturating_sub(hc), (j + hc + 1).min(cols));
        let s = sat[r1 * w + c1] - sat[r0 * w + c1] - sat[r1 * w + c0] + sat[r0 * w + c0];
        (s, (r1 - r0) * (c1 - c0))
    };
    let [gr, gc] = spec.guard_cells;
    let [tr, tc] = spec.training_cells;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (outer, n_outer) = rect(i, j, gr + tr, gc + tc);
            let (inner, n_inner) = rect(i, j, gr, gc);
            let n = n_outer - n_inner;
            if n == 0 {
                return Err(DspError::Cfar(format!("training window empty at ({i}, {j})")));
            }
            let mean = (outer - inner) / n as f64;
            out.push(power[i * cols + j] > spec.scale_alpha * mean);
        }
    }
    Ok(out)
}
