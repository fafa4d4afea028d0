//! Radar front end: the samples/chirps/antennas to range/Doppler/azimuth
//! FFT cascade, Doppler reduction to range-azimuth maps, field-of-view
//! cropping, polar/Cartesian resampling and a cell-averaging CFAR baseline.

mod cfar;
mod geometry;

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cfar::{ca_cfar_2d, cfar_alpha_for_pfa, CfarSpec};
pub use geometry::{
    cartesian_to_polar, polar_cartesian_resample, polar_to_cartesian, CartesianGrid, Direction,
    Interp, PolarGrid,
};

pub const N_SAMPLES: usize = 128;
pub const N_CHIRPS: usize = 64;
/// Azimuth FFT length after zero-padding the antenna axis.
pub const N_AZIMUTH: usize = 128;
pub const RANGE_BIN_M: f64 = 0.1117;
pub const MAX_RANGE_M: f64 = 15.0;
pub const VELOCITY_SPAN_KMPH: f64 = 37.3;
pub const AZIMUTH_FOV_DEG: f64 = 45.0;
/// Added to magnitudes before taking the log so empty bins stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("FFT length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("cannot pad axis of length {len} to {target}")]
    Padding { len: usize, target: usize },
    #[error("cube geometry mismatch: {0}")]
    Geometry(String),
    #[error("crop [{min_deg}, {max_deg}] deg selects no columns")]
    EmptyCrop { min_deg: f64, max_deg: f64 },
    #[error("degenerate grid: {0}")]
    Grid(String),
    #[error("CFAR: {0}")]
    Cfar(String),
}

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarMeta {
    pub range_bin_m: f64,
    pub max_range_m: f64,
    pub velocity_span_kmph: f64,
    pub azimuth_fov_deg: f64,
}

impl Default for RadarMeta {
    fn default() -> Self {
        Self {
            range_bin_m: RANGE_BIN_M,
            max_range_m: MAX_RANGE_M,
            velocity_span_kmph: VELOCITY_SPAN_KMPH,
            azimuth_fov_deg: AZIMUTH_FOV_DEG,
        }
    }
}

impl RadarMeta {
    pub fn doppler_bin_kmph(&self) -> f64 {
        2.0 * self.velocity_span_kmph / N_CHIRPS as f64
    }
}

/// Row-major complex 3-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexCube {
    dims: [usize; 3],
    data: Vec<Complex64>,
}

impl ComplexCube {
    pub fn new(dims: [usize; 3], data: Vec<Complex64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(DspError::Geometry(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![Complex64::new(0.0, 0.0); dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> Complex64 {
        self.data[self.index(i, j, k)]
    }

    /// Position of the largest magnitude (first one on ties).
    pub fn argmax_magnitude(&self) -> (usize, usize, usize) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in self.data.iter().enumerate() {
            let m = v.norm_sqr();
            if m > best.1 {
                best = (i, m);
            }
        }
        let [_, d1, d2] = self.dims;
        (best.0 / (d1 * d2), (best.0 / d2) % d1, best.0 % d2)
    }
}

/// Raw echoes indexed `[sample, chirp, antenna]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarCubeSca {
    pub cube: ComplexCube,
    pub meta: RadarMeta,
}

/// Spectrum indexed `[range, doppler, azimuth]`, Doppler centre-shifted so
/// bin `N_CHIRPS / 2` is zero velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarCubeRda {
    pub cube: ComplexCube,
    pub meta: RadarMeta,
}

fn plan(len: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::<f64>::new().plan_fft_forward(len)
}

/// Unnormalized forward DFT along `axis`, zero-padding that axis to
/// `pad_to` first when given.
pub fn fft_axis(cube: &ComplexCube, axis: usize, pad_to: Option<usize>) -> Result<ComplexCube> {
    assert!(axis < 3, "axis {axis} out of range");
    let len = cube.dims[axis];
    let out_len = pad_to.unwrap_or(len);
    if out_len < len {
        return Err(DspError::Padding { len, target: out_len });
    }
    if !out_len.is_power_of_two() {
        return Err(DspError::NotPowerOfTwo(out_len));
    }
    let mut dims = cube.dims;
    dims[axis] = out_len;
    let mut out = ComplexCube::zeros(dims);
    let fft = plan(out_len);
    let mut line = vec![Complex64::new(0.0, 0.0); out_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let [a0, a1, a2] = cube.dims;
    let lines: Vec<(usize, usize)> = match axis {
        0 => (0..a1).flat_map(|j| (0..a2).map(move |k| (j, k))).collect(),
        1 => (0..a0).flat_map(|i| (0..a2).map(move |k| (i, k))).collect(),
        _ => (0..a0).flat_map(|i| (0..a1).map(move |j| (i, j))).collect(),
    };
    let src_at = |p: usize, (u, v): (usize, usize)| match axis {
        0 => cube.index(p, u, v),
        1 => cube.index(u, p, v),
        _ => cube.index(u, v, p),
    };
    for l in lines {
        line.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (p, slot) in line.iter_mut().take(len).enumerate() {
            *slot = cube.data[src_at(p, l)];
        }
        fft.process_with_scratch(&mut line, &mut scratch);
        for (p, &v) in line.iter().enumerate() {
            let idx = match axis {
                0 => out.index(p, l.0, l.1),
                1 => out.index(l.0, p, l.1),
                _ => out.index(l.0, l.1, p),
            };
            out.data[idx] = v;
        }
    }
    Ok(out)
}

/// Rotates axis 1 by half its length (`fftshift`).
fn shift_doppler(cube: &ComplexCube) -> ComplexCube {
    let [a0, a1, a2] = cube.dims;
    let half = a1 / 2;
    let mut out = ComplexCube::zeros(cube.dims);
    for i in 0..a0 {
        for j in 0..a1 {
            let dst = (j + half) % a1;
            let s = cube.index(i, j, 0);
            let d = out.index(i, dst, 0);
            out.data[d..d + a2].copy_from_slice(&cube.data[s..s + a2]);
        }
    }
    out
}

/// FFT over samples, then chirps (centre-shifted), then antennas zero-padded
/// to [`N_AZIMUTH`].
pub fn sca_to_rda(sca: &RadarCubeSca) -> Result<RadarCubeRda> {
    let [ns, nc, na] = sca.cube.dims;
    if ns != N_SAMPLES || nc != N_CHIRPS || na == 0 || na > N_AZIMUTH {
        return Err(DspError::Geometry(format!(
            "expected [{N_SAMPLES}, {N_CHIRPS}, 1..={N_AZIMUTH}], got {:?}",
            sca.cube.dims
        )));
    }
    let range = fft_axis(&sca.cube, 0, None)?;
    let doppler = shift_doppler(&fft_axis(&range, 1, None)?);
    let cube = fft_axis(&doppler, 2, Some(N_AZIMUTH))?;
    Ok(RadarCubeRda {
        cube,
        meta: sca.meta.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RaMode {
    /// Sum over Doppler of `ln(|x| + floor)`.
    #[default]
    SumLog,
    /// Maximum over Doppler of `ln(|x| + floor)`.
    Max,
}

impl std::str::FromStr for RaMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum_log" => Ok(Self::SumLog),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown RA mode {other:?} (expected sum_log or max)")),
        }
    }
}

impl std::fmt::Display for RaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SumLog => "sum_log",
            Self::Max => "max",
        })
    }
}

/// Real polar image, rows = range bins, columns = azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeAzimuthMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub mode: RaMode,
    /// Angle of column 0.
    pub first_angle_deg: f64,
    pub angle_step_deg: f64,
    pub range_bin_m: f64,
}

/// Idealized linear bin-to-angle map: `-fov + 2 fov k / (cols - 1)`.
pub fn column_angle_deg(col: usize, cols: usize, fov_deg: f64) -> f64 {
    -fov_deg + 2.0 * fov_deg * col as f64 / (cols - 1) as f64
}

impl RangeAzimuthMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn column_angle(&self, col: usize) -> f64 {
        self.first_angle_deg + col as f64 * self.angle_step_deg
    }

    pub fn polar_grid(&self) -> PolarGrid {
        PolarGrid {
            range_bins: self.rows,
            range_bin_m: self.range_bin_m,
            cols: self.cols,
            first_angle_deg: self.first_angle_deg,
            angle_step_deg: self.angle_step_deg,
        }
    }
}

fn log_mag(v: Complex64) -> f64 {
    (v.norm() + LOG_FLOOR).ln()
}

/// Collapses the Doppler axis of an RDA cube.
pub fn rda_to_ra(rda: &RadarCubeRda, mode: RaMode) -> RangeAzimuthMap {
    let [nr, nd, na] = rda.cube.dims;
    let init = match mode {
        RaMode::SumLog => 0.0,
        RaMode::Max => f64::NEG_INFINITY,
    };
    let mut data = vec![init; nr * na];
    for i in 0..nr {
        let row = &mut data[i * na..(i + 1) * na];
        for j in 0..nd {
            let base = rda.cube.index(i, j, 0);
            for (acc, &v) in row.iter_mut().zip(&rda.cube.data[base..base + na]) {
                let l = log_mag(v);
                match mode {
                    RaMode::SumLog => *acc += l,
                    RaMode::Max => *acc = acc.max(l),
                }
            }
        }
    }
    RangeAzimuthMap {
        rows: nr,
        cols: na,
        data,
        mode,
        first_angle_deg: -rda.meta.azimuth_fov_deg,
        angle_step_deg: 2.0 * rda.meta.azimuth_fov_deg / (na - 1) as f64,
        range_bin_m: rda.meta.range_bin_m,
    }
}

/// Log magnitudes reordered to `[range, azimuth, doppler]`, the layout the
/// network consumes with Doppler bins as channels.
pub fn rda_log_magnitude(rda: &RadarCubeRda) -> Vec<f64> {
    let [nr, nd, na] = rda.cube.dims;
    let mut out = vec![0.0; nr * na * nd];
    for i in 0..nr {
        for j in 0..nd {
            for k in 0..na {
                out[(i * na + k) * nd + j] = log_mag(rda.cube.get(i, j, k));
            }
        }
    }
    out
}

/// Keeps the columns whose angle lies in `[min_deg, max_deg]`.
pub fn crop_fov(map: &RangeAzimuthMap, min_deg: f64, max_deg: f64) -> Result<RangeAzimuthMap> {
    const TOL: f64 = 1e-9;
    let keep: Vec<usize> = (0..map.cols)
        .filter(|&c| {
            let a = map.column_angle(c);
            a >= min_deg - TOL && a <= max_deg + TOL
        })
        .collect();
    let (Some(&first), Some(&last)) = (keep.first(), keep.last()) else {
        return Err(DspError::EmptyCrop { min_deg, max_deg });
    };
    let cols = last - first + 1;
    let mut data = Vec::with_capacity(map.rows * cols);
    for r in 0..map.rows {
        data.extend_from_slice(&map.data[r * map.cols + first..=r * map.cols + last]);
    }
    Ok(RangeAzimuthMap {
        cols,
        data,
        first_angle_deg: map.column_angle(first),
        ..map.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    fn line(values: Vec<Complex64>) -> ComplexCube {
        let n = values.len();
        ComplexCube::new([1, 1, n], values).unwrap()
    }

    #[test]
    fn impulse_transforms_to_ones() {
        let x = line(vec![1.0.into(), 0.0.into(), 0.0.into(), 0.0.into()]);
        let y = fft_axis(&x, 2, None).unwrap();
        assert!(y.data().iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn tone_peaks_at_its_bin() {
        let n = 128;
        let x = line((0..n).map(|t| Complex64::from_polar(1.0, 2.0 * PI * 5.0 * t as f64 / n as f64)).collect());
        let y = fft_axis(&x, 2, None).unwrap();
        for (k, v) in y.data().iter().enumerate() {
            if k == 5 {
                assert!((v.norm() - n as f64).abs() < 1e-9);
            } else {
                assert!(v.norm() < 1e-9, "bin {k}: {}", v.norm());
            }
        }
    }

    #[test]
    fn parseval_and_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Complex64> = (0..64).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let y = fft_axis(&line(x.clone()), 2, None).unwrap();
        let ex: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let ey: f64 = y.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / 64.0;
        assert!((ex - ey).abs() / ex < 1e-9);
        for (a, b) in y.data().iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_padding_and_errors() {
        let x = line(vec![1.0.into(); 3]);
        assert_eq!(fft_axis(&x, 2, None), Err(DspError::NotPowerOfTwo(3)));
        let y = fft_axis(&x, 2, Some(8)).unwrap();
        assert_eq!(y.dims(), [1, 1, 8]);
        let mut padded = vec![Complex64::new(1.0, 0.0); 3];
        padded.resize(8, 0.0.into());
        for (a, b) in y.data().iter().zip(naive_dft(&padded)) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(fft_axis(&x, 2, Some(2)).is_err());
    }

    #[test]
    fn fft_along_each_axis_matches_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = [4, 8, 2];
        let data: Vec<Complex64> = (0..64).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let cube = ComplexCube::new(dims, data).unwrap();
        let y = fft_axis(&cube, 1, None).unwrap();
        for i in 0..4 {
            for k in 0..2 {
                let l: Vec<_> = (0..8).map(|j| cube.get(i, j, k)).collect();
                for (j, v) in naive_dft(&l).into_iter().enumerate() {
                    assert!((y.get(i, j, k) - v).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_cube_stays_zero() {
        let sca = RadarCubeSca {
            cube: ComplexCube::zeros([N_SAMPLES, N_CHIRPS, 8]),
            meta: RadarMeta::default(),
        };
        let rda = sca_to_rda(&sca).unwrap();
        assert_eq!(rda.cube.dims(), [128, 64, 128]);
        assert!(rda.cube.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn rejects_bad_geometry() {
        let sca = RadarCubeSca {
            cube: ComplexCube::zeros([64, N_CHIRPS, 8]),
            meta: RadarMeta::default(),
        };
        assert!(matches!(sca_to_rda(&sca), Err(DspError::Geometry(_))));
    }

    fn rda_from(dims: [usize; 3], data: Vec<Complex64>) -> RadarCubeRda {
        RadarCubeRda {
            cube: ComplexCube::new(dims, data).unwrap(),
            meta: RadarMeta::default(),
        }
    }

    #[test]
    fn sum_log_of_unit_cube_is_near_zero() {
        let rda = rda_from([4, 64, 4], vec![Complex64::new(0.6, 0.8); 4 * 64 * 4]);
        let ra = rda_to_ra(&rda, RaMode::SumLog);
        for v in &ra.data {
            assert!((v - 64.0 * (1.0 + LOG_FLOOR).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn max_mode_picks_the_loud_bin() {
        let mut data = vec![Complex64::new(0.0, 0.0); 2 * 8 * 3];
        let e = std::f64::consts::E;
        data[(1 * 8 + 5) * 3 + 2] = Complex64::new(0.0, e);
        let ra = rda_to_ra(&rda_from([2, 8, 3], data), RaMode::Max);
        assert!((ra.get(1, 2) - 1.0).abs() < 1e-9);
        assert!((ra.get(0, 0) - LOG_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_log_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [8, 4, 8];
        let data: Vec<Complex64> = (0..256).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let rda = rda_from(dims, data);
        let ra = rda_to_ra(&rda, RaMode::SumLog);
        for i in 0..8 {
            for k in 0..8 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += (rda.cube.get(i, j, k).norm() + LOG_FLOOR).ln();
                }
                assert_eq!(ra.get(i, k), acc);
            }
        }
    }

    #[test]
    fn rad_layout_puts_doppler_last() {
        let mut data = vec![Complex64::new(1.0, 0.0); 2 * 4 * 3];
        data[(1 * 4 + 2) * 3 + 1] = Complex64::new(5.0, 0.0);
        let rad = rda_log_magnitude(&rda_from([2, 4, 3], data));
        assert!((rad[(1 * 3 + 1) * 4 + 2] - (5.0 + LOG_FLOOR).ln()).abs() < 1e-12);
    }

    fn full_map() -> RangeAzimuthMap {
        RangeAzimuthMap {
            rows: 2,
            cols: 128,
            data: (0..256).map(|v| v as f64).collect(),
            mode: RaMode::SumLog,
            first_angle_deg: -45.0,
            angle_step_deg: 90.0 / 127.0,
            range_bin_m: RANGE_BIN_M,
        }
    }

    #[test]
    fn crop_full_span_is_identity() {
        let m = full_map();
        assert_eq!(crop_fov(&m, -45.0, 45.0).unwrap(), m);
    }

    #[test]
    fn crop_right_half() {
        let m = full_map();
        let c = crop_fov(&m, 0.0, 45.0).unwrap();
        assert_eq!(c.cols, 64);
        assert_eq!(c.get(1, 0), m.get(1, 64));
        for col in 0..64 {
            assert!((c.column_angle(col) - m.column_angle(col + 64)).abs() < 1e-12);
        }
        assert_eq!(crop_fov(&c, 0.0, 45.0).unwrap(), c);
        assert!(matches!(crop_fov(&m, 50.0, 60.0), Err(DspError::EmptyCrop { .. })));
    }
}
