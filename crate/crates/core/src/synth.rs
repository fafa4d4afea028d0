//! Deterministic synthetic parking scenes: point-target echo cubes with
//! exactly known spectrum bins and column-wise open-space labels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    column_angle_deg, rda_log_magnitude, rda_to_ra, sca_to_rda, ComplexCube, RaMode, RadarCubeRda,
    RadarCubeSca, RadarMeta, RangeAzimuthMap, AZIMUTH_FOV_DEG, N_AZIMUTH, N_CHIRPS, N_SAMPLES,
    RANGE_BIN_M,
};
use crate::io::{self, IoError, Rten};
use crate::model::PolarMask;

/// Columns (and rows) of a polar mask.
pub const GRID: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTarget {
    pub range_m: f64,
    pub azimuth_deg: f64,
    pub velocity_kmph: f64,
    pub amplitude: f64,
}

/// Integer spectrum position of a target: range bin, centre-shifted
/// Doppler bin and azimuth column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bins {
    pub range: usize,
    pub doppler: usize,
    pub azimuth: usize,
}

fn doppler_bin_kmph() -> f64 {
    RadarMeta::default().doppler_bin_kmph()
}

impl PointTarget {
    pub fn at_bins(bins: Bins, amplitude: f64) -> Self {
        Self {
            range_m: bins.range as f64 * RANGE_BIN_M,
            azimuth_deg: column_angle_deg(bins.azimuth, N_AZIMUTH, AZIMUTH_FOV_DEG),
            velocity_kmph: (bins.doppler as f64 - (N_CHIRPS / 2) as f64) * doppler_bin_kmph(),
            amplitude,
        }
    }

    pub fn bins(&self) -> Bins {
        let step = 2.0 * AZIMUTH_FOV_DEG / (N_AZIMUTH - 1) as f64;
        Bins {
            range: (self.range_m / RANGE_BIN_M).round() as usize,
            doppler: (self.velocity_kmph / doppler_bin_kmph() + (N_CHIRPS / 2) as f64).round() as usize,
            azimuth: ((self.azimuth_deg + AZIMUTH_FOV_DEG) / step).round() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub targets: Vec<PointTarget>,
    /// First occupied range bin per azimuth column; `None` is fully open.
    pub obstacle_boundary: Vec<Option<usize>>,
    pub noise_sigma: f64,
    /// Seed of the noise stream.
    pub seed: u64,
    pub n_antennas: usize,
}

impl SceneSpec {
    pub fn empty(noise_sigma: f64, seed: u64) -> Self {
        Self {
            targets: Vec::new(),
            obstacle_boundary: vec![None; GRID],
            noise_sigma,
            seed,
            n_antennas: N_AZIMUTH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// No obstacles.
    Empty,
    #[default]
    Parking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub difficulty: Difficulty,
    pub cars: [usize; 2],
    pub targets_per_car: [usize; 2],
    /// Range bins allowed for a car's near face.
    pub front_bins: [usize; 2],
    pub car_width_m: [f64; 2],
    /// Minimum empty columns between neighbouring cars.
    pub column_gap: usize,
    pub amplitude: [f64; 2],
    pub noise_sigma: f64,
    pub n_antennas: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            difficulty: Difficulty::Parking,
            cars: [2, 8],
            targets_per_car: [3, 10],
            front_bins: [30, 120],
            car_width_m: [1.8, 4.5],
            column_gap: 2,
            amplitude: [0.5, 2.0],
            noise_sigma: 1e-9,
            n_antennas: N_AZIMUTH,
        }
    }
}

impl SceneParams {
    pub fn empty() -> Self {
        Self {
            difficulty: Difficulty::Empty,
            ..Self::default()
        }
    }
}

/// Draws a scene: cars placed on disjoint azimuth spans, each a cluster of
/// point targets within two bins of its near face, including both span
/// edges and the face itself.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, params: &SceneParams) -> SceneSpec {
    let seed = rng.random::<u64>();
    let mut scene = SceneSpec::empty(params.noise_sigma, seed);
    scene.n_antennas = params.n_antennas;
    if params.difficulty == Difficulty::Empty {
        return scene;
    }
    let n_cars = rng.random_range(params.cars[0]..=params.cars[1]);
    let step = 2.0 * AZIMUTH_FOV_DEG / (GRID - 1) as f64;
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    let mut attempts = 0;
    while spans.len() < n_cars && attempts < 500 {
        attempts += 1;
        let front = rng.random_range(params.front_bins[0]..=params.front_bins[1]);
        let width = rng.random_range(params.car_width_m[0]..=params.car_width_m[1]);
        let half_deg = (width / 2.0).atan2(front as f64 * RANGE_BIN_M).to_degrees();
        let centre = rng.random_range(-AZIMUTH_FOV_DEG..=AZIMUTH_FOV_DEG);
        let lo = ((centre - half_deg + AZIMUTH_FOV_DEG) / step).ceil().max(0.0) as usize;
        let hi = ((centre + half_deg + AZIMUTH_FOV_DEG) / step).floor().min((GRID - 1) as f64);
        if hi < lo as f64 {
            continue;
        }
        let hi = hi as usize;
        let clear = spans
            .iter()
            .all(|&(a, b, _)| hi + params.column_gap < a || lo > b + params.column_gap);
        if clear {
            spans.push((lo, hi, front));
        }
    }
    for &(lo, hi, front) in &spans {
        let doppler = rng.random_range(0..N_CHIRPS);
        let want = rng.random_range(params.targets_per_car[0]..=params.targets_per_car[1]);
        let mut slots = vec![(lo, 0usize), (hi, rng.random_range(0..3))];
        slots.dedup();
        let capacity = (hi - lo + 1) * 3;
        while slots.len() < want.min(capacity) {
            let slot = (rng.random_range(lo..=hi), rng.random_range(0..3));
            if !slots.contains(&slot) {
                slots.push(slot);
            }
        }
        for (col, dr) in slots {
            let bins = Bins {
                range: (front + dr).min(N_SAMPLES - 1),
                doppler,
                azimuth: col,
            };
            let amp = rng.random_range(params.amplitude[0]..=params.amplitude[1]);
            scene.targets.push(PointTarget::at_bins(bins, amp));
        }
        for b in &mut scene.obstacle_boundary[lo..=hi] {
            *b = Some(b.map_or(front, |v| v.min(front)));
        }
    }
    scene
}

/// Scene for a frame seed.
pub fn scene_for_seed(seed: u64, params: &SceneParams) -> SceneSpec {
    sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), params)
}

fn phasor(bin: f64, len: usize, fft_len: usize) -> Vec<Complex64> {
    (0..len)
        .map(|n| Complex64::from_polar(1.0, 2.0 * PI * bin * n as f64 / fft_len as f64))
        .collect()
}

/// Echo cube `[samples, chirps, antennas]`: one separable tone per target
/// plus circular complex Gaussian noise.
pub fn synthesize_sca(scene: &SceneSpec) -> RadarCubeSca {
    let na = scene.n_antennas;
    let mut cube = ComplexCube::zeros([N_SAMPLES, N_CHIRPS, na]);
    let data = cube.data_mut();
    for t in &scene.targets {
        let b = t.bins();
        // the Doppler FFT output is centre-shifted, so bin d is frequency d - N/2
        let s = phasor(b.range as f64, N_SAMPLES, N_SAMPLES);
        let c = phasor(b.doppler as f64 - (N_CHIRPS / 2) as f64, N_CHIRPS, N_CHIRPS);
        let a = phasor(b.azimuth as f64, na, N_AZIMUTH);
        for (i, &si) in s.iter().enumerate() {
            let si = si * t.amplitude;
            for (j, &cj) in c.iter().enumerate() {
                let sc = si * cj;
                let row = &mut data[(i * N_CHIRPS + j) * na..(i * N_CHIRPS + j + 1) * na];
                for (v, &ak) in row.iter_mut().zip(&a) {
                    *v += sc * ak;
                }
            }
        }
    }
    if scene.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        let scale = scene.noise_sigma / 2f64.sqrt();
        for v in data.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re * scale, im * scale);
        }
    }
    RadarCubeSca {
        cube,
        meta: RadarMeta::default(),
    }
}

/// Column `k` is open strictly in front of its boundary bin.
pub fn ground_truth_mask(scene: &SceneSpec) -> PolarMask {
    let mut mask = PolarMask::filled(GRID, GRID, true);
    for (col, b) in scene.obstacle_boundary.iter().enumerate().take(GRID) {
        if let Some(first) = *b {
            for row in first.min(GRID)..GRID {
                mask.set(row, col, false);
            }
        }
    }
    mask
}

/// Everything derived from one frame seed.
pub struct FrameProducts {
    pub scene: SceneSpec,
    pub sca: RadarCubeSca,
    pub rda: RadarCubeRda,
    pub ra: RangeAzimuthMap,
    pub mask: PolarMask,
}

pub fn frame_products(seed: u64, params: &SceneParams, mode: RaMode) -> FrameProducts {
    let scene = scene_for_seed(seed, params);
    let sca = synthesize_sca(&scene);
    let rda = sca_to_rda(&sca).expect("generator geometry is valid");
    let ra = rda_to_ra(&rda, mode);
    let mask = ground_truth_mask(&scene);
    FrameProducts {
        scene,
        sca,
        rda,
        ra,
        mask,
    }
}

/// Network-ready frame: RA `[128, 128]`, optional RAD `[128, 128, 64]`.
#[derive(Clone, Debug)]
pub struct Frame {
    pub seed: u64,
    pub ra: Vec<f32>,
    pub rad: Option<Vec<f32>>,
    pub mask: PolarMask,
}

pub fn make_frame(seed: u64, params: &SceneParams, mode: RaMode, with_rad: bool) -> Frame {
    let p = frame_products(seed, params, mode);
    Frame {
        seed,
        ra: p.ra.data.iter().map(|&v| v as f32).collect(),
        rad: with_rad.then(|| rda_log_magnitude(&p.rda).into_iter().map(|v| v as f32).collect()),
        mask: p.mask,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub sca: String,
    pub ra: String,
    pub rad: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub base_seed: u64,
    pub n_frames: usize,
    pub ra_mode: RaMode,
    pub train_fraction: f64,
    pub params: SceneParams,
    pub frames: Vec<FrameEntry>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self, IoError> {
        let path = dir.join(Self::FILE);
        let bytes = io::read_bytes(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| IoError::Unexpected {
            path,
            expected: "dataset manifest".into(),
            found: e.to_string(),
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameEntry> {
        self.frames.iter().filter(move |f| f.split == split)
    }
}

/// Train frames are the first `round(n * train_fraction)` seeds, test
/// frames the contiguous block after them.
pub fn split_of(index: usize, n_frames: usize, train_fraction: f64) -> Split {
    if index < (n_frames as f64 * train_fraction).round() as usize {
        Split::Train
    } else {
        Split::Test
    }
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Writes `sca_i.rten`, `ra_i.rten`, `rad_i.rten`, `mask_i.pgm` per frame
/// (frame `i` uses seed `base_seed + i`) and `manifest.json`.
pub fn generate_dataset(
    n_frames: usize,
    base_seed: u64,
    out_dir: &Path,
    params: &SceneParams,
    mode: RaMode,
) -> Result<DatasetManifest, IoError> {
    std::fs::create_dir_all(out_dir).map_err(|source| IoError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut frames = Vec::with_capacity(n_frames);
    for index in 0..n_frames {
        let seed = base_seed.wrapping_add(index as u64);
        let p = frame_products(seed, params, mode);
        let entry = FrameEntry {
            index,
            seed,
            split: split_of(index, n_frames, DEFAULT_TRAIN_FRACTION),
            sca: format!("sca_{index}.rten"),
            ra: format!("ra_{index}.rten"),
            rad: format!("rad_{index}.rten"),
            mask: format!("mask_{index}.pgm"),
        };
        let at = |name: &str| -> PathBuf { out_dir.join(name) };
        // double precision: the default noise floor is below f32 resolution
        io::rten_write(&at(&entry.sca), &Rten::complex_f64(&p.sca.cube.dims(), p.sca.cube.data()))?;
        let ra: Vec<f32> = p.ra.data.iter().map(|&v| v as f32).collect();
        io::rten_write(&at(&entry.ra), &Rten::f32([p.ra.rows, p.ra.cols], ra))?;
        let [nr, nd, na] = p.rda.cube.dims();
        let rad: Vec<f32> = rda_log_magnitude(&p.rda).into_iter().map(|v| v as f32).collect();
        io::rten_write(&at(&entry.rad), &Rten::f32([nr, na, nd], rad))?;
        io::write_pgm(&at(&entry.mask), &p.mask)?;
        frames.push(entry);
    }
    let manifest = DatasetManifest {
        base_seed,
        n_frames,
        ra_mode: mode,
        train_fraction: DEFAULT_TRAIN_FRACTION,
        params: params.clone(),
        frames,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    io::write_bytes(&out_dir.join(DatasetManifest::FILE), &json)?;
    Ok(manifest)
}

/// Frames `base_seed .. base_seed + n` built in memory, split like
/// [`generate_dataset`].
pub fn generate_frames(
    n_frames: usize,
    base_seed: u64,
    params: &SceneParams,
    mode: RaMode,
    with_rad: bool,
) -> (Vec<Frame>, Vec<Frame>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for index in 0..n_frames {
        let f = make_frame(base_seed.wrapping_add(index as u64), params, mode, with_rad);
        match split_of(index, n_frames, DEFAULT_TRAIN_FRACTION) {
            Split::Train => train.push(f),
            Split::Test => test.push(f),
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free() -> SceneParams {
        SceneParams {
            noise_sigma: 0.0,
            ..SceneParams::default()
        }
    }

    #[test]
    fn bins_round_trip_through_physical_units() {
        for (r, d, a) in [(0, 0, 0), (40, 10, 80), (127, 63, 127), (5, 32, 64)] {
            let b = Bins {
                range: r,
                doppler: d,
                azimuth: a,
            };
            let t = PointTarget::at_bins(b, 1.0);
            assert_eq!(t.bins(), b);
            assert!(t.range_m < 14.3);
            assert!(t.velocity_kmph.abs() <= 37.3 + 1e-9);
        }
    }

    #[test]
    fn empty_difficulty() {
        let s = scene_for_seed(3, &SceneParams::empty());
        assert!(s.targets.is_empty());
        assert!(s.obstacle_boundary.iter().all(Option::is_none));
        assert_eq!(ground_truth_mask(&s).open_fraction(), 1.0);
    }

    #[test]
    fn seeded_scenes_are_identical() {
        let a = serde_json::to_vec(&scene_for_seed(77, &SceneParams::default())).unwrap();
        let b = serde_json::to_vec(&scene_for_seed(77, &SceneParams::default())).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&scene_for_seed(78, &SceneParams::default())).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_target_peak() {
        let bins = Bins {
            range: 40,
            doppler: 10,
            azimuth: 80,
        };
        let mut scene = SceneSpec::empty(0.0, 0);
        scene.targets.push(PointTarget::at_bins(bins, 1.5));
        let rda = sca_to_rda(&synthesize_sca(&scene)).unwrap();
        assert_eq!(rda.cube.argmax_magnitude(), (40, 10, 80));
        let peak = rda.cube.get(40, 10, 80).norm();
        let expect = (N_SAMPLES * N_CHIRPS * N_AZIMUTH) as f64 * 1.5;
        assert!((peak - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn zero_padded_array_keeps_the_peak() {
        let bins = Bins {
            range: 7,
            doppler: 50,
            azimuth: 33,
        };
        let mut scene = SceneSpec::empty(0.0, 0);
        scene.n_antennas = 12;
        scene.targets.push(PointTarget::at_bins(bins, 1.0));
        let rda = sca_to_rda(&synthesize_sca(&scene)).unwrap();
        assert_eq!(rda.cube.argmax_magnitude(), (7, 50, 33));
        let expect = (N_SAMPLES * N_CHIRPS * 12) as f64;
        assert!((rda.cube.get(7, 50, 33).norm() - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn empty_scene_without_noise_is_zero() {
        let sca = synthesize_sca(&SceneSpec::empty(0.0, 1));
        assert!(sca.cube.data().iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn mask_definition() {
        let mut scene = SceneSpec::empty(0.0, 0);
        for b in &mut scene.obstacle_boundary[60..=70] {
            *b = Some(50);
        }
        let m = ground_truth_mask(&scene);
        assert_eq!(m.get(49, 65), 1);
        assert_eq!(m.get(50, 65), 0);
        assert_eq!(m.get(100, 65), 0);
        assert_eq!(m.get(50, 30), 1);
        scene.obstacle_boundary = vec![Some(0); GRID];
        assert_eq!(ground_truth_mask(&scene).open_fraction(), 0.0);
    }

    #[test]
    fn targets_sit_at_or_behind_their_boundary() {
        for seed in 0..200 {
            let s = scene_for_seed(seed, &noise_free());
            let m = ground_truth_mask(&s);
            for t in &s.targets {
                let b = t.bins();
                let boundary = s.obstacle_boundary[b.azimuth].expect("covered column");
                assert!(b.range >= boundary);
                assert_eq!(m.get(b.range, b.azimuth), 0);
            }
            // each car contributes a target on its boundary
            for (col, b) in s.obstacle_boundary.iter().enumerate() {
                if let Some(first) = b {
                    assert!(*first < GRID, "column {col}");
                }
            }
        }
    }

    #[test]
    fn target_bins_are_distinct() {
        for seed in 0..200 {
            let s = scene_for_seed(seed, &noise_free());
            let mut bins: Vec<_> = s.targets.iter().map(|t| (t.bins().range, t.bins().azimuth)).collect();
            let n = bins.len();
            bins.sort();
            bins.dedup();
            assert_eq!(bins.len(), n, "seed {seed}");
        }
    }

    #[test]
    fn split_blocks_are_disjoint() {
        let splits: Vec<_> = (0..10).map(|i| split_of(i, 10, DEFAULT_TRAIN_FRACTION)).collect();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 8);
        assert!(splits[..8].iter().all(|&s| s == Split::Train));
        assert!(splits[8..].iter().all(|&s| s == Split::Test));
    }
}
