//! Forward-pass throughput: batch 1, inference mode, warm-up excluded.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{standardize_frames, ModelError, PolarNet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_shape: [usize; 3],
    pub param_count: usize,
    pub iters: usize,
    pub warmup: usize,
    pub threads: usize,
    /// Forward passes per second over all threads.
    pub fps: f64,
    pub wall_s: f64,
    pub latency: Latency,
    /// `VmHWM` of this process, when the platform exposes it.
    pub peak_rss_bytes: Option<u64>,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// `threads` independent loops of `warmup + iters` forwards each on a fixed
/// random frame; `fps = threads * iters / wall time of the timed region`.
pub fn bench(model: &PolarNet<f32>, iters: usize, warmup: usize, threads: usize) -> Result<BenchReport, ModelError> {
    let threads = threads.max(1);
    let iters = iters.max(1);
    let shape = model.config().input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = Tensor::from_fn([1, shape[0], shape[1], shape[2]], |_| rng.random_range(-1.0f32..1.0));
    standardize_frames(&mut x)?;

    let worker = |start: &std::sync::Barrier| -> Result<Vec<f64>, ModelError> {
        for _ in 0..warmup {
            model.forward(&x)?;
        }
        start.wait();
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            model.forward(&x)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(times)
    };
    // main thread joins the barrier so the clock starts after every warm-up
    let start = std::sync::Barrier::new(threads + 1);
    let (wall, results) = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads).map(|_| s.spawn(|| worker(&start))).collect();
        start.wait();
        let t0 = Instant::now();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().expect("bench thread")).collect();
        (t0.elapsed().as_secs_f64(), results)
    });
    let mut times = Vec::with_capacity(threads * iters);
    for r in results {
        times.extend(r?);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchReport {
        input_shape: shape,
        param_count: model.param_count().total,
        iters,
        warmup,
        threads,
        fps: (threads * iters) as f64 / wall,
        wall_s: wall,
        latency: Latency {
            mean_ms: times.iter().sum::<f64>() / times.len() as f64,
            p50_ms: percentile(&times, 0.5),
            p90_ms: percentile(&times, 0.9),
            p99_ms: percentile(&times, 0.99),
            max_ms: *times.last().expect("at least one iteration"),
        },
        peak_rss_bytes: peak_rss_bytes(),
    })
}
