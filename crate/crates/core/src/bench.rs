//! Patch-size sweep of the tiled kernel: median wall time and instrumented
//! peak working memory per patch size.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dncm::{dncm_apply_tiled_with, ColorMapMatrix, DncmError, ProjectionPair, Role, TiledOptions};
use crate::imaging::Image;

pub const BENCH_CSV_HEADER: &str = "patch_size,pixels,seconds,peak_bytes";
pub const MIN_REPEATS: usize = 5;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least 2 patch sizes, got {0}")]
    TooFewSizes(usize),
    #[error("need at least {MIN_REPEATS} repeats, got {0}")]
    TooFewRepeats(usize),
    #[error(transparent)]
    Dncm(#[from] DncmError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRecord {
    pub patch_size: usize,
    pub pixels: usize,
    pub seconds: f64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub patch_sizes: Vec<usize>,
    pub k: usize,
    pub workers: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(height: usize, width: usize, patch_sizes: Vec<usize>) -> Self {
        Self { height, width, patch_sizes, k: 16, workers: 1, repeats: MIN_REPEATS, seed: 0 }
    }
}

/// Smooth gradients with per-pixel noise.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sh, sw) = (height.max(2) as f32 - 1.0, width.max(2) as f32 - 1.0);
    let mut data = Vec::with_capacity(height * width * 3);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f32 / sh, c as f32 / sw);
            for base in [x, y, 0.5 * (x + y)] {
                data.push((base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(height, width, data).expect("nonzero size")
}

/// A fixed non-identity color map for timing.
pub fn bench_params(k: usize, seed: u64) -> (ColorMapMatrix, ProjectionPair) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = ColorMapMatrix::<f32>::identity(k)
        .values()
        .iter()
        .map(|v| v + rng.gen_range(-0.1..0.1))
        .collect();
    let t = ColorMapMatrix::new(k, values).expect("k*k finite values");
    (t, ProjectionPair::seeded(Role::Stylizing, k, seed))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench_patch_sweep(config: &BenchConfig) -> Result<Vec<BenchRecord>, BenchError> {
    if config.patch_sizes.len() < 2 {
        return Err(BenchError::TooFewSizes(config.patch_sizes.len()));
    }
    if config.repeats < MIN_REPEATS {
        return Err(BenchError::TooFewRepeats(config.repeats));
    }
    let image = synthetic_image(config.height, config.width, config.seed);
    let (t, proj) = bench_params(config.k, config.seed);
    config
        .patch_sizes
        .iter()
        .map(|&patch| {
            let opts = TiledOptions { patch_size: patch, workers: config.workers, clamp: true };
            // warm-up run, also supplies the memory figure
            let (_, stats) = dncm_apply_tiled_with(&image, &t, &proj, &opts)?;
            let mut times = Vec::with_capacity(config.repeats);
            for _ in 0..config.repeats {
                let start = Instant::now();
                let (out, _) = dncm_apply_tiled_with(&image, &t, &proj, &opts)?;
                times.push(start.elapsed().as_secs_f64());
                drop(out);
            }
            Ok(BenchRecord {
                patch_size: patch,
                pixels: image.pixel_count(),
                seconds: median(times),
                peak_bytes: stats.peak_bytes,
            })
        })
        .collect()
}

/// CSV with a leading `# workers=N` comment line.
pub fn bench_csv(records: &[BenchRecord], workers: usize) -> String {
    let mut s = format!("# workers={workers}\n{BENCH_CSV_HEADER}\n");
    for r in records {
        writeln!(s, "{},{},{:.6},{}", r.patch_size, r.pixels, r.seconds, r.peak_bytes).expect("write to string");
    }
    s
}

/// Parse [`bench_csv`] output back into records; comment lines are skipped.
pub fn parse_bench_csv(text: &str) -> Option<Vec<BenchRecord>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next()? != BENCH_CSV_HEADER {
        return None;
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return None;
            }
            Some(BenchRecord {
                patch_size: f[0].parse().ok()?,
                pixels: f[1].parse().ok()?,
                seconds: f[2].parse().ok()?,
                peak_bytes: f[3].parse().ok()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_shape_and_memory_order() {
        let cfg = BenchConfig::new(64, 64, vec![8, 16, 32, 64]);
        for _ in 0..3 {
            let recs = bench_patch_sweep(&cfg).unwrap();
            assert_eq!(recs.len(), 4);
            assert!(recs.iter().all(|r| r.seconds > 0.0 && r.peak_bytes > 0 && r.pixels == 4096));
            assert!(recs.windows(2).all(|w| w[0].peak_bytes < w[1].peak_bytes));
        }
    }

    #[test]
    fn argument_checks() {
        assert!(matches!(bench_patch_sweep(&BenchConfig::new(8, 8, vec![4])), Err(BenchError::TooFewSizes(1))));
        let cfg = BenchConfig { repeats: 3, ..BenchConfig::new(8, 8, vec![4, 8]) };
        assert!(matches!(bench_patch_sweep(&cfg), Err(BenchError::TooFewRepeats(3))));
    }

    #[test]
    fn csv_roundtrip() {
        let recs = vec![
            BenchRecord { patch_size: 256, pixels: 100, seconds: 0.5, peak_bytes: 10 },
            BenchRecord { patch_size: 512, pixels: 100, seconds: 0.25, peak_bytes: 20 },
        ];
        let csv = bench_csv(&recs, 1);
        assert!(csv.starts_with("# workers=1\npatch_size,pixels,seconds,peak_bytes\n"));
        assert_eq!(parse_bench_csv(&csv).unwrap(), recs);
        assert!(parse_bench_csv("bad,header\n").is_none());
    }

    #[test]
    fn synthetic_image_in_range_and_deterministic() {
        let a = synthetic_image(9, 13, 4);
        assert_eq!(a, synthetic_image(9, 13, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
