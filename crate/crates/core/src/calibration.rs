//! Desk-scale training protocol and the thresholds measured for it.
//!
//! Pilot measurements (seed 0, 2000 steps, k = 16, 200 generated 64x64
//! scenes, 100 held-out scenes):
//!
//! | quantity                              | init   | trained |
//! |---------------------------------------|--------|---------|
//! | L_rec on 200 training pairs / smoothed| 0.3507 | 0.1366  |
//! | held-out L_rec                        | 0.3955 | 0.1470  |
//! | held-out L_con                        | 0.0628 | 0.00102 |
//! | held-out self-transfer MAE            | 0      | 0.0177  |
//! | anti-collapse rate (neighbour pairs)  | 1.00   | 1.00    |
//!
//! Ablation at 600 steps, held-out L_rec for k = 2, 8, 16:
//! 0.366, 0.1575, 0.1557 (seed 0) and 0.365, 0.1573, 0.1556 (seed 1).
//! The k = 8 / k = 16 ordering held on all five held-out pair draws tried
//! for both seeds.

use crate::encoder::EncoderConfig;
use crate::imaging::Image;
use crate::synth::desk_dataset;
use crate::trainer::TrainConfig;

pub const DESK_TRAIN_COUNT: usize = 200;
pub const DESK_TRAIN_SEED: u64 = 1;
pub const DESK_HELD_OUT_COUNT: usize = 100;
pub const DESK_HELD_OUT_SEED: u64 = 2;
pub const DESK_IMAGE_SIZE: usize = 64;
pub const DESK_STEPS: u64 = 2000;
pub const DESK_WALL_CLOCK_LIMIT_SECS: f64 = 30.0 * 60.0;

/// Pair seed for measuring the initial reconstruction loss on training images.
pub const INITIAL_PAIR_SEED: u64 = 99;
/// Pair seed for held-out reconstruction and consistency measurements.
pub const HELD_OUT_PAIR_SEED: u64 = 7;
/// Reports averaged for the final smoothed reconstruction loss.
pub const SMOOTHING_WINDOW: usize = 100;

/// Required ratio of final smoothed to initial reconstruction loss.
pub const RECONSTRUCTION_DROP: f64 = 0.5;
/// Mean absolute error bound for `transfer(x, x)` against `x`
/// (pilot: 0.0177).
pub const SELF_TRANSFER_MAE_THRESHOLD: f64 = 0.03;
/// Bound on the mean squared distance between the normalized forms of two
/// perturbations of one image (pilot: 0.00102, untrained: 0.0628).
pub const NORMALIZED_DISTANCE_THRESHOLD: f64 = 0.003;
/// Minimum fraction of held-out pairs whose output stays nearer its content.
pub const ANTI_COLLAPSE_MIN_RATE: f64 = 0.9;

/// Step budget shared by every run of the k ablation.
pub const ABLATION_STEPS: u64 = 600;
pub const ABLATION_KS: [usize; 3] = [2, 8, 16];

/// Allowed relative increase of median time from one patch size to the
/// next larger one. Per-pixel work is identical for all patch sizes on a CPU,
/// so timings are flat and differ by scheduler noise (2-3% observed).
pub const PATCH_TIME_TOLERANCE: f64 = 0.10;
/// Accepted time ratio when the pixel count doubles at a fixed patch size
/// (pilot: 2.04 to 2.06).
pub const DOUBLING_TIME_RATIO: (f64, f64) = (1.5, 2.5);

/// Desk training configuration for a given `k` and step budget.
pub fn desk_config(k: usize, steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        encoder: EncoderConfig { k, ..EncoderConfig::default() },
        image_size: DESK_IMAGE_SIZE,
        ..TrainConfig::default()
    }
}

pub fn desk_train_images() -> Vec<Image> {
    desk_dataset(DESK_TRAIN_COUNT, DESK_IMAGE_SIZE, DESK_TRAIN_SEED)
}

pub fn desk_held_out_images() -> Vec<Image> {
    desk_dataset(DESK_HELD_OUT_COUNT, DESK_IMAGE_SIZE, DESK_HELD_OUT_SEED)
}

/// Held-out `(content, style)` pairs: each image styled by its predecessor.
pub fn held_out_style_pairs(images: &[Image]) -> Vec<(&Image, &Image)> {
    let n = images.len();
    (0..n).map(|i| (&images[i], &images[(i + n - 1) % n])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = desk_config(16, DESK_STEPS);
        assert_eq!((c.lambda, c.lr, c.batch_size), (10.0, 3e-4, 8));
        assert_eq!(c.encoder.k, 16);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn style_pairs_wrap() {
        let imgs = desk_dataset(3, 8, 0);
        let pairs = held_out_style_pairs(&imgs);
        assert!(std::ptr::eq(pairs[0].1, &imgs[2]));
        assert!(std::ptr::eq(pairs[2].1, &imgs[1]));
    }
}
