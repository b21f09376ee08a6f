//! Procedural outdoor-like scenes for desk-scale training: a sky gradient
//! over a ground plane with a handful of shaded ellipses and mild noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::{save_raster, Image, RasterError};

const GROUNDS: [[f32; 3]; 3] = [[0.35, 0.45, 0.2], [0.5, 0.4, 0.3], [0.55, 0.55, 0.55]];

fn jitter(rng: &mut impl Rng, base: [f32; 3], sigma: f64) -> [f32; 3] {
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    base.map(|v| (v + n.sample(rng) as f32).clamp(0.0, 1.0))
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    color: [f32; 3],
}

pub fn scene(rng: &mut impl Rng, side: usize) -> Image {
    let horizon: f32 = rng.gen_range(0.3..0.7);
    let sky_top = jitter(rng, [0.35, 0.55, 0.85], 0.12);
    let sky_bottom = jitter(rng, [0.75, 0.82, 0.9], 0.08);
    let base = GROUNDS[rng.gen_range(0..GROUNDS.len())];
    let ground = jitter(rng, base, 0.1);

    let n_objects = rng.gen_range(3..8);
    let objects: Vec<Ellipse> = (0..n_objects)
        .map(|_| {
            let (cx, cy) = (rng.gen(), rng.gen());
            let (rx, ry) = (rng.gen_range(0.05..0.25), rng.gen_range(0.05..0.25));
            let dim: f32 = rng.gen_range(0.3..1.0);
            let mut color = [rng.gen::<f32>() * dim, rng.gen::<f32>() * dim, rng.gen::<f32>() * dim];
            if rng.gen::<f32>() < 0.3 {
                color = [rng.gen_range(0.05..0.95); 3];
            }
            Ellipse { cx, cy, rx, ry, color }
        })
        .collect();

    let noise = Normal::new(0.0, 0.01).expect("positive sigma");
    let scale = (side.max(2) - 1) as f32;
    let mut img = Image::filled(side, side, [0.0; 3]).expect("nonzero side");
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f32 / scale, c as f32 / scale);
            let mut px = if y > horizon {
                ground.map(|g| g * (0.7 + 0.3 * y))
            } else {
                let t = y / horizon;
                [0, 1, 2].map(|i| sky_top[i] * (1.0 - t) + sky_bottom[i] * t)
            };
            for e in &objects {
                let (dx, dy) = ((x - e.cx) / e.rx, (y - e.cy) / e.ry);
                if dx * dx + dy * dy < 1.0 {
                    let light = (1.0 - 0.4 * (0.5 * dx + 0.5 * dy)).clamp(0.5, 1.3);
                    px = e.color.map(|v| (v * light).clamp(0.0, 1.0));
                }
            }
            img.set_pixel(r, c, px);
        }
    }
    for v in img.data_mut() {
        *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
    }
    img
}

/// `count` scenes of `side x side`, deterministic in `seed`.
pub fn desk_dataset(count: usize, side: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(&mut rng, side)).collect()
}

/// Write a dataset as `scene_0000.png`, ... into `dir`.
pub fn write_dataset(dir: &Path, count: usize, side: usize, seed: u64) -> Result<Vec<PathBuf>, RasterError> {
    std::fs::create_dir_all(dir).map_err(RasterError::Io)?;
    desk_dataset(count, side, seed)
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("scene_{i:04}.png"));
            save_raster(img, &path).map(|_| path)
        })
        .collect()
}
