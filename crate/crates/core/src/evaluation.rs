//! Held-out metrics for trained models.

use rayon::prelude::*;

use crate::augment::Augmenter;
use crate::imaging::Image;
use crate::pipeline::{Pipeline, PipelineError};
use crate::tensor::{mean_abs_diff, mean_squared_diff};
use crate::trainer::{evaluate_pairs, image_matrix, LossReport, Model, TrainError};

fn mad(a: &Image, b: &Image) -> f64 {
    mean_abs_diff(&image_matrix::<f32>(a), &image_matrix::<f32>(b)).expect("equal shapes") as f64
}

/// One perturbation pair per image, seeded by `seed` and the image index.
pub fn perturbed_pairs(images: &[Image], seed: u64) -> Vec<(Image, Image)> {
    let aug = Augmenter::default();
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| aug.make_pair(img, seed.wrapping_mul(0x1000_0001).wrapping_add(i as u64)))
        .collect()
}

/// Mean `(L_rec, L_con)` over `pairs`.
pub fn pair_losses(model: &Model, pairs: &[(Image, Image)]) -> Result<(f64, f64), TrainError> {
    evaluate_pairs(model, pairs)
}

/// Mean of `l_rec` over the last `window` reports.
pub fn smoothed_reconstruction(log: &[LossReport], window: usize) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return None;
    }
    Some(tail.iter().map(|r| r.l_rec).sum::<f64>() / tail.len() as f64)
}

/// Mean absolute error of `transfer(img, img)` against `img`.
pub fn self_transfer_error(pipeline: &Pipeline, images: &[Image]) -> Result<f64, PipelineError> {
    let errs: Vec<f64> = images
        .iter()
        .map(|img| pipeline.transfer(img, img).map(|y| mad(&y, img)))
        .collect::<Result<_, _>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

/// Mean squared distance between the normalized forms of each pair.
pub fn normalized_distance(pipeline: &Pipeline, pairs: &[(Image, Image)]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for (a, b) in pairs {
        let (za, _, _) = pipeline.normalize(a)?;
        let (zb, _, _) = pipeline.normalize(b)?;
        total += mean_squared_diff(&image_matrix::<f32>(za.image()), &image_matrix::<f32>(zb.image()))
            .expect("equal shapes") as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Outcome of one content/style check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseSample {
    pub to_content: f64,
    pub to_style: f64,
}

impl CollapseSample {
    pub fn holds(&self) -> bool {
        self.to_content < self.to_style
    }
}

/// For each `(content, style)` pair, distances of the transfer result to
/// both inputs.
pub fn collapse_samples(pipeline: &Pipeline, pairs: &[(&Image, &Image)]) -> Result<Vec<CollapseSample>, PipelineError> {
    pairs
        .iter()
        .map(|(c, s)| {
            let y = pipeline.transfer(c, s)?;
            Ok(CollapseSample { to_content: mad(&y, c), to_style: mad(&y, s) })
        })
        .collect()
}

/// Fraction of samples where the output stays nearer its content.
pub fn anti_collapse_rate(samples: &[CollapseSample]) -> f64 {
    samples.iter().filter(|s| s.holds()).count() as f64 / samples.len().max(1) as f64
}
