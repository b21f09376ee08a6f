//! Two-stage transfer: normalize an image into the shared color space with
//! its own `d`, then stylize the normalized image with some `r`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::dncm::{dncm_apply_tiled_with, ColorMapMatrix, DncmError, ProjectionPair, Role, TiledOptions};
use crate::encoder::{encode, EncoderError};
use crate::imaging::{downsample, Image, ImageError, Thumbnail};
use crate::presets::{Preset, PresetError};
use crate::trainer::Model;

pub const DEFAULT_PATCH_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no checkpoint loaded")]
    NoCheckpoint,
    #[error("fingerprint mismatch: model {expected}, input {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("preset role is {0}, expected stylizing")]
    WrongRole(Role),
    #[error("empty frame sequence")]
    EmptySequence,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dncm(#[from] DncmError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Preset(#[from] PresetError),
}

pub fn fingerprint_hex(fp: &[u8; 8]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

/// An image in the normalized color space, kept unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    image: Image,
    k: usize,
    fingerprint: [u8; 8],
}

impl NormalizedImage {
    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        self.fingerprint
    }
}

/// Stylizing parameters from either a raw matrix or a stored preset.
#[derive(Debug, Clone, Copy)]
pub enum Style<'a> {
    Matrix(&'a ColorMapMatrix),
    Preset(&'a Preset),
}

#[derive(Debug, Default)]
pub struct CallCounters {
    pub encoder: AtomicU64,
    pub normalize: AtomicU64,
    pub stylize: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCounts {
    pub encoder: u64,
    pub normalize: u64,
    pub stylize: u64,
}

#[derive(Debug)]
pub struct Pipeline {
    model: Option<Arc<Model>>,
    fingerprint: [u8; 8],
    tiling: TiledOptions,
    counters: CallCounters,
}

impl Pipeline {
    pub fn new(model: impl Into<Arc<Model>>) -> Self {
        let model = model.into();
        Self {
            fingerprint: model.fingerprint(),
            model: Some(model),
            tiling: TiledOptions::new(DEFAULT_PATCH_SIZE),
            counters: CallCounters::default(),
        }
    }

    /// A pipeline without a checkpoint; every model operation fails with
    /// [`PipelineError::NoCheckpoint`].
    pub fn empty() -> Self {
        Self {
            model: None,
            fingerprint: [0; 8],
            tiling: TiledOptions::new(DEFAULT_PATCH_SIZE),
            counters: CallCounters::default(),
        }
    }

    pub fn with_patch_size(mut self, patch_size: usize) -> Self {
        self.tiling.patch_size = patch_size;
        self
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.tiling.workers = workers.max(1);
        self
    }

    pub fn model(&self) -> Result<&Model, PipelineError> {
        self.model.as_deref().ok_or(PipelineError::NoCheckpoint)
    }

    pub fn fingerprint(&self) -> Result<[u8; 8], PipelineError> {
        self.model()?;
        Ok(self.fingerprint)
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            encoder: self.counters.encoder.load(Ordering::Relaxed),
            normalize: self.counters.normalize.load(Ordering::Relaxed),
            stylize: self.counters.stylize.load(Ordering::Relaxed),
        }
    }

    pub fn thumbnail(&self, image: &Image) -> Result<Thumbnail, PipelineError> {
        Ok(downsample(image, self.model()?.encoder.config.thumbnail_size)?)
    }

    /// `(d, r)` for an encoder-sized thumbnail.
    pub fn encode_thumbnail(&self, thumb: &Thumbnail) -> Result<(ColorMapMatrix, ColorMapMatrix), PipelineError> {
        let model = self.model()?;
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        Ok(encode(thumb, &model.encoder)?)
    }

    pub fn encode_image(&self, image: &Image) -> Result<(ColorMapMatrix, ColorMapMatrix), PipelineError> {
        self.encode_thumbnail(&self.thumbnail(image)?)
    }

    fn apply(&self, image: &Image, t: &ColorMapMatrix, proj: &ProjectionPair, clamp: bool) -> Result<Image, PipelineError> {
        let opts = TiledOptions { clamp, ..self.tiling };
        Ok(dncm_apply_tiled_with(image, t, proj, &opts)?.0)
    }

    /// Map `image` into the normalized space with a given `d`.
    pub fn normalize_with(&self, image: &Image, d: &ColorMapMatrix) -> Result<NormalizedImage, PipelineError> {
        let model = self.model()?;
        self.counters.normalize.fetch_add(1, Ordering::Relaxed);
        Ok(NormalizedImage {
            image: self.apply(image, d, &model.normalizing, false)?,
            k: model.k(),
            fingerprint: self.fingerprint,
        })
    }

    /// Returns the normalized image together with the image's own `(d, r)`.
    pub fn normalize(&self, image: &Image) -> Result<(NormalizedImage, ColorMapMatrix, ColorMapMatrix), PipelineError> {
        let (d, r) = self.encode_image(image)?;
        Ok((self.normalize_with(image, &d)?, d, r))
    }

    /// Stylize without touching the encoder; output clamped to `[0, 1]`.
    pub fn stylize(&self, z: &NormalizedImage, style: Style<'_>) -> Result<Image, PipelineError> {
        let model = self.model()?;
        if z.fingerprint != self.fingerprint {
            return Err(self.mismatch(&z.fingerprint));
        }
        let r = match style {
            Style::Matrix(m) => m,
            Style::Preset(p) => {
                if p.role != Role::Stylizing {
                    return Err(PipelineError::WrongRole(p.role));
                }
                if p.fingerprint != self.fingerprint {
                    return Err(self.mismatch(&p.fingerprint));
                }
                &p.matrix
            }
        };
        self.counters.stylize.fetch_add(1, Ordering::Relaxed);
        self.apply(&z.image, r, &model.stylizing, true)
    }

    fn mismatch(&self, found: &[u8; 8]) -> PipelineError {
        PipelineError::FingerprintMismatch {
            expected: fingerprint_hex(&self.fingerprint),
            found: fingerprint_hex(found),
        }
    }

    /// Normalize `content`, then stylize with the `r` predicted from `style`.
    pub fn transfer(&self, content: &Image, style: &Image) -> Result<Image, PipelineError> {
        let (z, _, _) = self.normalize(content)?;
        let (_, r_style) = self.encode_image(style)?;
        self.stylize(&z, Style::Matrix(&r_style))
    }

    /// `d` from the first frame and `r` from `style`, fixed for every frame.
    pub fn stylize_sequence(&self, frames: &[Image], style: &Image) -> Result<Vec<Image>, PipelineError> {
        let first = frames.first().ok_or(PipelineError::EmptySequence)?;
        let (d, _) = self.encode_image(first)?;
        let (_, r) = self.encode_image(style)?;
        frames
            .iter()
            .map(|f| {
                let z = self.normalize_with(f, &d)?;
                self.stylize(&z, Style::Matrix(&r))
            })
            .collect()
    }

    pub fn extract_preset(&self, style: &Image, name: impl Into<String>) -> Result<Preset, PipelineError> {
        let model = self.model()?;
        self.counters.encoder.fetch_add(1, Ordering::Relaxed);
        Ok(crate::presets::extract_preset(style, model, name)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dncm::dncm_apply;
    use crate::encoder::EncoderConfig;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> EncoderConfig {
        EncoderConfig { k: 8, thumbnail_size: 16, widths: vec![4, 8], seed: 2 }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    /// Model with random heads so the maps are far from the identity.
    fn perturbed_model() -> Model {
        let mut m = Model::init(&config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in m.encoder.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        m
    }

    #[test]
    fn identity_init_transfer_returns_content() {
        let p = Pipeline::new(Model::init(&config()).unwrap()).with_patch_size(7);
        let content = random_image(1, 20, 13);
        let style = random_image(2, 9, 9);
        let (z, _, _) = p.normalize(&content).unwrap();
        assert_eq!(z.image(), &content);
        assert_eq!(p.transfer(&content, &style).unwrap(), content);
    }

    #[test]
    fn missing_checkpoint() {
        let p = Pipeline::empty();
        assert!(matches!(p.normalize(&random_image(1, 4, 4)), Err(PipelineError::NoCheckpoint)));
    }

    #[test]
    fn presets_switch_without_encoder() {
        let p = Pipeline::new(perturbed_model());
        let img = random_image(4, 12, 12);
        let (z, _, _) = p.normalize(&img).unwrap();
        let a = p.extract_preset(&random_image(5, 16, 16), "a").unwrap();
        let b = p.extract_preset(&random_image(6, 16, 16), "b").unwrap();
        let before = p.counts();
        let ya = p.stylize(&z, Style::Preset(&a)).unwrap();
        let yb = p.stylize(&z, Style::Preset(&b)).unwrap();
        let after = p.counts();
        assert_eq!(after.encoder, before.encoder);
        assert_eq!(after.stylize - before.stylize, 2);
        assert_eq!(after.normalize, 1);
        assert_ne!(ya, yb);
        assert!(ya.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn preset_fingerprint_checked() {
        let p = Pipeline::new(perturbed_model());
        let (z, _, _) = p.normalize(&random_image(7, 8, 8)).unwrap();
        let mut preset = p.extract_preset(&random_image(8, 8, 8), "x").unwrap();
        preset.fingerprint[0] ^= 1;
        assert!(matches!(p.stylize(&z, Style::Preset(&preset)), Err(PipelineError::FingerprintMismatch { .. })));
        preset.fingerprint[0] ^= 1;
        preset.role = Role::Normalizing;
        assert!(matches!(p.stylize(&z, Style::Preset(&preset)), Err(PipelineError::WrongRole(_))));

        let other = Pipeline::new(Model::init(&EncoderConfig { seed: 9, ..config() }).unwrap());
        let (z_other, _, _) = other.normalize(&random_image(7, 8, 8)).unwrap();
        let r = ColorMapMatrix::identity(8);
        assert!(matches!(p.stylize(&z_other, Style::Matrix(&r)), Err(PipelineError::FingerprintMismatch { .. })));
    }

    #[test]
    fn transfer_is_deterministic_and_asymmetric() {
        let p = Pipeline::new(perturbed_model()).with_patch_size(5);
        let (a, b) = (random_image(9, 16, 16), random_image(10, 16, 16).clamped());
        let b = Image::new(16, 16, b.data().iter().map(|v| v * 0.5).collect()).unwrap();
        let ab = p.transfer(&a, &b).unwrap();
        assert_eq!(ab, p.transfer(&a, &b).unwrap());
        assert_ne!(ab, p.transfer(&b, &a).unwrap());
    }

    #[test]
    fn sequence_uses_frozen_matrices() {
        let model = perturbed_model();
        let p = Pipeline::new(model.clone());
        let frames: Vec<Image> = (0..5).map(|i| random_image(20 + i, 10, 10)).collect();
        let style = random_image(30, 16, 16);
        let out = p.stylize_sequence(&frames, &style).unwrap();
        assert_eq!(p.counts().encoder, 2);

        let (d, _) = p.encode_image(&frames[0]).unwrap();
        let (_, r) = p.encode_image(&style).unwrap();
        for (f, y) in frames.iter().zip(&out) {
            let z = dncm_apply(f, &d, &model.normalizing, false).unwrap();
            let expect = dncm_apply(&z, &r, &model.stylizing, true).unwrap();
            assert_eq!(&expect, y);
        }

        let same = vec![frames[0].clone(); 3];
        let outs = p.stylize_sequence(&same, &style).unwrap();
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
        assert!(matches!(p.stylize_sequence(&[], &style), Err(PipelineError::EmptySequence)));
    }

    #[test]
    fn normalize_matches_unclamped_training_forward() {
        let model = perturbed_model();
        let p = Pipeline::new(model.clone());
        let img = random_image(11, 16, 16);
        let (z, d, _) = p.normalize(&img).unwrap();
        let x = Tensor::<f32>::from_f32([256, 3], img.data()).unwrap();
        let zt = crate::dncm::dncm_forward(
            &x,
            &d.to_tensor(),
            &model.normalizing.p_tensor(),
            &model.normalizing.q_tensor(),
        )
        .unwrap();
        assert_eq!(z.image().data(), zt.data());
    }
}
