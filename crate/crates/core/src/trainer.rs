//! Self-supervised training: two color perturbations of one image are
//! normalized, then each is re-stylized with the other's style parameters.
//! A consistency loss pulls the normalized images together and an L1
//! reconstruction loss asks each swapped stylization to reproduce its own
//! perturbed input.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::Augmenter;
use crate::dncm::{dncm_forward, dncm_on_tape, DncmError, ProjectionPair, Role};
use crate::encoder::{
    encode_on_tape, encode_tensor, init_weights, thumbnail_tensor, EncoderConfig, EncoderError,
    EncoderWeights, WeightVars,
};
use crate::imaging::{downsample, load_raster, Image, ImageError};
use crate::tensor::{
    adam_step, mean_abs_diff, mean_squared_diff, AdamConfig, AdamState, Scalar, Tape, Tensor,
    TensorError,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step}: non-finite {what}")]
    NonFinite { step: u64, what: String },
    #[error("need at least {needed} readable images, found {found}")]
    TooFewImages { needed: usize, found: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dncm(#[from] DncmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint not found: {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_fraction: f64,
    pub decay_factor: f64,
    pub encoder: EncoderConfig,
    /// Side of the square training images.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            lr: 3e-4,
            batch_size: 8,
            steps: 2000,
            decay_fraction: 0.75,
            decay_factor: 0.1,
            encoder: EncoderConfig::default(),
            image_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.decay_fraction) {
            return bad("decay fraction must be in [0, 1]");
        }
        if self.image_size == 0 {
            return bad("image size must be >= 1");
        }
        self.encoder.validate()?;
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let decay_at = (self.decay_fraction * self.steps as f64).floor() as u64;
        if step >= decay_at && self.steps > 0 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_rec: f64,
    pub l_con: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,l_rec,l_con,total,lr";

pub fn loss_log_csv(reports: &[LossReport]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.l_rec, r.l_con, r.total, r.lr));
    }
    s
}

/// Encoder plus both projection pairs: everything that is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub encoder: EncoderWeights<T>,
    pub normalizing: ProjectionPair<T>,
    pub stylizing: ProjectionPair<T>,
}

impl Model<f32> {
    /// Identity heads and seeded, identity-preserving projections.
    pub fn init(config: &EncoderConfig) -> Result<Self, EncoderError> {
        let encoder = init_weights(config)?;
        let k = config.k;
        Ok(Self {
            encoder,
            normalizing: ProjectionPair::seeded(Role::Normalizing, k, config.seed ^ 0x6e),
            stylizing: ProjectionPair::seeded(Role::Stylizing, k, config.seed ^ 0x73),
        })
    }

    /// Identity heads with `P = [I|0]`, `Q = [I;0]`.
    pub fn identity(config: &EncoderConfig) -> Result<Self, EncoderError> {
        let encoder = init_weights(config)?;
        Ok(Self {
            encoder,
            normalizing: ProjectionPair::identity(Role::Normalizing, config.k),
            stylizing: ProjectionPair::identity(Role::Stylizing, config.k),
        })
    }

    /// First 8 bytes of SHA-256 over the little-endian projection matrices
    /// in the order `P_n, Q_n, P_s, Q_s`.
    pub fn fingerprint(&self) -> [u8; 8] {
        fingerprint(&self.normalizing, &self.stylizing)
    }
}

pub fn fingerprint(normalizing: &ProjectionPair, stylizing: &ProjectionPair) -> [u8; 8] {
    let mut h = Sha256::new();
    for m in [normalizing.p(), normalizing.q(), stylizing.p(), stylizing.q()] {
        for v in m {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    out
}

impl<T: Scalar> Model<T> {
    pub fn k(&self) -> usize {
        self.encoder.config.k
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            encoder: self.encoder.cast(),
            normalizing: self.normalizing.cast(),
            stylizing: self.stylizing.cast(),
        }
    }

    /// Trainable tensors: encoder tensors, then `P_n, Q_n, P_s, Q_s`.
    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        let mut v: Vec<Tensor<T>> = self.encoder.tensors().into_iter().cloned().collect();
        v.extend([
            self.normalizing.p_tensor(),
            self.normalizing.q_tensor(),
            self.stylizing.p_tensor(),
            self.stylizing.q_tensor(),
        ]);
        v
    }

    fn set_param_tensors(&mut self, tensors: Vec<Tensor<T>>) {
        let n_enc = self.encoder.tensors().len();
        let mut it = tensors.into_iter();
        for (dst, src) in self.encoder.tensors_mut().into_iter().zip(it.by_ref().take(n_enc)) {
            *dst = src;
        }
        let (pn, qn) = self.normalizing.pq_mut();
        let (ps, qs) = self.stylizing.pq_mut();
        for slot in [pn, qn, ps, qs] {
            slot.copy_from_slice(it.next().expect("four projection tensors").data());
        }
    }
}

/// Mean squared difference over all elements.
pub fn consistency_loss(z_i: &Image, z_j: &Image) -> Result<f64, TensorError> {
    let (a, b) = (image_matrix::<f32>(z_i), image_matrix::<f32>(z_j));
    Ok(mean_squared_diff(&a, &b)? as f64)
}

/// `mean|Y_i - I_i| + mean|Y_j - I_j|`.
pub fn reconstruction_loss(y_i: &Image, i_i: &Image, y_j: &Image, i_j: &Image) -> Result<f64, TensorError> {
    let m = image_matrix::<f32>;
    Ok(mean_abs_diff(&m(y_i), &m(i_i))? as f64 + mean_abs_diff(&m(y_j), &m(i_j))? as f64)
}

/// `n x 3` pixel matrix.
pub fn image_matrix<T: Scalar>(image: &Image) -> Tensor<T> {
    Tensor::from_f32([image.pixel_count(), 3], image.data()).expect("3 values per pixel")
}

fn thumb_input<T: Scalar>(image: &Image, side: usize) -> Result<Tensor<T>, ImageError> {
    Ok(thumbnail_tensor(&downsample(image, side)?))
}

struct ItemResult<T> {
    l_rec: T,
    l_con: T,
    grads: Vec<Tensor<T>>,
}

/// Loss and parameter gradients for one pair, scaled by `weight`.
fn pair_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    pair: &(Image, Image),
    lambda: f64,
    weight: T,
) -> Result<ItemResult<T>, TrainError> {
    let cfg = &model.encoder.config;
    let k = cfg.k;
    let mut tape = Tape::new();
    let enc = WeightVars::record(&mut tape, &model.encoder);
    let pn = tape.leaf(model.normalizing.p_tensor());
    let qn = tape.leaf(model.normalizing.q_tensor());
    let ps = tape.leaf(model.stylizing.p_tensor());
    let qs = tape.leaf(model.stylizing.q_tensor());

    let xi = tape.leaf(thumb_input(&pair.0, cfg.thumbnail_size)?);
    let xj = tape.leaf(thumb_input(&pair.1, cfg.thumbnail_size)?);
    let (d_i, r_i) = encode_on_tape(&mut tape, xi, &enc, k)?;
    let (d_j, r_j) = encode_on_tape(&mut tape, xj, &enc, k)?;

    let ii = tape.leaf(image_matrix(&pair.0));
    let ij = tape.leaf(image_matrix(&pair.1));
    let z_i = dncm_on_tape(&mut tape, ii, pn, d_i, qn)?;
    let z_j = dncm_on_tape(&mut tape, ij, pn, d_j, qn)?;
    let y_i = dncm_on_tape(&mut tape, z_j, ps, r_i, qs)?;
    let y_j = dncm_on_tape(&mut tape, z_i, ps, r_j, qs)?;

    let rec_i = tape.mean_abs_diff(y_i, ii)?;
    let rec_j = tape.mean_abs_diff(y_j, ij)?;
    let l_rec = tape.add(rec_i, rec_j)?;
    let l_con = tape.mean_squared_diff(z_i, z_j)?;
    let weighted_con = tape.scale(l_con, T::from_f64(lambda));
    let total = tape.add(l_rec, weighted_con)?;

    let mut grads = tape.backward_from(vec![(total, Tensor::scalar(weight))])?;
    let mut out = enc.gradients(&mut grads, &model.encoder).tensors().into_iter().cloned().collect::<Vec<_>>();
    for (v, like) in [
        (pn, model.normalizing.p_tensor()),
        (qn, model.normalizing.q_tensor()),
        (ps, model.stylizing.p_tensor()),
        (qs, model.stylizing.q_tensor()),
    ] {
        out.push(grads.take_or_zeros(v, &like));
    }
    Ok(ItemResult {
        l_rec: tape.value(l_rec).data()[0],
        l_con: tape.value(l_con).data()[0],
        grads: out,
    })
}

/// Batch-mean losses and summed gradients of the batch-mean total. Items are
/// evaluated in parallel and reduced in item order, so the result does not
/// depend on the number of worker threads.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    pairs: &[(Image, Image)],
    lambda: f64,
) -> Result<(f64, f64, Vec<Tensor<T>>), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let weight = T::from_f64(1.0 / pairs.len() as f64);
    let items: Vec<ItemResult<T>> = pairs
        .par_iter()
        .map(|p| pair_loss_and_grads(model, p, lambda, weight))
        .collect::<Result<_, _>>()?;
    let mut grads: Option<Vec<Tensor<T>>> = None;
    let (mut l_rec, mut l_con) = (0.0, 0.0);
    for item in items {
        l_rec += item.l_rec.as_f64();
        l_con += item.l_con.as_f64();
        match &mut grads {
            None => grads = Some(item.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&item.grads) {
                    a.add_assign(g);
                }
            }
        }
    }
    let n = pairs.len() as f64;
    Ok((l_rec / n, l_con / n, grads.expect("nonempty batch")))
}

/// Forward-only batch-mean `(L_rec, L_con)`.
pub fn evaluate_pairs(model: &Model, pairs: &[(Image, Image)]) -> Result<(f64, f64), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let per: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(a, b)| -> Result<(f64, f64), TrainError> {
            let cfg = &model.encoder.config;
            let (d_i, r_i) = encode_tensor(&thumb_input(a, cfg.thumbnail_size)?, &model.encoder)?;
            let (d_j, r_j) = encode_tensor(&thumb_input(b, cfg.thumbnail_size)?, &model.encoder)?;
            let k = cfg.k;
            let sq = |t: Tensor<f32>| t.reshape([k, k]);
            let (d_i, r_i, d_j, r_j) = (sq(d_i)?, sq(r_i)?, sq(d_j)?, sq(r_j)?);
            let (pn, qn) = (model.normalizing.p_tensor(), model.normalizing.q_tensor());
            let (ps, qs) = (model.stylizing.p_tensor(), model.stylizing.q_tensor());
            let (ia, ib) = (image_matrix::<f32>(a), image_matrix::<f32>(b));
            let z_i = dncm_forward(&ia, &d_i, &pn, &qn)?;
            let z_j = dncm_forward(&ib, &d_j, &pn, &qn)?;
            let y_i = dncm_forward(&z_j, &r_i, &ps, &qs)?;
            let y_j = dncm_forward(&z_i, &r_j, &ps, &qs)?;
            let l_rec = mean_abs_diff(&y_i, &ia)? as f64 + mean_abs_diff(&y_j, &ib)? as f64;
            Ok((l_rec, mean_squared_diff(&z_i, &z_j)? as f64))
        })
        .collect::<Result<_, _>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n))
}

/// One optimizer step on prepared pairs.
pub fn train_step_on_pairs(
    model: &mut Model,
    opt: &mut AdamState<f32>,
    pairs: &[(Image, Image)],
    config: &TrainConfig,
    step: u64,
) -> Result<LossReport, TrainError> {
    let lr = config.lr_at(step);
    let (l_rec, l_con, grads) = loss_and_grads(model, pairs, config.lambda)?;
    let total = l_rec + config.lambda * l_con;
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            what: format!("loss (l_rec={l_rec}, l_con={l_con})"),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFinite { step, what: format!("gradient in parameter tensor {i}") });
    }
    let mut params = model.param_tensors();
    let adam = AdamConfig { lr, ..AdamConfig::default() };
    {
        let mut refs: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
        adam_step(&mut refs, &grads, opt, &adam)?;
    }
    if let Some(i) = params.iter().position(|p| !p.all_finite()) {
        return Err(TrainError::NonFinite { step, what: format!("parameter tensor {i} after update") });
    }
    model.set_param_tensors(params);
    Ok(LossReport { step, l_rec, l_con, total, lr })
}

/// Seed for the perturbation pair of `item` at `step`.
pub fn pair_seed(run_seed: u64, step: u64, item: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(step);
    rng.set_word_pos(item as u128 * 2);
    rng.gen()
}

/// Perturb every image of `batch` into a pair and take one optimizer step.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamState<f32>,
    batch: &[Image],
    augmenter: &Augmenter,
    config: &TrainConfig,
    step: u64,
) -> Result<LossReport, TrainError> {
    let pairs: Vec<(Image, Image)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, img)| augmenter.make_pair(img, pair_seed(config.seed, step, i)))
        .collect();
    train_step_on_pairs(model, opt, &pairs, config, step)
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState<f32>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        let optimizer = AdamState::new(model.param_tensors().iter());
        Self { model, optimizer, step: 0 }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.model.encoder.config
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        self.model.fingerprint()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let cfg = self.config();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u8(CHECKPOINT_VERSION)?;
        w.write_u16::<LittleEndian>(cfg.k as u16)?;
        w.write_u32::<LittleEndian>(cfg.thumbnail_size as u32)?;
        w.write_u8(cfg.widths.len() as u8)?;
        for &wd in &cfg.widths {
            w.write_u32::<LittleEndian>(wd as u32)?;
        }
        w.write_u64::<LittleEndian>(cfg.seed)?;
        w.write_u64::<LittleEndian>(self.step)?;
        let params = self.model.param_tensors();
        for t in &params {
            write_array(w, t.data())?;
        }
        w.write_u64::<LittleEndian>(self.optimizer.step)?;
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            write_array(w, t.data())?;
        }
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let k = r.read_u16::<LittleEndian>()? as usize;
        let thumbnail_size = r.read_u32::<LittleEndian>()? as usize;
        let n_stages = r.read_u8()? as usize;
        let widths = (0..n_stages)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let step = r.read_u64::<LittleEndian>()?;
        let config = EncoderConfig { k, thumbnail_size, widths, seed };
        config.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

        let template = Model::identity(&config).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let shapes: Vec<Vec<usize>> = template.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
        let read_all = |r: &mut &[u8]| -> Result<Vec<Tensor<f32>>, CheckpointError> {
            shapes
                .iter()
                .map(|s| {
                    let data = read_array(r)?;
                    Tensor::new(s.clone(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
                })
                .collect()
        };
        let params = read_all(&mut r)?;
        let opt_step = r.read_u64::<LittleEndian>()?;
        let m = read_all(&mut r)?;
        let v = read_all(&mut r)?;
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        let mut model = template;
        model.set_param_tensors(params);
        Ok(Self {
            model,
            optimizer: AdamState { step: opt_step, m, v },
            step,
        })
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("npck")
        ));
        fs::write(&tmp, self.encode()).map_err(CheckpointError::Io)?;
        fs::rename(&tmp, path).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            CheckpointError::Io(e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                CheckpointError::Missing(path.to_path_buf())
            } else {
                CheckpointError::Io(e)
            }
        })?;
        Self::decode(&bytes)
    }
}

fn write_array(w: &mut impl Write, data: &[f32]) -> io::Result<()> {
    w.write_u32::<LittleEndian>(data.len() as u32)?;
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array(r: &mut &[u8]) -> Result<Vec<f32>, CheckpointError> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if r.len() < n * 4 {
        return Err(CheckpointError::Truncated);
    }
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossReport>,
}

/// Resample every image to the training size.
pub fn prepare_images(images: &[Image], side: usize) -> Result<Vec<Image>, ImageError> {
    images.iter().map(|img| downsample(img, side).map(|t| t.into_image())).collect()
}

/// Train from in-memory images, starting at [`Model::init`].
pub fn train_on_images(config: &TrainConfig, images: &[Image]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let model = Model::init(&config.encoder)?;
    train_from(config, images, Checkpoint::new(model))
}

/// Continue training `start` on `images` until `config.steps` is reached.
pub fn train_from(config: &TrainConfig, images: &[Image], start: Checkpoint) -> Result<TrainOutcome, TrainError> {
    train_until(config, images, start, config.steps)
}

/// Like [`train_from`] but stops once the checkpoint reaches step `until`;
/// the learning-rate schedule still follows `config.steps`.
pub fn train_until(
    config: &TrainConfig,
    images: &[Image],
    start: Checkpoint,
    until: u64,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if images.len() < config.batch_size {
        return Err(TrainError::TooFewImages { needed: config.batch_size, found: images.len() });
    }
    let images = prepare_images(images, config.image_size)?;
    let augmenter = Augmenter::default();
    let mut ckpt = start;
    let mut order = BatchOrder::new(images.len(), config.seed);
    order.skip(ckpt.step as usize * config.batch_size);
    let until = until.min(config.steps);
    let mut log = Vec::with_capacity(until.saturating_sub(ckpt.step) as usize);
    while ckpt.step < until {
        let batch: Vec<Image> = (0..config.batch_size).map(|_| images[order.next()].clone()).collect();
        let report = train_step(&mut ckpt.model, &mut ckpt.optimizer, &batch, &augmenter, config, ckpt.step)?;
        if ckpt.step % 100 == 0 || ckpt.step + 1 == config.steps {
            info!(
                "step {} l_rec {:.5} l_con {:.6} total {:.5} lr {:e}",
                report.step, report.l_rec, report.l_con, report.total, report.lr
            );
        }
        log.push(report);
        ckpt.step += 1;
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// Load every decodable raster in `dir` (sorted by file name) and train.
pub fn train(config: &TrainConfig, dir: impl AsRef<Path>) -> Result<TrainOutcome, TrainError> {
    let images = load_image_dir(dir.as_ref())?;
    if images.len() < config.batch_size {
        return Err(TrainError::TooFewImages { needed: config.batch_size, found: images.len() });
    }
    train_on_images(config, &images)
}

/// Decodable rasters in `dir`, sorted by file name; failures are logged and
/// skipped.
pub fn load_image_dir(dir: &Path) -> Result<Vec<Image>, TrainError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        match load_raster(&p) {
            Ok(img) => images.push(img),
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(images)
}

/// Epoch-wise shuffled image indices.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), perm: (0..n).collect(), pos: n }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.perm[self.pos - 1]
    }

    fn skip(&mut self, n: usize) {
        for _ in 0..n {
            self.next();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::desk_dataset;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 6,
            encoder: EncoderConfig { k: 4, thumbnail_size: 16, widths: vec![4, 8], seed: 3 },
            image_size: 16,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn consistency_examples() {
        let a = Image::filled(3, 2, [0.0; 3]).unwrap();
        let b = Image::filled(3, 2, [1.0; 3]).unwrap();
        assert_eq!(consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consistency_loss(&a, &b).unwrap(), 1.0);
        assert!(consistency_loss(&a, &Image::filled(2, 2, [0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let i = Image::filled(2, 2, [0.5; 3]).unwrap();
        let y = Image::filled(2, 2, [0.6; 3]).unwrap();
        assert_eq!(reconstruction_loss(&i, &i, &i, &i).unwrap(), 0.0);
        assert!((reconstruction_loss(&y, &i, &i, &i).unwrap() - 0.1).abs() < 1e-6);
    }

    fn random_image(seed: u64, side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(side, side, (0..side * side * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn losses_match_scalar_oracles() {
        let (a, b, c, d) = (random_image(1, 5), random_image(2, 5), random_image(3, 5), random_image(4, 5));
        let mut con = 0.0f64;
        let mut rec_i = 0.0f64;
        let mut rec_j = 0.0f64;
        for idx in 0..a.data().len() {
            let (x, y) = (a.data()[idx] as f64, b.data()[idx] as f64);
            con += (x - y) * (x - y);
            rec_i += (x - y).abs();
            rec_j += (c.data()[idx] as f64 - d.data()[idx] as f64).abs();
        }
        let n = a.data().len() as f64;
        assert!((consistency_loss(&a, &b).unwrap() - con / n).abs() <= 1e-7);
        assert!((reconstruction_loss(&a, &b, &c, &d).unwrap() - (rec_i + rec_j) / n).abs() <= 1e-7);
    }

    #[test]
    fn identity_pairs_give_zero_loss_and_no_update() {
        let cfg = TrainConfig { lambda: 0.0, ..tiny_config() };
        let mut model = Model::init(&cfg.encoder).unwrap();
        let before = model.clone();
        let mut opt = AdamState::new(model.param_tensors().iter());
        let img = random_image(5, 16);
        let pairs = vec![(img.clone(), img.clone()), (img.clone(), img)];
        let r = train_step_on_pairs(&mut model, &mut opt, &pairs, &cfg, 0).unwrap();
        assert_eq!((r.l_rec, r.l_con, r.total), (0.0, 0.0, 0.0));
        let (_, _, grads) = loss_and_grads(&before, &pairs, 0.0).unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert_eq!(model, before);
    }

    #[test]
    fn swap_symmetry() {
        let cfg = tiny_config();
        let model = Model::init(&cfg.encoder).unwrap();
        let (a, b) = sample_pair();
        let fwd = evaluate_pairs(&model, &[(a.clone(), b.clone())]).unwrap();
        let rev = evaluate_pairs(&model, &[(b, a)]).unwrap();
        assert_eq!(fwd, rev);
    }

    fn sample_pair() -> (Image, Image) {
        Augmenter::default().make_pair(&random_image(6, 16), 4)
    }

    #[test]
    fn tape_losses_match_forward_only() {
        let cfg = tiny_config();
        let model = Model::init(&cfg.encoder).unwrap();
        let pairs = vec![sample_pair()];
        let (lr, lc, _) = loss_and_grads(&model, &pairs, cfg.lambda).unwrap();
        assert_eq!((lr, lc), evaluate_pairs(&model, &pairs).unwrap());
    }

    #[test]
    fn loss_composition_and_determinism() {
        let cfg = tiny_config();
        let images = desk_dataset(4, 16, 1);
        let a = train_on_images(&cfg, &images).unwrap();
        let b = train_on_images(&cfg, &images).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        for r in &a.log {
            assert!(r.l_rec >= 0.0 && r.l_con >= 0.0);
            assert!((r.total - (r.l_rec + cfg.lambda * r.l_con)).abs() <= 1e-6);
        }
        assert_eq!(a.log.len(), 6);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig { steps: 0, ..tiny_config() };
        let out = train_on_images(&cfg, &desk_dataset(2, 16, 1)).unwrap();
        assert_eq!(out.checkpoint, Checkpoint::new(Model::init(&cfg.encoder).unwrap()));
        assert!(out.log.is_empty());
    }

    #[test]
    fn too_few_images() {
        let cfg = tiny_config();
        let r = train_on_images(&cfg, &desk_dataset(1, 16, 1));
        assert!(matches!(r, Err(TrainError::TooFewImages { needed: 2, found: 1 })));
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let cfg = tiny_config();
        let images = desk_dataset(4, 16, 2);
        let full = train_on_images(&cfg, &images).unwrap();
        let start = Checkpoint::new(Model::init(&cfg.encoder).unwrap());
        let half = train_until(&cfg, &images, start, 3).unwrap();
        let restored = Checkpoint::decode(&half.checkpoint.encode()).unwrap();
        let resumed = train_from(&cfg, &images, restored).unwrap();
        assert_eq!(resumed.checkpoint.step, 6);
        assert_eq!(resumed.log, full.log[3..]);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig { steps: 2000, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 3e-4);
        assert_eq!(cfg.lr_at(1499), 3e-4);
        assert!((cfg.lr_at(1500) - 3e-5).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let cfg = tiny_config();
        let out = train_on_images(&cfg, &desk_dataset(4, 16, 3)).unwrap();
        let bytes = out.checkpoint.encode();
        assert_eq!(&bytes[..4], b"NPCK");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.encode(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
        let mut ver = bytes.clone();
        ver[4] = 99;
        assert!(matches!(Checkpoint::decode(&ver), Err(CheckpointError::Version(99))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npck");
        out.checkpoint.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), out.checkpoint);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(Checkpoint::load(dir.path().join("none.npck")), Err(CheckpointError::Missing(_))));
    }

    #[test]
    fn fingerprint_tracks_projections() {
        let cfg = tiny_config();
        let a = Model::init(&cfg.encoder).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.stylizing.q_mut()[0] += 1e-3;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    /// Gradient of the full objective against central differences, in f64,
    /// for every trainable parameter.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let enc = EncoderConfig { k: 2, thumbnail_size: 8, widths: vec![3, 4], seed: 1 };
        let mut model = Model::init(&enc).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = model.param_tensors();
        for t in &mut params {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        model.set_param_tensors(params.clone());
        let img = random_image(7, 8);
        let pair = Augmenter::default().make_pair(&img, 3);
        let pairs = vec![pair];
        let lambda = 10.0;
        let total = |m: &Model<f64>| {
            let (r, c, _) = loss_and_grads(m, &pairs, lambda).unwrap();
            r + lambda * c
        };
        let (_, _, grads) = loss_and_grads(&model, &pairs, lambda).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for (ti, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = params.clone();
                plus[ti].data_mut()[i] += h;
                let mut minus = params.clone();
                minus[ti].data_mut()[i] -= h;
                let (mut mp, mut mm) = (model.clone(), model.clone());
                mp.set_param_tensors(plus);
                mm.set_param_tensors(minus);
                let num = (total(&mp) - total(&mm)) / (2.0 * h);
                let a = g.data()[i];
                let denom = a.abs().max(num.abs());
                if denom > 1e-6 {
                    assert!((a - num).abs() / denom < 1e-3, "tensor {ti} index {i}: {a} vs {num}");
                } else {
                    assert!((a - num).abs() < 1e-8, "tensor {ti} index {i}: {a} vs {num}");
                }
                checked += 1;
            }
        }
        assert_eq!(checked, model.param_tensors().iter().map(|t| t.len()).sum::<usize>());
    }

    #[test]
    fn twenty_steps_reduce_loss_on_fixed_batch() {
        let cfg = TrainConfig { steps: 20, ..tiny_config() };
        let mut model = Model::init(&cfg.encoder).unwrap();
        let mut opt = AdamState::new(model.param_tensors().iter());
        let aug = Augmenter::default();
        let pairs: Vec<_> = desk_dataset(2, 16, 4).iter().enumerate().map(|(i, im)| aug.make_pair(im, i as u64)).collect();
        let first = evaluate_pairs(&model, &pairs).unwrap();
        for s in 0..20 {
            train_step_on_pairs(&mut model, &mut opt, &pairs, &cfg, s).unwrap();
        }
        let last = evaluate_pairs(&model, &pairs).unwrap();
        assert!(last.0 + cfg.lambda * last.1 < first.0 + cfg.lambda * first.1);
    }
}
