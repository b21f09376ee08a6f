//! Deterministic per-pixel color mapping `y = x * P * T * Q`.
//!
//! `P` (3 x k) embeds an RGB row vector, `T` (k x k) is the image-adaptive
//! matrix predicted by the encoder, and `Q` (k x 3) projects back to RGB.
//! Every pixel is mapped independently with the same arithmetic, so equal
//! input colors always produce bitwise-equal output colors.
//!
//! The staged order is fixed: `x * P` first, then `* T`, then `* Q`, each dot
//! product summed in ascending index order. Whole-image, tiled and training
//! paths all go through [`map_pixels`] so they agree bit for bit.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{clamp_unit, Image, ImageError, TileGrid};
use crate::tensor::{gemm, gemm_nt, gemm_tn, CustomOp, Scalar, Tape, Tensor, TensorError, Var};

/// Standard deviation of the off-identity projection entries drawn by
/// [`ProjectionPair::seeded`].
pub const PROJECTION_INIT_SCALE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DncmError {
    #[error("color map matrix has k={matrix_k} but projection pair has k={projection_k}")]
    DimensionMismatch { matrix_k: usize, projection_k: usize },
    #[error("expected {expected} values, got {actual}")]
    ValueCount { expected: usize, actual: usize },
    #[error("matrix contains a non-finite value")]
    NonFinite,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("patch size must be at least 1")]
    ZeroPatch,
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which DNCM instance a projection pair or parameter matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    /// nDNCM, parameters `d`.
    Normalizing,
    /// sDNCM, parameters `r`.
    Stylizing,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Normalizing => b'n',
            Role::Stylizing => b's',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'n' => Some(Role::Normalizing),
            b's' => Some(Role::Stylizing),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Normalizing => "normalizing",
            Role::Stylizing => "stylizing",
        })
    }
}

/// The k x k image-adaptive matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorMapMatrix<T = f32> {
    k: usize,
    values: Vec<T>,
}

impl<T: Scalar> ColorMapMatrix<T> {
    pub fn new(k: usize, values: Vec<T>) -> Result<Self, DncmError> {
        if k == 0 {
            return Err(DncmError::ZeroK);
        }
        if values.len() != k * k {
            return Err(DncmError::ValueCount {
                expected: k * k,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DncmError::NonFinite);
        }
        Ok(Self { k, values })
    }

    pub fn identity(k: usize) -> Self {
        let mut values = vec![T::zero(); k * k];
        for i in 0..k {
            values[i * k + i] = T::one();
        }
        Self { k, values }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.k + col]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.k, self.k], self.values.clone()).expect("k*k values")
    }

    /// Reinterpret a length-k^2 (or k x k) tensor row-major.
    pub fn from_tensor(t: &Tensor<T>) -> Result<Self, DncmError> {
        let k = (t.len() as f64).sqrt().round() as usize;
        Self::new(k, t.data().to_vec())
    }

    pub fn cast<U: Scalar>(&self) -> ColorMapMatrix<U> {
        ColorMapMatrix {
            k: self.k,
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Learnable projections `P` (3 x k) and `Q` (k x 3), shared by all images.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair<T = f32> {
    role: Role,
    k: usize,
    p: Vec<T>,
    q: Vec<T>,
}

impl<T: Scalar> ProjectionPair<T> {
    pub fn new(role: Role, k: usize, p: Vec<T>, q: Vec<T>) -> Result<Self, DncmError> {
        if k == 0 {
            return Err(DncmError::ZeroK);
        }
        for m in [&p, &q] {
            if m.len() != 3 * k {
                return Err(DncmError::ValueCount {
                    expected: 3 * k,
                    actual: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(DncmError::NonFinite);
            }
        }
        Ok(Self { role, k, p, q })
    }

    /// `P = [I3 | 0]`, `Q = [I3 ; 0]`. For `k < 3` the identity is truncated,
    /// which drops the trailing color channels.
    pub fn identity(role: Role, k: usize) -> Self {
        let mut p = vec![T::zero(); 3 * k];
        let mut q = vec![T::zero(); k * 3];
        for i in 0..k.min(3) {
            p[i * k + i] = T::one();
            q[i * 3 + i] = T::one();
        }
        Self { role, k, p, q }
    }

    /// Identity-preserving random initialization.
    ///
    /// Starts from [`ProjectionPair::identity`] and fills the first half of
    /// the extra embedding columns of `P` and the remaining extra rows of `Q`
    /// with Gaussian entries. Their supports are disjoint, so with `T = I`
    /// every random term is multiplied by an exact zero and the map is still
    /// exactly the identity; the extra dimensions nevertheless receive
    /// gradient from the first step.
    pub fn seeded(role: Role, k: usize, seed: u64) -> Self {
        let mut pair = Self::identity(role, k);
        if k <= 3 {
            return pair;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, PROJECTION_INIT_SCALE).expect("valid sigma");
        let split = 3 + (k - 3) / 2;
        for c in 0..3 {
            for j in 3..split {
                pair.p[c * k + j] = T::from_f64(normal.sample(&mut rng));
            }
        }
        for j in split..k {
            for c in 0..3 {
                pair.q[j * 3 + c] = T::from_f64(normal.sample(&mut rng));
            }
        }
        pair
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> &[T] {
        &self.p
    }

    pub fn q(&self) -> &[T] {
        &self.q
    }

    pub fn p_tensor(&self) -> Tensor<T> {
        Tensor::new([3, self.k], self.p.clone()).expect("3*k values")
    }

    pub fn q_tensor(&self) -> Tensor<T> {
        Tensor::new([self.k, 3], self.q.clone()).expect("3*k values")
    }

    pub fn p_mut(&mut self) -> &mut [T] {
        &mut self.p
    }

    pub fn q_mut(&mut self) -> &mut [T] {
        &mut self.q
    }

    pub fn pq_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.p, &mut self.q)
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionPair<U> {
        ProjectionPair {
            role: self.role,
            k: self.k,
            p: self.p.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            q: self.q.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

fn check_k<T: Scalar>(t: &ColorMapMatrix<T>, proj: &ProjectionPair<T>) -> Result<(), DncmError> {
    if t.k != proj.k {
        return Err(DncmError::DimensionMismatch {
            matrix_k: t.k,
            projection_k: proj.k,
        });
    }
    Ok(())
}

/// Map a packed RGB buffer with the staged `((x * P) * T) * Q` order.
///
/// `src` and `dst` hold the same number of pixels. `p` is 3 x k, `t` k x k,
/// `q` k x 3, all row-major.
pub fn map_pixels<T: Scalar>(src: &[T], dst: &mut [T], p: &[T], t: &[T], q: &[T], k: usize) {
    debug_assert_eq!(src.len(), dst.len());
    let mut e = vec![T::zero(); k];
    let mut f = vec![T::zero(); k];
    for (x, y) in src.chunks_exact(3).zip(dst.chunks_exact_mut(3)) {
        for j in 0..k {
            e[j] = x[0] * p[j] + x[1] * p[k + j] + x[2] * p[2 * k + j];
        }
        for (j, fj) in f.iter_mut().enumerate() {
            let mut acc = T::zero();
            for i in 0..k {
                acc += e[i] * t[i * k + j];
            }
            *fj = acc;
        }
        for b in 0..3 {
            let mut acc = T::zero();
            for j in 0..k {
                acc += f[j] * q[j * 3 + b];
            }
            y[b] = acc;
        }
    }
}

/// Apply DNCM to every pixel of `image`. Output is clamped to `[0, 1]` only
/// when `clamp` is set.
pub fn dncm_apply(
    image: &Image,
    t: &ColorMapMatrix,
    proj: &ProjectionPair,
    clamp: bool,
) -> Result<Image, DncmError> {
    check_k(t, proj)?;
    let mut out = vec![0f32; image.data().len()];
    map_pixels(image.data(), &mut out, &proj.p, &t.values, &proj.q, t.k);
    if clamp {
        out.iter_mut().for_each(|v| *v = clamp_unit(*v));
    }
    Ok(Image::new(image.height(), image.width(), out)?)
}

/// `M = (P * T) * Q`, the 3 x 3 matrix the staged chain collapses to.
pub fn precompose<T: Scalar>(t: &ColorMapMatrix<T>, proj: &ProjectionPair<T>) -> Result<[[T; 3]; 3], DncmError> {
    check_k(t, proj)?;
    let pt = gemm(&proj.p, &t.values, 3, t.k, t.k);
    let m = gemm(&pt, &proj.q, 3, t.k, 3);
    Ok([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]])
}

/// Same mapping as [`dncm_apply`] through the precomposed 3 x 3 matrix. Not
/// bitwise equal to the staged order; agrees to float rounding.
pub fn dncm_apply_precomposed(
    image: &Image,
    t: &ColorMapMatrix,
    proj: &ProjectionPair,
    clamp: bool,
) -> Result<Image, DncmError> {
    let m = precompose(t, proj)?;
    let mut out = vec![0f32; image.data().len()];
    for (x, y) in image.data().chunks_exact(3).zip(out.chunks_exact_mut(3)) {
        for b in 0..3 {
            let v = x[0] * m[0][b] + x[1] * m[1][b] + x[2] * m[2][b];
            y[b] = if clamp { clamp_unit(v) } else { v };
        }
    }
    Ok(Image::new(image.height(), image.width(), out)?)
}

/// Options for [`dncm_apply_tiled_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TiledOptions {
    pub patch_size: usize,
    /// Tile rows processed concurrently. Each worker owns one tile buffer.
    pub workers: usize,
    pub clamp: bool,
}

impl TiledOptions {
    pub fn new(patch_size: usize) -> Self {
        Self {
            patch_size,
            workers: 1,
            clamp: false,
        }
    }
}

/// Working-memory accounting for one tiled apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelStats {
    pub tiles: usize,
    /// Peak bytes held by the kernel's own buffers (tile staging, scratch,
    /// parameter copies), excluding the source and destination images.
    pub peak_bytes: usize,
}

#[derive(Default)]
struct MemoryMeter {
    current: usize,
    peak: usize,
}

impl MemoryMeter {
    fn alloc<T>(&mut self, n: usize) -> Vec<T>
    where
        T: Default + Clone,
    {
        self.current += n * std::mem::size_of::<T>();
        self.peak = self.peak.max(self.current);
        vec![T::default(); n]
    }

    fn free<T>(&mut self, v: Vec<T>) {
        self.current -= v.len() * std::mem::size_of::<T>();
    }
}

/// Tile-by-tile [`dncm_apply`]: bitwise identical output, with kernel working
/// memory bounded by the patch size rather than the image size.
pub fn dncm_apply_tiled(
    image: &Image,
    t: &ColorMapMatrix,
    proj: &ProjectionPair,
    patch_size: usize,
    clamp: bool,
) -> Result<Image, DncmError> {
    let opts = TiledOptions {
        clamp,
        ..TiledOptions::new(patch_size)
    };
    dncm_apply_tiled_with(image, t, proj, &opts).map(|(img, _)| img)
}

pub fn dncm_apply_tiled_with(
    image: &Image,
    t: &ColorMapMatrix,
    proj: &ProjectionPair,
    opts: &TiledOptions,
) -> Result<(Image, KernelStats), DncmError> {
    check_k(t, proj)?;
    if opts.patch_size == 0 {
        return Err(DncmError::ZeroPatch);
    }
    let grid = TileGrid::new(image.height(), image.width(), opts.patch_size)?;
    let (h, w) = (image.height(), image.width());
    let k = t.k;
    let workers = opts.workers.max(1);

    let mut shared = MemoryMeter::default();
    let p = copy_counted(&mut shared, &proj.p);
    let tm = copy_counted(&mut shared, &t.values);
    let q = copy_counted(&mut shared, &proj.q);

    let band_rows = opts.patch_size.min(h);
    let max_area = grid.max_tile_area();
    let mut out = vec![0f32; h * w * 3];
    let src = image.data();

    let process_band = |band_idx: usize, band: &mut [f32]| -> usize {
        let mut meter = MemoryMeter::default();
        let mut inbuf: Vec<f32> = meter.alloc(max_area * 3);
        let mut outbuf: Vec<f32> = meter.alloc(max_area * 3);
        // e and f scratch inside map_pixels
        let scratch: Vec<f32> = meter.alloc(2 * k);
        let row0 = band_idx * band_rows;
        let rows = band.len() / (w * 3);
        for col0 in (0..w).step_by(opts.patch_size) {
            let tw = opts.patch_size.min(w - col0);
            let n = rows * tw * 3;
            for r in 0..rows {
                let s = ((row0 + r) * w + col0) * 3;
                inbuf[r * tw * 3..(r + 1) * tw * 3].copy_from_slice(&src[s..s + tw * 3]);
            }
            map_pixels(&inbuf[..n], &mut outbuf[..n], &p, &tm, &q, k);
            if opts.clamp {
                outbuf[..n].iter_mut().for_each(|v| *v = clamp_unit(*v));
            }
            for r in 0..rows {
                let d = (r * w + col0) * 3;
                band[d..d + tw * 3].copy_from_slice(&outbuf[r * tw * 3..(r + 1) * tw * 3]);
            }
        }
        meter.free(scratch);
        meter.free(outbuf);
        meter.free(inbuf);
        meter.peak
    };

    let band_len = band_rows * w * 3;
    let worker_peaks: Vec<usize> = if workers == 1 {
        out.chunks_mut(band_len)
            .enumerate()
            .map(|(i, band)| process_band(i, band))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| {
            out.par_chunks_mut(band_len)
                .enumerate()
                .map(|(i, band)| process_band(i, band))
                .collect()
        })
    };
    // one buffer set per concurrently running worker
    let per_worker = worker_peaks.iter().copied().max().unwrap_or(0);
    let concurrent = workers.min(worker_peaks.len());
    let stats = KernelStats {
        tiles: grid.tiles().len(),
        peak_bytes: shared.peak + per_worker * concurrent,
    };
    Ok((Image::new(h, w, out)?, stats))
}

fn copy_counted(meter: &mut MemoryMeter, src: &[f32]) -> Vec<f32> {
    let mut v: Vec<f32> = meter.alloc(src.len());
    v.copy_from_slice(src);
    v
}

/// Adjoints of the DNCM chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DncmGrads<T> {
    pub t: Tensor<T>,
    pub p: Tensor<T>,
    pub q: Tensor<T>,
    pub x: Tensor<T>,
}

/// Closed-form adjoints for `Y = X * P * T * Q`, where `X` and the upstream
/// gradient `G` are `n x 3` pixel matrices.
///
/// With `S = X^T * G` (3 x 3): `dT = P^T S Q^T`, `dP = S (T Q)^T`,
/// `dQ = (P T)^T S` and `dX = G (P T Q)^T`.
pub fn dncm_backward<T: Scalar>(
    x: &Tensor<T>,
    t: &Tensor<T>,
    p: &Tensor<T>,
    q: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<DncmGrads<T>, DncmError> {
    let n = check_pixels(x)?;
    if upstream.shape() != x.shape() {
        return Err(TensorError::Shape {
            op: "dncm_backward",
            detail: format!("upstream {:?} vs input {:?}", upstream.shape(), x.shape()),
        }
        .into());
    }
    let k = check_params(t, p, q)?;
    let (xd, gd) = (x.data(), upstream.data());

    let s = gemm_tn(xd, gd, n, 3, 3);
    let tq = gemm(t.data(), q.data(), k, k, 3);
    let pt = gemm(p.data(), t.data(), 3, k, k);
    let m = gemm(&pt, q.data(), 3, k, 3);

    // P^T S: k x 3, then * Q^T: k x k
    let pts = gemm_tn(p.data(), &s, 3, k, 3);
    let dt = gemm_nt(&pts, q.data(), k, 3, k);
    let dp = gemm_nt(&s, &tq, 3, 3, k);
    let dq = gemm_tn(&pt, &s, 3, k, 3);
    let dx = gemm_nt(gd, &m, n, 3, 3);

    Ok(DncmGrads {
        t: Tensor::new([k, k], dt)?,
        p: Tensor::new([3, k], dp)?,
        q: Tensor::new([k, 3], dq)?,
        x: Tensor::new([n, 3], dx)?,
    })
}

fn check_pixels<T: Scalar>(x: &Tensor<T>) -> Result<usize, DncmError> {
    match *x.shape() {
        [n, 3] => Ok(n),
        _ => Err(TensorError::Shape {
            op: "dncm",
            detail: format!("pixel matrix shape {:?}", x.shape()),
        }
        .into()),
    }
}

fn check_params<T: Scalar>(t: &Tensor<T>, p: &Tensor<T>, q: &Tensor<T>) -> Result<usize, DncmError> {
    let [k, k2] = *t.shape() else {
        return Err(DncmError::ValueCount { expected: 0, actual: t.len() });
    };
    if k != k2 {
        return Err(DncmError::ValueCount { expected: k * k, actual: t.len() });
    }
    if p.shape() != [3, k] {
        return Err(DncmError::DimensionMismatch { matrix_k: k, projection_k: p.len() / 3 });
    }
    if q.shape() != [k, 3] {
        return Err(DncmError::DimensionMismatch { matrix_k: k, projection_k: q.len() / 3 });
    }
    Ok(k)
}

/// Forward of DNCM on a pixel-matrix tensor with the staged order.
pub fn dncm_forward<T: Scalar>(
    x: &Tensor<T>,
    t: &Tensor<T>,
    p: &Tensor<T>,
    q: &Tensor<T>,
) -> Result<Tensor<T>, DncmError> {
    let n = check_pixels(x)?;
    let k = check_params(t, p, q)?;
    let mut out = vec![T::zero(); n * 3];
    map_pixels(x.data(), &mut out, p.data(), t.data(), q.data(), k);
    Ok(Tensor::new([n, 3], out)?)
}

struct DncmOp;

impl<T: Scalar> CustomOp<T> for DncmOp {
    fn name(&self) -> &'static str {
        "dncm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>, TensorError> {
        let [x, p, t, q] = inputs else {
            return Err(TensorError::Shape { op: "dncm", detail: "expected 4 inputs".into() });
        };
        let g = dncm_backward(x, t, p, q, grad).map_err(|e| match e {
            DncmError::Tensor(te) => te,
            other => TensorError::Shape { op: "dncm", detail: other.to_string() },
        })?;
        Ok(vec![g.x, g.p, g.t, g.q])
    }
}

/// Record `x * P * T * Q` on a tape; adjoints come from [`dncm_backward`].
pub fn dncm_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: Var,
    t: Var,
    q: Var,
) -> Result<Var, DncmError> {
    let out = dncm_forward(tape.value(x), tape.value(t), tape.value(p), tape.value(q))?;
    Ok(tape.custom(&[x, p, t, q], out, Box::new(DncmOp)))
}
