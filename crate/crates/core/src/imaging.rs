//! RGB rasters with unit-interval channels, PNG I/O, area-average
//! downsampling and patch tiling.
//!
//! Channel values are display-referred: an 8-bit code `c` becomes `c / 255`
//! with no transfer-function linearization.

use std::fs;
use std::io::Cursor;
use std::ops::Deref;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageFormat, ImageReader, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {height}x{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("expected {expected} channel values for the given dimensions, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("thumbnail side must be at least 1")]
    ZeroSide,
    #[error("patch size must be at least 1")]
    ZeroPatch,
    #[error("tile {tile:?} does not fit inside a {height}x{width} image")]
    TileOutOfBounds {
        tile: Tile,
        height: usize,
        width: usize,
    },
    #[error("image is {height}x{width}, expected a square thumbnail")]
    NotSquare { height: usize, width: usize },
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster file not found: {0}")]
    Missing(PathBuf),
    #[error("malformed PNG container: {0}")]
    Malformed(String),
    #[error("unsupported raster format {0:?}; only 8-bit RGB, RGBA and grayscale PNG are accepted")]
    UnsupportedBitDepth(ColorType),
    #[error("cannot write raster {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("PNG encoding failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An `height x width` RGB raster stored row-major, three `f32` channel values
/// per pixel.
///
/// Values are nominally in `[0, 1]`. Intermediate results (for example a
/// normalized image on the training path) may leave that range; [`Image::clamped`]
/// and [`save_raster`] bring them back.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let expected = height * width * 3;
        if data.len() != expected {
            return Err(ImageError::DataLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// A constant-color image.
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self, ImageError> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for row in 0..height {
            for col in 0..width {
                data.extend_from_slice(&f(row, col));
            }
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copy with every channel clamped to `[0, 1]`. NaN becomes 0.
    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.clamp_in_place();
        out
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = clamp_unit(*v);
        }
    }

    /// Copy out the pixels covered by `tile`.
    pub fn crop(&self, tile: &Tile) -> Result<Image, ImageError> {
        self.check_tile(tile)?;
        let mut data = Vec::with_capacity(tile.height * tile.width * 3);
        for row in tile.row..tile.row + tile.height {
            let start = (row * self.width + tile.col) * 3;
            data.extend_from_slice(&self.data[start..start + tile.width * 3]);
        }
        Image::new(tile.height, tile.width, data)
    }

    /// Write `patch` into the region covered by `tile`.
    pub fn paste(&mut self, tile: &Tile, patch: &Image) -> Result<(), ImageError> {
        self.check_tile(tile)?;
        if patch.height != tile.height || patch.width != tile.width {
            return Err(ImageError::DataLength {
                expected: tile.height * tile.width * 3,
                actual: patch.data.len(),
            });
        }
        for r in 0..tile.height {
            let dst = ((tile.row + r) * self.width + tile.col) * 3;
            let src = r * tile.width * 3;
            self.data[dst..dst + tile.width * 3]
                .copy_from_slice(&patch.data[src..src + tile.width * 3]);
        }
        Ok(())
    }

    fn check_tile(&self, tile: &Tile) -> Result<(), ImageError> {
        if tile.height == 0
            || tile.width == 0
            || tile.row + tile.height > self.height
            || tile.col + tile.width > self.width
        {
            return Err(ImageError::TileOutOfBounds {
                tile: *tile,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// A square image sized for the encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct Thumbnail(Image);

impl Thumbnail {
    /// Wrap an already-square image.
    pub fn from_image(image: Image) -> Result<Self, ImageError> {
        if image.height != image.width {
            return Err(ImageError::NotSquare {
                height: image.height,
                width: image.width,
            });
        }
        Ok(Self(image))
    }

    pub fn side(&self) -> usize {
        self.0.height
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

impl Deref for Thumbnail {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

// 8-bit raster I/O

fn decode_dynamic(img: DynamicImage) -> Result<Image, RasterError> {
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => return Err(RasterError::UnsupportedBitDepth(other.color())),
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&c| c as f32 / 255.0).collect();
    Image::new(h as usize, w as usize, data).map_err(|e| RasterError::Malformed(e.to_string()))
}

/// Decode an in-memory PNG.
pub fn decode_png(bytes: &[u8]) -> Result<Image, RasterError> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let img = reader
        .decode()
        .map_err(|e| RasterError::Malformed(e.to_string()))?;
    decode_dynamic(img)
}

/// Width and height from the PNG header without decoding pixel data.
pub fn png_dimensions(bytes: &[u8]) -> Result<(usize, usize), RasterError> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let (w, h) = reader
        .into_dimensions()
        .map_err(|e| RasterError::Malformed(e.to_string()))?;
    Ok((h as usize, w as usize))
}

/// Quantize to 8 bits: `round(v * 255)` with halves away from zero, clamped
/// to `[0, 255]`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (clamp_unit(v) * 255.0).round() as u8
}

pub fn to_rgb8(image: &Image) -> RgbImage {
    let raw = image.data.iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(image.width as u32, image.height as u32, raw)
        .expect("buffer length matches dimensions")
}

/// Encode as an 8-bit RGB PNG.
pub fn encode_png(image: &Image) -> Result<Vec<u8>, RasterError> {
    let mut out = Cursor::new(Vec::new());
    to_rgb8(image)
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| RasterError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Image, RasterError> {
    let path = path.as_ref();
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(RasterError::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    decode_png(&bytes)
}

pub fn save_raster(image: &Image, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let bytes = encode_png(image)?;
    fs::write(path, bytes).map_err(|source| RasterError::Write {
        path: path.to_path_buf(),
        source,
    })
}

// Downsampling

/// Source rows (or columns) overlapping each destination index, with integer
/// weights. Source index `i` covers `[i * dst, (i + 1) * dst)` and destination
/// index `o` covers `[o * src, (o + 1) * src)` on a common integer axis, so
/// every destination footprint has total weight exactly `src`.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, u64)>> {
    (0..dst)
        .map(|o| {
            let lo = o * src;
            let hi = (o + 1) * src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .map(|i| {
                    let a = (i * dst).max(lo);
                    let b = ((i + 1) * dst).min(hi);
                    (i, (b - a) as u64)
                })
                .collect()
        })
        .collect()
}

/// Area-average downsample (or upsample) to a `side x side` thumbnail.
///
/// Each destination pixel is the mean of the source over its exact fractional
/// footprint. Accumulation is in `f64` with integer weights, so a constant
/// image maps to exactly the same constant.
pub fn downsample(image: &Image, side: usize) -> Result<Thumbnail, ImageError> {
    if side == 0 {
        return Err(ImageError::ZeroSide);
    }
    let (h, w) = (image.height, image.width);
    let rows = box_weights(h, side);
    let cols = box_weights(w, side);

    // horizontal pass: h x side
    let mut horiz = vec![0f64; h * side * 3];
    for r in 0..h {
        let src = &image.data[r * w * 3..(r + 1) * w * 3];
        let dst = &mut horiz[r * side * 3..(r + 1) * side * 3];
        for (o, taps) in cols.iter().enumerate() {
            let mut acc = [0f64; 3];
            for &(c, wt) in taps {
                let wt = wt as f64;
                acc[0] += wt * src[c * 3] as f64;
                acc[1] += wt * src[c * 3 + 1] as f64;
                acc[2] += wt * src[c * 3 + 2] as f64;
            }
            dst[o * 3..o * 3 + 3].copy_from_slice(&acc);
        }
    }

    let norm = (h as f64) * (w as f64);
    let mut data = vec![0f32; side * side * 3];
    for (o, taps) in rows.iter().enumerate() {
        for c in 0..side {
            let mut acc = [0f64; 3];
            for &(r, wt) in taps {
                let wt = wt as f64;
                let i = (r * side + c) * 3;
                acc[0] += wt * horiz[i];
                acc[1] += wt * horiz[i + 1];
                acc[2] += wt * horiz[i + 2];
            }
            let i = (o * side + c) * 3;
            data[i] = (acc[0] / norm) as f32;
            data[i + 1] = (acc[1] / norm) as f32;
            data[i + 2] = (acc[2] / norm) as f32;
        }
    }
    Ok(Thumbnail(Image::new(side, side, data)?))
}

// Tiling

/// A rectangular region of an image: offsets and extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Tile {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Row-major partition of an image into tiles of at most `patch_size` on a
/// side. Right and bottom edge tiles carry the remainders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    patch_size: usize,
    height: usize,
    width: usize,
    tiles: Vec<Tile>,
}

impl TileGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self, ImageError> {
        if patch_size == 0 {
            return Err(ImageError::ZeroPatch);
        }
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        let mut tiles = Vec::with_capacity(height.div_ceil(patch_size) * width.div_ceil(patch_size));
        for row in (0..height).step_by(patch_size) {
            for col in (0..width).step_by(patch_size) {
                tiles.push(Tile {
                    row,
                    col,
                    height: patch_size.min(height - row),
                    width: patch_size.min(width - col),
                });
            }
        }
        Ok(Self {
            patch_size,
            height,
            width,
            tiles,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Number of tile rows and tile columns.
    pub fn grid_shape(&self) -> (usize, usize) {
        (
            self.height.div_ceil(self.patch_size),
            self.width.div_ceil(self.patch_size),
        )
    }

    /// Largest tile area in the grid.
    pub fn max_tile_area(&self) -> usize {
        self.patch_size.min(self.height) * self.patch_size.min(self.width)
    }
}

pub fn tile(image: &Image, patch_size: usize) -> Result<TileGrid, ImageError> {
    TileGrid::new(image.height, image.width, patch_size)
}
