//! Thin client for the parameter server. Only thumbnails leave the machine;
//! the per-pixel mapping of the full-resolution image runs locally.

use std::time::Duration;

use chromaset_core::dncm::{dncm_apply_tiled_with, ColorMapMatrix, DncmError, TiledOptions};
use chromaset_core::imaging::{downsample, encode_png, Image, ImageError, RasterError, Thumbnail};
use chromaset_core::pipeline::{fingerprint_hex, DEFAULT_PATCH_SIZE};
use chromaset_core::presets::Preset;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use thiserror::Error;

use crate::server::Health;
use crate::wire::{ParamResponse, ProjectionsResponse, WireError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server returned {status}: {body}")]
    Status { status: StatusCode, body: String },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("fingerprint mismatch: projections {expected}, parameters {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Dncm(#[from] DncmError),
}

pub const DEFAULT_CLIENT_THUMBNAIL: usize = 64;

#[derive(Debug, Clone)]
pub struct RemoteClient {
    base: String,
    http: Client,
    thumbnail_size: usize,
}

impl RemoteClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, ClientError> {
        let http = Client::builder().no_proxy().timeout(Duration::from_secs(60)).build()?;
        Ok(Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http,
            thumbnail_size: DEFAULT_CLIENT_THUMBNAIL,
        })
    }

    /// Side of the thumbnails uploaded by [`RemoteClient::params`].
    pub fn with_thumbnail_size(mut self, side: usize) -> Self {
        self.thumbnail_size = side;
        self
    }

    fn check(resp: reqwest::blocking::Response) -> Result<reqwest::blocking::Response, ClientError> {
        let status = resp.status();
        if status.is_success() {
            Ok(resp)
        } else {
            Err(ClientError::Status { status, body: resp.text().unwrap_or_default() })
        }
    }

    pub fn health(&self) -> Result<Health, ClientError> {
        let resp = Self::check(self.http.get(format!("{}/v1/health", self.base)).send()?)?;
        Ok(resp.json()?)
    }

    pub fn projections(&self) -> Result<ProjectionsResponse, ClientError> {
        let resp = Self::check(self.http.get(format!("{}/v1/projections", self.base)).send()?)?;
        Ok(ProjectionsResponse::decode(&resp.bytes()?)?)
    }

    /// Upload raw PNG bytes.
    pub fn params_png(&self, png: Vec<u8>) -> Result<ParamResponse, ClientError> {
        let resp = self
            .http
            .post(format!("{}/v1/params", self.base))
            .header(reqwest::header::CONTENT_TYPE, "image/png")
            .body(png)
            .send()?;
        Ok(ParamResponse::decode(&Self::check(resp)?.bytes()?)?)
    }

    /// Upload an already-built thumbnail as an 8-bit PNG.
    pub fn params_for_thumbnail(&self, thumb: &Thumbnail) -> Result<ParamResponse, ClientError> {
        self.params_png(encode_png(thumb)?)
    }

    /// Downsample `image` locally and fetch its parameters.
    pub fn params(&self, image: &Image) -> Result<ParamResponse, ClientError> {
        self.params_for_thumbnail(&downsample(image, self.thumbnail_size)?)
    }
}

fn check_fingerprint(expected: &[u8; 8], found: &[u8; 8]) -> Result<(), ClientError> {
    if expected == found {
        Ok(())
    } else {
        Err(ClientError::FingerprintMismatch { expected: fingerprint_hex(expected), found: fingerprint_hex(found) })
    }
}

/// One loaded image on the client: its normalized form is computed once from
/// served parameters, then any number of styles apply without network use.
#[derive(Debug, Clone)]
pub struct ClientSession {
    projections: ProjectionsResponse,
    params: ParamResponse,
    normalized: Image,
    tiling: TiledOptions,
}

impl ClientSession {
    pub fn new(
        projections: ProjectionsResponse,
        params: ParamResponse,
        image: &Image,
        patch_size: usize,
    ) -> Result<Self, ClientError> {
        check_fingerprint(&projections.fingerprint, &params.fingerprint)?;
        let tiling = TiledOptions::new(patch_size);
        let (normalized, _) = dncm_apply_tiled_with(image, &params.d, &projections.normalizing, &tiling)?;
        Ok(Self { projections, params, normalized, tiling })
    }

    /// Fetch projections and parameters for `image` and normalize it.
    pub fn open(client: &RemoteClient, image: &Image, patch_size: usize) -> Result<Self, ClientError> {
        let projections = client.projections()?;
        let params = client.params(image)?;
        Self::new(projections, params, image, patch_size)
    }

    pub fn params(&self) -> &ParamResponse {
        &self.params
    }

    pub fn projections(&self) -> &ProjectionsResponse {
        &self.projections
    }

    pub fn normalized(&self) -> &Image {
        &self.normalized
    }

    /// Stylize the cached normalized image with `r`, clamped to `[0, 1]`.
    pub fn stylize(&self, r: &ColorMapMatrix) -> Result<Image, ClientError> {
        let opts = TiledOptions { clamp: true, ..self.tiling };
        Ok(dncm_apply_tiled_with(&self.normalized, r, &self.projections.stylizing, &opts)?.0)
    }

    pub fn apply_preset(&self, preset: &Preset) -> Result<Image, ClientError> {
        check_fingerprint(&self.projections.fingerprint, &preset.fingerprint)?;
        self.stylize(&preset.matrix)
    }
}

/// Style transfer through the server: two thumbnail uploads, one
/// projections fetch, and local mapping of `content` at full resolution.
pub fn remote_transfer(
    client: &RemoteClient,
    content: &Image,
    style: &Image,
    patch_size: Option<usize>,
) -> Result<Image, ClientError> {
    let session = ClientSession::open(client, content, patch_size.unwrap_or(DEFAULT_PATCH_SIZE))?;
    let style_params = client.params(style)?;
    check_fingerprint(&session.projections.fingerprint, &style_params.fingerprint)?;
    session.stylize(&style_params.r)
}
