//! Binary bodies exchanged with the parameter server.
//!
//! Both start with a 4-byte magic, a version byte, `k` as `u16` LE and the
//! 8-byte checkpoint fingerprint, followed by LE `f32` matrices.

use chromaset_core::dncm::{ColorMapMatrix, ProjectionPair, Role};
use chromaset_core::trainer::Model;
use thiserror::Error;

pub const PARAMS_MAGIC: &[u8; 4] = b"NPPR";
pub const PROJECTIONS_MAGIC: &[u8; 4] = b"NPPJ";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("body is {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("non-finite value in body")]
    NonFinite,
}

pub fn params_len(k: usize) -> usize {
    HEADER_LEN + 8 * k * k
}

pub fn projections_len(k: usize) -> usize {
    HEADER_LEN + 4 * 3 * k * 4
}

fn header(magic: &[u8; 4], k: usize, fingerprint: &[u8; 8], cap: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(cap);
    out.extend_from_slice(magic);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&(k as u16).to_le_bytes());
    out.extend_from_slice(fingerprint);
    out
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Validates the header and returns `(k, fingerprint, payload)`.
fn split_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    len_for: fn(usize) -> usize,
) -> Result<(usize, [u8; 8], &'a [u8]), WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Length { expected: HEADER_LEN, actual: bytes.len() });
    }
    let got: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &got != magic {
        return Err(WireError::BadMagic(got));
    }
    if bytes[4] != WIRE_VERSION {
        return Err(WireError::Version(bytes[4]));
    }
    let k = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    if k == 0 {
        return Err(WireError::ZeroK);
    }
    if bytes.len() != len_for(k) {
        return Err(WireError::Length { expected: len_for(k), actual: bytes.len() });
    }
    let fingerprint = bytes[7..15].try_into().expect("8 bytes");
    Ok((k, fingerprint, &bytes[HEADER_LEN..]))
}

fn take_f32s(payload: &mut &[u8], n: usize) -> Result<Vec<f32>, WireError> {
    let (head, rest) = payload.split_at(n * 4);
    *payload = rest;
    let values: Vec<f32> = head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().all(|v| v.is_finite()) {
        Ok(values)
    } else {
        Err(WireError::NonFinite)
    }
}

/// `(d, r)` predicted for one thumbnail.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamResponse {
    pub fingerprint: [u8; 8],
    pub d: ColorMapMatrix,
    pub r: ColorMapMatrix,
}

impl ParamResponse {
    pub fn k(&self) -> usize {
        self.d.k()
    }

    pub fn encode(&self) -> Vec<u8> {
        let k = self.k();
        let mut out = header(PARAMS_MAGIC, k, &self.fingerprint, params_len(k));
        put_f32s(&mut out, self.d.values());
        put_f32s(&mut out, self.r.values());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (k, fingerprint, mut payload) = split_header(bytes, PARAMS_MAGIC, params_len)?;
        let d = take_f32s(&mut payload, k * k)?;
        let r = take_f32s(&mut payload, k * k)?;
        let matrix = |v| ColorMapMatrix::new(k, v).map_err(|_| WireError::NonFinite);
        Ok(Self { fingerprint, d: matrix(d)?, r: matrix(r)? })
    }
}

/// Both projection pairs of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionsResponse {
    pub fingerprint: [u8; 8],
    pub normalizing: ProjectionPair,
    pub stylizing: ProjectionPair,
}

impl ProjectionsResponse {
    pub fn from_model(model: &Model) -> Self {
        Self {
            fingerprint: model.fingerprint(),
            normalizing: model.normalizing.clone(),
            stylizing: model.stylizing.clone(),
        }
    }

    pub fn k(&self) -> usize {
        self.normalizing.k()
    }

    pub fn encode(&self) -> Vec<u8> {
        let k = self.k();
        let mut out = header(PROJECTIONS_MAGIC, k, &self.fingerprint, projections_len(k));
        for pair in [&self.normalizing, &self.stylizing] {
            put_f32s(&mut out, pair.p());
            put_f32s(&mut out, pair.q());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (k, fingerprint, mut payload) = split_header(bytes, PROJECTIONS_MAGIC, projections_len)?;
        let mut pair = |role| -> Result<ProjectionPair, WireError> {
            let p = take_f32s(&mut payload, 3 * k)?;
            let q = take_f32s(&mut payload, 3 * k)?;
            ProjectionPair::new(role, k, p, q).map_err(|_| WireError::NonFinite)
        };
        let normalizing = pair(Role::Normalizing)?;
        let stylizing = pair(Role::Stylizing)?;
        Ok(Self { fingerprint, normalizing, stylizing })
    }
}
