//! Reusable color-style presets: a stored parameter matrix bound to the
//! projection fingerprint it was extracted under.
//!
//! File layout, little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `NPRE` |
//! | 1 | version |
//! | 1 | role, `n` or `s` |
//! | 2 | k |
//! | 8 | projection fingerprint |
//! | 4 k^2 | matrix, f32 row-major |
//! | 2 | name length |
//! | n | UTF-8 name |
//! | 8 | unix timestamp, seconds |

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::dncm::{ColorMapMatrix, Role};
use crate::encoder::{encode, EncoderError};
use crate::imaging::{downsample, Image, ImageError};
use crate::trainer::Model;

pub const PRESET_MAGIC: &[u8; 4] = b"NPRE";
pub const PRESET_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum PresetError {
    #[error("not a preset file (bad magic)")]
    BadMagic,
    #[error("unsupported preset version {0}")]
    Version(u8),
    #[error("truncated preset payload")]
    Truncated,
    #[error("unknown role byte {0:#04x}")]
    BadRole(u8),
    #[error("invalid preset matrix: {0}")]
    InvalidMatrix(String),
    #[error("preset name is not valid UTF-8")]
    NameEncoding,
    #[error("preset name longer than 65535 bytes")]
    NameTooLong,
    #[error("{0} trailing bytes after preset payload")]
    TrailingBytes(usize),
    #[error("preset file not found: {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for PresetError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PresetError::Truncated
        } else {
            PresetError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub role: Role,
    pub matrix: ColorMapMatrix,
    pub name: String,
    /// Unix seconds.
    pub created: u64,
    pub fingerprint: [u8; 8],
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Preset {
    pub fn k(&self) -> usize {
        self.matrix.k()
    }

    pub fn encoded_len(&self) -> usize {
        16 + 4 * self.k() * self.k() + 2 + self.name.len() + 8
    }

    pub fn encode(&self) -> Result<Vec<u8>, PresetError> {
        if self.name.len() > u16::MAX as usize {
            return Err(PresetError::NameTooLong);
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(PRESET_MAGIC);
        out.push(PRESET_VERSION);
        out.push(self.role.tag());
        out.write_u16::<LittleEndian>(self.k() as u16)?;
        out.extend_from_slice(&self.fingerprint);
        for &v in self.matrix.values() {
            out.write_f32::<LittleEndian>(v)?;
        }
        out.write_u16::<LittleEndian>(self.name.len() as u16)?;
        out.extend_from_slice(self.name.as_bytes());
        out.write_u64::<LittleEndian>(self.created)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PresetError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PRESET_MAGIC {
            return Err(PresetError::BadMagic);
        }
        let version = r.read_u8()?;
        if version != PRESET_VERSION {
            return Err(PresetError::Version(version));
        }
        let tag = r.read_u8()?;
        let role = Role::from_tag(tag).ok_or(PresetError::BadRole(tag))?;
        let k = r.read_u16::<LittleEndian>()? as usize;
        let mut fingerprint = [0u8; 8];
        r.read_exact(&mut fingerprint)?;
        if r.len() < 4 * k * k {
            return Err(PresetError::Truncated);
        }
        let mut values = vec![0f32; k * k];
        r.read_f32_into::<LittleEndian>(&mut values)?;
        let matrix = ColorMapMatrix::new(k, values).map_err(|e| PresetError::InvalidMatrix(e.to_string()))?;
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        if r.len() < name_len {
            return Err(PresetError::Truncated);
        }
        let (name_bytes, rest) = r.split_at(name_len);
        let name = std::str::from_utf8(name_bytes).map_err(|_| PresetError::NameEncoding)?.to_string();
        r = rest;
        let created = r.read_u64::<LittleEndian>()?;
        if !r.is_empty() {
            return Err(PresetError::TrailingBytes(r.len()));
        }
        Ok(Self { role, matrix, name, created, fingerprint })
    }
}

pub fn save_preset(preset: &Preset, path: impl AsRef<Path>) -> Result<(), PresetError> {
    fs::write(path, preset.encode()?).map_err(PresetError::Io)
}

pub fn load_preset(path: impl AsRef<Path>) -> Result<Preset, PresetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            PresetError::Missing(path.to_path_buf())
        } else {
            PresetError::Io(e)
        }
    })?;
    Preset::decode(&bytes)
}

/// Encode `style` and wrap its stylizing parameters as a preset.
pub fn extract_preset(style: &Image, model: &Model, name: impl Into<String>) -> Result<Preset, PresetError> {
    let thumb = downsample(style, model.encoder.config.thumbnail_size)?;
    let (_, r) = encode(&thumb, &model.encoder)?;
    Ok(Preset {
        role: Role::Stylizing,
        matrix: r,
        name: name.into(),
        created: unix_now(),
        fingerprint: model.fingerprint(),
    })
}

/// Named presets; concurrent readers, exclusive writers.
#[derive(Debug, Default)]
pub struct PresetStore {
    inner: RwLock<BTreeMap<String, Arc<Preset>>>,
}

impl PresetStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert under the preset's name, returning the replaced entry.
    pub fn insert(&self, preset: Preset) -> Option<Arc<Preset>> {
        let mut map = self.inner.write().unwrap_or_else(|e| e.into_inner());
        map.insert(preset.name.clone(), Arc::new(preset))
    }

    pub fn get(&self, name: &str) -> Option<Arc<Preset>> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).get(name).cloned()
    }

    pub fn remove(&self, name: &str) -> Option<Arc<Preset>> {
        self.inner.write().unwrap_or_else(|e| e.into_inner()).remove(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
