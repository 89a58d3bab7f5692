//! `MFRP` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                                             |
//! |--------|------|---------------------------------------------------|
//! | 0      | 4    | magic `4D 46 52 50` ("MFRP")                      |
//! | 4      | 1    | version, `0x01`                                   |
//! | 5      | 1    | kind: 0 = DCT8, 1 = HAAR2, 2 = spatial image      |
//! | 6      | 1    | flags: bit 0 set = produced without perturbation  |
//! | 7      | 12   | C, H, W as `u32`                                  |
//! | 19     | 4·CHW| `f32` values, channel-major, row-major            |

use std::io::{Read, Write};
use std::path::Path;

use super::{HighDimRep, MappingKind, Planes, SpatialImage};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MFRP";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 19;

pub const FLAG_UNPERTURBED: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Mapping(MappingKind),
    Spatial,
}

impl TensorKind {
    fn tag(self) -> u8 {
        match self {
            TensorKind::Mapping(k) => k.tag(),
            TensorKind::Spatial => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            2 => Ok(TensorKind::Spatial),
            t => MappingKind::from_tag(t)
                .map(TensorKind::Mapping)
                .ok_or_else(|| Error::Format(format!("unknown tensor kind {t}"))),
        }
    }
}

/// A decoded `MFRP` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: TensorKind,
    pub flags: u8,
    pub planes: Planes,
}

impl TensorFile {
    pub fn spatial(image: &SpatialImage, flags: u8) -> Self {
        Self {
            kind: TensorKind::Spatial,
            flags,
            planes: (**image).clone(),
        }
    }

    pub fn rep(rep: &HighDimRep, kind: MappingKind) -> Self {
        Self {
            kind: TensorKind::Mapping(kind),
            flags: 0,
            planes: (**rep).clone(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.planes.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind.tag());
        out.push(self.flags);
        let (c, h, w) = self.planes.shape();
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.planes.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "file too short for MFRP header ({} bytes)",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad MFRP magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!(
                "unsupported MFRP version {}",
                bytes[4]
            )));
        }
        let kind = TensorKind::from_tag(bytes[5])?;
        let flags = bytes[6];
        let dim = |i: usize| {
            let o = 7 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        };
        let (c, h, w) = (dim(0), dim(1), dim(2));
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format("MFRP dimensions overflow".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * n {
            return Err(Error::Format(format!(
                "MFRP body holds {} bytes, expected {}",
                body.len(),
                4 * n
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let planes = Planes::new(c, h, w, data).map_err(|e| Error::Format(e.to_string()))?;
        if let TensorKind::Mapping(k) = kind {
            let n = super::MappingSpec { kind: k }.channels();
            if c != n {
                return Err(Error::Format(format!(
                    "{k} file declares {c} channels, expected {n}"
                )));
            }
        }
        if kind == TensorKind::Spatial && c != SpatialImage::CHANNELS {
            return Err(Error::Format(format!(
                "spatial file declares {c} channels"
            )));
        }
        Ok(Self {
            kind,
            flags,
            planes,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn into_spatial(self) -> Result<SpatialImage> {
        match self.kind {
            TensorKind::Spatial => SpatialImage::from_planes(self.planes),
            k => Err(Error::Format(format!("expected spatial tensor, found {k:?}"))),
        }
    }

    pub fn into_rep(self) -> Result<(HighDimRep, MappingKind)> {
        match self.kind {
            TensorKind::Mapping(k) => Ok((HighDimRep::from_planes(self.planes), k)),
            TensorKind::Spatial => Err(Error::Format(
                "expected high-dimensional tensor, found spatial".into(),
            )),
        }
    }
}
