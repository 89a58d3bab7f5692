//! Spatial ↔ high-dimensional mappings.
//!
//! `encode` replicate-upsamples a `(3, H, W)` image by the block size `n`,
//! applies an orthonormal `n×n` block transform to every block and regroups
//! coefficients of equal frequency across blocks into `(H, W)` channels.
//! `decode` scatters channels back into blocks, inverts the transform and
//! average-pools each block. Replication paired with average pooling makes
//! `decode(encode(X)) == X` exact and keeps `decode` linear.
//!
//! Channel layout: `c = k·n² + u·n + v` for colour `k` and frequency `(u, v)`.
//! With `n = 8` this is the 192-channel DCT stack; with `n = 2` the 12-channel
//! Haar stack ordered `LL, LH, HL, HH` per colour.

mod block;
pub mod format;
mod planes;

pub use block::{dct8_forward, dct8_inverse, haar2_forward, haar2_inverse, BlockBasis};
pub use planes::{HighDimRep, Planes, SpatialImage};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingKind {
    Dct8,
    Haar2,
}

impl MappingKind {
    pub fn tag(self) -> u8 {
        match self {
            MappingKind::Dct8 => 0,
            MappingKind::Haar2 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(MappingKind::Dct8),
            1 => Some(MappingKind::Haar2),
            _ => None,
        }
    }
}

impl std::str::FromStr for MappingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dct8" | "dct" => Ok(MappingKind::Dct8),
            "haar2" | "haar" | "dwt" => Ok(MappingKind::Haar2),
            other => Err(Error::invalid(format!("unknown mapping '{other}'"))),
        }
    }
}

impl std::fmt::Display for MappingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MappingKind::Dct8 => "dct8",
            MappingKind::Haar2 => "haar2",
        })
    }
}

/// Which encode/decode pair is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MappingSpec {
    pub kind: MappingKind,
}

impl MappingSpec {
    pub const fn dct8() -> Self {
        Self {
            kind: MappingKind::Dct8,
        }
    }

    pub const fn haar2() -> Self {
        Self {
            kind: MappingKind::Haar2,
        }
    }

    pub fn upsample_factor(&self) -> usize {
        match self.kind {
            MappingKind::Dct8 => 8,
            MappingKind::Haar2 => 2,
        }
    }

    /// Number of high-dimensional channels: `3 · n²`.
    pub fn channels(&self) -> usize {
        let n = self.upsample_factor();
        SpatialImage::CHANNELS * n * n
    }

    /// Channel index of colour `k`, frequency `(u, v)`.
    pub fn channel_index(&self, k: usize, u: usize, v: usize) -> usize {
        let n = self.upsample_factor();
        k * n * n + u * n + v
    }

    /// Channels carrying the per-block mean (DC / LL) of each colour.
    pub fn dc_channels(&self) -> [usize; 3] {
        [0, 1, 2].map(|k| self.channel_index(k, 0, 0))
    }

    pub fn basis(&self) -> &'static BlockBasis {
        match self.kind {
            MappingKind::Dct8 => BlockBasis::dct8(),
            MappingKind::Haar2 => BlockBasis::haar(),
        }
    }
}

impl Default for MappingSpec {
    fn default() -> Self {
        Self::dct8()
    }
}

/// Replicate every pixel into an `n×n` constant block.
pub fn upsample_replicate(image: &Planes, n: usize) -> Planes {
    let (c, h, w) = image.shape();
    let (uh, uw) = (h * n, w * n);
    let mut out = Planes::zeros(c, uh, uw);
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..uh {
            let row = &src[(y / n) * w..(y / n + 1) * w];
            for x in 0..uw {
                dst[y * uw + x] = row[x / n];
            }
        }
    }
    out
}

/// `n×n` average pooling; inverse of [`upsample_replicate`] on its range.
pub fn average_pool(image: &Planes, n: usize) -> Result<Planes> {
    let (c, uh, uw) = image.shape();
    if uh % n != 0 || uw % n != 0 {
        return Err(Error::invalid(format!(
            "{uh}x{uw} is not divisible by pool size {n}"
        )));
    }
    let (h, w) = (uh / n, uw / n);
    let mut out = Planes::zeros(c, h, w);
    let norm = 1.0 / (n * n) as f64;
    for ch in 0..c {
        let src = image.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..n {
                    let row = &src[(y * n + dy) * uw + x * n..(y * n + dy) * uw + x * n + n];
                    acc += row.iter().map(|&v| v as f64).sum::<f64>();
                }
                dst[y * w + x] = (acc * norm) as f32;
            }
        }
    }
    Ok(out)
}

/// Block-transform an upsampled `(3, nH, nW)` stack and regroup coefficients
/// into `(3n², H, W)`.
fn blocks_to_channels(up: &Planes, spec: &MappingSpec) -> HighDimRep {
    let n = spec.upsample_factor();
    let basis = spec.basis();
    let (c, uh, uw) = up.shape();
    let (h, w) = (uh / n, uw / n);
    let mut out = HighDimRep::zeros(c * n * n, h, w);
    let hw = h * w;
    let mut block = vec![0.0f64; n * n];
    let mut coeffs = vec![0.0f64; n * n];
    for k in 0..c {
        let src = up.plane(k);
        for by in 0..h {
            for bx in 0..w {
                for i in 0..n {
                    for j in 0..n {
                        block[i * n + j] = src[(by * n + i) * uw + bx * n + j] as f64;
                    }
                }
                basis.forward_into(&block, &mut coeffs);
                let data = out.data_mut();
                for (f, &coef) in coeffs.iter().enumerate() {
                    data[(k * n * n + f) * hw + by * w + bx] = coef as f32;
                }
            }
        }
    }
    out
}

/// Encode a spatial image into its high-dimensional representation.
pub fn encode(image: &SpatialImage, spec: &MappingSpec) -> HighDimRep {
    let up = upsample_replicate(image, spec.upsample_factor());
    blocks_to_channels(&up, spec)
}

/// Same as [`encode`] but for an arbitrary plane stack; fails unless it has
/// exactly three channels.
pub fn encode_planes(planes: &Planes, spec: &MappingSpec) -> Result<HighDimRep> {
    if planes.channels() != SpatialImage::CHANNELS {
        return Err(Error::invalid(format!(
            "encode expects 3 channels, got {}",
            planes.channels()
        )));
    }
    Ok(blocks_to_channels(
        &upsample_replicate(planes, spec.upsample_factor()),
        spec,
    ))
}

fn check_rep(rep: &Planes, spec: &MappingSpec) -> Result<()> {
    if rep.channels() != spec.channels() {
        return Err(Error::invalid(format!(
            "{} mapping expects {} channels, got {}",
            spec.kind,
            spec.channels(),
            rep.channels()
        )));
    }
    Ok(())
}

/// Decode a high-dimensional representation back to a spatial image.
pub fn decode(rep: &HighDimRep, spec: &MappingSpec) -> Result<SpatialImage> {
    check_rep(rep, spec)?;
    let n = spec.upsample_factor();
    let basis = spec.basis();
    let (_, h, w) = rep.shape();
    let hw = h * w;
    let norm = 1.0 / (n * n) as f64;
    let mut out = SpatialImage::zeros(h, w);
    let mut coeffs = vec![0.0f64; n * n];
    let mut block = vec![0.0f64; n * n];
    let src = rep.data();
    for k in 0..SpatialImage::CHANNELS {
        for p in 0..hw {
            for (f, slot) in coeffs.iter_mut().enumerate() {
                *slot = src[(k * n * n + f) * hw + p] as f64;
            }
            basis.inverse_into(&coeffs, &mut block);
            out.data_mut()[k * hw + p] = (block.iter().sum::<f64>() * norm) as f32;
        }
    }
    Ok(out)
}

/// Adjoint (transpose) of [`decode`]: for every `x` and `y`,
/// `<decode(x), y> == <x, decode_adjoint(y)>`.
pub fn decode_adjoint(image: &Planes, spec: &MappingSpec) -> Result<HighDimRep> {
    if image.channels() != SpatialImage::CHANNELS {
        return Err(Error::invalid(format!(
            "decode adjoint expects 3 channels, got {}",
            image.channels()
        )));
    }
    let n = spec.upsample_factor();
    let up = upsample_replicate(&image.map(|v| v / (n * n) as f32), n);
    Ok(blocks_to_channels(&up, spec))
}
