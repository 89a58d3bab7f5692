use std::ops::Deref;

use crate::error::{Error, Result};

/// A channel-major stack of equally sized real planes, row-major per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "empty plane stack ({channels}x{height}x{width})"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Planes) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn with_data(&self, data: Vec<f32>) -> Planes {
        debug_assert_eq!(data.len(), self.data.len());
        Planes {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn zip_map(&self, other: &Planes, f: impl Fn(f32, f32) -> f32) -> Result<Planes> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(self.with_data(data))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Planes {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Planes) -> Result<Planes> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Planes) -> Result<Planes> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Planes {
        self.map(|v| v * s)
    }

    /// Mean absolute value over all elements.
    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|&v| v.abs() as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|&v| v.abs() as f64).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Planes) -> Result<f32> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

/// A real-valued `(3, H, W)` image. Freshly loaded images sit in `[0, 1]`;
/// residues and decodes may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialImage(Planes);

impl SpatialImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self(Planes::new(Self::CHANNELS, height, width, data)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Planes::zeros(Self::CHANNELS, height, width))
    }

    pub fn from_planes(planes: Planes) -> Result<Self> {
        if planes.channels() != Self::CHANNELS {
            return Err(Error::invalid(format!(
                "spatial image needs 3 channels, got {}",
                planes.channels()
            )));
        }
        Ok(Self(planes))
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn clamped(&self) -> SpatialImage {
        SpatialImage(self.0.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn flipped_horizontal(&self) -> SpatialImage {
        let (c, h, w) = self.0.shape();
        let mut out = Planes::zeros(c, h, w);
        for ch in 0..c {
            let src = self.0.plane(ch);
            let dst = out.plane_mut(ch);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
        }
        SpatialImage(out)
    }

    pub fn add(&self, other: &SpatialImage) -> Result<SpatialImage> {
        Ok(SpatialImage(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &SpatialImage) -> Result<SpatialImage> {
        Ok(SpatialImage(self.0.sub(&other.0)?))
    }

    pub fn scale(&self, s: f32) -> SpatialImage {
        SpatialImage(self.0.scale(s))
    }
}

impl Deref for SpatialImage {
    type Target = Planes;

    fn deref(&self) -> &Planes {
        &self.0
    }
}

/// A `(C, H, W)` channel stack in the high-dimensional space of a mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct HighDimRep(Planes);

impl HighDimRep {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Self(Planes::new(channels, height, width, data)?))
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self(Planes::zeros(channels, height, width))
    }

    pub fn from_planes(planes: Planes) -> Self {
        Self(planes)
    }

    pub fn into_planes(self) -> Planes {
        self.0
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.0.data_mut()
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        self.0.plane_mut(c)
    }

    pub fn add(&self, other: &HighDimRep) -> Result<HighDimRep> {
        Ok(HighDimRep(self.0.add(&other.0)?))
    }

    pub fn sub(&self, other: &HighDimRep) -> Result<HighDimRep> {
        Ok(HighDimRep(self.0.sub(&other.0)?))
    }

    pub fn scale(&self, s: f32) -> HighDimRep {
        HighDimRep(self.0.scale(s))
    }
}

impl Deref for HighDimRep {
    type Target = Planes;

    fn deref(&self) -> &Planes {
        &self.0
    }
}
