//! Row-major `height x width x channels` rasters for images and depth maps.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let o = self.offset(y, x, c);
        self.data[o] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let o = self.offset(y, x, 0);
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let o = self.offset(y, x, 0);
        let c = self.channels;
        &mut self.data[o..o + c]
    }
}

pub type ImageU8 = Raster<u8>;
/// Single-channel camera-z depth in meters; zero marks "no surface".
pub type DepthRaster = Raster<f32>;
