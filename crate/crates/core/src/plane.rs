use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D row-major grid of pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

/// Grayscale intensities.
pub type Image = Plane<f32>;
/// Binary labels, values in {0, 1}.
pub type Mask = Plane<u8>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "{height}×{width} plane needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.width + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Copies the `h`×`w` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Self> {
        if r0 + h > self.height || c0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "window {h}×{w} at ({r0},{c0}) exceeds {}×{} plane",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            let start = r * self.width + c0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask {
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Thresholds a probability map: `p ≥ threshold` → 1.
    pub fn from_probabilities(p: &Image, threshold: f32) -> Mask {
        p.map(|v| u8::from(v >= threshold))
    }
}
