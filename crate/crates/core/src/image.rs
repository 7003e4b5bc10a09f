//! Grayscale rasters and binary masks, row-major.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "image",
                format!("{} values for a {width}x{height} raster", data.len()),
            ));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample; `None` outside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(u >= 0.0 && v >= 0.0 && u <= max_x && v <= max_y) {
            return None;
        }
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let row0 = y0 * self.width;
        let row1 = y1 * self.width;
        let p00 = self.data[row0 + x0];
        let p10 = self.data[row0 + x1];
        let p01 = self.data[row1 + x0];
        let p11 = self.data[row1 + x1];
        let top = p00 + fx * (p10 - p00);
        let bottom = p01 + fx * (p11 - p01);
        Some(top + fy * (bottom - top))
    }

    /// 2x2 box downsample; odd trailing rows/columns are dropped.
    pub fn half_size(&self) -> GrayImage {
        let w = self.width / 2;
        let h = self.height / 2;
        GrayImage::from_fn(w, h, |x, y| {
            let (sx, sy) = (2 * x, 2 * y);
            0.25 * (self.get(sx, sy) + self.get(sx + 1, sy) + self.get(sx, sy + 1) + self.get(sx + 1, sy + 1))
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// 3x3 (8-neighbour) binary dilation.
    pub fn dilate(&self) -> Mask {
        let mut out = Mask::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(self.height - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(self.width - 1) {
                        out.set(nx, ny, true);
                    }
                }
            }
        }
        out
    }
}
