use serde::{Deserialize, Serialize};

use super::transfer::TransferFn;
use super::ColorError;

/// RGB primaries an image is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Rec709,
    Rec2020,
    Xyz,
}

/// Whether pixel values are linear light or carry a transfer function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Linear,
    Encoded(TransferFn),
}

/// Planar three-channel float image.
///
/// Planes are stored back to back (R, G, B), each row-major. Values are kept
/// as `f32`; every transform in [`crate::color`] evaluates in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
    pub space: ColorSpace,
    pub domain: Domain,
    /// Code grid the values sit on, if the image has been quantized.
    pub bits: Option<u32>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, space: ColorSpace, domain: Domain) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
            space,
            domain,
            bits: None,
        }
    }

    pub fn from_planes(
        width: usize,
        height: usize,
        data: Vec<f32>,
        space: ColorSpace,
        domain: Domain,
    ) -> Result<Self, ColorError> {
        if data.len() != 3 * width * height {
            return Err(ColorError::Shape(format!(
                "expected {} samples for {}x{}x3, got {}",
                3 * width * height,
                width,
                height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ColorError::NonFinite(i));
        }
        if domain != Domain::Linear {
            if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(ColorError::OutOfRange {
                    index: i,
                    value: data[i] as f64,
                });
            }
        }
        Ok(Self {
            width,
            height,
            data,
            space,
            domain,
            bits: None,
        })
    }

    /// Builds an image from a per-pixel closure returning RGB.
    pub fn from_fn(
        width: usize,
        height: usize,
        space: ColorSpace,
        domain: Domain,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut img = Self::new(width, height, space, domain);
        let n = width * height;
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let rgb = f(x, y);
                img.data[i] = rgb[0];
                img.data[n + i] = rgb[1];
                img.data[2 * n + i] = rgb[2];
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
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
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.pixel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.pixel_count();
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let n = self.pixel_count();
        let i = y * self.width + x;
        self.data[i] = rgb[0];
        self.data[n + i] = rgb[1];
        self.data[2 * n + i] = rgb[2];
    }

    /// Same tags and dimensions, new sample buffer.
    pub fn with_data(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            width: self.width,
            height: self.height,
            data,
            space: self.space,
            domain: self.domain,
            bits: self.bits,
        }
    }

    pub fn same_shape(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every pixel independently.
    pub fn map_pixels(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> Self {
        let n = self.pixel_count();
        let mut out = self.data.clone();
        for i in 0..n {
            let o = f([self.data[i], self.data[n + i], self.data[2 * n + i]]);
            out[i] = o[0];
            out[n + i] = o[1];
            out[2 * n + i] = o[2];
        }
        self.with_data(out)
    }

    /// Copies out a `w`x`h` window whose top-left corner is (`x0`, `y0`).
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self, ColorError> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(ColorError::Shape(format!(
                "crop {}x{}+{}+{} exceeds {}x{}",
                w, h, x0, y0, self.width, self.height
            )));
        }
        let n = self.pixel_count();
        let mut data = Vec::with_capacity(3 * w * h);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = c * n + y * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            space: self.space,
            domain: self.domain,
            bits: self.bits,
        })
    }

    /// Reorders pixels: output pixel `i` is input pixel `perm[i]`.
    pub fn permute_pixels(&self, perm: &[usize]) -> Self {
        let n = self.pixel_count();
        assert_eq!(perm.len(), n, "permutation length must match pixel count");
        let mut out = vec![0.0; 3 * n];
        for c in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                out[c * n + i] = self.data[c * n + p];
            }
        }
        self.with_data(out)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}
