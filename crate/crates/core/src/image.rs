//! Floating-point RGB rasters used for input images, renders and UV maps.
//!
//! Pixel `(x, y)` has its centre at integer coordinates; `x` grows to the
//! right and `y` grows downwards. Channel values are nominally in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

/// Interleaved RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Texture-space color grid. Same layout as [`Image`]; texel `(i, j)` covers
/// `[i/W, (i+1)/W) x [j/H, (j+1)/H)` in UV coordinates.
pub type UvMap = Image;

/// Result of sampling an image together with the derivative of the bilinear
/// interpolant with respect to the sample position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSample {
    pub value: [f64; 3],
    pub d_dx: [f64; 3],
    pub d_dy: [f64; 3],
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&color);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    /// Wraps interleaved RGB data. Returns `None` when the length does not match.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * 3).then_some(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Bilinear sample; `None` outside `[0, W-1] x [0, H-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        self.sample_with_gradient(x, y).map(|s| s.value)
    }

    /// Bilinear sample plus the exact partial derivatives of the bilinear
    /// interpolant. On a cell boundary the derivative of the cell to the
    /// lower-right is reported.
    pub fn sample_with_gradient(&self, x: f64, y: f64) -> Option<GradientSample> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let (x0, fx) = cell(x, self.width);
        let (y0, fy) = cell(y, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = GradientSample { value: [0.0; 3], d_dx: [0.0; 3], d_dy: [0.0; 3] };
        for c in 0..3 {
            let top = p00[c] + fx * (p10[c] - p00[c]);
            let bottom = p01[c] + fx * (p11[c] - p01[c]);
            out.value[c] = top + fy * (bottom - top);
            out.d_dx[c] = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
            out.d_dy[c] = bottom - top;
        }
        Some(out)
    }

    /// Bilinear sample with coordinates clamped into the image.
    pub fn sample_clamped(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.sample_with_gradient(x, y).map(|s| s.value).unwrap_or([0.0; 3])
    }

    /// Texture lookup at UV coordinates with texel centres at `(i + 0.5) / W`.
    pub fn sample_uv(&self, u: f64, v: f64) -> [f64; 3] {
        self.sample_clamped(u * self.width as f64 - 0.5, v * self.height as f64 - 0.5)
    }

    pub fn mirrored_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Self {
        assert!(left + width <= self.width && top + height <= self.height, "crop outside image");
        Self::from_fn(width, height, |x, y| self.get(left + x, top + y))
    }

    /// Averages non-overlapping `factor x factor` blocks.
    pub fn downsample_box(&self, factor: usize) -> Self {
        assert!(factor >= 1 && self.width % factor == 0 && self.height % factor == 0);
        let norm = 1.0 / (factor * factor) as f64;
        Self::from_fn(self.width / factor, self.height / factor, |x, y| {
            let mut acc = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = self.get(x * factor + dx, y * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            acc.map(|v| v * norm)
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn cell(coord: f64, len: usize) -> (usize, f64) {
    if len < 2 {
        return (0, 0.0);
    }
    let base = (libm::floor(coord) as usize).min(len - 2);
    (base, coord - base as f64)
}
