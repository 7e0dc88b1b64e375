//! Dense per-pixel containers: intensity images, depth maps and validity masks.
//!
//! All three are stored row-major. Coordinates follow the image convention
//! used throughout the crate: column `x` (or `u`) grows to the right, row `y`
//! (or `v`) grows downward.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    LengthMismatch {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("intensity at index {index} is {value}, outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("depth at index {index} is {value}; valid depths must be finite and > 0 (NaN marks invalid)")]
    InvalidDepth { index: usize, value: f64 },
    #[error("empty raster ({0}x{1})")]
    Empty(usize, usize),
}

pub(crate) fn check_dims(
    expected: (usize, usize),
    got: (usize, usize),
) -> Result<(), RasterError> {
    if expected != got {
        return Err(RasterError::DimensionMismatch {
            expected_w: expected.0,
            expected_h: expected.1,
            got_w: got.0,
            got_h: got.1,
        });
    }
    Ok(())
}

/// Row-major image with 1 or 3 interleaved channels, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty(width, height));
        }
        if channels != 1 && channels != 3 {
            return Err(RasterError::UnsupportedChannels(channels));
        }
        if data.len() != width * height * channels {
            return Err(RasterError::LengthMismatch {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(RasterError::IntensityOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel image with every pixel set to `value` (clamped to `[0, 1]`).
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data: vec![value.clamp(0.0, 1.0); width * height],
        }
    }

    /// Builds a single-channel image from a per-pixel function, clamping to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub(crate) fn from_raw_unchecked(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// 2x2 box-filter downsampling; odd trailing rows/columns are dropped.
    pub fn downsample(&self) -> Self {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        let (sx, sy) = (2 * x + dx, 2 * y + dy);
                        if sx < self.width && sy < self.height {
                            acc += self.get(sx, sy, c);
                            n += 1.0;
                        }
                    }
                    data.push(acc / n);
                }
            }
        }
        Self::from_raw_unchecked(w, h, self.channels, data)
    }
}

/// Row-major metric depth. `NaN` marks an invalid pixel; every other entry is
/// finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty(width, height));
        }
        if data.len() != width * height {
            return Err(RasterError::LengthMismatch {
                width,
                height,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_nan() && !(v.is_finite() && **v > 0.0))
        {
            return Err(RasterError::InvalidDepth { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Like [`DepthMap::new`] but maps every non-finite or non-positive entry
    /// to `NaN` instead of rejecting it.
    pub fn from_lossy(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self, RasterError> {
        for d in data.iter_mut() {
            if !(d.is_finite() && *d > 0.0) {
                *d = f64::NAN;
            }
        }
        Self::new(width, height, data)
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        let value = if depth.is_finite() && depth > 0.0 {
            depth
        } else {
            f64::NAN
        };
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
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

    /// Depth at `(x, y)`, or `None` for an invalid pixel.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.data[y * self.width + x];
        (!d.is_nan()).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| !d.is_nan()).count()
    }

    /// 2x2 downsampling averaging the valid depths of each block.
    pub fn downsample(&self) -> Self {
        let w = (self.width / 2).max(1);
        let h = (self.height / 2).max(1);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0usize;
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < self.width && sy < self.height {
                        if let Some(d) = self.get(sx, sy) {
                            acc += d;
                            n += 1;
                        }
                    }
                }
                data.push(if n == 0 { f64::NAN } else { acc / n as f64 });
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }
}

/// Per-pixel participation flags for a loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self, RasterError> {
        if data.len() != width * height {
            return Err(RasterError::LengthMismatch {
                width,
                height,
                channels: 1,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
