//! Dense per-pixel grids: probability maps, scalar maps, flow fields, images
//! and label maps.
//!
//! All grids are row-major. Multi-channel grids are laid out as `(y, x, c)`.
//! Constructors validate the type invariants; arithmetic inside the crate
//! goes through `from_raw` variants once the invariant is established by
//! construction.

use thiserror::Error;

/// Label value excluded from every metric.
pub const VOID_LABEL: u8 = 255;

/// Absolute slack allowed on a pixel's class sum.
pub const SUM_TOLERANCE: f64 = 1e-5;
/// Slack allowed below 0 / above 1 for a single probability.
pub const RANGE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimensions must be positive, got {height}x{width}x{channels}")]
    ZeroDimension {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("fill vector is not a distribution (len {len}, sum {sum})")]
    NotADistribution { len: usize, sum: f64 },
    #[error("value {value} at (y={y}, x={x}, c={c}) outside [0, 1]")]
    OutOfRange {
        y: usize,
        x: usize,
        c: usize,
        value: f64,
    },
    #[error("pixel (y={y}, x={x}) sums to {sum}, not 1")]
    PixelSum { y: usize, x: usize, sum: f64 },
    #[error("pixel (y={y}, x={x}) has zero channel sum")]
    ZeroSumPixel { y: usize, x: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("intensity {value} at flat index {index} outside [0, 255]")]
    IntensityRange { index: usize, value: f64 },
    #[error("image must have 1 or 3 channels, got {0}")]
    BadChannelCount(usize),
    #[error("label {label} at flat index {index} is not < {classes} and not void")]
    LabelRange {
        index: usize,
        label: u8,
        classes: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_dims(h: usize, w: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 || c == 0 {
        return Err(TensorError::ZeroDimension {
            height: h,
            width: w,
            channels: c,
        });
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(TensorError::LengthMismatch { expected, got });
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn same_hw(a: (usize, usize), b: (usize, usize), ca: usize, cb: usize) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            left: (a.0, a.1, ca),
            right: (b.0, b.1, cb),
        });
    }
    Ok(())
}

/// Per-pixel class probability tensor, `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Every pixel carries the same distribution `fill`.
    pub fn new_filled(height: usize, width: usize, classes: usize, fill: &[f64]) -> Result<Self> {
        check_dims(height, width, classes)?;
        let sum: f64 = fill.iter().sum();
        let in_range = fill
            .iter()
            .all(|&v| (-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&v));
        if fill.len() != classes || !in_range || (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(TensorError::NotADistribution {
                len: fill.len(),
                sum,
            });
        }
        let mut data = Vec::with_capacity(height * width * classes);
        for _ in 0..height * width {
            data.extend_from_slice(fill);
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Result<Self> {
        let fill = vec![1.0 / classes.max(1) as f64; classes];
        Self::new_filled(height, width, classes, &fill)
    }

    /// Validating constructor over row-major `(y, x, c)` data.
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, classes)?;
        check_len(height * width * classes, data.len())?;
        check_finite(&data)?;
        for (p, px) in data.chunks_exact(classes).enumerate() {
            let (y, x) = (p / width, p % width);
            for (c, &v) in px.iter().enumerate() {
                if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&v) {
                    return Err(TensorError::OutOfRange { y, x, c, value: v });
                }
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(TensorError::PixelSum { y, x, sum });
            }
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    /// Caller guarantees the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * classes);
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    /// Rescales every pixel so its classes sum to one.
    pub fn normalize(&self) -> Result<Self> {
        let data = normalize_pixels(&self.data, self.width, self.classes)?;
        Ok(Self::from_raw(self.height, self.width, self.classes, data))
    }

    /// Per-pixel argmax, lowest class index wins ties.
    pub fn argmax_labels(&self) -> LabelMap {
        let data = self.data.chunks_exact(self.classes).map(argmax).collect();
        LabelMap::from_raw(self.height, self.width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.data[i..i + self.classes]
    }
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }

    /// Elementwise square, the single-sample second moment.
    pub fn squared(&self) -> ClassTensor {
        ClassTensor::from_raw(
            self.height,
            self.width,
            self.classes,
            self.data.iter().map(|v| v * v).collect(),
        )
    }
}

pub(crate) fn argmax(px: &[f64]) -> u8 {
    let mut best = 0;
    for (c, &v) in px.iter().enumerate().skip(1) {
        if v > px[best] {
            best = c;
        }
    }
    best as u8
}

pub(crate) fn normalize_pixels(data: &[f64], width: usize, classes: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for (p, px) in data.chunks_exact(classes).enumerate() {
        let sum: f64 = px.iter().sum();
        if !(sum > 0.0) {
            return Err(TensorError::ZeroSumPixel {
                y: p / width,
                x: p % width,
            });
        }
        out.extend(px.iter().map(|v| v / sum));
    }
    Ok(out)
}

/// Nonnegative finite `H x W x C` tensor without the sum-to-one constraint,
/// used for running second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTensor {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassTensor {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, classes)?;
        check_len(height * width * classes, data.len())?;
        check_finite(&data)?;
        if let Some(i) = data.iter().position(|&v| v < 0.0) {
            let p = i / classes;
            return Err(TensorError::OutOfRange {
                y: p / width,
                x: p % width,
                c: i % classes,
                value: data[i],
            });
        }
        Ok(Self::from_raw(height, width, classes, data))
    }

    pub(crate) fn from_raw(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * classes);
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.classes;
        &self.data[i..i + self.classes]
    }
}

/// `H x W` field of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 1)?;
        check_len(height * width, data.len())?;
        check_finite(&data)?;
        Ok(Self::from_raw(height, width, data))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_vec(height, width, vec![value; height * width])
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels, `H x W x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    /// `data` holds interleaved `dx, dy` pairs.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, 2)?;
        check_len(height * width * 2, data.len())?;
        check_finite(&data)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| [dx, dy]).collect();
        Self::from_vec(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    /// `(dx, dy)` at pixel `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }
}

/// Intensity image with 1 or 3 channels, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageFrame {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, channels)?;
        if channels != 1 && channels != 3 {
            return Err(TensorError::BadChannelCount(channels));
        }
        check_len(height * width * channels, data.len())?;
        check_finite(&data)?;
        if let Some(index) = data.iter().position(|v| !(0.0..=255.0).contains(v)) {
            return Err(TensorError::IntensityRange {
                index,
                value: data[index],
            });
        }
        Ok(Self::from_raw(height, width, channels, data))
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, data: &[u8]) -> Result<Self> {
        Self::from_vec(
            height,
            width,
            channels,
            data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
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
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    /// Rounded to the nearest integer level.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Per-pixel class indices; [`VOID_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, 1)?;
        check_len(height * width, data.len())?;
        if let Some(index) = data
            .iter()
            .position(|&l| l != VOID_LABEL && usize::from(l) >= classes)
        {
            return Err(TensorError::LabelRange {
                index,
                label: data[index],
                classes,
            });
        }
        Ok(Self::from_raw(height, width, data))
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}
