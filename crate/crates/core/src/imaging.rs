//! Frames, Gaussian pyramids, pyramid level policy and the structure-texture
//! decomposition applied to frames before flow estimation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImagingError {
    #[error("frame data length {len} does not match {width}x{height}")]
    LengthMismatch { width: usize, height: usize, len: usize },
    #[error("frame value {value} at offset {offset} is not finite or outside [0, 1]")]
    ValueOutOfRange { offset: usize, value: f32 },
    #[error("frame {width}x{height} is smaller than 2x2")]
    TooSmall { width: usize, height: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("{levels} pyramid levels of a {width}x{height} frame would shrink below 2x2")]
    Degenerate { width: usize, height: usize, levels: usize },
}

/// Single-channel luminance frame with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    width: usize,
    height: usize,
    index: u64,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, index: u64, data: Vec<f32>) -> Result<Self, ImagingError> {
        if width < 2 || height < 2 {
            return Err(ImagingError::TooSmall { width, height });
        }
        if data.len() != width * height {
            return Err(ImagingError::LengthMismatch { width, height, len: data.len() });
        }
        if let Some((offset, &value)) =
            data.iter().enumerate().find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ImagingError::ValueOutOfRange { offset, value });
        }
        Ok(Self { width, height, index, data })
    }

    /// Builds a frame by evaluating `f(x, y)`; values are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        index: u64,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, index, data)
    }

    pub fn constant(width: usize, height: usize, index: u64, value: f32) -> Result<Self, ImagingError> {
        Self::new(width, height, index, vec![value; width * height])
    }

    /// 8-bit gray samples, mapped to `[0, 1]` by division by 255.
    pub fn from_gray8(width: usize, height: usize, index: u64, bytes: &[u8]) -> Result<Self, ImagingError> {
        Self::new(width, height, index, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Interleaved 8-bit RGB converted with BT.601 luma weights.
    pub fn from_rgb8(width: usize, height: usize, index: u64, rgb: &[u8]) -> Result<Self, ImagingError> {
        if rgb.len() != width * height * 3 {
            return Err(ImagingError::LengthMismatch { width, height, len: rgb.len() / 3 });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| luma_bt601(p[0], p[1], p[2]))
            .collect();
        Self::new(width, height, index, data)
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn with_index(mut self, index: u64) -> Self {
        self.index = index;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

pub fn luma_bt601(r: u8, g: u8, b: u8) -> f32 {
    ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0).clamp(0.0, 1.0) as f32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<Frame>,
}

impl Pyramid {
    pub fn level(&self, level: usize) -> Option<&Frame> {
        self.levels.get(level)
    }

    pub fn coarsest(&self) -> &Frame {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn into_level(mut self, level: usize) -> Option<Frame> {
        (level < self.levels.len()).then(|| self.levels.swap_remove(level))
    }
}

const BINOMIAL5: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Reflect-101 index mirroring (`-1 -> 1`, `n -> n - 2`), valid for any offset.
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// One pyramid reduction: 5-tap binomial blur with mirrored borders, then
/// keep every second sample in both directions.
pub(crate) fn reduce(src: &[f32], width: usize, height: usize) -> (Vec<f32>, usize, usize) {
    let ow = width / 2;
    let oh = height / 2;
    // horizontal pass, only at even columns
    let mut horiz = vec![0f32; ow * height];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for ox in 0..ow {
            let cx = (2 * ox) as isize;
            let mut acc = 0f32;
            for (k, wgt) in BINOMIAL5.iter().enumerate() {
                acc += wgt * row[mirror(cx + k as isize - 2, width)];
            }
            horiz[y * ow + ox] = acc;
        }
    }
    let mut out = vec![0f32; ow * oh];
    for oy in 0..oh {
        let cy = (2 * oy) as isize;
        for (k, wgt) in BINOMIAL5.iter().enumerate() {
            let sy = mirror(cy + k as isize - 2, height);
            let src_row = &horiz[sy * ow..(sy + 1) * ow];
            let dst_row = &mut out[oy * ow..(oy + 1) * ow];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += wgt * s;
            }
        }
    }
    (out, ow, oh)
}

pub fn build_pyramid(frame: &Frame, num_levels: usize) -> Result<Pyramid, ImagingError> {
    if num_levels == 0 {
        return Err(ImagingError::NoLevels);
    }
    let shift = num_levels - 1;
    if shift >= usize::BITS as usize || (frame.width >> shift) < 2 || (frame.height >> shift) < 2 {
        return Err(ImagingError::Degenerate { width: frame.width, height: frame.height, levels: num_levels });
    }
    let mut levels = Vec::with_capacity(num_levels);
    levels.push(frame.clone());
    for _ in 1..num_levels {
        let prev = levels.last().unwrap();
        let (mut data, w, h) = reduce(&prev.data, prev.width, prev.height);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        levels.push(Frame { width: w, height: h, index: frame.index, data });
    }
    Ok(Pyramid { levels })
}

/// Longest side, in pixels, processed at the selected pyramid level.
pub const MAX_PROCESSING_DIM: usize = 1280;

/// Smallest level `L` with `max(width, height) / 2^L <= 1280`.
pub fn select_level(width: usize, height: usize) -> usize {
    let longest = width.max(height);
    let mut level = 0;
    while longest > MAX_PROCESSING_DIM << level {
        level += 1;
    }
    level
}

/// Parameters of the structure-texture decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureTexture {
    /// Fidelity weight of the ROF model `TV(u) + weight/2 * |u - f|^2`.
    pub smoothing_weight: f32,
    /// Fraction of the structure component kept in the output.
    pub blend: f32,
    pub iterations: usize,
}

impl Default for StructureTexture {
    fn default() -> Self {
        Self { smoothing_weight: 12.0, blend: 0.05, iterations: 40 }
    }
}

/// Forward differences with a zero derivative on the last row/column.
pub(crate) fn gradient_forward(src: &[f32], width: usize, height: usize, gx: &mut [f32], gy: &mut [f32]) {
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let i = row + x;
            gx[i] = if x + 1 < width { src[i + 1] - src[i] } else { 0.0 };
            gy[i] = if y + 1 < height { src[i + width] - src[i] } else { 0.0 };
        }
    }
}

/// Backward-difference divergence, the negative adjoint of [`gradient_forward`].
pub(crate) fn divergence_backward(p1: &[f32], p2: &[f32], width: usize, height: usize, out: &mut [f32]) {
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let i = row + x;
            let d1 = if x == 0 {
                p1[i]
            } else if x + 1 == width {
                -p1[i - 1]
            } else {
                p1[i] - p1[i - 1]
            };
            let d2 = if y == 0 {
                p2[i]
            } else if y + 1 == height {
                -p2[i - width]
            } else {
                p2[i] - p2[i - width]
            };
            out[i] = d1 + d2;
        }
    }
}

/// ROF denoising by Chambolle's dual projection; returns the structure image.
pub fn rof_denoise(src: &[f32], width: usize, height: usize, weight: f32, iterations: usize) -> Vec<f32> {
    const STEP: f32 = 0.25;
    let theta = 1.0 / weight;
    let n = width * height;
    let mut p1 = vec![0f32; n];
    let mut p2 = vec![0f32; n];
    let mut div = vec![0f32; n];
    let mut gx = vec![0f32; n];
    let mut gy = vec![0f32; n];
    let mut v = vec![0f32; n];
    for _ in 0..iterations {
        divergence_backward(&p1, &p2, width, height, &mut div);
        for i in 0..n {
            v[i] = div[i] - src[i] / theta;
        }
        gradient_forward(&v, width, height, &mut gx, &mut gy);
        for i in 0..n {
            let norm = (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
            let denom = 1.0 + STEP * norm;
            p1[i] = (p1[i] + STEP * gx[i]) / denom;
            p2[i] = (p2[i] + STEP * gy[i]) / denom;
        }
    }
    divergence_backward(&p1, &p2, width, height, &mut div);
    src.iter().zip(&div).map(|(f, d)| f - theta * d).collect()
}

/// Returns `texture + blend * structure`, stretched so its minimum maps to 0
/// and its maximum to 1. A flat result is only clamped.
pub fn structure_texture(frame: &Frame, params: &StructureTexture) -> Frame {
    let structure = rof_denoise(&frame.data, frame.width, frame.height, params.smoothing_weight, params.iterations);
    let blend = params.blend.clamp(0.0, 1.0);
    let mixed: Vec<f32> = frame.data.iter().zip(&structure).map(|(&f, &s)| (f - s) + blend * s).collect();
    let (lo, hi) = mixed.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let data = if span > 1e-6 {
        mixed.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        mixed.iter().map(|&v| v.clamp(0.0, 1.0)).collect()
    };
    Frame { width: frame.width, height: frame.height, index: frame.index, data }
}
