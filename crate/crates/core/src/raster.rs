//! Fixed-resolution 2D rasters shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square working resolution.
pub const WORKING_SIZE: usize = 240;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ct,
    MrT1In,
    MrT1Oop,
    MrT2Spir,
    Unknown,
}

impl Modality {
    pub fn is_mr(self) -> bool {
        matches!(self, Modality::MrT1In | Modality::MrT1Oop | Modality::MrT2Spir)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::MrT1In => "mr_t1_in",
            Modality::MrT1Oop => "mr_t1_oop",
            Modality::MrT2Spir => "mr_t2_spir",
            Modality::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ct" => Ok(Modality::Ct),
            "mr_t1_in" | "t1_in" => Ok(Modality::MrT1In),
            "mr_t1_oop" | "t1_oop" | "mr" => Ok(Modality::MrT1Oop),
            "mr_t2_spir" | "t2_spir" => Ok(Modality::MrT2Spir),
            "unknown" => Ok(Modality::Unknown),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major 2D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Contract(format!(
                "raster of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
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

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    /// Reads with replicated borders.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> T {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Counter-clockwise quarter turn.
    pub fn rot90(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Raster::from_fn(w, h, |r, c| self.get(c, w - 1 - r))
    }
}

impl Raster<f32> {
    /// Bilinear resampling with half-pixel centers and clamped borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster<f32> {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let rows = AxisTaps::new(self.height, height);
        let cols = AxisTaps::new(self.width, width);
        let mut tmp = vec![0f32; self.height * width];
        for r in 0..self.height {
            let src = &self.data[r * self.width..(r + 1) * self.width];
            let dst = &mut tmp[r * width..(r + 1) * width];
            cols.apply(src, dst);
        }
        let mut out = vec![0f32; height * width];
        for (r, dst) in out.chunks_mut(width).enumerate() {
            let (i0, i1, w1) = rows.tap(r);
            let a = &tmp[i0 * width..(i0 + 1) * width];
            let b = &tmp[i1 * width..(i1 + 1) * width];
            for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                *d = x + (y - x) * w1;
            }
        }
        Raster {
            height,
            width,
            data: out,
        }
    }
}

/// Two-tap linear interpolation weights along one axis.
///
/// Source coordinate for output index `o` is `(o + 0.5) * in / out - 0.5`, clamped to the
/// valid range, which is the half-pixel convention used by most deep-learning frameworks.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub(crate) idx0: Vec<usize>,
    pub(crate) idx1: Vec<usize>,
    pub(crate) w1: Vec<f32>,
}

impl AxisTaps {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut idx0 = Vec::with_capacity(output);
        let mut idx1 = Vec::with_capacity(output);
        let mut w1 = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            idx0.push(i0);
            idx1.push(i1);
            w1.push(lambda as f32);
        }
        Self { idx0, idx1, w1 }
    }

    #[inline]
    pub(crate) fn tap(&self, o: usize) -> (usize, usize, f32) {
        (self.idx0[o], self.idx1[o], self.w1[o])
    }

    pub(crate) fn apply(&self, src: &[f32], dst: &mut [f32]) {
        for (o, d) in dst.iter_mut().enumerate() {
            let (a, b) = (src[self.idx0[o]], src[self.idx1[o]]);
            *d = a + (b - a) * self.w1[o];
        }
    }
}

/// A normalized grayscale slice at the working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pixels: Raster<f32>,
    modality: Modality,
}

impl GrayImage {
    /// Validates shape and range. Values must be finite and inside `[0, 1]`.
    pub fn new(pixels: Raster<f32>, modality: Modality) -> Result<Self> {
        if pixels.shape() != (WORKING_SIZE, WORKING_SIZE) {
            return Err(Error::Contract(format!(
                "gray image must be {WORKING_SIZE}x{WORKING_SIZE}, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if let Some(bad) = pixels
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Contract(format!(
                "gray image pixel {bad} outside [0, 1]"
            )));
        }
        Ok(Self { pixels, modality })
    }

    /// Resamples an arbitrary-size raster to the working resolution, clamping to `[0, 1]`.
    pub fn from_any_size(pixels: &Raster<f32>, modality: Modality) -> Result<Self> {
        let resized = pixels
            .resize_bilinear(WORKING_SIZE, WORKING_SIZE)
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Self::new(resized, modality)
    }

    pub fn pixels(&self) -> &Raster<f32> {
        &self.pixels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_pixels(&self, pixels: Raster<f32>) -> Result<Self> {
        Self::new(pixels, self.modality)
    }

    /// Applies an intensity remap pixel-wise; the result is clamped to `[0, 1]`.
    pub fn remap(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            pixels: self.pixels.map(|v| f(v).clamp(0.0, 1.0)),
            modality: self.modality,
        }
    }

    pub fn rot90(&self) -> Self {
        Self {
            pixels: self.pixels.rot90(),
            modality: self.modality,
        }
    }
}

/// Binary ground-truth or predicted mask; values are 0 or 1.
pub type Mask = Raster<u8>;

pub fn mask_from_probabilities(probs: &Raster<f32>, threshold: f32) -> Mask {
    probs.map(|p| u8::from(p >= threshold))
}

pub fn count_ones(mask: &Mask) -> usize {
    mask.data().iter().filter(|&&v| v != 0).count()
}

/// Intersection-over-union of the nonzero sets of two equally shaped binary rasters.
pub fn jaccard(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
