//! Edge detection module: contrast normalization followed by binary edge extraction.
//!
//! Histogram equalization removes most of the monotone intensity differences between
//! acquisition protocols, and the binary edge map keeps only the geometry of the slice.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask, Raster};

const OTSU_BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Canny,
    Sobel,
    Laplacian,
}

impl Detector {
    pub const ALL: [Detector; 3] = [Detector::Laplacian, Detector::Sobel, Detector::Canny];

    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Canny => "canny",
            Detector::Sobel => "sobel",
            Detector::Laplacian => "laplacian",
        }
    }
}

impl std::str::FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "canny" => Ok(Detector::Canny),
            "sobel" => Ok(Detector::Sobel),
            "laplacian" => Ok(Detector::Laplacian),
            other => Err(Error::Config(format!("unknown edge detector `{other}`"))),
        }
    }
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Smoothing applied after histogram equalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingParams {
    /// Window half-width; 2 gives a 5x5 window.
    pub radius: usize,
    pub spatial_sigma: f32,
    pub range_sigma: f32,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            radius: 2,
            spatial_sigma: 1.5,
            range_sigma: 0.1,
        }
    }
}

/// Detector selection and its parameters.
///
/// `sigma`, `low` and `high` only affect Canny. Thresholds are absolute values of the
/// gradient magnitude computed with Sobel kernels scaled by 1/8, so a unit step produces
/// a magnitude of 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeParams {
    pub detector: Detector,
    pub sigma: f32,
    pub low: f32,
    pub high: f32,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            detector: Detector::Canny,
            sigma: 1.0,
            low: 0.1,
            high: 0.2,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "canny sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.low.is_finite() && self.high.is_finite()) || self.low < 0.0 {
            return Err(Error::Config("canny thresholds must be finite and >= 0".into()));
        }
        if self.low > self.high {
            return Err(Error::Config(format!(
                "canny low threshold {} exceeds high threshold {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pixels: Mask,
    detector: Detector,
    threshold_used: f32,
}

impl EdgeMap {
    pub fn pixels(&self) -> &Mask {
        &self.pixels
    }

    pub fn detector(&self) -> Detector {
        self.detector
    }

    pub fn threshold_used(&self) -> f32 {
        self.threshold_used
    }

    pub fn count(&self) -> usize {
        crate::raster::count_ones(&self.pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = self.pixels.shape();
        let buf: Vec<u8> = self.pixels.data().iter().map(|&v| v * 255).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| Error::Contract("edge map buffer size mismatch".into()))?;
        img.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Histogram equalization, then edge-preserving smoothing.
pub fn preprocess(image: &GrayImage, smoothing: &SmoothingParams) -> Result<GrayImage> {
    let equalized = equalize_histogram(image.pixels());
    image.with_pixels(bilateral_filter(&equalized, smoothing))
}

/// Maps each pixel to the normalized cumulative count of its intensity, one histogram bin
/// per distinct value in `[0, 1]`.
///
/// The lowest value maps to 0 and the highest to 1, and any strictly increasing remap of
/// the input leaves the output unchanged. A constant image has no spread to redistribute,
/// so it is returned unchanged.
pub fn equalize_histogram(pixels: &Raster<f32>) -> Raster<f32> {
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    let mut sorted: Vec<f32> = pixels.data().iter().map(|&v| clamp(v)).collect();
    sorted.sort_by(f32::total_cmp);
    let total = sorted.len();
    let cdf = |v: f32| sorted.partition_point(|&x| x <= v);
    let cdf_min = match sorted.first() {
        Some(&lo) => cdf(lo),
        None => return pixels.clone(),
    };
    if total == cdf_min {
        return pixels.clone();
    }
    let denom = (total - cdf_min) as f64;
    pixels.map(|v| ((cdf(clamp(v)) - cdf_min) as f64 / denom) as f32)
}

/// Bilateral smoothing with replicated borders.
pub fn bilateral_filter(pixels: &Raster<f32>, params: &SmoothingParams) -> Raster<f32> {
    if params.radius == 0 || params.spatial_sigma <= 0.0 || params.range_sigma <= 0.0 {
        return pixels.clone();
    }
    let r = params.radius as isize;
    let side = 2 * params.radius + 1;
    let inv_space = 1.0 / (2.0 * params.spatial_sigma * params.spatial_sigma);
    let inv_range = 1.0 / (2.0 * params.range_sigma * params.range_sigma);
    let mut spatial = Vec::with_capacity(side * side);
    for dr in -r..=r {
        for dc in -r..=r {
            spatial.push((-((dr * dr + dc * dc) as f32) * inv_space).exp());
        }
    }
    Raster::from_fn(pixels.height(), pixels.width(), |row, col| {
        let center = pixels.get(row, col);
        let (mut num, mut den) = (0f32, 0f32);
        let mut k = 0;
        for dr in -r..=r {
            for dc in -r..=r {
                let v = pixels.get_clamped(row as isize + dr, col as isize + dc);
                let d = v - center;
                let w = spatial[k] * (-(d * d) * inv_range).exp();
                num += w * v;
                den += w;
                k += 1;
            }
        }
        (num / den).clamp(0.0, 1.0)
    })
}

/// Applies the selected detector and binarizes its response.
pub fn detect_edges(image: &GrayImage, params: &EdgeParams) -> Result<EdgeMap> {
    params.validate()?;
    let pixels = image.pixels();
    let (mask, threshold_used) = match params.detector {
        Detector::Canny => (canny(pixels, params), params.high),
        Detector::Sobel => {
            let (gx, gy) = sobel_gradients(pixels);
            let mag = magnitude(&gx, &gy);
            otsu_binarize(&mag)
        }
        Detector::Laplacian => otsu_binarize(&laplacian_magnitude(pixels)),
    };
    Ok(EdgeMap {
        pixels: mask,
        detector: params.detector,
        threshold_used,
    })
}

/// Separable Gaussian blur with a window of half-width `ceil(2 sigma)`.
pub fn gaussian_blur(pixels: &Raster<f32>, sigma: f32) -> Raster<f32> {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-((d * d) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let horizontal = Raster::from_fn(pixels.height(), pixels.width(), |r, c| {
        (-radius..=radius)
            .zip(&kernel)
            .map(|(d, k)| k * pixels.get_clamped(r as isize, c as isize + d))
            .sum::<f32>()
    });
    Raster::from_fn(pixels.height(), pixels.width(), |r, c| {
        (-radius..=radius)
            .zip(&kernel)
            .map(|(d, k)| k * horizontal.get_clamped(r as isize + d, c as isize))
            .sum::<f32>()
    })
}

/// Sobel derivatives scaled by 1/8.
///
/// Symmetric taps are summed pairwise first so that a quarter turn of the input yields
/// bit-identical magnitudes.
pub fn sobel_gradients(pixels: &Raster<f32>) -> (Raster<f32>, Raster<f32>) {
    let g = |r: usize, c: usize, dr: isize, dc: isize| {
        pixels.get_clamped(r as isize + dr, c as isize + dc)
    };
    let gx = Raster::from_fn(pixels.height(), pixels.width(), |r, c| {
        let right = (g(r, c, -1, 1) + g(r, c, 1, 1)) + 2.0 * g(r, c, 0, 1);
        let left = (g(r, c, -1, -1) + g(r, c, 1, -1)) + 2.0 * g(r, c, 0, -1);
        (right - left) / 8.0
    });
    let gy = Raster::from_fn(pixels.height(), pixels.width(), |r, c| {
        let down = (g(r, c, 1, -1) + g(r, c, 1, 1)) + 2.0 * g(r, c, 1, 0);
        let up = (g(r, c, -1, -1) + g(r, c, -1, 1)) + 2.0 * g(r, c, -1, 0);
        (down - up) / 8.0
    });
    (gx, gy)
}

fn magnitude(gx: &Raster<f32>, gy: &Raster<f32>) -> Raster<f32> {
    Raster::from_fn(gx.height(), gx.width(), |r, c| {
        let (x, y) = (gx.get(r, c), gy.get(r, c));
        (x * x + y * y).sqrt()
    })
}

/// Absolute response of the 4-neighbour Laplacian.
pub fn laplacian_magnitude(pixels: &Raster<f32>) -> Raster<f32> {
    Raster::from_fn(pixels.height(), pixels.width(), |r, c| {
        let (r, c) = (r as isize, c as isize);
        let vertical = pixels.get_clamped(r - 1, c) + pixels.get_clamped(r + 1, c);
        let horizontal = pixels.get_clamped(r, c - 1) + pixels.get_clamped(r, c + 1);
        ((vertical + horizontal) - 4.0 * pixels.get_clamped(r, c)).abs()
    })
}

/// Otsu's threshold over a 256-bin histogram of `[0, max]`.
///
/// Returns the mask of pixels strictly above the lower class and the threshold value.
pub fn otsu_binarize(response: &Raster<f32>) -> (Mask, f32) {
    let max = response.data().iter().copied().fold(0f32, f32::max);
    if max <= f32::EPSILON {
        return (response.map(|_| 0u8), 0.0);
    }
    let bin = |v: f32| ((v / max * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1);
    let mut hist = [0usize; OTSU_BINS];
    for &v in response.data() {
        hist[bin(v)] += 1;
    }
    let total = response.data().len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0f64, 0f64);
    let (mut best, mut best_k) = (-1f64, 0usize);
    for (k, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    let threshold = (best_k + 1) as f32 * max / OTSU_BINS as f32;
    (response.map(|v| u8::from(bin(v) > best_k)), threshold)
}

fn canny(pixels: &Raster<f32>, params: &EdgeParams) -> Mask {
    let blurred = gaussian_blur(pixels, params.sigma);
    let (gx, gy) = sobel_gradients(&blurred);
    let mag = magnitude(&gx, &gy);
    let (h, w) = mag.shape();

    // Non-maximum suppression along the gradient direction quantized to 45 degrees.
    let mut thin = Raster::filled(h, w, 0f32);
    for r in 0..h {
        for c in 0..w {
            let m = mag.get(r, c);
            if m <= 0.0 {
                continue;
            }
            let angle = gy.get(r, c).atan2(gx.get(r, c)).to_degrees();
            let angle = if angle < 0.0 { angle + 180.0 } else { angle };
            let (dr, dc): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (ri, ci) = (r as isize, c as isize);
            let a = mag.get_clamped(ri + dr, ci + dc);
            let b = mag.get_clamped(ri - dr, ci - dc);
            if m >= a && m >= b {
                thin.set(r, c, m);
            }
        }
    }

    // Hysteresis: weak pixels survive when 8-connected to a strong one.
    let mut out = Raster::filled(h, w, 0u8);
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if thin.get(r, c) >= params.high && thin.get(r, c) > 0.0 {
                out.set(r, c, 1);
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                let v = thin.get(nr, nc);
                if out.get(nr, nc) == 0 && v > 0.0 && v >= params.low {
                    out.set(nr, nc, 1);
                    stack.push((nr, nc));
                }
            }
        }
    }
    out
}

/// Preprocessing plus detection, with a call counter used to verify pipeline wiring.
#[derive(Debug, Default)]
pub struct EdgeModule {
    pub smoothing: SmoothingParams,
    pub edges: EdgeParams,
    calls: AtomicUsize,
}

impl EdgeModule {
    pub fn new(smoothing: SmoothingParams, edges: EdgeParams) -> Result<Self> {
        edges.validate()?;
        Ok(Self {
            smoothing,
            edges,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn extract(&self, image: &GrayImage) -> Result<EdgeMap> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        detect_edges(&preprocess(image, &self.smoothing)?, &self.edges)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Modality, WORKING_SIZE};

    const N: usize = WORKING_SIZE;

    fn image(f: impl FnMut(usize, usize) -> f32) -> GrayImage {
        GrayImage::new(Raster::from_fn(N, N, f), Modality::Ct).unwrap()
    }

    fn disk(radius: f32) -> GrayImage {
        image(|r, c| {
            let (dy, dx) = (r as f32 + 0.5 - 120.0, c as f32 + 0.5 - 120.0);
            if dx * dx + dy * dy <= radius * radius {
                0.8
            } else {
                0.2
            }
        })
    }

    fn params(detector: Detector) -> EdgeParams {
        EdgeParams {
            detector,
            ..EdgeParams::default()
        }
    }

    #[test]
    fn constant_image_survives_preprocessing_and_has_no_edges() {
        let img = image(|_, _| 0.5);
        let pre = preprocess(&img, &SmoothingParams::default()).unwrap();
        assert_eq!(pre, img);
        for d in Detector::ALL {
            assert_eq!(detect_edges(&pre, &params(d)).unwrap().count(), 0, "{d}");
        }
    }

    #[test]
    fn uniform_histogram_is_an_equalization_fixed_point() {
        // 57600 pixels over 256 levels: 225 pixels per level.
        let img = Raster::from_fn(N, N, |r, c| ((r * N + c) % 256) as f32 / 255.0);
        let eq = equalize_histogram(&img);
        for (a, b) in img.data().iter().zip(eq.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn monotone_remaps_are_cancelled_by_preprocessing() {
        let img = image(|r, c| {
            let (y, x) = (r as f32 / N as f32, c as f32 / N as f32);
            (0.5 + 0.3 * (7.0 * x).sin() * (5.0 * y).cos() + 0.1 * ((r * 31 + c * 17) % 13) as f32 / 13.0)
                .clamp(0.0, 1.0)
        });
        // Rank oracle: fraction of pixels at or below each value, rescaled to [0, 1].
        let data = img.pixels().data();
        let rank = |v: f32| data.iter().filter(|&&x| x <= v).count() as f32;
        let lo = rank(data.iter().copied().fold(f32::INFINITY, f32::min));
        let eq = equalize_histogram(img.pixels());
        for (&v, &e) in data.iter().zip(eq.data()).step_by(97) {
            assert!((e - (rank(v) - lo) / (data.len() as f32 - lo)).abs() < 1e-6);
        }
        let smooth = SmoothingParams::default();
        let base = preprocess(&img, &smooth).unwrap();
        for g in [0.5f32, 2.0] {
            let remapped = preprocess(&img.remap(|v| v.powf(g)), &smooth).unwrap();
            for (a, b) in base.pixels().data().iter().zip(remapped.pixels().data()) {
                assert!((a - b).abs() <= 1.0 / 256.0);
            }
        }
    }

    #[test]
    fn invalid_params_are_configuration_errors() {
        let img = image(|_, _| 0.5);
        let bad_sigma = EdgeParams {
            sigma: -1.0,
            ..EdgeParams::default()
        };
        assert!(matches!(detect_edges(&img, &bad_sigma), Err(Error::Config(_))));
        let swapped = EdgeParams {
            low: 0.3,
            high: 0.2,
            ..EdgeParams::default()
        };
        assert!(matches!(detect_edges(&img, &swapped), Err(Error::Config(_))));
    }

    #[test]
    fn vertical_step_is_marked_at_the_step_column() {
        let img = image(|_, c| if c < N / 2 { 0.0 } else { 1.0 });
        for d in [Detector::Sobel, Detector::Canny] {
            let edges = detect_edges(&img, &params(d)).unwrap();
            let px = edges.pixels();
            for r in 0..N {
                let cols: Vec<usize> = (0..N).filter(|&c| px.get(r, c) == 1).collect();
                assert!(!cols.is_empty(), "{d}: row {r} has no edge");
                assert!(
                    cols.iter().all(|&c| (N / 2 - 2..=N / 2 + 1).contains(&c)),
                    "{d}: row {r} marks columns {cols:?}"
                );
            }
        }
    }

    #[test]
    fn disk_edges_lie_near_the_circle() {
        let img = preprocess(&disk(50.0), &SmoothingParams::default()).unwrap();
        for d in Detector::ALL {
            let edges = detect_edges(&img, &params(d)).unwrap();
            assert!(edges.count() > 200, "{d}: only {} edge pixels", edges.count());
            let px = edges.pixels();
            for r in 0..N {
                for c in 0..N {
                    if px.get(r, c) == 1 {
                        let (dy, dx) = (r as f32 + 0.5 - 120.0, c as f32 + 0.5 - 120.0);
                        let dist = ((dx * dx + dy * dy).sqrt() - 50.0).abs();
                        assert!(dist <= 2.0, "{d}: pixel ({r},{c}) is {dist} px off the circle");
                    }
                }
            }
        }
    }

    #[test]
    fn sobel_and_laplacian_commute_with_quarter_turns() {
        let img = preprocess(
            &image(|r, c| {
                let x = c as f32 / N as f32;
                let y = r as f32 / N as f32;
                (0.5 + 0.3 * (9.0 * x).sin() * (5.0 * y + x).cos()).clamp(0.0, 1.0)
            }),
            &SmoothingParams::default(),
        )
        .unwrap();
        for d in [Detector::Sobel, Detector::Laplacian] {
            let a = detect_edges(&img.rot90(), &params(d)).unwrap();
            let b = detect_edges(&img, &params(d)).unwrap();
            assert_eq!(a.pixels(), &b.pixels().rot90(), "{d}");
        }
    }

    #[test]
    fn binarization_is_idempotent() {
        let img = preprocess(&disk(40.0), &SmoothingParams::default()).unwrap();
        for d in Detector::ALL {
            let e = detect_edges(&img, &params(d)).unwrap();
            let again = e.pixels().map(|v| u8::from(v as f32 > 0.5));
            assert_eq!(&again, e.pixels());
            assert!(e.pixels().data().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn edge_module_counts_calls() {
        let edm = EdgeModule::default();
        let img = disk(30.0);
        edm.extract(&img).unwrap();
        edm.extract(&img).unwrap();
        assert_eq!(edm.calls(), 2);
    }
}
