//! Volume ingestion from CHAOS-style directories, synthetic phantoms and the manifest.
//!
//! Supported per-volume layouts:
//!
//! * CHAOS CT: `<dir>/DICOM_anon/*.dcm` with `<dir>/Ground/*.png`
//! * CHAOS MR: `<dir>/T1DUAL/DICOM_anon/{InPhase,OutPhase}` with `<dir>/T1DUAL/Ground`,
//!   and `<dir>/T2SPIR/DICOM_anon` with `<dir>/T2SPIR/Ground`
//! * generic: `<dir>/images/*.{png,dcm}` with `<dir>/masks/*.png` and an optional
//!   `<dir>/modality.txt`
//!
//! Slices are ordered by DICOM instance number (file name for PNG), masks by file name.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, Mask, Modality, Raster, WORKING_SIZE};
use crate::volume::AffineTransform;

/// Liver label window in CHAOS MR annotations (nominal value 63).
pub const MR_LIVER_LABELS: std::ops::RangeInclusive<u8> = 55..=70;

/// Paired slices and liver masks of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub modality: Modality,
    pub slices: Vec<GrayImage>,
    pub masks: Vec<Mask>,
    /// Voxel-to-world transform of the resampled 240x240 grid.
    pub affine: AffineTransform,
    pub slice_spacing: f64,
}

impl VolumeRecord {
    pub fn new(
        volume_id: &str,
        modality: Modality,
        slices: Vec<GrayImage>,
        masks: Vec<Mask>,
        affine: AffineTransform,
    ) -> Result<Self> {
        if slices.len() != masks.len() {
            return Err(Error::Contract(format!(
                "volume {volume_id}: {} slices but {} masks",
                slices.len(),
                masks.len()
            )));
        }
        if slices.is_empty() {
            return Err(Error::Contract(format!("volume {volume_id} has no slices")));
        }
        for m in &masks {
            if m.shape() != (WORKING_SIZE, WORKING_SIZE) || m.data().iter().any(|&v| v > 1) {
                return Err(Error::Contract(format!(
                    "volume {volume_id}: masks must be binary {WORKING_SIZE}x{WORKING_SIZE}"
                )));
            }
        }
        Ok(Self {
            volume_id: volume_id.to_string(),
            modality,
            slice_spacing: affine.spacing()[2],
            slices,
            masks,
            affine,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Maps raw ground-truth label values to a binary liver mask.
pub fn liver_mask(labels: &Raster<u8>, modality: Modality) -> Mask {
    if modality.is_mr() {
        labels.map(|v| u8::from(MR_LIVER_LABELS.contains(&v)))
    } else {
        labels.map(|v| u8::from(v > 0))
    }
}

/// Min-max normalization over all slices jointly; a constant volume becomes all zeros.
pub fn normalize_volume(slices: &mut [Raster<f32>]) {
    let (lo, hi) = slices
        .iter()
        .flat_map(|s| s.data())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for s in slices {
        for v in s.data_mut() {
            *v = if range > 0.0 && range.is_finite() {
                ((*v - lo) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
}

fn resize_mask(mask: &Mask) -> Mask {
    if mask.shape() == (WORKING_SIZE, WORKING_SIZE) {
        return mask.clone();
    }
    mask.map(f32::from)
        .resize_bilinear(WORKING_SIZE, WORKING_SIZE)
        .map(|v| u8::from(v >= 0.5))
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.as_deref().is_some_and(|e| extensions.contains(&e)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// One decoded slice with whatever geometry the file carries.
struct RawSlice {
    pixels: Raster<f32>,
    instance: Option<i64>,
    /// Row and column spacing in mm.
    pixel_spacing: Option<[f64; 2]>,
    position: Option<[f64; 3]>,
    orientation: Option<[f64; 6]>,
    thickness: Option<f64>,
}

fn read_png_gray(path: &Path) -> Result<Raster<f32>> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    Raster::from_vec(
        h as usize,
        w as usize,
        luma.into_raw().into_iter().map(f32::from).collect(),
    )
}

fn read_png_labels(path: &Path) -> Result<Raster<u8>> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Raster::from_vec(h as usize, w as usize, luma.into_raw())
}

fn read_dicom(path: &Path) -> Result<RawSlice> {
    use dicom_object::open_file;
    use dicom_pixeldata::PixelDecoder;

    let obj = open_file(path).map_err(|e| Error::ingestion(path, e))?;
    let decoded = obj.decode_pixel_data().map_err(|e| Error::ingestion(path, e))?;
    let (rows, cols) = (decoded.rows() as usize, decoded.columns() as usize);
    let values: Vec<f32> = decoded.to_vec_frame(0).map_err(|e| Error::ingestion(path, e))?;
    let floats = |name: &str| -> Option<Vec<f64>> {
        obj.element_by_name(name).ok()?.to_multi_float64().ok()
    };
    Ok(RawSlice {
        pixels: Raster::from_vec(rows, cols, values)?,
        instance: obj
            .element_by_name("InstanceNumber")
            .ok()
            .and_then(|e| e.to_int::<i64>().ok()),
        pixel_spacing: floats("PixelSpacing").filter(|v| v.len() == 2).map(|v| [v[0], v[1]]),
        position: floats("ImagePositionPatient")
            .filter(|v| v.len() == 3)
            .map(|v| [v[0], v[1], v[2]]),
        orientation: floats("ImageOrientationPatient")
            .filter(|v| v.len() == 6)
            .map(|v| std::array::from_fn(|i| v[i])),
        thickness: floats("SpacingBetweenSlices")
            .or_else(|| floats("SliceThickness"))
            .and_then(|v| v.first().copied()),
    })
}

fn read_slice(path: &Path) -> Result<RawSlice> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    if ext.as_deref() == Some("dcm") {
        read_dicom(path)
    } else {
        Ok(RawSlice {
            pixels: read_png_gray(path)?,
            instance: None,
            pixel_spacing: None,
            position: None,
            orientation: None,
            thickness: None,
        })
    }
}

/// Image and mask directories of a volume for the requested modality.
pub fn volume_layout(dir: &Path, modality: Modality) -> Result<(PathBuf, PathBuf)> {
    if dir.join("images").is_dir() {
        return Ok((dir.join("images"), dir.join("masks")));
    }
    let (images, masks) = match modality {
        Modality::Ct | Modality::Unknown => (dir.join("DICOM_anon"), dir.join("Ground")),
        Modality::MrT1In => (dir.join("T1DUAL/DICOM_anon/InPhase"), dir.join("T1DUAL/Ground")),
        Modality::MrT1Oop => (dir.join("T1DUAL/DICOM_anon/OutPhase"), dir.join("T1DUAL/Ground")),
        Modality::MrT2Spir => (dir.join("T2SPIR/DICOM_anon"), dir.join("T2SPIR/Ground")),
    };
    if !images.is_dir() {
        return Err(Error::ingestion(dir, format!("no image directory at {}", images.display())));
    }
    Ok((images, masks))
}

/// Geometry of the resampled grid derived from the first slices' DICOM attributes.
fn resampled_affine(raw: &[RawSlice]) -> Result<AffineTransform> {
    let first = &raw[0];
    let (rows, cols) = first.pixels.shape();
    let [dy, dx] = first.pixel_spacing.unwrap_or([1.0, 1.0]);
    let (sx, sy) = (cols as f64 / WORKING_SIZE as f64, rows as f64 / WORKING_SIZE as f64);
    let [rx, ry, rz, cx, cy, cz] = first.orientation.unwrap_or([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let normal = [ry * cz - rz * cy, rz * cx - rx * cz, rx * cy - ry * cx];
    let dz = match (first.position, raw.get(1).and_then(|s| s.position)) {
        (Some(a), Some(b)) => {
            let d: f64 = (0..3).map(|i| (b[i] - a[i]) * normal[i]).sum();
            if d.abs() > 1e-6 {
                d.abs()
            } else {
                first.thickness.unwrap_or(1.0)
            }
        }
        _ => first.thickness.unwrap_or(1.0),
    };
    let origin = first.position.unwrap_or([0.0; 3]);
    // Centre of resampled pixel 0 sits at original continuous index 0.5 * scale - 0.5.
    let (ox, oy) = (0.5 * sx - 0.5, 0.5 * sy - 0.5);
    let col_step = [rx * dx * sx, ry * dx * sx, rz * dx * sx];
    let row_step = [cx * dy * sy, cy * dy * sy, cz * dy * sy];
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        m[i][0] = col_step[i];
        m[i][1] = row_step[i];
        m[i][2] = normal[i] * dz;
        m[i][3] = origin[i] + [rx, ry, rz][i] * dx * ox + [cx, cy, cz][i] * dy * oy;
    }
    m[3][3] = 1.0;
    AffineTransform::new(m)
}

/// Reads one volume, resamples to 240x240, normalizes intensities and binarizes masks.
pub fn ingest_volume(dir: &Path, modality: Modality, volume_id: &str) -> Result<VolumeRecord> {
    let (image_dir, mask_dir) = volume_layout(dir, modality)?;
    let image_files = sorted_files(&image_dir, &["dcm", "png"])?;
    let mask_files = sorted_files(&mask_dir, &["png"])?;
    if image_files.is_empty() {
        return Err(Error::ingestion(&image_dir, "no image slices"));
    }
    if image_files.len() != mask_files.len() {
        return Err(Error::ingestion(
            dir,
            format!("{} image slices but {} masks", image_files.len(), mask_files.len()),
        ));
    }
    let mut raw = image_files
        .iter()
        .map(|p| read_slice(p))
        .collect::<Result<Vec<_>>>()?;
    if raw.iter().all(|s| s.instance.is_some()) {
        raw.sort_by_key(|s| s.instance);
    }
    let affine = resampled_affine(&raw)?;
    let mut pixels: Vec<Raster<f32>> = raw
        .iter()
        .map(|s| s.pixels.resize_bilinear(WORKING_SIZE, WORKING_SIZE))
        .collect();
    normalize_volume(&mut pixels);
    let slices = pixels
        .into_iter()
        .map(|p| GrayImage::new(p, modality))
        .collect::<Result<Vec<_>>>()?;
    let masks = mask_files
        .iter()
        .map(|p| Ok(resize_mask(&liver_mask(&read_png_labels(p)?, modality))))
        .collect::<Result<Vec<_>>>()?;
    VolumeRecord::new(volume_id, modality, slices, masks, affine)
}

/// One line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_id: String,
    pub modality: Modality,
    pub path: PathBuf,
    pub n_slices: usize,
}

fn count_slices(dir: &Path, modality: Modality) -> Result<usize> {
    let (images, _) = volume_layout(dir, modality)?;
    Ok(sorted_files(&images, &["dcm", "png"])?.len())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Finds every volume under `root`.
///
/// CHAOS roots contain `CT/<patient>` and `MR/<patient>` directories; MR patients
/// contribute one volume per sequence listed in `mr_sequences`. Any other
/// sub-directory with `images/` is read as a generic volume.
pub fn scan_dataset(root: &Path, mr_sequences: &[Modality]) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let ct = root.join("CT");
    if ct.is_dir() {
        for dir in sorted_subdirs(&ct)? {
            out.push(ManifestEntry {
                volume_id: format!("ct_{}", dir_name(&dir)),
                modality: Modality::Ct,
                n_slices: count_slices(&dir, Modality::Ct)?,
                path: dir,
            });
        }
    }
    let mr = root.join("MR");
    if mr.is_dir() {
        for dir in sorted_subdirs(&mr)? {
            for &seq in mr_sequences {
                if volume_layout(&dir, seq).is_err() {
                    continue;
                }
                out.push(ManifestEntry {
                    volume_id: format!("{}_{}", seq.as_str(), dir_name(&dir)),
                    modality: seq,
                    n_slices: count_slices(&dir, seq)?,
                    path: dir.clone(),
                });
            }
        }
    }
    for dir in sorted_subdirs(root)? {
        if !dir.join("images").is_dir() {
            continue;
        }
        let modality = match std::fs::read_to_string(dir.join("modality.txt")) {
            Ok(s) => s.trim().parse()?,
            Err(_) => Modality::Unknown,
        };
        out.push(ManifestEntry {
            volume_id: dir_name(&dir),
            modality,
            n_slices: count_slices(&dir, modality)?,
            path: dir,
        });
    }
    Ok(out)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?)
}

pub fn ingest_manifest(entries: &[ManifestEntry]) -> Result<Vec<VolumeRecord>> {
    entries
        .iter()
        .map(|e| ingest_volume(&e.path, e.modality, &e.volume_id))
        .collect()
}

/// Parameters of the synthetic abdominal phantom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub n_ct: usize,
    pub n_mr: usize,
    pub slices_per_volume: usize,
    /// Slices at each end of the volume without liver.
    pub empty_end_slices: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_ct: 20,
            n_mr: 20,
            slices_per_volume: 6,
            empty_end_slices: 0,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

/// Region intensities of one modality.
struct Contrast {
    body: f32,
    liver: f32,
    vessel: f32,
    kidney: f32,
    spleen: f32,
    spine: f32,
}

fn contrast(modality: Modality) -> Contrast {
    match modality {
        Modality::Ct | Modality::Unknown => Contrast {
            body: 0.45,
            liver: 0.62,
            vessel: 0.82,
            kidney: 0.7,
            spleen: 0.56,
            spine: 0.95,
        },
        Modality::MrT1Oop => Contrast {
            body: 0.7,
            liver: 0.4,
            vessel: 0.15,
            kidney: 0.28,
            spleen: 0.3,
            spine: 0.22,
        },
        Modality::MrT1In => Contrast {
            body: 0.75,
            liver: 0.48,
            vessel: 0.2,
            kidney: 0.35,
            spleen: 0.36,
            spine: 0.25,
        },
        Modality::MrT2Spir => Contrast {
            body: 0.3,
            liver: 0.25,
            vessel: 0.85,
            kidney: 0.6,
            spleen: 0.65,
            spine: 0.4,
        },
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        self.level(y, x) <= 1.0
    }

    fn level(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn scaled(&self, f: f64) -> Self {
        Self {
            ry: self.ry * f,
            rx: self.rx * f,
            ..*self
        }
    }
}

/// Body, liver with vessel texture, kidney, spleen and spine on an ellipsoidal liver.
///
/// Intensities follow a modality-specific contrast table with a smooth multiplicative
/// bias field and Gaussian noise inside the body; air stays at zero.
pub fn phantom_volume(volume_id: &str, modality: Modality, cfg: &PhantomConfig, seed: u64) -> Result<VolumeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |s: f64| rng.random_range(-s..=s);
    let body = Ellipse {
        cy: 125.0 + jitter(4.0),
        cx: 120.0 + jitter(4.0),
        ry: 88.0 + jitter(4.0),
        rx: 108.0 + jitter(4.0),
        angle: 0.0,
    };
    let liver = Ellipse {
        cy: 108.0 + jitter(6.0),
        cx: 92.0 + jitter(6.0),
        ry: 46.0 + jitter(4.0),
        rx: 58.0 + jitter(5.0),
        angle: jitter(0.3),
    };
    let kidney = Ellipse {
        cy: 160.0 + jitter(4.0),
        cx: 172.0 + jitter(4.0),
        ry: 24.0,
        rx: 16.0,
        angle: 0.3,
    };
    let spleen = Ellipse {
        cy: 92.0 + jitter(4.0),
        cx: 178.0 + jitter(4.0),
        ry: 30.0,
        rx: 20.0,
        angle: -0.4,
    };
    let spine = Ellipse {
        cy: 190.0,
        cx: 120.0 + jitter(3.0),
        ry: 13.0,
        rx: 13.0,
        angle: 0.0,
    };
    let phase = jitter(3.0);
    let mut vessels = Vec::new();
    let spacing = 15.0;
    let mut y = liver.cy - liver.ry;
    while y <= liver.cy + liver.ry {
        let mut x = liver.cx - liver.rx;
        while x <= liver.cx + liver.rx {
            let (vy, vx) = (y + jitter(3.0) + phase, x + jitter(3.0));
            vessels.push((vy, vx, 3.0 + jitter(0.8)));
            x += spacing;
        }
        y += spacing;
    }
    let bias = (jitter(0.08), jitter(0.08));
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.slices_per_volume.max(1);
    let c = contrast(modality);
    let (mut slices, mut masks) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let covered = n.saturating_sub(2 * cfg.empty_end_slices).max(1);
    for k in 0..n {
        let in_liver = k >= cfg.empty_end_slices && k < cfg.empty_end_slices + covered;
        let t = if covered > 1 {
            (k as f64 - cfg.empty_end_slices as f64) / (covered - 1) as f64 * 1.4 - 0.7
        } else {
            0.0
        };
        let liver_k = liver.scaled((1.0 - t * t).max(0.0).sqrt());
        let mut mask = Raster::filled(WORKING_SIZE, WORKING_SIZE, 0u8);
        let mut img = Raster::filled(WORKING_SIZE, WORKING_SIZE, 0f32);
        for r in 0..WORKING_SIZE {
            for col in 0..WORKING_SIZE {
                let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
                if !body.contains(y, x) {
                    continue;
                }
                let mut v = c.body;
                if kidney.contains(y, x) {
                    v = c.kidney;
                } else if spleen.contains(y, x) {
                    v = c.spleen;
                } else if spine.contains(y, x) {
                    v = c.spine;
                }
                if in_liver && liver_k.contains(y, x) {
                    mask.set(r, col, 1);
                    v = c.liver;
                    let in_vessel = vessels.iter().any(|&(vy, vx, vr)| {
                        (y - vy).powi(2) + (x - vx).powi(2) <= vr * vr && liver_k.level(y, x) < 0.85
                    });
                    if in_vessel {
                        v = c.vessel;
                    }
                }
                let field = 1.0 + bias.0 * (x / WORKING_SIZE as f64 - 0.5) + bias.1 * (y / WORKING_SIZE as f64 - 0.5);
                let value = v * field as f32 + noise.sample(&mut rng);
                img.set(r, col, value.clamp(0.0, 1.0));
            }
        }
        slices.push(img);
        masks.push(mask);
    }
    normalize_volume(&mut slices);
    let slices = slices
        .into_iter()
        .map(|p| GrayImage::new(p, modality))
        .collect::<Result<Vec<_>>>()?;
    let dz = if modality.is_mr() { 8.0 } else { 5.0 };
    let affine = AffineTransform::from_spacing_origin([1.5, 1.5, dz], [-180.0, -180.0, 0.0])?;
    VolumeRecord::new(volume_id, modality, slices, masks, affine)
}

/// `n_ct` CT-like and `n_mr` MR-like (T1 out-of-phase) phantom volumes.
pub fn phantom_inventory(cfg: &PhantomConfig) -> Result<Vec<VolumeRecord>> {
    let mut out = Vec::with_capacity(cfg.n_ct + cfg.n_mr);
    for i in 0..cfg.n_ct {
        out.push(phantom_volume(&format!("ct_{i:02}"), Modality::Ct, cfg, cfg.seed.wrapping_mul(1000) + i as u64)?);
    }
    for i in 0..cfg.n_mr {
        let seed = cfg.seed.wrapping_mul(1000) + 500 + i as u64;
        out.push(phantom_volume(&format!("mr_{i:02}"), Modality::MrT1Oop, cfg, seed)?);
    }
    Ok(out)
}

/// Writes volumes in the generic layout; images as 16-bit PNG, masks with CHAOS label values.
pub fn write_volume_pngs(record: &VolumeRecord, dir: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (dir.join("images"), dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(dir.join("modality.txt"), record.modality.as_str()).map_err(|e| Error::io(dir, e))?;
    let label = if record.modality.is_mr() { 63 } else { 255 };
    let side = WORKING_SIZE as u32;
    for (k, (s, m)) in record.slices.iter().zip(&record.masks).enumerate() {
        let px: Vec<u16> = s.pixels().data().iter().map(|&v| (v * 65535.0).round() as u16).collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(side, side, px).expect("sized buffer");
        let p = img_dir.join(format!("slice_{k:04}.png"));
        img.save(&p).map_err(|e| Error::ingestion(&p, e))?;
        let mk: Vec<u8> = m.data().iter().map(|&v| v * label).collect();
        let mimg = image::GrayImage::from_raw(side, side, mk).expect("sized buffer");
        let p = mask_dir.join(format!("mask_{k:04}.png"));
        mimg.save(&p).map_err(|e| Error::ingestion(&p, e))?;
    }
    Ok(())
}
