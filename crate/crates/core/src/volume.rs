//! Stacking segmented slices into voxel volumes with a voxel-to-world affine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Overlap;
use crate::raster::{Mask, Raster};

const AFFINE_TOL: f64 = 1e-9;

/// Homogeneous 4x4 map from voxel indices `(column, row, slice)` to world millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: [[f64; 4]; 4],
}

impl AffineTransform {
    pub fn new(matrix: [[f64; 4]; 4]) -> Result<Self> {
        if matrix[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Contract(format!(
                "affine last row must be (0,0,0,1), got {:?}",
                matrix[3]
            )));
        }
        let a = Self { matrix };
        let det = a.linear_determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::Contract(format!("affine is singular (det {det})")));
        }
        Ok(a)
    }

    pub fn identity() -> Self {
        Self::from_spacing_origin([1.0; 3], [0.0; 3]).expect("identity is invertible")
    }

    /// Axis-aligned scaling by `spacing` followed by a translation to `origin`.
    pub fn from_spacing_origin(spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][i] = spacing[i];
            m[i][3] = origin[i];
        }
        m[3][3] = 1.0;
        Self::new(m)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.matrix
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.matrix[0][3], self.matrix[1][3], self.matrix[2][3]]
    }

    /// Length of each voxel axis in world units.
    pub fn spacing(&self) -> [f64; 3] {
        let m = &self.matrix;
        let col = |j: usize| (m[0][j] * m[0][j] + m[1][j] * m[1][j] + m[2][j] * m[2][j]).sqrt();
        [col(0), col(1), col(2)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.linear_determinant().abs()
    }

    fn linear_determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + m[i][3])
    }

    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        let det = self.linear_determinant();
        // Inverse of the linear part via the adjugate.
        let inv = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let d = [w[0] - m[0][3], w[1] - m[1][3], w[2] - m[2][3]];
        std::array::from_fn(|i| (inv[i][0] * d[0] + inv[i][1] * d[1] + inv[i][2] * d[2]) / det)
    }

    /// Same transform with the slice axis rescaled by `factor`.
    fn with_slice_axis_scaled(&self, factor: f64) -> Result<Self> {
        let mut m = self.matrix;
        for row in m.iter_mut().take(3) {
            row[2] *= factor;
        }
        Self::new(m)
    }

    fn approx_eq(&self, other: &Self) -> bool {
        self.matrix
            .iter()
            .flatten()
            .zip(other.matrix.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= AFFINE_TOL)
    }
}

/// Ordered binary slices plus their world placement.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeStack {
    pub volume_id: String,
    voxels: Vec<Mask>,
    affine: AffineTransform,
}

impl VolumeStack {
    pub fn voxels(&self) -> &[Mask] {
        &self.voxels
    }

    pub fn affine(&self) -> &AffineTransform {
        &self.affine
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.len()
    }

    /// `(slices, rows, columns)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.voxels[0].shape();
        (self.voxels.len(), h, w)
    }

    pub fn foreground_voxels(&self) -> usize {
        self.voxels.iter().map(crate::raster::count_ones).sum()
    }

    /// Foreground volume in cubic millimetres.
    pub fn foreground_volume_mm3(&self) -> f64 {
        self.foreground_voxels() as f64 * self.affine.voxel_volume()
    }
}

/// Stacks slices in order without resampling.
pub fn stack(
    volume_id: &str,
    masks: &[Mask],
    spacing: [f64; 3],
    origin: [f64; 3],
) -> Result<VolumeStack> {
    stack_with_affine(volume_id, masks, AffineTransform::from_spacing_origin(spacing, origin)?)
}

pub fn stack_with_affine(
    volume_id: &str,
    masks: &[Mask],
    affine: AffineTransform,
) -> Result<VolumeStack> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Contract("cannot stack zero slices".into()))?;
    if let Some((k, m)) = masks.iter().enumerate().find(|(_, m)| m.shape() != first.shape()) {
        return Err(Error::Contract(format!(
            "slice {k} is {:?}, expected {:?}",
            m.shape(),
            first.shape()
        )));
    }
    if masks.iter().flat_map(|m| m.data()).any(|&v| v > 1) {
        return Err(Error::Contract("stacked masks must be binary".into()));
    }
    Ok(VolumeStack {
        volume_id: volume_id.to_string(),
        voxels: masks.to_vec(),
        affine,
    })
}

/// Linear interpolation along the slice axis to a finer slice spacing, re-binarized at 0.5.
///
/// The first slice stays in place and new slices are laid out every `target_spacing_z`
/// up to the last original slice, so the world extent shrinks by less than one new voxel.
/// A target that is not finer than the current spacing returns the stack unchanged.
pub fn densify(stack: &VolumeStack, target_spacing_z: f64) -> Result<VolumeStack> {
    if !(target_spacing_z.is_finite() && target_spacing_z > 0.0) {
        return Err(Error::Config(format!(
            "target slice spacing must be > 0, got {target_spacing_z}"
        )));
    }
    let dz = stack.affine.spacing()[2];
    if target_spacing_z >= dz {
        log::warn!(
            "densify: target spacing {target_spacing_z} is not finer than {dz}; leaving {} unchanged",
            stack.volume_id
        );
        return Ok(stack.clone());
    }
    let n = stack.voxels.len();
    let ratio = target_spacing_z / dz;
    let extent = (n - 1) as f64;
    let m = (extent / ratio + 1e-9).floor() as usize + 1;
    let (h, w) = stack.voxels[0].shape();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let z = (j as f64 * ratio).min(extent);
        let k0 = z.floor() as usize;
        let k1 = (k0 + 1).min(n - 1);
        let t = z - k0 as f64;
        let (a, b) = (&stack.voxels[k0], &stack.voxels[k1]);
        out.push(Raster::from_fn(h, w, |r, c| {
            let v = (1.0 - t) * f64::from(a.get(r, c)) + t * f64::from(b.get(r, c));
            u8::from(v >= 0.5)
        }));
    }
    Ok(VolumeStack {
        volume_id: stack.volume_id.clone(),
        voxels: out,
        affine: stack.affine.with_slice_axis_scaled(ratio)?,
    })
}

/// Volumetric dice over all voxels; both stacks must share grid and affine.
pub fn dice3d(pred: &VolumeStack, truth: &VolumeStack) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Contract(format!(
            "voxel grids differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if !pred.affine.approx_eq(&truth.affine) {
        return Err(Error::Contract("affines differ; resample explicitly first".into()));
    }
    let mut total = Overlap::default();
    for (p, t) in pred.voxels.iter().zip(&truth.voxels) {
        let o = Overlap::count(p, t)?;
        total.intersection += o.intersection;
        total.predicted += o.predicted;
        total.truth += o.truth;
    }
    Ok(total.dice_iou().0)
}

/// Writes a single-file NIfTI-1 volume of unsigned bytes.
///
/// Voxel `(i, j, k)` is column `i`, row `j` of slice `k`. The affine is stored in the
/// sform rows; axis-aligned affines with positive spacing are also stored as a qform.
pub fn write_nifti(stack: &VolumeStack, path: &Path) -> Result<()> {
    use nifti::{NiftiHeader, NiftiType};

    let (k, h, w) = stack.shape();
    let data = ndarray::Array3::from_shape_fn((w, h, k), |(x, y, z)| stack.voxels[z].get(y, x));
    let m = stack.affine.matrix();
    let spacing = stack.affine.spacing();
    let row = |i: usize| [m[i][0] as f32, m[i][1] as f32, m[i][2] as f32, m[i][3] as f32];
    let axis_aligned = (0..3).all(|i| (0..3).all(|j| i == j || m[i][j] == 0.0))
        && (0..3).all(|i| m[i][i] > 0.0);
    let mut header = NiftiHeader {
        pixdim: [
            1.0,
            spacing[0] as f32,
            spacing[1] as f32,
            spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ],
        // NIFTI_UNITS_MM
        xyzt_units: 2,
        // NIFTI_XFORM_SCANNER_ANAT
        sform_code: 1,
        srow_x: row(0),
        srow_y: row(1),
        srow_z: row(2),
        ..NiftiHeader::default()
    };
    if axis_aligned {
        header.qform_code = 1;
        header.quatern_b = 0.0;
        header.quatern_c = 0.0;
        header.quatern_d = 0.0;
        header.quatern_x = m[0][3] as f32;
        header.quatern_y = m[1][3] as f32;
        header.quatern_z = m[2][3] as f32;
    }
    let mut descrip = format!("segmentation {}", stack.volume_id).into_bytes();
    descrip.resize(80, 0);
    header.descrip = descrip;
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti_with_type(&data, NiftiType::Uint8)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Reads a byte volume written by [`write_nifti`] back into a stack.
pub fn read_nifti(path: &Path, volume_id: &str) -> Result<VolumeStack> {
    use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

    let err = |e: nifti::NiftiError| Error::io(path, std::io::Error::other(e));
    let obj = ReaderOptions::new().read_file(path).map_err(err)?;
    let hdr = obj.header().clone();
    let vol = obj.into_volume().into_ndarray::<u8>().map_err(err)?;
    let shape = vol.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ingestion(path, format!("expected 3 dimensions, got {shape:?}")));
    }
    let (w, h, k) = (shape[0], shape[1], shape[2]);
    let voxels: Vec<Mask> = (0..k)
        .map(|z| Raster::from_fn(h, w, |y, x| vol[[x, y, z]]))
        .collect();
    let r = |s: [f32; 4]| s.map(f64::from);
    let affine = AffineTransform::new([
        r(hdr.srow_x),
        r(hdr.srow_y),
        r(hdr.srow_z),
        [0.0, 0.0, 0.0, 1.0],
    ])?;
    stack_with_affine(volume_id, &voxels, affine)
}
