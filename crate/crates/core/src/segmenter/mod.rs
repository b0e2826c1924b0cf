//! Frozen promptable mask predictors driven by a dense logit prompt.

mod foundation;
mod reference;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::raster::{GrayImage, Raster, WORKING_SIZE};

pub use foundation::{FoundationSegmenter, SamVariant};
pub use reference::ReferenceSegmenter;

/// Environment variable that overrides `backend.checkpoint_path`.
pub const CHECKPOINT_ENV: &str = "EDGEPROMPT_BACKEND_CHECKPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Foundation,
    Reference,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Foundation => "foundation",
            BackendKind::Reference => "reference",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// SAM-format safetensors file; required for the foundation backend.
    pub checkpoint_path: Option<PathBuf>,
    /// `vit_h`, `vit_l`, `vit_b` or `tiny`.
    pub variant: String,
    pub device: String,
    /// When set, prompts are squashed to `s * tanh(z / s)` before resampling.
    pub prompt_tanh_scale: Option<f64>,
    /// Seed of the reference backend weights.
    pub reference_seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Reference,
            checkpoint_path: None,
            variant: "vit_h".into(),
            device: "cpu".into(),
            prompt_tanh_scale: None,
            reference_seed: 7,
        }
    }
}

impl BackendConfig {
    pub fn device(&self) -> Result<Device> {
        match self.device.as_str() {
            "cpu" => Ok(Device::Cpu),
            other => Err(Error::Config(format!("unsupported backend.device `{other}` (cpu)"))),
        }
    }

    /// Checkpoint path after applying the environment override.
    pub fn resolved_checkpoint(&self) -> Option<PathBuf> {
        std::env::var_os(CHECKPOINT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.checkpoint_path.clone())
    }
}

/// A frozen mask predictor that accepts a dense prompt.
pub trait Segmenter: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Native image size `(height, width)`.
    fn input_resolution(&self) -> (usize, usize);

    /// Native dense-prompt size `(height, width)`.
    fn prompt_resolution(&self) -> (usize, usize);

    fn dtype(&self) -> DType;

    /// Gray `(N, 1, 240, 240)` images and `(N, 1, ph, pw)` prompts to `(N, 1, 240, 240)` mask logits.
    ///
    /// Differentiable with respect to the prompt; backend parameters never receive gradients.
    fn segment_t(&self, images: &Tensor, prompts: &Tensor) -> Result<Tensor>;

    /// SHA-256 over the backend parameters.
    fn checksum(&self) -> Result<String>;
}

pub fn load_backend(config: &BackendConfig, dtype: DType) -> Result<Box<dyn Segmenter>> {
    let device = config.device()?;
    Ok(match config.kind {
        BackendKind::Reference => Box::new(ReferenceSegmenter::new(config.reference_seed, dtype, &device)?),
        BackendKind::Foundation => {
            let path = config.resolved_checkpoint().ok_or_else(|| {
                Error::Backend(format!(
                    "foundation backend needs backend.checkpoint_path or {CHECKPOINT_ENV}"
                ))
            })?;
            let variant: SamVariant = config.variant.parse()?;
            Box::new(FoundationSegmenter::load(&path, variant, &device)?)
        }
    })
}

/// Resamples `(N, 1, 240, 240)` prompt logits to the backend's prompt resolution.
///
/// Values are only interpolated unless `tanh_scale` is given.
pub fn prepare_prompt(logits: &Tensor, backend: &dyn Segmenter, tanh_scale: Option<f64>) -> Result<Tensor> {
    let (ph, pw) = backend.prompt_resolution();
    let z = logits.to_dtype(backend.dtype())?;
    let z = match tanh_scale {
        Some(s) if s > 0.0 => ((z / s)?.tanh()? * s)?,
        Some(s) => return Err(Error::Config(format!("prompt_tanh_scale must be > 0, got {s}"))),
        None => z,
    };
    Ok(resize_bilinear(&z, ph, pw)?)
}

/// Mask logits at working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    logits: Raster<f32>,
}

impl MaskLogits {
    pub fn new(logits: Raster<f32>) -> Result<Self> {
        if logits.shape() != (WORKING_SIZE, WORKING_SIZE) || logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "mask logits must be finite and {WORKING_SIZE}x{WORKING_SIZE}"
            )));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Raster<f32> {
        &self.logits
    }

    /// Binary mask where the probability is at least one half.
    pub fn to_mask(&self) -> crate::raster::Mask {
        self.logits.map(|v| u8::from(v >= 0.0))
    }
}

/// `(N, 1, H, W)` tensor of gray images.
pub fn images_tensor(images: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (h, w) = first.pixels().shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.pixels().shape() != (h, w) {
            return Err(Error::Contract("images in a batch must share one size".into()));
        }
        data.extend_from_slice(img.pixels().data());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Reads every sample of a `(N, 1, H, W)` tensor into rasters.
pub fn tensor_to_rasters(t: &Tensor) -> Result<Vec<Raster<f32>>> {
    let (n, _, h, w) = t.dims4()?;
    let data: Vec<f32> = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
    data.chunks(h * w)
        .take(n)
        .map(|c| Raster::from_vec(h, w, c.to_vec()))
        .collect()
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s: f64 = t.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar()?;
    if !s.is_finite() {
        return Err(Error::Contract(format!("{what} has non-finite values")));
    }
    Ok(())
}

/// Eval-mode segmentation of one image with a prepared prompt.
pub fn segment(image: &GrayImage, prompt: &Tensor, backend: &dyn Segmenter) -> Result<MaskLogits> {
    let x = images_tensor(&[image], backend.dtype(), &prompt.device().clone())?;
    let out = backend.segment_t(&x, prompt)?;
    MaskLogits::new(tensor_to_rasters(&out)?.remove(0))
}

pub(crate) fn check_inputs(images: &Tensor, prompts: &Tensor, prompt_res: (usize, usize)) -> Result<usize> {
    let (n, c, h, w) = images.dims4()?;
    if c != 1 || (h, w) != (WORKING_SIZE, WORKING_SIZE) {
        return Err(Error::Contract(format!("images must be (N, 1, 240, 240), got {:?}", images.dims())));
    }
    let (pn, pc, ph, pw) = prompts.dims4()?;
    if pn != n || pc != 1 || (ph, pw) != prompt_res {
        return Err(Error::Contract(format!(
            "prompts must be ({n}, 1, {}, {}), got {:?}",
            prompt_res.0,
            prompt_res.1,
            prompts.dims()
        )));
    }
    ensure_finite(prompts, "prompt")?;
    Ok(n)
}
