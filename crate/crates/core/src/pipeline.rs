//! The proposed pipeline and its three baselines behind one interface.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::edm::EdgeModule;
use crate::error::{Error, Result};
use crate::prompt_net::PromptNet;
use crate::raster::{GrayImage, Raster};
use crate::segmenter::{images_tensor, prepare_prompt, tensor_to_rasters, MaskLogits, Segmenter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineKind {
    /// Edge map, prompt network, frozen segmenter.
    Edge2Prompt,
    /// Prompt network on the raw image; its logits are the prediction.
    ImUnet,
    /// Prompt network on the edge map; its logits are the prediction.
    EmUnet,
    /// Prompt network on the raw image, then the frozen segmenter.
    SUnet,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [
        PipelineKind::Edge2Prompt,
        PipelineKind::ImUnet,
        PipelineKind::EmUnet,
        PipelineKind::SUnet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineKind::Edge2Prompt => "edge2prompt",
            PipelineKind::ImUnet => "im-unet",
            PipelineKind::EmUnet => "em-unet",
            PipelineKind::SUnet => "s-unet",
        }
    }

    pub fn uses_edges(self) -> bool {
        matches!(self, PipelineKind::Edge2Prompt | PipelineKind::EmUnet)
    }

    pub fn uses_backend(self) -> bool {
        matches!(self, PipelineKind::Edge2Prompt | PipelineKind::SUnet)
    }
}

impl std::str::FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        PipelineKind::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown pipeline `{s}` (edge2prompt|im-unet|em-unet|s-unet)")))
    }
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outputs of one batched forward pass.
pub struct Forward {
    /// Prediction logits `(N, 1, 240, 240)` the loss and metrics use.
    pub logits: Tensor,
    /// Prompt-network output `(N, 1, 240, 240)`.
    pub prompt_logits: Tensor,
}

pub struct Pipeline {
    kind: PipelineKind,
    net: PromptNet,
    edges: Arc<EdgeModule>,
    backend: Option<Arc<dyn Segmenter>>,
    prompt_tanh_scale: Option<f64>,
}

impl Pipeline {
    pub fn new(
        kind: PipelineKind,
        net: PromptNet,
        edges: Arc<EdgeModule>,
        backend: Option<Arc<dyn Segmenter>>,
        prompt_tanh_scale: Option<f64>,
    ) -> Result<Self> {
        if kind.uses_backend() && backend.is_none() {
            return Err(Error::Backend(format!("pipeline {kind} needs a segmenter backend")));
        }
        Ok(Self {
            kind,
            net,
            edges,
            backend: if kind.uses_backend() { backend } else { None },
            prompt_tanh_scale,
        })
    }

    pub fn kind(&self) -> PipelineKind {
        self.kind
    }

    pub fn net(&self) -> &PromptNet {
        &self.net
    }

    pub fn edges(&self) -> &EdgeModule {
        &self.edges
    }

    pub fn backend(&self) -> Option<&dyn Segmenter> {
        self.backend.as_deref()
    }

    fn dtype(&self) -> DType {
        self.net.store().dtype()
    }

    /// What the prompt network sees for one slice: the edge map or the raw intensities.
    pub fn model_input(&self, image: &GrayImage) -> Result<Raster<f32>> {
        if self.kind.uses_edges() {
            Ok(self.edges.extract(image)?.pixels().map(f32::from))
        } else {
            Ok(image.pixels().clone())
        }
    }

    /// Runs the pipeline on precomputed model inputs and the matching images, both `(N, 1, H, W)`.
    pub fn forward_t(&self, inputs: &Tensor, images: &Tensor, train: bool) -> Result<Forward> {
        let prompt_logits = self.prompt_t(inputs, train)?;
        let logits = self.finish_t(&prompt_logits, images)?;
        Ok(Forward { logits, prompt_logits })
    }

    /// Prompt-network stage only.
    pub fn prompt_t(&self, inputs: &Tensor, train: bool) -> Result<Tensor> {
        self.net.forward_t(inputs, train)
    }

    /// Maps prompt logits to prediction logits: through the backend, or unchanged.
    pub fn finish_t(&self, prompt_logits: &Tensor, images: &Tensor) -> Result<Tensor> {
        match &self.backend {
            Some(backend) => {
                let prompt = prepare_prompt(prompt_logits, backend.as_ref(), self.prompt_tanh_scale)?;
                Ok(backend.segment_t(images, &prompt)?.to_dtype(self.dtype())?)
            }
            None => Ok(prompt_logits.clone()),
        }
    }

    /// Eval-mode prediction for a batch of slices.
    pub fn predict(&self, images: &[&GrayImage]) -> Result<Vec<MaskLogits>> {
        let device = self.net.store().device().clone();
        let inputs: Vec<Raster<f32>> = images.iter().map(|i| self.model_input(i)).collect::<Result<_>>()?;
        let (h, w) = inputs[0].shape();
        let flat: Vec<f32> = inputs.iter().flat_map(|r| r.data().iter().copied()).collect();
        let x = Tensor::from_vec(flat, (inputs.len(), 1, h, w), &device)?.to_dtype(self.dtype())?;
        let imgs = images_tensor(images, self.dtype(), &device)?;
        let out = self.forward_t(&x, &imgs, false)?;
        tensor_to_rasters(&out.logits)?.into_iter().map(MaskLogits::new).collect()
    }
}
