//! Adapter for Segment-Anything-format checkpoints.
//!
//! The image encoder and prompt encoder come from `candle-transformers`. The mask decoder
//! is re-implemented here with differentiable softmax and layer norm so that gradients
//! reach the dense prompt; parameter names match the upstream checkpoint layout.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, IndexOp, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use candle_transformers::models::segment_anything::{
    image_encoder::ImageEncoderViT, prompt_encoder::PromptEncoder, tiny_vit::tiny_vit_5m, LayerNorm2d,
};
use sha2::{Digest, Sha256};

use super::{check_inputs, BackendKind, Segmenter};
use crate::error::{Error, Result};
use crate::nn::{layer_norm_last, resize_bilinear, softmax_last};
use crate::raster::WORKING_SIZE;

const IMAGE_SIZE: usize = 1024;
const PATCH: usize = 16;
const EMBED: usize = 256;
const MASK_SIZE: usize = 256;
const NUM_MULTIMASK: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamVariant {
    VitH,
    VitL,
    VitB,
    Tiny,
}

impl std::str::FromStr for SamVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_h" => Ok(Self::VitH),
            "vit_l" => Ok(Self::VitL),
            "vit_b" => Ok(Self::VitB),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!(
                "unknown backend.variant `{other}` (vit_h|vit_l|vit_b|tiny)"
            ))),
        }
    }
}

enum Encoder {
    Vit(Box<ImageEncoderViT>),
    Tiny(Box<candle_transformers::models::segment_anything::tiny_vit::TinyViT>),
}

impl Encoder {
    fn new(variant: SamVariant, vb: VarBuilder) -> candle_core::Result<Self> {
        let vit = |dim, depth, heads, global: &[usize]| {
            ImageEncoderViT::new(IMAGE_SIZE, PATCH, 3, dim, depth, heads, EMBED, true, true, true, 14, global, vb.clone())
                .map(|e| Encoder::Vit(Box::new(e)))
        };
        match variant {
            SamVariant::VitH => vit(1280, 32, 16, &[7, 15, 23, 31]),
            SamVariant::VitL => vit(1024, 24, 16, &[5, 11, 17, 23]),
            SamVariant::VitB => vit(768, 12, 12, &[2, 5, 8, 11]),
            SamVariant::Tiny => Ok(Encoder::Tiny(Box::new(tiny_vit_5m(vb)?))),
        }
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Encoder::Vit(e) => e.forward(x),
            Encoder::Tiny(e) => e.forward(x),
        }
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(dim: usize, heads: usize, downsample: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: candle_nn::linear(dim, inner, vb.pp("q_proj"))?,
            k: candle_nn::linear(dim, inner, vb.pp("k_proj"))?,
            v: candle_nn::linear(dim, inner, vb.pp("v_proj"))?,
            out: candle_nn::linear(inner, dim, vb.pp("out_proj"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let d = q.dim(3)? as f64;
        let attn = softmax_last(&(q.matmul(&k.t()?.contiguous()?)? / d.sqrt())?)?;
        let out = attn.matmul(&v)?;
        let (b, h, n, c) = out.dims4()?;
        Ok(self.out.forward(&out.transpose(1, 2)?.reshape((b, n, h * c))?)?)
    }
}

struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get(dim, "weight")?,
            bias: vb.get(dim, "bias")?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm_last(x, &self.weight, &self.bias, 1e-5)
    }
}

struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(dims: &[usize], vb: VarBuilder) -> candle_core::Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| candle_nn::linear(w[0], w[1], vb.pp(format!("layers.{i}"))))
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

struct Block {
    self_attn: Attention,
    norm1: Norm,
    cross_t2i: Attention,
    norm2: Norm,
    lin1: Linear,
    lin2: Linear,
    norm3: Norm,
    norm4: Norm,
    cross_i2t: Attention,
    skip_first_pe: bool,
}

impl Block {
    fn new(skip_first_pe: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            self_attn: Attention::new(EMBED, 8, 1, vb.pp("self_attn"))?,
            norm1: Norm::new(EMBED, vb.pp("norm1"))?,
            cross_t2i: Attention::new(EMBED, 8, 2, vb.pp("cross_attn_token_to_image"))?,
            norm2: Norm::new(EMBED, vb.pp("norm2"))?,
            lin1: candle_nn::linear(EMBED, 2048, vb.pp("mlp.lin1"))?,
            lin2: candle_nn::linear(2048, EMBED, vb.pp("mlp.lin2"))?,
            norm3: Norm::new(EMBED, vb.pp("norm3"))?,
            norm4: Norm::new(EMBED, vb.pp("norm4"))?,
            cross_i2t: Attention::new(EMBED, 8, 2, vb.pp("cross_attn_image_to_token"))?,
            skip_first_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;
        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = self.norm2.forward(&(&queries + self.cross_t2i.forward(&q, &k, keys)?)?)?;
        let mlp = self.lin2.forward(&self.lin1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(queries + mlp)?)?;
        let q = (&queries + query_pe)?;
        let keys = (keys + self.cross_i2t.forward(&k, &q, &queries)?)?;
        Ok((queries, self.norm4.forward(&keys)?))
    }
}

struct MaskDecoder {
    iou_token: Tensor,
    mask_tokens: Tensor,
    iou_head: Mlp,
    up1: candle_nn::ConvTranspose2d,
    up_norm: LayerNorm2d,
    up2: candle_nn::ConvTranspose2d,
    hyper: Vec<Mlp>,
    blocks: Vec<Block>,
    final_attn: Attention,
    final_norm: Norm,
}

impl MaskDecoder {
    fn new(vb: VarBuilder) -> candle_core::Result<Self> {
        let tokens = NUM_MULTIMASK + 1;
        let cfg = candle_nn::ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let t = vb.pp("transformer");
        Ok(Self {
            iou_token: vb.get((1, EMBED), "iou_token.weight")?,
            mask_tokens: vb.get((tokens, EMBED), "mask_tokens.weight")?,
            iou_head: Mlp::new(&[EMBED, 256, 256, tokens], vb.pp("iou_prediction_head"))?,
            up1: candle_nn::conv_transpose2d(EMBED, EMBED / 4, 2, cfg, vb.pp("output_upscaling.0"))?,
            up_norm: LayerNorm2d::new(EMBED / 4, 1e-6, vb.pp("output_upscaling.1"))?,
            up2: candle_nn::conv_transpose2d(EMBED / 4, EMBED / 8, 2, cfg, vb.pp("output_upscaling.3"))?,
            hyper: (0..tokens)
                .map(|i| Mlp::new(&[EMBED, EMBED, EMBED, EMBED / 8], vb.pp(format!("output_hypernetworks_mlps.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            blocks: (0..2)
                .map(|i| Block::new(i == 0, t.pp(format!("layers.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            final_attn: Attention::new(EMBED, 8, 2, t.pp("final_attn_token_to_image"))?,
            final_norm: Norm::new(EMBED, t.pp("norm_final_attn"))?,
        })
    }

    /// Mask logits `(1, 4, 256, 256)` and predicted quality `(1, 4)` for one image.
    fn forward(&self, image_emb: &Tensor, image_pe: &Tensor, dense: &Tensor) -> Result<(Tensor, Tensor)> {
        let tokens = Tensor::cat(&[&self.iou_token, &self.mask_tokens], 0)?.unsqueeze(0)?;
        let src = image_emb.broadcast_add(dense)?;
        let (b, c, h, w) = src.dims4()?;
        let keys_pe = image_pe.flatten_from(2)?.permute((0, 2, 1))?;
        let mut keys = src.flatten_from(2)?.permute((0, 2, 1))?.contiguous()?;
        let mut queries = tokens.clone();
        for block in &self.blocks {
            (queries, keys) = block.forward(&queries, &keys, &tokens, &keys_pe)?;
        }
        let q = (&queries + &tokens)?;
        let k = keys.broadcast_add(&keys_pe)?;
        let queries = self.final_norm.forward(&(&queries + self.final_attn.forward(&q, &k, &keys)?)?)?;

        let src = keys.transpose(1, 2)?.reshape((b, c, h, w))?;
        let up = self.up1.forward(&src)?.apply(&self.up_norm)?.gelu()?;
        let up = self.up2.forward(&up)?.gelu()?;
        let hyper = self
            .hyper
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(&queries.i((.., 1 + i))?))
            .collect::<Result<Vec<_>>>()?;
        let hyper = Tensor::stack(&hyper, 1)?;
        let (b, c, h, w) = up.dims4()?;
        let masks = hyper.matmul(&up.reshape((b, c, h * w))?)?.reshape((b, (), h, w))?;
        let iou = self.iou_head.forward(&queries.i((.., 0))?)?;
        Ok((masks, iou))
    }
}

/// Frozen SAM-format model conditioned only through the dense mask prompt.
pub struct FoundationSegmenter {
    encoder: Encoder,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    pixel_mean: Tensor,
    pixel_std: Tensor,
    params: Vec<(String, Tensor)>,
    cache: Mutex<HashMap<[u8; 32], Tensor>>,
    device: Device,
}

impl FoundationSegmenter {
    pub fn load(path: &Path, variant: SamVariant, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Backend(format!(
                "foundation checkpoint not found at {} (download a SAM-format safetensors file)",
                path.display()
            )));
        }
        let tensors = candle_core::safetensors::load(path, device)
            .map_err(|e| Error::Backend(format!("reading {}: {e}", path.display())))?;
        Self::from_tensors(tensors, variant, device)
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, variant: SamVariant, device: &Device) -> Result<Self> {
        let tensors: HashMap<String, Tensor> = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?.detach())))
            .collect::<Result<_>>()?;
        let mut params: Vec<(String, Tensor)> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        let vb = VarBuilder::from_tensors(tensors, DType::F32, device);
        let wrap = |e: candle_core::Error| Error::Backend(format!("checkpoint does not match variant {variant:?}: {e}"));
        let side = IMAGE_SIZE / PATCH;
        Ok(Self {
            encoder: Encoder::new(variant, vb.pp("image_encoder")).map_err(wrap)?,
            prompt_encoder: PromptEncoder::new(EMBED, (side, side), (IMAGE_SIZE, IMAGE_SIZE), 16, vb.pp("prompt_encoder"))
                .map_err(wrap)?,
            decoder: MaskDecoder::new(vb.pp("mask_decoder")).map_err(wrap)?,
            pixel_mean: Tensor::new(&[123.675f32, 116.28, 103.53], device)?.reshape((1, 3, 1, 1))?,
            pixel_std: Tensor::new(&[58.395f32, 57.12, 57.375], device)?.reshape((1, 3, 1, 1))?,
            params,
            cache: Mutex::new(HashMap::new()),
            device: device.clone(),
        })
    }

    /// Image embedding `(1, 256, 64, 64)`, computed once per distinct image.
    fn embedding(&self, image: &Tensor) -> Result<Tensor> {
        let pixels: Vec<f32> = image.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        let mut h = Sha256::new();
        for v in &pixels {
            h.update(v.to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        if let Some(e) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(e.clone());
        }
        let gray = image.detach().to_dtype(DType::F32)?.reshape((1, 1, WORKING_SIZE, WORKING_SIZE))?;
        let rgb = (Tensor::cat(&[&gray, &gray, &gray], 1)? * 255.0)?;
        let x = resize_bilinear(&rgb, IMAGE_SIZE, IMAGE_SIZE)?
            .broadcast_sub(&self.pixel_mean)?
            .broadcast_div(&self.pixel_std)?;
        let emb = self.encoder.forward(&x)?.detach();
        self.cache.lock().expect("cache lock").insert(key, emb.clone());
        Ok(emb)
    }
}

impl Segmenter for FoundationSegmenter {
    fn kind(&self) -> BackendKind {
        BackendKind::Foundation
    }

    fn input_resolution(&self) -> (usize, usize) {
        (IMAGE_SIZE, IMAGE_SIZE)
    }

    fn prompt_resolution(&self) -> (usize, usize) {
        (MASK_SIZE, MASK_SIZE)
    }

    fn dtype(&self) -> DType {
        DType::F32
    }

    fn segment_t(&self, images: &Tensor, prompts: &Tensor) -> Result<Tensor> {
        let n = check_inputs(images, prompts, self.prompt_resolution())?;
        let prompts = prompts.to_dtype(DType::F32)?.to_device(&self.device)?;
        let image_pe = self.prompt_encoder.get_dense_pe()?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let emb = self.embedding(&images.get(i)?)?;
            let (_, dense) = self.prompt_encoder.forward(None, None, Some(&prompts.narrow(0, i, 1)?))?;
            let (masks, iou) = self.decoder.forward(&emb, &image_pe, &dense)?;
            let quality: Vec<f32> = iou.i((0, 1..))?.to_vec1()?;
            let best = quality
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j + 1)
                .expect("three candidate masks");
            out.push(resize_bilinear(&masks.narrow(1, best, 1)?, WORKING_SIZE, WORKING_SIZE)?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
