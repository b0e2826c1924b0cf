//! Small frozen convolutional segmenter for runs without a foundation checkpoint.

use candle_core::{DType, Device, Tensor};

use super::{check_inputs, BackendKind, Segmenter};
use crate::error::Result;
use crate::nn::{resize_bilinear, Conv2d, ParamStore};
use crate::raster::WORKING_SIZE;

const HIDDEN: usize = 8;
/// Bound on how far the network can move the output away from the prompt.
const RESIDUAL_SCALE: f64 = 2.0;

/// Four-layer encoder-decoder on `[r, g, b, prompt]` with an additive prompt skip.
///
/// Output logits are `prompt + 2 tanh(net(image, prompt))`. Weights come from a seeded
/// generator and are never trainable.
pub struct ReferenceSegmenter {
    store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
}

impl ReferenceSegmenter {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::frozen(seed, dtype, device);
        let enc1 = Conv2d::new(&mut store, "enc1", 4, HIDDEN, 3, true)?;
        let enc2 = Conv2d::new(&mut store, "enc2", HIDDEN, HIDDEN, 3, true)?;
        let dec1 = Conv2d::new(&mut store, "dec1", HIDDEN, HIDDEN, 3, true)?;
        let dec2 = Conv2d::new(&mut store, "dec2", HIDDEN, 1, 3, true)?;
        Ok(Self {
            store,
            enc1,
            enc2,
            dec1,
            dec2,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}

impl Segmenter for ReferenceSegmenter {
    fn kind(&self) -> BackendKind {
        BackendKind::Reference
    }

    fn input_resolution(&self) -> (usize, usize) {
        (WORKING_SIZE, WORKING_SIZE)
    }

    fn prompt_resolution(&self) -> (usize, usize) {
        (WORKING_SIZE, WORKING_SIZE)
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn segment_t(&self, images: &Tensor, prompts: &Tensor) -> Result<Tensor> {
        check_inputs(images, prompts, self.prompt_resolution())?;
        let images = images.to_dtype(self.dtype())?;
        let prompts = prompts.to_dtype(self.dtype())?;
        let (_, _, h, w) = images.dims4()?;
        let x = Tensor::cat(&[&images, &images, &images, &prompts], 1)?;
        let e1 = self.enc1.forward(&x)?.tanh()?;
        let e2 = self.enc2.forward(&resize_bilinear(&e1, h / 2, w / 2)?)?.tanh()?;
        let d1 = self.dec1.forward(&resize_bilinear(&e2, h, w)?)?.tanh()?;
        let residual = (self.dec2.forward(&d1)?.tanh()? * RESIDUAL_SCALE)?;
        Ok((prompts + residual)?)
    }

    fn checksum(&self) -> Result<String> {
        self.store.checksum()
    }
}
