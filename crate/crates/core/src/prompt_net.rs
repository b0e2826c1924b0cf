//! U-Net that turns an edge map into a dense logit prompt.
//!
//! Encoder stages are double 3x3 convolutions with batch norm and ReLU followed by 2x2
//! max-pooling. Decoder stages upsample bilinearly to the skip resolution, apply a 3x3
//! convolution, concatenate the skip and run another double convolution.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::edm::EdgeMap;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, BatchNorm2d, Conv2d, ParamStore};
use crate::raster::{Raster, WORKING_SIZE};

/// Decoder upsampling used by every stage; transposed convolutions are not supported.
pub const UPSAMPLE_MODE: &str = "bilinear-then-conv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    /// Start the 1x1 output head at exactly zero instead of Kaiming-uniform weights.
    pub zero_head: bool,
}

impl Default for PromptNetConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 64,
            zero_head: false,
        }
    }
}

impl PromptNetConfig {
    /// Two stages of 8, 16 and 32 channels, small enough for desk-scale training.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 8,
            zero_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config("prompt_net depth and base_channels must be >= 1".into()));
        }
        if WORKING_SIZE >> self.depth == 0 {
            return Err(Error::Config(format!(
                "prompt_net depth {} pools a {WORKING_SIZE} pixel image below one pixel",
                self.depth
            )));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Number of trainable scalars.
    ///
    /// With `c_s = base * 2^s` and `dc(i, o) = 9io + 9o^2 + 4o` (two bias-free 3x3
    /// convolutions and two batch norms), the total is `dc(1, c_0)`, plus `dc(c_{s-1}, c_s)`
    /// per encoder stage, plus `9 c_{s+1} c_s + c_s + dc(2c_s, c_s)` per decoder stage,
    /// plus `c_0 + 1` for the head.
    pub fn param_count(&self) -> usize {
        let dc = |i: usize, o: usize| 9 * i * o + 9 * o * o + 4 * o;
        let c = |s| self.channels(s);
        let mut n = dc(1, c(0)) + c(0) + 1;
        for s in 1..=self.depth {
            n += dc(c(s - 1), c(s));
        }
        for s in 0..self.depth {
            n += 9 * c(s + 1) * c(s) + c(s) + dc(2 * c(s), c(s));
        }
        n
    }
}

/// Unbounded per-pixel prompt logits at working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    logits: Raster<f32>,
}

impl LogitMap {
    pub fn new(logits: Raster<f32>) -> Result<Self> {
        if logits.shape() != (WORKING_SIZE, WORKING_SIZE) {
            return Err(Error::Contract(format!(
                "logit map must be {WORKING_SIZE}x{WORKING_SIZE}, got {:?}",
                logits.shape()
            )));
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("logit map has non-finite values".into()));
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &Raster<f32> {
        &self.logits
    }

    /// `(1, 1, H, W)` tensor of the logits.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.logits.shape();
        Ok(Tensor::from_slice(self.logits.data(), (1, 1, h, w), device)?.to_dtype(dtype)?)
    }

    /// Reads the first sample of a `(N, 1, H, W)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, _, h, w) = t.dims4()?;
        let data: Vec<f32> = t.get(0)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
        Self::new(Raster::from_vec(h, w, data)?)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        Ok(self.bn2.forward(&self.conv2.forward(&x)?, train)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    reduce: Conv2d,
    fuse: DoubleConv,
}

/// The prompt network together with its parameter store.
pub struct PromptNet {
    config: PromptNetConfig,
    store: ParamStore,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<UpStage>,
    head: Conv2d,
}

impl PromptNet {
    pub fn new(config: &PromptNetConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let c = |s| config.channels(s);
        let inc = DoubleConv::new(&mut store, "inc", 1, c(0))?;
        let downs = (1..=config.depth)
            .map(|s| DoubleConv::new(&mut store, &format!("down{s}"), c(s - 1), c(s)))
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..config.depth)
            .rev()
            .map(|s| {
                Ok(UpStage {
                    reduce: Conv2d::new(&mut store, &format!("up{s}.reduce"), c(s + 1), c(s), 3, true)?,
                    fuse: DoubleConv::new(&mut store, &format!("up{s}.fuse"), 2 * c(s), c(s))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = if config.zero_head {
            Conv2d::zeros(&mut store, "head", c(0), 1, 1)?
        } else {
            let h = Conv2d::new(&mut store, "head", c(0), 1, 1, false)?;
            let bias = store.constant("head.bias", &[1], 0.0)?;
            h.with_bias(bias)
        };
        Ok(Self {
            config: config.clone(),
            store,
            inc,
            downs,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &PromptNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, 1, H, W)` edge maps to `(N, 1, H, W)` logits.
    ///
    /// In training mode batch statistics are used and the running statistics updated.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h >> self.config.depth == 0 || w >> self.config.depth == 0 {
            return Err(Error::Contract(format!(
                "prompt net expects (N, 1, H, W) with H, W >= 2^{}, got {:?}",
                self.config.depth,
                x.dims()
            )));
        }
        let x = x.to_dtype(self.store.dtype())?;
        let mut skips = vec![self.inc.forward(&x, train)?];
        for down in &self.downs {
            let prev = skips.last().expect("non-empty");
            let pooled = prev.max_pool2d(2)?;
            skips.push(down.forward(&pooled, train)?);
        }
        let mut y = skips.pop().expect("deepest stage");
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (_, _, sh, sw) = skip.dims4()?;
            let upsampled = up.reduce.forward(&resize_bilinear(&y, sh, sw)?)?;
            y = up.fuse.forward(&Tensor::cat(&[&skip, &upsampled], 1)?, train)?;
        }
        self.head.forward(&y)
    }

    /// Eval-mode inference on one edge map.
    pub fn forward(&self, edge_map: &EdgeMap) -> Result<LogitMap> {
        let t = edge_map_tensor(edge_map, self.store.dtype(), self.store.device())?;
        LogitMap::from_tensor(&self.forward_t(&t, false)?)
    }
}

/// `(1, 1, H, W)` tensor with ones on edge pixels.
pub fn edge_map_tensor(edge_map: &EdgeMap, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = edge_map.pixels().shape();
    if (h, w) != (WORKING_SIZE, WORKING_SIZE) {
        return Err(Error::Contract(format!("edge map must be {WORKING_SIZE}x{WORKING_SIZE}, got {h}x{w}")));
    }
    let data: Vec<f32> = edge_map.pixels().data().iter().map(|&v| f32::from(v)).collect();
    Ok(Tensor::from_vec(data, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_param_count_matches_store() {
        let configs = [
            PromptNetConfig::tiny(),
            PromptNetConfig { depth: 3, base_channels: 4, zero_head: true },
            PromptNetConfig::default(),
        ];
        for cfg in configs {
            let net = PromptNet::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
            assert_eq!(net.store().num_params(), cfg.param_count());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(PromptNetConfig { depth: 0, ..PromptNetConfig::tiny() }.validate().is_err());
        assert!(PromptNetConfig { depth: 8, ..PromptNetConfig::tiny() }.validate().is_err());
        assert!(PromptNetConfig { base_channels: 0, ..PromptNetConfig::tiny() }.validate().is_err());
    }
}
