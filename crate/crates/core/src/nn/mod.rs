//! Small network building blocks on top of candle tensors.

pub mod ops;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use ops::{batch_norm_train, conv2d_same, resize_bilinear};

/// Named parameters and buffers of one network, created from a seeded generator.
///
/// A frozen store hands out detached tensors, so nothing built from it ever
/// receives a gradient.
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            frozen: false,
        }
    }

    pub fn frozen(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            frozen: true,
            ..Self::new(seed, dtype, device)
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = if self.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.params.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Uniform in `±sqrt(6 / fan_in)`, the He initialisation for ReLU layers.
    pub fn kaiming_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Non-trainable state such as running statistics.
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Parameters an optimizer should update; empty for a frozen store.
    pub fn trainable(&self) -> Vec<Var> {
        if self.frozen {
            return Vec::new();
        }
        self.params.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters followed by buffers, each group sorted by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every parameter and buffer with the tensor of the same name.
    pub fn load(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for &d in var.dims() {
                h.update((d as u64).to_le_bytes());
            }
            let values: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Same-padded, stride-1 convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.kaiming_uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in)?;
        let bias = if bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Some(store.uniform(&format!("{name}.bias"), &[out_ch], bound)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// A convolution whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = store.constant(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], 0.0)?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[out_ch], 0.0)?);
        Ok(Self { weight, bias })
    }

    pub fn with_bias(self, bias: Tensor) -> Self {
        Self {
            bias: Some(bias),
            ..self
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_same(x, &self.weight)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Batch normalisation over `(N, H, W)` with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        if train {
            let n = (x.elem_count() / c) as f64;
            // Reducing the contiguous spatial dims first is much faster than one (0, 2, 3) pass.
            let channel_mean = |t: &Tensor| -> Result<Tensor> { Ok((t.sum_keepdim((2, 3))?.sum_keepdim(0)? / n)?) };
            let xd = x.detach();
            let mean = channel_mean(&xd)?;
            let var = channel_mean(&xd.broadcast_sub(&mean)?.sqr()?)?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var.flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(batch_norm_train(x, &self.weight, &self.bias, self.eps)?);
        }
        let mean = self.running_mean.as_tensor().detach().reshape(shape)?;
        let var = self.running_var.as_tensor().detach().reshape(shape)?;
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Linear layer on the last dimension, `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[out_dim], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Layer normalisation over the last dimension built from differentiable primitives.
pub fn layer_norm_last(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(y.broadcast_mul(weight)?.broadcast_add(bias)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_stores_are_reproducible() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32, &Device::Cpu);
            Conv2d::new(&mut s, "c", 3, 4, 3, true).unwrap();
            s.checksum().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn frozen_store_has_nothing_to_train() {
        let mut s = ParamStore::frozen(0, DType::F32, &Device::Cpu);
        let conv = Conv2d::new(&mut s, "c", 1, 2, 3, true).unwrap();
        assert!(s.trainable().is_empty());
        assert_eq!(s.num_params(), 2 * 9 + 2);
        let x = Var::zeros((1, 1, 5, 5), DType::F32, &Device::Cpu).unwrap();
        let grads = conv.forward(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&conv.weight).is_none());
    }

    #[test]
    fn batchnorm_normalises_and_tracks_running_stats() {
        let mut s = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&mut s, "bn", 1).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y: Vec<f64> = bn.forward(&x, true).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        let rv: Vec<f64> = bn.running_var.as_tensor().to_vec1().unwrap();
        assert!((rm[0] - 0.25).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 1.25 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fused_batchnorm_matches_composite_autograd() {
        let dev = Device::Cpu;
        let (n, c, h, w) = (2, 3, 4, 5);
        let vals: Vec<f64> = (0..n * c * h * w).map(|i| ((i as f64 * 0.61).sin() * 2.0).fract()).collect();
        let x = Var::from_vec(vals, (n, c, h, w), &dev).unwrap();
        let weight = Var::from_vec(vec![0.5, 1.5, -2.0], c, &dev).unwrap();
        let bias = Var::from_vec(vec![0.1, -0.3, 0.7], c, &dev).unwrap();
        let g = Tensor::from_vec((0..n * c * h * w).map(|i| (i as f64 * 0.23).cos()).collect(), (n, c, h, w), &dev)
            .unwrap();
        let eps = 1e-5;
        let fused = batch_norm_train(x.as_tensor(), weight.as_tensor(), bias.as_tensor(), eps).unwrap();
        let shape = (1, c, 1, 1);
        let mean = x.mean_keepdim((0, 2, 3)).unwrap();
        let centred = x.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim((0, 2, 3)).unwrap();
        let composite = centred
            .broadcast_div(&(var + eps).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&weight.reshape(shape).unwrap())
            .unwrap()
            .broadcast_add(&bias.reshape(shape).unwrap())
            .unwrap();
        let flat = |t: &Tensor| -> Vec<f64> { t.flatten_all().unwrap().to_vec1().unwrap() };
        for (a, b) in flat(&fused).iter().zip(flat(&composite)) {
            assert!((a - b).abs() < 1e-12);
        }
        let ga = (&fused * &g).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (&composite * &g).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [x.as_tensor(), weight.as_tensor(), bias.as_tensor()] {
            for (a, b) in flat(ga.get(v).unwrap()).iter().zip(flat(gb.get(v).unwrap())) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_and_layernorm_match_closed_form() {
        let x = Tensor::from_vec(vec![0.0f64, 1.0, 2.0], (1, 3), &Device::Cpu).unwrap();
        let s: Vec<f64> = softmax_last(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let z: f64 = (0..3).map(|i| (i as f64).exp()).sum();
        for (i, v) in s.iter().enumerate() {
            assert!((v - (i as f64).exp() / z).abs() < 1e-12);
        }
        let w = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let l: Vec<f64> = layer_norm_last(&x, &w, &b, 0.0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        assert!((l[0] + 1.0 / sd).abs() < 1e-12 && l[1].abs() < 1e-12);
    }
}
