//! CPU kernels for the spatial operations the networks lean on.
//!
//! `conv2d_same` is an im2col + GEMM convolution (stride 1, zero "same" padding),
//! `resize_bilinear` is a half-pixel bilinear resize and `batch_norm_train` is a fused
//! training-mode batch normalisation. Each implements its own backward pass and skips
//! gradients for inputs that are not part of a tracked graph, so a frozen network costs
//! nothing on the weight side.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

use crate::raster::AxisTaps;

type CResult<T> = candle_core::Result<T>;

/// Upper bound on im2col buffer elements per chunk.
const CHUNK_ELEMS: usize = 1 << 16;

trait Real: Copy + Default + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self> + std::ops::AddAssign + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn into_storage(v: Vec<Self>) -> CpuStorage;
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: usize,
        csa: usize,
        b: *const Self,
        rsb: usize,
        csb: usize,
        beta: Self,
        c: *mut Self,
        rsc: usize,
        csc: usize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $variant:ident) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn into_storage(v: Vec<Self>) -> CpuStorage {
                CpuStorage::$variant(v)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: *const Self,
                rsa: usize,
                csa: usize,
                b: *const Self,
                rsb: usize,
                csb: usize,
                beta: Self,
                c: *mut Self,
                rsc: usize,
                csc: usize,
            ) {
                // SAFETY: callers pass pointers into buffers sized for the given extents
                // and strides; see the index arithmetic at each call site.
                unsafe {
                    $gemm(
                        m, k, n, 1.0, a, rsa as isize, csa as isize, b, rsb as isize,
                        csb as isize, beta, c, rsc as isize, csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, F32);
impl_real!(f64, matrixmultiply::dgemm, F64);

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, what: &str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{what}: expected a contiguous tensor"),
    }
}

fn dims4(layout: &Layout, what: &str) -> CResult<[usize; 4]> {
    match layout.dims() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        other => candle_core::bail!("{what}: expected a rank-4 tensor, got {other:?}"),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn rows_per_chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.patch() * self.width).max(1)).clamp(1, self.height)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    /// Fills `cols` (patch x len) with the receptive fields of output rows `r0..r1`.
    fn im2col<T: Real>(&self, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
        let (h, w) = (self.height as isize, self.width);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let len = (r1 - r0) * w;
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &x[c * self.plane()..(c + 1) * self.plane()];
            for dy in 0..self.kh as isize {
                for dx in 0..self.kw as isize {
                    let dst = &mut cols[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let sr = r as isize + dy - ph;
                        let d = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                        if sr < 0 || sr >= h {
                            d.fill(T::ZERO);
                            continue;
                        }
                        let src = &plane[sr as usize * w..(sr as usize + 1) * w];
                        // Output columns lo..hi read source columns lo + dx - pw..hi + dx - pw.
                        let lo = (pw - dx).max(0) as usize;
                        let hi = (w as isize + pw - dx).min(w as isize).max(lo as isize) as usize;
                        d[..lo].fill(T::ZERO);
                        d[hi..].fill(T::ZERO);
                        let s0 = (lo as isize + dx - pw) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatters `cols` back onto the input plane, the adjoint of [`Self::im2col`].
    fn col2im<T: Real>(&self, cols: &[T], r0: usize, r1: usize, x: &mut [T]) {
        let (h, w) = (self.height as isize, self.width);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let len = (r1 - r0) * w;
        let plane_len = self.plane();
        let mut row = 0;
        for c in 0..self.channels {
            let plane = &mut x[c * plane_len..(c + 1) * plane_len];
            for dy in 0..self.kh as isize {
                for dx in 0..self.kw as isize {
                    let src = &cols[row * len..(row + 1) * len];
                    for r in r0..r1 {
                        let sr = r as isize + dy - ph;
                        if sr < 0 || sr >= h {
                            continue;
                        }
                        let s = &src[(r - r0) * w..(r - r0 + 1) * w];
                        let d = &mut plane[sr as usize * w..(sr as usize + 1) * w];
                        let lo = (pw - dx).max(0) as usize;
                        let hi = (w as isize + pw - dx).min(w as isize) as usize;
                        for x_out in lo..hi {
                            d[(x_out as isize + dx - pw) as usize] += s[x_out];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], k: &[T], n: usize, out_ch: usize, g: ConvGeom) -> Vec<T> {
    let (hw, patch) = (g.plane(), g.patch());
    let mut out = vec![T::ZERO; n * out_ch * hw];
    if g.is_pointwise() {
        for b in 0..n {
            let xs = &x[b * patch * hw..];
            let o = &mut out[b * out_ch * hw..];
            T::gemm(out_ch, patch, hw, k.as_ptr(), patch, 1, xs.as_ptr(), hw, 1, T::ZERO, o.as_mut_ptr(), hw, 1);
        }
        return out;
    }
    let step = g.rows_per_chunk();
    let mut cols = vec![T::ZERO; patch * step * g.width];
    for b in 0..n {
        let xs = &x[b * g.channels * hw..(b + 1) * g.channels * hw];
        for r0 in (0..g.height).step_by(step) {
            let r1 = (r0 + step).min(g.height);
            let len = (r1 - r0) * g.width;
            g.im2col(xs, r0, r1, &mut cols);
            let o = &mut out[b * out_ch * hw + r0 * g.width..];
            T::gemm(out_ch, patch, len, k.as_ptr(), patch, 1, cols.as_ptr(), len, 1, T::ZERO, o.as_mut_ptr(), hw, 1);
        }
    }
    out
}

fn conv_grad_input<T: Real>(gy: &[T], k: &[T], n: usize, out_ch: usize, g: ConvGeom) -> Vec<T> {
    let (hw, patch) = (g.plane(), g.patch());
    let mut gx = vec![T::ZERO; n * g.channels * hw];
    if g.is_pointwise() {
        for b in 0..n {
            let gs = &gy[b * out_ch * hw..];
            let d = &mut gx[b * patch * hw..];
            T::gemm(patch, out_ch, hw, k.as_ptr(), 1, patch, gs.as_ptr(), hw, 1, T::ZERO, d.as_mut_ptr(), hw, 1);
        }
        return gx;
    }
    let step = g.rows_per_chunk();
    let mut cols = vec![T::ZERO; patch * step * g.width];
    for b in 0..n {
        let gs = &gy[b * out_ch * hw..(b + 1) * out_ch * hw];
        let d = &mut gx[b * g.channels * hw..(b + 1) * g.channels * hw];
        for r0 in (0..g.height).step_by(step) {
            let r1 = (r0 + step).min(g.height);
            let len = (r1 - r0) * g.width;
            let gp = &gs[r0 * g.width..];
            T::gemm(patch, out_ch, len, k.as_ptr(), 1, patch, gp.as_ptr(), hw, 1, T::ZERO, cols.as_mut_ptr(), len, 1);
            g.col2im(&cols, r0, r1, d);
        }
    }
    gx
}

fn conv_grad_kernel<T: Real>(x: &[T], gy: &[T], n: usize, out_ch: usize, g: ConvGeom) -> Vec<T> {
    let (hw, patch) = (g.plane(), g.patch());
    let mut gk = vec![T::ZERO; out_ch * patch];
    if g.is_pointwise() {
        for b in 0..n {
            let gs = &gy[b * out_ch * hw..];
            let xs = &x[b * patch * hw..];
            T::gemm(patch, hw, out_ch, xs.as_ptr(), hw, 1, gs.as_ptr(), 1, hw, T::ONE, gk.as_mut_ptr(), 1, patch);
        }
        return gk;
    }
    let step = g.rows_per_chunk();
    let mut cols = vec![T::ZERO; patch * step * g.width];
    for b in 0..n {
        let xs = &x[b * g.channels * hw..(b + 1) * g.channels * hw];
        let gs = &gy[b * out_ch * hw..(b + 1) * out_ch * hw];
        for r0 in (0..g.height).step_by(step) {
            let r1 = (r0 + step).min(g.height);
            let len = (r1 - r0) * g.width;
            g.im2col(xs, r0, r1, &mut cols);
            let gp = &gs[r0 * g.width..];
            // Computed as cols . gy^T into the transposed kernel layout, which keeps both
            // operands streaming along their contiguous axis.
            T::gemm(patch, len, out_ch, cols.as_ptr(), len, 1, gp.as_ptr(), 1, hw, T::ONE, gk.as_mut_ptr(), 1, patch);
        }
    }
    gk
}

struct Conv2dSame;

impl CustomOp2 for Conv2dSame {
    fn name(&self) -> &'static str {
        "conv2d-same"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let [n, c, h, w] = dims4(l1, self.name())?;
        let [o, c2, kh, kw] = dims4(l2, self.name())?;
        if c != c2 {
            candle_core::bail!("conv2d-same: input has {c} channels, kernel expects {c2}");
        }
        let g = ConvGeom { channels: c, height: h, width: w, kh, kw };
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(k)) => {
                f32::into_storage(conv_forward(contiguous(x, l1, "input")?, contiguous(k, l2, "kernel")?, n, o, g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k)) => {
                f64::into_storage(conv_forward(contiguous(x, l1, "input")?, contiguous(k, l2, "kernel")?, n, o, g))
            }
            _ => candle_core::bail!("conv2d-same: unsupported dtypes"),
        };
        Ok((out, Shape::from((n, o, h, w))))
    }

    fn bwd(&self, x: &Tensor, k: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = if x.track_op() {
            Some(grad.apply_op2_no_bwd(k, &Conv2dGradInput)?)
        } else {
            None
        };
        let gk = if k.track_op() {
            let (_, _, kh, kw) = k.dims4()?;
            Some(x.apply_op2_no_bwd(&grad, &Conv2dGradKernel { kh, kw })?)
        } else {
            None
        };
        Ok((gx, gk))
    }
}

struct Conv2dGradInput;

impl CustomOp2 for Conv2dGradInput {
    fn name(&self) -> &'static str {
        "conv2d-same-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let [n, o, h, w] = dims4(l1, self.name())?;
        let [_, c, kh, kw] = dims4(l2, self.name())?;
        let g = ConvGeom { channels: c, height: h, width: w, kh, kw };
        let out = match (s1, s2) {
            (CpuStorage::F32(gy), CpuStorage::F32(k)) => {
                f32::into_storage(conv_grad_input(contiguous(gy, l1, "grad")?, contiguous(k, l2, "kernel")?, n, o, g))
            }
            (CpuStorage::F64(gy), CpuStorage::F64(k)) => {
                f64::into_storage(conv_grad_input(contiguous(gy, l1, "grad")?, contiguous(k, l2, "kernel")?, n, o, g))
            }
            _ => candle_core::bail!("conv2d-same: unsupported dtypes"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

struct Conv2dGradKernel {
    kh: usize,
    kw: usize,
}

impl CustomOp2 for Conv2dGradKernel {
    fn name(&self) -> &'static str {
        "conv2d-same-grad-kernel"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let [n, c, h, w] = dims4(l1, self.name())?;
        let [_, o, _, _] = dims4(l2, self.name())?;
        let g = ConvGeom { channels: c, height: h, width: w, kh: self.kh, kw: self.kw };
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(gy)) => {
                f32::into_storage(conv_grad_kernel(contiguous(x, l1, "input")?, contiguous(gy, l2, "grad")?, n, o, g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(gy)) => {
                f64::into_storage(conv_grad_kernel(contiguous(x, l1, "input")?, contiguous(gy, l2, "grad")?, n, o, g))
            }
            _ => candle_core::bail!("conv2d-same: unsupported dtypes"),
        };
        Ok((out, Shape::from((o, c, self.kh, self.kw))))
    }
}

/// 2-D convolution with stride 1 and zero padding that preserves the spatial size.
///
/// `x` is `(N, C, H, W)` and `kernel` is `(O, C, kh, kw)` with odd `kh`, `kw`.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor) -> CResult<Tensor> {
    let (_, _, kh, kw) = kernel.dims4()?;
    if kh % 2 == 0 || kw % 2 == 0 {
        candle_core::bail!("conv2d-same needs odd kernel sizes, got {kh}x{kw}");
    }
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dSame)
}

fn resize_planes<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (rows, cols) = (AxisTaps::new(h, oh), AxisTaps::new(w, ow));
    let cw: Vec<T> = cols.w1.iter().map(|&v| T::from_f32(v)).collect();
    let rw: Vec<T> = rows.w1.iter().map(|&v| T::from_f32(v)).collect();
    let mut out = vec![T::ZERO; planes * oh * ow];
    let mut tmp = vec![T::ZERO; h * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            let s = &src[r * w..(r + 1) * w];
            let d = &mut tmp[r * ow..(r + 1) * ow];
            for o in 0..ow {
                let (a, b) = (s[cols.idx0[o]], s[cols.idx1[o]]);
                d[o] = a + (b - a) * cw[o];
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (r, d) in dst.chunks_mut(ow).enumerate() {
            let a = &tmp[rows.idx0[r] * ow..(rows.idx0[r] + 1) * ow];
            let b = &tmp[rows.idx1[r] * ow..(rows.idx1[r] + 1) * ow];
            for ((d, &x), &y) in d.iter_mut().zip(a).zip(b) {
                *d = x + (y - x) * rw[r];
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`]: maps a gradient at `(oh, ow)` back to `(h, w)`.
fn resize_planes_adjoint<T: Real>(g: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let (rows, cols) = (AxisTaps::new(h, oh), AxisTaps::new(w, ow));
    let cw: Vec<T> = cols.w1.iter().map(|&v| T::from_f32(v)).collect();
    let rw: Vec<T> = rows.w1.iter().map(|&v| T::from_f32(v)).collect();
    let mut out = vec![T::ZERO; planes * h * w];
    let mut tmp = vec![T::ZERO; h * ow];
    for p in 0..planes {
        tmp.fill(T::ZERO);
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        for (r, s) in src.chunks(ow).enumerate() {
            let (i0, i1, t) = (rows.idx0[r], rows.idx1[r], rw[r]);
            for (o, &v) in s.iter().enumerate() {
                tmp[i0 * ow + o] += v - v * t;
                tmp[i1 * ow + o] += v * t;
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            let s = &tmp[r * ow..(r + 1) * ow];
            let d = &mut dst[r * w..(r + 1) * w];
            for (o, &v) in s.iter().enumerate() {
                d[cols.idx0[o]] += v - v * cw[o];
                d[cols.idx1[o]] += v * cw[o];
            }
        }
    }
    out
}

struct ResizeBilinear {
    oh: usize,
    ow: usize,
}

impl CustomOp1 for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize-bilinear"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let [n, c, h, w] = dims4(l, self.name())?;
        let out = match s {
            CpuStorage::F32(x) => f32::into_storage(resize_planes(contiguous(x, l, "input")?, n * c, h, w, self.oh, self.ow)),
            CpuStorage::F64(x) => f64::into_storage(resize_planes(contiguous(x, l, "input")?, n * c, h, w, self.oh, self.ow)),
            _ => candle_core::bail!("resize-bilinear: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, self.oh, self.ow))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&ResizeAdjoint { h, w })?))
    }
}

struct ResizeAdjoint {
    h: usize,
    w: usize,
}

impl CustomOp1 for ResizeAdjoint {
    fn name(&self) -> &'static str {
        "resize-bilinear-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let [n, c, oh, ow] = dims4(l, self.name())?;
        let (h, w) = (self.h, self.w);
        let out = match s {
            CpuStorage::F32(g) => f32::into_storage(resize_planes_adjoint(contiguous(g, l, "grad")?, n * c, h, w, oh, ow)),
            CpuStorage::F64(g) => f64::into_storage(resize_planes_adjoint(contiguous(g, l, "grad")?, n * c, h, w, oh, ow)),
            _ => candle_core::bail!("resize-bilinear: unsupported dtype"),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Bilinear resize of `(N, C, H, W)` with half-pixel centres and edge clamping.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    x.contiguous()?.apply_op1(ResizeBilinear { oh: height, ow: width })
}

/// Per-channel mean and inverse standard deviation (biased variance) of `(N, C, HW)` data.
fn channel_stats<T: Real>(x: &[T], n: usize, c: usize, hw: usize, eps: f64) -> Vec<(f64, f64)> {
    let m = (n * hw) as f64;
    (0..c)
        .map(|ch| {
            let planes = || (0..n).map(move |b| &x[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
            let mean = planes().flatten().map(|v| v.to_f64()).sum::<f64>() / m;
            let var = planes().flatten().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

fn batch_norm_forward<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
    let stats = channel_stats(x, n, c, hw, eps);
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..n {
        for (ch, &(mean, inv)) in stats.iter().enumerate() {
            let scale = w[ch].to_f64() * inv;
            let (s, t) = (T::from_f64(scale), T::from_f64(b[ch].to_f64() - mean * scale));
            let off = (bi * c + ch) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&x[off..off + hw]) {
                *o = v * s + t;
            }
        }
    }
    out
}

struct BatchNormTrain {
    eps: f64,
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let [n, c, h, w] = dims4(l1, self.name())?;
        if l2.shape().elem_count() != c || l3.shape().elem_count() != c {
            candle_core::bail!("batch-norm-train: weight and bias need {c} elements");
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => f32::into_storage(batch_norm_forward(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(b, l3, "bias")?,
                n,
                c,
                h * w,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => f64::into_storage(batch_norm_forward(
                contiguous(x, l1, "input")?,
                contiguous(g, l2, "weight")?,
                contiguous(b, l3, "bias")?,
                n,
                c,
                h * w,
                self.eps,
            )),
            _ => candle_core::bail!("batch-norm-train: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let values = |t: &Tensor| -> CResult<Vec<f64>> { t.to_dtype(DType::F64)?.flatten_all()?.to_vec1() };
        let (xv, gy, wv) = (values(x)?, values(grad)?, values(weight)?);
        let stats = channel_stats(&xv, n, c, hw, self.eps);
        let mut gx = vec![0f64; xv.len()];
        let (mut gw, mut gb) = (vec![0f64; c], vec![0f64; c]);
        for (ch, &(mean, inv)) in stats.iter().enumerate() {
            let offsets = || (0..n).map(move |b| (b * c + ch) * hw);
            for off in offsets() {
                for i in off..off + hw {
                    gb[ch] += gy[i];
                    gw[ch] += gy[i] * (xv[i] - mean) * inv;
                }
            }
            // d x_i = w inv / m (m g_i - sum g - xhat_i sum(g xhat))
            let k = wv[ch] * inv / m;
            for off in offsets() {
                for i in off..off + hw {
                    let xhat = (xv[i] - mean) * inv;
                    gx[i] = k * (m * gy[i] - gb[ch] - xhat * gw[ch]);
                }
            }
        }
        let dtype = x.dtype();
        let tensor = |v: Vec<f64>, shape: &[usize]| -> CResult<Tensor> {
            Tensor::from_vec(v, shape, x.device())?.to_dtype(dtype)
        };
        let gx = if x.track_op() { Some(tensor(gx, x.dims())?) } else { None };
        let gw = if weight.track_op() { Some(tensor(gw, weight.dims())?) } else { None };
        let gb = if bias.track_op() { Some(tensor(gb, bias.dims())?) } else { None };
        Ok((gx, gw, gb))
    }
}

/// Batch normalisation of `(N, C, H, W)` with batch statistics, followed by the
/// per-channel affine map `weight * xhat + bias`.
pub fn batch_norm_train(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, BatchNormTrain { eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive_conv(x: &[f64], k: &[f64], n: usize, c: usize, h: usize, w: usize, o: usize, kh: usize, kw: usize) -> Vec<f64> {
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = vec![0.0; n * o * h * w];
        for b in 0..n {
            for oc in 0..o {
                for r in 0..h {
                    for col in 0..w {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let (sr, sc) = (r as isize + dy as isize - ph, col as isize + dx as isize - pw);
                                    if sr < 0 || sc < 0 || sr >= h as isize || sc >= w as isize {
                                        continue;
                                    }
                                    s += x[((b * c + ic) * h + sr as usize) * w + sc as usize]
                                        * k[((oc * c + ic) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out[((b * o + oc) * h + r) * w + col] = s;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 * 0.37 + seed).sin() * 1.3).fract()).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let dev = Device::Cpu;
        for &(kh, kw) in &[(3, 3), (1, 1), (5, 3)] {
            let (n, c, h, w, o) = (2, 3, 7, 5, 4);
            let xs = ramp(n * c * h * w, 0.1);
            let ks = ramp(o * c * kh * kw, 2.0);
            let x = Tensor::from_vec(xs.clone(), (n, c, h, w), &dev).unwrap();
            let k = Tensor::from_vec(ks.clone(), (o, c, kh, kw), &dev).unwrap();
            let got: Vec<f64> = conv2d_same(&x, &k).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let want = naive_conv(&xs, &ks, n, c, h, w, o, kh, kw);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{kh}x{kw}: {a} vs {b}");
            }
            let got32: Vec<f32> = conv2d_same(&x.to_dtype(DType::F32).unwrap(), &k.to_dtype(DType::F32).unwrap())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            for (a, b) in got32.iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn conv_gradients_are_adjoint() {
        // <conv(x, k), g> is bilinear, so its gradients are exact adjoints.
        let dev = Device::Cpu;
        let (n, c, h, w, o) = (2, 2, 6, 5, 3);
        let x = Var::from_vec(ramp(n * c * h * w, 0.3), (n, c, h, w), &dev).unwrap();
        let k = Var::from_vec(ramp(o * c * 9, 1.1), (o, c, 3, 3), &dev).unwrap();
        let g = Tensor::from_vec(ramp(n * o * h * w, 4.2), (n, o, h, w), &dev).unwrap();
        let y = conv2d_same(x.as_tensor(), k.as_tensor()).unwrap();
        let obj = (&y * &g).unwrap().sum_all().unwrap();
        let grads = obj.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let gk = grads.get(k.as_tensor()).unwrap();
        let eps = 1e-6;
        let f = |xv: &Tensor, kv: &Tensor| -> f64 {
            (conv2d_same(xv, kv).unwrap() * &g).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let gxv: Vec<f64> = gx.flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 7, 31, xv.len() - 1] {
            let mut p = xv.clone();
            p[i] += eps;
            let mut m = xv.clone();
            m[i] -= eps;
            let tp = Tensor::from_vec(p, (n, c, h, w), &dev).unwrap();
            let tm = Tensor::from_vec(m, (n, c, h, w), &dev).unwrap();
            let fd = (f(&tp, k.as_tensor()) - f(&tm, k.as_tensor())) / (2.0 * eps);
            assert!((fd - gxv[i]).abs() < 1e-6, "{fd} vs {}", gxv[i]);
        }
        let kv: Vec<f64> = k.flatten_all().unwrap().to_vec1().unwrap();
        let gkv: Vec<f64> = gk.flatten_all().unwrap().to_vec1().unwrap();
        for i in [0, 5, 17, kv.len() - 1] {
            let mut p = kv.clone();
            p[i] += eps;
            let mut m = kv.clone();
            m[i] -= eps;
            let tp = Tensor::from_vec(p, (o, c, 3, 3), &dev).unwrap();
            let tm = Tensor::from_vec(m, (o, c, 3, 3), &dev).unwrap();
            let fd = (f(x.as_tensor(), &tp) - f(x.as_tensor(), &tm)) / (2.0 * eps);
            assert!((fd - gkv[i]).abs() < 1e-6, "{fd} vs {}", gkv[i]);
        }
    }

    #[test]
    fn frozen_kernel_gets_no_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_vec(ramp(16, 0.0), (1, 1, 4, 4), &dev).unwrap();
        let k = Tensor::from_vec(ramp(9, 1.0), (1, 1, 3, 3), &dev).unwrap();
        let grads = conv2d_same(x.as_tensor(), &k).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&k).is_none());
        assert!(grads.get(x.as_tensor()).is_some());
    }

    #[test]
    fn resize_matches_raster_and_adjoint_identity() {
        let dev = Device::Cpu;
        let (h, w, oh, ow) = (5, 7, 12, 4);
        let xs = ramp(h * w, 0.5);
        let x = Tensor::from_vec(xs.clone(), (1, 1, h, w), &dev).unwrap();
        let y: Vec<f64> = resize_bilinear(&x, oh, ow).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let r = crate::raster::Raster::from_vec(h, w, xs.iter().map(|&v| v as f32).collect())
            .unwrap()
            .resize_bilinear(oh, ow);
        for (a, b) in y.iter().zip(r.data()) {
            assert!((*a as f32 - b).abs() < 1e-5);
        }
        // <R x, g> == <x, R^T g>
        let g = ramp(oh * ow, 3.3);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = resize_planes_adjoint(&g, 1, h, w, oh, ow);
        let rhs: f64 = xs.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
