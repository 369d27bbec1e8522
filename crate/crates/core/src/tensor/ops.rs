//! Layer kernels over NHWC batches.
//!
//! Convolutions are lowered to im2col followed by a single GEMM, so a batch of
//! `B` images costs one matrix product per layer. Kernels are stored as
//! `[kh, kw, cin, cout]`, which is exactly the row-major `[kh*kw*cin, cout]`
//! matrix the GEMM needs.

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Spatial padding rule for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split with the extra row/column at the end.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

impl Padding {
    pub fn code(self) -> u8 {
        match self {
            Padding::Same => 0,
            Padding::Valid => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Padding::Same),
            1 => Some(Padding::Valid),
            _ => None,
        }
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Geometry of one convolution, always expressed from the dense (input) side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub(crate) fn new(
        batch: usize,
        (h, w, cin): (usize, usize, usize),
        (kh, kw, cout): (usize, usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("stride must be positive"));
        }
        let (oh, pad_top) = out_extent(h, kh, stride, padding)?;
        let (ow, pad_left) = out_extent(w, kw, stride, padding)?;
        Ok(Self {
            batch,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

fn out_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if k > n {
                return Err(Error::shape(format!(
                    "kernel extent {k} exceeds input extent {n} under valid padding"
                )));
            }
            Ok(((n - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            if k > n + total {
                return Err(Error::shape(format!(
                    "kernel extent {k} exceeds padded extent {}",
                    n + total
                )));
            }
            Ok((out, total / 2))
        }
    }
}

/// `c = a * b + beta * c` where `a` is `m x k`, `b` is `k x n`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (a_rs, a_cs): (usize, usize),
    b: &[f32],
    (b_rs, b_cs): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_rs + (k.max(1) - 1) * a_cs || k == 0);
    assert!(b.len() > (k.max(1) - 1) * b_rs + (n - 1) * b_cs || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut cols = vec![0.0f32; g.rows() * plen];
    for b in 0..g.batch {
        let img = &input[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * plen;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut out = vec![0.0f32; g.batch * g.h * g.w * g.cin];
    for b in 0..g.batch {
        let img = &mut out[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = ((b * g.oh + oy) * g.ow + ox) * plen;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for (o, &v) in img[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Splits an image or image batch into `(batch, (h, w, c), was_batched)`.
fn image_dims(t: &Tensor, what: &str) -> Result<(usize, (usize, usize, usize), bool)> {
    match *t.shape() {
        [h, w, c] => Ok((1, (h, w, c), false)),
        [b, h, w, c] => Ok((b, (h, w, c), true)),
        ref s => Err(Error::shape(format!(
            "{what} must be [H,W,C] or [B,H,W,C], got {s:?}"
        ))),
    }
}

fn kernel_dims(k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *k.shape() {
        [kh, kw, ci, co] => Ok((kh, kw, ci, co)),
        ref s => Err(Error::shape(format!(
            "kernel must be [kh,kw,Cin,Cout], got {s:?}"
        ))),
    }
}

fn image_shape(batched: bool, b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if batched {
        vec![b, h, w, c]
    } else {
        vec![h, w, c]
    }
}

pub(crate) fn conv_geom_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<(ConvGeom, bool)> {
    let (b, (h, w, c), batched) = image_dims(input, "conv2d input")?;
    let (kh, kw, ci, co) = kernel_dims(kernel)?;
    if ci != c {
        return Err(Error::shape(format!(
            "conv2d input has {c} channels but kernel expects {ci}"
        )));
    }
    Ok((ConvGeom::new(b, (h, w, c), (kh, kw, co), stride, padding)?, batched))
}

/// Geometry for a transposed convolution whose *output* is the dense side.
pub(crate) fn conv_geom_transpose(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<(ConvGeom, bool)> {
    let (b, (ih, iw, c), batched) = image_dims(input, "conv2d_transpose input")?;
    let (kh, kw, ci, co) = kernel_dims(kernel)?;
    if co != c {
        return Err(Error::shape(format!(
            "conv2d_transpose input has {c} channels but kernel produces {co}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("stride must be positive"));
    }
    let dense = |n: usize, k: usize| match padding {
        Padding::Same => n * stride,
        Padding::Valid => (n - 1) * stride + k,
    };
    let g = ConvGeom::new(b, (dense(ih, kh), dense(iw, kw), ci), (kh, kw, co), stride, padding)?;
    if g.oh != ih || g.ow != iw {
        return Err(Error::shape(format!(
            "conv2d_transpose geometry mismatch for input {ih}x{iw}"
        )));
    }
    Ok((g, batched))
}

/// Cross-correlation of `input` with `kernel`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (g, batched) = conv_geom_forward(input, kernel, stride, padding)?;
    let out = conv_forward_raw(input.data(), kernel.data(), &g);
    Ok(Tensor::from_raw(image_shape(batched, g.batch, g.oh, g.ow, g.cout), out))
}

pub(crate) fn conv_forward_raw(input: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut out = vec![0.0f32; g.rows() * g.cout];
    if g.is_pointwise() {
        gemm(g.rows(), plen, g.cout, input, (plen, 1), kernel, (g.cout, 1), 0.0, &mut out);
    } else {
        let cols = im2col(input, g);
        gemm(g.rows(), plen, g.cout, &cols, (plen, 1), kernel, (g.cout, 1), 0.0, &mut out);
    }
    out
}

/// Gradient of a convolution with respect to its dense input.
pub(crate) fn conv_input_grad_raw(grad_out: &[f32], kernel: &[f32], g: &ConvGeom) -> Vec<f32> {
    let plen = g.patch_len();
    let mut dcols = vec![0.0f32; g.rows() * plen];
    // dcols = dout * K^T
    gemm(g.rows(), g.cout, plen, grad_out, (g.cout, 1), kernel, (1, g.cout), 0.0, &mut dcols);
    if g.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, g)
    }
}

/// Gradient of a convolution with respect to its kernel, accumulated into `grad_kernel`.
pub(crate) fn conv_kernel_grad_raw(input: &[f32], grad_out: &[f32], g: &ConvGeom, grad_kernel: &mut [f32]) {
    let plen = g.patch_len();
    let owned;
    let cols: &[f32] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(input, g);
        &owned
    };
    // dK = cols^T * dout
    gemm(plen, g.rows(), g.cout, cols, (1, plen), grad_out, (g.cout, 1), 1.0, grad_kernel);
}

/// Adjoint of [`conv2d`] with respect to its input, sharing the same kernel.
///
/// `input` has `Cout` channels and the result has `Cin` channels. Under
/// `Same` padding the output extent is `in * stride`; under `Valid` it is
/// `(in - 1) * stride + k`.
pub fn conv2d_transpose(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (g, batched) = conv_geom_transpose(input, kernel, stride, padding)?;
    let out = conv_input_grad_raw(input.data(), kernel.data(), &g);
    Ok(Tensor::from_raw(image_shape(batched, g.batch, g.h, g.w, g.cin), out))
}

/// `y = x W^T` for `x: [B, in]`, `weight: [out, in]`.
pub fn dense(input: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, d) = match *input.shape() {
        [d] => (1, d),
        [b, d] => (b, d),
        ref s => return Err(Error::shape(format!("dense input must be [D] or [B,D], got {s:?}"))),
    };
    let (o, i) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::shape(format!("dense weight must be [out,in], got {s:?}"))),
    };
    if i != d {
        return Err(Error::shape(format!("dense input has {d} features, weight expects {i}")));
    }
    let mut out = vec![0.0f32; b * o];
    gemm(b, d, o, input.data(), (d, 1), weight.data(), (1, d), 0.0, &mut out);
    let shape = if input.rank() == 1 { vec![o] } else { vec![b, o] };
    Ok(Tensor::from_raw(shape, out))
}

/// Inverted dropout.
///
/// In `Train` mode each element is zeroed with probability `rate` and
/// survivors are scaled by `1 / (1 - rate)`; `Infer` returns the input unchanged.
pub fn dropout<R: Rng + ?Sized>(input: &Tensor, rate: f32, mode: Mode, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    match mode {
        Mode::Infer => Ok(input.clone()),
        Mode::Train => {
            let mask = dropout_mask(input.len(), rate, rng);
            let data = input.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Ok(Tensor::from_raw(input.shape().to_vec(), data))
        }
    }
}

pub(crate) fn check_rate(rate: f32) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(n: usize, rate: f32, rng: &mut R) -> Vec<f32> {
    if rate == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
        .collect()
}

/// Mean over the spatial axes: `[B, H, W, C] -> [B, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (b, (h, w, c), _) = image_dims(input, "global_avg_pool input")?;
    let mut out = vec![0.0f32; b * c];
    let scale = 1.0 / (h * w) as f32;
    for bi in 0..b {
        let img = input.item(bi);
        let o = &mut out[bi * c..(bi + 1) * c];
        for px in img.chunks_exact(c) {
            for (acc, &v) in o.iter_mut().zip(px) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(Tensor::from_raw(vec![b, c], out))
}
