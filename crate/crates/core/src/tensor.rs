//! Dense `f64` tensors and the numeric kernels the network is built from.
//!
//! Feature maps are stored channel-major as `[C, H, W]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == data.len(),
            Validation,
            "shape {:?} needs {} values, got {}",
            shape,
            n,
            data.len()
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Top-left `h × w` window of a `[C, H, W]` tensor.
    pub fn crop_top_left(&self, h: usize, w: usize) -> Tensor {
        let (c, xh, xw) = self.chw();
        assert!(h <= xh && w <= xw, "crop {h}x{w} exceeds {xh}x{xw}");
        if (xh, xw) == (h, w) {
            return self.clone();
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&self.data[(ch * xh + y) * xw..(ch * xh + y) * xw + w]);
            }
        }
        Tensor {
            shape: vec![c, h, w],
            data: out,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = self.chw();
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.data.len(),
            Validation,
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `c = a·b + beta·c` on row-major slices.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a_view = if a_transposed {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b_view = if b_transposed {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let mut cols = vec![0.0; self.in_channels * k * k * oh * ow];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let mut x = vec![0.0; self.in_channels * self.in_h * self.in_w];
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                x[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Convolution forward. Returns the output and the unfolded input kept for
/// the backward pass (empty for pointwise convolutions, which reuse `x`).
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = x.chw();
    ensure!(
        weight.shape().len() == 4 && weight.shape()[1] == c && weight.shape()[2] == weight.shape()[3],
        Validation,
        "conv weight {:?} does not match input channels {}",
        weight.shape(),
        c
    );
    let out_c = weight.shape()[0];
    let kernel = weight.shape()[2];
    ensure!(
        h + 2 * pad >= kernel && w + 2 * pad >= kernel && stride >= 1,
        Validation,
        "input {}x{} too small for kernel {} with pad {}",
        h,
        w,
        kernel,
        pad
    );
    let geom = ConvGeometry {
        in_channels: c,
        in_h: h,
        in_w: w,
        kernel,
        stride,
        pad,
    };
    let (oh, ow) = geom.out_hw();
    let p = oh * ow;
    let mut out = vec![0.0; out_c * p];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(p).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    let kk = c * kernel * kernel;
    let cols = if geom.is_pointwise() {
        gemm(out_c, kk, p, weight.data(), false, x.data(), false, &mut out, 1.0);
        Vec::new()
    } else {
        let cols = geom.im2col(x.data());
        gemm(out_c, kk, p, weight.data(), false, &cols, false, &mut out, 1.0);
        cols
    };
    Ok((Tensor::from_vec(&[out_c, oh, ow], out)?, cols))
}

/// Gradients `(dx, dw, db)` of a convolution given the forward cache.
pub fn conv2d_backward(
    x: &Tensor,
    cols: &[f64],
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let (out_c, oh, ow) = dout.chw();
    let kernel = weight.shape()[2];
    let geom = ConvGeometry {
        in_channels: c,
        in_h: h,
        in_w: w,
        kernel,
        stride,
        pad,
    };
    let p = oh * ow;
    let kk = c * kernel * kernel;
    let unfolded: &[f64] = if geom.is_pointwise() { x.data() } else { cols };

    let mut dw = vec![0.0; out_c * kk];
    gemm(out_c, p, kk, dout.data(), false, unfolded, true, &mut dw, 0.0);

    let db: Vec<f64> = dout.data().chunks(p).map(|r| r.iter().sum()).collect();

    let mut dcols = vec![0.0; kk * p];
    gemm(kk, out_c, p, weight.data(), true, dout.data(), false, &mut dcols, 0.0);
    let dx = if geom.is_pointwise() {
        dcols
    } else {
        geom.col2im(&dcols)
    };
    (
        Tensor::from_vec(&[c, h, w], dx).unwrap(),
        Tensor::from_vec(weight.shape(), dw).unwrap(),
        Tensor::from_vec(&[out_c], db).unwrap(),
    )
}

/// `[start, end)` ranges of adaptive pooling bins along one axis.
pub fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end.max(start + 1))
        })
        .collect()
}

pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let rows = adaptive_bins(h, out_h);
    let colsb = adaptive_bins(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (i, &(y0, y1)) in rows.iter().enumerate() {
            for (j, &(x0, x1)) in colsb.iter().enumerate() {
                let mut s = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x.data[(ch * h + y) * w + xx];
                    }
                }
                out.data[(ch * out_h + i) * out_w + j] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(in_shape: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, out_h, out_w) = dout.chw();
    let rows = adaptive_bins(h, out_h);
    let colsb = adaptive_bins(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        for (i, &(y0, y1)) in rows.iter().enumerate() {
            for (j, &(x0, x1)) in colsb.iter().enumerate() {
                let g = dout.data[(ch * out_h + i) * out_w + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx.data[(ch * h + y) * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Half-pixel-centred linear interpolation taps along one axis:
/// `(lo, hi, w_lo, w_hi)` per output index.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize (half-pixel centres, no corner alignment).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.chw();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(in_shape: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (_, out_h, out_w) = dout.chw();
    if (h, w) == (out_h, out_w) {
        return dout.clone();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for ch in 0..c {
        let g = &dout.data[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let d = &mut dx.data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    dx
}

/// Sub-pixel rearrangement `[C·r², H, W] -> [C, H·r, W·r]` with
/// `out[c, y·r+dy, x·r+dx] = in[c·r² + dy·r + dx, y, x]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (cin, h, w) = x.chw();
    ensure!(
        r >= 1 && cin % (r * r) == 0,
        Validation,
        "pixel shuffle needs channels divisible by r^2 = {}, got {}",
        r * r,
        cin
    );
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; cin * h * w];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let src_c = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(ch * oh + y * r + dy) * ow + xx * r + dx] =
                            x.data[(src_c * h + y) * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (c, oh, ow) = x.chw();
    ensure!(
        r >= 1 && oh % r == 0 && ow % r == 0,
        Validation,
        "pixel unshuffle needs spatial size divisible by {}, got {}x{}",
        r,
        oh,
        ow
    );
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let dst_c = ch * r * r + dy * r + dx;
                for y in 0..h {
                    for xx in 0..w {
                        out[(dst_c * h + y) * w + xx] = x.data[(ch * oh + y * r + dy) * ow + xx * r + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c * r * r, h, w], out)
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let hw = h * w;
    let data = x.data.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    Tensor {
        shape: vec![c],
        data,
    }
}

/// Concatenate `[C_i, H, W]` maps along channels.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    ensure!(!parts.is_empty(), Validation, "nothing to concatenate");
    let (_, h, w) = parts[0].chw();
    let mut data = Vec::new();
    let mut c = 0;
    for p in parts {
        let (pc, ph, pw) = p.chw();
        ensure!(
            (ph, pw) == (h, w),
            Validation,
            "cannot concatenate {}x{} with {}x{}",
            ph,
            pw,
            h,
            w
        );
        c += pc;
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Row-wise softmax of a row-major `rows × cols` matrix, in place.
pub fn softmax_rows(m: &mut [f64], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Non-local aggregation over flattened positions.
///
/// `q`, `k` are `[Ck, N]`, `v` is `[C, N]` (row-major). Returns the
/// aggregated `[C, N]` features and the `N × N` attention matrix.
pub fn attention_aggregate(q: &[f64], k: &[f64], v: &[f64], ck: usize, c: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut attn = vec![0.0; n * n];
    gemm(n, ck, n, q, true, k, false, &mut attn, 0.0);
    softmax_rows(&mut attn, n);
    let mut out = vec![0.0; c * n];
    gemm(c, n, n, v, false, &attn, true, &mut out, 0.0);
    (out, attn)
}

/// Gradients `(dq, dk, dv)` of [`attention_aggregate`].
pub fn attention_aggregate_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    attn: &[f64],
    dout: &[f64],
    ck: usize,
    c: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dv = vec![0.0; c * n];
    gemm(c, n, n, dout, false, attn, false, &mut dv, 0.0);
    let mut da = vec![0.0; n * n];
    gemm(n, c, n, dout, true, v, false, &mut da, 0.0);
    // softmax Jacobian, row by row
    let mut dd = da;
    for (row_d, row_a) in dd.chunks_mut(n).zip(attn.chunks(n)) {
        let dot: f64 = row_d.iter().zip(row_a).map(|(g, a)| g * a).sum();
        for (g, a) in row_d.iter_mut().zip(row_a) {
            *g = a * (*g - dot);
        }
    }
    let mut dq = vec![0.0; ck * n];
    gemm(ck, n, n, k, false, &dd, true, &mut dq, 0.0);
    let mut dk = vec![0.0; ck * n];
    gemm(ck, n, n, q, false, &dd, false, &mut dk, 0.0);
    (dq, dk, dv)
}
