//! Dense row-major `f64` tensors and the handful of kernels the recurrent
//! cells are assembled from.
//!
//! Spatial tensors are channel-first (`C×H×W`). All operations are pure: they
//! borrow their operands and return a fresh tensor.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Identity matrix of size `n×n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn flatten(&self) -> Self {
        Self::vector(self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    /// `1` where `u >= 0`, else `0`.
    pub fn heaviside(&self) -> Self {
        self.map(heaviside)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]; maps `0` and `1` to `∓∞`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn heaviside(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `weight · input` for a `[out×in]` matrix and an `[in]` vector.
pub fn matvec(weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (rows, cols) = match weight.shape() {
        &[r, c] => (r, c),
        s => return Err(Error::dim("matvec", s, input.shape())),
    };
    if input.len() != cols {
        return Err(Error::dim("matvec", weight.shape(), input.shape()));
    }
    let x = input.data();
    let mut out = vec![0.0; rows];
    for (o, row) in out.iter_mut().zip(weight.data().chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(w, x)| w * x).sum();
    }
    Ok(Tensor::vector(out))
}

/// `weightᵀ · grad`, the input gradient of [`matvec`].
pub(crate) fn matvec_transposed(weight: &Tensor, grad: &[f64]) -> Vec<f64> {
    let cols = weight.shape()[1];
    let mut out = vec![0.0; cols];
    for (row, &g) in weight.data().chunks_exact(cols).zip(grad) {
        if g == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * g;
        }
    }
    out
}

/// Accumulates the outer product `grad ⊗ input` into `acc`.
pub(crate) fn outer_accumulate(acc: &mut [f64], grad: &[f64], input: &[f64]) {
    let cols = input.len();
    for (row, &g) in acc.chunks_exact_mut(cols).zip(grad) {
        if g == 0.0 {
            continue;
        }
        for (a, x) in row.iter_mut().zip(input) {
            *a += g * x;
        }
    }
}

/// `weight · input + bias`.
pub fn affine(weight: &Tensor, input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let wx = matvec(weight, input)?;
    if bias.shape() != wx.shape() {
        return Err(Error::dim("affine", weight.shape(), bias.shape()));
    }
    wx.add(bias)
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding.0 - self.kernel_h) / self.stride.0 + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding.1 - self.kernel_w) / self.stride.1 + 1
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h(), self.out_w()]
    }

    /// Validates `input` and `kernel` shapes and builds the geometry.
    pub fn infer(
        input: &Tensor,
        kernel: &Tensor,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (&[c_in, h, w], &[c_out, k_in, kh, kw]) = (input.shape(), kernel.shape()) else {
            return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
        };
        if c_in != k_in {
            return Err(Error::dim("conv2d", input.shape(), kernel.shape()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if h + 2 * padding.0 < kh || w + 2 * padding.1 < kw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {h}×{w}"
            )));
        }
        Ok(Self {
            in_channels: c_in,
            out_channels: c_out,
            in_h: h,
            in_w: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        })
    }

    /// Valid output row range for kernel row `ky`: output rows `y` with
    /// `0 <= y*stride + ky - pad < in_h`.
    fn rows(&self, ky: usize) -> std::ops::Range<usize> {
        valid_range(ky, self.padding.0, self.stride.0, self.in_h, self.out_h())
    }

    fn cols(&self, kx: usize) -> std::ops::Range<usize> {
        valid_range(kx, self.padding.1, self.stride.1, self.in_w, self.out_w())
    }
}

fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
    // need y*stride + k >= pad and y*stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    lo..hi.max(lo)
}

/// Zero-padded "same" cross-correlation with stride 1 and an odd square
/// kernel. Output spatial extent equals the input's.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let k = same_padding(kernel)?;
    conv2d_general(input, kernel, Some(bias), (1, 1), (k, k))
}

/// Half-width of an odd square kernel, i.e. the padding for "same" mode.
pub fn same_padding(kernel: &Tensor) -> Result<usize> {
    match kernel.shape() {
        &[_, _, kh, kw] if kh == kw && kh % 2 == 1 => Ok(kh / 2),
        &[_, _, kh, kw] => Err(Error::Config(format!(
            "same-mode convolution needs an odd square kernel, got {kh}×{kw}"
        ))),
        s => Err(Error::dim("conv2d", s, &[])),
    }
}

/// Cross-correlation with arbitrary stride and zero padding, optional
/// per-output-channel bias.
pub fn conv2d_general(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let g = ConvGeometry::infer(input, kernel, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(Error::dim("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.out_channels * oh * ow];
    conv_forward_into(&g, input.data(), kernel.data(), &mut out);
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_exact_mut(oh * ow).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(g.out_shape(), out)
}

pub(crate) fn conv_forward_into(g: &ConvGeometry, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for co in 0..g.out_channels {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            let kbase = (co * g.in_channels + ci) * g.kernel_h * g.kernel_w;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let w = kernel[kbase + ky * g.kernel_w + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let cols = g.cols(kx);
                    for y in rows.clone() {
                        let iy = y * sy + ky - py;
                        let in_row = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        let out_row = &mut out_plane[y * ow..(y + 1) * ow];
                        for x in cols.clone() {
                            out_row[x] += w * in_row[x * sx + kx - px];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂input` for a convolution into `grad_in`.
pub(crate) fn conv_backward_input(g: &ConvGeometry, grad_out: &[f64], kernel: &[f64], grad_in: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for co in 0..g.out_channels {
        let gplane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.in_channels {
            let in_plane = &mut grad_in[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            let kbase = (co * g.in_channels + ci) * g.kernel_h * g.kernel_w;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let w = kernel[kbase + ky * g.kernel_w + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let cols = g.cols(kx);
                    for y in rows.clone() {
                        let iy = y * sy + ky - py;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        let irow = &mut in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        for x in cols.clone() {
                            irow[x * sx + kx - px] += w * grow[x];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `∂L/∂kernel` for a convolution into `grad_k`.
pub(crate) fn conv_backward_kernel(g: &ConvGeometry, grad_out: &[f64], input: &[f64], grad_k: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (sy, sx) = g.stride;
    let (py, px) = g.padding;
    for co in 0..g.out_channels {
        let gplane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
            let kbase = (co * g.in_channels + ci) * g.kernel_h * g.kernel_w;
            for ky in 0..g.kernel_h {
                let rows = g.rows(ky);
                for kx in 0..g.kernel_w {
                    let cols = g.cols(kx);
                    let mut acc = 0.0;
                    for y in rows.clone() {
                        let iy = y * sy + ky - py;
                        let grow = &gplane[y * ow..(y + 1) * ow];
                        let irow = &in_plane[iy * g.in_w..(iy + 1) * g.in_w];
                        for x in cols.clone() {
                            acc += grow[x] * irow[x * sx + kx - px];
                        }
                    }
                    grad_k[kbase + ky * g.kernel_w + kx] += acc;
                }
            }
        }
    }
}

/// 2×2 max-pooling with stride 2. Odd extents are padded with `-∞`, so the
/// output is `C×⌈H/2⌉×⌈W/2⌉`. Also returns the flat input index chosen for
/// each output cell (first maximum in row-major window order).
pub fn maxpool2d_with_indices(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let &[c, h, w] = input.shape() else {
        return Err(Error::dim("maxpool2d", input.shape(), &[0, 0, 0]));
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    let data = input.data();
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, x) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && x < w {
                            let i = (ch * h + y) * w + x;
                            if best_i == usize::MAX || data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    Ok((Tensor::new([c, oh, ow], out)?, idx))
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    maxpool2d_with_indices(input).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let b = Tensor::vector(vec![0.5, -1.0]);
        let zero_w = Tensor::zeros([2, 3]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(affine(&zero_w, &x, &b).unwrap(), b);

        let x2 = Tensor::vector(vec![4.0, -2.0]);
        assert_eq!(affine(&Tensor::eye(2), &x2, &Tensor::zeros([2])).unwrap(), x2);

        let w = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = affine(&w, &Tensor::vector(vec![1.0, 1.0]), &Tensor::zeros([2])).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let err = affine(&Tensor::zeros([2, 3]), &Tensor::zeros([4]), &Tensor::zeros([2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let input = Tensor::zeros([2, 3, 4]);
        let kernel = Tensor::full([3, 2, 3, 3], 0.7);
        let bias = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        assert_eq!(out.shape(), &[3, 3, 4]);
        for (ch, plane) in out.data().chunks(12).enumerate() {
            assert!(plane.iter().all(|&v| v == bias.data()[ch]));
        }
    }

    #[test]
    fn conv_pointwise_scaling() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let kernel = t(&[1, 1, 1, 1], &[2.0]);
        let out = conv2d(&input, &kernel, &Tensor::zeros([1])).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_ones_counts_neighbours() {
        let out = conv2d(&Tensor::ones([1, 3, 3]), &Tensor::ones([1, 1, 3, 3]), &Tensor::zeros([1])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_channel_mismatch() {
        let err = conv2d(&Tensor::ones([1, 4, 4]), &Tensor::ones([1, 1, 2, 2]), &Tensor::zeros([1])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = conv2d(&Tensor::ones([2, 4, 4]), &Tensor::ones([1, 1, 3, 3]), &Tensor::zeros([1])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn strided_conv_shape() {
        let out = conv2d_general(&Tensor::ones([1, 7, 9]), &Tensor::ones([2, 1, 3, 3]), None, (2, 2), (0, 0)).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn maxpool_examples() {
        assert_eq!(maxpool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap().data(), &[4.0]);
        assert_eq!(maxpool2d(&Tensor::full([2, 4, 4], 3.5)).unwrap(), Tensor::full([2, 2, 2], 3.5));
        let ramp: Vec<f64> = (1..=16).map(f64::from).collect();
        assert_eq!(maxpool2d(&t(&[1, 4, 4], &ramp)).unwrap().data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn maxpool_odd_extent_pads_with_neg_infinity() {
        let out = maxpool2d(&t(&[1, 3, 3], &[-1.0, -2.0, -3.0, -4.0, -5.0, -6.0, -7.0, -8.0, -9.0])).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[-1.0, -3.0, -7.0, -9.0]);
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(heaviside(0.5), 1.0);
        assert_eq!(heaviside(-0.5), 0.0);
        assert_eq!(heaviside(0.0), 1.0);
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        assert!(a.mul(&Tensor::zeros([3])).is_err());
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for p in [0.1, 0.5, 0.9, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(sigmoid(logit(0.0)), 0.0);
    }
}
