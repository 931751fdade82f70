//! Dense rank-4 tensors, the float convolution, and bicubic resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A dense `(batch, channels, height, width)` array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d >= 1), "tensor dims must be >= 1");
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("shape", 1, 0));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::dim("data length", n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let [_, c, h, w] = shape;
        for (i, v) in t.data.iter_mut().enumerate() {
            let x = i % w;
            let y = (i / w) % h;
            let ch = (i / (w * h)) % c;
            let b = i / (w * h * c);
            *v = f([b, ch, y, x]);
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((b * cs + c) * hs + h) * ws + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    /// The `h * w` plane of channel `c` in image `b`.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * n;
        &self.data[start..start + n]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// All channels of image `b`, contiguous.
    pub fn image(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copy of image `b` as a batch-of-one tensor.
    pub fn select(&self, b: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.image(b).to_vec(),
        }
    }

    /// Concatenate equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(Error::dim("batch", 1, 0))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut batch = 0;
        for t in items {
            check_same_chw(first, t)?;
            data.extend_from_slice(&t.data);
            batch += t.batch();
        }
        Tensor::from_vec([batch, c, h, w], data)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        check_same(self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn check_same_chw(a: &Tensor, b: &Tensor) -> Result<()> {
    const AXES: [&str; 4] = ["batch", "channels", "height", "width"];
    for axis in 1..4 {
        if a.shape[axis] != b.shape[axis] {
            return Err(Error::dim(AXES[axis], a.shape[axis], b.shape[axis]));
        }
    }
    Ok(())
}

pub(crate) fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape[0] != b.shape[0] {
        return Err(Error::dim("batch", a.shape[0], b.shape[0]));
    }
    check_same_chw(a, b)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Blocked repetition along channels: output channel `j * C + i` is input channel `i`.
pub fn repeat_channels(x: &Tensor, times: usize) -> Result<Tensor> {
    if times == 0 {
        return Err(Error::dim("repeat times", 1, 0));
    }
    repeat_channels_to(x, x.channels() * times)
}

/// Blocked repetition truncated (or extended) to exactly `out_channels`.
pub fn repeat_channels_to(x: &Tensor, out_channels: usize) -> Result<Tensor> {
    if out_channels == 0 {
        return Err(Error::dim("channels", 1, 0));
    }
    let [b, c, h, w] = x.shape;
    let mut out = Tensor::zeros([b, out_channels, h, w]);
    for bi in 0..b {
        for oc in 0..out_channels {
            out.plane_mut(bi, oc).copy_from_slice(x.plane(bi, oc % c));
        }
    }
    Ok(out)
}

/// Adjoint of [`repeat_channels_to`]: sums every copy back onto its source channel.
pub fn repeat_channels_adjoint(grad: &Tensor, in_channels: usize) -> Tensor {
    let [b, oc, h, w] = grad.shape;
    let mut out = Tensor::zeros([b, in_channels, h, w]);
    for bi in 0..b {
        for c in 0..oc {
            let src = grad.plane(bi, c);
            for (d, s) in out.plane_mut(bi, c % in_channels).iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Stride-1 convolution geometry. Padding cells take `pad_value`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
    pub pad_value: f64,
}

impl ConvSpec {
    /// Odd square kernel with "same" zero padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            padding: (kernel - 1) / 2,
            pad_value: 0.0,
        }
    }

    /// No padding; output shrinks by `kernel - 1`.
    pub fn valid(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            padding: 0,
            pad_value: 0.0,
        }
    }

    pub fn with_pad_value(mut self, v: f64) -> Self {
        self.pad_value = v;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h {
            return Err(Error::dim("height", self.kernel_h, ph));
        }
        if pw < self.kernel_w {
            return Err(Error::dim("width", self.kernel_w, pw));
        }
        Ok((ph - self.kernel_h + 1, pw - self.kernel_w + 1))
    }

    pub(crate) fn check(&self, x: &Tensor, w: &Tensor) -> Result<(usize, usize)> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::dim("kernel", 1, 0));
        }
        if x.channels() != self.in_channels {
            return Err(Error::dim("input channels", self.in_channels, x.channels()));
        }
        let [o, i, kh, kw] = w.shape();
        if o != self.out_channels {
            return Err(Error::dim("weight out channels", self.out_channels, o));
        }
        if i != self.in_channels {
            return Err(Error::dim("weight in channels", self.in_channels, i));
        }
        if kh != self.kernel_h {
            return Err(Error::dim("kernel height", self.kernel_h, kh));
        }
        if kw != self.kernel_w {
            return Err(Error::dim("kernel width", self.kernel_w, kw));
        }
        self.output_hw(x.height(), x.width())
    }
}

/// Lower one image to a `(C_in*K_h*K_w) x (H_out*W_out)` patch matrix.
fn im2col(x: &Tensor, b: usize, spec: &ConvSpec, oh: usize, ow: usize, cols: &mut [f64]) {
    let (h, w) = (x.height(), x.width());
    let p = spec.padding as isize;
    let npix = oh * ow;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = x.plane(b, c);
        for kh in 0..spec.kernel_h {
            for kw in 0..spec.kernel_w {
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for y in 0..oh {
                    let iy = y as isize + kh as isize - p;
                    let drow = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(spec.pad_value);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kw as isize - p;
                    for (xo, d) in drow.iter_mut().enumerate() {
                        let ix = xo as isize + shift;
                        *d = if ix < 0 || ix >= w as isize {
                            spec.pad_value
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto one image (padding cells dropped).
fn col2im(cols: &[f64], spec: &ConvSpec, oh: usize, ow: usize, out: &mut Tensor, b: usize) {
    let (h, w) = (out.height(), out.width());
    let p = spec.padding as isize;
    let npix = oh * ow;
    let mut row = 0;
    for c in 0..spec.in_channels {
        let plane = out.plane_mut(b, c);
        for kh in 0..spec.kernel_h {
            for kw in 0..spec.kernel_w {
                let src = &cols[row * npix..(row + 1) * npix];
                for y in 0..oh {
                    let iy = y as isize + kh as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kw as isize - p;
                    let x0 = (-shift).max(0) as usize;
                    let x1 = ((w as isize - shift).min(ow as isize)).max(0) as usize;
                    for xo in x0..x1 {
                        dst[(xo as isize + shift) as usize] += src[y * ow + xo];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the strides above.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Full-precision stride-1 convolution, no bias.
pub fn conv2d_fp(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (oh, ow) = spec.check(x, w)?;
    let kdim = spec.in_channels * spec.kernel_h * spec.kernel_w;
    let npix = oh * ow;
    let mut out = Tensor::zeros([x.batch(), spec.out_channels, oh, ow]);
    let mut cols = vec![0.0; kdim * npix];
    let img = spec.out_channels * npix;
    for b in 0..x.batch() {
        im2col(x, b, spec, oh, ow, &mut cols);
        let dst = &mut out.data[b * img..(b + 1) * img];
        gemm(spec.out_channels, kdim, npix, w.data(), false, &cols, false, dst, 0.0);
    }
    Ok(out)
}

/// Gradients of [`conv2d_fp`]: `(d/dx if requested, d/dw)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (oh, ow) = spec.check(x, w)?;
    let expect = [x.batch(), spec.out_channels, oh, ow];
    if grad_out.shape() != expect {
        return Err(Error::dim("grad_out", expect.iter().product(), grad_out.len()));
    }
    let kdim = spec.in_channels * spec.kernel_h * spec.kernel_w;
    let npix = oh * ow;
    let mut cols = vec![0.0; kdim * npix];
    let mut grad_w = Tensor::zeros(w.shape());
    let mut grad_x = want_input_grad.then(|| Tensor::zeros(x.shape()));
    let img = spec.out_channels * npix;
    for b in 0..x.batch() {
        let g = &grad_out.data[b * img..(b + 1) * img];
        im2col(x, b, spec, oh, ow, &mut cols);
        gemm(spec.out_channels, npix, kdim, g, false, &cols, true, &mut grad_w.data, 1.0);
        if let Some(gx) = grad_x.as_mut() {
            gemm(kdim, spec.out_channels, npix, w.data(), true, g, false, &mut cols, 0.0);
            col2im(&cols, spec, oh, ow, gx, b);
        }
    }
    Ok((grad_x, grad_w))
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample `(first input index, normalized weights)`, antialiased when shrinking.
fn resize_weights(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = n_out as f64 / n_in as f64;
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let lo = libm::floor(center - support) as isize;
            let hi = libm::ceil(center + support) as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..=hi {
                let wv = stretch * cubic(stretch * (center - j as f64));
                if wv != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(wv);
                }
            }
            let total: f64 = wts.iter().sum();
            for wv in &mut wts {
                *wv /= total;
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resampling (a = -0.5, replicate borders, antialiased downscale).
pub fn resize_bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [b, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let wx = resize_weights(w, out_w);
    let wy = resize_weights(h, out_h);
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    let mut tmp = vec![0.0; h * out_w];
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            for y in 0..h {
                let row = &src[y * w..(y + 1) * w];
                for (xo, (idx, wts)) in wx.iter().enumerate() {
                    tmp[y * out_w + xo] = idx.iter().zip(wts).map(|(&j, wv)| row[j] * wv).sum();
                }
            }
            let dst = out.plane_mut(bi, ci);
            for (yo, (idx, wts)) in wy.iter().enumerate() {
                for xo in 0..out_w {
                    dst[yo * out_w + xo] =
                        idx.iter().zip(wts).map(|(&j, wv)| tmp[j * out_w + xo] * wv).sum();
                }
            }
        }
    }
    out
}
