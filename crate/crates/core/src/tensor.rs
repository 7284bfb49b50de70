//! Dense `f64` tensors in NCHW layout, single-channel maps, and the raw
//! numeric kernels (convolution, pooling, resampling) that the autograd
//! graph dispatches to.

use crate::error::{Error, Result};

/// A 4-D tensor stored row-major as `[batch, channels, height, width]`.
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
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Copy of batch entry `n` as a one-element batch.
    pub fn slice_batch(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }

    /// Concatenate along `axis` (0 = batch, 1 = channels). All other
    /// dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(axis < 2, "concat supports the batch and channel axes only");
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        for p in parts {
            for d in 0..4 {
                if d != axis && p.shape[d] != first.shape[d] {
                    return Err(Error::Shape(format!(
                        "concat along axis {axis}: {:?} vs {:?}",
                        first.shape, p.shape
                    )));
                }
            }
        }
        let mut shape = first.shape;
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(&p.data);
            }
        } else {
            for n in 0..shape[0] {
                for p in parts {
                    data.extend_from_slice(p.sample(n));
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Channel range `[start, start + count)` of every batch entry.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(start + count <= c);
        let hw = h * w;
        let mut data = Vec::with_capacity(n * count * hw);
        for b in 0..n {
            let s = &self.sample(b)[start * hw..(start + count) * hw];
            data.extend_from_slice(s);
        }
        Tensor {
            shape: [n, count, h, w],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Mirror every plane left to right.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = self.shape[3];
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(w).zip(self.data.chunks(w)) {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        }
        out
    }
}

/// A single-channel `height × width` map (depth, ground truth, saliency).
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Map {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Map {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Map {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Map {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Map {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn expect_same_dims(&self, other: &Map) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "map sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// View as a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: [1, 1, self.height, self.width],
            data: self.data.clone(),
        }
    }

    /// First plane of a tensor.
    pub fn from_tensor_plane(t: &Tensor, n: usize, c: usize) -> Map {
        Map {
            height: t.height(),
            width: t.width(),
            data: t.plane(n, c).to_vec(),
        }
    }

    /// Bilinear resample with half-pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Map {
        let t = resize_bilinear(&self.to_tensor(), height, width);
        Map::from_tensor_plane(&t, 0, 0)
    }
}

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Size-preserving stride-1 convolution for an odd kernel.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = beta * c + a · b` with `a` logically `m × k` and `b` logically
/// `k × n`; either operand may be stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // dense row- or column-major layouts within those bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Visit every (column-matrix index, input index) pair that is inside
    /// the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let s = self.spec;
        let p = s.padding as isize;
        let n_cols = self.cols();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dy = (ky * s.dilation) as isize - p;
                    let dx = (kx * s.dilation) as isize - p;
                    for oy in 0..self.oh {
                        let iy = (oy * s.stride) as isize + dy;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let in_row = (ci * self.h + iy as usize) * self.w;
                        let col_row = row * n_cols + oy * self.ow;
                        for ox in 0..self.ow {
                            let ix = (ox * s.stride) as isize + dx;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(col_row + ox, in_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|ci, ii| cols[ci] = input[ii]);
    }

    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        self.for_each_tap(|ci, ii| grad_input[ii] += cols[ci]);
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Result<ConvGeometry> {
    let [_, c, h, wd] = x.shape();
    let [_, wc, kh, kw] = w.shape();
    if c != wc {
        return Err(Error::Shape(format!(
            "convolution expects {wc} input channels, got {c}"
        )));
    }
    let span_h = spec.dilation * (kh - 1) + 1;
    let span_w = spec.dilation * (kw - 1) + 1;
    if h + 2 * spec.padding < span_h || wd + 2 * spec.padding < span_w {
        return Err(Error::Shape(format!(
            "input {h}x{wd} smaller than kernel span {span_h}x{span_w}"
        )));
    }
    Ok(ConvGeometry {
        c,
        h,
        w: wd,
        kh,
        kw,
        oh: spec.output_size(h, kh),
        ow: spec.output_size(wd, kw),
        spec,
    })
}

/// 2-D cross-correlation. `weight` is `[out, in, kh, kw]`, `bias` is
/// `[1, out, 1, 1]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = conv_geometry(x, weight, spec)?;
    let n = x.batch();
    let o = weight.batch();
    let (rows, ncols) = (geo.rows(), geo.cols());
    let pointwise = spec.is_pointwise(geo.kh, geo.kw);
    let mut out = Tensor::zeros([n, o, geo.oh, geo.ow]);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; rows * ncols] };
    let out_len = o * ncols;
    for b in 0..n {
        let dst = &mut out.data[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (oc, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data[oc]);
            }
        }
        let src: &[f64] = if pointwise {
            x.sample(b)
        } else {
            geo.im2col(x.sample(b), &mut cols);
            &cols
        };
        gemm(o, rows, ncols, &weight.data, false, src, false, 1.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    spec: ConvSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let geo = conv_geometry(x, weight, spec)?;
    let n = x.batch();
    let o = weight.batch();
    let (rows, ncols) = (geo.rows(), geo.cols());
    let pointwise = spec.is_pointwise(geo.kh, geo.kw);
    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros([1, o, 1, 1]);
    let mut cols = vec![0.0; rows * ncols];
    let in_len = x.sample_len();
    for b in 0..n {
        let dy = grad_out.sample(b);
        for (oc, chunk) in dy.chunks(ncols).enumerate() {
            grad_b.data[oc] += chunk.iter().sum::<f64>();
        }
        if pointwise {
            gemm(o, ncols, rows, dy, false, x.sample(b), true, 1.0, &mut grad_w.data);
            let dx = &mut grad_x.data[b * in_len..(b + 1) * in_len];
            gemm(rows, o, ncols, &weight.data, true, dy, false, 0.0, dx);
        } else {
            geo.im2col(x.sample(b), &mut cols);
            gemm(o, ncols, rows, dy, false, &cols, true, 1.0, &mut grad_w.data);
            gemm(rows, o, ncols, &weight.data, true, dy, false, 0.0, &mut cols);
            let dx = &mut grad_x.data[b * in_len..(b + 1) * in_len];
            geo.col2im(&cols, dx);
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// 3×3 max-pooling, stride 1, padding 1 (padding never wins). Returns the
/// pooled tensor and, per output element, the flat input index selected.
pub fn max_pool3(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    let mut arg = vec![0u32; x.len()];
    let hw = h * w;
    for plane in 0..n * c {
        let base = plane * hw;
        let src = &x.data[base..base + hw];
        for y in 0..h {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            for xx in 0..w {
                let x0 = xx.saturating_sub(1);
                let x1 = (xx + 1).min(w - 1);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = y * w + xx;
                for yy in y0..=y1 {
                    for xi in x0..=x1 {
                        let v = src[yy * w + xi];
                        if v > best {
                            best = v;
                            best_i = yy * w + xi;
                        }
                    }
                }
                out.data[base + y * w + xx] = best;
                arg[base + y * w + xx] = (base + best_i) as u32;
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center sampling positions (the `align_corners = false`
/// convention): output pixel `o` samples input coordinate
/// `(o + 0.5) · in / out − 0.5`, clamped at the borders.
fn interp_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = interp_taps(h, out_h);
    let tx = interp_taps(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for plane in 0..n * c {
        let src = &x.data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                dst[oy * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, out_h, out_w] = grad_out.shape();
    if (in_h, in_w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = interp_taps(in_h, out_h);
    let tx = interp_taps(in_w, out_w);
    let mut grad = Tensor::zeros([n, c, in_h, in_w]);
    for plane in 0..n * c {
        let g = &grad_out.data[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let dst = &mut grad.data[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[a.lo * in_w + b.lo] += v * (1.0 - a.frac) * (1.0 - b.frac);
                dst[a.lo * in_w + b.hi] += v * (1.0 - a.frac) * b.frac;
                dst[a.hi * in_w + b.lo] += v * a.frac * (1.0 - b.frac);
                dst[a.hi * in_w + b.hi] += v * a.frac * b.frac;
            }
        }
    }
    grad
}
