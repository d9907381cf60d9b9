use num_traits::Float;

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// `c = a · b + beta · c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(usize, Self)> {
        let (c, h, w) = input.dims3()?;
        let (o, kc, kh, kw) = match kernel.shape() {
            &[o, kc, kh, kw] => (o, kc, kh, kw),
            s => return Err(shape_err!("kernel must be rank 4, got {:?}", s)),
        };
        if kc != c {
            return Err(shape_err!("kernel expects {} input channels, input has {}", kc, c));
        }
        if stride == 0 {
            return Err(Error::Param("stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!("kernel {}x{} larger than padded input {}x{}", kh, kw, h, w));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok((o, ConvGeom { c, h, w, kh, kw, stride, pad, ho, wo }))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let cols = self.ho * self.wo;
        let mut col = vec![0.0f32; self.rows() * cols];
        for ch in 0..self.c {
            let plane = &input[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let cols = self.ho * self.wo;
        let mut out = vec![0.0f32; self.c * self.h * self.w];
        for ch in 0..self.c {
            let plane = &mut out[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ch * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Discrete 2-D cross-correlation of a `C×H×W` input with an `O×C×kh×kw` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_bias(input, kernel, None, stride, padding)
}

/// [`conv2d`] plus a per-output-channel bias.
pub fn conv2d_bias(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (o, g) = ConvGeom::new(input, kernel, stride, padding)?;
    let cols = g.ho * g.wo;
    let mut out = vec![0.0f32; o * cols];
    if let Some(b) = bias {
        if b.numel() != o {
            return Err(shape_err!("bias has {} entries for {} outputs", b.numel(), o));
        }
        for (row, &bv) in out.chunks_mut(cols.max(1)).zip(b.data()) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    let k = g.rows();
    if g.is_pointwise() {
        gemm(o, k, cols, kernel.data(), (k as isize, 1), input.data(), (cols as isize, 1), beta, &mut out);
    } else {
        let col = g.im2col(input.data());
        gemm(o, k, cols, kernel.data(), (k as isize, 1), &col, (cols as isize, 1), beta, &mut out);
    }
    Tensor::new(vec![o, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let (o, g) = ConvGeom::new(input, kernel, stride, padding)?;
    if grad_out.shape() != [o, g.ho, g.wo] {
        return Err(shape_err!("conv grad shape {:?} != {:?}", grad_out.shape(), [o, g.ho, g.wo]));
    }
    let cols = g.ho * g.wo;
    let k = g.rows();
    let col_owned;
    let col: &[f32] = if g.is_pointwise() {
        input.data()
    } else {
        col_owned = g.im2col(input.data());
        &col_owned
    };
    // dK = dY · colᵀ
    let mut dk = vec![0.0f32; o * k];
    gemm(o, cols, k, grad_out.data(), (cols as isize, 1), col, (1, cols as isize), 0.0, &mut dk);
    // dcol = Kᵀ · dY
    let mut dcol = vec![0.0f32; k * cols];
    gemm(k, o, cols, kernel.data(), (1, k as isize), grad_out.data(), (cols as isize, 1), 0.0, &mut dcol);
    let dx = if g.is_pointwise() { dcol } else { g.col2im(&dcol) };
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

/// Per-channel sum of a rank-3 gradient (the bias gradient of a convolution).
pub fn channel_sums(grad: &Tensor) -> Result<Tensor> {
    let (c, h, w) = grad.dims3()?;
    let data = (0..c).map(|ch| grad.data()[ch * h * w..(ch + 1) * h * w].iter().sum()).collect();
    Tensor::new(vec![c], data)
}

fn pool_dims(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(2), w.div_ceil(2))
}

/// Non-overlapping 2×2 mean pooling of every channel.
///
/// Odd trailing rows/columns are replicated, so output dims are `ceil(in/2)`.
pub fn avg_pool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    if window != 2 {
        return Err(Error::Unsupported(format!("pooling window {window} (only 2 is supported)")));
    }
    let (c, h, w) = input.dims3()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("cannot pool an empty {}x{} map", h, w));
    }
    let (ho, wo) = pool_dims(h, w);
    let mut out = vec![0.0f32; c * ho * wo];
    for ch in 0..c {
        let src = &input.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..wo {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let s = src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1];
                dst[oy * wo + ox] = s * 0.25;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Adjoint of [`avg_pool2d`] for an input of spatial size `h × w`.
pub fn avg_pool2d_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, ho, wo) = grad_out.dims3()?;
    if (ho, wo) != pool_dims(h, w) {
        return Err(shape_err!("pool grad {}x{} does not match input {}x{}", ho, wo, h, w));
    }
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let g = &grad_out.data()[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let y0 = 2 * oy;
            let y1 = (y0 + 1).min(h - 1);
            for ox in 0..wo {
                let x0 = 2 * ox;
                let x1 = (x0 + 1).min(w - 1);
                let v = g[oy * wo + ox] * 0.25;
                dst[y0 * w + x0] += v;
                dst[y0 * w + x1] += v;
                dst[y1 * w + x0] += v;
                dst[y1 * w + x1] += v;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Bilinear corner indices and weights for a sample at `(x, y)`; corners outside
/// the `h × w` grid are dropped (zero padding).
#[inline]
pub(crate) fn bilinear_taps(h: usize, w: usize, x: f32, y: f32) -> ([(usize, f32); 4], usize, f32, f32) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut taps = [(0usize, 0.0f32); 4];
    let mut n = 0;
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (cx, cy, wt) in corners {
        if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h {
            taps[n] = (cy as usize * w + cx as usize, wt);
            n += 1;
        }
    }
    (taps, n, fx, fy)
}

/// Bilinear value of an `h × w` plane at `(x, y)`, zero outside the grid.
#[inline]
pub fn sample_plane(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let (taps, n, _, _) = bilinear_taps(h, w, x, y);
    taps[..n].iter().map(|&(i, wt)| plane[i] * wt).sum()
}

#[inline]
fn plane_at(plane: &[f32], h: usize, w: usize, x: isize, y: isize) -> f32 {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Partial derivatives `(d/dx, d/dy)` of [`sample_plane`] at `(x, y)`
/// (right-sided at grid nodes).
#[inline]
pub fn sample_plane_slope(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> (f32, f32) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let v00 = plane_at(plane, h, w, x0, y0);
    let v10 = plane_at(plane, h, w, x0 + 1, y0);
    let v01 = plane_at(plane, h, w, x0, y0 + 1);
    let v11 = plane_at(plane, h, w, x0 + 1, y0 + 1);
    let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let dy = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    (dx, dy)
}

/// Adds `g` into `grad_plane` at the bilinear taps of `(x, y)`.
#[inline]
pub fn scatter_plane(grad_plane: &mut [f32], h: usize, w: usize, x: f32, y: f32, g: f32) {
    let (taps, n, _, _) = bilinear_taps(h, w, x, y);
    for &(i, wt) in &taps[..n] {
        grad_plane[i] += g * wt;
    }
}

/// Samples every channel of `input` (`C×H×W`) at the `(x, y)` pairs stored in
/// `coords` (`2×Ho×Wo`, channel 0 = x). Outside the grid contributes zero.
pub fn bilinear_sample(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (two, ho, wo) = coords.dims3()?;
    if two != 2 {
        return Err(shape_err!("coords need 2 channels, got {}", two));
    }
    let n = ho * wo;
    let (xs, ys) = coords.data().split_at(n);
    let mut out = vec![0.0f32; c * n];
    for ch in 0..c {
        let plane = input.plane(ch);
        for i in 0..n {
            out[ch * n + i] = sample_plane(plane, h, w, xs[i], ys[i]);
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(shape_err!("cannot resize {}x{} to {}x{}", h, w, out_h, out_w));
    }
    let axis = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f32 + 0.5) * (n_in as f32 / n_out as f32) - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        let p = input.plane(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Max-subtracted softmax over a strided run of `n` elements.
pub fn softmax_strided<T: Float>(values: &mut [T], offset: usize, n: usize, stride: usize) {
    if n == 0 {
        return;
    }
    let mut max = T::neg_infinity();
    for i in 0..n {
        max = max.max(values[offset + i * stride]);
    }
    let mut sum = T::zero();
    for i in 0..n {
        let e = (values[offset + i * stride] - max).exp();
        values[offset + i * stride] = e;
        sum = sum + e;
    }
    for i in 0..n {
        values[offset + i * stride] = values[offset + i * stride] / sum;
    }
}

pub fn softmax_slice<T: Float>(values: &mut [T]) {
    let n = values.len();
    softmax_strided(values, 0, n, 1);
}

/// Softmax of `input` along `axis`.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(shape_err!("axis {} out of range for rank {}", axis, shape.len()));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = input.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            softmax_strided(data, o * n * inner + i, n, inner);
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn tanh(input: &Tensor) -> Tensor {
    input.map(f32::tanh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (c, h, w) = x.dims3().unwrap();
        let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let kv = k.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    s += kv as f64 * x.at3(ic, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::full(&[1, 6, 6], 0.5);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn strided_padded_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &k, 2, 1)) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_backward_matches_adjoint_identity() {
        // <conv(x), g> == <x, dX> and == <k, dK> since conv is bilinear.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, kk) in &[(1, 1, 3), (2, 1, 3), (3, 0, 3), (1, 0, 1), (1, 3, 7)] {
            let x = random(&[3, 9, 12], &mut rng);
            let k = random(&[4, 3, kk, kk], &mut rng);
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let g = random(y.shape(), &mut rng);
            let (dx, dk) = conv2d_backward(&x, &k, &g, stride, pad).unwrap();
            let dot = |a: &Tensor, b: &Tensor| -> f64 {
                a.data().iter().zip(b.data()).map(|(p, q)| *p as f64 * *q as f64).sum()
            };
            let lhs = dot(&y, &g);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - dot(&k, &dk)).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_constant_and_block() {
        let x = Tensor::full(&[2, 4, 6], 3.0);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        let b = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool2d(&b, 2).unwrap().data(), &[2.5]);
    }

    #[test]
    fn pool_odd_dims_replicate_edge() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // Enumerate window members with the last row/column repeated.
        let at = |r: usize, c: usize| (r.min(2) * 3 + c.min(2)) as f32;
        for oy in 0..2 {
            for ox in 0..2 {
                let (r, c) = (2 * oy, 2 * ox);
                let expect = (at(r, c) + at(r, c + 1) + at(r + 1, c) + at(r + 1, c + 1)) / 4.0;
                assert_eq!(y.at3(0, oy, ox), expect);
            }
        }
    }

    #[test]
    fn pool_rejects_other_windows() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(avg_pool2d(&x, 3), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 5, 7], &mut rng);
        let y = avg_pool2d(&x, 2).unwrap();
        let g = random(y.shape(), &mut rng);
        let dx = avg_pool2d_backward(&g, 5, 7).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn bilinear_nodes_midpoints_and_outside() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0]).unwrap();
        let coords = Tensor::new(
            vec![2, 1, 4],
            vec![2.0, 0.5, -2.5, -0.5, 1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let y = bilinear_sample(&x, &coords).unwrap();
        assert_eq!(y.data()[0], 32.0);
        assert_eq!(y.data()[1], 1.5);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[3], 0.5);
    }

    #[test]
    fn softmax_cases() {
        let u = Tensor::full(&[5], 0.3);
        assert!(softmax(&u, 0).unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let mut two = [0.0f64, 10.0];
        softmax_slice(&mut two);
        // mpmath, 40 digits
        assert!((two[0] - 4.539786870243439450e-5).abs() < 1e-9);
        assert!((two[1] - 0.99995460213129756561).abs() < 1e-9);
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, -1.0, 2.0, 2.0, 0.0]).unwrap();
        let s = softmax(&x, 1).unwrap();
        assert!((s.data()[0..3].iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let s0 = softmax(&x, 0).unwrap();
        assert!((s0.data()[0] + s0.data()[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_halving_averages_pairs() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let y = resize_bilinear(&x, 2, 2).unwrap();
        assert_eq!(y.data()[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 6, 5], &mut rng);
            let z = random(&[2, 6, 5], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let mix = x.zip_map(&z, |p, q| a * p + b * q).unwrap();
            let lhs = conv2d(&mix, &k, 1, 1).unwrap();
            let cx = conv2d(&x, &k, 1, 1).unwrap();
            let cz = conv2d(&z, &k, 1, 1).unwrap();
            let scale = lhs.max_abs().max(1.0);
            for i in 0..lhs.numel() {
                let rhs = a * cx.data()[i] + b * cz.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * scale * 4.0);
            }
        }

        #[test]
        fn pool_commutes_with_scaling(seed in 0u64..1000, s in prop::sample::select(vec![0.5f32, 2.0, -4.0, 0.25])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 5, 6], &mut rng);
            let lhs = avg_pool2d(&x.scale(s), 2).unwrap();
            let rhs = avg_pool2d(&x, 2).unwrap().scale(s);
            prop_assert!(lhs.bitwise_eq(&rhs));
        }

        #[test]
        fn bilinear_exact_at_nodes(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 4, 5], &mut rng);
            let coords = Tensor::from_fn(&[2, 4, 5], |i| {
                let p = i % 20;
                if i < 20 { (p % 5) as f32 } else { (p / 5) as f32 }
            });
            prop_assert!(bilinear_sample(&x, &coords).unwrap().bitwise_eq(&x));
        }

        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(v in prop::collection::vec(-20.0f32..20.0, 1..30), c in -50.0f32..50.0) {
            let x = Tensor::new(vec![v.len()], v.clone()).unwrap();
            let s = softmax(&x, 0).unwrap();
            prop_assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
            let t = softmax(&x.map(|q| q + c), 0).unwrap();
            // shifted inputs are rounded to f32, which perturbs logit gaps by up to eps·|v + c|
            let tol = 2.0 * 70.0 * f32::EPSILON;
            for (p, q) in s.data().iter().zip(t.data()) {
                prop_assert!((p - q).abs() < 1e-6 + tol * p.max(*q));
            }
        }
    }
}
