//! Forward and backward kernels for the layers the detector uses.
//!
//! Convolution is im2col + GEMM. Backward functions accumulate parameter
//! gradients into caller-provided buffers, which is what lets the shared
//! dilated kernel sum contributions from all of its branches.

use crate::error::{Error, Result};
use crate::net::{matmul, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    /// Stride-1 convolution padded so a `kernel x kernel` window keeps the
    /// spatial size.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation * (kernel / 2),
            dilation,
        }
    }

    fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kernel: usize) -> bool {
        kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn conv_geom<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> Result<ConvGeom> {
    let [cout, cin, kh, kw] = weight.shape();
    if cin != input.c() {
        return Err(Error::Shape(format!(
            "conv weight expects {cin} input channels, got {}",
            input.c()
        )));
    }
    if kh != kw || kh == 0 {
        return Err(Error::Shape(format!(
            "only square kernels are supported, got {kh}x{kw}"
        )));
    }
    let ho = spec.out_dim(input.h(), kh);
    let wo = spec.out_dim(input.w(), kw);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvGeom {
            cin,
            cout,
            k: kh,
            h: input.h(),
            w: input.w(),
            ho,
            wo,
        }),
        _ => Err(Error::Shape(format!(
            "input {:?} too small for kernel {kh} with {spec:?}",
            input.shape()
        ))),
    }
}

/// Range of output columns whose input column `ox * stride + offset` lies
/// inside `[0, len)`.
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi = if (len as isize) <= offset {
        0
    } else {
        ((len as isize - offset) + s - 1) / s
    };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len).max(lo);
    (lo, hi)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, spec: ConvSpec, col: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let row_off = (ki * spec.dilation) as isize - spec.pad as isize;
            for kj in 0..g.k {
                let col_off = (kj * spec.dilation) as isize - spec.pad as isize;
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[r * plane..(r + 1) * plane];
                let (x_lo, x_hi) = valid_range(col_off, spec.stride, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride) as isize + row_off;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..x_lo].iter_mut().for_each(|v| *v = T::zero());
                    out[x_hi..].iter_mut().for_each(|v| *v = T::zero());
                    if spec.stride == 1 {
                        let start = (x_lo as isize + col_off) as usize;
                        out[x_lo..x_hi].copy_from_slice(&line[start..start + (x_hi - x_lo)]);
                    } else {
                        for ox in x_lo..x_hi {
                            out[ox] = line[((ox * spec.stride) as isize + col_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, spec: ConvSpec, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let row_off = (ki * spec.dilation) as isize - spec.pad as isize;
            for kj in 0..g.k {
                let col_off = (kj * spec.dilation) as isize - spec.pad as isize;
                let r = (c * g.k + ki) * g.k + kj;
                let src = &col[r * plane..(r + 1) * plane];
                let (x_lo, x_hi) = valid_range(col_off, spec.stride, g.w, g.wo);
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride) as isize + row_off;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in x_lo..x_hi {
                        line[((ox * spec.stride) as isize + col_off) as usize] += row[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input (N, Cin, H, W)` with `weight (Cout, Cin, K, K)`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T], spec: ConvSpec) -> Result<Tensor<T>> {
    let g = conv_geom(input, weight, spec)?;
    if bias.len() != g.cout {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} outputs",
            bias.len(),
            g.cout
        )));
    }
    let plane = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let mut out = Tensor::zeros([input.n(), g.cout, g.ho, g.wo]);
    let mut col = if spec.is_pointwise(g.k) {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    for n in 0..input.n() {
        let x = input.sample(n);
        let y = out.sample_mut(n);
        for (o, &b) in bias.iter().enumerate() {
            y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b);
        }
        let cols: &[T] = if spec.is_pointwise(g.k) {
            x
        } else {
            im2col(x, &g, spec, &mut col);
            &col
        };
        matmul(g.cout, kdim, plane, weight.data(), false, cols, false, y, true);
    }
    Ok(out)
}

/// Accumulates weight and bias gradients into `dweight` / `dbias` and
/// returns the input gradient when `want_input_grad` is set.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    want_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let g = conv_geom(input, weight, spec)?;
    if grad_out.shape() != [input.n(), g.cout, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} does not match {:?}",
            grad_out.shape(),
            [input.n(), g.cout, g.ho, g.wo]
        )));
    }
    if dweight.len() != weight.len() || dbias.len() != g.cout {
        return Err(Error::Shape("conv gradient buffers have the wrong size".into()));
    }
    let plane = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let pointwise = spec.is_pointwise(g.k);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    let mut dx = want_input_grad.then(|| Tensor::zeros(input.shape()));
    for n in 0..input.n() {
        let gy = grad_out.sample(n);
        for (o, db) in dbias.iter_mut().enumerate() {
            *db += gy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
        let x = input.sample(n);
        let cols: &[T] = if pointwise {
            x
        } else {
            im2col(x, &g, spec, &mut col);
            &col
        };
        // dW (Cout x kdim) += gy (Cout x plane) * cols^T
        matmul(g.cout, plane, kdim, gy, false, cols, true, dweight, true);
        if let Some(dx) = dx.as_mut() {
            let dxn = dx.sample_mut(n);
            if pointwise {
                matmul(kdim, g.cout, plane, weight.data(), true, gy, false, dxn, false);
            } else {
                matmul(kdim, g.cout, plane, weight.data(), true, gy, false, &mut col, false);
                col2im(&col, &g, spec, dxn);
            }
        }
    }
    Ok(dx)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_inplace(&mut out);
    out
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient of ReLU given its *output*; zero where the output is zero.
pub fn relu_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = grad_out.clone();
    relu_backward_inplace(output, &mut g)?;
    Ok(g)
}

pub fn relu_backward_inplace<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    if output.shape() != grad.shape() {
        return Err(Error::Shape(format!("relu {:?} vs {:?}", output.shape(), grad.shape())));
    }
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(())
}

/// 2x2 max pooling with stride 2; odd sizes round up and the partial window
/// covers only the valid pixels. `argmax` holds the winning in-plane offset,
/// ties going to the earlier pixel in row-major order.
pub struct MaxPool<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> MaxPool<T> {
    let [n, c, h, w] = input.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut output = Tensor::zeros([n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    let data = input.data();
    let out = output.data_mut();
    for p in 0..n * c {
        let src = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let v = src[iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    MaxPool { output, argmax }
}

pub fn maxpool2x2_backward<T: Real>(
    input_shape: [usize; 4],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    let expect = [n, c, h.div_ceil(2), w.div_ceil(2)];
    if grad_out.shape() != expect || argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool gradient {:?}, expected {expect:?}",
            grad_out.shape()
        )));
    }
    let plane_out = expect[2] * expect[3];
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (o, (&g, &a)) in grad_out.data().iter().zip(argmax).enumerate() {
        let p = o / plane_out;
        dxd[p * h * w + a as usize] += g;
    }
    Ok(dx)
}

/// Channel concatenation `(N, Ca, H, W) ++ (N, Cb, H, W)`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "cannot concat {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
    for n in 0..na {
        let dst = out.sample_mut(n);
        let sa = a.sample(n);
        dst[..sa.len()].copy_from_slice(sa);
        dst[sa.len()..].copy_from_slice(b.sample(n));
    }
    Ok(out)
}

/// Splits a concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(grad: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad.shape();
    if first > c {
        return Err(Error::Shape(format!("cannot split {c} channels at {first}")));
    }
    let mut a = Tensor::zeros([n, first, h, w]);
    let mut b = Tensor::zeros([n, c - first, h, w]);
    for i in 0..n {
        let src = grad.sample(i);
        let split = first * h * w;
        a.sample_mut(i).copy_from_slice(&src[..split]);
        b.sample_mut(i).copy_from_slice(&src[split..]);
    }
    Ok((a, b))
}

/// Source index pair and weight of the second tap for each output
/// coordinate of a 2x upsampling along one axis. Source positions are
/// `(o + 0.5) / 2 - 0.5`, clamped to the border.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            if i0 + 1 >= len {
                (len - 1, len - 1, 0.0)
            } else {
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

pub fn bilinear_upsample_x2_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.shape();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (ow, plane_in, plane_out) = (2 * w, h * w, 4 * h * w);
    let src_all = input.data();
    let dst_all = out.data_mut();
    for p in 0..n * c {
        let src = &src_all[p * plane_in..(p + 1) * plane_in];
        let dst = &mut dst_all[p * plane_out..(p + 1) * plane_out];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Transpose of the sampling matrix applied in the forward pass.
pub fn bilinear_upsample_x2_backward<T: Real>(input_shape: [usize; 4], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c, 2 * h, 2 * w] {
        return Err(Error::Shape(format!(
            "upsample gradient {:?} for input {input_shape:?}",
            grad_out.shape()
        )));
    }
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor::zeros(input_shape);
    let (ow, plane_in, plane_out) = (2 * w, h * w, 4 * h * w);
    let g_all = grad_out.data();
    let d_all = dx.data_mut();
    for p in 0..n * c {
        let g = &g_all[p * plane_out..(p + 1) * plane_out];
        let d = &mut d_all[p * plane_in..(p + 1) * plane_in];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[y0 * w + x0] += top * (T::one() - fx);
                d[y0 * w + x1] += top * fx;
                d[y1 * w + x0] += bot * (T::one() - fx);
                d[y1 * w + x1] += bot * fx;
            }
        }
    }
    Ok(dx)
}
