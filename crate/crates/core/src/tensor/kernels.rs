//! Forward and backward kernels on plain tensors.
//!
//! All reductions run in a fixed index order so results are bitwise
//! reproducible from run to run.

use super::Tensor;
use crate::error::{Error, Result};

/// Column block width for the convolution GEMMs; keeps one block of the
/// patch matrix and of the output rows resident in cache.
const COL_BLOCK: usize = 512;

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what}: expected a 4-d tensor, got {:?}",
            t.shape()
        ))),
    }
}

/// Split `[N, C, ...]` into `(N, C, product(...))`.
fn dims_nc(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    if t.ndim() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected at least 2 dims, got {:?}",
            t.shape()
        )));
    }
    let rest = t.shape()[2..].iter().product();
    Ok((t.dim(0), t.dim(1), rest))
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with four interleaved partial sums (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "sub")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * s).collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v * sigmoid(v)).collect(),
    )
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// `[M, K] x [K, N] -> [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )))
        }
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a.data()[i * k + p], &b.data()[p * n..(p + 1) * n], row);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `matmul` with respect to both operands.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dc: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.dim(0), a.dim(1));
    let n = b.dim(1);
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dc_row = &dc.data()[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] = dot(dc_row, &b.data()[p * n..(p + 1) * n]);
        }
    }
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let dc_row = &dc.data()[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a.data()[i * k + p], dc_row, &mut db[p * n..(p + 1) * n]);
        }
    }
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

/// Adds `bias` (shape `[C]` or `[N, C]`) to every position of `x: [N, C, ...]`.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, rest) = dims_nc(x, "add_channel_bias")?;
    let per_sample = match bias.shape() {
        [bc] if *bc == c => false,
        [bn, bc] if *bn == n && *bc == c => true,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "add_channel_bias: bias {:?} for input {:?}",
                bias.shape(),
                x.shape()
            )))
        }
    };
    let mut out = x.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let b = if per_sample {
                bias.data()[s * c + ch]
            } else {
                bias.data()[ch]
            };
            let start = (s * c + ch) * rest;
            for v in &mut out[start..start + rest] {
                *v += b;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn add_channel_bias_backward(x_shape: &[usize], bias_shape: &[usize], dy: &Tensor) -> Tensor {
    let n = x_shape[0];
    let c = x_shape[1];
    let rest: usize = x_shape[2..].iter().product();
    let mut db = vec![0.0; bias_shape.iter().product()];
    let per_sample = bias_shape.len() == 2;
    for s in 0..n {
        for ch in 0..c {
            let start = (s * c + ch) * rest;
            let g: f64 = dy.data()[start..start + rest].iter().sum();
            if per_sample {
                db[s * c + ch] += g;
            } else {
                db[ch] += g;
            }
        }
    }
    Tensor::from_parts(bias_shape.to_vec(), db)
}

/// Concatenates `[N, C1, ...]` and `[N, C2, ...]` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ra) = dims_nc(a, "concat_channels")?;
    let (nb, cb, rb) = dims_nc(b, "concat_channels")?;
    if na != nb || ra != rb || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        out.extend_from_slice(&a.data()[s * ca * ra..(s + 1) * ca * ra]);
        out.extend_from_slice(&b.data()[s * cb * rb..(s + 1) * cb * rb]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Ok(Tensor::from_parts(shape, out))
}

pub fn concat_channels_backward(a_shape: &[usize], b_shape: &[usize], dy: &Tensor) -> (Tensor, Tensor) {
    let n = a_shape[0];
    let sa: usize = a_shape[1..].iter().product();
    let sb: usize = b_shape[1..].iter().product();
    let mut da = Vec::with_capacity(n * sa);
    let mut db = Vec::with_capacity(n * sb);
    for s in 0..n {
        let base = s * (sa + sb);
        da.extend_from_slice(&dy.data()[base..base + sa]);
        db.extend_from_slice(&dy.data()[base + sa..base + sa + sb]);
    }
    (
        Tensor::from_parts(a_shape.to_vec(), da),
        Tensor::from_parts(b_shape.to_vec(), db),
    )
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "upsample2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2], out))
}

pub fn upsample2x_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let w2 = 2 * w;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let g = &dy.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let r0 = 2 * y * w2 + 2 * xx;
                let r1 = r0 + w2;
                dx[plane * h * w + y * w + xx] = (g[r0] + g[r0 + 1]) + (g[r1] + g[r1 + 1]);
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

pub fn avgpool2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "avgpool2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(x.shape(), "avgpool2x needs even spatial extents"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let r0 = 2 * y * w + 2 * xx;
                let r1 = r0 + w;
                out[plane * ho * wo + y * wo + xx] =
                    0.25 * ((src[r0] + src[r0 + 1]) + (src[r1] + src[r1 + 1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn avgpool2x_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * dy.data()[plane * ho * wo + (y / 2) * wo + xx / 2];
            }
        }
    }
    Tensor::from_parts(x_shape.to_vec(), dx)
}

/// Per-sample statistics saved by [`group_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Group normalization with a single group: every sample is normalized over
/// all of its channels and positions, then scaled and shifted per channel.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, NormStats)> {
    let (n, c, rest) = dims_nc(x, "group_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "group_norm: affine {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let m = c * rest;
    let mut out = vec![0.0; x.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n),
        inv_std: Vec::with_capacity(n),
    };
    for s in 0..n {
        let xs = &x.data()[s * m..(s + 1) * m];
        let mean = xs.iter().sum::<f64>() / m as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for i in ch * rest..(ch + 1) * rest {
                out[s * m + i] = (xs[i] - mean) * inv_std * g + b;
            }
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = x.dim(0);
    let c = x.dim(1);
    let rest: usize = x.shape()[2..].iter().product();
    let m = c * rest;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; m];
    let mut g = vec![0.0; m];
    for s in 0..n {
        let (mean, inv_std) = (stats.mean[s], stats.inv_std[s]);
        let xs = &x.data()[s * m..(s + 1) * m];
        let dys = &dy.data()[s * m..(s + 1) * m];
        for ch in 0..c {
            let gm = gamma.data()[ch];
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in ch * rest..(ch + 1) * rest {
                xhat[i] = (xs[i] - mean) * inv_std;
                g[i] = dys[i] * gm;
                dg += dys[i] * xhat[i];
                db += dys[i];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        let mean_g = g.iter().sum::<f64>() / m as f64;
        let mean_gx = dot(&g, &xhat) / m as f64;
        for i in 0..m {
            dx[s * m + i] = inv_std * (g[i] - mean_g - xhat[i] * mean_gx);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

/// One kernel tap whose receptive positions intersect the input.
#[derive(Clone, Copy, Debug)]
struct Tap {
    ky: usize,
    kx: usize,
    oy: (usize, usize),
    ox: (usize, usize),
}

/// Geometry of a stride-1, zero-padded convolution.
#[derive(Clone, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    taps: Vec<Tap>,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Self> {
        let (n, c, h, w) = dims4(input, "conv2d input")?;
        let (f, kc, k, k2) = dims4(kernel, "conv2d kernel")?;
        if kc != c {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: kernel expects {kc} input channels, input has {c}"
            )));
        }
        if k != k2 || k % 2 == 0 {
            return Err(Error::shape(kernel.shape(), "conv2d kernel must be square with odd size"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(input.shape(), "input smaller than the kernel"));
        }
        let ho = h + 2 * pad - k + 1;
        let wo = w + 2 * pad - k + 1;
        // Valid output range for a tap offset: 0 <= o + d - pad < extent.
        let range = |d: usize, extent: usize, out: usize| {
            let lo = pad.saturating_sub(d);
            let hi = (extent + pad).saturating_sub(d).min(out);
            (lo, hi.max(lo))
        };
        let mut taps = Vec::new();
        for ky in 0..k {
            for kx in 0..k {
                let oy = range(ky, h, ho);
                let ox = range(kx, w, wo);
                if oy.1 > oy.0 && ox.1 > ox.0 {
                    taps.push(Tap { ky, kx, oy, ox });
                }
            }
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            f,
            k,
            pad,
            ho,
            wo,
            taps,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.taps.len()
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Patch matrix `[rows, cols]`; taps that never touch the input are
    /// omitted since their rows would be identically zero.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let q = self.cols();
        let plane_out = self.ho * self.wo;
        let mut col = vec![0.0; self.rows() * q];
        for ch in 0..self.c {
            for (ti, tap) in self.taps.iter().enumerate() {
                let row = &mut col[(ch * self.taps.len() + ti) * q..][..q];
                for s in 0..self.n {
                    let src = &input[(s * self.c + ch) * self.h * self.w..][..self.h * self.w];
                    for oy in tap.oy.0..tap.oy.1 {
                        let iy = oy + tap.ky - self.pad;
                        let ix0 = tap.ox.0 + tap.kx - self.pad;
                        let len = tap.ox.1 - tap.ox.0;
                        let dst = s * plane_out + oy * self.wo + tap.ox.0;
                        row[dst..dst + len].copy_from_slice(&src[iy * self.w + ix0..][..len]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[f64]) -> Vec<f64> {
        let q = self.cols();
        let plane_out = self.ho * self.wo;
        let mut dx = vec![0.0; self.n * self.c * self.h * self.w];
        for ch in 0..self.c {
            for (ti, tap) in self.taps.iter().enumerate() {
                let row = &dcol[(ch * self.taps.len() + ti) * q..][..q];
                for s in 0..self.n {
                    let dst = &mut dx[(s * self.c + ch) * self.h * self.w..][..self.h * self.w];
                    for oy in tap.oy.0..tap.oy.1 {
                        let iy = oy + tap.ky - self.pad;
                        let ix0 = tap.ox.0 + tap.kx - self.pad;
                        let len = tap.ox.1 - tap.ox.0;
                        let src = s * plane_out + oy * self.wo + tap.ox.0;
                        for (d, g) in dst[iy * self.w + ix0..][..len]
                            .iter_mut()
                            .zip(&row[src..src + len])
                        {
                            *d += g;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Weight matrix `[F, rows]` restricted to the active taps.
    fn gather_weights(&self, kernel: &[f64]) -> Vec<f64> {
        let r = self.rows();
        let kk = self.k * self.k;
        let mut wm = vec![0.0; self.f * r];
        for f in 0..self.f {
            for ch in 0..self.c {
                for (ti, tap) in self.taps.iter().enumerate() {
                    wm[f * r + ch * self.taps.len() + ti] =
                        kernel[(f * self.c + ch) * kk + tap.ky * self.k + tap.kx];
                }
            }
        }
        wm
    }

    /// `[N, F, Ho, Wo]` <-> `[F, N*Ho*Wo]`.
    fn to_fq(&self, nchw: &[f64]) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let q = self.cols();
        let mut out = vec![0.0; self.f * q];
        for s in 0..self.n {
            for f in 0..self.f {
                out[f * q + s * plane..][..plane]
                    .copy_from_slice(&nchw[(s * self.f + f) * plane..][..plane]);
            }
        }
        out
    }

    fn from_fq(&self, fq: &[f64]) -> Vec<f64> {
        let plane = self.ho * self.wo;
        let q = self.cols();
        let mut out = vec![0.0; self.f * q];
        for s in 0..self.n {
            for f in 0..self.f {
                out[(s * self.f + f) * plane..][..plane]
                    .copy_from_slice(&fq[f * q + s * plane..][..plane]);
            }
        }
        out
    }
}

/// Stride-1 cross-correlation with zero padding.
///
/// `input: [N, C, H, W]`, `kernel: [F, C, k, k]` with odd `k`; the output is
/// `[N, F, H + 2p - k + 1, W + 2p - k + 1]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, padding)?;
    let col = g.im2col(input.data());
    let wm = g.gather_weights(kernel.data());
    let (r, q) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.f * q];
    let mut q0 = 0;
    while q0 < q {
        let len = COL_BLOCK.min(q - q0);
        for f in 0..g.f {
            let dst = &mut out[f * q + q0..][..len];
            for row in 0..r {
                axpy(wm[f * r + row], &col[row * q + q0..][..len], dst);
            }
        }
        q0 += len;
    }
    Ok(Tensor::from_parts(
        vec![g.n, g.f, g.ho, g.wo],
        g.from_fq(&out),
    ))
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    dy: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = ConvGeom::new(input, kernel, padding)?;
    let (r, q) = (g.rows(), g.cols());
    let col = g.im2col(input.data());
    let dyq = g.to_fq(dy.data());

    let kk = g.k * g.k;
    let mut dk = vec![0.0; kernel.len()];
    for f in 0..g.f {
        let drow = &dyq[f * q..][..q];
        for ch in 0..g.c {
            for (ti, tap) in g.taps.iter().enumerate() {
                let row = ch * g.taps.len() + ti;
                dk[(f * g.c + ch) * kk + tap.ky * g.k + tap.kx] = dot(drow, &col[row * q..][..q]);
            }
        }
    }
    drop(col);

    let dx = if need_input_grad {
        let wm = g.gather_weights(kernel.data());
        let mut dcol = vec![0.0; r * q];
        let mut q0 = 0;
        while q0 < q {
            let len = COL_BLOCK.min(q - q0);
            for row in 0..r {
                let dst = &mut dcol[row * q + q0..][..len];
                for f in 0..g.f {
                    axpy(wm[f * r + row], &dyq[f * q + q0..][..len], dst);
                }
            }
            q0 += len;
        }
        Some(Tensor::from_parts(input.shape().to_vec(), g.col2im(&dcol)))
    } else {
        None
    };
    Ok((dx, Tensor::from_parts(kernel.shape().to_vec(), dk)))
}
