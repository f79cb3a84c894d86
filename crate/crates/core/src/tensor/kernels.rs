//! Forward and backward numeric kernels shared by the autodiff graph.
//!
//! Everything here works on plain tensors and records nothing.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

// ---------------------------------------------------------------- matmul

#[derive(Debug, Clone, Copy)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::mismatch("matmul", a, b));
    }
    let (la, ma) = a.split_at(a.len() - 2);
    let (lb, mb) = b.split_at(b.len() - 2);
    if ma[1] != mb[0] {
        return Err(Error::mismatch("matmul", a, b));
    }
    let (lead, a_batched, b_batched) = if la == lb {
        (la.to_vec(), !la.is_empty(), !lb.is_empty())
    } else if lb.is_empty() {
        (la.to_vec(), true, false)
    } else if la.is_empty() {
        (lb.to_vec(), false, true)
    } else {
        return Err(Error::mismatch("matmul", a, b));
    };
    let batch = lead.iter().product();
    let mut out = lead;
    out.extend_from_slice(&[ma[0], mb[1]]);
    Ok((
        MatmulDims {
            batch,
            m: ma[0],
            k: ma[1],
            n: mb[1],
            a_batched,
            b_batched,
        },
        out,
    ))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, out_shape) = matmul_dims(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        let co = bi * d.m * d.n;
        for i in 0..d.m {
            let crow = &mut out[co + i * d.n..co + (i + 1) * d.n];
            for p in 0..d.k {
                let av = ad[ao + i * d.k + p];
                let brow = &bd[bo + p * d.n..bo + (p + 1) * d.n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of `c = a @ b` given `dc`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (d, _) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let mut da = a.zeros_like();
    let mut db = b.zeros_like();
    let (ad, bd, gd) = (a.data(), b.data(), dc.data());
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        let co = bi * d.m * d.n;
        for i in 0..d.m {
            let grow = &gd[co + i * d.n..co + (i + 1) * d.n];
            for p in 0..d.k {
                let brow = &bd[bo + p * d.n..bo + (p + 1) * d.n];
                let mut acc = T::zero();
                for (&g, &bv) in grow.iter().zip(brow) {
                    acc += g * bv;
                }
                da.data_mut()[ao + i * d.k + p] += acc;
                let av = ad[ao + i * d.k + p];
                let dbrow = &mut db.data_mut()[bo + p * d.n..bo + (p + 1) * d.n];
                for (dbv, &g) in dbrow.iter_mut().zip(grow) {
                    *dbv += av * g;
                }
            }
        }
    }
    (da, db)
}

// --------------------------------------------------------------- softmax

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::AxisOutOfRange {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(xd[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = y.zeros_like();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx.data_mut()[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_geom(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [n, cin, h, wd] = x[..] else {
        return Err(Error::mismatch("conv2d", x, w));
    };
    let [cout, wcin, kh, kw] = w[..] else {
        return Err(Error::mismatch("conv2d", x, w));
    };
    if wcin != cin {
        return Err(Error::invalid(
            "conv2d",
            format!("input has {cin} channels but weight {w:?} expects {wcin}"),
        ));
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(Error::mismatch("conv2d bias", b, &[cout]));
        }
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {pad})"),
        ));
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

/// Output index range `[lo, hi)` whose input coordinate `o*stride + k - pad`
/// lands inside `[0, len)`.
fn valid_range(len: usize, out_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last = len + pad - 1;
    if last < k {
        return (0, 0);
    }
    let hi = ((last - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Unfolds one image `(C_in, H, W)` into `(C_in * kh * kw, oh * ow)` columns.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        let xp = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let off = ox_lo + kx - g.pad;
                        orow[ox_lo..ox_hi].copy_from_slice(&xrow[off..off + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            orow[ox] = xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `(C_in, H, W)`.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        let xp = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let orow = &row[oy * g.ow..(oy + 1) * g.ow];
                    if g.stride == 1 {
                        let off = iy * g.w + ox_lo + kx - g.pad;
                        let dst = &mut xp[off..off + ox_hi - ox_lo];
                        dst.iter_mut().zip(&orow[ox_lo..ox_hi]).for_each(|(d, &v)| *d += v);
                    } else {
                        for ox in ox_lo..ox_hi {
                            xp[iy * g.w + ox * g.stride + kx - g.pad] += orow[ox];
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Columns of the whole batch, laid out `(K, N * P)` so every row of the
/// product spans all images.
fn batch_columns<T: Scalar>(g: &ConvGeom, xd: &[T]) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let img = g.cin * g.h * g.w;
    let mut cols = vec![T::zero(); k * g.n * p];
    let mut one = vec![T::zero(); k * p];
    for n in 0..g.n {
        im2col(g, &xd[n * img..(n + 1) * img], &mut one);
        for kk in 0..k {
            cols[(kk * g.n + n) * p..(kk * g.n + n + 1) * p].copy_from_slice(&one[kk * p..(kk + 1) * p]);
        }
    }
    cols
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let cols = batch_columns(&g, x.data());
    let wd = w.data();
    let mut row = vec![T::zero(); np];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for co in 0..g.cout {
        row.fill(bias.map_or(T::zero(), |b| b.data()[co]));
        for (kk, &wv) in wd[co * k..(co + 1) * k].iter().enumerate() {
            for (o, &c) in row.iter_mut().zip(&cols[kk * np..(kk + 1) * np]) {
                *o += wv * c;
            }
        }
        for n in 0..g.n {
            out[(n * g.cout + co) * p..(n * g.cout + co + 1) * p].copy_from_slice(&row[n * p..(n + 1) * p]);
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Returns `(dx, dw, dbias)`; `dbias` is `None` when the forward had no bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let bias_shape = [w.shape()[0]];
    let g = conv_geom(
        x.shape(),
        w.shape(),
        has_bias.then_some(&bias_shape[..]),
        stride,
        pad,
    )
    .expect("validated in forward");
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let cols = batch_columns(&g, x.data());
    let (wd, gd) = (w.data(), dy.data());
    // dy regrouped as (C_out, N * P)
    let mut gy = vec![T::zero(); g.cout * np];
    for n in 0..g.n {
        for co in 0..g.cout {
            gy[(co * g.n + n) * p..(co * g.n + n + 1) * p]
                .copy_from_slice(&gd[(n * g.cout + co) * p..(n * g.cout + co + 1) * p]);
        }
    }
    let mut dw = w.zeros_like();
    let mut db = has_bias.then(|| Tensor::from_parts(vec![g.cout], vec![T::zero(); g.cout]));
    let mut dcol = vec![T::zero(); if need_dx { k * np } else { 0 }];
    for co in 0..g.cout {
        let grow = &gy[co * np..(co + 1) * np];
        if let Some(db) = db.as_mut() {
            db.data_mut()[co] = grow.iter().copied().sum::<T>();
        }
        let dwrow = &mut dw.data_mut()[co * k..(co + 1) * k];
        for (kk, dwv) in dwrow.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&gv, &c) in grow.iter().zip(&cols[kk * np..(kk + 1) * np]) {
                acc += gv * c;
            }
            *dwv = acc;
        }
        if need_dx {
            for (kk, &wv) in wd[co * k..(co + 1) * k].iter().enumerate() {
                for (d, &gv) in dcol[kk * np..(kk + 1) * np].iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
    }
    let dx = need_dx.then(|| {
        let img = g.cin * g.h * g.w;
        let mut dx = x.zeros_like();
        let mut one = vec![T::zero(); k * p];
        for n in 0..g.n {
            for kk in 0..k {
                one[kk * p..(kk + 1) * p].copy_from_slice(&dcol[(kk * g.n + n) * p..(kk * g.n + n + 1) * p]);
            }
            col2im(&g, &one, &mut dx.data_mut()[n * img..(n + 1) * img]);
        }
        dx
    });
    (dx, dw, db)
}

// ------------------------------------------------------------- batchnorm

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics saved by a training-mode batchnorm forward.
#[derive(Debug, Clone)]
pub(crate) struct BatchStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

pub(crate) fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let m = n * h * w;
    if m == 1 {
        return Err(Error::invalid(
            "batchnorm2d",
            "training mode needs more than one value per channel (N*H*W == 1)",
        ));
    }
    let plane = h * w;
    let xd = x.data();
    let eps = T::from_f64(BN_EPS);
    let mf = T::from_usize(m);
    let mut stats = BatchStats {
        xhat: vec![T::zero(); xd.len()],
        inv_std: vec![T::zero(); c],
        mean: vec![T::zero(); c],
        var_unbiased: vec![T::zero(); c],
    };
    let mut out = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| (b * c + ch) * plane);
        let mut sum = T::zero();
        for p in planes() {
            sum += xd[p..p + plane].iter().copied().sum::<T>();
        }
        let mean = sum / mf;
        let mut sq = T::zero();
        for p in planes() {
            for &v in &xd[p..p + plane] {
                sq += (v - mean) * (v - mean);
            }
        }
        let var = sq / mf;
        let inv = T::one() / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for p in planes() {
            for i in p..p + plane {
                let xh = (xd[i] - mean) * inv;
                stats.xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
        stats.inv_std[ch] = inv;
        stats.mean[ch] = mean;
        stats.var_unbiased[ch] = sq / T::from_usize(m - 1);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

fn check_affine<T: Scalar>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid(
            "batchnorm2d",
            format!(
                "gamma {:?} / beta {:?} must both have length {c}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Inference-mode normalization: a fixed per-channel affine map.
/// Returns the output and the per-channel `1/sqrt(var + eps)`.
pub(crate) fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(c, gamma, beta)?;
    let plane = h * w;
    let eps = T::from_f64(BN_EPS);
    let inv: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let (m, s, g, be) = (
                running_mean.data()[ch],
                inv[ch],
                gamma.data()[ch],
                beta.data()[ch],
            );
            let p = (b * c + ch) * plane;
            for v in &mut out.data_mut()[p..p + plane] {
                *v = g * ((*v - m) * s) + be;
            }
        }
    }
    Ok((out, inv))
}

/// Returns `(dx, dgamma, dbeta)` for the training-mode forward.
pub(crate) fn batchnorm_train_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mf = T::from_usize(n * plane);
    let gd = dy.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..n).map(move |b| (b * c + ch) * plane);
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for p in planes() {
            for i in p..p + plane {
                sum_g += gd[i];
                sum_gx += gd[i] * stats.xhat[i];
            }
        }
        dbeta[ch] = sum_g;
        dgamma[ch] = sum_gx;
        let scale = gamma.data()[ch] * stats.inv_std[ch] / mf;
        for p in planes() {
            for i in p..p + plane {
                dx[i] = scale * (mf * gd[i] - sum_g - stats.xhat[i] * sum_gx);
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ------------------------------------------------------------- resampling

/// Source taps for one output coordinate under half-pixel sampling.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

/// Bilinear taps mapping `in_len` samples onto `out_len` with
/// `src = (dst + 0.5) * in_len / out_len - 0.5`, clamped at the borders.
pub(crate) fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                frac: T::from_f64(frac),
            }
        })
        .collect()
}

/// Bilinear resampling of every `(N, C)` plane of a rank-4 tensor.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for a in &ty {
            let (r0, r1) = (&src[a.i0 * w..(a.i0 + 1) * w], &src[a.i1 * w..(a.i1 + 1) * w]);
            for b in &tx {
                let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                out.push(top + (bot - top) * a.frac);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub(crate) fn resize_bilinear_backward<T: Scalar>(
    in_shape: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (dy.shape()[2], dy.shape()[3]);
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let planes = in_shape[0] * in_shape[1];
    let gd = dy.data();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let gv = g[oy * out_w + ox];
                let (one_a, one_b) = (T::one() - a.frac, T::one() - b.frac);
                dst[a.i0 * w + b.i0] += gv * one_a * one_b;
                dst[a.i0 * w + b.i1] += gv * one_a * b.frac;
                dst[a.i1 * w + b.i0] += gv * a.frac * one_b;
                dst[a.i1 * w + b.i1] += gv * a.frac * b.frac;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

// ---------------------------------------------------------- layout moves

/// Swap the last two axes of a rank-4 tensor.
pub fn transpose_hw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[j * h + i] = src[i * w + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, w, h], out))
}

/// Copy the window `[top, top+h) x [left, left+w)` out of every plane.
pub fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4()?;
    if h == 0 || w == 0 || top + h > xh || left + w > xw {
        return Err(Error::invalid(
            "crop",
            format!("window {h}x{w} at ({top},{left}) exceeds {xh}x{xw}"),
        ));
    }
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for r in top..top + h {
            let row = p * xh * xw + r * xw;
            out.extend_from_slice(&xd[row + left..row + left + w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Write `src` into `dst` at `(top, left)` of every plane, adding to what is there.
pub(crate) fn paste_add<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, top: usize, left: usize) {
    let (dh, dw) = (dst.shape()[2], dst.shape()[3]);
    let (planes, sh, sw) = (src.shape()[0] * src.shape()[1], src.shape()[2], src.shape()[3]);
    let sd = src.data();
    let dd = dst.data_mut();
    for p in 0..planes {
        for r in 0..sh {
            let drow = p * dh * dw + (top + r) * dw + left;
            let srow = p * sh * sw + r * sw;
            for (d, &s) in dd[drow..drow + sw].iter_mut().zip(&sd[srow..srow + sw]) {
                *d += s;
            }
        }
    }
}
