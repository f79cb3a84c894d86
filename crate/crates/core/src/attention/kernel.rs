//! Fused single-head axial attention along the last axis.
//!
//! Layout: `q`, `k`, `v` are `(N, D, H, L)`; attention runs over `L` independently
//! for every `(n, row)`. Relative tables are `(2L - 1, D)`, indexed by
//! `j - w + L - 1` for query position `j` and key position `w`.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate counter fed by the attention kernels of this thread.
pub mod mac_counter {
    use super::MACS;

    pub fn reset() {
        MACS.with(|m| m.set(0));
    }

    pub fn get() -> u64 {
        MACS.with(|m| m.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|m| m.set(m.get() + n));
    }
}

/// Gate values `[G_Q, G_K, G_V1, G_V2]`.
pub type Gates<T> = [T; 4];

pub(crate) struct AxialGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dtables: Option<[Tensor<T>; 3]>,
    pub dgates: Gates<T>,
}

struct Dims {
    n: usize,
    d: usize,
    h: usize,
    l: usize,
}

fn check<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Option<[&Tensor<T>; 3]>,
) -> Result<Dims> {
    let (n, d, h, l) = q.dims4()?;
    for other in [k, v] {
        if other.shape() != q.shape() {
            return Err(Error::mismatch("axial_attention", q.shape(), other.shape()));
        }
    }
    if let Some(ts) = tables {
        for t in ts {
            if t.shape() != [2 * l - 1, d] {
                return Err(Error::invalid(
                    "axial_attention",
                    format!(
                        "relative table {:?} does not match attended axis length {l} and head dim {d} (want [{}, {d}])",
                        t.shape(),
                        2 * l - 1
                    ),
                ));
            }
        }
    }
    Ok(Dims { n, d, h, l })
}

/// Copies the `(n, ·, row, ·)` slice of a `(N, D, H, L)` tensor into `[L][D]`.
fn gather_row<T: Scalar>(src: &[T], dims: &Dims, n: usize, row: usize, out: &mut [T]) {
    let Dims { d, h, l, .. } = *dims;
    for c in 0..d {
        let base = ((n * d + c) * h + row) * l;
        for j in 0..l {
            out[j * d + c] = src[base + j];
        }
    }
}

fn scatter_row<T: Scalar>(dst: &mut [T], dims: &Dims, n: usize, row: usize, src: &[T]) {
    let Dims { d, h, l, .. } = *dims;
    for c in 0..d {
        let base = ((n * d + c) * h + row) * l;
        for j in 0..l {
            dst[base + j] += src[j * d + c];
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Returns the output and the attention probabilities `(N, H, L_query, L_key)`.
///
/// Without tables the positional terms are absent (plain axial attention);
/// without gates every gate acts as 1.
pub(crate) fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Option<[&Tensor<T>; 3]>,
    gates: Option<Gates<T>>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let dims = check(q, k, v, tables)?;
    if gates.is_some() && tables.is_none() {
        return Err(Error::invalid(
            "axial_attention",
            "gates require relative positional tables",
        ));
    }
    let Dims { n, d, h, l } = dims;
    let [gq, gk, gv1, gv2] = gates.unwrap_or([T::one(); 4]);
    let terms = if tables.is_some() { 5 } else { 2 };
    let mut y = vec![T::zero(); q.numel()];
    let mut probs = vec![T::zero(); n * h * l * l];
    let (mut qr, mut kr, mut vr) = (vec![T::zero(); l * d], vec![T::zero(); l * d], vec![T::zero(); l * d]);
    let mut yr = vec![T::zero(); l * d];
    let mut val = vec![T::zero(); d];
    for b in 0..n {
        for row in 0..h {
            gather_row(q.data(), &dims, b, row, &mut qr);
            gather_row(k.data(), &dims, b, row, &mut kr);
            gather_row(v.data(), &dims, b, row, &mut vr);
            yr.fill(T::zero());
            for j in 0..l {
                let qj = &qr[j * d..(j + 1) * d];
                let p = &mut probs[((b * h + row) * l + j) * l..((b * h + row) * l + j + 1) * l];
                let mut max = T::neg_infinity();
                for w in 0..l {
                    let kw = &kr[w * d..(w + 1) * d];
                    let mut s = dot(qj, kw);
                    if let Some([rq, rk, _]) = tables {
                        let rel = (j + l - 1 - w) * d;
                        s = s + gq * dot(qj, &rq.data()[rel..rel + d]) + gk * dot(kw, &rk.data()[rel..rel + d]);
                    }
                    p[w] = s;
                    max = max.max(s);
                }
                let mut total = T::zero();
                for pw in p.iter_mut() {
                    *pw = (*pw - max).exp();
                    total += *pw;
                }
                for pw in p.iter_mut() {
                    *pw /= total;
                }
                let yj = &mut yr[j * d..(j + 1) * d];
                for w in 0..l {
                    let vw = &vr[w * d..(w + 1) * d];
                    match tables {
                        Some([_, _, rv]) => {
                            let rel = (j + l - 1 - w) * d;
                            let rvw = &rv.data()[rel..rel + d];
                            for c in 0..d {
                                val[c] = gv1 * vw[c] + gv2 * rvw[c];
                            }
                        }
                        None => val.copy_from_slice(vw),
                    }
                    for c in 0..d {
                        yj[c] += p[w] * val[c];
                    }
                }
            }
            mac_counter::add((l * l * d * terms) as u64);
            scatter_row(&mut y, &dims, b, row, &yr);
        }
    }
    Ok((Tensor::from_parts(q.shape().to_vec(), y), probs))
}

pub(crate) fn backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tables: Option<[&Tensor<T>; 3]>,
    gates: Option<Gates<T>>,
    probs: &[T],
    dy: &Tensor<T>,
) -> AxialGrads<T> {
    let dims = check(q, k, v, tables).expect("validated in forward");
    let Dims { n, d, h, l } = dims;
    let [gq, gk, gv1, gv2] = gates.unwrap_or([T::one(); 4]);
    let mut dq = q.zeros_like();
    let mut dk = k.zeros_like();
    let mut dv = v.zeros_like();
    let mut dtab = tables.map(|[a, b, c]| [a.zeros_like(), b.zeros_like(), c.zeros_like()]);
    let mut dg = [T::zero(); 4];
    let (mut qr, mut kr, mut vr, mut gr) = (
        vec![T::zero(); l * d],
        vec![T::zero(); l * d],
        vec![T::zero(); l * d],
        vec![T::zero(); l * d],
    );
    let (mut dqr, mut dkr, mut dvr) = (vec![T::zero(); l * d], vec![T::zero(); l * d], vec![T::zero(); l * d]);
    let mut dp = vec![T::zero(); l];
    for b in 0..n {
        for row in 0..h {
            gather_row(q.data(), &dims, b, row, &mut qr);
            gather_row(k.data(), &dims, b, row, &mut kr);
            gather_row(v.data(), &dims, b, row, &mut vr);
            gather_row(dy.data(), &dims, b, row, &mut gr);
            dqr.fill(T::zero());
            dkr.fill(T::zero());
            dvr.fill(T::zero());
            for j in 0..l {
                let p = &probs[((b * h + row) * l + j) * l..((b * h + row) * l + j + 1) * l];
                let gj = &gr[j * d..(j + 1) * d];
                let qj = &qr[j * d..(j + 1) * d];
                // value path
                for w in 0..l {
                    let vw = &vr[w * d..(w + 1) * d];
                    let dvw = &mut dvr[w * d..(w + 1) * d];
                    match (tables, dtab.as_mut()) {
                        (Some([_, _, rv]), Some([_, _, drv])) => {
                            let rel = (j + l - 1 - w) * d;
                            let rvw = &rv.data()[rel..rel + d];
                            let drvw = &mut drv.data_mut()[rel..rel + d];
                            let mut acc = T::zero();
                            for c in 0..d {
                                let pg = p[w] * gj[c];
                                acc += gj[c] * (gv1 * vw[c] + gv2 * rvw[c]);
                                dvw[c] += gv1 * pg;
                                drvw[c] += gv2 * pg;
                                dg[2] += pg * vw[c];
                                dg[3] += pg * rvw[c];
                            }
                            dp[w] = acc;
                        }
                        _ => {
                            dp[w] = dot(gj, vw);
                            for c in 0..d {
                                dvw[c] += p[w] * gj[c];
                            }
                        }
                    }
                }
                // softmax
                let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for w in 0..l {
                    let da = p[w] * (dp[w] - s);
                    let kw = &kr[w * d..(w + 1) * d];
                    let dqj = &mut dqr[j * d..(j + 1) * d];
                    let dkw = &mut dkr[w * d..(w + 1) * d];
                    match (tables, dtab.as_mut()) {
                        (Some([rq, rk, _]), Some([drq, drk, _])) => {
                            let rel = (j + l - 1 - w) * d;
                            let rqw = &rq.data()[rel..rel + d];
                            let rkw = &rk.data()[rel..rel + d];
                            let mut qdot = T::zero();
                            let mut kdot = T::zero();
                            for c in 0..d {
                                dqj[c] += da * (kw[c] + gq * rqw[c]);
                                dkw[c] += da * (qj[c] + gk * rkw[c]);
                                qdot += qj[c] * rqw[c];
                                kdot += kw[c] * rkw[c];
                            }
                            let drqw = &mut drq.data_mut()[rel..rel + d];
                            for c in 0..d {
                                drqw[c] += gq * da * qj[c];
                            }
                            let drkw = &mut drk.data_mut()[rel..rel + d];
                            for c in 0..d {
                                drkw[c] += gk * da * kw[c];
                            }
                            dg[0] += da * qdot;
                            dg[1] += da * kdot;
                        }
                        _ => {
                            for c in 0..d {
                                dqj[c] += da * kw[c];
                                dkw[c] += da * qj[c];
                            }
                        }
                    }
                }
            }
            scatter_row(dq.data_mut(), &dims, b, row, &dqr);
            scatter_row(dk.data_mut(), &dims, b, row, &dkr);
            scatter_row(dv.data_mut(), &dims, b, row, &dvr);
        }
    }
    AxialGrads {
        dq,
        dk,
        dv,
        dtables: dtab,
        dgates: dg,
    }
}
