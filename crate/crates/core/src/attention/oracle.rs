//! Brute-force global self-attention used as ground truth.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

use super::kernel::mac_counter;
use super::ProjectionSet;

/// Largest `H*W` accepted by [`full_self_attention_oracle`].
pub const ORACLE_MAX_SITES: usize = 256;

/// `y_ij = sum_{h,w} softmax_{hw}(q_ij . k_hw) v_hw` over the whole map,
/// by explicit nested loops. Nothing is recorded for autodiff.
pub fn full_self_attention_oracle(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    proj: &ProjectionSet,
) -> Result<Tensor<f64>> {
    let (_, _, h, w) = x.dims4()?;
    if h * w > ORACLE_MAX_SITES {
        return Err(Error::invalid(
            "full_self_attention_oracle",
            format!("{h}x{w} map exceeds the {ORACLE_MAX_SITES}-site limit"),
        ));
    }
    full_attention(
        x,
        store.value(proj.w_q),
        store.value(proj.w_k),
        store.value(proj.w_v),
    )
}

/// Unguarded core of the oracle. Projection weights are `(C_attn, C_in, 1, 1)`.
pub(crate) fn full_attention(
    x: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin) = (wq.shape()[0], wq.shape()[1]);
    if wcin != cin {
        return Err(Error::mismatch("full_self_attention_oracle", x.shape(), wq.shape()));
    }
    let sites = h * w;
    let xd = x.data();
    let project = |wt: &Tensor<f64>, b: usize| -> Vec<f64> {
        // [site][channel]
        let mut out = vec![0.0; sites * cout];
        for s in 0..sites {
            for co in 0..cout {
                let mut acc = 0.0;
                for ci in 0..cin {
                    acc += wt.data()[co * cin + ci] * xd[(b * cin + ci) * sites + s];
                }
                out[s * cout + co] = acc;
            }
        }
        out
    };
    let mut y = vec![0.0; n * cout * sites];
    let mut logits = vec![0.0; sites];
    for b in 0..n {
        let (q, k, v) = (project(wq, b), project(wk, b), project(wv, b));
        for i in 0..sites {
            let mut max = f64::NEG_INFINITY;
            for j in 0..sites {
                let mut s = 0.0;
                for c in 0..cout {
                    s += q[i * cout + c] * k[j * cout + c];
                }
                logits[j] = s;
                max = max.max(s);
            }
            let total: f64 = logits.iter_mut().map(|l| {
                *l = (*l - max).exp();
                *l
            }).sum();
            for c in 0..cout {
                let mut acc = 0.0;
                for j in 0..sites {
                    acc += logits[j] / total * v[j * cout + c];
                }
                y[(b * cout + c) * sites + i] = acc;
            }
            mac_counter::add((2 * sites * cout) as u64);
        }
    }
    Tensor::new(vec![n, cout, h, w], y)
}
