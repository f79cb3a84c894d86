//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::tensor::{Graph, Mode, NodeId, OpKind, ParamId, ParamKind, ParamStore, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Worst disagreement found for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the backward pass of `f` against `(f(θ+eps) - f(θ-eps)) / 2eps`
/// for every scalar of every trainable parameter in `store`.
///
/// `f` records a scalar loss on the graph it is handed. Graphs are built in
/// training mode. Existing gradients in `store` are cleared.
pub fn grad_check<F>(store: &mut ParamStore<f64>, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    grad_check_with(store, eps, |g, s| f(g, s), |_| {})
}

/// Like [`grad_check`], with a hook to adjust each analytic graph before backward
/// (used to inject faults in negative-control tests).
pub fn grad_check_with<F, H>(store: &mut ParamStore<f64>, eps: f64, mut f: F, mut hook: H) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
    H: FnMut(&mut Graph<f64>),
{
    store.zero_grad();
    let base = {
        let mut g = Graph::new(Mode::Train);
        let loss = f(&mut g, store)?;
        check_scalar(&g, loss)?;
        hook(&mut g);
        g.backward(loss, store)?;
        g.value(loss).item()
    };
    let again = evaluate(&mut f, store)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.numel();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            entries: n,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = evaluate(&mut f, store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = evaluate(&mut f, store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.get(id).grad.data()[i];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    let last = evaluate(&mut f, store)?;
    if last.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: last,
        });
    }
    Ok(GradCheckReport { eps, params })
}

fn check_scalar(g: &Graph<f64>, loss: NodeId) -> Result<()> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(())
}

fn evaluate<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut g = Graph::new(Mode::Train);
    let loss = f(&mut g, store)?;
    check_scalar(&g, loss)?;
    Ok(g.value(loss).item())
}

/// Ops with a backward rule, in the order their probes are run. Each probe
/// only relies on ops listed before it.
pub const PROBED_OPS: [OpKind; 20] = [
    OpKind::Sum,
    OpKind::Mean,
    OpKind::Bce,
    OpKind::Mul,
    OpKind::Add,
    OpKind::Scale,
    OpKind::MatMul,
    OpKind::Relu,
    OpKind::Sigmoid,
    OpKind::Softmax,
    OpKind::Reshape,
    OpKind::Conv2d,
    OpKind::BatchNorm,
    OpKind::Resize,
    OpKind::TransposeHw,
    OpKind::SliceChannels,
    OpKind::ConcatChannels,
    OpKind::Crop,
    OpKind::MergePatches,
    OpKind::AxialAttention,
];

/// Ops a probe uses besides the one under test.
fn probe_deps(kind: OpKind) -> &'static [OpKind] {
    match kind {
        OpKind::Sum | OpKind::Mean | OpKind::Bce => &[],
        OpKind::Mul => &[OpKind::Sum],
        _ => &[OpKind::Mul, OpKind::Sum],
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("non-empty probe shape")
}

fn leaf(s: &mut ParamStore<f64>, shape: &[usize], seed: u64) -> Result<ParamId> {
    s.insert(format!("p{seed}"), random(shape, seed, -1.0, 1.0), ParamKind::Weight)
}

/// `sum(y * c)` for fixed random `c`.
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let c = g.input(random(g.value(y).shape(), seed, -1.0, 1.0));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

/// Finite-difference check of one op in isolation, with `fault` (if any)
/// injected into the analytic pass.
pub fn check_op(kind: OpKind, eps: f64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let mut s = ParamStore::new();
    let hook = |g: &mut Graph<f64>| {
        if let Some(k) = fault {
            g.corrupt_backward(k);
        }
    };
    let unary = |s: &mut ParamStore<f64>, shape: &[usize]| leaf(s, shape, 1);
    match kind {
        OpKind::Sum | OpKind::Mean => {
            let a = unary(&mut s, &[2, 3])?;
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let a = g.param(s, a);
                    Ok(if kind == OpKind::Sum { g.sum(a) } else { g.mean(a) })
                },
                hook,
            )
        }
        OpKind::Bce => {
            let p = s.insert("p", random(&[1, 1, 2, 3], 2, 0.1, 0.9), ParamKind::Weight)?;
            let y = random(&[1, 1, 2, 3], 3, 0.0, 1.0).map(|v| v.round());
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let p = g.param(s, p);
                    g.bce_loss(p, y.clone())
                },
                hook,
            )
        }
        OpKind::Mul | OpKind::Add | OpKind::MatMul | OpKind::ConcatChannels => {
            let shapes: [&[usize]; 2] = match kind {
                OpKind::MatMul => [&[2, 3, 4], &[4, 5]],
                OpKind::ConcatChannels => [&[2, 1, 2, 3], &[2, 2, 2, 3]],
                _ => [&[2, 3], &[2, 3]],
            };
            let a = leaf(&mut s, shapes[0], 4)?;
            let b = leaf(&mut s, shapes[1], 5)?;
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let (a, b) = (g.param(s, a), g.param(s, b));
                    match kind {
                        OpKind::Mul => {
                            let y = g.mul(a, b)?;
                            Ok(g.sum(y))
                        }
                        OpKind::Add => {
                            let y = g.add(a, b)?;
                            weighted_sum(g, y, 6)
                        }
                        OpKind::MatMul => {
                            let y = g.matmul(a, b)?;
                            weighted_sum(g, y, 6)
                        }
                        _ => {
                            let y = g.concat_channels(&[a, b])?;
                            weighted_sum(g, y, 6)
                        }
                    }
                },
                hook,
            )
        }
        OpKind::Conv2d => {
            let x = leaf(&mut s, &[2, 2, 5, 5], 7)?;
            let w = leaf(&mut s, &[3, 2, 3, 3], 8)?;
            let b = leaf(&mut s, &[3], 9)?;
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let (x, w, b) = (g.param(s, x), g.param(s, w), g.param(s, b));
                    let y = g.conv2d(x, w, Some(b), 2, 1)?;
                    weighted_sum(g, y, 10)
                },
                hook,
            )
        }
        OpKind::BatchNorm => {
            let x = leaf(&mut s, &[2, 3, 2, 2], 11)?;
            let bn = Builder::new(&mut s, 12).batchnorm("bn", 3)?;
            for (id, seed) in [(bn.gamma, 13), (bn.beta, 14)] {
                s.get_mut(id).value = random(&[3], seed, 0.5, 1.5);
            }
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let x = g.param(s, x);
                    let y = g.batchnorm2d(s, x, &bn)?;
                    weighted_sum(g, y, 15)
                },
                hook,
            )
        }
        OpKind::MergePatches => {
            let parts: Vec<_> = (0..4).map(|i| leaf(&mut s, &[1, 2, 2, 3], 16 + i)).collect::<Result<_>>()?;
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let ids: Vec<_> = parts.iter().map(|&p| g.param(s, p)).collect();
                    let y = g.merge_patches(&ids, 2)?;
                    weighted_sum(g, y, 20)
                },
                hook,
            )
        }
        OpKind::AxialAttention => {
            let (q, k, v) = (
                leaf(&mut s, &[1, 2, 2, 5], 21)?,
                leaf(&mut s, &[1, 2, 2, 5], 22)?,
                leaf(&mut s, &[1, 2, 2, 5], 23)?,
            );
            let tables = [leaf(&mut s, &[9, 2], 24)?, leaf(&mut s, &[9, 2], 25)?, leaf(&mut s, &[9, 2], 26)?];
            let gates: Vec<_> = (0..4)
                .map(|i| s.insert(format!("gate{i}"), random(&[1], 27 + i, 0.5, 1.5), ParamKind::Weight))
                .collect::<Result<_>>()?;
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
                    let t = tables.map(|id| g.param(s, id));
                    let gt = [gates[0], gates[1], gates[2], gates[3]].map(|id| g.param(s, id));
                    let y = g.axial_attention(q, k, v, Some(t), Some(gt))?;
                    weighted_sum(g, y, 31)
                },
                hook,
            )
        }
        OpKind::Input | OpKind::Variable | OpKind::Param => Err(Error::invalid(
            "check_op",
            format!("{} has no backward rule", kind.name()),
        )),
        _ => {
            let shape: &[usize] = &[2, 3, 4, 4];
            let x = if kind == OpKind::Relu {
                // Keep inputs away from the kink.
                let t = random(shape, 32, -1.0, 1.0).map(|v| v.signum() * (0.2 + v.abs()));
                s.insert("x", t, ParamKind::Weight)?
            } else {
                unary(&mut s, shape)?
            };
            grad_check_with(
                &mut s,
                eps,
                |g, s| {
                    let x = g.param(s, x);
                    let y = match kind {
                        OpKind::Scale => g.scale(x, 0.7),
                        OpKind::Relu => g.relu(x),
                        OpKind::Sigmoid => g.sigmoid(x),
                        OpKind::Softmax => g.softmax(x, 3)?,
                        OpKind::Reshape => g.reshape(x, vec![6, 16])?,
                        OpKind::Resize => g.resize(x, 7, 3)?,
                        OpKind::TransposeHw => g.transpose_hw(x)?,
                        OpKind::SliceChannels => g.slice_channels(x, 1, 2)?,
                        OpKind::Crop => g.crop(x, 1, 0, 2, 3)?,
                        other => unreachable!("no probe for {}", other.name()),
                    };
                    weighted_sum(g, y, 33)
                },
                hook,
            )
        }
    }
}

/// Runs every probe in [`PROBED_OPS`] order.
pub fn check_all_ops(eps: f64, fault: Option<OpKind>) -> Result<Vec<(OpKind, GradCheckReport)>> {
    PROBED_OPS
        .iter()
        .map(|&k| Ok((k, check_op(k, eps, fault)?)))
        .collect()
}

/// Ops whose own probe fails while every op it depends on passes.
pub fn localize(results: &[(OpKind, GradCheckReport)], tol: f64) -> Vec<OpKind> {
    let failed: Vec<OpKind> = results
        .iter()
        .filter(|(_, r)| !r.passes(tol))
        .map(|(k, _)| *k)
        .collect();
    failed
        .iter()
        .copied()
        .filter(|k| probe_deps(*k).iter().all(|d| !failed.contains(d)))
        .collect()
}
