//! Parameter construction helpers and the small layers shared by every block.

use crate::error::Result;
use crate::tensor::{
    param_rng, uniform_init, BatchNormParams, Graph, NodeId, ParamId, ParamKind, ParamStore, Scalar, Tensor,
};

/// Creates named parameters under a dotted prefix.
///
/// Each parameter draws its initial value from a generator keyed by
/// `(seed, full name)`.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.full(name);
        Builder {
            seed: self.seed,
            prefix,
            store: &mut *self.store,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform `(-bound, bound)` weight.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let full = self.full(name);
        let value = uniform_init(shape, bound, &mut param_rng(self.seed, &full))?;
        self.store.insert(full, value, ParamKind::Weight)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full(name);
        self.store
            .insert(full, Tensor::full(shape.to_vec(), T::from_f64(value))?, ParamKind::Weight)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full(name);
        self.store
            .insert(full, Tensor::full(shape.to_vec(), T::from_f64(value))?, ParamKind::Buffer)
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Result<BatchNormParams> {
        let mut b = self.scope(name);
        Ok(BatchNormParams {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
            running_mean: b.buffer("running_mean", &[channels], 0.0)?,
            running_var: b.buffer("running_var", &[channels], 1.0)?,
        })
    }
}

/// 2D convolution with `uniform(±1/sqrt(fan_in))` weights and zero bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = s.uniform("weight", &[cout, cin, kernel, kernel], bound)?;
        let bias = if bias {
            Some(s.constant("bias", &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Output length along one spatial axis.
    pub fn out_len(&self, len: usize, kernel: usize) -> usize {
        (len + 2 * self.pad - kernel) / self.stride + 1
    }
}
