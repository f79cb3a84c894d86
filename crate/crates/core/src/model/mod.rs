//! MedT and its ablation variants.

mod config;
mod patches;

pub use config::{
    ModelConfig, StagePlan, Variant, MAX_WIDTH_FACTOR, MIN_DOWNSAMPLED, MIN_IMG_SIZE, MIN_PATCH_SIZE,
};
pub(crate) use config::parse;
pub use patches::{extract_patches, merge_patches, PatchGrid};

use crate::attention::{AttnFlavor, GateGranularity, GateSet, GatedAxialLayer, HasParams, TransformerLayerConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv};
use crate::tensor::{BatchNormParams, Graph, Mode, NodeId, ParamId, ParamStore, Scalar, Tensor};

/// Three `conv3x3 -> batchnorm -> relu` stages mapping the input to `base_channels`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub stages: Vec<(Conv, BatchNormParams)>,
}

impl ConvBlock {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let c_in = if i == 0 { cin } else { cout };
            let conv = Conv::new(&mut s, &format!("conv{i}"), c_in, cout, 3, 1, false)?;
            let bn = s.batchnorm(&format!("bn{i}"), cout)?;
            stages.push((conv, bn));
        }
        Ok(Self { stages })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (conv, bn) in &self.stages {
            h = conv.forward(g, store, h)?;
            h = g.batchnorm2d(store, h, bn)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

impl HasParams for ConvBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|(c, bn)| {
                let mut ids = c.param_ids();
                ids.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]);
                ids
            })
            .collect()
    }
}

/// `relu(upsample2x(conv3x3(x)))`, upsampling only when the matching encoder
/// stage downsampled.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub conv: Conv,
    pub upsample: bool,
}

impl DecoderBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(g, store, x)?;
        let h = if self.upsample { g.upsample2x(h)? } else { h };
        Ok(g.relu(h))
    }
}

/// Encoder stack of gated axial layers and the mirrored decoder stack.
#[derive(Debug, Clone)]
pub struct Branch {
    pub plan: StagePlan,
    pub encoders: Vec<GatedAxialLayer>,
    /// `decoders[j]` maps stage `j + 1` back to stage `j`.
    pub decoders: Vec<DecoderBlock>,
}

impl Branch {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        plan: StagePlan,
        heads: usize,
        flavor: AttnFlavor,
        granularity: GateGranularity,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let depth = plan.strides.len();
        let mut encoders = Vec::with_capacity(depth);
        for i in 0..depth {
            encoders.push(GatedAxialLayer::new(
                &mut s,
                &format!("enc{}", i + 1),
                TransformerLayerConfig {
                    channels_in: plan.channels[i],
                    channels_out: plan.channels[i + 1],
                    heads,
                    stride: plan.strides[i],
                    flavor,
                    granularity,
                    height: plan.sizes[i],
                    width: plan.sizes[i],
                },
            )?);
        }
        let mut decoders = Vec::with_capacity(depth);
        for i in 0..depth {
            decoders.push(DecoderBlock {
                conv: Conv::new(&mut s, &format!("dec{}", i + 1), plan.channels[i + 1], plan.channels[i], 3, 1, true)?,
                upsample: plan.strides[i] == 2,
            });
        }
        Ok(Self {
            plan,
            encoders,
            decoders,
        })
    }

    /// Output has `plan.channels[0]` channels at the input resolution.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let mut feats = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for enc in &self.encoders {
            h = enc.forward(g, store, h)?;
            feats.push(h);
        }
        for j in (0..self.decoders.len()).rev() {
            h = self.decoders[j].forward(g, store, h)?;
            if j > 0 {
                let skip = feats[j - 1];
                if g.value(skip).shape() != g.value(h).shape() {
                    return Err(Error::mismatch("decoder skip", g.value(h).shape(), g.value(skip).shape()));
                }
                h = g.add(h, skip)?;
            }
        }
        Ok(h)
    }

    pub fn gate_sets(&self) -> impl Iterator<Item = &GateSet> {
        self.encoders.iter().flat_map(|e| e.gate_sets())
    }
}

impl HasParams for Branch {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.encoders.iter().flat_map(|e| e.param_ids()).collect();
        ids.extend(self.decoders.iter().flat_map(|d| d.conv.param_ids()));
        ids
    }
}

/// Model structure: parameter handles only, values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    pub global: Option<Branch>,
    pub local: Option<Branch>,
    pub patches: PatchGrid,
    /// Full-resolution encoder-decoder of the axial variants.
    pub single: Option<Branch>,
    pub fusion: Conv,
}

impl Network {
    /// Builds the structure and initializes its parameters into `store`.
    pub fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        Self::build_with(config, store, true)
    }

    /// Like [`Network::build`] with every gated attention layer replaced by its
    /// ungated positional twin.
    pub fn build_ungated<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        Self::build_with(config, store, false)
    }

    fn build_with<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, gates: bool) -> Result<Self> {
        config.validate()?;
        let c = config;
        let ungate = |f: AttnFlavor| if !gates && f == AttnFlavor::Gated { AttnFlavor::Positional } else { f };
        let mut b = Builder::new(store, c.seed);
        let stem = ConvBlock::new(&mut b, "stem", c.in_channels, c.base_channels)?;
        let v = c.variant;
        let branch = |b: &mut Builder<'_, T>, name: &str, plan: StagePlan, flavor| {
            Branch::new(b, name, plan, c.heads, ungate(flavor), c.gate_granularity)
        };
        let global = if v.uses_global() {
            Some(branch(&mut b, "global", c.global_plan(), v.global_flavor())?)
        } else {
            None
        };
        let local = if v.uses_local() {
            Some(branch(&mut b, "local", c.local_plan(), v.local_flavor())?)
        } else {
            None
        };
        let single = if v.uses_single() {
            Some(branch(&mut b, "axial", c.single_plan(), v.single_flavor())?)
        } else {
            None
        };
        let fusion = Conv::new(&mut b, "fusion", c.base_channels, 1, 1, 1, true)?;
        Ok(Self {
            config: c.clone(),
            stem,
            global,
            local,
            patches: PatchGrid::new(c.patch_grid, c.img_size, c.img_size)?,
            single,
            fusion,
        })
    }

    /// Sigmoid probabilities `(N, 1, I, I)` for an `(N, in_channels, I, I)` input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let c = &self.config;
        let (_, ch, h, w) = g.value(x).dims4()?;
        if (ch, h, w) != (c.in_channels, c.img_size, c.img_size) {
            return Err(Error::InvalidShape {
                shape: g.value(x).shape().to_vec(),
                reason: format!(
                    "model expects (N, {}, {}, {}) input",
                    c.in_channels, c.img_size, c.img_size
                ),
            });
        }
        let stem = self.stem.forward(g, store, x)?;
        let mut fused: Option<NodeId> = None;
        let mut accumulate = |g: &mut Graph<T>, y: NodeId| -> Result<()> {
            fused = Some(match fused {
                Some(f) => g.add(f, y)?,
                None => y,
            });
            Ok(())
        };
        if let Some(single) = &self.single {
            let y = single.forward(g, store, stem)?;
            accumulate(g, y)?;
        }
        if let Some(global) = &self.global {
            let y = global.forward(g, store, stem)?;
            accumulate(g, y)?;
        }
        if let Some(local) = &self.local {
            let y = self.local_forward(local, g, store, stem)?;
            accumulate(g, y)?;
        }
        let fused = fused.expect("every variant has a branch");
        let logits = self.fusion.forward(g, store, fused)?;
        Ok(g.sigmoid(logits))
    }

    /// Runs the local branch on every patch independently and reassembles.
    pub fn local_forward<T: Scalar>(
        &self,
        local: &Branch,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        stem: NodeId,
    ) -> Result<NodeId> {
        let parts = self.patches.extract(g, stem)?;
        let mut outs = Vec::with_capacity(parts.len());
        for p in parts {
            outs.push(local.forward(g, store, p)?);
        }
        self.patches.merge(g, &outs)
    }

    pub fn gate_sets(&self) -> Vec<&GateSet> {
        [&self.single, &self.global, &self.local]
            .into_iter()
            .flatten()
            .flat_map(|b| b.gate_sets())
            .collect()
    }

    pub fn set_gates_trainable<T: Scalar>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for set in self.gate_sets() {
            set.set_trainable(store, trainable);
        }
    }
}

impl HasParams for Network {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem.param_ids();
        for b in [&self.single, &self.global, &self.local].into_iter().flatten() {
            ids.extend(b.param_ids());
        }
        ids.extend(self.fusion.param_ids());
        ids
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(config, &mut params)?;
        Ok(Self { net, params })
    }

    pub fn new_ungated(config: &ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build_ungated(config, &mut params)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn forward(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self.net.forward(g, &self.params, x)
    }

    /// Evaluation-mode probabilities for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(Mode::Eval);
        let xi = g.input(x.clone());
        let y = self.forward(&mut g, xi)?;
        Ok(g.value(y).clone())
    }

    /// Trainable scalar count (batchnorm running statistics excluded).
    pub fn count_parameters(&self) -> usize {
        self.params.count_weights()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests;
