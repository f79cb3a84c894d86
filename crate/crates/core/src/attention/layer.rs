use crate::error::{Error, Result};
use crate::nn::{Builder, Conv};
use crate::tensor::{BatchNormParams, Graph, NodeId, ParamId, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

/// How many gate sets a multi-head layer owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateGranularity {
    /// One set shared by every head of a (layer, axis).
    #[default]
    PerLayer,
    PerHead,
}

impl GateGranularity {
    pub fn name(self) -> &'static str {
        match self {
            GateGranularity::PerLayer => "per_layer",
            GateGranularity::PerHead => "per_head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_layer" => Some(Self::PerLayer),
            "per_head" => Some(Self::PerHead),
            _ => None,
        }
    }
}

/// Which terms of the attention affinity are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnFlavor {
    /// Relative positional terms scaled by learnable gates.
    Gated,
    /// Relative positional terms, gates fixed at 1.
    Positional,
    /// Content-only attention.
    Plain,
}

impl AttnFlavor {
    pub fn positional(self) -> bool {
        self != AttnFlavor::Plain
    }

    pub fn gated(self) -> bool {
        self == AttnFlavor::Gated
    }
}

/// Anything that owns parameters in a [`ParamStore`].
pub trait HasParams {
    fn param_ids(&self) -> Vec<ParamId>;
}

/// Trainable scalar count of `layer`. Buffers are excluded.
pub fn count_params<T: Scalar>(layer: &impl HasParams, store: &ParamStore<T>) -> usize {
    layer
        .param_ids()
        .into_iter()
        .filter(|&id| store.get(id).kind == crate::tensor::ParamKind::Weight)
        .map(|id| store.value(id).numel())
        .sum()
}

/// Parameter count of a gated layer minus that of its ungated twin.
pub fn count_extra_gate_params<T: Scalar, L: HasParams>(
    gated: (&L, &ParamStore<T>),
    ungated: (&L, &ParamStore<T>),
) -> i64 {
    count_params(gated.0, gated.1) as i64 - count_params(ungated.0, ungated.1) as i64
}

/// Three 1x1 projections `C_in -> C_attn` without bias.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub channels_in: usize,
    pub channels_attn: usize,
}

impl ProjectionSet {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cattn: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let bound = 1.0 / (cin as f64).sqrt();
        let shape = [cattn, cin, 1, 1];
        Ok(Self {
            w_q: s.uniform("w_q", &shape, bound)?,
            w_k: s.uniform("w_k", &shape, bound)?,
            w_v: s.uniform("w_v", &shape, bound)?,
            channels_in: cin,
            channels_attn: cattn,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<[NodeId; 3]> {
        let mut out = [x; 3];
        for (slot, id) in out.iter_mut().zip([self.w_q, self.w_k, self.w_v]) {
            let w = g.param(store, id);
            *slot = g.conv2d(x, w, None, 1, 0)?;
        }
        Ok(out)
    }
}

impl HasParams for ProjectionSet {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v]
    }
}

/// Relative tables `r_q`, `r_k`, `r_v` of shape `(2L - 1, d)` for one head and axis.
#[derive(Debug, Clone)]
pub struct RelPosEnc {
    pub axis_len: usize,
    pub head_dim: usize,
    pub r_q: ParamId,
    pub r_k: ParamId,
    pub r_v: ParamId,
}

impl RelPosEnc {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, axis_len: usize, head_dim: usize) -> Result<Self> {
        if axis_len == 0 || head_dim == 0 {
            return Err(Error::invalid("RelPosEnc", "axis length and head dim must be positive"));
        }
        let mut s = b.scope(name);
        let bound = 1.0 / (head_dim as f64).sqrt();
        let shape = [2 * axis_len - 1, head_dim];
        Ok(Self {
            axis_len,
            head_dim,
            r_q: s.uniform("r_q", &shape, bound)?,
            r_k: s.uniform("r_k", &shape, bound)?,
            r_v: s.uniform("r_v", &shape, bound)?,
        })
    }

    /// Row of the tables used when query `j` attends key `w`.
    pub fn index(&self, j: usize, w: usize) -> usize {
        j + self.axis_len - 1 - w
    }

    fn nodes<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> [NodeId; 3] {
        [self.r_q, self.r_k, self.r_v].map(|id| g.param(store, id))
    }
}

impl HasParams for RelPosEnc {
    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.r_q, self.r_k, self.r_v]
    }
}

/// The four scalars `[G_Q, G_K, G_V1, G_V2]`, initialised to 1.
#[derive(Debug, Clone)]
pub struct GateSet {
    pub ids: [ParamId; 4],
}

impl GateSet {
    pub const NAMES: [&'static str; 4] = ["g_q", "g_k", "g_v1", "g_v2"];

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str) -> Result<Self> {
        let mut s = b.scope(name);
        let mut ids = Vec::with_capacity(4);
        for n in Self::NAMES {
            ids.push(s.constant(n, &[1], 1.0)?);
        }
        Ok(Self {
            ids: ids.try_into().expect("four gates"),
        })
    }

    pub fn set_trainable<T: Scalar>(&self, store: &mut ParamStore<T>, trainable: bool) {
        for &id in &self.ids {
            store.get_mut(id).trainable = trainable;
        }
    }

    pub fn values<T: Scalar>(&self, store: &ParamStore<T>) -> [T; 4] {
        self.ids.map(|id| store.value(id).item())
    }

    pub fn set_values<T: Scalar>(&self, store: &mut ParamStore<T>, values: [T; 4]) {
        for (&id, v) in self.ids.iter().zip(values) {
            store.get_mut(id).value.data_mut()[0] = v;
        }
    }

    fn nodes<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> [NodeId; 4] {
        self.ids.map(|id| g.param(store, id))
    }
}

impl HasParams for GateSet {
    fn param_ids(&self) -> Vec<ParamId> {
        self.ids.to_vec()
    }
}

/// Single-head axial attention of `x` along `axis`.
///
/// Height attention is width attention on the H/W-transposed map.
pub fn axial_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: NodeId,
    proj: &ProjectionSet,
    enc: Option<&RelPosEnc>,
    gates: Option<&GateSet>,
    axis: Axis,
) -> Result<NodeId> {
    if gates.is_some() && enc.is_none() {
        return Err(Error::invalid("axial_attention", "gates require a positional encoding"));
    }
    let x = along_width(g, x, axis)?;
    check_axis_len(g, x, enc, axis)?;
    let [q, k, v] = proj.forward(g, store, x)?;
    let tables = enc.map(|e| e.nodes(g, store));
    let gates = gates.map(|s| s.nodes(g, store));
    let y = g.axial_attention(q, k, v, tables, gates)?;
    along_width(g, y, axis)
}

fn along_width<T: Scalar>(g: &mut Graph<T>, x: NodeId, axis: Axis) -> Result<NodeId> {
    match axis {
        Axis::Width => Ok(x),
        Axis::Height => g.transpose_hw(x),
    }
}

fn check_axis_len<T: Scalar>(g: &Graph<T>, x: NodeId, enc: Option<&RelPosEnc>, axis: Axis) -> Result<()> {
    if let Some(e) = enc {
        let len = g.value(x).shape()[3];
        if len != e.axis_len {
            return Err(Error::invalid(
                "axial_attention",
                format!("{} axis has length {len}, encoding expects {}", axis.name(), e.axis_len),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AttnLayerConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    pub heads: usize,
    pub gated: bool,
    pub positional: bool,
    pub axis: Axis,
    /// Length of the attended axis; sizes the relative tables.
    pub axis_len: usize,
    pub granularity: GateGranularity,
}

impl AttnLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels_out % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels_out {} is not divisible by heads {}",
                self.channels_out, self.heads
            )));
        }
        if self.gated && !self.positional {
            return Err(Error::Config("gated attention requires positional encodings".into()));
        }
        if self.channels_in == 0 || self.axis_len == 0 {
            return Err(Error::Config("attention layer dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels_out / self.heads
    }
}

/// Shared projection, then per-head axial attention, heads concatenated on channels.
#[derive(Debug, Clone)]
pub struct MultiHeadAxial {
    pub config: AttnLayerConfig,
    pub proj: ProjectionSet,
    pub encodings: Vec<RelPosEnc>,
    pub gates: Vec<GateSet>,
}

impl MultiHeadAxial {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, config: AttnLayerConfig) -> Result<Self> {
        config.validate()?;
        let mut s = b.scope(name);
        let proj = ProjectionSet::new(&mut s, "proj", config.channels_in, config.channels_out)?;
        let d = config.head_dim();
        let mut encodings = Vec::new();
        if config.positional {
            for h in 0..config.heads {
                encodings.push(RelPosEnc::new(&mut s, &format!("head{h}.relpos"), config.axis_len, d)?);
            }
        }
        let mut gates = Vec::new();
        if config.gated {
            match config.granularity {
                GateGranularity::PerLayer => gates.push(GateSet::new(&mut s, "gates")?),
                GateGranularity::PerHead => {
                    for h in 0..config.heads {
                        gates.push(GateSet::new(&mut s, &format!("head{h}.gates"))?);
                    }
                }
            }
        }
        Ok(Self {
            config,
            proj,
            encodings,
            gates,
        })
    }

    pub fn gates_for(&self, head: usize) -> Option<&GateSet> {
        match self.gates.len() {
            0 => None,
            1 => Some(&self.gates[0]),
            _ => Some(&self.gates[head]),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let axis = self.config.axis;
        let x = along_width(g, x, axis)?;
        check_axis_len(g, x, self.encodings.first(), axis)?;
        let [q, k, v] = self.proj.forward(g, store, x)?;
        let d = self.config.head_dim();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = g.slice_channels(q, h * d, d)?;
            let kh = g.slice_channels(k, h * d, d)?;
            let vh = g.slice_channels(v, h * d, d)?;
            let tables = self.encodings.get(h).map(|e| e.nodes(g, store));
            let gates = self.gates_for(h).map(|s| s.nodes(g, store));
            heads.push(g.axial_attention(qh, kh, vh, tables, gates)?);
        }
        let y = g.concat_channels(&heads)?;
        along_width(g, y, axis)
    }
}

impl HasParams for MultiHeadAxial {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.proj.param_ids();
        ids.extend(self.encodings.iter().flat_map(|e| e.param_ids()));
        ids.extend(self.gates.iter().flat_map(|s| s.param_ids()));
        ids
    }
}

#[derive(Debug, Clone)]
pub struct TransformerLayerConfig {
    pub channels_in: usize,
    pub channels_out: usize,
    pub heads: usize,
    pub stride: usize,
    pub flavor: AttnFlavor,
    pub granularity: GateGranularity,
    /// Input spatial size.
    pub height: usize,
    pub width: usize,
}

impl TransformerLayerConfig {
    pub fn out_size(&self) -> (usize, usize) {
        (self.height.div_ceil(self.stride), self.width.div_ceil(self.stride))
    }
}

/// `relu(bn(conv1x1)) -> height MHA -> width MHA -> relu -> conv1x1 -> + residual`.
///
/// The residual is the input itself, or a strided 1x1 projection of it when
/// the shape changes.
#[derive(Debug, Clone)]
pub struct GatedAxialLayer {
    pub config: TransformerLayerConfig,
    pub conv_in: Conv,
    pub bn: BatchNormParams,
    pub height: MultiHeadAxial,
    pub width: MultiHeadAxial,
    pub out_proj: Conv,
    pub residual: Option<Conv>,
}

impl GatedAxialLayer {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, config: TransformerLayerConfig) -> Result<Self> {
        if !(1..=2).contains(&config.stride) {
            return Err(Error::Config(format!("stride {} not in {{1, 2}}", config.stride)));
        }
        let mut s = b.scope(name);
        let (cin, cout) = (config.channels_in, config.channels_out);
        let (oh, ow) = config.out_size();
        let conv_in = Conv::new(&mut s, "conv_in", cin, cout, 1, config.stride, false)?;
        let bn = s.batchnorm("bn", cout)?;
        let attn = |axis: Axis, axis_len: usize| AttnLayerConfig {
            channels_in: cout,
            channels_out: cout,
            heads: config.heads,
            gated: config.flavor.gated(),
            positional: config.flavor.positional(),
            axis,
            axis_len,
            granularity: config.granularity,
        };
        let height = MultiHeadAxial::new(&mut s, "attn_h", attn(Axis::Height, oh))?;
        let width = MultiHeadAxial::new(&mut s, "attn_w", attn(Axis::Width, ow))?;
        let out_proj = Conv::new(&mut s, "out_proj", cout, cout, 1, 1, true)?;
        let residual = if cin != cout || config.stride != 1 {
            Some(Conv::new(&mut s, "residual", cin, cout, 1, config.stride, false)?)
        } else {
            None
        };
        Ok(Self {
            config,
            conv_in,
            bn,
            height,
            width,
            out_proj,
            residual,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv_in.forward(g, store, x)?;
        let h = g.batchnorm2d(store, h, &self.bn)?;
        let h = g.relu(h);
        let h = self.height.forward(g, store, h)?;
        let h = self.width.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.out_proj.forward(g, store, h)?;
        let r = match &self.residual {
            Some(c) => c.forward(g, store, x)?,
            None => x,
        };
        g.add(h, r)
    }

    pub fn gate_sets(&self) -> impl Iterator<Item = &GateSet> {
        self.height.gates.iter().chain(&self.width.gates)
    }
}

impl HasParams for GatedAxialLayer {
    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv_in.param_ids();
        ids.extend([self.bn.gamma, self.bn.beta, self.bn.running_mean, self.bn.running_var]);
        ids.extend(self.height.param_ids());
        ids.extend(self.width.param_ids());
        ids.extend(self.out_proj.param_ids());
        if let Some(r) = &self.residual {
            ids.extend(r.param_ids());
        }
        ids
    }
}

impl HasParams for Conv {
    fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}
