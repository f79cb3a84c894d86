//! Axial attention: the fused kernel, the global-attention oracle, and the
//! multi-head and transformer layers built on them.

pub mod kernel;
mod layer;
mod oracle;

pub use kernel::{mac_counter, Gates};
pub use layer::{
    axial_attention, count_extra_gate_params, count_params, AttnFlavor, AttnLayerConfig, Axis, GateGranularity,
    GateSet, GatedAxialLayer, HasParams, MultiHeadAxial, ProjectionSet, RelPosEnc, TransformerLayerConfig,
};
pub use oracle::{full_self_attention_oracle, ORACLE_MAX_SITES};
pub(crate) use oracle::full_attention as oracle_unguarded;


#[cfg(test)]
mod tests;
