//! The two-branch interactive feature fusion network.
//!
//! Each branch lifts its single-channel feature to `C` channels (Up-conv),
//! runs `B` residual-attention blocks each followed by a cross-branch
//! interaction module, and projects back to one channel (Dn-conv). The merge
//! module then learns a per-element gate that convexly combines the two
//! branch outputs into the fused feature.

mod checkpoint;
mod config;
mod layers;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION, MANIFEST};
pub use config::IffArchConfig;
pub use layers::{Ctx, InteractionVars, MergeVars, RaVars};
pub use net::{
    as_feature_batch, iffnet_forward, BlockVars, BranchVars, ForwardPass, Fusion, IffNet,
    IffNetVars,
};
pub use params::{
    param_count, BufferStore, Init, ParamLayout, ParamSpec, ParamStore, ParamVars, BRANCHES,
};
