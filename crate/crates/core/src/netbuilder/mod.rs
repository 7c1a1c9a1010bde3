//! Declarative network specs, the architectures built from them, exact
//! parameter counts and an executor that runs a spec on the autodiff tape.

mod build;
mod model;
mod params;
mod spec;

pub use build::{
    build_block, build_mu_net, build_network, build_patch_classifier, build_unet, Architecture, BlockGraph,
    BlockVariant, InputShape, ENCODER_DEPTH, MU_NET_HALF_WIDTHS, MU_NET_WIDTHS, UNET_WIDTHS,
};
pub use model::{Forward, Network, BN_EPSILON};
pub use params::{count_parameters, LayerParams, ParamCount};
pub use spec::{LayerKind, LayerShape, LayerSpec, NetworkSpec};
