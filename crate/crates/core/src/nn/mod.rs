//! The LinkNet-style encoder-decoder: layer kernels, graph construction and execution.

pub mod blocks;
pub mod exec;
pub mod graph;
pub mod layers;
pub mod params;

pub use exec::{backward, forward, predict, update_running_stats, ForwardPass, Gradients, Mode};
pub use graph::{
    build_network, GraphBuilder, LayerKind, LayerSpec, NetworkConfig, NetworkGraph, Node, NodeId,
    ParamRole, ParamSpec,
};
pub use params::{init_parameters, ParamTensor, ParameterStore};
