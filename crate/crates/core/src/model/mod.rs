//! Network definition: configuration, layer graph, runtime and weight import.

pub mod config;
pub mod graph;
pub mod network;
pub mod pretrained;

pub use config::{make_ablation, Ablation, ModelConfig};
pub use graph::{Dims, Graph, LayerKind, LayerSpec, ParameterReport, ReceptiveFieldReport};
pub use network::{Network, ParamRole};
