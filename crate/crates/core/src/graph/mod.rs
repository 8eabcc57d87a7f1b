//! The tree-structured network.
//!
//! Split nodes hold an F stack (classification features) and an H stack
//! (router) ending in a K-way head; leaves hold an F stack ending in the
//! class logits. A minibatch is routed down the tree with per-node row
//! masks so every node only computes on the samples that reach it.

mod arch;
mod checkpoint;
mod count;
mod model;
mod routing;
mod tree;

pub use arch::{preset, preset_names, Preset};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use count::{count_params, NodeCount, ParamReport, PathCount};
pub use model::{Cign, ForwardPass, LeafLogits, LossBreakdown, NodeIg, ObjectiveWeights, RouterOutput};
pub use routing::{one_hot_psi, route, route_rows, RoutingPolicy, RoutingState};
pub use tree::{NodeKind, RouterSource, Topology, TopologyNode, TreeSpec};
