//! Conditional Information Gain Networks.
//!
//! Tree-structured convolutional networks whose split nodes carry a small
//! router network trained by a differentiable information-gain objective.
//! Samples are routed down one root-to-leaf path at evaluation time, so each
//! prediction touches only one expert plus the routers on its path.
//!
//! Module map:
//! - [`substrate`]: tensors, the fixed layer set, a reverse-mode tape, SGD with momentum.
//! - [`igmath`]: tempered softmax, entropy, joint estimation and information gain.
//! - [`graph`]: the tree model, routing, sparse forward and combined loss.
//! - [`trainer`]: schedules, the training loop and grid search.
//! - [`dataio`]: IDX parsing/writing and minibatch iteration.
//! - [`report`]: experiment config, metrics persistence, histograms and tables.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod error;
pub mod graph;
pub mod igmath;
pub mod par;
pub mod report;
pub mod scalar;
pub mod substrate;
pub mod trainer;

pub use error::{CignError, Result};
pub use scalar::Scalar;
