//! Storm-surge forecast bias correction with a spatio-temporal graph network.
//!
//! Gauge stations form the nodes of a correlation/proximity graph. The model
//! lifts each station's offset history through an MLP, mixes it across the
//! graph with a GCN and a multi-head GAT, and runs the per-node sequences
//! through two LSTM layers to forecast future offsets. Predicted offsets are
//! subtracted from the physics-model water levels to correct them.

pub mod correction;
pub mod geo_graph;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use numerics::{Tape, Tensor, Var};
