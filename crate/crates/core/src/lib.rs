//! Binary function similarity from data-dependence slices.
//!
//! Functions written in a small textual IR are pruned, sliced per basic block
//! into data-dependence slices, and connected into a flow-typed slice graph.
//! Slices are embedded by a small masked-token encoder fine-tuned with a
//! Siamese contrastive objective, and function pairs are scored by a graph
//! matching network with cross-graph attention.

pub mod encoder;
pub mod gmn;
pub mod graphbuild;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod sir;
pub mod slicer;
pub mod tokenize;
