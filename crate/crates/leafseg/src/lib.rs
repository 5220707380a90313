//! Self-supervised machinery for 3D leaf instance segmentation at desk
//! scale: domain augmentations, graph-geodesic similarity targets, the
//! spatially informed contrastive loss with analytic gradients, bottom-up
//! instance postprocessing, and mAP-based evaluation — no neural network
//! required.
//!
//! The pipeline mirrors how the pieces compose in practice: generate or load
//! a per-plant point cloud, derive one or two augmented views, build a kNN
//! graph and its geodesic similarity target, optimize per-point embeddings
//! against that target (or plug in externally produced ones), cluster the
//! embeddings bottom-up starting from the leaf tips, and score the result
//! against ground-truth labels.

pub mod augment;
pub mod cloud;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod geodesy;
pub mod io;
pub mod loss;
mod math;

pub use cloud::{plant_center, subsample, synth_plant, PointCloud, SynthPlantParams};
pub use error::{Error, Result};
