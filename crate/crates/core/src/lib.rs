//! Seg-Grad-CAM workbench.
//!
//! A small reverse-mode autodiff engine, a miniature U-Net, a synthetic
//! shapes dataset with netpbm I/O, a trainer with a binary checkpoint format,
//! and gradient-weighted class activation heatmaps for segmentation: the class
//! logits of a chosen pixel set are summed into one objective whose gradients
//! weight the feature maps of a chosen layer.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod mask;
pub mod model;
pub mod pnm;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use graph::{GradientStore, Graph, NodeId, TapPerturbation};
pub use explain::{ExplainRequest, Heatmap, PixelSet};
pub use mask::ClassMask;
pub use model::{ForwardOptions, ForwardPass, Model, SegmentationNet, ShallowNet, UNetConfig};
pub use tensor::{Real, Tensor};
