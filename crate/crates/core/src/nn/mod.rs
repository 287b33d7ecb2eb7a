//! Minimal dense tensor and reverse-mode autodiff toolkit used by every
//! learned stage.

mod graph;
mod layers;
mod matrix;
mod params;

pub use graph::{softmax_in_place, softmax_rows, Gradients, Graph, Var, PAD};
pub use layers::{BatchNorm, BatchStats, LayerNorm, Linear, BN_EPS, BN_MOMENTUM};
pub use matrix::Matrix;
pub use params::{init_fan_in, init_normal, Adam, AdamConfig, ParamId, ParamSet};

#[cfg(test)]
mod gradcheck;
