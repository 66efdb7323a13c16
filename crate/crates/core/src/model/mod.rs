//! The multi-level feature connected network: configuration, graph,
//! parameter registry and the reference forward pass.

mod forward;
mod graph;
mod params;

pub use forward::forward;
pub use graph::{build_graph, receptive_halo, Block, GraphSpec, Node, NodeId, NodeKind};
pub use params::{param_count, ParamRole, ParamSet, TcbpParams, TensorSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature width of every convolution except the head.
pub const WIDTH: usize = 64;
pub const KERNEL_SIZE: usize = 3;
pub const MAX_DEPTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_bands: usize,
    pub width: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub bn_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_bands: 10,
            width: WIDTH,
            depth: 4,
            kernel_size: KERNEL_SIZE,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn with_depth(depth: usize) -> Self {
        ModelConfig {
            depth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width != WIDTH {
            return Err(Error::config(format!("width is fixed at {WIDTH}, got {}", self.width)));
        }
        if self.kernel_size != KERNEL_SIZE {
            return Err(Error::config(format!(
                "kernel size is fixed at {KERNEL_SIZE}, got {}",
                self.kernel_size
            )));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::config(format!(
                "depth must be within 1..={MAX_DEPTH}, got {}",
                self.depth
            )));
        }
        if self.in_bands == 0 {
            return Err(Error::config("at least one input band is required"));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::config(format!("bn_eps must be positive, got {}", self.bn_eps)));
        }
        Ok(())
    }

    /// Spatial sizes must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}
