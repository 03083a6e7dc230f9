//! Classification heads on (optionally projected) features: plain
//! categorical cross-entropy and the angular-margin family.

mod config;
mod losses;
mod queue;

pub use config::{Family, MarginConfig, DEFAULT_QUEUE_CAPACITY, DEFAULT_SCALE};
pub use losses::{
    arcface_loss, broadface_step, cce_loss, cosface_loss, cosine_logits, head_forward,
    inference_scores, sphereface_loss, ACOS_CLAMP,
};
pub use queue::{compensate, EmbeddingQueue, QueueEntry};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Classifier weights, one column per class. Columns are normalised only
/// when logits are computed; the raw matrix is what gets optimised.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w: Tensor,
}

impl HeadWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::Shape(format!(
                "head weights must be d x C, got {:?}",
                w.shape()
            )));
        }
        Ok(HeadWeights { w })
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim()).map(|k| self.w.at(k, j)).collect()
    }
}
