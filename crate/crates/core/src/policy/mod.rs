//! The three learned policies: CNN, hierarchical CNN and recurrent CNN.

mod cluster;
mod model;
mod nets;

pub use cluster::{
    hcnn_forward, hist_features, kmeans_assign, kmeans_fit, ClusterModel, KMeansFit, HIST_EDGES,
    HIST_FEATURES, KMEANS_MAX_ITERATIONS,
};
pub use model::{load_model, read_model, save_model, write_model, Model, PolicyController};
pub use nets::{
    cnn_forward, cnn_forward_batch, cnn_graph, cnn_shape_chain, frame_inputs, frames_to_input,
    rcnn_forward, rcnn_graph, rcnn_sequence, trunk_forward, Bound, CnnParams, ConvTrunk,
    RcnnParams, ShapeChain, FC_UNITS, FEATURES, LSTM_HIDDEN, OUTPUTS,
};

use thiserror::Error;

use crate::tensor::{CheckpointError, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("need at least {k} distinct feature vectors, got {distinct}")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("cluster model has {members} member networks for {k} clusters")]
    MissingMember { k: usize, members: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A fixed, named collection of parameter tensors.
pub trait ParamSet<T: Scalar> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }
}

/// Total element count of a list of layer shapes.
pub fn param_count(shapes: &[&[usize]]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// He-uniform bound for a layer with `fan_in` inputs.
pub(crate) fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}
