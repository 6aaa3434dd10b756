//! Variational autoencoder for molecular graphs.
//!
//! The encoder turns a graph into per-node Gaussian posteriors by K-hop
//! neighbourhood aggregation; the decoder samples node types, an edge count
//! and then edges one at a time under validity masks. Training maximizes a
//! lower bound on the likelihood using BFS edge orders and negative sampling.
//! Around the model sit synthetic graph generators with exact likelihoods
//! and a sparse-GP Bayesian optimizer over the latent space.

pub mod decoder;
pub mod encoder;
pub mod latentopt;
pub mod masks;
pub mod molgraph;
pub mod synth;
pub mod tensor;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Graph(#[from] molgraph::GraphError),
    #[error(transparent)]
    Mask(#[from] masks::MaskError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("latent matrix has {got} rows but the graph has {expected} nodes")]
    LatentRows { expected: usize, got: usize },
    #[error("edge order does not match the graph: {0}")]
    EdgeOrder(String),
    #[error("no unmasked candidate edge remains")]
    NoCandidate,
    #[error("iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gaussian process: {0}")]
    Gp(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
