//! Heterogeneous-graph learning engine for multimodal subject data.
//!
//! Each subject carries up to four feature modalities (genomics, image
//! patches, cell graphs, text sentences). The engine embeds them into a
//! typed graph, fills in missing modalities with learnable prompt nodes,
//! aggregates information with meta-path-guided multi-relation attention,
//! and trains classification and survival heads end to end on a small
//! reverse-mode autodiff core.
//!
//! Module map:
//! - [`tensor`] / [`optim`]: dense f64 tensors, the op tape, Adam.
//! - [`graph`]: the typed graph data model and feature-to-graph transform.
//! - [`completion`]: modality priors, prompt bank, graph completion.
//! - [`aggregation`]: meta-paths, neighbor search, relational attention.
//! - [`tasks`]: task heads, losses, AUC / accuracy / concordance metrics.
//! - [`data`]: subject records, synthetic generation, folds, augmentation.
//! - [`model`] / [`train`]: parameter assembly, forward pass, training loop.

pub mod aggregation;
pub mod completion;
pub mod data;
pub mod graph;
pub mod model;
pub mod optim;
#[doc(hidden)]
pub mod oracle;
pub mod par;
pub mod tasks;
pub mod tensor;
pub mod train;

use thiserror::Error;

/// Errors surfaced by any layer of the engine.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty softmax")]
    EmptySoftmax,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("empty cell graph")]
    EmptyCellGraph,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("no prior available for modality {0}")]
    NoPrior(String),
    #[error("nothing to complete: modality {0} is present")]
    NothingToComplete(String),
    #[error("neighbor without relation: node {src} has no edge into target {dst}")]
    NeighborWithoutRelation { src: usize, dst: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unknown variant {name:?}; valid names: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
