//! Training and evaluation engine for social-graph-augmented implicit-feedback
//! recommendation: a CLSRec-style model (interaction, social and
//! SVD-reconstructed towers, contrastive alignment, co-attention interest
//! isolation and gated fusion) with BPR-MF and LightGCN baselines.

pub mod alignment;
pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod sparse;
pub mod svd;
pub mod train;

pub use autodiff::{grad_check, NodeId, Tape};
pub use checkpoint::Checkpoint;
pub use config::{Ablation, ModelKind, RunConfig};
pub use data::{Corpus, Dataset, Split};
pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use metrics::MetricsReport;
pub use sparse::SparseMatrix;
