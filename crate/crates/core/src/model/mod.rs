//! The recommender: gated graph propagation over the session graph, a
//! soft-attention global preference, an order-weighted cosine preference,
//! optional side-information terms, and a linear fusion scored against every
//! item embedding.

mod checkpoint;
mod forward;
mod params;

use awgnn_tensor::TensorError;
use thiserror::Error;

use crate::data::{Catalog, SideInfoTable};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{
    adaptive_weights, cross_entropy, ggnn_propagate, order_weighted_log_softmax,
    order_weighted_softmax, side_vec, Forward, Model,
};
pub use params::{init_params, HyperParams, ModelParams, ParamId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("session has no known items")]
    EmptySession,
    #[error("item index {index} outside catalog of {count} items")]
    UnknownItem { index: usize, count: usize },
    #[error("parameter `{0}` is missing")]
    MissingParam(ParamId),
}

/// Side-information pair indices per catalog index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideIndex {
    per_item: Vec<Option<Vec<usize>>>,
    pair_count: usize,
}

impl SideIndex {
    pub fn new(catalog: &Catalog, table: &SideInfoTable) -> Self {
        let per_item = catalog
            .ids()
            .iter()
            .map(|&id| {
                table
                    .pairs_of(id)
                    .filter(|p| !p.is_empty())
                    .map(<[usize]>::to_vec)
            })
            .collect();
        Self {
            per_item,
            pair_count: table.pair_count(),
        }
    }

    /// An index in which no item has side information.
    pub fn none(item_count: usize) -> Self {
        Self {
            per_item: vec![None; item_count],
            pair_count: 0,
        }
    }

    /// Builds an index directly from per-item pair lists.
    pub fn from_lists(per_item: Vec<Option<Vec<usize>>>, pair_count: usize) -> Self {
        Self {
            per_item,
            pair_count,
        }
    }

    pub fn pairs(&self, index: usize) -> Option<&[usize]> {
        self.per_item.get(index).and_then(|p| p.as_deref())
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn covered_items(&self) -> usize {
        self.per_item.iter().filter(|p| p.is_some()).count()
    }
}
