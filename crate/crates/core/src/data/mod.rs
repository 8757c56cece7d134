//! Session data: ingestion, the chronological evaluation protocol, and a
//! synthetic block-Markov generator that writes the same file formats.

mod io;
mod protocol;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{
    format_timestamp, load_item_features, load_purchases, load_sessions, parse_timestamp,
    write_item_features, write_purchases, write_sessions, FEATURES_HEADER, SESSIONS_HEADER,
};
pub use protocol::{
    build_vocabulary, chronological_split, dataset_stats, expand_examples, take_recent_fraction,
    truncate_session, validate_purchases, DatasetStats, Expansion, PurchaseWarnings, MS_PER_DAY,
};
pub use synth::{
    generate_synthetic, SynthConfig, SyntheticData, FEATURES_FILE, PURCHASES_FILE, SESSIONS_FILE,
};

pub type ItemId = u64;
pub type SessionId = u64;
/// Milliseconds since the Unix epoch, UTC.
pub type Timestamp = i64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("{0}: file contains no data rows")]
    Empty(PathBuf),
    #[error("{path}:{line}: duplicate purchase for session {session}")]
    DuplicatePurchase {
        path: PathBuf,
        line: u64,
        session: SessionId,
    },
    #[error("no sessions to split")]
    NoSessions,
    #[error("all sessions fall on the final day; the training split would be empty")]
    EmptyTrain,
    #[error("fraction divisor k must be at least 1")]
    InvalidFraction,
    #[error("truncation length p must be at least 1")]
    InvalidTruncation,
    #[error("invalid generator setting `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub item: ItemId,
    pub timestamp: Timestamp,
}

/// A time-ordered, nonempty list of item views.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: SessionId,
    pub events: Vec<Event>,
    pub end_time: Timestamp,
}

impl Session {
    /// Sorts `events` by timestamp (stable) and derives `end_time`.
    /// Returns `None` for an empty event list.
    pub fn new(session_id: SessionId, mut events: Vec<Event>) -> Option<Self> {
        events.sort_by_key(|e| e.timestamp);
        let end_time = events.last()?.timestamp;
        Some(Self {
            session_id,
            events,
            end_time,
        })
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.events.iter().map(|e| e.item).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Purchase {
    pub item: ItemId,
    pub timestamp: Timestamp,
}

pub type Purchases = HashMap<SessionId, Purchase>;

/// One prediction case: the (truncated) input sequence and the item to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input_items: Vec<ItemId>,
    pub target_item: ItemId,
    pub session_id: SessionId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExampleMode {
    /// One example per session; the purchased item is the target.
    #[default]
    #[serde(rename = "purchase")]
    PurchaseLabel,
    /// One example per prefix; the next view is the target.
    #[serde(rename = "next-item")]
    NextItem,
}

impl FromStr for ExampleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "purchase" | "purchase-label" => Ok(Self::PurchaseLabel),
            "next-item" | "next" => Ok(Self::NextItem),
            other => Err(format!(
                "unknown example mode `{other}` (expected `purchase` or `next-item`)"
            )),
        }
    }
}

impl fmt::Display for ExampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PurchaseLabel => "purchase",
            Self::NextItem => "next-item",
        })
    }
}

/// `1/k` of the most recent training sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FractionSpec {
    k: usize,
}

impl FractionSpec {
    pub fn new(k: usize) -> Result<Self, DataError> {
        if k == 0 {
            return Err(DataError::InvalidFraction);
        }
        Ok(Self { k })
    }

    pub fn k(self) -> usize {
        self.k
    }

    /// Sessions kept out of `n`: `ceil(n / k)`.
    pub fn keep(self, n: usize) -> usize {
        n.div_ceil(self.k)
    }
}

/// Item → set of (feature category, feature value) pairs, with the distinct
/// pairs enumerated densely in sorted order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SideInfoTable {
    items: BTreeMap<ItemId, Vec<usize>>,
    pairs: Vec<(u64, u64)>,
}

impl SideInfoTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds the table from `(item, category, value)` triples; duplicates collapse.
    pub fn from_triples(triples: impl IntoIterator<Item = (ItemId, u64, u64)>) -> Self {
        let mut by_item: BTreeMap<ItemId, BTreeSet<(u64, u64)>> = BTreeMap::new();
        for (item, cat, val) in triples {
            by_item.entry(item).or_default().insert((cat, val));
        }
        let universe: BTreeSet<(u64, u64)> = by_item.values().flatten().copied().collect();
        let pairs: Vec<(u64, u64)> = universe.into_iter().collect();
        let index: HashMap<(u64, u64), usize> =
            pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let items = by_item
            .into_iter()
            .map(|(item, set)| (item, set.iter().map(|p| index[p]).collect()))
            .collect();
        Self { items, pairs }
    }

    /// Dense pair indices of `item`, if it has side information.
    pub fn pairs_of(&self, item: ItemId) -> Option<&[usize]> {
        self.items.get(&item).map(Vec::as_slice)
    }

    pub fn pair(&self, index: usize) -> (u64, u64) {
        self.pairs[index]
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.keys().copied()
    }

    pub fn category_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.0)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn mean_pairs_per_item(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.items.values().map(Vec::len).sum::<usize>() as f64 / self.items.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Dense indexing of every known item, ordered by ascending item id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    trained: Vec<bool>,
}

impl Catalog {
    /// `trained` lists the items seen in training examples; `others` are
    /// additional known items (e.g. from the feature file).
    pub fn new(
        trained: impl IntoIterator<Item = ItemId>,
        others: impl IntoIterator<Item = ItemId>,
    ) -> Self {
        let trained: BTreeSet<ItemId> = trained.into_iter().collect();
        let all: BTreeSet<ItemId> = trained.iter().copied().chain(others).collect();
        let ids: Vec<ItemId> = all.into_iter().collect();
        let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let trained = ids.iter().map(|id| trained.contains(id)).collect();
        Self {
            ids,
            index,
            trained,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, item: ItemId) -> Option<usize> {
        self.index.get(&item).copied()
    }

    pub fn id_of(&self, index: usize) -> ItemId {
        self.ids[index]
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn is_trained(&self, index: usize) -> bool {
        self.trained[index]
    }

    pub fn trained_count(&self) -> usize {
        self.trained.iter().filter(|&&t| t).count()
    }

    /// SHA-256 over the ordered id list, truncated to 64 bits.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            hasher.update(id.to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}
