//! Dataset loading and the split → fraction → expand → vocabulary chain.

use std::path::Path;

use anyhow::{bail, Context, Result};
use awgnn_core::data::{
    build_vocabulary, chronological_split, expand_examples, load_item_features, load_purchases,
    load_sessions, take_recent_fraction, validate_purchases, Catalog, ExampleMode, FractionSpec,
    Purchases, Session, SideInfoTable, FEATURES_FILE, PURCHASES_FILE, SESSIONS_FILE,
};
use awgnn_core::eval::{encode_all, EncodedExample};
use awgnn_core::model::SideIndex;
use serde::Serialize;

pub struct Dataset {
    pub sessions: Vec<Session>,
    pub purchases: Purchases,
    pub side: SideInfoTable,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let sessions = load_sessions(dir.join(SESSIONS_FILE)).context("loading sessions")?;
        let purchases = load_purchases(dir.join(PURCHASES_FILE)).context("loading purchases")?;
        let features = dir.join(FEATURES_FILE);
        let side = if features.exists() {
            load_item_features(features).context("loading item features")?
        } else {
            eprintln!(
                "warning: {} not found; running without side information",
                features.display()
            );
            SideInfoTable::empty()
        };
        let warn = validate_purchases(&sessions, &purchases);
        if warn.before_first_view > 0 || warn.unknown_session > 0 {
            eprintln!(
                "warning: {} purchases precede their session's first view, {} refer to unknown sessions",
                warn.before_first_view, warn.unknown_session
            );
        }
        Ok(Self {
            sessions,
            purchases,
            side,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepStats {
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub fraction_sessions: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub dropped_short: usize,
    pub missing_purchase: usize,
    pub catalog_items: usize,
    pub trained_items: usize,
    pub side_pairs: usize,
}

pub struct Prepared {
    pub catalog: Catalog,
    pub side: SideIndex,
    pub train: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
    pub stats: PrepStats,
}

pub fn prepare(ds: &Dataset, fraction_k: usize, mode: ExampleMode, p: usize) -> Result<Prepared> {
    let (train_sessions, test_sessions) = chronological_split(&ds.sessions)?;
    let fraction = take_recent_fraction(&train_sessions, FractionSpec::new(fraction_k)?);
    let train = expand_examples(fraction, &ds.purchases, mode, p)?;
    if train.examples.is_empty() {
        bail!(
            "no training examples after taking 1/{fraction_k} of {} sessions",
            train_sessions.len()
        );
    }
    let test = expand_examples(&test_sessions, &ds.purchases, mode, p)?;
    let catalog = build_vocabulary(&train.examples, &ds.side);
    let side = SideIndex::new(&catalog, &ds.side);
    let stats = PrepStats {
        train_sessions: train_sessions.len(),
        test_sessions: test_sessions.len(),
        fraction_sessions: fraction.len(),
        train_examples: train.examples.len(),
        test_examples: test.examples.len(),
        dropped_short: train.dropped_short + test.dropped_short,
        missing_purchase: train.missing_purchase + test.missing_purchase,
        catalog_items: catalog.len(),
        trained_items: catalog.trained_count(),
        side_pairs: ds.side.pair_count(),
    };
    Ok(Prepared {
        train: encode_all(&train.examples, &catalog),
        test: encode_all(&test.examples, &catalog),
        catalog,
        side,
        stats,
    })
}
