//! The evaluation protocol: chronological split, recency fractions,
//! suffix truncation, and expansion of sessions into prediction examples.

use std::collections::BTreeSet;

use serde::Serialize;

use super::{
    Catalog, DataError, Example, ExampleMode, FractionSpec, ItemId, Purchases, Session,
    SideInfoTable,
};

pub const MS_PER_DAY: i64 = 86_400_000;

/// Splits sessions into (train, test) where test holds every session ending
/// on the last UTC calendar day present. Input order is preserved.
pub fn chronological_split(
    sessions: &[Session],
) -> Result<(Vec<Session>, Vec<Session>), DataError> {
    let last = sessions
        .iter()
        .map(|s| s.end_time)
        .max()
        .ok_or(DataError::NoSessions)?;
    let test_day_start = last.div_euclid(MS_PER_DAY) * MS_PER_DAY;
    let (test, train): (Vec<Session>, Vec<Session>) = sessions
        .iter()
        .cloned()
        .partition(|s| s.end_time >= test_day_start);
    if train.is_empty() {
        return Err(DataError::EmptyTrain);
    }
    Ok((train, test))
}

/// The last `ceil(n / k)` sessions of a list sorted by end time.
pub fn take_recent_fraction(train: &[Session], spec: FractionSpec) -> &[Session] {
    let keep = spec.keep(train.len());
    &train[train.len() - keep..]
}

/// Keeps the final `p` items when the sequence is longer than `p`.
pub fn truncate_session<T>(items: &[T], p: usize) -> Result<&[T], DataError> {
    if p == 0 {
        return Err(DataError::InvalidTruncation);
    }
    Ok(&items[items.len().saturating_sub(p)..])
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expansion {
    pub examples: Vec<Example>,
    /// Sessions that produced no example because their input would be empty.
    pub dropped_short: usize,
    /// Sessions skipped in purchase mode for lack of a purchase record.
    pub missing_purchase: usize,
}

/// Turns sessions into examples. Example order follows session order, so
/// examples from end-time-sorted sessions stay chronologically ordered.
pub fn expand_examples(
    sessions: &[Session],
    purchases: &Purchases,
    mode: ExampleMode,
    p: usize,
) -> Result<Expansion, DataError> {
    if p == 0 {
        return Err(DataError::InvalidTruncation);
    }
    let mut out = Expansion::default();
    for session in sessions {
        let views = session.items();
        match mode {
            ExampleMode::PurchaseLabel => {
                let Some(purchase) = purchases.get(&session.session_id) else {
                    out.missing_purchase += 1;
                    continue;
                };
                let input = truncate_session(&views, p)?;
                if input.is_empty() {
                    out.dropped_short += 1;
                    continue;
                }
                out.examples.push(Example {
                    input_items: input.to_vec(),
                    target_item: purchase.item,
                    session_id: session.session_id,
                });
            }
            ExampleMode::NextItem => {
                if views.len() < 2 {
                    out.dropped_short += 1;
                    continue;
                }
                for j in 1..views.len() {
                    out.examples.push(Example {
                        input_items: truncate_session(&views[..j], p)?.to_vec(),
                        target_item: views[j],
                        session_id: session.session_id,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Catalog over every item in the training examples plus every item with
/// side information; only the former are marked as trained.
pub fn build_vocabulary(train_examples: &[Example], side: &SideInfoTable) -> Catalog {
    let trained = train_examples.iter().flat_map(|e| {
        e.input_items
            .iter()
            .copied()
            .chain(std::iter::once(e.target_item))
    });
    Catalog::new(trained, side.items())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PurchaseWarnings {
    /// Purchases timestamped before the first view of their session.
    pub before_first_view: usize,
    /// Purchases whose session id has no views.
    pub unknown_session: usize,
}

/// Ordering checks on purchases; none of these are fatal.
pub fn validate_purchases(sessions: &[Session], purchases: &Purchases) -> PurchaseWarnings {
    let starts: std::collections::HashMap<_, _> = sessions
        .iter()
        .map(|s| {
            (
                s.session_id,
                s.events.first().map_or(i64::MIN, |e| e.timestamp),
            )
        })
        .collect();
    let mut w = PurchaseWarnings::default();
    for (sid, p) in purchases {
        match starts.get(sid) {
            None => w.unknown_session += 1,
            Some(&start) if p.timestamp < start => w.before_first_view += 1,
            Some(_) => {}
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub sessions: usize,
    pub unique_items: usize,
    pub avg_length_views: f64,
    /// Average length counting the purchase as one more interaction when present.
    pub avg_length_with_purchase: f64,
}

pub fn dataset_stats(sessions: &[Session], purchases: &Purchases) -> DatasetStats {
    let n = sessions.len();
    let items: BTreeSet<ItemId> = sessions
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.item))
        .collect();
    let views: usize = sessions.iter().map(Session::len).sum();
    let with_purchase: usize = views
        + sessions
            .iter()
            .filter(|s| purchases.contains_key(&s.session_id))
            .count();
    let avg = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    DatasetStats {
        sessions: n,
        unique_items: items.len(),
        avg_length_views: avg(views),
        avg_length_with_purchase: avg(with_purchase),
    }
}
