//! Synthetic clickstreams from a block-structured Markov chain.
//!
//! Items are split into contiguous blocks. From any item the chain moves to
//! another member of the same block with probability `concentration`
//! (member weights drawn once per row) and otherwise to a uniformly chosen
//! item outside the block. Optionally the last block is "cold": it is only
//! reachable during the final `cold_block_days` days of the stream.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{write_item_features, write_purchases, write_sessions};
use super::protocol::MS_PER_DAY;
use super::{DataError, Event, ItemId, Purchase, Purchases, Session, SessionId, SideInfoTable};

/// 2021-01-01T00:00:00Z
const EPOCH_MS: i64 = 1_609_459_200_000;
const MIN_GAP_MS: i64 = 5_000;
const MAX_GAP_MS: i64 = 120_000;

pub const SESSIONS_FILE: &str = "train_sessions.csv";
pub const PURCHASES_FILE: &str = "train_purchases.csv";
pub const FEATURES_FILE: &str = "item_features.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub item_count: usize,
    pub block_count: usize,
    pub session_count: usize,
    pub day_count: usize,
    /// Mean of the geometric session-length distribution (views only).
    pub mean_length: f64,
    pub max_length: usize,
    /// Probability mass of in-block transitions.
    pub concentration: f64,
    pub noise_categories: usize,
    pub noise_values: usize,
    pub cold_block: bool,
    pub cold_block_days: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            item_count: 200,
            block_count: 10,
            session_count: 3000,
            day_count: 30,
            mean_length: 5.0,
            max_length: 100,
            concentration: 0.9,
            noise_categories: 4,
            noise_values: 6,
            cold_block: false,
            cold_block_days: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |key: &'static str, reason: &str| {
            Err(DataError::InvalidConfig {
                key,
                reason: reason.to_string(),
            })
        };
        if self.item_count == 0 {
            return bad("item_count", "must be at least 1");
        }
        if self.block_count == 0 {
            return bad("block_count", "must be at least 1");
        }
        if self.block_count > self.item_count {
            return bad("block_count", "cannot exceed item_count");
        }
        if self.session_count == 0 {
            return bad("session_count", "must be at least 1");
        }
        if self.day_count == 0 {
            return bad("day_count", "must be at least 1");
        }
        if !(self.mean_length >= 1.0 && self.mean_length.is_finite()) {
            return bad("mean_length", "must be a finite value >= 1");
        }
        if self.max_length == 0 {
            return bad("max_length", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.concentration) {
            return bad("concentration", "must lie in [0, 1]");
        }
        if self.noise_categories > 0 && self.noise_values == 0 {
            return bad(
                "noise_values",
                "must be at least 1 when noise categories are requested",
            );
        }
        if self.cold_block && self.block_count < 2 {
            return bad("cold_block", "needs at least two blocks");
        }
        if self.cold_block && self.cold_block_days == 0 {
            return bad("cold_block_days", "must be at least 1");
        }
        Ok(())
    }

    /// Block of the 0-based item index.
    pub fn block_of(&self, index: usize) -> usize {
        index * self.block_count / self.item_count
    }

    fn block_members(&self, block: usize) -> std::ops::Range<usize> {
        let start = (block * self.item_count).div_ceil(self.block_count);
        let end = ((block + 1) * self.item_count).div_ceil(self.block_count);
        start..end
    }
}

/// Generated dataset, with sessions sorted as the loader would return them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub config: SynthConfig,
    pub sessions: Vec<Session>,
    pub purchases: Vec<(SessionId, Purchase)>,
    pub features: Vec<(ItemId, u64, u64)>,
    chain: Chain,
}

impl SyntheticData {
    pub fn purchase_map(&self) -> Purchases {
        self.purchases.iter().copied().collect()
    }

    pub fn side_table(&self) -> SideInfoTable {
        SideInfoTable::from_triples(self.features.iter().copied())
    }

    /// Item id of a 0-based item index.
    pub fn item_id(index: usize) -> ItemId {
        index as ItemId + 1
    }

    pub fn block_of_item(&self, item: ItemId) -> usize {
        self.config.block_of(item as usize - 1)
    }

    /// Probability of moving `from → to` under the unrestricted chain.
    pub fn transition_prob(&self, from: ItemId, to: ItemId) -> f64 {
        self.chain
            .prob(&self.config, from as usize - 1, to as usize - 1, false)
    }

    /// Writes the three CSV files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_sessions(dir.join(SESSIONS_FILE), &self.sessions)?;
        write_purchases(dir.join(PURCHASES_FILE), &self.purchases)?;
        write_item_features(dir.join(FEATURES_FILE), &self.features)
    }
}

#[derive(Debug, Clone)]
struct Chain {
    /// Per item: weights over the other members of its block.
    in_block: Vec<Vec<f64>>,
    cold_block: Option<usize>,
}

impl Chain {
    fn build(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let in_block = (0..cfg.item_count)
            .map(|i| {
                let members = cfg.block_members(cfg.block_of(i));
                let raw: Vec<f64> = members
                    .clone()
                    .map(|j| {
                        if j == i && members.len() > 1 {
                            0.0
                        } else {
                            rng.random_range(0.5..1.5)
                        }
                    })
                    .collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|w| w / total).collect()
            })
            .collect();
        Self {
            in_block,
            cold_block: cfg.cold_block.then_some(cfg.block_count - 1),
        }
    }

    fn allowed(&self, cfg: &SynthConfig, item: usize, restricted: bool) -> bool {
        !(restricted && self.cold_block == Some(cfg.block_of(item)))
    }

    fn outside_count(&self, cfg: &SynthConfig, from: usize, restricted: bool) -> usize {
        (0..cfg.item_count)
            .filter(|&j| cfg.block_of(j) != cfg.block_of(from) && self.allowed(cfg, j, restricted))
            .count()
    }

    fn prob(&self, cfg: &SynthConfig, from: usize, to: usize, restricted: bool) -> f64 {
        if !self.allowed(cfg, to, restricted) {
            return 0.0;
        }
        let block = cfg.block_of(from);
        let outside = self.outside_count(cfg, from, restricted);
        let stay = if outside == 0 { 1.0 } else { cfg.concentration };
        if cfg.block_of(to) == block {
            let members = cfg.block_members(block);
            stay * self.in_block[from][to - members.start]
        } else {
            (1.0 - stay) / outside as f64
        }
    }

    fn step(
        &self,
        cfg: &SynthConfig,
        from: usize,
        restricted: bool,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let block = cfg.block_of(from);
        let has_outside = self.outside_count(cfg, from, restricted) > 0;
        if !has_outside || rng.random::<f64>() < cfg.concentration {
            let members = cfg.block_members(block);
            let dist =
                WeightedIndex::new(&self.in_block[from]).expect("in-block weights are positive");
            return members.start + dist.sample(rng);
        }
        loop {
            let j = rng.random_range(0..cfg.item_count);
            if cfg.block_of(j) != block && self.allowed(cfg, j, restricted) {
                return j;
            }
        }
    }

    fn start(&self, cfg: &SynthConfig, restricted: bool, rng: &mut ChaCha8Rng) -> usize {
        loop {
            let j = rng.random_range(0..cfg.item_count);
            if self.allowed(cfg, j, restricted) {
                return j;
            }
        }
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Deterministic per `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<SyntheticData, DataError> {
    cfg.validate()?;
    let chain = Chain::build(cfg, &mut stream(seed, 0));

    let mut feat_rng = stream(seed, 1);
    let mut features = Vec::new();
    for i in 0..cfg.item_count {
        let id = SyntheticData::item_id(i);
        features.push((id, 1, cfg.block_of(i) as u64 + 1));
        for c in 0..cfg.noise_categories {
            if feat_rng.random_bool(0.7) {
                features.push((
                    id,
                    c as u64 + 2,
                    feat_rng.random_range(1..=cfg.noise_values) as u64,
                ));
            }
        }
    }

    let mut rng = stream(seed, 2);
    let stop = 1.0 / cfg.mean_length;
    let cold_from_day = cfg.day_count.saturating_sub(cfg.cold_block_days);
    let mut sessions = Vec::with_capacity(cfg.session_count);
    let mut purchases = Vec::with_capacity(cfg.session_count);
    for s in 0..cfg.session_count {
        let day = s * cfg.day_count / cfg.session_count;
        let restricted = chain.cold_block.is_some() && day < cold_from_day;

        let mut len = 1;
        while len < cfg.max_length && rng.random::<f64>() >= stop {
            len += 1;
        }
        let mut items = Vec::with_capacity(len + 1);
        items.push(chain.start(cfg, restricted, &mut rng));
        for _ in 0..len {
            let next = chain.step(cfg, *items.last().expect("nonempty"), restricted, &mut rng);
            items.push(next);
        }
        let gaps: Vec<i64> = (0..len)
            .map(|_| rng.random_range(MIN_GAP_MS..=MAX_GAP_MS))
            .collect();
        let span: i64 = gaps.iter().sum();
        let day_start = EPOCH_MS + day as i64 * MS_PER_DAY;
        let mut t = day_start + rng.random_range(0..MS_PER_DAY - span);

        let session_id = s as SessionId + 1;
        let mut events = Vec::with_capacity(len);
        for (k, &item) in items[..len].iter().enumerate() {
            events.push(Event {
                item: SyntheticData::item_id(item),
                timestamp: t,
            });
            t += gaps[k];
        }
        purchases.push((
            session_id,
            Purchase {
                item: SyntheticData::item_id(items[len]),
                timestamp: t,
            },
        ));
        sessions.push(Session::new(session_id, events).expect("length >= 1"));
    }
    sessions.sort_by_key(|s| (s.end_time, s.session_id));

    Ok(SyntheticData {
        config: cfg.clone(),
        sessions,
        purchases,
        features,
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_items_or_blocks() {
        let cfg = SynthConfig {
            block_count: 0,
            ..SynthConfig::default()
        };
        let err = generate_synthetic(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("block_count"), "{err}");
        let cfg = SynthConfig {
            item_count: 0,
            ..SynthConfig::default()
        };
        assert!(generate_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn blocks_partition_items_evenly() {
        let cfg = SynthConfig::default();
        for b in 0..cfg.block_count {
            let members = cfg.block_members(b);
            assert_eq!(members.len(), 20);
            assert!(members.clone().all(|i| cfg.block_of(i) == b));
        }
    }

    #[test]
    fn transition_rows_are_distributions() {
        let cfg = SynthConfig {
            item_count: 30,
            block_count: 4,
            cold_block: true,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg, 3).unwrap();
        for from in 0..cfg.item_count {
            for restricted in [false, true] {
                if !data.chain.allowed(&cfg, from, restricted) {
                    continue;
                }
                let total: f64 = (0..cfg.item_count)
                    .map(|to| data.chain.prob(&cfg, from, to, restricted))
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sessions_stay_within_their_day() {
        let data = generate_synthetic(&SynthConfig::default(), 11).unwrap();
        for s in &data.sessions {
            let d0 = s.events[0].timestamp.div_euclid(MS_PER_DAY);
            assert_eq!(s.end_time.div_euclid(MS_PER_DAY), d0);
            assert!(s.events.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }
}
