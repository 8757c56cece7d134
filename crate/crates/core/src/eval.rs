//! Top-K ranking metrics with a cold-start breakdown.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Catalog, Example};
use crate::model::{Model, ModelError, SideIndex};

pub const DEFAULT_K: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    Empty,
    #[error("cutoff K must be at least 1")]
    ZeroCutoff,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: io::Error,
    },
}

/// 1-based rank of `target` under descending score with ties broken by
/// ascending index.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// `(recall@k, mrr@k)` over ranks; `None` is a miss.
pub fn metrics_from_ranks(ranks: &[Option<usize>], k: usize) -> (f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0);
    }
    let mut hits = 0usize;
    let mut rr = 0.0;
    for r in ranks.iter().flatten() {
        if *r <= k {
            hits += 1;
            rr += 1.0 / *r as f64;
        }
    }
    let n = ranks.len() as f64;
    (hits as f64 / n, rr / n)
}

/// An example mapped onto catalog indices. Unknown input items are dropped;
/// an unknown target becomes `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub items: Vec<usize>,
    pub target: Option<usize>,
}

impl EncodedExample {
    pub fn encode(example: &Example, catalog: &Catalog) -> Self {
        Self {
            items: example
                .input_items
                .iter()
                .filter_map(|&i| catalog.index_of(i))
                .collect(),
            target: catalog.index_of(example.target_item),
        }
    }
}

pub fn encode_all(examples: &[Example], catalog: &Catalog) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| EncodedExample::encode(e, catalog))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    All,
    /// Target never seen in training, including targets outside the catalog.
    ColdStart,
    Seen,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::All => "all",
            Segment::ColdStart => "cold_start",
            Segment::Seen => "seen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRow {
    pub segment: Segment,
    pub n: usize,
    pub recall: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub n_examples: usize,
    pub recall: f64,
    pub mrr: f64,
    /// `all`, `cold_start`, `seen`, in that order.
    pub segments: Vec<SegmentRow>,
    /// Targets outside the catalog; scored as misses.
    pub n_unscoreable: usize,
    /// Examples whose input had no catalog item; scored as misses.
    pub n_empty_input: usize,
}

impl EvalReport {
    pub fn segment(&self, segment: Segment) -> &SegmentRow {
        self.segments
            .iter()
            .find(|r| r.segment == segment)
            .expect("all segments present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("segment,n,recall{k},mrr{k}\n", k = self.k);
        for r in &self.segments {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6}",
                r.segment.name(),
                r.n,
                r.recall,
                r.mrr
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>11} {:>9}\n",
            "segment",
            "n",
            format!("Recall@{}", self.k),
            format!("MRR@{}", self.k)
        );
        for r in &self.segments {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>10.2}% {:>8.2}%",
                r.segment.name(),
                r.n,
                100.0 * r.recall,
                100.0 * r.mrr
            );
        }
        let _ = writeln!(out, "unscoreable targets: {}", self.n_unscoreable);
        let _ = writeln!(out, "inputs with no known item: {}", self.n_empty_input);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_csv()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Rank of each example's target, or `None` for a miss that cannot be scored.
pub fn rank_examples(
    model: &Model,
    side: &SideIndex,
    examples: &[EncodedExample],
) -> Result<Vec<Option<usize>>, EvalError> {
    examples
        .par_iter()
        .map(|ex| {
            let (Some(target), false) = (ex.target, ex.items.is_empty()) else {
                return Ok(None);
            };
            let scores = model.scores(side, &ex.items)?;
            Ok(Some(rank_of_target(&scores, target)))
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    examples: &[EncodedExample],
    catalog: &Catalog,
    side: &SideIndex,
    k: usize,
) -> Result<EvalReport, EvalError> {
    let ranks = rank_examples(model, side, examples)?;
    report_from_ranks(examples, &ranks, catalog, k)
}

/// Aggregates precomputed ranks into a report.
pub fn report_from_ranks(
    examples: &[EncodedExample],
    ranks: &[Option<usize>],
    catalog: &Catalog,
    k: usize,
) -> Result<EvalReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let mut cold = Vec::new();
    let mut seen = Vec::new();
    for (ex, &rank) in examples.iter().zip(ranks) {
        match ex.target {
            Some(t) if catalog.is_trained(t) => seen.push(rank),
            _ => cold.push(rank),
        }
    }
    let row = |segment, r: &[Option<usize>]| {
        let (recall, mrr) = metrics_from_ranks(r, k);
        SegmentRow {
            segment,
            n: r.len(),
            recall,
            mrr,
        }
    };
    let all = row(Segment::All, ranks);
    Ok(EvalReport {
        k,
        n_examples: examples.len(),
        recall: all.recall,
        mrr: all.mrr,
        segments: vec![
            all,
            row(Segment::ColdStart, &cold),
            row(Segment::Seen, &seen),
        ],
        n_unscoreable: examples.iter().filter(|e| e.target.is_none()).count(),
        n_empty_input: examples
            .iter()
            .filter(|e| e.target.is_some() && e.items.is_empty())
            .count(),
    })
}
