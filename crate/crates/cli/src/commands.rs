//! The five subcommands, usable without the argument parser.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use awgnn_core::data::{
    generate_synthetic, load_item_features, FEATURES_FILE, PURCHASES_FILE, SESSIONS_FILE,
};
use awgnn_core::eval::{evaluate, EvalReport};
use awgnn_core::graph::SessionGraph;
use awgnn_core::model::{load_checkpoint, save_checkpoint, Model, SideIndex};
use awgnn_core::train::{train, TrainLog, TrainOutcome};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Variant};
use crate::pipeline::{prepare, Dataset, PrepStats, Prepared};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EVAL_CSV_FILE: &str = "eval_report.csv";
pub const EVAL_TABLE_FILE: &str = "eval_report.txt";
pub const SWEEP_FILE: &str = "sweep.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    seed: u64,
    generator: &'a awgnn_core::data::SynthConfig,
    files: Vec<(&'static str, String)>,
}

/// Writes the synthetic dataset and its manifest into `data_dir`; returns
/// the manifest's SHA-256.
pub fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let synth = cfg.synth_config();
    let data = generate_synthetic(&synth, cfg.seed)?;
    data.write(&cfg.data_dir)?;
    let mut files = Vec::new();
    for name in [SESSIONS_FILE, PURCHASES_FILE, FEATURES_FILE] {
        let path = cfg.data_dir.join(name);
        let bytes =
            std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        files.push((name, sha256_hex(&bytes)));
    }
    let manifest = Manifest {
        seed: cfg.seed,
        generator: &synth,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    write(&cfg.data_dir.join(MANIFEST_FILE), &json)?;
    cfg.echo_to(&cfg.data_dir)?;
    Ok(sha256_hex(json.as_bytes()))
}

/// Trains on an already prepared split.
pub fn train_prepared(cfg: &RunConfig, prepared: &Prepared, verbose: bool) -> Result<TrainOutcome> {
    let model = Model::new(
        cfg.hyper(),
        prepared.catalog.len(),
        prepared.side.pair_count(),
        cfg.seed,
    )?;
    let outcome = train(
        model,
        &prepared.train,
        &prepared.catalog,
        &prepared.side,
        &cfg.train_config(),
        |e| {
            if verbose {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val recall@{k} {:.4}  mrr@{k} {:.4}  lr {:.1e}  {:.1}s",
                    e.epoch,
                    e.loss,
                    e.recall,
                    e.mrr,
                    e.lr,
                    e.seconds,
                    k = cfg.eval_k
                );
            }
        },
    )?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub variant: String,
    pub data: PrepStats,
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub validation_examples: usize,
    pub catalog_fingerprint: String,
}

fn write_train_artifacts(
    cfg: &RunConfig,
    prepared: &Prepared,
    outcome: &TrainOutcome,
) -> Result<TrainSummary> {
    let dir = &cfg.out_dir;
    cfg.echo_to(dir)?;
    save_checkpoint(&dir.join(MODEL_FILE), &outcome.model, &prepared.catalog)?;
    outcome.log.write_csv(&dir.join(TRAIN_LOG_FILE))?;
    let summary = summarise(cfg, prepared, &outcome.model, &outcome.log);
    write(
        &dir.join(TRAIN_SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(summary)
}

fn summarise(cfg: &RunConfig, prepared: &Prepared, model: &Model, log: &TrainLog) -> TrainSummary {
    TrainSummary {
        variant: cfg.hyper().variant_name(),
        data: prepared.stats.clone(),
        parameters: model.params.scalar_count(),
        epochs_run: log.epochs.len(),
        best_epoch: log.best_epoch,
        stopped_early: log.stopped_early,
        validation_examples: log.validation_size,
        catalog_fingerprint: format!("{:016x}", prepared.catalog.fingerprint()),
    }
}

/// split → fraction → expand → vocabulary → train; writes checkpoint, log,
/// summary and resolved config into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, verbose: bool) -> Result<TrainSummary> {
    let ds = Dataset::load(&cfg.data_dir)?;
    let prepared = prepare(&ds, cfg.fraction_k, cfg.mode, cfg.p)?;
    let outcome = train_prepared(cfg, &prepared, verbose)?;
    write_train_artifacts(cfg, &prepared, &outcome)
}

fn write_eval_artifacts(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    report.write_csv(&dir.join(EVAL_CSV_FILE))?;
    write(&dir.join(EVAL_TABLE_FILE), report.to_table())
}

/// Evaluates `checkpoint` on the final-day test split prepared from `cfg`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    let ds = Dataset::load(&cfg.data_dir)?;
    let prepared = prepare(&ds, cfg.fraction_k, cfg.mode, cfg.p)?;
    let ckpt = load_checkpoint(checkpoint, Some(prepared.catalog.fingerprint()))
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let report = evaluate(
        &ckpt.model,
        &prepared.test,
        &prepared.catalog,
        &prepared.side,
        cfg.eval_k,
    )?;
    cfg.echo_to(&cfg.out_dir)?;
    write_eval_artifacts(&cfg.out_dir, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub t: f64,
    pub p: usize,
    pub variant: String,
    pub seed: u64,
    pub result: Result<(f64, f64), String>,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let (recall, mrr, status) = match &self.result {
            Ok((r, m)) => (format!("{r:.6}"), format!("{m:.6}"), "ok".to_string()),
            Err(e) => (
                String::new(),
                String::new(),
                format!("\"error: {}\"", e.replace('"', "'")),
            ),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.k, self.t, self.p, self.variant, recall, mrr, self.seed, status
        )
    }
}

pub const SWEEP_HEADER: &str = "k,t,p,variant,recall20,mrr20,seed,status";

#[derive(Debug, Clone)]
struct Cell {
    k: usize,
    t: f64,
    p: usize,
    variant: String,
    seed: u64,
}

fn sweep_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    if cfg.sweep_k.is_empty()
        || cfg.sweep_t.is_empty()
        || cfg.sweep_p.is_empty()
        || cfg.sweep_variants.is_empty()
    {
        bail!("sweep lists sweep_k, sweep_t, sweep_p and sweep_variants must be nonempty");
    }
    let mut seen = HashSet::new();
    let mut cells = Vec::new();
    for &k in &cfg.sweep_k {
        for &t in &cfg.sweep_t {
            for &p in &cfg.sweep_p {
                for v in &cfg.sweep_variants {
                    let variant = Variant::parse(v)?.name();
                    for r in 0..cfg.sweep_replicates {
                        let seed = cfg.seed + r as u64;
                        if seen.insert((k, t.to_bits(), p, variant.clone(), seed)) {
                            cells.push(Cell {
                                k,
                                t,
                                p,
                                variant: variant.clone(),
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn cell_config(cfg: &RunConfig, cell: &Cell) -> RunConfig {
    let mut c = cfg.clone();
    c.fraction_k = cell.k;
    c.t_order = cell.t;
    c.p = cell.p;
    c.variant = cell.variant.clone();
    c.seed = cell.seed;
    c.out_dir = cfg.out_dir.join("cells").join(format!(
        "k{}_t{}_p{}_{}_s{}",
        cell.k, cell.t, cell.p, cell.variant, cell.seed
    ));
    c
}

fn run_cell(cfg: &RunConfig, prepared: &Prepared) -> Result<EvalReport> {
    cfg.validate()?;
    let outcome = train_prepared(cfg, prepared, false)?;
    write_train_artifacts(cfg, prepared, &outcome)?;
    let report = evaluate(
        &outcome.model,
        &prepared.test,
        &prepared.catalog,
        &prepared.side,
        cfg.eval_k,
    )?;
    write_eval_artifacts(&cfg.out_dir, &report)?;
    Ok(report)
}

/// Trains and evaluates every (k, t, p, variant, replicate) cell, writing one
/// CSV row per cell. A failing cell is recorded and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig, verbose: bool) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(cfg)?;
    let ds = Dataset::load(&cfg.data_dir)?;
    cfg.echo_to(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join(SWEEP_FILE);
    let mut csv = std::fs::File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;
    writeln!(csv, "{SWEEP_HEADER}")?;

    let mut prepared: HashMap<(usize, usize), Result<Prepared, String>> = HashMap::new();
    let prep = |prepared: &mut HashMap<_, _>, k: usize, p: usize| {
        prepared
            .entry((k, p))
            .or_insert_with(|| prepare(&ds, k, cfg.mode, p).map_err(|e| format!("{e:#}")));
    };
    let one = |cell: &Cell, prepared: &HashMap<(usize, usize), Result<Prepared, String>>| {
        let result = match &prepared[&(cell.k, cell.p)] {
            Ok(prep) => run_cell(&cell_config(cfg, cell), prep)
                .map(|r| (r.recall, r.mrr))
                .map_err(|e| format!("{e:#}")),
            Err(e) => Err(e.clone()),
        };
        SweepRow {
            k: cell.k,
            t: cell.t,
            p: cell.p,
            variant: cell.variant.clone(),
            seed: cell.seed,
            result,
        }
    };

    let mut rows = Vec::with_capacity(cells.len());
    if cfg.sweep_parallel {
        for cell in &cells {
            prep(&mut prepared, cell.k, cell.p);
        }
        rows = cells.par_iter().map(|cell| one(cell, &prepared)).collect();
        for row in &rows {
            writeln!(csv, "{}", row.csv_line())?;
        }
    } else {
        for (i, cell) in cells.iter().enumerate() {
            prep(&mut prepared, cell.k, cell.p);
            let row = one(cell, &prepared);
            if verbose {
                eprintln!("[{}/{}] {}", i + 1, cells.len(), row.csv_line());
            }
            writeln!(csv, "{}", row.csv_line())?;
            csv.flush()?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Top-`top` items for the session in `input` (whitespace or comma
/// separated item ids), one `rank<TAB>item<TAB>score` line each.
pub fn cmd_recommend(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    input: &str,
    top: usize,
    dump_graph: bool,
) -> Result<String> {
    let ckpt = load_checkpoint(checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (model, catalog) = (ckpt.model, ckpt.catalog);
    let mut items = Vec::new();
    for tok in input
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
    {
        let id: u64 = tok
            .parse()
            .with_context(|| format!("`{tok}` is not an item id"))?;
        match catalog.index_of(id) {
            Some(i) => items.push(i),
            None => eprintln!("warning: item {id} is not in the model's catalog; ignored"),
        }
    }
    if items.is_empty() {
        bail!("none of the input items are in the model's catalog");
    }

    let side = match (model.hyper.uses_side_info(), data_dir) {
        (true, Some(dir)) => {
            let table = load_item_features(dir.join(FEATURES_FILE))?;
            let expected = model
                .params
                .get(awgnn_core::model::ParamId::SidePairEmbed)
                .map_or(0, |m| m.rows());
            if table.pair_count() != expected {
                bail!(
                    "feature file has {} feature pairs but the model was trained with {expected}",
                    table.pair_count()
                );
            }
            SideIndex::new(&catalog, &table)
        }
        (true, None) => {
            eprintln!("warning: model uses side information but no data directory was given");
            SideIndex::none(catalog.len())
        }
        (false, _) => SideIndex::none(catalog.len()),
    };

    let mut out = String::new();
    if dump_graph {
        let graph = SessionGraph::build(model.truncate(&items));
        out.push_str("# src dst out_weight in_weight\n");
        out.push_str(&graph.to_edge_list(|i| catalog.id_of(i).to_string()));
    }
    let scores = model.scores(&side, &items)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for (rank, &i) in order.iter().take(top).enumerate() {
        let _ = writeln!(out, "{}\t{}\t{:.6}", rank + 1, catalog.id_of(i), scores[i]);
    }
    Ok(out)
}

/// Default checkpoint location for a config.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join(MODEL_FILE)
}
