//! Flat run configuration: TOML file, then flag overrides, then validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use awgnn_core::data::{ExampleMode, FractionSpec, SynthConfig};
use awgnn_core::model::HyperParams;
use awgnn_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Every setting of every command. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding the three dataset CSV files.
    pub data_dir: PathBuf,
    /// Where a command writes its artifacts.
    pub out_dir: PathBuf,
    pub seed: u64,

    /// Train on the newest `1/fraction_k` of training sessions.
    pub fraction_k: usize,
    pub mode: ExampleMode,
    /// Keep only the last `p` views of each session.
    pub p: usize,

    pub dim: usize,
    pub steps: usize,
    pub t_order: f64,
    /// `base`, or a comma list drawn from `aw`, `si`, `msi`.
    pub variant: String,
    pub include_last: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub l2: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub eval_k: usize,

    pub item_count: usize,
    pub block_count: usize,
    pub session_count: usize,
    pub day_count: usize,
    pub mean_length: f64,
    pub max_length: usize,
    pub concentration: f64,
    pub noise_categories: usize,
    pub noise_values: usize,
    pub cold_block: bool,
    pub cold_block_days: usize,

    pub sweep_k: Vec<usize>,
    pub sweep_t: Vec<f64>,
    pub sweep_p: Vec<usize>,
    pub sweep_variants: Vec<String>,
    /// Replicate `r` of a cell trains with `seed + r`.
    pub sweep_replicates: usize,
    pub sweep_parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hyper = HyperParams::default();
        let train = TrainConfig::default();
        let synth = SynthConfig::default();
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/latest"),
            seed: train.seed,
            fraction_k: 1,
            mode: ExampleMode::default(),
            p: hyper.max_len,
            dim: hyper.dim,
            steps: hyper.steps,
            t_order: hyper.t_order,
            variant: "base".to_string(),
            include_last: hyper.include_last,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lr_decay_factor: train.lr_decay_factor,
            lr_decay_every: train.lr_decay_every,
            l2: train.l2,
            patience: train.patience,
            validation_fraction: train.validation_fraction,
            eval_k: train.eval_k,
            item_count: synth.item_count,
            block_count: synth.block_count,
            session_count: synth.session_count,
            day_count: synth.day_count,
            mean_length: synth.mean_length,
            max_length: synth.max_length,
            concentration: synth.concentration,
            noise_categories: synth.noise_categories,
            noise_values: synth.noise_values,
            cold_block: synth.cold_block,
            cold_block_days: synth.cold_block_days,
            sweep_k: vec![64],
            sweep_t: vec![hyper.t_order],
            sweep_p: vec![5, 10, 15, 20],
            sweep_variants: vec!["base".to_string(), "aw".to_string()],
            sweep_replicates: 1,
            sweep_parallel: false,
        }
    }
}

/// Variant flags parsed from a name such as `aw` or `si,msi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Variant {
    pub adaptive: bool,
    pub si: bool,
    pub msi: bool,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        let mut v = Variant::default();
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "base" => {}
                "aw" | "adaptive" => v.adaptive = true,
                "si" => v.si = true,
                "msi" => v.msi = true,
                other => bail!("unknown variant component `{other}` (expected base, aw, si, msi)"),
            }
        }
        Ok(v)
    }

    /// Canonical name, e.g. `base` or `aw+msi`.
    pub fn name(self) -> String {
        HyperParams {
            use_adaptive: self.adaptive,
            use_si: self.si,
            use_msi: self.msi,
            ..HyperParams::default()
        }
        .variant_name()
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            table.insert(key.clone(), value.clone());
        }
        let cfg: RunConfig = table.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        FractionSpec::new(self.fraction_k).context("invalid setting `fraction_k`")?;
        if self.p == 0 {
            bail!("invalid setting `p`: must be at least 1");
        }
        Variant::parse(&self.variant).context("invalid setting `variant`")?;
        self.hyper().validate().context("invalid model setting")?;
        self.train_config().validate()?;
        if self.sweep_replicates == 0 {
            bail!("invalid setting `sweep_replicates`: must be at least 1");
        }
        for v in &self.sweep_variants {
            Variant::parse(v).context("invalid setting `sweep_variants`")?;
        }
        Ok(())
    }

    pub fn hyper(&self) -> HyperParams {
        let v = Variant::parse(&self.variant).unwrap_or_default();
        HyperParams {
            dim: self.dim,
            steps: self.steps,
            t_order: self.t_order,
            max_len: self.p,
            use_adaptive: v.adaptive,
            use_si: v.si,
            use_msi: v.msi,
            include_last: self.include_last,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            l2: self.l2,
            patience: self.patience,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            eval_k: self.eval_k,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            item_count: self.item_count,
            block_count: self.block_count,
            session_count: self.session_count,
            day_count: self.day_count,
            mean_length: self.mean_length,
            max_length: self.max_length,
            concentration: self.concentration,
            noise_categories: self.noise_categories,
            noise_values: self.noise_values,
            cold_block: self.cold_block,
            cold_block_days: self.cold_block_days,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses a `key=value` override; the value is read as TOML and falls back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .with_context(|| format!("override `{s}` is not key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key, value))
}
