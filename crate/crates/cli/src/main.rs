use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use awgnn_cli::commands::{default_checkpoint, EVAL_TABLE_FILE, SWEEP_FILE, TRAIN_LOG_FILE};
use awgnn_cli::{
    cmd_eval, cmd_recommend, cmd_sweep, cmd_synth, cmd_train, parse_override, RunConfig,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "awgnn",
    version,
    about = "Session-based recommendation with adaptive position weighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set l2=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on the newest 1/k of training sessions.
    #[arg(long)]
    k: Option<usize>,
    /// `purchase` or `next-item`.
    #[arg(long)]
    mode: Option<String>,
    /// Keep the last p views of each session.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Order parameter of the adaptive weights.
    #[arg(long)]
    t: Option<f64>,
    /// `base` or a comma list of `aw`, `si`, `msi`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl Common {
    fn resolve(&self, extra: Vec<(String, toml::Value)>) -> Result<RunConfig> {
        use toml::Value;
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::String(p.display().to_string()));
        put("data_dir", path(&self.data_dir));
        put("out_dir", path(&self.out_dir));
        put("seed", self.seed.map(|v| Value::Integer(v as i64)));
        put("fraction_k", self.k.map(|v| Value::Integer(v as i64)));
        put("mode", self.mode.clone().map(Value::String));
        put("p", self.p.map(|v| Value::Integer(v as i64)));
        put("dim", self.dim.map(|v| Value::Integer(v as i64)));
        put("t_order", self.t.map(Value::Float));
        put("variant", self.variant.clone().map(Value::String));
        put("epochs", self.epochs.map(|v| Value::Integer(v as i64)));
        put("learning_rate", self.lr.map(Value::Float));
        for s in &self.set {
            o.push(parse_override(s)?);
        }
        o.extend(extra);
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block-Markov dataset into the data directory.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Prepare the split and train one model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the final-day test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every (k, t, p, variant) combination.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions, e.g. `128,64,32,4`.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        p_list: Option<Vec<usize>>,
        /// Semicolon-separated variants, e.g. `base;aw;si,msi`.
        #[arg(long, value_delimiter = ';')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Run cells concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Read item ids from standard input and print the top-ranked items.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with the feature file, for side-information variants.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        top: usize,
        /// Also print the session graph's weighted edges.
        #[arg(long)]
        dump_graph: bool,
    },
}

fn list<T: Into<toml::Value> + Clone>(
    key: &str,
    v: Option<Vec<T>>,
) -> Option<(String, toml::Value)> {
    v.map(|v| {
        (
            key.to_string(),
            toml::Value::Array(v.into_iter().map(Into::into).collect()),
        )
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.resolve(vec![])?;
            let hash = cmd_synth(&cfg)?;
            println!("wrote dataset to {}", cfg.data_dir.display());
            println!("manifest sha256 {hash}");
        }
        Command::Train { common } => {
            let cfg = common.resolve(vec![])?;
            let s = cmd_train(&cfg, true)?;
            println!(
                "trained {} on {} examples ({} items, {} trained); best epoch {} of {}",
                s.variant,
                s.data.train_examples,
                s.data.catalog_items,
                s.data.trained_items,
                s.best_epoch,
                s.epochs_run
            );
            println!(
                "artifacts in {} ({TRAIN_LOG_FILE}, model.ckpt)",
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve(vec![])?;
            let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let report = cmd_eval(&cfg, &ckpt)?;
            print!("{}", report.to_table());
            println!("report in {}", cfg.out_dir.join(EVAL_TABLE_FILE).display());
        }
        Command::Sweep {
            common,
            k_list,
            t_list,
            p_list,
            variants,
            replicates,
            parallel,
        } => {
            let mut extra: Vec<_> = [
                list(
                    "sweep_k",
                    k_list.map(|v| v.into_iter().map(|x| x as i64).collect()),
                ),
                list("sweep_t", t_list),
                list(
                    "sweep_p",
                    p_list.map(|v| v.into_iter().map(|x| x as i64).collect()),
                ),
                list("sweep_variants", variants),
            ]
            .into_iter()
            .flatten()
            .collect();
            if let Some(r) = replicates {
                extra.push(("sweep_replicates".into(), toml::Value::Integer(r as i64)));
            }
            if parallel {
                extra.push(("sweep_parallel".into(), toml::Value::Boolean(true)));
            }
            let cfg = common.resolve(extra)?;
            let rows = cmd_sweep(&cfg, true)?;
            let failed = rows.iter().filter(|r| r.result.is_err()).count();
            println!(
                "{} cells ({failed} failed); grid in {}",
                rows.len(),
                cfg.out_dir.join(SWEEP_FILE).display()
            );
            if failed > 0 {
                anyhow::bail!("{failed} sweep cells failed");
            }
        }
        Command::Recommend {
            checkpoint,
            data_dir,
            top,
            dump_graph,
        } => {
            let mut input = String::new();
            std::io::stdin()
                .read_to_string(&mut input)
                .context("reading standard input")?;
            print!(
                "{}",
                cmd_recommend(&checkpoint, data_dir.as_deref(), &input, top, dump_graph)?
            );
        }
    }
    Ok(())
}
