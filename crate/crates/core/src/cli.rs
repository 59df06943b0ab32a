//! Command-line front end.
//!
//! Any `--<config key> <value>` flag (hyphens or underscores) overrides the
//! config file; everything else is parsed by clap.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, TrainConfig};
use crate::domains::{write_dataset, Benchmark};
use crate::error::{Error, Result};
use crate::eval::{evaluate_miou, text_table};
use crate::experiment::{
    ablate, compare_pseudo, generalize, initial_bank, run_st, run_warmup, Dataset, PseudoStrategy,
    RunDir, Tag,
};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Parser, Debug)]
#[command(
    name = "diga",
    version,
    about = "Domain-adaptive segmentation on a synthetic two-domain benchmark",
    after_help = "Every training-config key is also accepted as a flag, e.g. `--ema-momentum 0.99`.\n\
                  Run `diga keys` for the full list with defaults."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file (`key = value` lines); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Run name; defaults to the command name.
    #[arg(long)]
    run: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Dataset written by `gen-data`. Without it the benchmark is generated
    /// in memory from `--data-seed`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark (seeded by `--seed`).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Warm-up training from a fresh initialization.
    TrainWarmup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Add initial class centroids to a warm-up checkpoint.
    InitCentroids {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Self-training from a warm-up checkpoint.
    TrainSt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// consensus, feat-only, warm-only or threshold.
        #[arg(long, default_value = "consensus")]
        strategy: String,
    },
    /// mIoU of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// source, target_train, target_val or target2_val.
        #[arg(long, default_value = "target_val")]
        split: String,
        /// Multi-scale testing.
        #[arg(long)]
        mst: bool,
    },
    /// Self-training with each pseudo-labelling strategy from one warm-up.
    ComparePseudo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report single-scale scores instead of multi-scale.
        #[arg(long)]
        no_mst: bool,
    },
    /// Component ablation ladder over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        no_mst: bool,
    },
    /// Supervised vs distillation warm-up without target data, scored on
    /// both held-out domains.
    Generalize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        no_mst: bool,
    },
    /// List every config key with its default.
    Keys,
}

/// Pulls `--<config key> value` pairs out of `args`, leaving the rest.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !TrainConfig::KEYS.contains(&key.as_str()) {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Usage(format!("flag --{name} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    match path {
        Some(p) => load_config(p, overrides),
        None => {
            let cfg = TrainConfig::default()
                .with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_data(args: &DataArgs, cfg: &TrainConfig) -> Result<Dataset> {
    match &args.data {
        Some(root) => Dataset::load(root, cfg),
        None => Dataset::generate(cfg, args.data_seed),
    }
}

fn open_run(common: &Common, default_name: &str, cfg: &TrainConfig, argv: &[String]) -> Result<RunDir> {
    let name = common.run.as_deref().unwrap_or(default_name);
    RunDir::create(
        &common.runs_dir.join(name),
        cfg,
        &[format!("command: {}", argv.join(" "))],
    )
}

/// Checks that a checkpoint was trained for the configured layout.
fn load_matching(path: &Path, cfg: &TrainConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let a = &ck.pair.arch;
    if a.num_classes != cfg.num_classes
        || a.feature_dim != cfg.feature_dim
        || a.feature_stride != cfg.feature_stride
    {
        return Err(Error::load(path, "checkpoint layout does not match the config"));
    }
    Ok(ck)
}

fn parse_strategy(s: &str) -> Result<PseudoStrategy> {
    PseudoStrategy::parse(s).ok_or_else(|| {
        Error::Usage(format!(
            "unknown strategy `{s}` (expected consensus, feat-only, warm-only or threshold)"
        ))
    })
}

fn execute(command: Command, overrides: &[(String, String)], argv: &[String]) -> Result<()> {
    match command {
        Command::Keys => {
            for (k, v) in TrainConfig::default().entries() {
                println!("--{:<24} {v}", k.replace('_', "-"));
            }
        }
        Command::GenData { out, config } => {
            let cfg = resolve_config(config.as_deref(), overrides)?;
            let bench = Benchmark::generate(&cfg, cfg.seed);
            let index = write_dataset(&bench, &out)?;
            for (split, ids) in &index.splits {
                println!("{split}: {} samples", ids.len());
            }
        }
        Command::TrainWarmup { common, data } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let mut run = open_run(&common, "train-warmup", &cfg, argv)?;
            let tag = Tag {
                stage: "warmup",
                seed: cfg.seed,
                ..Tag::default()
            };
            let pair = run_warmup(&cfg, &ds, &mut Some(&mut run), &tag)?;
            let path = run.checkpoint_path("warmup");
            save_checkpoint(&path, &Checkpoint { pair, bank: None })?;
            println!("{}", path.display());
        }
        Command::InitCentroids {
            common,
            data,
            checkpoint,
        } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let run = open_run(&common, "init-centroids", &cfg, argv)?;
            let mut ck = load_matching(&checkpoint, &cfg)?;
            ck.bank = Some(initial_bank(&ck.pair, &cfg, &ds)?);
            let path = run.checkpoint_path("centroids");
            save_checkpoint(&path, &ck)?;
            println!("{}", path.display());
        }
        Command::TrainSt {
            common,
            data,
            checkpoint,
            strategy,
        } => {
            let strategy = parse_strategy(&strategy)?;
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let mut run = open_run(&common, "train-st", &cfg, argv)?;
            let ck = load_matching(&checkpoint, &cfg)?;
            let tag = Tag {
                stage: "self_train",
                strategy: Some(strategy.name()),
                seed: cfg.seed,
                ..Tag::default()
            };
            let (out, log) = run_st(&ck.pair, ck.bank, &cfg, &ds, strategy, &mut Some(&mut run), &tag)?;
            let path = run.checkpoint_path("st");
            save_checkpoint(&path, &out)?;
            run.write_report(&log)?;
            println!("{}", path.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            mst,
        } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let run = open_run(&common, "eval", &cfg, argv)?;
            let ck = load_matching(&checkpoint, &cfg)?;
            let samples: Vec<_> = match split.as_str() {
                "source" => ds.train.source.clone(),
                "target_train" => ds
                    .train
                    .target
                    .iter()
                    .cloned()
                    .zip(ds.eval.target_train_labels.iter().cloned())
                    .collect(),
                "target_val" => ds.eval.target_val.clone(),
                "target2_val" => ds.eval.target2_val.clone(),
                other => return Err(Error::Usage(format!("unknown split `{other}`"))),
            };
            let report = evaluate_miou(&ck.pair, &samples, &cfg, mst)?;
            run.write_report(&serde_json::json!({
                "split": split,
                "mst": mst,
                "miou": report.miou,
                "per_class": report.per_class,
            }))?;
            let mut rows: Vec<Vec<String>> = report
                .per_class
                .iter()
                .enumerate()
                .map(|(k, v)| vec![k.to_string(), v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))])
                .collect();
            rows.push(vec!["mIoU".into(), format!("{:.2}", 100.0 * report.miou)]);
            print!("{}", text_table(&["class", "IoU"], &rows));
        }
        Command::ComparePseudo {
            common,
            data,
            checkpoint,
            no_mst,
        } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let mut run = open_run(&common, "compare-pseudo", &cfg, argv)?;
            let ck = load_matching(&checkpoint, &cfg)?;
            let report = compare_pseudo(&ck.pair, ck.bank.as_ref(), &cfg, &ds, !no_mst, Some(&mut run))?;
            run.write_report(&report)?;
            print!("{}", report.table());
        }
        Command::Ablate {
            common,
            data,
            seeds,
            no_mst,
        } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let mut run = open_run(&common, "ablate", &cfg, argv)?;
            let report = ablate(&cfg, &ds, &seeds, !no_mst, Some(&mut run))?;
            run.write_report(&report)?;
            print!("{}", report.table());
        }
        Command::Generalize {
            common,
            data,
            seeds,
            no_mst,
        } => {
            let cfg = resolve_config(common.config.as_deref(), overrides)?;
            let ds = load_data(&data, &cfg)?;
            let mut run = open_run(&common, "generalize", &cfg, argv)?;
            let report = generalize(&cfg, &ds, &seeds, !no_mst, Some(&mut run))?;
            run.write_report(&report)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = args
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let (rest, overrides) = match split_overrides(argv.clone()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli.command, &overrides, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn config_flags_are_split_out() {
        let (rest, ov) = split_overrides(strings(&[
            "diga", "ablate", "--ema-momentum", "0.99", "--seeds", "1,2", "--alpha=0.4",
        ]))
        .unwrap();
        assert_eq!(rest, strings(&["diga", "ablate", "--seeds", "1,2"]));
        assert_eq!(
            ov,
            vec![
                ("ema_momentum".to_string(), "0.99".to_string()),
                ("alpha".to_string(), "0.4".to_string())
            ]
        );
        assert!(split_overrides(strings(&["diga", "eval", "--alpha"])).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["diga", "--help"]), 0);
        assert_eq!(run(["diga", "frobnicate"]), 2);
        assert_eq!(run(["diga", "ablate", "--no-such-flag"]), 2);
        assert_eq!(run(["diga", "gen-data", "--out", "/nonexistent/x", "--alpha", "1.5"]), 3);
        assert_eq!(run(["diga", "gen-data", "--out", "/proc/forbidden/x", "--n-source", "1", "--n-target-train", "1", "--n-target-val", "1", "--n-target2-val", "1"]), 4);
        assert_eq!(run(["diga", "train-st", "--checkpoint", "x", "--strategy", "magic"]), 2);
    }
}
