//! Run directories and the experiment recipes driven by the CLI.
//!
//! A run directory holds `config.resolved`, `checkpoints/`, `metrics.jsonl`
//! and `report.json`. Nothing time-dependent is written to the metrics log,
//! so re-running a command with the same config reproduces it byte for byte.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::augment::{estimate_target_stats, TargetStats};
use crate::centroids::CentroidBank;
use crate::config::TrainConfig;
use crate::domains::{load_dataset, Benchmark, EvalData, TrainData};
use crate::error::{Error, Result};
use crate::eval::{evaluate_miou, median_threshold_labels, MiouReport};
use crate::io::{create_dir, write_atomic};
use crate::model::checkpoint::{save_checkpoint, Checkpoint};
use crate::model::{init_pair, Branch, ModelPair};
use crate::selftrain::{
    argmax_labels, generate_warm_labels, init_centroids, train_st, LabelGenerator, StEpoch,
    StMonitor, Strategy,
};
use crate::warmup::{train_warmup, WarmupEpoch};

pub struct RunDir {
    pub root: PathBuf,
    metrics: File,
}

impl RunDir {
    /// Creates (or resets) the run directory and records the resolved config.
    /// `header` lines are written as comments above it.
    pub fn create(root: &Path, cfg: &TrainConfig, header: &[String]) -> Result<Self> {
        create_dir(&root.join("checkpoints"))?;
        let mut text = String::new();
        for h in header {
            text.push_str(&format!("# {h}\n"));
        }
        text.push_str(&cfg.to_file_string());
        write_atomic(&root.join("config.resolved"), text.as_bytes())?;
        let path = root.join("metrics.jsonl");
        let metrics = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
        })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log<T: Serialize>(&mut self, tag: &Tag, record: &T) -> Result<()> {
        let line = serde_json::to_string(&Line { tag, record })
            .map_err(|e| Error::Invalid(format!("metrics encoding: {e}")))?;
        let path = self.root.join("metrics.jsonl");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(path, e))
    }

    pub fn write_report<T: Serialize>(&self, report: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(report)
            .map_err(|e| Error::Invalid(format!("report encoding: {e}")))?;
        text.push('\n');
        write_atomic(&self.root.join("report.json"), text.as_bytes())
    }
}

/// Identifies which stage of which experiment a metrics line belongs to.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Tag {
    pub stage: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rung: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<&'static str>,
    pub seed: u64,
}

#[derive(Serialize)]
struct Line<'a, T: Serialize> {
    #[serde(flatten)]
    tag: &'a Tag,
    #[serde(flatten)]
    record: &'a T,
}

fn log_to<T: Serialize>(run: &mut Option<&mut RunDir>, tag: &Tag, record: &T) -> Result<()> {
    match run {
        Some(r) => r.log(tag, record),
        None => Ok(()),
    }
}

/// Training inputs plus the evaluation-only ground truth.
pub struct Dataset {
    pub train: TrainData,
    pub eval: EvalData,
    pub stats: TargetStats,
}

impl Dataset {
    pub fn generate(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let bench = Benchmark::generate(cfg, seed);
        Self::from_parts(bench.train_data(), bench.eval_data())
    }

    pub fn load(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        let index = load_dataset(root, cfg)?;
        Self::from_parts(index.load_train_data(cfg)?, index.load_eval_data(cfg)?)
    }

    fn from_parts(train: TrainData, eval: EvalData) -> Result<Self> {
        let stats = estimate_target_stats(&train.target)?;
        Ok(Self { train, eval, stats })
    }

    /// Target statistics, withheld when the translator is disabled so that
    /// no target information reaches training.
    pub fn stats_for(&self, cfg: &TrainConfig) -> Option<&TargetStats> {
        cfg.use_crdomix.then_some(&self.stats)
    }
}

/// Warm-up from a fresh initialization seeded by `cfg.seed`.
pub fn run_warmup(
    cfg: &TrainConfig,
    data: &Dataset,
    run: &mut Option<&mut RunDir>,
    tag: &Tag,
) -> Result<ModelPair<f32>> {
    let mut pair = init_pair(cfg, cfg.seed);
    train_warmup(
        &mut pair,
        &data.train,
        data.stats_for(cfg),
        Some(&data.eval.target_val),
        cfg,
        |l: &WarmupEpoch| log_to(run, tag, l),
    )?;
    Ok(pair)
}

/// Pseudo-labelling schemes compared in the strategy study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoStrategy {
    FeatOnly,
    WarmOnly,
    Threshold,
    Consensus,
}

impl PseudoStrategy {
    pub const ALL: [PseudoStrategy; 4] = [Self::FeatOnly, Self::WarmOnly, Self::Threshold, Self::Consensus];

    pub fn name(self) -> &'static str {
        match self {
            Self::FeatOnly => "feat_only",
            Self::WarmOnly => "warm_only",
            Self::Threshold => "threshold",
            Self::Consensus => "consensus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s.replace('-', "_"))
    }

    fn parts(self) -> (Strategy, LabelGenerator) {
        match self {
            Self::FeatOnly => (Strategy::FeatOnly, argmax_labels),
            Self::WarmOnly => (Strategy::Stored, argmax_labels),
            Self::Threshold => (Strategy::Stored, median_threshold_labels),
            Self::Consensus => (Strategy::Consensus, argmax_labels),
        }
    }
}

/// Initial centroids over the source set's mixed views.
pub fn initial_bank(pair: &ModelPair<f32>, cfg: &TrainConfig, data: &Dataset) -> Result<CentroidBank> {
    init_centroids(pair, &data.train.source, Some(&data.stats), cfg)
}

/// Self-training from a warm-up pair. Builds the bank unless one is given.
pub fn run_st(
    warm: &ModelPair<f32>,
    bank: Option<CentroidBank>,
    cfg: &TrainConfig,
    data: &Dataset,
    strategy: PseudoStrategy,
    run: &mut Option<&mut RunDir>,
    tag: &Tag,
) -> Result<(Checkpoint, Vec<StEpoch>)> {
    let mut pair = warm.clone();
    let mut bank = match bank {
        Some(b) => b,
        None => initial_bank(&pair, cfg, data)?,
    };
    let (strategy, generator) = strategy.parts();
    let store = generate_warm_labels(&pair, Branch::Student, &data.train.target, cfg, generator, 0)?;
    let monitor = StMonitor {
        target_train_labels: Some(&data.eval.target_train_labels),
        val: Some(&data.eval.target_val),
    };
    let (log, _) = train_st(
        &mut pair,
        &mut bank,
        store,
        &data.train,
        Some(&data.stats),
        cfg,
        strategy,
        generator,
        monitor,
        |l| log_to(run, tag, l),
    )?;
    Ok((
        Checkpoint {
            pair,
            bank: Some(bank),
        },
        log,
    ))
}

/// Target and target2 validation scores of one model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainScores {
    pub target: MiouReport,
    pub target2: MiouReport,
}

pub fn score(pair: &ModelPair<f32>, cfg: &TrainConfig, data: &Dataset, mst: bool) -> Result<DomainScores> {
    Ok(DomainScores {
        target: evaluate_miou(pair, &data.eval.target_val, cfg, mst)?,
        target2: evaluate_miou(pair, &data.eval.target2_val, cfg, mst)?,
    })
}

/// Rows of the component ablation, in ladder order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    SourceOnly,
    Distil,
    Symmetric,
    CrDoMix,
    SelfTrain,
}

impl Rung {
    pub const ALL: [Rung; 5] = [
        Self::SourceOnly,
        Self::Distil,
        Self::Symmetric,
        Self::CrDoMix,
        Self::SelfTrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SourceOnly => "source_only",
            Self::Distil => "distil",
            Self::Symmetric => "symmetric",
            Self::CrDoMix => "crdomix",
            Self::SelfTrain => "self_train",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::SourceOnly => "source-only",
            Self::Distil => "+ distillation",
            Self::Symmetric => "+ symmetric term",
            Self::CrDoMix => "+ CrDoMix",
            Self::SelfTrain => "+ self-training",
        }
    }

    /// Warm-up switches for this rung. Self-training starts from the full
    /// warm-up.
    pub fn warmup_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Self::SourceOnly => {
                cfg.photometric_augment = false;
                cfg.lambda_distil_warmup = 0.0;
                cfg.use_crdomix = false;
            }
            Self::Distil => {
                cfg.symmetric_distil = false;
                cfg.use_crdomix = false;
            }
            Self::Symmetric => cfg.use_crdomix = false,
            Self::CrDoMix | Self::SelfTrain => {}
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedScores {
    pub seed: u64,
    pub target: f64,
    pub target2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreRow {
    pub name: &'static str,
    pub label: &'static str,
    pub per_seed: Vec<SeedScores>,
    pub mean_target: f64,
    pub mean_target2: f64,
}

impl ScoreRow {
    fn new(name: &'static str, label: &'static str, per_seed: Vec<SeedScores>) -> Self {
        let n = per_seed.len().max(1) as f64;
        Self {
            name,
            label,
            mean_target: per_seed.iter().map(|s| s.target).sum::<f64>() / n,
            mean_target2: per_seed.iter().map(|s| s.target2).sum::<f64>() / n,
            per_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub experiment: &'static str,
    pub mst: bool,
    pub seeds: Vec<u64>,
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn row(&self, name: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.to_string(),
                    format!("{:.2}", 100.0 * r.mean_target),
                    format!("{:.2}", 100.0 * r.mean_target2),
                ]
            })
            .collect();
        crate::eval::text_table(&["model", "target mIoU", "target2 mIoU"], &rows)
    }
}

fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.clone()
    }
}

fn seed_scores(seed: u64, s: &DomainScores) -> SeedScores {
    SeedScores {
        seed,
        target: s.target.miou,
        target2: s.target2.miou,
    }
}

fn save(run: &Option<&mut RunDir>, name: &str, ckpt: &Checkpoint) -> Result<()> {
    match run {
        Some(r) => save_checkpoint(&r.checkpoint_path(name), ckpt),
        None => Ok(()),
    }
}

/// Component ablation: every rung trained per seed, evaluated on both
/// held-out domains.
pub fn ablate(
    cfg: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    mst: bool,
    mut run: Option<&mut RunDir>,
) -> Result<ScoreReport> {
    let mut per_rung: Vec<Vec<SeedScores>> = vec![Vec::new(); Rung::ALL.len()];
    for &seed in seeds {
        let base = with_seed(cfg, seed);
        let mut full_warmup = None;
        for (i, rung) in Rung::ALL.into_iter().enumerate() {
            let rcfg = rung.warmup_config(&base);
            let tag = Tag {
                stage: if rung == Rung::SelfTrain { "self_train" } else { "warmup" },
                rung: Some(rung.name()),
                strategy: None,
                seed,
            };
            let ckpt = if rung == Rung::SelfTrain {
                let warm = full_warmup.take().ok_or_else(|| Error::Invalid("missing warm-up".into()))?;
                run_st(&warm, None, &rcfg, data, PseudoStrategy::Consensus, &mut run, &tag)?.0
            } else {
                let pair = run_warmup(&rcfg, data, &mut run, &tag)?;
                if rung == Rung::CrDoMix {
                    full_warmup = Some(pair.clone());
                }
                Checkpoint { pair, bank: None }
            };
            save(&run, &format!("{}-seed{seed}", rung.name()), &ckpt)?;
            per_rung[i].push(seed_scores(seed, &score(&ckpt.pair, &rcfg, data, mst)?));
        }
    }
    let rows = Rung::ALL
        .into_iter()
        .zip(per_rung)
        .map(|(r, s)| ScoreRow::new(r.name(), r.label(), s))
        .collect();
    Ok(ScoreReport {
        experiment: "ablate",
        mst,
        seeds: seeds.to_vec(),
        rows,
    })
}

/// The two models of the generalization study: plain supervised training
/// and the distillation warm-up with the translator disabled.
pub const GENERALIZE_RUNGS: [Rung; 2] = [Rung::SourceOnly, Rung::Symmetric];

pub fn generalize(
    cfg: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    mst: bool,
    mut run: Option<&mut RunDir>,
) -> Result<ScoreReport> {
    let mut rows = Vec::new();
    for rung in GENERALIZE_RUNGS {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let rcfg = rung.warmup_config(&with_seed(cfg, seed));
            let tag = Tag {
                stage: "warmup",
                rung: Some(rung.name()),
                strategy: None,
                seed,
            };
            let pair = run_warmup(&rcfg, data, &mut run, &tag)?;
            let ckpt = Checkpoint { pair, bank: None };
            save(&run, &format!("{}-seed{seed}", rung.name()), &ckpt)?;
            per_seed.push(seed_scores(seed, &score(&ckpt.pair, &rcfg, data, mst)?));
        }
        rows.push(ScoreRow::new(rung.name(), rung.label(), per_seed));
    }
    Ok(ScoreReport {
        experiment: "generalize",
        mst,
        seeds: seeds.to_vec(),
        rows,
    })
}

impl ScoreReport {
    /// The generalization study read off an ablation report, whose rungs
    /// include both of its models trained identically.
    pub fn generalization_view(&self) -> Option<ScoreReport> {
        let rows = GENERALIZE_RUNGS
            .iter()
            .map(|r| self.row(r.name()).cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(ScoreReport {
            experiment: "generalize",
            mst: self.mst,
            seeds: self.seeds.clone(),
            rows,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: PseudoStrategy,
    pub final_miou: f64,
    pub log: Vec<StEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub seed: u64,
    pub mst: bool,
    pub rows: Vec<StrategyRow>,
}

impl CompareReport {
    pub fn row(&self, s: PseudoStrategy) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == s)
    }

    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let last = r.log.last();
                vec![
                    r.strategy.name().to_string(),
                    format!("{:.2}", 100.0 * r.final_miou),
                    pct(last.and_then(|l| l.pl_precision)),
                    pct(last.and_then(|l| l.pl_coverage)),
                ]
            })
            .collect();
        crate::eval::text_table(&["strategy", "target mIoU", "pl precision", "pl coverage"], &rows)
    }
}

/// Self-training from one warm-up model with only the pseudo-labelling
/// swapped between rows.
pub fn compare_pseudo(
    warm: &ModelPair<f32>,
    bank: Option<&CentroidBank>,
    cfg: &TrainConfig,
    data: &Dataset,
    mst: bool,
    mut run: Option<&mut RunDir>,
) -> Result<CompareReport> {
    let bank = match bank {
        Some(b) => b.clone(),
        None => initial_bank(warm, cfg, data)?,
    };
    let mut rows = Vec::new();
    for strategy in PseudoStrategy::ALL {
        let tag = Tag {
            stage: "self_train",
            rung: None,
            strategy: Some(strategy.name()),
            seed: cfg.seed,
        };
        let (ckpt, log) = run_st(warm, Some(bank.clone()), cfg, data, strategy, &mut run, &tag)?;
        save(&run, &format!("st-{}", strategy.name()), &ckpt)?;
        rows.push(StrategyRow {
            strategy,
            final_miou: evaluate_miou(&ckpt.pair, &data.eval.target_val, cfg, mst)?.miou,
            log,
        });
    }
    Ok(CompareReport {
        seed: cfg.seed,
        mst,
        rows,
    })
}
