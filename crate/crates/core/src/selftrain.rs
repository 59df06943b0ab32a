//! Self-training stage. Target pseudo-labels are the per-pixel agreement of
//! nearest-centroid votes on teacher features and the stored warm-up model
//! argmax; they supervise the student on target images alongside the
//! source-domain warm-up objective.

use serde::Serialize;

use crate::augment::TargetStats;
use crate::centroids::{
    centroids_from_image_means, ema_update_centroids, vote_labels, CentroidBank, ClassMeans,
};
use crate::config::TrainConfig;
use crate::domains::TrainData;
use crate::error::{Error, Result};
use crate::eval::{evaluate_miou, PseudoCounts};
use crate::model::{Branch, ModelPair, Sgd};
use crate::rng::derive_seed;
use crate::tensor::{Image, LabelMap, ProbMap};
use crate::warmup::{ce_grad, ce_loss, epoch_order, sample_seed, source_branch, source_views};

/// Student features of every source image's mixed view, averaged per class
/// over the images that contain the class.
pub fn init_centroids(
    pair: &ModelPair<f32>,
    source: &[(Image, LabelMap)],
    stats: Option<&TargetStats>,
    cfg: &TrainConfig,
) -> Result<CentroidBank> {
    let (c, d, s) = (cfg.num_classes, cfg.feature_dim, cfg.feature_stride);
    let per_image = source
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let views = source_views(x, y, stats, cfg, derive_seed(cfg.seed, "centroid-init", &[i as u64]))?;
            let (feat, _) = pair.arch.encode(&pair.student, &views.cdm)?;
            let mut m = ClassMeans::new(c, d);
            m.accumulate(&feat, &y.downsample_nearest(s))?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(centroids_from_image_means(c, d, &per_image))
}

/// Stored warm-up labels, one per target-train image.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelStore {
    pub labels: Vec<LabelMap>,
    /// Self-training epoch at which the labels were generated (0 = warm-up).
    pub epoch: usize,
}

/// Turns the model's probability maps over the whole target-train split
/// into stored labels.
pub type LabelGenerator = fn(&[ProbMap], &TrainConfig) -> Vec<LabelMap>;

/// Plain per-pixel argmax; ties go to the smallest class id.
pub fn argmax_labels(probs: &[ProbMap], _cfg: &TrainConfig) -> Vec<LabelMap> {
    probs.iter().map(ProbMap::argmax).collect()
}

pub fn generate_warm_labels(
    pair: &ModelPair<f32>,
    branch: Branch,
    target: &[Image],
    cfg: &TrainConfig,
    generator: LabelGenerator,
    epoch: usize,
) -> Result<PseudoLabelStore> {
    let params = pair.params(branch);
    let probs = target
        .iter()
        .map(|x| Ok(pair.arch.forward(params, x, false)?.0.probs))
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelStore {
        labels: generator(&probs, cfg),
        epoch,
    })
}

/// Keeps the label where both maps agree, `ignore_id` elsewhere.
pub fn consensus(feat: &LabelMap, warm: &LabelMap, ignore_id: u8) -> Result<LabelMap> {
    if !feat.same_shape(warm) {
        return Err(Error::Shape(format!(
            "consensus inputs {}x{} and {}x{}",
            feat.height, feat.width, warm.height, warm.width
        )));
    }
    let data = feat
        .data
        .iter()
        .zip(&warm.data)
        .map(|(&a, &b)| if a == b { a } else { ignore_id })
        .collect();
    LabelMap::from_data(feat.height, feat.width, data)
}

/// Which labels supervise the target branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Agreement of centroid votes and stored labels.
    Consensus,
    /// Centroid votes alone.
    FeatOnly,
    /// Stored labels alone.
    Stored,
}

/// Target-branch labels of one image, plus its two sources.
pub struct TargetLabels {
    pub used: LabelMap,
    pub feat: LabelMap,
    pub warm: LabelMap,
}

/// Votes on teacher features of `x`, upsampled to image size, combined with
/// the stored label according to `strategy`.
pub fn target_labels(
    pair: &ModelPair<f32>,
    bank: &CentroidBank,
    x: &Image,
    stored: &LabelMap,
    strategy: Strategy,
    cfg: &TrainConfig,
) -> Result<TargetLabels> {
    let (feat, size) = pair.arch.encode(&pair.teacher, x)?;
    let feat = vote_labels(&feat, size, bank)?.upsample_nearest(cfg.feature_stride);
    let used = match strategy {
        Strategy::Consensus => consensus(&feat, stored, cfg.ignore_id)?,
        Strategy::FeatOnly => feat.clone(),
        Strategy::Stored => stored.clone(),
    };
    Ok(TargetLabels {
        used,
        feat,
        warm: stored.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StLosses {
    pub seg_source: f64,
    pub distil: f64,
    pub seg_target: f64,
    pub total: f64,
}

/// Per-pixel record of one target image inside a step, for logging.
pub struct TargetTrace {
    pub index: usize,
    pub labels: TargetLabels,
    /// `1 − max prob` of the student on the image.
    pub uncertainty: Vec<f32>,
}

/// Mutable state of the self-training stage.
pub struct StState<'a> {
    pub pair: &'a mut ModelPair<f32>,
    pub opt: &'a mut Sgd,
    pub bank: &'a mut CentroidBank,
    pub store: &'a PseudoLabelStore,
}

/// One self-training iteration over a source batch and a target batch of
/// `(index into the store, image)` pairs.
pub fn st_step(
    st: &mut StState<'_>,
    source: &[(&Image, &LabelMap)],
    target: &[(usize, &Image)],
    stats: Option<&TargetStats>,
    cfg: &TrainConfig,
    strategy: Strategy,
    step_seed: u64,
) -> Result<(StLosses, Vec<TargetTrace>)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Invalid("empty self-training batch".into()));
    }
    let (c, d, s) = (cfg.num_classes, cfg.feature_dim, cfg.feature_stride);
    let pair = &*st.pair;
    let mut grads = vec![0.0f32; pair.student.len()];
    let mut losses = StLosses::default();
    let mut means_s = ClassMeans::new(c, d);
    let mut means_t = ClassMeans::new(c, d);

    let scale_s = 1.0 / source.len() as f64;
    for (i, (x, y)) in source.iter().enumerate() {
        let views = source_views(x, y, stats, cfg, sample_seed(step_seed, i))?;
        let out = source_branch(pair, &views, y, cfg, cfg.lambda_distil_st, scale_s, &mut grads)?;
        losses.seg_source += scale_s * out.seg.value;
        losses.distil += scale_s * out.distil;
        means_s.accumulate(&out.cdm_features, &y.downsample_nearest(s))?;
    }

    let scale_t = 1.0 / target.len() as f64;
    let mut traces = Vec::with_capacity(target.len());
    for &(idx, x) in target {
        let stored = st
            .store
            .labels
            .get(idx)
            .ok_or_else(|| Error::Invalid(format!("no stored label for target image {idx}")))?;
        let labels = target_labels(pair, st.bank, x, stored, strategy, cfg)?;
        let (out, cache) = pair.arch.forward(&pair.student, x, true)?;
        let ce = ce_loss(&out.probs, &labels.used, cfg.ignore_id);
        losses.seg_target += scale_t * ce.value;
        let mut dl = vec![0.0f32; out.logits.len()];
        ce_grad(&out.probs, &labels.used, cfg.ignore_id, scale_t * cfg.lambda_seg, &mut dl);
        pair.arch.backward(&pair.student, &cache.expect("cache requested"), &dl, &mut grads);
        means_t.accumulate(&out.features, &labels.used.downsample_nearest(s))?;
        let uncertainty = out.probs.max_prob().into_iter().map(|m| 1.0 - m).collect();
        traces.push(TargetTrace {
            index: idx,
            labels,
            uncertainty,
        });
    }
    losses.total = cfg.lambda_distil_st * losses.distil
        + cfg.lambda_seg * (losses.seg_source + losses.seg_target);

    st.opt.step(&mut st.pair.student, &grads);
    st.pair.ema_update(cfg.ema_momentum);
    ema_update_centroids(st.bank, &means_s, &means_t, cfg.centroid_momentum);
    Ok((losses, traces))
}

/// Regenerates the store from the current student (or teacher, if
/// configured) when `epoch` is a positive multiple of the refresh period.
pub fn refresh_labels(
    pair: &ModelPair<f32>,
    target: &[Image],
    store: PseudoLabelStore,
    epoch: usize,
    cfg: &TrainConfig,
    generator: LabelGenerator,
) -> Result<PseudoLabelStore> {
    if epoch == 0 || !epoch.is_multiple_of(cfg.label_refresh_epochs) {
        return Ok(store);
    }
    let branch = if cfg.refresh_with_teacher {
        Branch::Teacher
    } else {
        Branch::Student
    };
    generate_warm_labels(pair, branch, target, cfg, generator, epoch)
}

/// One line of the self-training metrics log. Pseudo-label quality and
/// uncertainty fields use withheld target labels and are absent without them.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StEpoch {
    pub epoch: usize,
    pub loss_seg: f64,
    pub loss_seg_target: f64,
    pub loss_distil: f64,
    pub miou_target_val: Option<f64>,
    pub pl_precision: Option<f64>,
    pub pl_recall: Option<f64>,
    pub pl_coverage: Option<f64>,
    pub pl_precision_feat: Option<f64>,
    pub pl_precision_warm: Option<f64>,
    /// Mean student uncertainty on pixels where the two label sources agree.
    pub unc_accept: Option<f64>,
    /// Mean student uncertainty on pixels where they disagree.
    pub unc_reject: Option<f64>,
    pub label_generation: usize,
}

/// Evaluation-only references for logging.
#[derive(Clone, Copy, Default)]
pub struct StMonitor<'a> {
    pub target_train_labels: Option<&'a [LabelMap]>,
    pub val: Option<&'a [(Image, LabelMap)]>,
}

#[derive(Default)]
struct EpochStats {
    used: PseudoCounts,
    feat: PseudoCounts,
    warm: PseudoCounts,
    unc_accept: (f64, u64),
    unc_reject: (f64, u64),
}

impl EpochStats {
    fn add(&mut self, t: &TargetTrace, gt: Option<&LabelMap>, ignore: u8) -> Result<()> {
        for ((&f, &w), &u) in t.labels.feat.data.iter().zip(&t.labels.warm.data).zip(&t.uncertainty) {
            let slot = if f == w { &mut self.unc_accept } else { &mut self.unc_reject };
            slot.0 += u as f64;
            slot.1 += 1;
        }
        if let Some(gt) = gt {
            self.used.add(&t.labels.used, gt, ignore)?;
            self.feat.add(&t.labels.feat, gt, ignore)?;
            self.warm.add(&t.labels.warm, gt, ignore)?;
        }
        Ok(())
    }
}

fn mean_of((sum, n): (f64, u64)) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Runs `st_epochs` epochs of self-training starting from a warm-up pair,
/// an initialized bank and the initial label store.
#[allow(clippy::too_many_arguments)]
pub fn train_st(
    pair: &mut ModelPair<f32>,
    bank: &mut CentroidBank,
    mut store: PseudoLabelStore,
    data: &TrainData,
    stats: Option<&TargetStats>,
    cfg: &TrainConfig,
    strategy: Strategy,
    generator: LabelGenerator,
    monitor: StMonitor<'_>,
    mut on_epoch: impl FnMut(&StEpoch) -> Result<()>,
) -> Result<(Vec<StEpoch>, PseudoLabelStore)> {
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Invalid("self-training needs source and target images".into()));
    }
    if store.labels.len() != data.target.len() {
        return Err(Error::Invalid(format!(
            "label store covers {} images, target split has {}",
            store.labels.len(),
            data.target.len()
        )));
    }
    let mut opt = Sgd::from_config(cfg, pair.student.len());
    let (bs, bt) = (cfg.batch_source, cfg.batch_target);
    let steps = data.target.len().div_ceil(bt);
    let mut log = Vec::with_capacity(cfg.st_epochs);
    for epoch in 0..cfg.st_epochs {
        let t_order = epoch_order(cfg.seed, "st-target-order", epoch, data.target.len());
        let s_order = epoch_order(cfg.seed, "st-source-order", epoch, data.source.len());
        let mut sums = StLosses::default();
        let mut stats_e = EpochStats::default();
        for step in 0..steps {
            let target: Vec<(usize, &Image)> = t_order[step * bt..((step + 1) * bt).min(t_order.len())]
                .iter()
                .map(|&i| (i, &data.target[i]))
                .collect();
            let source: Vec<(&Image, &LabelMap)> = (0..bs)
                .map(|j| {
                    let i = s_order[(step * bs + j) % s_order.len()];
                    (&data.source[i].0, &data.source[i].1)
                })
                .collect();
            let seed = derive_seed(cfg.seed, "st-step", &[epoch as u64, step as u64]);
            let mut st = StState {
                pair: &mut *pair,
                opt: &mut opt,
                bank: &mut *bank,
                store: &store,
            };
            let (l, traces) = st_step(&mut st, &source, &target, stats, cfg, strategy, seed)?;
            sums.seg_source += l.seg_source;
            sums.seg_target += l.seg_target;
            sums.distil += l.distil;
            for t in &traces {
                let gt = monitor.target_train_labels.map(|g| &g[t.index]);
                stats_e.add(t, gt, cfg.ignore_id)?;
            }
        }
        let n = steps as f64;
        let used = stats_e.used.quality();
        let has_gt = monitor.target_train_labels.is_some();
        let line = StEpoch {
            epoch: epoch + 1,
            loss_seg: sums.seg_source / n,
            loss_seg_target: sums.seg_target / n,
            loss_distil: sums.distil / n,
            miou_target_val: match monitor.val {
                Some(v) => Some(evaluate_miou(pair, v, cfg, false)?.miou),
                None => None,
            },
            pl_precision: used.precision.filter(|_| has_gt),
            pl_recall: used.recall.filter(|_| has_gt),
            pl_coverage: used.coverage.filter(|_| has_gt),
            pl_precision_feat: stats_e.feat.quality().precision.filter(|_| has_gt),
            pl_precision_warm: stats_e.warm.quality().precision.filter(|_| has_gt),
            unc_accept: mean_of(stats_e.unc_accept),
            unc_reject: mean_of(stats_e.unc_reject),
            label_generation: store.epoch,
        };
        on_epoch(&line)?;
        log.push(line);
        if epoch + 1 < cfg.st_epochs {
            store = refresh_labels(pair, &data.target, store, epoch + 1, cfg, generator)?;
        }
    }
    Ok((log, store))
}
