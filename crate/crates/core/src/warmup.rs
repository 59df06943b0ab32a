//! Warm-up stage: supervised cross-entropy on the mixed source view plus
//! symmetric teacher-to-student distillation, with the teacher tracking the
//! student by EMA.

use serde::Serialize;

use crate::augment::{
    build_class_mask, crdomix, photometric_augment, translate_s2t, PhotometricParams, TargetStats,
};
use crate::config::TrainConfig;
use crate::domains::TrainData;
use crate::error::{Error, Result};
use crate::eval::evaluate_miou;
use crate::model::{ModelPair, Sgd};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{Image, LabelMap, ProbMap, Scalar};
use rand::seq::SliceRandom;

/// Mean cross-entropy over non-ignore pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    pub valid: usize,
    /// True when every pixel was ignore; `value` is then 0.
    pub empty: bool,
}

pub fn ce_loss<T: Scalar>(probs: &ProbMap<T>, y: &LabelMap, ignore_id: u8) -> CeLoss {
    let area = probs.area();
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    for p in 0..area {
        let k = y.data[p];
        if k == ignore_id || k as usize >= probs.classes {
            continue;
        }
        sum -= probs.at(k as usize, p).to_f64().max(f64::MIN_POSITIVE).ln();
        valid += 1;
    }
    CeLoss {
        value: if valid > 0 { sum / valid as f64 } else { 0.0 },
        valid,
        empty: valid == 0,
    }
}

/// Adds `scale · ∂ce_loss/∂logits` into `out`.
pub fn ce_grad<T: Scalar>(probs: &ProbMap<T>, y: &LabelMap, ignore_id: u8, scale: f64, out: &mut [T]) {
    let area = probs.area();
    let valid = y
        .data
        .iter()
        .filter(|&&k| k != ignore_id && (k as usize) < probs.classes)
        .count();
    if valid == 0 {
        return;
    }
    let w = T::from_f64(scale / valid as f64);
    for p in 0..area {
        let k = y.data[p];
        if k == ignore_id || k as usize >= probs.classes {
            continue;
        }
        for c in 0..probs.classes {
            out[c * area + p] += w * probs.at(c, p);
        }
        out[k as usize * area + p] -= w;
    }
}

/// `mean_pixels Σ_c −target(c)·ln pred(c)`.
pub fn soft_ce<T: Scalar>(target: &ProbMap<T>, pred: &ProbMap<T>) -> Result<f64> {
    if !target.same_shape(pred) {
        return Err(Error::Shape("soft cross-entropy operands differ in shape".into()));
    }
    let area = pred.area();
    let mut sum = 0.0f64;
    for c in 0..pred.classes {
        for p in 0..area {
            let a = target.at(c, p).to_f64();
            if a != 0.0 {
                sum -= a * pred.at(c, p).to_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    Ok(sum / area as f64)
}

/// Adds `scale · ∂soft_ce/∂logits(pred)` into `out`: `(pred·Σtarget − target)/area`.
pub fn soft_ce_grad<T: Scalar>(target: &ProbMap<T>, pred: &ProbMap<T>, scale: f64, out: &mut [T]) {
    let area = pred.area();
    let w = T::from_f64(scale / area as f64);
    for p in 0..area {
        let mass: T = (0..pred.classes).map(|c| target.at(c, p)).sum();
        for c in 0..pred.classes {
            out[c * area + p] += w * (pred.at(c, p) * mass - target.at(c, p));
        }
    }
}

/// Symmetric distillation: teacher-on-clean supervises student-on-augmented,
/// plus `alpha` times teacher-on-augmented supervising student-on-clean.
pub fn distill_loss<T: Scalar>(
    teacher_clean: &ProbMap<T>,
    student_aug: &ProbMap<T>,
    teacher_aug: &ProbMap<T>,
    student_clean: &ProbMap<T>,
    alpha: f64,
) -> Result<f64> {
    if !teacher_clean.same_shape(teacher_aug) {
        return Err(Error::Shape("distillation maps differ in shape".into()));
    }
    Ok(soft_ce(teacher_clean, student_aug)? + alpha * soft_ce(teacher_aug, student_clean)?)
}

/// The three views of one source image.
#[derive(Clone, Debug)]
pub struct SourceViews {
    pub clean: Image,
    /// Photometrically augmented copy.
    pub aug: Image,
    /// Mixed view fed to the student; equals `aug` when mixing is off.
    pub cdm: Image,
}

/// Builds the augmented and mixed views for one source sample.
pub fn source_views(
    x: &Image,
    y: &LabelMap,
    stats: Option<&TargetStats>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SourceViews> {
    let aug = if cfg.photometric_augment {
        photometric_augment(x, derive_seed(seed, "photometric", &[]), &PhotometricParams::from_config(cfg))
    } else {
        x.clone()
    };
    let cdm = if cfg.use_crdomix {
        let stats = stats.ok_or_else(|| Error::Invalid("mixing requires target statistics".into()))?;
        let translated = translate_s2t(x, stats);
        let mask = build_class_mask(y, derive_seed(seed, "mask", &[]), cfg.ignore_id)?;
        crdomix(&aug, &translated, &mask)?
    } else {
        aug.clone()
    };
    Ok(SourceViews {
        clean: x.clone(),
        aug,
        cdm,
    })
}

/// Seed of sample `i` within a step.
pub fn sample_seed(step_seed: u64, i: usize) -> u64 {
    derive_seed(step_seed, "sample", &[i as u64])
}

/// Source-branch outputs for one sample.
pub(crate) struct SourceBranch {
    pub seg: CeLoss,
    pub distil: f64,
    /// Student encoder features of the mixed view.
    pub cdm_features: Vec<f32>,
}

/// Runs the source branch for one sample and accumulates `scale`-weighted
/// gradients of `λseg·L_seg + λd·L_distil` into `grads`.
pub(crate) fn source_branch(
    pair: &ModelPair<f32>,
    views: &SourceViews,
    y: &LabelMap,
    cfg: &TrainConfig,
    lambda_d: f64,
    scale: f64,
    grads: &mut [f32],
) -> Result<SourceBranch> {
    let arch = &pair.arch;
    let (s_clean, cache_clean) = arch.forward(&pair.student, &views.clean, true)?;
    let seg = ce_loss(&s_clean.probs, y, cfg.ignore_id);
    let mut d_clean = vec![0.0f32; s_clean.logits.len()];
    ce_grad(&s_clean.probs, y, cfg.ignore_id, scale * cfg.lambda_seg, &mut d_clean);

    let mut distil = 0.0;
    let (s_cdm, cache_cdm) = arch.forward(&pair.student, &views.cdm, lambda_d > 0.0)?;
    if let Some(cache_cdm) = cache_cdm {
        let (t_clean, _) = arch.forward(&pair.teacher, &views.clean, false)?;
        distil += soft_ce(&t_clean.probs, &s_cdm.probs)?;
        let mut d_cdm = vec![0.0f32; s_cdm.logits.len()];
        soft_ce_grad(&t_clean.probs, &s_cdm.probs, scale * lambda_d, &mut d_cdm);
        arch.backward(&pair.student, &cache_cdm, &d_cdm, grads);
        if cfg.symmetric_distil {
            let (t_cdm, _) = arch.forward(&pair.teacher, &views.cdm, false)?;
            distil += cfg.alpha * soft_ce(&t_cdm.probs, &s_clean.probs)?;
            soft_ce_grad(&t_cdm.probs, &s_clean.probs, scale * lambda_d * cfg.alpha, &mut d_clean);
        }
    }
    arch.backward(&pair.student, &cache_clean.expect("cache requested"), &d_clean, grads);
    Ok(SourceBranch {
        seg,
        distil,
        cdm_features: s_cdm.features,
    })
}

/// Batch-mean losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub seg: f64,
    pub distil: f64,
    pub total: f64,
}

/// One warm-up iteration: build views, accumulate gradients over the batch,
/// take an SGD step on the student, then move the teacher by EMA.
pub fn warmup_step(
    pair: &mut ModelPair<f32>,
    opt: &mut Sgd,
    batch: &[(&Image, &LabelMap)],
    stats: Option<&TargetStats>,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty source batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0f32; pair.student.len()];
    let mut losses = StepLosses::default();
    for (i, (x, y)) in batch.iter().enumerate() {
        let views = source_views(x, y, stats, cfg, sample_seed(step_seed, i))?;
        let out = source_branch(pair, &views, y, cfg, cfg.lambda_distil_warmup, scale, &mut grads)?;
        losses.seg += scale * out.seg.value;
        losses.distil += scale * out.distil;
    }
    losses.total = cfg.lambda_seg * losses.seg + cfg.lambda_distil_warmup * losses.distil;
    opt.step(&mut pair.student, &grads);
    pair.ema_update(cfg.ema_momentum);
    Ok(losses)
}

/// One line of the warm-up metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WarmupEpoch {
    pub epoch: usize,
    pub loss_seg: f64,
    pub loss_distil: f64,
    pub miou_target_val: Option<f64>,
}

/// Shuffled order of `n` items for one epoch.
pub fn epoch_order(seed: u64, tag: &str, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, tag, &[epoch as u64]));
    idx
}

/// Runs `warmup_epochs` epochs over shuffled source data. `val` is an
/// evaluation-only peek used for logging. `on_epoch` receives every log
/// line as it is produced.
pub fn train_warmup(
    pair: &mut ModelPair<f32>,
    data: &TrainData,
    stats: Option<&TargetStats>,
    val: Option<&[(Image, LabelMap)]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&WarmupEpoch) -> Result<()>,
) -> Result<Vec<WarmupEpoch>> {
    if data.source.is_empty() {
        return Err(Error::Invalid("source split is empty".into()));
    }
    let mut opt = Sgd::from_config(cfg, pair.student.len());
    let bs = cfg.batch_source;
    let mut log = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let order = epoch_order(cfg.seed, "warmup-order", epoch, data.source.len());
        let (mut seg, mut distil, mut steps) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<(&Image, &LabelMap)> =
                chunk.iter().map(|&i| (&data.source[i].0, &data.source[i].1)).collect();
            let seed = derive_seed(cfg.seed, "warmup-step", &[epoch as u64, b as u64]);
            let l = warmup_step(pair, &mut opt, &batch, stats, cfg, seed)?;
            seg += l.seg;
            distil += l.distil;
            steps += 1;
        }
        let line = WarmupEpoch {
            epoch: epoch + 1,
            loss_seg: seg / steps as f64,
            loss_distil: distil / steps as f64,
            miou_target_val: match val {
                Some(v) => Some(evaluate_miou(pair, v, cfg, false)?.miou),
                None => None,
            },
        };
        on_epoch(&line)?;
        log.push(line);
    }
    Ok(log)
}
