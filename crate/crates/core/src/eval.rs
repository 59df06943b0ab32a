//! Segmentation metrics, multi-scale testing and pseudo-label analysis.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::layers::resize_bilinear;
use crate::model::{Architecture, Branch, ModelPair};
use crate::tensor::{Image, LabelMap, ProbMap};

/// `C×C` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction. Ground-truth ids outside `[0, C)` count as
    /// ignored; predictions must all be valid class ids.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        if let Some(bad) = pred.data.iter().find(|&&p| p as usize >= self.classes) {
            return Err(Error::Invalid(format!("prediction contains id {bad}")));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g as usize >= self.classes {
                self.ignored += 1;
            } else {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Per-class IoU (None for classes absent from the ground truth) and
    /// their mean.
    pub fn miou(&self) -> MiouReport {
        let c = self.classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let gt: u64 = (0..c).map(|j| self.get(k, j)).sum();
                if gt == 0 {
                    return None;
                }
                let tp = self.get(k, k);
                let fp: u64 = (0..c).filter(|&j| j != k).map(|j| self.get(j, k)).sum();
                Some(tp as f64 / (gt + fp) as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, miou }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Averages softmax outputs over rescaled copies of `x`. Each scaled size is
/// rounded to a multiple of the feature stride; probabilities are resized
/// back to the input size, averaged and renormalized.
pub fn mst_predict(arch: &Architecture, params: &[f32], x: &Image, scales: &[f64]) -> Result<ProbMap> {
    if scales.is_empty() {
        return Err(Error::Invalid("no test scales given".into()));
    }
    let (h, w) = (x.height, x.width);
    let c = arch.num_classes;
    let s = arch.feature_stride;
    let area = h * w;
    let mut acc = vec![0.0f64; c * area];
    for &scale in scales {
        let round = |v: usize| (((v as f64 * scale) / s as f64).round() as usize).max(1) * s;
        let (sh, sw) = (round(h), round(w));
        let probs = if (sh, sw) == (h, w) {
            arch.forward_any(params, x, false)?.0.probs.data
        } else {
            let data = resize_bilinear(&x.data, 3, h, w, sh, sw);
            let xs = Image::from_data(sh, sw, data)?;
            let p = arch.forward_any(params, &xs, false)?.0.probs;
            resize_bilinear(&p.data, c, sh, sw, h, w)
        };
        for (a, v) in acc.iter_mut().zip(&probs) {
            *a += *v as f64;
        }
    }
    let mut out = vec![0.0f32; c * area];
    for p in 0..area {
        let z: f64 = (0..c).map(|k| acc[k * area + p]).sum();
        for k in 0..c {
            out[k * area + p] = (acc[k * area + p] / z) as f32;
        }
    }
    ProbMap::from_data(c, h, w, out)
}

/// Branch used for evaluation; the student unless the config asks for the
/// teacher.
pub fn eval_branch(cfg: &TrainConfig) -> Branch {
    if cfg.eval_with_teacher {
        Branch::Teacher
    } else {
        Branch::Student
    }
}

/// Class probabilities for one image, optionally multi-scale.
pub fn predict_probs(pair: &ModelPair<f32>, x: &Image, cfg: &TrainConfig, mst: bool) -> Result<ProbMap> {
    let params = pair.params(eval_branch(cfg));
    if mst {
        mst_predict(&pair.arch, params, x, &cfg.mst_scales)
    } else {
        Ok(pair.arch.forward_any(params, x, false)?.0.probs)
    }
}

/// mIoU over a labelled split.
pub fn evaluate_miou(
    pair: &ModelPair<f32>,
    samples: &[(Image, LabelMap)],
    cfg: &TrainConfig,
    mst: bool,
) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for (x, y) in samples {
        cm.accumulate(&predict_probs(pair, x, cfg, mst)?.argmax(), y)?;
    }
    Ok(cm.miou())
}

/// Raw counts behind pseudo-label precision, recall and coverage. Pixels
/// whose ground truth is ignore are left out entirely.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PseudoCounts {
    /// Non-ignore pseudo-labels on non-ignore ground truth.
    pub labelled: u64,
    pub correct: u64,
    /// Non-ignore ground-truth pixels.
    pub gt: u64,
}

impl PseudoCounts {
    pub fn add(&mut self, pseudo: &LabelMap, gt: &LabelMap, ignore_id: u8) -> Result<()> {
        if !pseudo.same_shape(gt) {
            return Err(Error::Shape("pseudo-label and ground truth differ in shape".into()));
        }
        for (&p, &g) in pseudo.data.iter().zip(&gt.data) {
            if g == ignore_id {
                continue;
            }
            self.gt += 1;
            if p != ignore_id {
                self.labelled += 1;
                if p == g {
                    self.correct += 1;
                }
            }
        }
        Ok(())
    }

    pub fn quality(&self) -> PseudoQuality {
        let ratio = |n: u64, d: u64| (d > 0).then(|| n as f64 / d as f64);
        PseudoQuality {
            precision: ratio(self.correct, self.labelled),
            recall: ratio(self.correct, self.gt),
            coverage: ratio(self.labelled, self.gt),
        }
    }
}

/// `None` marks an undefined ratio (zero denominator).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PseudoQuality {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn pseudo_quality(pseudo: &LabelMap, gt: &LabelMap, ignore_id: u8) -> Result<PseudoQuality> {
    let mut c = PseudoCounts::default();
    c.add(pseudo, gt, ignore_id)?;
    Ok(c.quality())
}

/// `1 − max_c p(c)` per pixel.
pub fn uncertainty_map(probs: &ProbMap) -> Vec<f32> {
    probs.max_prob().into_iter().map(|m| 1.0 - m).collect()
}

/// Argmax labels kept only where the winning probability reaches that
/// class's threshold.
pub fn threshold_labels(probs: &ProbMap, thresholds: &[f64], ignore_id: u8) -> LabelMap {
    let mut out = probs.argmax();
    let maxp = probs.max_prob();
    for (l, &m) in out.data.iter_mut().zip(&maxp) {
        if (m as f64) < thresholds[*l as usize] {
            *l = ignore_id;
        }
    }
    out
}

/// Per-class median of the winning probability over pixels predicted as
/// that class; classes never predicted get threshold 0.
pub fn median_thresholds(probs: &[ProbMap], classes: usize) -> Vec<f64> {
    let mut per: Vec<Vec<f32>> = vec![Vec::new(); classes];
    for p in probs {
        let arg = p.argmax();
        for (&k, m) in arg.data.iter().zip(p.max_prob()) {
            per[k as usize].push(m);
        }
    }
    per.into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return 0.0;
            }
            v.sort_by(f32::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2] as f64
            } else {
                (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
            }
        })
        .collect()
}

/// Stored labels of the threshold baseline: the argmax where it reaches
/// the per-class median confidence over the whole split.
pub fn median_threshold_labels(probs: &[ProbMap], cfg: &TrainConfig) -> Vec<LabelMap> {
    let t = median_thresholds(probs, cfg.num_classes);
    probs.iter().map(|p| threshold_labels(p, &t, cfg.ignore_id)).collect()
}

/// Aligned text table: a header row followed by data rows.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, cell) in r.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = fmt_row(header.to_vec());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&fmt_row(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
