//! Per-class feature centroids: initialization from per-image class means,
//! nearest-centroid voting and the two-source EMA update.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// One `D`-vector per class plus a flag telling whether the class has ever
/// been observed. Absent rows never win a vote.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    classes: usize,
    dim: usize,
    /// Row-major `C×D`.
    pub rho: Vec<f32>,
    pub present: Vec<bool>,
}

impl CentroidBank {
    pub fn empty(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            rho: vec![0.0; classes * dim],
            present: vec![false; classes],
        }
    }

    pub fn from_parts(classes: usize, dim: usize, rho: Vec<f32>, present: Vec<bool>) -> Result<Self> {
        if rho.len() != classes * dim || present.len() != classes {
            return Err(Error::Shape(format!(
                "centroid bank {classes}x{dim} with {} values and {} flags",
                rho.len(),
                present.len()
            )));
        }
        for k in 0..classes {
            if present[k] && rho[k * dim..(k + 1) * dim].iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("centroid {k} is not finite")));
            }
        }
        Ok(Self {
            classes,
            dim,
            rho,
            present,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rho[k * self.dim..(k + 1) * self.dim]
    }

    pub fn set_row(&mut self, k: usize, v: &[f64]) {
        for (dst, &s) in self.rho[k * self.dim..(k + 1) * self.dim].iter_mut().zip(v) {
            *dst = s as f32;
        }
        self.present[k] = true;
    }

    pub fn any_present(&self) -> bool {
        self.present.iter().any(|&p| p)
    }
}

/// Running per-class feature sums and pixel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMeans {
    pub classes: usize,
    pub dim: usize,
    sums: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassMeans {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            sums: vec![0.0; classes * dim],
            counts: vec![0; classes],
        }
    }

    /// Adds every labelled pixel of a `D×h×w` feature map. `labels` must be
    /// at feature resolution; ids outside `[0, C)` (ignore) are skipped.
    pub fn accumulate(&mut self, features: &[f32], labels: &LabelMap) -> Result<()> {
        let area = labels.height * labels.width;
        if features.len() != self.dim * area {
            return Err(Error::Shape(format!(
                "features hold {} values, labels imply {}x{}x{}",
                features.len(),
                self.dim,
                labels.height,
                labels.width
            )));
        }
        for (p, &k) in labels.data.iter().enumerate() {
            let k = k as usize;
            if k >= self.classes {
                continue;
            }
            self.counts[k] += 1;
            let row = &mut self.sums[k * self.dim..(k + 1) * self.dim];
            for (d, s) in row.iter_mut().enumerate() {
                *s += features[d * area + p] as f64;
            }
        }
        Ok(())
    }

    /// Mean feature of class `k`, or `None` if no pixel carried it.
    pub fn mean(&self, k: usize) -> Option<Vec<f64>> {
        let n = self.counts[k];
        (n > 0).then(|| {
            self.sums[k * self.dim..(k + 1) * self.dim]
                .iter()
                .map(|s| s / n as f64)
                .collect()
        })
    }
}

/// Per-class masked means of one feature map.
pub fn batch_class_means(
    features: &[f32],
    labels: &LabelMap,
    classes: usize,
    dim: usize,
) -> Result<ClassMeans> {
    let mut m = ClassMeans::new(classes, dim);
    m.accumulate(features, labels)?;
    Ok(m)
}

/// Averages per-image class means over the images in which each class
/// occurs. Classes that never occur stay absent.
pub fn centroids_from_image_means(classes: usize, dim: usize, per_image: &[ClassMeans]) -> CentroidBank {
    let mut bank = CentroidBank::empty(classes, dim);
    for k in 0..classes {
        let mut acc = vec![0.0f64; dim];
        let mut n = 0usize;
        for m in per_image {
            if let Some(mean) = m.mean(k) {
                for (a, v) in acc.iter_mut().zip(&mean) {
                    *a += v;
                }
                n += 1;
            }
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
            bank.set_row(k, &acc);
        }
    }
    bank
}

/// Nearest present centroid (squared L2) for every pixel of a `D×h×w`
/// feature map; ties go to the smallest class id.
pub fn vote_labels(features: &[f32], size: (usize, usize), bank: &CentroidBank) -> Result<LabelMap> {
    let (h, w) = size;
    let area = h * w;
    let d = bank.dim();
    if features.len() != d * area {
        return Err(Error::Shape(format!(
            "features hold {} values, expected {d}x{h}x{w}",
            features.len()
        )));
    }
    if !bank.any_present() {
        return Err(Error::Invalid("centroid bank has no present class".into()));
    }
    let present: Vec<usize> = (0..bank.num_classes()).filter(|&k| bank.present[k]).collect();
    let mut out = LabelMap::new(h, w, 0);
    let mut pix = vec![0.0f64; d];
    for p in 0..area {
        for (c, v) in pix.iter_mut().enumerate() {
            *v = features[c * area + p] as f64;
        }
        let mut best = present[0];
        let mut best_d = f64::INFINITY;
        for &k in &present {
            let dist: f64 = bank
                .row(k)
                .iter()
                .zip(&pix)
                .map(|(&r, &f)| (f - r as f64).powi(2))
                .sum();
            if dist < best_d {
                best_d = dist;
                best = k;
            }
        }
        out.data[p] = best as u8;
    }
    Ok(out)
}

/// `ρ ← δ(δρ + (1−δ)ρ′_s) + (1−δ)ρ′_t` per class. A class missing from one
/// batch term keeps only the other (`ρ ← δρ + (1−δ)ρ′`); a class missing
/// from both is left alone. A class absent from the bank is seeded with the
/// source mean (or the target mean if only that exists).
pub fn ema_update_centroids(bank: &mut CentroidBank, source: &ClassMeans, target: &ClassMeans, delta: f64) {
    for k in 0..bank.num_classes() {
        let s = source.mean(k);
        let t = target.mean(k);
        if !bank.present[k] {
            if let Some(init) = s.as_ref().or(t.as_ref()) {
                bank.set_row(k, init);
            }
            continue;
        }
        let rho: Vec<f64> = bank.row(k).iter().map(|&v| v as f64).collect();
        let next: Vec<f64> = match (s, t) {
            (Some(s), Some(t)) => (0..rho.len())
                .map(|i| delta * (delta * rho[i] + (1.0 - delta) * s[i]) + (1.0 - delta) * t[i])
                .collect(),
            (Some(m), None) | (None, Some(m)) => (0..rho.len())
                .map(|i| delta * rho[i] + (1.0 - delta) * m[i])
                .collect(),
            (None, None) => continue,
        };
        bank.set_row(k, &next);
    }
}
