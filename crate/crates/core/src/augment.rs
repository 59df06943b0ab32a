//! Source-view augmentation: photometric jitter, the colour-statistics
//! source-to-target translator, class masks and cross-domain mixing.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Image, LabelMap};

/// Rotates a colour about the grey axis by `turns` of a full revolution.
pub fn rotate_hue(rgb: [f32; 3], turns: f32) -> [f32; 3] {
    if turns == 0.0 {
        return rgb;
    }
    let (s, c) = (turns * std::f32::consts::TAU).sin_cos();
    let k = (1.0 - c) / 3.0;
    let r3 = (1.0f32 / 3.0).sqrt() * s;
    let a = c + k;
    let b = k - r3;
    let d = k + r3;
    [
        a * rgb[0] + b * rgb[1] + d * rgb[2],
        d * rgb[0] + a * rgb[1] + b * rgb[2],
        b * rgb[0] + d * rgb[1] + a * rgb[2],
    ]
}

/// Amplitudes of the photometric augmentation menu.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Maximum hue rotation, in turns.
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
}

impl PhotometricParams {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            brightness: cfg.jitter_brightness,
            contrast: cfg.jitter_contrast,
            saturation: cfg.jitter_saturation,
            hue: cfg.jitter_hue,
            grayscale_prob: cfg.grayscale_prob,
            blur_prob: cfg.blur_prob,
        }
    }

    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
        }
    }
}

#[inline]
fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn map_pixels(img: &mut Image, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
    for y in 0..img.height {
        for x in 0..img.width {
            let v = f(img.pixel(y, x));
            img.set_pixel(y, x, v);
        }
    }
}

/// 3×3 binomial blur with replicated borders.
pub fn blur3(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(h, w);
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    for c in 0..3 {
        let src = img.channel(c);
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in K.iter().enumerate() {
                    let xx = (x + i).saturating_sub(1).min(w - 1);
                    acc += k * src[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in K.iter().enumerate() {
                    let yy = (y + i).saturating_sub(1).min(h - 1);
                    acc += k * tmp[yy * w + x];
                }
                dst[y * w + x] = acc;
            }
        }
    }
    out
}

/// Seeded colour jitter (brightness, contrast, saturation, hue), optional
/// grayscale and optional blur. Pixels never move; output is clamped to `[0, 1]`.
pub fn photometric_augment(x: &Image, seed: u64, params: &PhotometricParams) -> Image {
    let mut rng = rng_for(seed, "photometric", &[]);
    let mut factor = |amp: f64| -> f32 {
        if amp > 0.0 {
            rng.gen_range(1.0 - amp..=1.0 + amp).max(0.0) as f32
        } else {
            1.0
        }
    };
    let brightness = factor(params.brightness);
    let contrast = factor(params.contrast);
    let saturation = factor(params.saturation);
    let hue = if params.hue > 0.0 {
        rng.gen_range(-params.hue..=params.hue) as f32
    } else {
        0.0
    };
    let gray = rng.gen::<f64>() < params.grayscale_prob;
    let blur = rng.gen::<f64>() < params.blur_prob;

    let mut out = x.clone();
    if brightness != 1.0 {
        map_pixels(&mut out, |p| p.map(|v| v * brightness));
    }
    if contrast != 1.0 {
        let mean = {
            let mut acc = 0.0f64;
            for y in 0..out.height {
                for xx in 0..out.width {
                    acc += luma(out.pixel(y, xx)) as f64;
                }
            }
            (acc / out.area() as f64) as f32
        };
        map_pixels(&mut out, |p| p.map(|v| (v - mean) * contrast + mean));
    }
    if saturation != 1.0 {
        map_pixels(&mut out, |p| {
            let l = luma(p);
            p.map(|v| (v - l) * saturation + l)
        });
    }
    if hue != 0.0 {
        map_pixels(&mut out, |p| rotate_hue(p, hue));
    }
    if gray {
        map_pixels(&mut out, |p| [luma(p); 3]);
    }
    if blur {
        out = blur3(&out);
    }
    out.clamp_unit();
    out
}

/// Per-channel population statistics of the target-train images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Per-channel mean and (population) standard deviation over every pixel of
/// `images`.
pub fn estimate_target_stats(images: &[Image]) -> Result<TargetStats> {
    if images.is_empty() {
        return Err(Error::Invalid("target-train split is empty".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for c in 0..3 {
            for &v in img.channel(c) {
                let v = v as f64;
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += img.area();
    }
    let mut stats = TargetStats {
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    for c in 0..3 {
        let m = sum[c] / n as f64;
        stats.mean[c] = m;
        stats.std[c] = (sq[c] / n as f64 - m * m).max(0.0).sqrt();
        if !(stats.std[c] > 1e-9) {
            return Err(Error::validation(
                "target_stats",
                format!("channel {c} has zero standard deviation"),
            ));
        }
    }
    Ok(stats)
}

/// Colour-transfer translator: re-normalizes each channel of `x` from its
/// own mean/std to the target mean/std, then clamps. Constant channels map
/// to the target mean.
pub fn translate_s2t(x: &Image, stats: &TargetStats) -> Image {
    let mut out = x.clone();
    let own = x.channel_means();
    for c in 0..3 {
        let m = own[c];
        let var = x
            .channel(c)
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / x.area() as f64;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 { stats.std[c] / sd } else { 0.0 };
        for v in out.channel_mut(c) {
            *v = (((*v as f64 - m) * scale + stats.mean[c]) as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// Binary mask covering the pixels of a randomly chosen half of the
/// classes present in a label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Chosen class ids, ascending.
    pub chosen: Vec<u8>,
}

impl ClassMask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            mask: vec![value; height * width],
            chosen: Vec::new(),
        }
    }
}

/// Picks `max(1, floor(n / 2))` of the `n` classes present in `labels`
/// (ids sorted, then a seeded shuffle) and masks their pixels. Ignore
/// pixels are never masked.
pub fn build_class_mask(labels: &LabelMap, seed: u64, ignore_id: u8) -> Result<ClassMask> {
    let mut classes = labels.classes_present(ignore_id);
    if classes.is_empty() {
        return Err(Error::Invalid("label map has no valid pixels".into()));
    }
    let take = (classes.len() / 2).max(1);
    let mut rng = rng_for(seed, "class-mask", &[]);
    classes.shuffle(&mut rng);
    let mut chosen = classes[..take].to_vec();
    chosen.sort_unstable();
    let mut member = [false; 256];
    for &k in &chosen {
        member[k as usize] = true;
    }
    let mask = labels
        .data
        .iter()
        .map(|&v| v != ignore_id && member[v as usize])
        .collect();
    Ok(ClassMask {
        height: labels.height,
        width: labels.width,
        mask,
        chosen,
    })
}

/// `aug ⊙ M + translated ⊙ (1 − M)`, per pixel and channel.
pub fn crdomix(aug: &Image, translated: &Image, cm: &ClassMask) -> Result<Image> {
    if !aug.same_shape(translated) || aug.height != cm.height || aug.width != cm.width {
        return Err(Error::Shape(format!(
            "crdomix inputs {}x{}, {}x{}, mask {}x{}",
            aug.height, aug.width, translated.height, translated.width, cm.height, cm.width
        )));
    }
    let mut out = translated.clone();
    let area = aug.area();
    for c in 0..3 {
        let a = aug.channel(c);
        let dst = &mut out.data[c * area..(c + 1) * area];
        for (p, &m) in cm.mask.iter().enumerate() {
            if m {
                dst[p] = a[p];
            }
        }
    }
    Ok(out)
}
