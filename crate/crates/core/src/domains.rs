//! Procedural two-domain segmentation benchmark.
//!
//! A [`Scene`] is a list of placed primitives, one shape kind per class.
//! The same scene renders into every domain: `source` uses a fixed class
//! palette with mild noise, `target` and `target2` apply different global
//! hue/gain/bias shifts plus structured texture. Label maps come from
//! rasterizing the scene and are identical across domains.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::augment::rotate_hue;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::{Image, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    HorizontalBar,
    Pole,
}

impl ShapeKind {
    /// Shape drawn for a (non-background) class id.
    pub fn for_class(class: u8) -> ShapeKind {
        match (class as usize + 4) % 5 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Circle,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::HorizontalBar,
            _ => ShapeKind::Pole,
        }
    }
}

/// A shape in normalized image coordinates (`[0, 1]` on both axes).
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub class: u8,
    pub kind: ShapeKind,
    pub center: (f32, f32),
    /// Half extents `(half_height, half_width)`; circles use the first as radius.
    pub half: (f32, f32),
}

impl Primitive {
    fn area(&self) -> f32 {
        self.half.0 * self.half.1
    }

    fn contains(&self, y: f32, x: f32) -> bool {
        let (cy, cx) = self.center;
        let (hh, hw) = self.half;
        match self.kind {
            ShapeKind::Rectangle | ShapeKind::HorizontalBar | ShapeKind::Pole => {
                (y - cy).abs() <= hh && (x - cx).abs() <= hw
            }
            ShapeKind::Circle => (y - cy).powi(2) + (x - cx).powi(2) <= hh * hh,
            ShapeKind::Triangle => {
                let top = cy - hh;
                let t = (y - top) / (2.0 * hh);
                (0.0..=1.0).contains(&t) && (x - cx).abs() <= hw * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Primitives in draw order; later ones cover earlier ones.
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl Scene {
    /// Rasterizes at `(height, width)`; uncovered pixels are class 0.
    pub fn rasterize(&self, height: usize, width: usize) -> LabelMap {
        let mut out = LabelMap::new(height, width, 0);
        for y in 0..height {
            let fy = (y as f32 + 0.5) / height as f32;
            for x in 0..width {
                let fx = (x as f32 + 0.5) / width as f32;
                for p in self.primitives.iter().rev() {
                    if p.contains(fy, fx) {
                        out.set(y, x, p.class);
                        break;
                    }
                }
            }
        }
        out
    }
}

fn sample_primitive(rng: &mut Rng, num_classes: usize) -> Primitive {
    // Skewed class frequencies: weight 0.8^(k-1) for class k >= 1.
    let weights: Vec<f64> = (1..num_classes).map(|k| 0.8f64.powi(k as i32 - 1)).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    let mut class = num_classes - 1;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            class = i + 1;
            break;
        }
        r -= w;
    }
    let class = class as u8;
    let kind = ShapeKind::for_class(class);
    let center = (rng.gen_range(0.12..0.88), rng.gen_range(0.12..0.88));
    let half = match kind {
        ShapeKind::Rectangle => (rng.gen_range(0.08..0.18), rng.gen_range(0.08..0.18)),
        ShapeKind::Circle => {
            let r = rng.gen_range(0.08..0.16);
            (r, r)
        }
        ShapeKind::Triangle => (rng.gen_range(0.09..0.16), rng.gen_range(0.1..0.18)),
        ShapeKind::HorizontalBar => (rng.gen_range(0.025..0.045), rng.gen_range(0.15..0.35)),
        ShapeKind::Pole => (rng.gen_range(0.15..0.3), rng.gen_range(0.016..0.026)),
    };
    Primitive {
        class,
        kind,
        center,
        half,
    }
}

/// Deterministic scene for `seed` with at least three distinct class ids
/// visible after rasterization.
pub fn generate_scene(seed: u64, cfg: &TrainConfig) -> Scene {
    let (h, w) = cfg.image_size();
    for attempt in 0u64.. {
        let mut rng = rng_for(seed, "scene", &[attempt]);
        let n = rng.gen_range(3..=6);
        let mut primitives: Vec<Primitive> =
            (0..n).map(|_| sample_primitive(&mut rng, cfg.num_classes)).collect();
        // Large shapes first so small ones stay visible.
        primitives.sort_by(|a, b| b.area().total_cmp(&a.area()));
        let scene = Scene { primitives, seed };
        if scene.rasterize(h, w).classes_present(cfg.ignore_id).len() >= 3 {
            return scene;
        }
    }
    unreachable!()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainTag {
    Source,
    Target,
    Target2,
}

impl DomainTag {
    pub fn dir_name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::Target2 => "target2",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    None,
    /// Oriented sinusoidal grating added to every channel.
    Grating { amplitude: f32 },
    /// Sum of signed Gaussian blobs added to every channel.
    Blotches { amplitude: f32 },
}

/// Photometric appearance of a domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    /// Hue rotation in turns.
    pub hue_turns: f32,
    /// Per-channel gain.
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub texture: Texture,
    /// Standard deviation of i.i.d. per-pixel noise.
    pub noise: f32,
}

impl DomainStyle {
    pub fn for_domain(tag: DomainTag) -> Self {
        match tag {
            DomainTag::Source => DomainStyle {
                hue_turns: 0.0,
                gain: [1.0; 3],
                bias: [0.0; 3],
                texture: Texture::None,
                noise: 0.02,
            },
            DomainTag::Target => DomainStyle {
                hue_turns: 0.08,
                gain: [0.5, 0.9, 1.2],
                bias: [0.2, 0.02, -0.1],
                texture: Texture::Grating { amplitude: 0.07 },
                noise: 0.03,
            },
            DomainTag::Target2 => DomainStyle {
                hue_turns: -0.05,
                gain: [1.1, 0.7, 0.8],
                bias: [-0.05, 0.1, 0.12],
                texture: Texture::Blotches { amplitude: 0.08 },
                noise: 0.03,
            },
        }
    }

    pub fn with_noise(mut self, noise: f32) -> Self {
        self.noise = noise;
        self
    }

    fn shade(&self, rgb: [f32; 3]) -> [f32; 3] {
        let r = rotate_hue(rgb, self.hue_turns);
        [
            self.gain[0] * r[0] + self.bias[0],
            self.gain[1] * r[1] + self.bias[1],
            self.gain[2] * r[2] + self.bias[2],
        ]
    }
}

/// Source palette, indexed by class id (wraps for more than six classes).
pub const PALETTE: [[f32; 3]; 6] = [
    [0.50, 0.50, 0.50],
    [0.80, 0.22, 0.20],
    [0.22, 0.72, 0.25],
    [0.20, 0.30, 0.80],
    [0.82, 0.78, 0.22],
    [0.74, 0.26, 0.72],
];

pub fn palette_color(class: u8) -> [f32; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// `None` when the label is withheld.
    pub label: Option<LabelMap>,
    pub domain: DomainTag,
    /// Pixels painted by long-tail injection, if any was applied.
    pub longtail_mask: Option<Vec<bool>>,
}

fn texture_field(tex: Texture, seed: u64, h: usize, w: usize) -> Vec<f32> {
    let mut rng = rng_for(seed, "texture", &[]);
    let mut out = vec![0.0f32; h * w];
    match tex {
        Texture::None => {}
        Texture::Grating { amplitude } => {
            let theta: f32 = rng.gen_range(0.0..std::f32::consts::PI);
            let period: f32 = rng.gen_range(5.0..9.0);
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (s, c) = theta.sin_cos();
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f32 * c + y as f32 * s) / period;
                    out[y * w + x] = amplitude * (std::f32::consts::TAU * u + phase).sin();
                }
            }
        }
        Texture::Blotches { amplitude } => {
            for _ in 0..6 {
                let cy: f32 = rng.gen_range(0.0..h as f32);
                let cx: f32 = rng.gen_range(0.0..w as f32);
                let sigma: f32 = rng.gen_range(3.0..8.0) * h as f32 / 64.0;
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        out[y * w + x] += sign * amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
            }
        }
    }
    out
}

/// Renders a scene with an explicit style.
pub fn render_with_style(
    scene: &Scene,
    style: &DomainStyle,
    tag: DomainTag,
    cfg: &TrainConfig,
) -> Sample {
    let (h, w) = cfg.image_size();
    let label = scene.rasterize(h, w);
    let domain_seed = derive_seed(scene.seed, tag.dir_name(), &[]);
    let texture = texture_field(style.texture, domain_seed, h, w);
    let mut rng = rng_for(domain_seed, "noise", &[]);
    let normal = Normal::new(0.0f32, style.noise.max(0.0)).expect("finite noise scale");
    let mut image = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let base = style.shade(palette_color(label.get(y, x)));
            let t = texture[y * w + x];
            for (c, b) in base.iter().enumerate() {
                let n = if style.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                image.set(c, y, x, (b + t + n).clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image,
        label: Some(label),
        domain: tag,
        longtail_mask: None,
    }
}

pub fn render_domain(scene: &Scene, tag: DomainTag, cfg: &TrainConfig) -> Sample {
    render_with_style(scene, &DomainStyle::for_domain(tag), tag, cfg)
}

/// Image offset used for long-tail pixels; well below the noise-free
/// contrast between any two palette colours.
pub const LONGTAIL_CONTRAST: f32 = 0.03;

/// Paints thin one-pixel lines of `cfg.longtail_class` into the label map
/// while altering the image by only [`LONGTAIL_CONTRAST`] at those pixels.
/// Applied with probability `cfg.longtail_rate`; total painted pixels are
/// capped at 1% of the image area.
pub fn inject_longtail_labels(sample: &Sample, seed: u64, cfg: &TrainConfig) -> Sample {
    let mut out = sample.clone();
    if cfg.longtail_rate <= 0.0 {
        return out;
    }
    let Some(label) = out.label.as_mut() else {
        return out;
    };
    let mut rng = rng_for(seed, "longtail", &[]);
    if rng.gen::<f64>() >= cfg.longtail_rate {
        return out;
    }
    let (h, w) = (label.height, label.width);
    let cap = h * w / 100;
    let mut mask = vec![false; h * w];
    let mut painted = 0;
    let lines = rng.gen_range(1..=3);
    'lines: for _ in 0..lines {
        let (dy, dx): (isize, isize) = match rng.gen_range(0..4) {
            0 => (0, 1),
            1 => (1, 0),
            2 => (1, 1),
            _ => (1, -1),
        };
        let len = rng.gen_range(6..=16);
        let mut y = rng.gen_range(0..h) as isize;
        let mut x = rng.gen_range(0..w) as isize;
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for _ in 0..len {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                break;
            }
            let (yu, xu) = (y as usize, x as usize);
            if !mask[yu * w + xu] {
                if painted >= cap {
                    break 'lines;
                }
                mask[yu * w + xu] = true;
                painted += 1;
                label.set(yu, xu, cfg.longtail_class);
                for c in 0..3 {
                    let v = out.image.get(c, yu, xu) + sign * LONGTAIL_CONTRAST;
                    out.image.set(c, yu, xu, v.clamp(0.0, 1.0));
                }
            }
            y += dy;
            x += dx;
        }
    }
    out.longtail_mask = Some(mask);
    out
}

/// In-memory benchmark splits. Images are quantized to 8-bit levels so they
/// equal what a write/load round trip produces.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub source: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub target_val: Vec<Sample>,
    pub target2_val: Vec<Sample>,
}

fn make_split(
    cfg: &TrainConfig,
    master: u64,
    split: &str,
    n: usize,
    tag: DomainTag,
    longtail: bool,
) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let scene = generate_scene(derive_seed(master, split, &[i as u64]), cfg);
            let mut s = render_domain(&scene, tag, cfg);
            if longtail {
                s = inject_longtail_labels(&s, derive_seed(master, "longtail", &[i as u64]), cfg);
            }
            s.image.quantize_u8();
            s
        })
        .collect()
}

impl Benchmark {
    pub fn generate(cfg: &TrainConfig, master_seed: u64) -> Self {
        Benchmark {
            source: make_split(cfg, master_seed, "source", cfg.n_source, DomainTag::Source, true),
            target_train: make_split(
                cfg,
                master_seed,
                "target_train",
                cfg.n_target_train,
                DomainTag::Target,
                false,
            ),
            target_val: make_split(
                cfg,
                master_seed,
                "target_val",
                cfg.n_target_val,
                DomainTag::Target,
                false,
            ),
            target2_val: make_split(
                cfg,
                master_seed,
                "target2_val",
                cfg.n_target2_val,
                DomainTag::Target2,
                false,
            ),
        }
    }

    pub fn train_data(&self) -> TrainData {
        TrainData {
            source: self
                .source
                .iter()
                .map(|s| (s.image.clone(), s.label.clone().expect("source is labelled")))
                .collect(),
            target: self.target_train.iter().map(|s| s.image.clone()).collect(),
        }
    }

    pub fn eval_data(&self) -> EvalData {
        let pairs = |v: &[Sample]| {
            v.iter()
                .map(|s| (s.image.clone(), s.label.clone().expect("labelled split")))
                .collect()
        };
        EvalData {
            target_train_labels: self
                .target_train
                .iter()
                .map(|s| s.label.clone().expect("target labels generated"))
                .collect(),
            target_val: pairs(&self.target_val),
            target2_val: pairs(&self.target2_val),
        }
    }
}

/// Everything the training code paths may read: labelled source data and
/// unlabelled target-train images.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<(Image, LabelMap)>,
    pub target: Vec<Image>,
}

/// Ground truth used only for evaluation and pseudo-label quality logging.
#[derive(Clone, Debug, Default)]
pub struct EvalData {
    /// Withheld labels of the target-train images, index-aligned with
    /// [`TrainData::target`].
    pub target_train_labels: Vec<LabelMap>,
    pub target_val: Vec<(Image, LabelMap)>,
    pub target2_val: Vec<(Image, LabelMap)>,
}

pub const SPLITS: [(&str, DomainTag); 4] = [
    ("source", DomainTag::Source),
    ("target_train", DomainTag::Target),
    ("target_val", DomainTag::Target),
    ("target2_val", DomainTag::Target2),
];

fn split_domain(split: &str) -> Option<DomainTag> {
    SPLITS.iter().find(|(s, _)| *s == split).map(|(_, d)| *d)
}

fn split_prefix(split: &str) -> &'static str {
    match split {
        "source" => "s",
        "target_train" => "t",
        _ => "v",
    }
}

/// On-disk dataset layout: `root/{source,target,target2}/{images,labels}/<id>.png`
/// plus `root/index.txt` with one `split id` pair per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetIndex {
    pub fn image_path(&self, split: &str, id: &str) -> PathBuf {
        let dom = split_domain(split).map(DomainTag::dir_name).unwrap_or("unknown");
        self.root.join(dom).join("images").join(format!("{id}.png"))
    }

    pub fn label_path(&self, split: &str, id: &str) -> PathBuf {
        let dom = split_domain(split).map(DomainTag::dir_name).unwrap_or("unknown");
        self.root.join(dom).join("labels").join(format!("{id}.png"))
    }

    pub fn ids(&self, split: &str) -> &[String] {
        self.splits.get(split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn read_image(&self, split: &str, id: &str) -> Result<Image> {
        read_png_rgb(&self.image_path(split, id))
    }

    fn read_label(&self, split: &str, id: &str, cfg: &TrainConfig) -> Result<LabelMap> {
        read_png_label(&self.label_path(split, id), cfg)
    }

    /// Source images and labels plus target-train images. Target labels are
    /// never read here.
    pub fn load_train_data(&self, cfg: &TrainConfig) -> Result<TrainData> {
        let source = self
            .ids("source")
            .iter()
            .map(|id| Ok((self.read_image("source", id)?, self.read_label("source", id, cfg)?)))
            .collect::<Result<Vec<_>>>()?;
        let target = self
            .ids("target_train")
            .iter()
            .map(|id| self.read_image("target_train", id))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainData { source, target })
    }

    /// Ground truth for evaluation-only paths.
    pub fn load_eval_data(&self, cfg: &TrainConfig) -> Result<EvalData> {
        let pairs = |split: &str| {
            self.ids(split)
                .iter()
                .map(|id| Ok((self.read_image(split, id)?, self.read_label(split, id, cfg)?)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(EvalData {
            target_train_labels: self
                .ids("target_train")
                .iter()
                .map(|id| self.read_label("target_train", id, cfg))
                .collect::<Result<Vec<_>>>()?,
            target_val: pairs("target_val")?,
            target2_val: pairs("target2_val")?,
        })
    }
}

fn encode_png_rgb(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = (img.height, img.width);
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

fn encode_png_label(label: &LabelMap) -> Result<Vec<u8>> {
    let buf = image::GrayImage::from_raw(label.width as u32, label.height as u32, label.data.clone())
        .expect("buffer sized");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_png_rgb(img)?)
}

pub fn write_png_label(path: &Path, label: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_png_label(label)?)
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
        }
    }
    Ok(img)
}

pub fn read_png_label(path: &Path, cfg: &TrainConfig) -> Result<LabelMap> {
    let dynimg = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
    let image::DynamicImage::ImageLuma8(gray) = dynimg else {
        return Err(Error::load(path, "label map must be 8-bit single channel"));
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.into_raw();
    if let Some(bad) = data
        .iter()
        .find(|&&v| v as usize >= cfg.num_classes && v != cfg.ignore_id)
    {
        return Err(Error::load(path, format!("label id {bad} out of range")));
    }
    LabelMap::from_data(h, w, data)
}

/// Writes every split of `bench` under `root` and returns its index.
pub fn write_dataset(bench: &Benchmark, root: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        splits: BTreeMap::new(),
    };
    let mut lines = String::new();
    for (split, samples) in [
        ("source", &bench.source),
        ("target_train", &bench.target_train),
        ("target_val", &bench.target_val),
        ("target2_val", &bench.target2_val),
    ] {
        let mut ids = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let id = format!("{}{i:06}", split_prefix(split));
            write_png_rgb(&index.image_path(split, &id), &s.image)?;
            if let Some(label) = &s.label {
                write_png_label(&index.label_path(split, &id), label)?;
            }
            lines.push_str(&format!("{split} {id}\n"));
            ids.push(id);
        }
        index.splits.insert(split.to_string(), ids);
    }
    write_atomic(&root.join("index.txt"), lines.as_bytes())?;
    Ok(index)
}

/// Parses `root/index.txt` and checks that every listed sample resolves to
/// readable files with in-range label ids.
pub fn load_dataset(root: &Path, cfg: &TrainConfig) -> Result<DatasetIndex> {
    let index_path = root.join("index.txt");
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(split), Some(id), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::load(
                &index_path,
                format!("line {}: expected `split id`", lineno + 1),
            ));
        };
        if split_domain(split).is_none() {
            return Err(Error::load(
                &index_path,
                format!("line {}: unknown split `{split}`", lineno + 1),
            ));
        }
        splits.entry(split.to_string()).or_default().push(id.to_string());
    }
    let index = DatasetIndex {
        root: root.to_path_buf(),
        splits,
    };
    for (split, ids) in &index.splits {
        for id in ids {
            let img = index.image_path(split, id);
            if !img.is_file() {
                return Err(Error::load(img, "missing image file"));
            }
            let lab = index.label_path(split, id);
            if !lab.is_file() {
                return Err(Error::load(lab, "missing label file"));
            }
            read_png_label(&lab, cfg)?;
        }
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn scene_is_deterministic_and_seed_sensitive() {
        let c = cfg();
        assert_eq!(generate_scene(7, &c), generate_scene(7, &c));
        assert_ne!(generate_scene(7, &c).primitives, generate_scene(8, &c).primitives);
    }

    #[test]
    fn scenes_have_three_classes() {
        let c = cfg();
        for s in 0..50 {
            let scene = generate_scene(s, &c);
            assert!(!scene.primitives.is_empty());
            let lab = scene.rasterize(64, 64);
            assert!(lab.classes_present(255).len() >= 3);
            assert!(lab.data.iter().all(|&v| (v as usize) < c.num_classes));
        }
    }

    #[test]
    fn every_class_appears_in_five_percent_of_scenes() {
        let c = cfg();
        let mut counts = vec![0usize; c.num_classes];
        for s in 0..1000 {
            for k in generate_scene(s, &c).rasterize(64, 64).classes_present(255) {
                counts[k as usize] += 1;
            }
        }
        for (k, n) in counts.iter().enumerate() {
            assert!(*n >= 50, "class {k} appears in only {n} of 1000 scenes");
        }
    }

    #[test]
    fn domains_share_labels_but_not_pixels() {
        let c = cfg();
        let scene = generate_scene(3, &c);
        let s = render_domain(&scene, DomainTag::Source, &c);
        let t = render_domain(&scene, DomainTag::Target, &c);
        assert_eq!(s.label, t.label);
        assert_ne!(s.image, t.image);
        assert_eq!(s.label.as_ref().unwrap(), &scene.rasterize(64, 64));
    }

    #[test]
    fn noise_free_source_render_is_palette_exact() {
        let c = cfg();
        let scene = generate_scene(11, &c);
        let style = DomainStyle::for_domain(DomainTag::Source).with_noise(0.0);
        let s = render_with_style(&scene, &style, DomainTag::Source, &c);
        let lab = s.label.unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(s.image.pixel(y, x), palette_color(lab.get(y, x)));
            }
        }
    }

    #[test]
    fn zero_rate_injection_is_identity() {
        let mut c = cfg();
        c.longtail_rate = 0.0;
        let s = render_domain(&generate_scene(1, &c), DomainTag::Source, &c);
        assert_eq!(inject_longtail_labels(&s, 5, &c), s);
    }

    #[test]
    fn injection_is_capped_and_faint() {
        let mut c = cfg();
        c.longtail_rate = 1.0;
        let mut max_contrast = 0.0f32;
        for seed in 0..100 {
            let s = render_domain(&generate_scene(seed, &c), DomainTag::Source, &c);
            let inj = inject_longtail_labels(&s, seed + 1000, &c);
            let mask = inj.longtail_mask.as_ref().unwrap();
            let n = mask.iter().filter(|&&m| m).count();
            assert!(n > 0 && n <= 64 * 64 / 100);
            let lab = inj.label.as_ref().unwrap();
            for (p, &m) in mask.iter().enumerate() {
                let (y, x) = (p / 64, p % 64);
                if m {
                    assert_eq!(lab.get(y, x), c.longtail_class);
                    for ch in 0..3 {
                        let d = (inj.image.get(ch, y, x) - s.image.get(ch, y, x)).abs();
                        max_contrast = max_contrast.max(d);
                    }
                } else {
                    assert_eq!(inj.image.pixel(y, x), s.image.pixel(y, x));
                }
            }
        }
        assert!(max_contrast < 0.05, "{max_contrast}");
    }

    #[test]
    fn target_mean_colour_is_shifted() {
        let c = cfg();
        let style = DomainStyle::for_domain(DomainTag::Target);
        let (mut ds, mut dt) = ([0.0f64; 3], [0.0f64; 3]);
        let (mut noise_free_s, mut noise_free_t) = ([0.0f64; 3], [0.0f64; 3]);
        for seed in 0..100 {
            let scene = generate_scene(seed, &c);
            let s = render_domain(&scene, DomainTag::Source, &c).image.channel_means();
            let t = render_domain(&scene, DomainTag::Target, &c).image.channel_means();
            let s0 = render_with_style(&scene, &DomainStyle::for_domain(DomainTag::Source).with_noise(0.0), DomainTag::Source, &c)
                .image
                .channel_means();
            let t0 = render_with_style(&scene, &style.with_noise(0.0), DomainTag::Target, &c)
                .image
                .channel_means();
            for ch in 0..3 {
                ds[ch] += s[ch] / 100.0;
                dt[ch] += t[ch] / 100.0;
                noise_free_s[ch] += s0[ch] / 100.0;
                noise_free_t[ch] += t0[ch] / 100.0;
            }
        }
        // The measured shift matches the configured (noise-free) shift up to
        // noise and clamping.
        for ch in 0..3 {
            let measured = dt[ch] - ds[ch];
            let configured = noise_free_t[ch] - noise_free_s[ch];
            assert!((measured - configured).abs() < 0.01, "channel {ch}");
        }
        // Foreground colours move visibly under the target style.
        for rgb in &PALETTE[1..] {
            let t = style.shade(*rgb);
            let shift = (0..3).map(|c| (t[c] - rgb[c]).abs()).fold(0.0, f32::max);
            assert!(shift > 0.1, "{rgb:?}");
        }
    }
}
