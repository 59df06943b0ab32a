//! Student/teacher segmentation network.
//!
//! Encoder: four 3×3 convolutions of width D with ELU; the first
//! `log2(feature_stride)` of them have stride 2. Classifier: a 3×3
//! convolution with ELU, a 1×1 convolution to C logits, then bilinear
//! upsampling back to the input size and a per-pixel softmax.

pub mod checkpoint;
pub mod layers;

use rand_distr::{Distribution, Normal};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{softmax_channels, Image, ProbMap, Scalar};
use layers::{
    col2im, conv_backward, conv_forward, elu_backward_inplace, elu_inplace, im2col,
    resize_bilinear, resize_bilinear_backward, ConvShape,
};

pub const ENCODER_LAYERS: usize = 4;

/// Layer layout of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub feature_stride: usize,
    /// Expected input size; [`Architecture::forward_any`] accepts others.
    pub input_size: (usize, usize),
    pub layers: Vec<ConvShape>,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(
            cfg.num_classes,
            cfg.feature_dim,
            cfg.feature_stride,
            cfg.image_size(),
        )
    }

    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        feature_stride: usize,
        input_size: (usize, usize),
    ) -> Self {
        let downs = feature_stride.trailing_zeros() as usize;
        let d = feature_dim;
        let mut layers = Vec::with_capacity(ENCODER_LAYERS + 2);
        for i in 0..ENCODER_LAYERS {
            layers.push(ConvShape {
                cin: if i == 0 { 3 } else { d },
                cout: d,
                kernel: 3,
                stride: if i < downs { 2 } else { 1 },
            });
        }
        layers.push(ConvShape { cin: d, cout: d, kernel: 3, stride: 1 });
        layers.push(ConvShape { cin: d, cout: num_classes, kernel: 1, stride: 1 });
        Self {
            num_classes,
            feature_dim,
            feature_stride,
            input_size,
            layers,
        }
    }

    /// Closed form: `36·D² + 32·D + D·C + C`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvShape::param_len).sum()
    }

    /// Start offset of every layer in the flat parameter vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_len();
                o
            })
            .collect()
    }

    fn layer_params<'a, T>(&self, params: &'a [T], i: usize, offsets: &[usize]) -> &'a [T] {
        &params[offsets[i]..offsets[i] + self.layers[i].param_len()]
    }

    /// Deterministic He-normal initialization; biases start at zero.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut params = Vec::with_capacity(self.param_count());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let fan_in = (l.cin * l.kernel * l.kernel) as f64;
            let gain = if i == last { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            let mut rng = rng_for(seed, "init", &[i as u64]);
            params.extend((0..l.weight_len()).map(|_| T::from_f64(normal.sample(&mut rng))));
            params.extend(std::iter::repeat_n(T::ZERO, l.cout));
        }
        params
    }

    /// Forward pass for an input of the configured size.
    pub fn forward<T: Scalar>(
        &self,
        params: &[T],
        x: &Image,
        keep_cache: bool,
    ) -> Result<(ForwardOut<T>, Option<Cache<T>>)> {
        if (x.height, x.width) != self.input_size {
            return Err(Error::Shape(format!(
                "input {}x{}, network expects {}x{}",
                x.height, x.width, self.input_size.0, self.input_size.1
            )));
        }
        self.forward_any(params, x, keep_cache)
    }

    /// Forward pass for any input whose sides are multiples of the stride.
    pub fn forward_any<T: Scalar>(
        &self,
        params: &[T],
        x: &Image,
        keep_cache: bool,
    ) -> Result<(ForwardOut<T>, Option<Cache<T>>)> {
        self.check_size(x)?;
        let offsets = self.offsets();
        let (h0, w0) = (x.height, x.width);
        let mut act: Vec<T> = x.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        let (mut h, mut w) = (h0, w0);
        let mut cache = Cache {
            cols: Vec::new(),
            outs: Vec::new(),
            sizes: Vec::new(),
        };
        let mut features = Vec::new();
        let mut feat_size = (0, 0);
        let last = self.layers.len() - 1;
        for (i, shape) in self.layers.iter().enumerate() {
            let (oh, ow) = shape.out_size(h, w);
            let cols = im2col(&act, shape, h, w);
            let mut out = conv_forward(self.layer_params(params, i, &offsets), shape, &cols, oh * ow);
            if i != last {
                elu_inplace(&mut out);
            }
            if keep_cache {
                cache.cols.push(cols);
                cache.sizes.push((h, w));
                cache.outs.push(out.clone());
            }
            if i == ENCODER_LAYERS - 1 {
                features = out.clone();
                feat_size = (oh, ow);
            }
            act = out;
            h = oh;
            w = ow;
        }
        let c = self.num_classes;
        let logits = resize_bilinear(&act, c, h, w, h0, w0);
        let probs = ProbMap::from_data(c, h0, w0, softmax_channels(&logits, c, h0 * w0))?;
        if keep_cache {
            cache.sizes.push((h, w));
        }
        Ok((
            ForwardOut {
                features,
                feature_size: feat_size,
                logits,
                probs,
            },
            keep_cache.then_some(cache),
        ))
    }

    /// Encoder-only pass; returns `D×h×w` features.
    pub fn encode<T: Scalar>(&self, params: &[T], x: &Image) -> Result<(Vec<T>, (usize, usize))> {
        self.check_size(x)?;
        let offsets = self.offsets();
        let mut act: Vec<T> = x.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        let (mut h, mut w) = (x.height, x.width);
        for (i, shape) in self.layers.iter().take(ENCODER_LAYERS).enumerate() {
            let (oh, ow) = shape.out_size(h, w);
            let cols = im2col(&act, shape, h, w);
            let mut out = conv_forward(self.layer_params(params, i, &offsets), shape, &cols, oh * ow);
            elu_inplace(&mut out);
            act = out;
            h = oh;
            w = ow;
        }
        Ok((act, (h, w)))
    }

    fn check_size(&self, x: &Image) -> Result<()> {
        let s = self.feature_stride;
        if x.height == 0 || x.width == 0 || !x.height.is_multiple_of(s) || !x.width.is_multiple_of(s) {
            return Err(Error::Shape(format!(
                "input {}x{} is not a multiple of stride {s}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂logits` at input
    /// resolution.
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &Cache<T>, d_logits: &[T], grads: &mut [T]) {
        let offsets = self.offsets();
        let c = self.num_classes;
        let (h0, w0) = cache.sizes[0];
        let (lh, lw) = *cache.sizes.last().expect("cache populated");
        let mut grad = resize_bilinear_backward(d_logits, c, lh, lw, h0, w0);
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let shape = &self.layers[i];
            if i != last {
                elu_backward_inplace(&mut grad, &cache.outs[i]);
            }
            let (h, w) = cache.sizes[i];
            let (oh, ow) = shape.out_size(h, w);
            let lp = self.layer_params(params, i, &offsets);
            let g = &mut grads[offsets[i]..offsets[i] + shape.param_len()];
            let dcols = conv_backward(lp, g, shape, &cache.cols[i], &grad, oh * ow, i > 0);
            if let Some(dcols) = dcols {
                grad = col2im(&dcols, shape, h, w);
            }
        }
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut<T: Scalar = f32> {
    /// Encoder output, `D×h×w`.
    pub features: Vec<T>,
    pub feature_size: (usize, usize),
    /// `C×H×W` logits after upsampling.
    pub logits: Vec<T>,
    pub probs: ProbMap<T>,
}

/// Intermediate activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct Cache<T: Scalar> {
    cols: Vec<Vec<T>>,
    outs: Vec<Vec<T>>,
    /// Input size of every layer, then the final low-resolution logit size.
    sizes: Vec<(usize, usize)>,
}

/// Student and EMA teacher parameters of identical layout. Only the
/// student is ever touched by gradient steps.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<T: Scalar = f32> {
    pub arch: Architecture,
    pub student: Vec<T>,
    pub teacher: Vec<T>,
}

impl<T: Scalar> ModelPair<T> {
    /// Random student; the teacher starts as an exact copy.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let student = arch.init_params::<T>(seed);
        Self {
            arch,
            teacher: student.clone(),
            student,
        }
    }

    /// `teacher ← ξ·teacher + (1 − ξ)·student`, element-wise.
    pub fn ema_update(&mut self, xi: f64) {
        ema_blend(&mut self.teacher, &self.student, xi);
    }

    pub fn params(&self, which: Branch) -> &[T] {
        match which {
            Branch::Student => &self.student,
            Branch::Teacher => &self.teacher,
        }
    }
}

pub fn init_pair(cfg: &TrainConfig, seed: u64) -> ModelPair<f32> {
    ModelPair::init(Architecture::from_config(cfg), seed)
}

/// `dst ← ξ·dst + (1 − ξ)·src`, evaluated in `f64` per element.
pub fn ema_blend<T: Scalar>(dst: &mut [T], src: &[T], xi: f64) {
    for (t, &s) in dst.iter_mut().zip(src) {
        *t = T::from_f64(xi * t.to_f64() + (1.0 - xi) * s.to_f64());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

/// Stochastic gradient descent with optional momentum and weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f32>,
}

impl Sgd {
    pub fn from_config(cfg: &TrainConfig, param_count: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            momentum: cfg.sgd_momentum,
            weight_decay: cfg.weight_decay,
            velocity: if cfg.sgd_momentum > 0.0 { vec![0.0; param_count] } else { Vec::new() },
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        if self.lr == 0.0 {
            return;
        }
        let lr = self.lr as f32;
        let wd = self.weight_decay as f32;
        if self.momentum > 0.0 {
            let mu = self.momentum as f32;
            for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        } else {
            for (p, &g) in params.iter_mut().zip(grads) {
                *p -= lr * (g + wd * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{generate_scene, render_domain, DomainTag};
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    fn image(seed: u64) -> Image {
        let c = cfg();
        render_domain(&generate_scene(seed, &c), DomainTag::Source, &c).image
    }

    #[test]
    fn init_is_deterministic_with_copied_teacher() {
        let a = init_pair(&cfg(), 3);
        let b = init_pair(&cfg(), 3);
        assert_eq!(a, b);
        assert_eq!(a.student, a.teacher);
        assert_ne!(a.student, init_pair(&cfg(), 4).student);
    }

    #[test]
    fn param_count_closed_form() {
        for (c, d) in [(6, 16), (3, 4), (10, 8)] {
            let arch = Architecture::new(c, d, 4, (32, 32));
            assert_eq!(arch.param_count(), 36 * d * d + 32 * d + d * c + c);
            assert_eq!(arch.init_params::<f32>(0).len(), arch.param_count());
        }
        assert_eq!(Architecture::from_config(&cfg()).param_count(), 9830);
    }

    #[test]
    fn probs_are_normalized_and_sized() {
        let pair = init_pair(&cfg(), 1);
        let (out, _) = pair.arch.forward(&pair.student, &image(2), false).unwrap();
        assert_eq!((out.probs.height, out.probs.width), (64, 64));
        assert_eq!(out.feature_size, (16, 16));
        assert_eq!(out.features.len(), 16 * 16 * 16);
        for p in 0..out.probs.area() {
            let s: f32 = (0..6).map(|c| out.probs.at(c, p)).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_classifier_gives_uniform_probs() {
        let mut pair = init_pair(&cfg(), 1);
        let off = pair.arch.offsets();
        let last = pair.arch.layers.len() - 1;
        pair.student[off[last]..].fill(0.0);
        let (out, _) = pair.arch.forward(&pair.student, &image(5), false).unwrap();
        assert!(out.probs.data.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-6));
    }

    #[test]
    fn raising_one_logit_raises_its_prob() {
        let logits = vec![0.3f64, -0.2, 0.5, 0.1];
        let before = softmax_channels(&logits, 4, 1);
        let mut l2 = logits.clone();
        l2[1] *= -2.0; // -0.2 -> 0.4
        let after = softmax_channels(&l2, 4, 1);
        assert!(after[1] > before[1]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let pair = init_pair(&cfg(), 1);
        assert!(pair.arch.forward(&pair.student, &Image::new(32, 32), false).is_err());
        assert!(pair.arch.forward_any(&pair.student, &Image::new(30, 32), false).is_err());
        assert!(pair.arch.forward_any(&pair.student, &Image::new(32, 48), false).is_ok());
    }

    #[test]
    fn forward_is_deterministic() {
        let pair = init_pair(&cfg(), 1);
        let x = image(9);
        let (a, _) = pair.arch.forward(&pair.student, &x, false).unwrap();
        let (b, _) = pair.arch.forward(&pair.student, &x, true).unwrap();
        assert_eq!(a.probs, b.probs);
        let (f, _) = pair.arch.encode(&pair.student, &x).unwrap();
        assert_eq!(f, a.features);
    }

    #[test]
    fn ema_examples() {
        let arch = Architecture::new(3, 4, 4, (8, 8));
        let n = arch.param_count();
        let mut pair = ModelPair::<f64> {
            arch,
            student: vec![0.0; n],
            teacher: vec![1.0; n],
        };
        pair.ema_update(0.999);
        assert!(pair.teacher.iter().all(|&t| (t - 0.999).abs() < 1e-12));
        let before = pair.teacher.clone();
        pair.ema_update(1.0);
        assert_eq!(pair.teacher, before);
        pair.ema_update(0.0);
        assert_eq!(pair.teacher, pair.student);
    }

    #[test]
    fn ema_converges_geometrically() {
        let arch = Architecture::new(3, 4, 4, (8, 8));
        let mut pair = ModelPair::<f64>::init(arch.clone(), 1);
        pair.student = arch.init_params(2);
        let d0: Vec<f64> = pair.teacher.iter().zip(&pair.student).map(|(t, s)| (t - s).abs()).collect();
        let xi = 0.9;
        for n in 1..=50 {
            pair.ema_update(xi);
            for (i, (t, s)) in pair.teacher.iter().zip(&pair.student).enumerate() {
                assert!(((t - s).abs() - xi.powi(n) * d0[i]).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn ema_stays_in_convex_hull(t in prop::collection::vec(-5.0f32..5.0, 16),
                                    s in prop::collection::vec(-5.0f32..5.0, 16),
                                    xi in 0.0f64..=1.0) {
            let mut dst = t.clone();
            ema_blend(&mut dst, &s, xi);
            for i in 0..16 {
                let (lo, hi) = (t[i].min(s[i]), t[i].max(s[i]));
                prop_assert!(dst[i] >= lo && dst[i] <= hi);
            }
        }
    }

    #[test]
    fn sgd_with_zero_lr_is_noop() {
        let c = cfg();
        let mut opt = Sgd::from_config(&TrainConfig { learning_rate: 0.0, ..c }, 3);
        let mut p = vec![1.0f32, 2.0, 3.0];
        opt.step(&mut p, &[1.0, 1.0, 1.0]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
    }
}
