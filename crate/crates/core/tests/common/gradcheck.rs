//! Finite-difference gradient checking on a tiny f64 network.

use diga::model::Architecture;
use diga::tensor::{Image, LabelMap};
use diga::warmup::{ce_grad, ce_loss, soft_ce, soft_ce_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const C: usize = 3;
const D: usize = 4;
pub const SIDE: usize = 8;
const STEP: f64 = 1e-4;
pub const IGNORE: u8 = 255;
const ALPHA: f64 = 0.5;

fn arch() -> Architecture {
    Architecture::new(C, D, 2, (SIDE, SIDE))
}

pub fn image(rng: &mut ChaCha8Rng) -> Image {
    let data = (0..3 * SIDE * SIDE).map(|_| rng.gen::<f32>()).collect();
    Image::from_data(SIDE, SIDE, data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng) -> LabelMap {
    let data = (0..SIDE * SIDE)
        .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..C as u8) })
        .collect();
    LabelMap::from_data(SIDE, SIDE, data).unwrap()
}

pub struct Case {
    pub arch: Architecture,
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    pub x: Image,
    pub x_aug: Image,
    pub y: LabelMap,
}

pub fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = arch();
    Case {
        student: arch.init_params(seed),
        teacher: arch.init_params(seed + 100),
        x: image(&mut rng),
        x_aug: image(&mut rng),
        y: labels(&mut rng),
        arch,
    }
}

impl Case {
    pub fn seg(&self, p: &[f64]) -> f64 {
        let probs = self.arch.forward(p, &self.x, false).unwrap().0.probs;
        ce_loss(&probs, &self.y, IGNORE).value
    }

    pub fn seg_grad(&self) -> Vec<f64> {
        let (out, cache) = self.arch.forward(&self.student, &self.x, true).unwrap();
        let mut dl = vec![0.0; out.logits.len()];
        ce_grad(&out.probs, &self.y, IGNORE, 1.0, &mut dl);
        let mut g = vec![0.0; self.student.len()];
        self.arch.backward(&self.student, &cache.unwrap(), &dl, &mut g);
        g
    }

    fn teacher_probs(&self) -> (diga::tensor::ProbMap<f64>, diga::tensor::ProbMap<f64>) {
        let t = |x: &Image| self.arch.forward(&self.teacher, x, false).unwrap().0.probs;
        (t(&self.x), t(&self.x_aug))
    }

    pub fn distil(&self, p: &[f64]) -> f64 {
        let (t_clean, t_aug) = self.teacher_probs();
        let s = |x: &Image| self.arch.forward(p, x, false).unwrap().0.probs;
        soft_ce(&t_clean, &s(&self.x_aug)).unwrap() + ALPHA * soft_ce(&t_aug, &s(&self.x)).unwrap()
    }

    pub fn distil_grad(&self) -> Vec<f64> {
        let (t_clean, t_aug) = self.teacher_probs();
        let mut g = vec![0.0; self.student.len()];
        for (x, target, w) in [(&self.x_aug, &t_clean, 1.0), (&self.x, &t_aug, ALPHA)] {
            let (out, cache) = self.arch.forward(&self.student, x, true).unwrap();
            let mut dl = vec![0.0; out.logits.len()];
            soft_ce_grad(target, &out.probs, w, &mut dl);
            self.arch.backward(&self.student, &cache.unwrap(), &dl, &mut g);
        }
        g
    }
}

/// Fraction of parameters whose analytic and numeric derivatives agree to
/// relative error `1e-3`.
pub fn agreement(loss: impl Fn(&[f64]) -> f64, params: &[f64], analytic: &[f64]) -> f64 {
    let mut p = params.to_vec();
    let mut ok = 0;
    for i in 0..p.len() {
        let v = p[i];
        p[i] = v + STEP;
        let up = loss(&p);
        p[i] = v - STEP;
        let down = loss(&p);
        p[i] = v;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-8 || (a - numeric).abs() / scale <= 1e-3 {
            ok += 1;
        }
    }
    ok as f64 / p.len() as f64
}

/// A case whose labels are pseudo-labels on a fresh target image, with a
/// large ignored share.
pub fn target_case(seed: u64) -> Case {
    let mut c = case(seed + 10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    c.x = image(&mut rng);
    let data = (0..SIDE * SIDE)
        .map(|_| if rng.gen_bool(0.4) { IGNORE } else { rng.gen_range(0..C as u8) })
        .collect();
    c.y = LabelMap::from_data(SIDE, SIDE, data).unwrap();
    c
}

/// Worst agreement fraction over a few seeds for each loss:
/// `(source segmentation, distillation, target segmentation)`.
pub fn all_losses(seeds: u64) -> (f64, f64, f64) {
    let mut worst = (1.0f64, 1.0f64, 1.0f64);
    for seed in 0..seeds {
        let c = case(seed);
        worst.0 = worst.0.min(agreement(|p| c.seg(p), &c.student, &c.seg_grad()));
        worst.1 = worst.1.min(agreement(|p| c.distil(p), &c.student, &c.distil_grad()));
        let t = target_case(seed);
        worst.2 = worst.2.min(agreement(|p| t.seg(p), &t.student, &t.seg_grad()));
    }
    worst
}
