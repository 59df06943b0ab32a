//! Analytic gradients of the three training losses against central finite
//! differences (step 1e-4) on an 8x8 input, C=3, D=4 network in f64.

mod common;

use common::gradcheck::{agreement, case, target_case};

#[test]
fn source_segmentation_gradient() {
    for seed in 0..2 {
        let c = case(seed);
        let frac = agreement(|p| c.seg(p), &c.student, &c.seg_grad());
        assert!(frac >= 0.99, "seed {seed}: {frac}");
    }
}

#[test]
fn distillation_gradient() {
    for seed in 0..2 {
        let c = case(seed);
        let frac = agreement(|p| c.distil(p), &c.student, &c.distil_grad());
        assert!(frac >= 0.99, "seed {seed}: {frac}");
    }
}

#[test]
fn target_pseudo_label_gradient() {
    for seed in 0..2 {
        let c = target_case(seed);
        let frac = agreement(|p| c.seg(p), &c.student, &c.seg_grad());
        assert!(frac >= 0.99, "seed {seed}: {frac}");
    }
}
