//! Randomised comparisons of library ops against the oracles. Each check
//! runs `trials` independent instances and returns the largest absolute
//! deviation seen.

use pseg::nn::{CamBlock, Init, Module, MsffmBlock};
use pseg::tensor::Conv2dOptions;
use pseg::{Mask, Tensor};
use rand::Rng;

use super::*;

/// Runs `trials` instances from `seed`, returns the largest deviation.
pub type Check = fn(u64, usize) -> f64;

pub const ORACLE_CHECKS: &[(&str, Check)] = &[
    ("conv2d", conv2d_check),
    ("softmax_rows", softmax_check),
    ("matmul", matmul_check),
    ("global_avg_pool", gap_check),
    ("bilinear_upsample", upsample_check),
    ("cross_entropy", cross_entropy_check),
    ("msffm_forward", msffm_check),
    ("cam_forward", cam_check),
];

fn randomise(params: &[pseg::Parameter], rng: &mut ChaCha8Rng, scale: f64) {
    for p in params {
        p.set_data(&uniform(rng, p.numel(), scale)).unwrap();
    }
}

pub fn conv2d_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let dilation: usize = [1, 2, 4][t % 3];
        let k = [1, 3, 3, 5][r.random_range(0..4)];
        let stride = r.random_range(1..=2);
        let (cin, cout) = (r.random_range(1..=3), r.random_range(1..=3));
        let span = dilation * (k - 1) + 1;
        let padding = r.random_range(0..=span);
        let min = span.saturating_sub(2 * padding).max(1);
        let (h, w) = (r.random_range(min..=min + 6), r.random_range(min..=min + 6));
        let x = uniform(&mut r, cin * h * w, 1.0);
        let wt = uniform(&mut r, cout * cin * k * k, 1.0);
        let b = uniform(&mut r, cout, 1.0);
        let (expect, ho, wo) = super::conv2d(&x, (cin, h, w), &wt, cout, k, Some(&b), stride, dilation, padding);
        let got = Tensor::new(vec![cin, h, w], x)
            .conv2d(
                &Tensor::new(vec![cout, cin, k, k], wt),
                Some(&Tensor::new(vec![cout], b)),
                Conv2dOptions { stride, dilation, padding },
            )
            .unwrap();
        assert_eq!(got.shape(), &[cout, ho, wo]);
        worst = worst.max(max_abs_diff(&got.to_vec(), &expect));
    }
    worst
}

pub fn softmax_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (m, n) = (r.random_range(1..=8), r.random_range(1..=8));
        let x = uniform(&mut r, m * n, 5.0);
        let got = Tensor::new(vec![m, n], x.clone()).softmax_rows().unwrap();
        worst = worst.max(max_abs_diff(&got.to_vec(), &super::softmax_rows(&x, m, n)));
    }
    worst
}

pub fn matmul_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (m, k, n) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let a = uniform(&mut r, m * k, 2.0);
        let b = uniform(&mut r, k * n, 2.0);
        let got = Tensor::new(vec![m, k], a.clone()).matmul(&Tensor::new(vec![k, n], b.clone())).unwrap();
        worst = worst.max(max_abs_diff(&got.to_vec(), &super::matmul(&a, &b, m, k, n)));
    }
    worst
}

pub fn gap_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (c, h, w) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let x = uniform(&mut r, c * h * w, 3.0);
        let got = Tensor::new(vec![c, h, w], x.clone()).global_avg_pool().unwrap();
        assert_eq!(got.shape(), &[c, 1, 1]);
        worst = worst.max(max_abs_diff(&got.to_vec(), &super::global_avg_pool(&x, c, h, w)));
    }
    worst
}

pub fn upsample_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (c, h, w) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6));
        let f = [1, 2, 3, 4, 8][r.random_range(0..5)];
        let x = uniform(&mut r, c * h * w, 2.0);
        let got = Tensor::new(vec![c, h, w], x.clone()).bilinear_upsample(f).unwrap();
        worst = worst.max(max_abs_diff(&got.to_vec(), &super::bilinear_upsample(&x, c, h, w, f)));
    }
    worst
}

pub fn cross_entropy_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (k, h, w) = (r.random_range(2..=4), r.random_range(1..=8), r.random_range(1..=8));
        let x = uniform(&mut r, k * h * w, 4.0);
        let target: Vec<u8> = (0..h * w).map(|_| r.random_range(0..k as u8)).collect();
        let weights = (t % 2 == 1).then(|| uniform(&mut r, k, 1.0).iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>());
        let mask = Mask::new(h, w, target.clone()).unwrap();
        let got = Tensor::new(vec![k, h, w], x.clone()).cross_entropy_loss(&mask, weights.as_deref()).unwrap();
        let expect = super::cross_entropy(&x, k, h, w, &target, weights.as_deref());
        worst = worst.max((got.item() - expect).abs());
    }
    worst
}

pub fn msffm_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let compression = r.random_range(1..=2);
        let c = compression * r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let block = MsffmBlock::new(&Init::new(t as u64), "m", c, compression).unwrap();
        randomise(&block.parameters(), &mut r, 0.7);
        let low = uniform(&mut r, c * h * w, 1.0);
        let high = uniform(&mut r, c * h * w, 1.0);
        let (out, attention) = block
            .forward_with_attention(&Tensor::new(vec![c, h, w], low.clone()), &Tensor::new(vec![c, h, w], high.clone()))
            .unwrap();
        let (expect, s) = super::msffm_forward(&block, &low, &high, c, h, w);
        worst = worst.max(max_abs_diff(&out.to_vec(), &expect));
        worst = worst.max(max_abs_diff(&attention.tensor().to_vec(), &s));
    }
    worst
}

pub fn cam_check(seed: u64, trials: usize) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let reduction = r.random_range(1..=4);
        let c = reduction * r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let block = CamBlock::new(&Init::new(t as u64), "cam", c, reduction).unwrap();
        randomise(&block.parameters(), &mut r, 1.0);
        let x = uniform(&mut r, c * h * w, 2.0);
        let got = block.forward(&Tensor::new(vec![c, h, w], x.clone())).unwrap();
        worst = worst.max(max_abs_diff(&got.to_vec(), &super::cam_forward(&block, &x, c, h, w)));
    }
    worst
}
