//! Randomised gradient-check suites, one per op and per network block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{grad_check_many, GradCheckOptions, GradCheckReport};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{AsppBlock, CamBlock, Init, ModelConfig, Module, MsffmBlock, ResidualBlock, SegModel, Variant};
use crate::tensor::{Conv2dOptions, Parameter, Tensor};

pub const OP_SUITES: &[&str] = &[
    "matmul",
    "softmax_rows",
    "conv2d",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "sum",
    "reshape",
    "transpose2d",
    "concat_channels",
    "bilinear_upsample",
    "cross_entropy",
];

pub const BLOCK_SUITES: &[&str] = &["residual", "cam", "aspp", "msffm", "model"];

pub fn suite_names() -> impl Iterator<Item = &'static str> {
    OP_SUITES.iter().chain(BLOCK_SUITES).copied()
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub failed_trials: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tol: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0 && self.checked > 0
    }
}

/// Runs `trials` randomised checks of suite `name`. Trial `t` is seeded by
/// `(seed, name, t)`, so reports are reproducible.
pub fn run_suite(name: &str, trials: usize, tol: f64, seed: u64) -> Result<SuiteReport> {
    if !suite_names().any(|n| n == name) {
        let all: Vec<_> = suite_names().collect();
        return Err(Error::Argument(format!("unknown gradient suite {name:?}; expected one of {}", all.join(", "))));
    }
    let mut report = SuiteReport {
        name: name.to_string(),
        trials,
        failed_trials: 0,
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        tol,
    };
    let salt = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17) ^ (t as u64).wrapping_mul(0x9e37_79b9));
        let r = run_trial(name, &mut rng, tol)?;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        report.checked += r.checked;
        report.skipped_kinks += r.skipped_kinks;
        if !r.passed() {
            report.failed_trials += 1;
        }
    }
    Ok(report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::leaf(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Tensor whose extents are drawn uniformly from `1..=hi` per axis.
fn rand_tensor_in(rng: &mut ChaCha8Rng, his: &[usize], scale: f64) -> Tensor {
    let shape = his.iter().map(|&hi| rng.random_range(1..=hi)).collect();
    rand_tensor(rng, shape, scale)
}

fn randomize(rng: &mut ChaCha8Rng, params: &[Parameter], std: f64) {
    let dist = Normal::new(0.0, std).unwrap();
    for p in params {
        p.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
    }
}

fn tensors(params: &[Parameter]) -> Vec<Tensor> {
    params.iter().map(|p| p.tensor().clone()).collect()
}

fn run_trial(name: &str, rng: &mut ChaCha8Rng, tol: f64) -> Result<GradCheckReport> {
    let mut opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let dim = |rng: &mut ChaCha8Rng, hi: usize| rng.random_range(1..=hi);
    match name {
        "matmul" => {
            let (m, k, r) = (dim(rng, 5), dim(rng, 5), dim(rng, 5));
            let a = rand_tensor(rng, vec![m, k], 1.0);
            let b = rand_tensor(rng, vec![k, r], 1.0);
            grad_check_many(|| a.matmul(&b), &[a.clone(), b.clone()], &opts)
        }
        "softmax_rows" => {
            let x = rand_tensor_in(rng, &[5, 6], 3.0);
            grad_check_many(|| x.softmax_rows(), std::slice::from_ref(&x), &opts)
        }
        "conv2d" => {
            let (cin, cout) = (dim(rng, 3), dim(rng, 3));
            let k: usize = [1, 3][rng.random_range(0..2)];
            let dilation = [1, 2, 4][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let padding = if rng.random_bool(0.5) { dilation * (k - 1) / 2 } else { rng.random_range(0..=2) };
            let span = dilation * (k - 1) + 1;
            let lo = span.saturating_sub(2 * padding).max(1);
            let (h, w) = (rng.random_range(lo..=lo + 5), rng.random_range(lo..=lo + 5));
            let x = rand_tensor(rng, vec![cin, h, w], 1.0);
            let wt = rand_tensor(rng, vec![cout, cin, k, k], 1.0);
            let b = rand_tensor(rng, vec![cout], 1.0);
            let o = Conv2dOptions { stride, dilation, padding };
            grad_check_many(|| x.conv2d(&wt, Some(&b), o), &[x.clone(), wt.clone(), b.clone()], &opts)
        }
        "global_avg_pool" => {
            let x = rand_tensor_in(rng, &[4, 5, 5], 1.0);
            grad_check_many(|| x.global_avg_pool(), std::slice::from_ref(&x), &opts)
        }
        "relu" => {
            let x = rand_tensor_in(rng, &[4, 6], 1.0);
            grad_check_many(|| Ok(x.relu()), std::slice::from_ref(&x), &opts)
        }
        "sigmoid" => {
            let x = rand_tensor_in(rng, &[4, 6], 4.0);
            grad_check_many(|| Ok(x.sigmoid()), std::slice::from_ref(&x), &opts)
        }
        "add" | "mul" => {
            let shape = vec![dim(rng, 3), dim(rng, 4), dim(rng, 4)];
            let other = match rng.random_range(0..3) {
                0 => shape.clone(),
                1 => vec![shape[0], 1, 1],
                _ => vec![1],
            };
            let a = rand_tensor(rng, shape, 1.0);
            let b = rand_tensor(rng, other, 1.0);
            if name == "add" {
                grad_check_many(|| a.add(&b), &[a.clone(), b.clone()], &opts)
            } else {
                grad_check_many(|| a.mul(&b), &[a.clone(), b.clone()], &opts)
            }
        }
        "scale" => {
            let x = rand_tensor_in(rng, &[4, 4], 1.0);
            let f = rng.random_range(-3.0..3.0);
            grad_check_many(|| x.scale(f), std::slice::from_ref(&x), &opts)
        }
        "sum" => {
            let x = rand_tensor_in(rng, &[4, 4, 3], 1.0);
            grad_check_many(|| x.sum(), std::slice::from_ref(&x), &opts)
        }
        "reshape" => {
            let (a, b, c) = (dim(rng, 4), dim(rng, 4), dim(rng, 4));
            let x = rand_tensor(rng, vec![a, b, c], 1.0);
            // the projection is position dependent, so a wrong permutation shows up
            grad_check_many(|| x.reshape(&[a, b * c])?.transpose2d()?.reshape(&[b * c * a]), std::slice::from_ref(&x), &opts)
        }
        "transpose2d" => {
            let x = rand_tensor_in(rng, &[5, 5], 1.0);
            grad_check_many(|| x.transpose2d(), std::slice::from_ref(&x), &opts)
        }
        "concat_channels" => {
            let (h, w) = (dim(rng, 4), dim(rng, 4));
            let count = rng.random_range(1..=3);
            let parts: Vec<Tensor> = (0..count)
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    rand_tensor(rng, vec![c, h, w], 1.0)
                })
                .collect();
            grad_check_many(|| Tensor::concat_channels(&parts), &parts, &opts)
        }
        "bilinear_upsample" => {
            let x = rand_tensor_in(rng, &[3, 4, 4], 1.0);
            let f = rng.random_range(1..=4);
            grad_check_many(|| x.bilinear_upsample(f), std::slice::from_ref(&x), &opts)
        }
        "cross_entropy" => {
            let (k, h, w) = (rng.random_range(2..=4), dim(rng, 4), dim(rng, 4));
            let x = rand_tensor(rng, vec![k, h, w], 3.0);
            let labels = (0..h * w).map(|_| rng.random_range(0..k) as u8).collect();
            let mask = Mask::new(h, w, labels)?;
            let weights: Option<Vec<f64>> = rng.random_bool(0.5).then(|| (0..k).map(|_| rng.random_range(0.2..3.0)).collect());
            grad_check_many(|| x.cross_entropy_loss(&mask, weights.as_deref()), std::slice::from_ref(&x), &opts)
        }
        "residual" => {
            let (cin, cout) = (dim(rng, 4), dim(rng, 4));
            let (stride, dilation) = [(1, 1), (2, 1), (1, 2), (1, 4)][rng.random_range(0..4)];
            let block = ResidualBlock::new(&Init::new(rng.random()), "res", cin, cout, stride, dilation);
            let params = block.parameters();
            randomize(rng, &params, 0.5);
            let s = rng.random_range(2..=4) * 2;
            let x = rand_tensor(rng, vec![cin, s, s], 1.0);
            let mut wrt = vec![x.clone()];
            wrt.extend(tensors(&params));
            grad_check_many(|| block.forward(&x), &wrt, &opts)
        }
        "cam" => {
            let c = dim(rng, 4);
            let block = CamBlock::new(&Init::new(rng.random()), "cam", c, rng.random_range(1..=c))?;
            let params = block.parameters();
            randomize(rng, &params, 0.8);
            let (h, w) = (dim(rng, 4), dim(rng, 4));
            let x = rand_tensor(rng, vec![c, h, w], 1.0);
            let mut wrt = vec![x.clone()];
            wrt.extend(tensors(&params));
            grad_check_many(|| block.forward(&x), &wrt, &opts)
        }
        "aspp" => {
            let (cin, width) = (dim(rng, 3), dim(rng, 3));
            let rates: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4)).collect();
            let block = AsppBlock::new(&Init::new(rng.random()), "aspp", cin, width, &rates);
            let params = block.parameters();
            randomize(rng, &params, 0.5);
            let (h, w) = (dim(rng, 4), dim(rng, 4));
            let x = rand_tensor(rng, vec![cin, h, w], 1.0);
            let mut wrt = vec![x.clone()];
            wrt.extend(tensors(&params));
            grad_check_many(|| block.forward(&x), &wrt, &opts)
        }
        "msffm" => {
            let c = dim(rng, 4);
            let block = MsffmBlock::new(&Init::new(rng.random()), "msffm", c, rng.random_range(1..=c))?;
            let params = block.parameters();
            randomize(rng, &params, 0.7);
            let (h, w) = (dim(rng, 4), dim(rng, 4));
            let low = rand_tensor(rng, vec![c, h, w], 1.0);
            let high = rand_tensor(rng, vec![c, h, w], 1.0);
            let mut wrt = vec![low.clone(), high.clone()];
            wrt.extend(tensors(&params));
            grad_check_many(|| block.forward(&low, &high), &wrt, &opts)
        }
        "model" => {
            let widths = [dim(rng, 4), dim(rng, 4), dim(rng, 4), rng.random_range(2..=4), rng.random_range(2..=4)];
            let cfg = ModelConfig {
                in_channels: [1, 3][rng.random_range(0..2)],
                num_classes: 2,
                stage_widths: widths,
                stage_blocks: [1, 1, 1, 1, 1],
                msffm_compression: rng.random_range(1..=2),
                cam_reduction: rng.random_range(1..=2),
                aspp_width: dim(rng, 4),
                ..ModelConfig::default()
            };
            let variant = Variant::ALL[rng.random_range(0..4)];
            let model = SegModel::new(&cfg, variant, rng.random())?;
            let params = model.parameters();
            randomize(rng, &params, 0.5);
            let x = rand_tensor(rng, vec![cfg.in_channels, 8, 8], 1.0);
            let mask = Mask::new(8, 8, (0..64).map(|_| rng.random_range(0..2)).collect())?;
            let mut wrt = vec![x.clone()];
            wrt.extend(tensors(&params));
            opts.max_elems_per_tensor = Some(12);
            grad_check_many(|| model.forward(&x)?.cross_entropy_loss(&mask, None), &wrt, &opts)
        }
        _ => unreachable!("suite names validated by run_suite"),
    }
}
