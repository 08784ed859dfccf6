//! Brute-force reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<f64>` with explicit index arithmetic
//! and never calls into the tensor ops it is used to check.

#![allow(dead_code)]

use pseg::nn::{CamBlock, MsffmBlock};
use pseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, scale))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * r];
    for i in 0..m {
        for j in 0..r {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i * k + t] * b[t * r + j];
            }
            out[i * r + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Plain `exp(x) / sum exp(x)` per row, no max shift.
pub fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let z: f64 = (0..n).map(|j| x[i * n + j].exp()).sum();
        for j in 0..n {
            out[i * n + j] = x[i * n + j].exp() / z;
        }
    }
    out
}

/// Direct convolution: for every output pixel, every input channel and
/// every tap, look up the padded input position.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let span = dilation * (k - 1) + 1;
    let ho = (h + 2 * padding - span) / stride + 1;
    let wo = (w + 2 * padding - span) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let xv = x[ci * h * w + iy as usize * w + ix as usize];
                            acc += xv * weight[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

pub fn global_avg_pool(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[(ch * h + y) * w + xx];
                }
            }
            s / (h * w) as f64
        })
        .collect()
}

/// Bilinear upsampling written as a tent filter: the source coordinate of
/// output sample `d` is `(d + 0.5) / f - 0.5` clamped to `[0, n - 1]`, and
/// input sample `i` contributes `max(0, 1 - |src - i|)`.
pub fn bilinear_upsample(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let src = |d: usize, n: usize| ((d as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let tent = |s: f64, i: usize| (1.0 - (s - i as f64).abs()).max(0.0);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (sy, sx) = (src(oy, h), src(ox, w));
                let mut acc = 0.0;
                for iy in 0..h {
                    for ix in 0..w {
                        acc += tent(sy, iy) * tent(sx, ix) * x[(ch * h + iy) * w + ix];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// Mean over pixels of `-w[t] * log softmax(x)[t]`.
pub fn cross_entropy(x: &[f64], k: usize, h: usize, w: usize, target: &[u8], weights: Option<&[f64]>) -> f64 {
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..plane {
        let t = target[p] as usize;
        let z: f64 = (0..k).map(|c| x[c * plane + p].exp()).sum();
        let log_p = (x[t * plane + p].exp() / z).ln();
        total += -weights.map_or(1.0, |ws| ws[t]) * log_p;
    }
    total / plane as f64
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn pointwise(x: &[f64], cin: usize, n: usize, weight: &[f64], bias: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; cout * n];
    for co in 0..cout {
        for p in 0..n {
            let mut acc = bias[co];
            for ci in 0..cin {
                acc += weight[co * cin + ci] * x[ci * n + p];
            }
            out[co * n + p] = acc;
        }
    }
    out
}

fn bias_of(conv: &pseg::nn::Conv) -> Vec<f64> {
    conv.bias.as_ref().map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; conv.out_channels()])
}

/// Scalar loop of pool -> reduce -> relu -> expand -> sigmoid -> multiply.
pub fn cam_forward(block: &CamBlock, x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hidden = block.reduce.out_channels();
    let (rw, rb) = (block.reduce.weight.to_vec(), bias_of(&block.reduce));
    let (ew, eb) = (block.expand.weight.to_vec(), bias_of(&block.expand));
    let pooled = global_avg_pool(x, c, h, w);
    let mut z = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = rb[j];
        for ch in 0..c {
            acc += rw[j * c + ch] * pooled[ch];
        }
        z[j] = acc.max(0.0);
    }
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let mut acc = eb[ch];
        for j in 0..hidden {
            acc += ew[ch * hidden + j] * z[j];
        }
        let s = sigmoid(acc);
        for p in 0..h * w {
            out[ch * h * w + p] = s * x[ch * h * w + p];
        }
    }
    out
}

/// Dense evaluation of the fusion block, one output element at a time:
///
/// ```text
/// s[j][i] = exp(P_i . Q_j) / sum_i' exp(P_i' . Q_j)
/// O[c][j] = alpha * sum_i s[j][i] V[c][i] + high[c][j]
/// ```
///
/// Returns `(O, s)`.
pub fn msffm_forward(block: &MsffmBlock, low: &[f64], high: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let n = h * w;
    let cc = block.compress_low.out_channels();
    let p = pointwise(low, c, n, &block.compress_low.weight.to_vec(), &bias_of(&block.compress_low), cc);
    let q = pointwise(high, c, n, &block.compress_high.weight.to_vec(), &bias_of(&block.compress_high), cc);
    let v = pointwise(low, c, n, &block.value_proj.weight.to_vec(), &bias_of(&block.value_proj), c);
    let alpha = block.alpha.to_vec()[0];
    let dot = |i: usize, j: usize| (0..cc).map(|t| p[t * n + i] * q[t * n + j]).sum::<f64>();
    let mut s = vec![0.0; n * n];
    for j in 0..n {
        let z: f64 = (0..n).map(|i| dot(i, j).exp()).sum();
        for i in 0..n {
            s[j * n + i] = dot(i, j).exp() / z;
        }
    }
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for j in 0..n {
            let l: f64 = (0..n).map(|i| s[j * n + i] * v[ch * n + i]).sum();
            out[ch * n + j] = alpha * l + high[ch * n + j];
        }
    }
    (out, s)
}

/// Per-pixel TP/FP/FN counting, then IoU and F per class; classes with an
/// empty union are skipped. Returns `(miou, mfsc)`.
pub fn scores(pred: &[u8], truth: &[u8], k: usize) -> (f64, f64) {
    let (mut ious, mut fs) = (Vec::new(), Vec::new());
    for c in 0..k as u8 {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        if tp + fp + fn_ > 0.0 {
            ious.push(tp / (tp + fp + fn_));
            fs.push(2.0 * tp / (2.0 * tp + fp + fn_));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&ious), mean(&fs))
}

/// Independent point-in-ellipse test at the pixel centre.
pub fn inside_ellipse(e: &pseg::data::Ellipse, y: usize, x: usize) -> bool {
    let (px, py) = (x as f64 + 0.5 - e.cx, y as f64 + 0.5 - e.cy);
    let (s, c) = e.theta.sin_cos();
    let u = px * c + py * s;
    let v = py * c - px * s;
    u * u / (e.a * e.a) + v * v / (e.b * e.b) <= 1.0
}

pub mod checks;
