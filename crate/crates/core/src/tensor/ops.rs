use super::{kink, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::mask::Mask;

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!(
            "{op} produced a non-finite value at element {i}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is `C x 1 x 1` against `a` of shape `C x H x W`.
    Channel { plane: usize },
    Scalar,
}

fn broadcast_kind(op: &str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.len() == 3 && b.len() == 3 && b[0] == a[0] && b[1] == 1 && b[2] == 1 {
        return Ok(Broadcast::Channel { plane: a[1] * a[2] });
    }
    dim_err(format!("{op}: cannot broadcast {b:?} against {a:?}"))
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Channel { plane } => i / plane,
            Broadcast::Scalar => 0,
        }
    }
}

/// Stride, dilation and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl Conv2dOptions {
    /// Padding that keeps the spatial extent at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (span <= padded).then(|| (padded - span) / self.stride + 1)
    }
}

/// Range of output positions `o` for which `o * stride + offset - padding`
/// lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    // o * stride + offset - padding <= len - 1
    let hi = if len + padding > offset {
        ((len - 1 + padding - offset) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Source taps of half-pixel-centre bilinear resampling along one axis.
#[derive(Clone, Debug)]
pub struct UpsampleTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl UpsampleTaps {
    pub fn new(input: usize, factor: usize) -> Self {
        let out = input * factor;
        let mut lo = Vec::with_capacity(out);
        let mut hi = Vec::with_capacity(out);
        let mut frac = Vec::with_capacity(out);
        for d in 0..out {
            let src = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

impl Tensor {
    /// `[M, K] x [K, R] -> [M, R]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, r) = (sa[0], sa[1], sb[1]);
        let out = {
            let (a, b) = (self.data(), other.data());
            let mut out = vec![0.0; m * r];
            for i in 0..m {
                let row = &mut out[i * r..(i + 1) * r];
                for p in 0..k {
                    let av = a[i * k + p];
                    for (o, &bv) in row.iter_mut().zip(&b[p * r..(p + 1) * r]) {
                        *o += av * bv;
                    }
                }
            }
            out
        };
        check_finite("matmul", &out)?;
        let (a_t, b_t) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, r],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (a, b) = (a_t.data(), b_t.data());
                let da = a_t.requires_grad().then(|| {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * r..(i + 1) * r];
                        for p in 0..k {
                            da[i * k + p] = grow.iter().zip(&b[p * r..(p + 1) * r]).map(|(x, y)| x * y).sum();
                        }
                    }
                    da
                });
                let db = b_t.requires_grad().then(|| {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * r];
                    for i in 0..m {
                        let grow = &g[i * r..(i + 1) * r];
                        for p in 0..k {
                            let av = a[i * k + p];
                            for (d, &gv) in db[p * r..(p + 1) * r].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Numerically stable softmax along the last axis of a 2-D tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return dim_err(format!("softmax_rows expects a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        check_finite("softmax_rows", &out)?;
        let y = out.clone();
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; m * n];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// 2-D cross-correlation of a `Cin x H x W` input with a
    /// `Cout x Cin x k x k` kernel, zero padded.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOptions) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 {
            return dim_err(format!("conv2d: input must be C x H x W, got {xs:?}"));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return dim_err(format!("conv2d: kernel must be Cout x Cin x k x k with odd k, got {ws:?}"));
        }
        if ws[1] != xs[0] {
            return dim_err(format!(
                "conv2d: kernel {ws:?} expects {} input channels, input is {xs:?}",
                ws[1]
            ));
        }
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::Argument(format!("conv2d: stride and dilation must be >= 1, got {opts:?}")));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return dim_err(format!("conv2d: bias {:?} does not match {} output channels", b.shape(), ws[0]));
            }
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let (Some(ho), Some(wo)) = (opts.output_extent(h, k), opts.output_extent(w, k)) else {
            return dim_err(format!(
                "conv2d: dilated kernel span {} exceeds padded input {}x{}",
                opts.dilation * (k - 1) + 1,
                h + 2 * opts.padding,
                w + 2 * opts.padding
            ));
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            ho,
            wo,
            opts,
        };
        let out = {
            let x = self.data();
            let wt = weight.data();
            let b = bias.map(|b| b.data());
            geom.forward(&x, &wt, b.as_deref().map(|v| v.as_slice()))
        };
        check_finite("conv2d", &out)?;
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        let (x_t, w_t, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        let bias_grad = bias.map(|b| b.requires_grad()).unwrap_or(false);
        Ok(Tensor::from_op(
            vec![cout, ho, wo],
            out,
            inputs,
            Box::new(move |g| {
                let x = x_t.data();
                let wt = w_t.data();
                let (dx, dw) = geom.backward(&x, &wt, g, x_t.requires_grad(), w_t.requires_grad());
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(bias_grad.then(|| {
                        g.chunks(ho * wo).map(|c| c.iter().sum()).collect()
                    }));
                }
                grads
            }),
        ))
    }

    /// Mean over the spatial extent: `C x H x W -> C x 1 x 1`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return dim_err(format!("global_avg_pool expects C x H x W, got {s:?}"));
        }
        let (c, plane) = (s[0], s[1] * s[2]);
        let inv = 1.0 / plane as f64;
        let out: Vec<f64> = self.data().chunks(plane).map(|ch| ch.iter().sum::<f64>() * inv).collect();
        check_finite("global_avg_pool", &out)?;
        Ok(Tensor::from_op(
            vec![c, 1, 1],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                vec![Some(dx)]
            }),
        ))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let x = self.to_vec();
        kink::observe(&x);
        let out = x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g.iter().zip(&x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Logistic function, clamped to the open interval (0, 1).
    pub fn sigmoid(&self) -> Tensor {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| {
                let s = if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                };
                s.clamp(f64::MIN_POSITIVE, HI)
            })
            .collect();
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g.iter().zip(&y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect();
                vec![Some(dx)]
            }),
        )
    }

    /// Elementwise sum. `other` may match `self`, be `C x 1 x 1` against a
    /// `C x H x W` self, or hold a single element.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let bc = broadcast_kind("add", self.shape(), other.shape())?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().enumerate().map(|(i, &av)| av + b[bc.index(i)]).collect()
        };
        check_finite("add", &out)?;
        let nb = other.numel();
        let (a_req, b_req) = (self.requires_grad(), other.requires_grad());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let db = b_req.then(|| {
                    if bc == Broadcast::Same {
                        return g.to_vec();
                    }
                    let mut db = vec![0.0; nb];
                    for (i, &gv) in g.iter().enumerate() {
                        db[bc.index(i)] += gv;
                    }
                    db
                });
                vec![a_req.then(|| g.to_vec()), db]
            }),
        ))
    }

    /// Elementwise product with the same broadcasting rules as [`Tensor::add`].
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let bc = broadcast_kind("mul", self.shape(), other.shape())?;
        let out: Vec<f64> = {
            let (a, b) = (self.data(), other.data());
            a.iter().enumerate().map(|(i, &av)| av * b[bc.index(i)]).collect()
        };
        check_finite("mul", &out)?;
        let nb = other.numel();
        let (a_t, b_t) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let (a, b) = (a_t.data(), b_t.data());
                let da = a_t
                    .requires_grad()
                    .then(|| g.iter().enumerate().map(|(i, &gv)| gv * b[bc.index(i)]).collect());
                let db = b_t.requires_grad().then(|| {
                    let mut db = vec![0.0; nb];
                    for (i, &gv) in g.iter().enumerate() {
                        db[bc.index(i)] += gv * a[i];
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|v| v * factor).collect();
        check_finite("scale", &out)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        ))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        check_finite("sum", &[total])?;
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    /// Same data, new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return dim_err(format!(
                "reshape: cannot view {:?} ({} elements) as {shape:?}",
                self.shape(),
                self.numel()
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return dim_err(format!("transpose2d expects a matrix, got {s:?}"));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose(&self.data(), m, n);
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose(g, n, m))]),
        ))
    }

    /// Concatenates `C_i x H x W` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Argument("concat_channels: nothing to concatenate".into()));
        };
        let fs = first.shape();
        if fs.len() != 3 {
            return dim_err(format!("concat_channels expects C x H x W parts, got {fs:?}"));
        }
        let (h, w) = (fs[1], fs[2]);
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return dim_err(format!("concat_channels: part {s:?} does not match spatial {h}x{w}"));
            }
            channels += s[0];
        }
        let mut out = Vec::with_capacity(channels * h * w);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let sizes: Vec<(usize, bool)> = parts.iter().map(|p| (p.numel(), p.requires_grad())).collect();
        Ok(Tensor::from_op(
            vec![channels, h, w],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut offset = 0;
                sizes
                    .iter()
                    .map(|&(n, req)| {
                        let slice = &g[offset..offset + n];
                        offset += n;
                        req.then(|| slice.to_vec())
                    })
                    .collect()
            }),
        ))
    }

    /// Bilinear upsampling of a `C x H x W` tensor by an integer factor
    /// using half-pixel centres (edge samples clamp to the border).
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Tensor> {
        if factor < 1 {
            return Err(Error::Argument(format!("upsample factor must be >= 1, got {factor}")));
        }
        let s = self.shape();
        if s.len() != 3 {
            return dim_err(format!("bilinear_upsample expects C x H x W, got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let ty = UpsampleTaps::new(h, factor);
        let tx = UpsampleTaps::new(w, factor);
        let mut out = vec![0.0; c * ho * wo];
        {
            let x = self.data();
            for ch in 0..c {
                let src = &x[ch * h * w..(ch + 1) * h * w];
                let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
                for oy in 0..ho {
                    let (y0, y1, ly) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                    for ox in 0..wo {
                        let (x0, x1, lx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                        let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                        dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
                    }
                }
            }
        }
        check_finite("bilinear_upsample", &out)?;
        Ok(Tensor::from_op(
            vec![c, ho, wo],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gs = &g[ch * ho * wo..(ch + 1) * ho * wo];
                    let d = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for oy in 0..ho {
                        let (y0, y1, ly) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                        for ox in 0..wo {
                            let (x0, x1, lx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                            let gv = gs[oy * wo + ox];
                            d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            d[y1 * w + x0] += gv * ly * (1.0 - lx);
                            d[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean per-pixel negative log-likelihood of `target` under the softmax
    /// of `K x H x W` logits. With class weights, each pixel's term is scaled
    /// by the weight of its true class (the mean is still over pixels).
    pub fn cross_entropy_loss(&self, target: &Mask, class_weights: Option<&[f64]>) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || s[0] < 2 {
            return dim_err(format!("cross_entropy_loss expects K x H x W logits with K >= 2, got {s:?}"));
        }
        let (k, h, w) = (s[0], s[1], s[2]);
        if target.height() != h || target.width() != w {
            return dim_err(format!(
                "cross_entropy_loss: target {}x{} does not match logits {h}x{w}",
                target.height(),
                target.width()
            ));
        }
        target.check_classes(k)?;
        if let Some(cw) = class_weights {
            if cw.len() != k {
                return dim_err(format!("cross_entropy_loss: {} class weights for {k} classes", cw.len()));
            }
        }
        let plane = h * w;
        let labels: Vec<usize> = target.data().iter().map(|&c| c as usize).collect();
        let weights: Vec<f64> = class_weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; k]);
        let mut probs = vec![0.0; k * plane];
        let mut total = 0.0;
        {
            let x = self.data();
            for p in 0..plane {
                let max = (0..k).map(|c| x[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (x[c * plane + p] - max).exp();
                    probs[c * plane + p] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[c * plane + p] /= z;
                }
                let t = labels[p];
                let log_p = x[t * plane + p] - max - z.ln();
                total -= weights[t] * log_p;
            }
        }
        let loss = total / plane as f64;
        check_finite("cross_entropy_loss", &[loss])?;
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / plane as f64;
                let mut dx = probs.clone();
                for p in 0..plane {
                    let t = labels[p];
                    dx[t * plane + p] -= 1.0;
                    let wt = weights[t] * scale;
                    for c in 0..k {
                        dx[c * plane + p] *= wt;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

fn transpose(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    opts: Conv2dOptions,
}

impl ConvGeom {
    fn tap_ranges(&self) -> Vec<((usize, usize), usize)> {
        // (valid output range, input offset) per kernel row / column
        let Conv2dOptions { stride, dilation, padding } = self.opts;
        (0..self.k)
            .map(|i| {
                let off = i * dilation;
                (valid_range(self.ho, self.h, stride, off, padding), off)
            })
            .collect()
    }

    fn tap_ranges_x(&self) -> Vec<((usize, usize), usize)> {
        let Conv2dOptions { stride, dilation, padding } = self.opts;
        (0..self.k)
            .map(|j| {
                let off = j * dilation;
                (valid_range(self.wo, self.w, stride, off, padding), off)
            })
            .collect()
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let ConvGeom { cin, h, w, cout, k, ho, wo, opts } = *self;
        let (s, p) = (opts.stride, opts.padding);
        let rows = self.tap_ranges();
        let cols = self.tap_ranges_x();
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            let dst = &mut out[o * ho * wo..(o + 1) * ho * wo];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..cin {
                let src = &x[c * h * w..(c + 1) * h * w];
                let kern = &wt[(o * cin + c) * k * k..(o * cin + c + 1) * k * k];
                for (i, &((y0, y1), oy)) in rows.iter().enumerate() {
                    for (j, &((x0, x1), ox)) in cols.iter().enumerate() {
                        let wv = kern[i * k + j];
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = y * s + oy - p;
                            let drow = &mut dst[y * wo + x0..y * wo + x1];
                            let base = iy * w + x0 * s + ox - p;
                            if s == 1 {
                                for (d, &v) in drow.iter_mut().zip(&src[base..base + (x1 - x0)]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (t, d) in drow.iter_mut().enumerate() {
                                    *d += wv * src[base + t * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(
        &self,
        x: &[f64],
        wt: &[f64],
        g: &[f64],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let ConvGeom { cin, h, w, cout, k, ho, wo, opts } = *self;
        let (s, p) = (opts.stride, opts.padding);
        let rows = self.tap_ranges();
        let cols = self.tap_ranges_x();
        let mut dx = want_dx.then(|| vec![0.0; cin * h * w]);
        let mut dw = want_dw.then(|| vec![0.0; cout * cin * k * k]);
        for o in 0..cout {
            let gsrc = &g[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..cin {
                let xin = &x[c * h * w..(c + 1) * h * w];
                let kidx = (o * cin + c) * k * k;
                for (i, &((y0, y1), oy)) in rows.iter().enumerate() {
                    for (j, &((x0, x1), ox)) in cols.iter().enumerate() {
                        if x0 >= x1 {
                            continue;
                        }
                        let wv = wt[kidx + i * k + j];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y * s + oy - p;
                            let grow = &gsrc[y * wo + x0..y * wo + x1];
                            let base = iy * w + x0 * s + ox - p;
                            if let Some(dx) = dx.as_mut() {
                                let dxc = &mut dx[c * h * w..(c + 1) * h * w];
                                if s == 1 {
                                    for (d, &gv) in dxc[base..base + (x1 - x0)].iter_mut().zip(grow) {
                                        *d += wv * gv;
                                    }
                                } else {
                                    for (t, &gv) in grow.iter().enumerate() {
                                        dxc[base + t * s] += wv * gv;
                                    }
                                }
                            }
                            if want_dw {
                                if s == 1 {
                                    acc += grow.iter().zip(&xin[base..base + (x1 - x0)]).map(|(a, b)| a * b).sum::<f64>();
                                } else {
                                    acc += grow.iter().enumerate().map(|(t, &gv)| gv * xin[base + t * s]).sum::<f64>();
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[kidx + i * k + j] += acc;
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}
