//! Spatial-attention fusion of a low-level and a high-level feature map.
//!
//! Both maps (`C x H x W`, same extent) are compressed by 1x1 convs to
//! `C' = C / compression` channels and flattened to `P` (low) and `Q`
//! (high), each `C' x N` with `N = H * W`. The attention map
//!
//! ```text
//! s[j][i] = exp(P_i . Q_j) / sum_i' exp(P_i' . Q_j)
//! ```
//!
//! weighs source position `i` of the low map for output position `j`. Values
//! `V` come from a 1x1 projection of the low map, and the output is
//!
//! ```text
//! O_j = alpha * sum_i s[j][i] V_i + high_j
//! ```
//!
//! with the learnable scalar `alpha` starting at exactly zero, so a fresh
//! block passes `high` through untouched.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{Conv, Init, Module};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const DEFAULT_ATTENTION_CAP: usize = 4096;

static MAPS_CHECKED: AtomicU64 = AtomicU64::new(0);

/// Number of attention maps validated by this process so far.
pub fn attention_maps_checked() -> u64 {
    MAPS_CHECKED.load(Ordering::Relaxed)
}

/// Row-stochastic `N x N` attention matrix.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    s: Tensor,
}

impl AttentionMap {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    /// Wraps `s` after checking that every row is a probability vector.
    pub fn new(s: Tensor) -> Result<Self> {
        let shape = s.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return dim_err(format!("attention map must be square, got {shape:?}"));
        }
        let n = shape[1];
        {
            let d = s.data();
            for (j, row) in d.chunks(n).enumerate() {
                if let Some(i) = row.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Numerical(format!(
                        "attention entry ({j}, {i}) = {} is outside [0, 1]",
                        row[i]
                    )));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > Self::ROW_SUM_TOL {
                    return Err(Error::Numerical(format!("attention row {j} sums to {total}")));
                }
            }
        }
        MAPS_CHECKED.fetch_add(1, Ordering::Relaxed);
        Ok(Self { s })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.s
    }

    pub fn positions(&self) -> usize {
        self.s.shape()[0]
    }

    /// Largest deviation of a row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let n = self.positions();
        self.s
            .data()
            .chunks(n)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct MsffmBlock {
    pub compress_low: Conv,
    pub compress_high: Conv,
    pub value_proj: Conv,
    pub alpha: Parameter,
    channels: usize,
    compression: usize,
    attention_cap: usize,
}

impl MsffmBlock {
    pub fn new(init: &Init, name: &str, channels: usize, compression: usize) -> Result<Self> {
        if compression == 0 || channels / compression == 0 {
            return Err(Error::Argument(format!(
                "MSFFM compression {compression} is invalid for {channels} channels"
            )));
        }
        let compressed = channels / compression;
        Ok(Self {
            compress_low: Conv::pointwise(init, &format!("{name}.compress_low"), channels, compressed),
            compress_high: Conv::pointwise(init, &format!("{name}.compress_high"), channels, compressed),
            value_proj: Conv::pointwise(init, &format!("{name}.value_proj"), channels, channels),
            alpha: init.constant(&format!("{name}.alpha"), vec![1], 0.0),
            channels,
            compression,
            attention_cap: DEFAULT_ATTENTION_CAP,
        })
    }

    pub fn with_attention_cap(mut self, cap: usize) -> Self {
        self.attention_cap = cap;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn compression(&self) -> usize {
        self.compression
    }

    pub fn forward(&self, low: &Tensor, high: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(low, high)?.0)
    }

    pub fn forward_with_attention(&self, low: &Tensor, high: &Tensor) -> Result<(Tensor, AttentionMap)> {
        let (ls, hs) = (low.shape(), high.shape());
        if ls.len() != 3 || ls != hs {
            return dim_err(format!("MSFFM inputs must share shape, got low {ls:?} and high {hs:?}"));
        }
        if ls[0] != self.channels {
            return dim_err(format!("MSFFM configured for {} channels, got {ls:?}", self.channels));
        }
        let (c, n) = (ls[0], ls[1] * ls[2]);
        if n > self.attention_cap {
            return Err(Error::Capacity(format!(
                "attention over {n} positions exceeds the cap of {}; use a smaller input",
                self.attention_cap
            )));
        }
        let cc = c / self.compression;
        let p = self.compress_low.forward(low)?.reshape(&[cc, n])?;
        let q = self.compress_high.forward(high)?.reshape(&[cc, n])?;
        // energy[j][i] = Q_j . P_i
        let energy = q.transpose2d()?.matmul(&p)?;
        let attention = AttentionMap::new(energy.softmax_rows()?)?;
        let v = self.value_proj.forward(low)?.reshape(&[c, n])?;
        let fused = v.matmul(&attention.tensor().transpose2d()?)?.reshape(ls)?;
        let out = fused.mul(&self.alpha)?.add(high)?;
        Ok((out, attention))
    }
}

impl Module for MsffmBlock {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.compress_low.parameters();
        p.extend(self.compress_high.parameters());
        p.extend(self.value_proj.parameters());
        p.push(self.alpha.clone());
        p
    }
}
