//! Network building blocks.
//!
//! Every block owns its [`Parameter`]s and exposes them through
//! [`Module::parameters`] in a fixed order. Parameter names are
//! dot-separated paths (`backbone.stage4.block1.conv2.weight`) and unique
//! within a model.

mod aspp;
mod backbone;
mod cam;
mod model;
mod msffm;

pub use aspp::AsppBlock;
pub use backbone::{Backbone, ResidualBlock, StageFeatures};
pub use cam::CamBlock;
pub use model::{argmax_mask, ForwardTrace, Head, ModelConfig, SegModel, Variant};
pub use msffm::{attention_maps_checked, AttentionMap, MsffmBlock, DEFAULT_ATTENTION_CAP};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Conv2dOptions, Parameter, Tensor};

pub trait Module {
    fn parameters(&self) -> Vec<Parameter>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Parameter::numel).sum()
    }
}

/// Deterministic parameter initialiser. Each parameter draws from its own
/// stream keyed by `(seed, name)`, so a parameter gets the same initial
/// values in every model variant that contains it.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(self.seed ^ h)
    }

    pub fn normal(&self, name: &str, shape: Vec<usize>, std: f64) -> Parameter {
        let n = shape.iter().product();
        let mut rng = self.rng(name);
        let dist = Normal::new(0.0, std).expect("finite std");
        Parameter::new(name, shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    }

    pub fn constant(&self, name: &str, shape: Vec<usize>, value: f64) -> Parameter {
        let n = shape.iter().product();
        Parameter::new(name, shape, vec![value; n])
    }
}

/// Convolution layer with square odd kernel and optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub opts: Conv2dOptions,
}

impl Conv {
    /// He-normal weights, zero bias.
    pub fn new(init: &Init, name: &str, cin: usize, cout: usize, kernel: usize, opts: Conv2dOptions, bias: bool) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self {
            weight: init.normal(&format!("{name}.weight"), vec![cout, cin, kernel, kernel], (2.0 / fan_in).sqrt()),
            bias: bias.then(|| init.constant(&format!("{name}.bias"), vec![cout], 0.0)),
            opts,
        }
    }

    pub fn pointwise(init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, cin, cout, 1, Conv2dOptions::default(), true)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, self.bias.as_deref(), self.opts)
    }
}

impl Module for Conv {
    fn parameters(&self) -> Vec<Parameter> {
        std::iter::once(self.weight.clone()).chain(self.bias.clone()).collect()
    }
}

/// Per-channel `scale * x + shift`, standing in for normalisation layers.
#[derive(Clone, Debug)]
pub struct Affine {
    pub scale: Parameter,
    pub shift: Parameter,
}

impl Affine {
    pub fn new(init: &Init, name: &str, channels: usize, scale: f64) -> Self {
        Self {
            scale: init.constant(&format!("{name}.scale"), vec![channels, 1, 1], scale),
            shift: init.constant(&format!("{name}.shift"), vec![channels, 1, 1], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.scale)?.add(&self.shift)
    }
}

impl Module for Affine {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.scale.clone(), self.shift.clone()]
    }
}

/// Repeats a `C x 1 x 1` tensor over an `h x w` plane.
pub(crate) fn broadcast_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    Tensor::zeros(vec![x.shape()[0], h, w]).add(x)
}
