//! Pothole segmentation with a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: `f64` tensors, the operations the network needs and their
//!   gradients.
//! - [`gradcheck`]: central finite-difference checks for every op and block.
//! - [`nn`]: residual backbone, ASPP, channel attention (CAM), multi-scale
//!   feature fusion (MSFFM) and the assembled [`nn::SegModel`].
//! - [`metrics`]: confusion matrices, mIoU and mean F-score.
//! - [`data`]: dataset loading, the synthetic generator, overlays and
//!   checkpoints.
//! - [`train`]: SGD, evaluation and the ablation runner.
//! - [`config`]: `key = value` run configuration files.
//!
//! ```
//! use pseg::nn::{ModelConfig, SegModel, Variant};
//! use pseg::Tensor;
//!
//! let cfg = ModelConfig { stage_widths: [4, 4, 8, 8, 8], aspp_width: 8, ..ModelConfig::default() };
//! let model = SegModel::new(&cfg, Variant::CamMsffm, 7)?;
//! let logits = model.forward(&Tensor::zeros(vec![3, 16, 16]))?;
//! assert_eq!(logits.shape(), &[2, 16, 16]);
//! # Ok::<(), pseg::Error>(())
//! ```

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::{Parameter, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
