use super::{Conv, Init, Module};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Parameter, Tensor};

/// Channel attention: squeeze the spatial extent by global average pooling,
/// pass the channel descriptor through `reduce -> relu -> expand -> sigmoid`
/// and rescale every channel of the input by the resulting weight.
#[derive(Clone, Debug)]
pub struct CamBlock {
    pub reduce: Conv,
    pub expand: Conv,
    channels: usize,
    reduction: usize,
}

impl CamBlock {
    pub fn new(init: &Init, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels / reduction == 0 {
            return Err(Error::Argument(format!(
                "CAM reduction {reduction} is invalid for {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            reduce: Conv::pointwise(init, &format!("{name}.reduce"), channels, hidden),
            expand: Conv::pointwise(init, &format!("{name}.expand"), hidden, channels),
            channels,
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduction(&self) -> usize {
        self.reduction
    }

    /// Per-channel weights, shape `C x 1 x 1`, each in (0, 1).
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.channels {
            return dim_err(format!("CAM configured for {} channels, got input {s:?}", self.channels));
        }
        let squeezed = x.global_avg_pool()?;
        let hidden = self.reduce.forward(&squeezed)?.relu();
        Ok(self.expand.forward(&hidden)?.sigmoid())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.mul(&self.weights(x)?)
    }
}

impl Module for CamBlock {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.reduce.parameters();
        p.extend(self.expand.parameters());
        p
    }
}
