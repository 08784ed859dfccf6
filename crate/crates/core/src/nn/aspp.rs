use super::{broadcast_spatial, Conv, Init, Module};
use crate::error::{dim_err, Result};
use crate::tensor::{Conv2dOptions, Parameter, Tensor};

/// Atrous spatial pyramid pooling with parallel branches: a 1x1 conv, one
/// 3x3 conv per dilation rate, and an image-pooling branch (global pool,
/// 1x1 conv, broadcast back over the plane). Branch outputs are
/// concatenated and projected by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct AsppBlock {
    pub pointwise: Conv,
    pub dilated: Vec<Conv>,
    pub pooling: Conv,
    pub project: Conv,
    rates: Vec<usize>,
}

impl AsppBlock {
    pub fn new(init: &Init, name: &str, cin: usize, width: usize, rates: &[usize]) -> Self {
        let dilated = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv::new(init, &format!("{name}.atrous{i}"), cin, width, 3, Conv2dOptions::same(3, r), true))
            .collect();
        Self {
            pointwise: Conv::pointwise(init, &format!("{name}.pointwise"), cin, width),
            dilated,
            pooling: Conv::pointwise(init, &format!("{name}.pooling"), cin, width),
            project: Conv::pointwise(init, &format!("{name}.project"), width * (rates.len() + 2), width),
            rates: rates.to_vec(),
        }
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    pub fn out_channels(&self) -> usize {
        self.project.out_channels()
    }

    /// Outputs of every branch in concatenation order.
    pub fn branches(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.pointwise.in_channels() {
            return dim_err(format!(
                "ASPP expects {} input channels, got {s:?}",
                self.pointwise.in_channels()
            ));
        }
        let (h, w) = (s[1], s[2]);
        let mut out = Vec::with_capacity(self.rates.len() + 2);
        out.push(self.pointwise.forward(x)?.relu());
        for conv in &self.dilated {
            out.push(conv.forward(x)?.relu());
        }
        let pooled = self.pooling.forward(&x.global_avg_pool()?)?.relu();
        out.push(broadcast_spatial(&pooled, h, w)?);
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let cat = Tensor::concat_channels(&self.branches(x)?)?;
        Ok(self.project.forward(&cat)?.relu())
    }
}

impl Module for AsppBlock {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.pointwise.parameters();
        for c in &self.dilated {
            p.extend(c.parameters());
        }
        p.extend(self.pooling.parameters());
        p.extend(self.project.parameters());
        p
    }
}
