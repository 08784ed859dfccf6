use super::{Affine, Conv, Init, Module};
use crate::error::{dim_err, Result};
use crate::tensor::{Conv2dOptions, Parameter, Tensor};

/// `relu(affine2(conv2(relu(affine1(conv1(x))))) + shortcut(x))`.
///
/// The shortcut is the identity unless the block changes the channel count
/// or the stride, in which case it is a strided 1x1 convolution.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub affine1: Affine,
    pub conv2: Conv,
    pub affine2: Affine,
    pub shortcut: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(init: &Init, name: &str, cin: usize, cout: usize, stride: usize, dilation: usize) -> Self {
        let first = Conv2dOptions::same(3, dilation).with_stride(stride);
        let second = Conv2dOptions::same(3, dilation);
        let shortcut = (cin != cout || stride != 1).then(|| {
            Conv::new(
                init,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                Conv2dOptions::default().with_stride(stride),
                false,
            )
        });
        Self {
            conv1: Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, first, false),
            affine1: Affine::new(init, &format!("{name}.affine1"), cout, 1.0),
            conv2: Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, second, false),
            // zero-initialised residual branch: every block starts as its shortcut
            affine2: Affine::new(init, &format!("{name}.affine2"), cout, 0.0),
            shortcut,
        }
    }

    pub fn shortcut_forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.shortcut {
            Some(c) => c.forward(x),
            None => Ok(x.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.affine1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.affine2.forward(&self.conv2.forward(&h)?)?;
        Ok(h.add(&self.shortcut_forward(x)?)?.relu())
    }
}

impl Module for ResidualBlock {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.conv1.parameters();
        p.extend(self.affine1.parameters());
        p.extend(self.conv2.parameters());
        p.extend(self.affine2.parameters());
        if let Some(s) = &self.shortcut {
            p.extend(s.parameters());
        }
        p
    }
}

/// Outputs of the five backbone stages.
#[derive(Clone, Debug)]
pub struct StageFeatures(pub [Tensor; 5]);

impl StageFeatures {
    pub fn stage(&self, n: usize) -> &Tensor {
        &self.0[n - 1]
    }
}

/// Stride and dilation of each stage: three stride-2 stages down to 1/8,
/// then two dilated stages that keep the resolution.
pub const STAGE_GEOMETRY: [(usize, usize); 5] = [(2, 1), (2, 1), (2, 1), (1, 2), (1, 4)];

/// Miniature dilated residual network with output stride 8.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Vec<ResidualBlock>>,
    in_channels: usize,
}

impl Backbone {
    pub fn new(init: &Init, name: &str, in_channels: usize, widths: &[usize; 5], blocks: &[usize; 5]) -> Self {
        let mut cin = in_channels;
        let stages = (0..5)
            .map(|s| {
                let (stride, dilation) = STAGE_GEOMETRY[s];
                (0..blocks[s])
                    .map(|b| {
                        let block = ResidualBlock::new(
                            init,
                            &format!("{name}.stage{}.block{b}", s + 1),
                            cin,
                            widths[s],
                            if b == 0 { stride } else { 1 },
                            dilation,
                        );
                        cin = widths[s];
                        block
                    })
                    .collect()
            })
            .collect();
        Self { stages, in_channels }
    }

    pub fn forward(&self, x: &Tensor) -> Result<StageFeatures> {
        let s = x.shape();
        if s.len() != 3 || s[0] != self.in_channels {
            return dim_err(format!(
                "backbone expects {} x H x W input, got {s:?}",
                self.in_channels
            ));
        }
        if !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
            return dim_err(format!(
                "input extent {}x{} must be divisible by 8",
                s[1], s[2]
            ));
        }
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(5);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            feats.push(h.clone());
        }
        let feats: [Tensor; 5] = feats.try_into().expect("five stages");
        Ok(StageFeatures(feats))
    }
}

impl Module for Backbone {
    fn parameters(&self) -> Vec<Parameter> {
        self.stages.iter().flatten().flat_map(|b| b.parameters()).collect()
    }
}
