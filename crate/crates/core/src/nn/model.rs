use std::fmt;
use std::str::FromStr;

use super::{AsppBlock, AttentionMap, Backbone, CamBlock, Conv, Init, Module, MsffmBlock, StageFeatures, DEFAULT_ATTENTION_CAP};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Parameter, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// 3 for RGB, 1 for transformed disparity.
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: [usize; 5],
    pub stage_blocks: [usize; 5],
    /// Always 8.
    pub output_stride: usize,
    pub msffm_compression: usize,
    pub cam_reduction: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_width: usize,
    pub attention_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            stage_widths: [16, 32, 64, 64, 64],
            stage_blocks: [1, 1, 2, 2, 2],
            output_stride: 8,
            msffm_compression: 4,
            cam_reduction: 4,
            aspp_rates: vec![6, 12, 18],
            aspp_width: 64,
            attention_cap: DEFAULT_ATTENTION_CAP,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.output_stride != 8 {
            return bad(format!("output_stride is fixed at 8, got {}", self.output_stride));
        }
        if self.stage_widths.contains(&0) || self.stage_blocks.contains(&0) {
            return bad("stage widths and block counts must be positive".into());
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) || self.aspp_width == 0 {
            return bad("ASPP needs at least one positive rate and a positive width".into());
        }
        let c4 = self.stage_widths[3];
        if self.msffm_compression == 0 || c4 / self.msffm_compression == 0 {
            return bad(format!("msffm_compression {} leaves no channels of {c4}", self.msffm_compression));
        }
        for c in [self.stage_widths[3], self.stage_widths[4]] {
            if self.cam_reduction == 0 || c / self.cam_reduction == 0 {
                return bad(format!("cam_reduction {} leaves no channels of {c}", self.cam_reduction));
            }
        }
        if self.attention_cap == 0 {
            return bad("attention_cap must be positive".into());
        }
        Ok(())
    }
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Cam,
    Msffm,
    CamMsffm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Cam, Variant::Msffm, Variant::CamMsffm];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cam => "+cam",
            Variant::Msffm => "+msffm",
            Variant::CamMsffm => "+cam+msffm",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Cam => "Baseline + CAM",
            Variant::Msffm => "Baseline + MSFFM",
            Variant::CamMsffm => "Baseline + CAM + MSFFM (ours)",
        }
    }

    pub fn uses_cam(self) -> bool {
        matches!(self, Variant::Cam | Variant::CamMsffm)
    }

    pub fn uses_msffm(self) -> bool {
        matches!(self, Variant::Msffm | Variant::CamMsffm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| {
                let tags: Vec<_> = Variant::ALL.iter().map(|v| v.tag()).collect();
                Error::Argument(format!("unknown variant {s:?}; expected one of {}", tags.join(", ")))
            })
    }
}

// one per model, so the size gap between variants does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Head {
    /// Concatenate the stage-4 features with the ASPP output, fuse with a
    /// 1x1 conv.
    Concat { fuse: Conv },
    /// Align the ASPP output to the stage-4 width and fuse by attention.
    Attention { align: Conv, msffm: MsffmBlock },
}

/// Full segmentation network: backbone, optional channel attention on
/// stages 4 and 5, ASPP on stage 5, a fusion head and a 1x1 classifier whose
/// logits are upsampled by 8 back to the input resolution.
#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    variant: Variant,
    pub backbone: Backbone,
    pub cam: Option<(CamBlock, CamBlock)>,
    pub aspp: AsppBlock,
    pub head: Head,
    pub classifier: Conv,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub features: StageFeatures,
    pub low: Tensor,
    pub top: Tensor,
    pub context: Tensor,
    pub fused: Tensor,
    pub logits: Tensor,
    pub attention: Option<AttentionMap>,
}

impl SegModel {
    pub fn new(config: &ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let w = config.stage_widths;
        let backbone = Backbone::new(&init, "backbone", config.in_channels, &w, &config.stage_blocks);
        let cam = if variant.uses_cam() {
            Some((
                CamBlock::new(&init, "cam4", w[3], config.cam_reduction)?,
                CamBlock::new(&init, "cam5", w[4], config.cam_reduction)?,
            ))
        } else {
            None
        };
        let aspp = AsppBlock::new(&init, "aspp", w[4], config.aspp_width, &config.aspp_rates);
        let head = if variant.uses_msffm() {
            Head::Attention {
                align: Conv::pointwise(&init, "head.align", config.aspp_width, w[3]),
                msffm: MsffmBlock::new(&init, "head.msffm", w[3], config.msffm_compression)?
                    .with_attention_cap(config.attention_cap),
            }
        } else {
            Head::Concat {
                fuse: Conv::pointwise(&init, "head.fuse", w[3] + config.aspp_width, w[3]),
            }
        };
        let classifier = Conv::pointwise(&init, "classifier", w[3], config.num_classes);
        Ok(Self {
            config: config.clone(),
            variant,
            backbone,
            cam,
            aspp,
            head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn msffm(&self) -> Option<&MsffmBlock> {
        match &self.head {
            Head::Attention { msffm, .. } => Some(msffm),
            Head::Concat { .. } => None,
        }
    }

    pub fn parameter(&self, name: &str) -> Option<Parameter> {
        self.parameters().into_iter().find(|p| p.name() == name)
    }

    pub fn trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        let features = self.backbone.forward(x)?;
        let (f4, f5) = (features.stage(4), features.stage(5));
        let (low, top) = match &self.cam {
            Some((c4, c5)) => (c4.forward(f4)?, c5.forward(f5)?),
            None => (f4.clone(), f5.clone()),
        };
        let context = self.aspp.forward(&top)?;
        let (fused, attention) = match &self.head {
            Head::Concat { fuse } => (fuse.forward(&Tensor::concat_channels(&[low.clone(), context.clone()])?)?.relu(), None),
            Head::Attention { align, msffm } => {
                let high = align.forward(&context)?.relu();
                let (o, a) = msffm.forward_with_attention(&low, &high)?;
                (o, Some(a))
            }
        };
        let logits = self.classifier.forward(&fused)?.bilinear_upsample(self.config.output_stride)?;
        Ok(ForwardTrace {
            features,
            low,
            top,
            context,
            fused,
            logits,
            attention,
        })
    }

    /// Per-pixel class logits, `K x H x W`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.trace(x)?.logits)
    }

    /// Arg-max labels of a forward pass without recording history.
    pub fn predict(&self, x: &Tensor) -> Result<Mask> {
        let _g = crate::tensor::NoGradGuard::new();
        argmax_mask(&self.forward(x)?)
    }
}

impl Module for SegModel {
    fn parameters(&self) -> Vec<Parameter> {
        let mut p = self.backbone.parameters();
        if let Some((c4, c5)) = &self.cam {
            p.extend(c4.parameters());
            p.extend(c5.parameters());
        }
        p.extend(self.aspp.parameters());
        match &self.head {
            Head::Concat { fuse } => p.extend(fuse.parameters()),
            Head::Attention { align, msffm } => {
                p.extend(align.parameters());
                p.extend(msffm.parameters());
            }
        }
        p.extend(self.classifier.parameters());
        p
    }
}

/// Class with the highest logit per pixel; ties go to the lower class.
pub fn argmax_mask(logits: &Tensor) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected K x H x W logits, got {s:?}")));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = logits.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask::new(h, w, labels)
}
