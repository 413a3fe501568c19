//! The saliency network: backbone, head and their shared configuration.

pub mod backbone;
pub mod head;
pub mod params;

pub use backbone::{build_backbone, forward_sides, BackboneConfig, SideOutputs};
pub use head::{
    channel_attention, cpfe_level, cpfe_pyramid, low_level_combine, spatial_attention, Components,
    CpfeConfig, HeadConfig, HeadOutput,
};
pub use params::{ModelParams, ParamVars};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }

    /// The smallest sensible network, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [2, 2, 2, 2, 2],
                convs_per_stage: [1, 1, 1, 1, 1],
                input_size: (16, 16),
            },
            head: HeadConfig {
                cpfe: CpfeConfig {
                    dilations: vec![3, 5, 7],
                    branch_channels: 2,
                },
                ca_reduction: 4,
                sa_kernel: 3,
                low_channels: 2,
                fuse_channels: 2,
                components: Components::default(),
            },
        }
    }
}

/// Initializes backbone and head from one seeded stream. The backbone
/// tensors come first and equal [`build_backbone`] for the same seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut init = params::Initializer::new(seed);
    let mut params = ModelParams::new();
    backbone::add_backbone(&config.backbone, &mut init, &mut params)?;
    head::add_head(&config.head, &config.backbone, &mut init, &mut params)?;
    Ok(params)
}

/// Graph handles produced by [`pfa_forward`].
#[derive(Debug, Clone, Copy)]
pub struct PfaOutput {
    /// Saliency map `[N, 1, H, W]` in `(0, 1)`.
    pub saliency: Var,
    pub sides: SideOutputs,
    pub head: HeadOutput,
}

pub fn pfa_forward(
    g: &mut Graph,
    config: &ModelConfig,
    params: &ParamVars,
    image: Var,
) -> Result<PfaOutput> {
    let sides = forward_sides(g, &config.backbone, params, image)?;
    let head = head::forward_head(g, &config.head, params, &sides)?;
    Ok(PfaOutput {
        saliency: head.saliency,
        sides,
        head,
    })
}

/// Channel and spatial gates of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// `[N, C]`, absent when channel attention is switched off.
    pub ca: Option<Tensor>,
    /// `[N, 1, H/4, W/4]`, absent when spatial attention is switched off.
    pub sa: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub saliency: Tensor,
    pub attention: AttentionWeights,
}

/// Inference without keeping a graph around.
pub fn predict(config: &ModelConfig, params: &ModelParams, image: &Tensor) -> Result<Prediction> {
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let x = g.constant(image.clone());
    let out = pfa_forward(&mut g, config, &pv, x)?;
    Ok(Prediction {
        saliency: g.value(out.saliency).clone(),
        attention: AttentionWeights {
            ca: out.head.ca.map(|v| g.value(v).clone()),
            sa: out.head.sa.map(|v| g.value(v).clone()),
        },
    })
}
