//! VGG-style five-stage backbone exposing one side output per stage.

use crate::autodiff::{ConvOptions, Graph, Var};
use crate::error::{Error, Result};
use crate::model::params::{Initializer, ModelParams, ParamVars};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 5],
    pub convs_per_stage: [usize; 5],
    /// Training/inference input size `(H, W)`; both divisible by 16.
    pub input_size: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// Narrow widths for CPU-scale training.
    pub fn desk() -> Self {
        Self {
            stage_channels: [8, 16, 32, 32, 32],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_size: (64, 64),
        }
    }

    /// VGG-16 convolution widths.
    pub fn vgg16() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_size: (256, 256),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "backbone stage_channels must be positive".into(),
            ));
        }
        if self.convs_per_stage.contains(&0) {
            return Err(Error::Config(
                "backbone convs_per_stage must be positive".into(),
            ));
        }
        check_input_size(self.input_size.0, self.input_size.1)
    }
}

pub(crate) fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(16) || !w.is_multiple_of(16) {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be a positive multiple of 16 (pad the image to the next multiple)"
        )));
    }
    Ok(())
}

pub(crate) fn conv_name(stage: usize, conv: usize) -> String {
    format!("backbone.stage{}.conv{}", stage + 1, conv + 1)
}

/// Initializes every backbone convolution (3x3 kernels, He-normal, zero bias).
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut init = Initializer::new(seed);
    let mut params = ModelParams::new();
    add_backbone(config, &mut init, &mut params)?;
    Ok(params)
}

pub(crate) fn add_backbone(
    config: &BackboneConfig,
    init: &mut Initializer,
    params: &mut ModelParams,
) -> Result<()> {
    let mut cin = 3;
    for stage in 0..5 {
        let cout = config.stage_channels[stage];
        for conv in 0..config.convs_per_stage[stage] {
            init.layer(params, &conv_name(stage, conv), &[cout, cin, 3, 3])?;
            cin = cout;
        }
    }
    Ok(())
}

/// The five backbone feature maps, at 1, 1/2, 1/4, 1/8 and 1/16 of the input resolution.
#[derive(Debug, Clone, Copy)]
pub struct SideOutputs {
    pub low1: Var,
    pub low2: Var,
    pub high3: Var,
    pub high4: Var,
    pub high5: Var,
}

impl SideOutputs {
    pub fn as_array(&self) -> [Var; 5] {
        [self.low1, self.low2, self.high3, self.high4, self.high5]
    }
}

/// Runs the backbone on `image: [N, 3, H, W]`.
pub fn forward_sides(
    g: &mut Graph,
    config: &BackboneConfig,
    params: &ParamVars,
    image: Var,
) -> Result<SideOutputs> {
    let (_, c, h, w) = g.value(image).dims4("forward_sides")?;
    if c != 3 {
        return Err(Error::Config(format!(
            "backbone expects 3 input channels, got {c}"
        )));
    }
    check_input_size(h, w)?;
    let mut x = image;
    let mut sides = Vec::with_capacity(5);
    for stage in 0..5 {
        if stage > 0 {
            x = g.max_pool2d(x)?;
        }
        for conv in 0..config.convs_per_stage[stage] {
            let name = conv_name(stage, conv);
            let wv = params.get(&format!("{name}.weight"))?;
            let bv = params.get(&format!("{name}.bias"))?;
            let y = g.conv2d(x, wv, Some(bv), ConvOptions::same())?;
            x = g.relu(y);
        }
        sides.push(x);
    }
    Ok(SideOutputs {
        low1: sides[0],
        low2: sides[1],
        high3: sides[2],
        high4: sides[3],
        high5: sides[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn run(config: &BackboneConfig, params: &ModelParams, image: Tensor) -> (Graph, SideOutputs) {
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let x = g.constant(image);
        let sides = forward_sides(&mut g, config, &pv, x).unwrap();
        (g, sides)
    }

    #[test]
    fn desk_parameter_count() {
        let cfg = BackboneConfig::desk();
        let params = build_backbone(&cfg, 0).unwrap();
        // Count by walking the layer list independently of the builder.
        let mut expected = 0;
        let mut cin = 3;
        for (&c, &n) in cfg.stage_channels.iter().zip(&cfg.convs_per_stage) {
            for _ in 0..n {
                expected += c * cin * 9 + c;
                cin = c;
            }
        }
        assert_eq!(params.num_scalars(), expected);
        assert_eq!(expected, 82_920);
        assert_eq!(params.len(), 2 * 13);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = BackboneConfig::desk();
        assert_eq!(
            build_backbone(&cfg, 7).unwrap(),
            build_backbone(&cfg, 7).unwrap()
        );
        assert_ne!(
            build_backbone(&cfg, 7).unwrap(),
            build_backbone(&cfg, 8).unwrap()
        );
    }

    #[test]
    fn resolution_ladder_and_widths() {
        let cfg = BackboneConfig::desk();
        let params = build_backbone(&cfg, 1).unwrap();
        for size in [64, 128] {
            let (g, sides) = run(&cfg, &params, Tensor::full(&[1, 3, size, size], 0.3));
            for (i, v) in sides.as_array().into_iter().enumerate() {
                let s = g.value(v).shape();
                assert_eq!(s, &[1, cfg.stage_channels[i], size >> i, size >> i]);
            }
        }
    }

    #[test]
    fn degenerate_width_runs() {
        let cfg = BackboneConfig {
            stage_channels: [1; 5],
            ..BackboneConfig::desk()
        };
        let params = build_backbone(&cfg, 3).unwrap();
        let (g, sides) = run(&cfg, &params, Tensor::full(&[1, 3, 32, 32], 0.5));
        assert_eq!(g.value(sides.high5).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn zero_image_gives_zero_sides() {
        let cfg = BackboneConfig::desk();
        let params = build_backbone(&cfg, 1).unwrap();
        let (g, sides) = run(&cfg, &params, Tensor::zeros(&[1, 3, 32, 32]));
        for v in sides.as_array() {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_bad_sizes_and_configs() {
        let cfg = BackboneConfig::desk();
        let params = build_backbone(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 3, 40, 48]));
        assert!(forward_sides(&mut g, &cfg, &pv, x).is_err());
        let bad = BackboneConfig {
            stage_channels: [8, 0, 8, 8, 8],
            ..cfg.clone()
        };
        assert!(build_backbone(&bad, 0).is_err());
        let bad = BackboneConfig {
            input_size: (60, 64),
            ..cfg
        };
        assert!(build_backbone(&bad, 0).is_err());
    }
}
