//! Detection head: context-aware pyramid, channel and spatial attention,
//! low-level combination and the fusion layers producing the saliency map.

use crate::autodiff::{ConvOptions, Graph, Var};
use crate::error::{Error, Result};
use crate::model::backbone::BackboneConfig;
use crate::model::params::{Initializer, ModelParams, ParamVars};

pub const HIGH_LEVELS: [usize; 3] = [3, 4, 5];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpfeConfig {
    pub dilations: Vec<usize>,
    pub branch_channels: usize,
}

impl Default for CpfeConfig {
    fn default() -> Self {
        Self {
            dilations: vec![3, 5, 7],
            branch_channels: 32,
        }
    }
}

impl CpfeConfig {
    /// Channels produced per backbone level: one 1x1 branch plus one per dilation.
    pub fn level_channels(&self) -> usize {
        (self.dilations.len() + 1) * self.branch_channels
    }

    pub fn pyramid_channels(&self) -> usize {
        HIGH_LEVELS.len() * self.level_channels()
    }
}

/// Which head components are active. Everything on is the full model; the
/// switches reproduce the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub cpfe: bool,
    pub channel_attention: bool,
    pub low_level: bool,
    pub spatial_attention: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            cpfe: true,
            channel_attention: true,
            low_level: true,
            spatial_attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    pub cpfe: CpfeConfig,
    /// Bottleneck ratio of the channel-attention FC pair.
    pub ca_reduction: usize,
    /// Length `k` of the 1xk / kx1 spatial-attention kernels.
    pub sa_kernel: usize,
    /// Width of the 3x3 convs applied to each low-level side output.
    pub low_channels: usize,
    /// Width both paths are reduced to before fusion.
    pub fuse_channels: usize,
    pub components: Components,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            cpfe: CpfeConfig::default(),
            ca_reduction: 4,
            sa_kernel: 9,
            low_channels: 32,
            fuse_channels: 32,
            components: Components::default(),
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.cpfe.pyramid_channels();
        if self.cpfe.branch_channels == 0 || self.cpfe.dilations.contains(&0) {
            return Err(Error::Config(
                "CPFE widths and dilations must be positive".into(),
            ));
        }
        if self.ca_reduction == 0 || !c.is_multiple_of(self.ca_reduction) {
            return Err(Error::Config(format!(
                "pyramid channels {c} not divisible by channel-attention reduction {}",
                self.ca_reduction
            )));
        }
        if self.sa_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "spatial-attention kernel size must be odd, got {}",
                self.sa_kernel
            )));
        }
        if self.low_channels == 0 || self.fuse_channels == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if self.components.spatial_attention && !self.components.low_level {
            return Err(Error::Config(
                "spatial attention weights low-level features and needs the low-level path".into(),
            ));
        }
        Ok(())
    }

    fn sa_mid_channels(&self) -> usize {
        (self.cpfe.pyramid_channels() / 2).max(1)
    }
}

fn cpfe_branch(level: usize, dilation: Option<usize>) -> String {
    match dilation {
        None => format!("cpfe.level{level}.conv1x1"),
        Some(d) => format!("cpfe.level{level}.dilation{d}"),
    }
}

pub(crate) fn add_head(
    head: &HeadConfig,
    backbone: &BackboneConfig,
    init: &mut Initializer,
    params: &mut ModelParams,
) -> Result<()> {
    let bc = head.cpfe.branch_channels;
    let comps = head.components;
    for (i, level) in HIGH_LEVELS.into_iter().enumerate() {
        let cin = backbone.stage_channels[i + 2];
        if comps.cpfe {
            init.layer(params, &cpfe_branch(level, None), &[bc, cin, 1, 1])?;
            for &d in &head.cpfe.dilations {
                init.layer(params, &cpfe_branch(level, Some(d)), &[bc, cin, 3, 3])?;
            }
        } else {
            init.layer(
                params,
                &format!("cpfe.level{level}.plain"),
                &[head.cpfe.level_channels(), cin, 1, 1],
            )?;
        }
    }
    let c = head.cpfe.pyramid_channels();
    if comps.channel_attention {
        let hidden = c / head.ca_reduction;
        init.layer(params, "ca.fc1", &[hidden, c])?;
        init.layer(params, "ca.fc2", &[c, hidden])?;
    }
    if comps.spatial_attention {
        let (k, mid) = (head.sa_kernel, head.sa_mid_channels());
        init.layer(params, "sa.branch_a.conv1xk", &[mid, c, 1, k])?;
        init.layer(params, "sa.branch_a.convkx1", &[1, mid, k, 1])?;
        init.layer(params, "sa.branch_b.convkx1", &[mid, c, k, 1])?;
        init.layer(params, "sa.branch_b.conv1xk", &[1, mid, 1, k])?;
    }
    let f = head.fuse_channels;
    init.layer(params, "fuse.high", &[f, c, 1, 1])?;
    let mut fused = f;
    if comps.low_level {
        let l = head.low_channels;
        init.layer(params, "low.side1", &[l, backbone.stage_channels[0], 3, 3])?;
        init.layer(params, "low.side2", &[l, backbone.stage_channels[1], 3, 3])?;
        init.layer(params, "fuse.low", &[f, 2 * l, 1, 1])?;
        fused += f;
    }
    init.layer(params, "fuse.out", &[1, fused, 3, 3])
}

fn conv(g: &mut Graph, pv: &ParamVars, prefix: &str, x: Var, opts: ConvOptions) -> Result<Var> {
    let w = pv.get(&format!("{prefix}.weight"))?;
    let b = pv.get(&format!("{prefix}.bias"))?;
    Ok(g.conv2d(x, w, Some(b), opts)?)
}

fn conv_relu(
    g: &mut Graph,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    opts: ConvOptions,
) -> Result<Var> {
    let y = conv(g, pv, prefix, x, opts)?;
    Ok(g.relu(y))
}

/// Context-aware features of one backbone level: `[1x1 | dil d1 | dil d2 | ...]`,
/// each branch `branch_channels` wide and followed by ReLU.
pub fn cpfe_level(
    g: &mut Graph,
    pv: &ParamVars,
    level: usize,
    f: Var,
    cfg: &CpfeConfig,
) -> Result<Var> {
    let mut branches = vec![conv_relu(
        g,
        pv,
        &cpfe_branch(level, None),
        f,
        ConvOptions::same(),
    )?];
    for &d in &cfg.dilations {
        branches.push(conv_relu(
            g,
            pv,
            &cpfe_branch(level, Some(d)),
            f,
            ConvOptions::dilated(d),
        )?);
    }
    Ok(g.concat_channels(&branches)?)
}

/// Applies the per-level extractor to the three high-level sides, upsamples
/// the 1/8 and 1/16 results to 1/4 and concatenates `(level3 | level4 | level5)`.
pub fn cpfe_pyramid(
    g: &mut Graph,
    pv: &ParamVars,
    highs: [Var; 3],
    head: &HeadConfig,
) -> Result<Var> {
    let (_, _, h, w) = g.value(highs[0]).dims4("cpfe_pyramid")?;
    let mut levels = Vec::with_capacity(3);
    for (i, (&level, &f)) in HIGH_LEVELS.iter().zip(&highs).enumerate() {
        let factor = 1 << i;
        let (_, _, fh, fw) = g.value(f).dims4("cpfe_pyramid")?;
        if fh * factor != h || fw * factor != w {
            return Err(Error::Config(format!(
                "level {level} is {fh}x{fw}, expected {}x{} for a 1/{factor} ladder step",
                h / factor,
                w / factor
            )));
        }
        let feat = if head.components.cpfe {
            cpfe_level(g, pv, level, f, &head.cpfe)?
        } else {
            conv_relu(
                g,
                pv,
                &format!("cpfe.level{level}.plain"),
                f,
                ConvOptions::same(),
            )?
        };
        levels.push(g.bilinear_upsample(feat, factor)?);
    }
    Ok(g.concat_channels(&levels)?)
}

/// Squeeze-excite style gate: `ca = σ(fc2(relu(fc1(avgpool(f)))))`, returns `(ca, ca · f)`.
pub fn channel_attention(g: &mut Graph, pv: &ParamVars, f: Var) -> Result<(Var, Var)> {
    let pooled = g.global_avg_pool(f)?;
    let hidden = g.dense(
        pooled,
        pv.get("ca.fc1.weight")?,
        Some(pv.get("ca.fc1.bias")?),
    )?;
    let hidden = g.relu(hidden);
    let logits = g.dense(
        hidden,
        pv.get("ca.fc2.weight")?,
        Some(pv.get("ca.fc2.bias")?),
    )?;
    let ca = g.sigmoid(logits);
    let weighted = g.broadcast_mul(f, ca)?;
    Ok((ca, weighted))
}

/// Single-channel spatial gate from two separable branches:
/// `σ(kx1(1xk(f)) + 1xk(kx1(f)))`, with `C/2` intermediate channels.
pub fn spatial_attention(g: &mut Graph, pv: &ParamVars, f_high: Var, k: usize) -> Result<Var> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "spatial-attention kernel must be odd, got {k}"
        )));
    }
    let a = conv(g, pv, "sa.branch_a.conv1xk", f_high, ConvOptions::same())?;
    let a = conv(g, pv, "sa.branch_a.convkx1", a, ConvOptions::same())?;
    let b = conv(g, pv, "sa.branch_b.convkx1", f_high, ConvOptions::same())?;
    let b = conv(g, pv, "sa.branch_b.conv1xk", b, ConvOptions::same())?;
    let sum = g.add(a, b)?;
    Ok(g.sigmoid(sum))
}

/// 3x3 conv + ReLU on both low-level sides, second side upsampled x2, concatenated.
pub fn low_level_combine(g: &mut Graph, pv: &ParamVars, low1: Var, low2: Var) -> Result<Var> {
    let (_, _, h1, w1) = g.value(low1).dims4("low_level_combine")?;
    let (_, _, h2, w2) = g.value(low2).dims4("low_level_combine")?;
    if h2 * 2 != h1 || w2 * 2 != w1 {
        return Err(Error::Config(format!(
            "low-level sides {h1}x{w1} and {h2}x{w2} are not one ladder step apart"
        )));
    }
    let a = conv_relu(g, pv, "low.side1", low1, ConvOptions::same())?;
    let b = conv_relu(g, pv, "low.side2", low2, ConvOptions::same())?;
    let b = g.bilinear_upsample(b, 2)?;
    Ok(g.concat_channels(&[a, b])?)
}

/// Outputs of a head pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub saliency: Var,
    pub pyramid: Var,
    pub ca: Option<Var>,
    pub sa: Option<Var>,
    pub low: Option<Var>,
}

pub(crate) fn forward_head(
    g: &mut Graph,
    head: &HeadConfig,
    pv: &ParamVars,
    sides: &crate::model::backbone::SideOutputs,
) -> Result<HeadOutput> {
    let comps = head.components;
    let pyramid = cpfe_pyramid(g, pv, [sides.high3, sides.high4, sides.high5], head)?;
    let (ca, high) = if comps.channel_attention {
        let (ca, weighted) = channel_attention(g, pv, pyramid)?;
        (Some(ca), weighted)
    } else {
        (None, pyramid)
    };
    // The 1x1 reduction runs before the x4 upsample: both are linear and
    // bilinear weights sum to one, so the order does not change the result.
    let high_reduced = conv(g, pv, "fuse.high", high, ConvOptions::same())?;
    let high_up = g.bilinear_upsample(high_reduced, 4)?;
    let high_up = g.relu(high_up);

    let mut sa = None;
    let mut low = None;
    let mut fused = vec![high_up];
    if comps.low_level {
        let mut low_feat = low_level_combine(g, pv, sides.low1, sides.low2)?;
        if comps.spatial_attention {
            let gate = spatial_attention(g, pv, high, head.sa_kernel)?;
            let gate_full = g.bilinear_upsample(gate, 4)?;
            low_feat = g.broadcast_mul(low_feat, gate_full)?;
            sa = Some(gate);
        }
        low = Some(low_feat);
        fused.push(conv_relu(g, pv, "fuse.low", low_feat, ConvOptions::same())?);
    }
    let joined = g.concat_channels(&fused)?;
    let logits = conv(g, pv, "fuse.out", joined, ConvOptions::same())?;
    Ok(HeadOutput {
        saliency: g.sigmoid(logits),
        pyramid,
        ca,
        sa,
        low,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, pfa_forward, predict, ModelConfig, ModelParams};
    use crate::tensor::Tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                stage_channels: [4, 4, 8, 8, 8],
                convs_per_stage: [1, 1, 1, 1, 1],
                input_size: (32, 32),
            },
            head: HeadConfig {
                sa_kernel: 5,
                low_channels: 6,
                fuse_channels: 6,
                ..HeadConfig::default()
            },
        }
    }

    fn image(n: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[n, 3, size, size], |i| ((i * 7919) % 101) as f64 / 100.0)
    }

    #[test]
    fn channel_arithmetic() {
        let cfg = CpfeConfig::default();
        assert_eq!(cfg.level_channels(), 128);
        assert_eq!(cfg.pyramid_channels(), 384);
    }

    #[test]
    fn cpfe_level_shapes_and_zero_weights() {
        let cfg = small();
        let params = build_model(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        for (level, size) in [(3, 8), (4, 4), (5, 2)] {
            let f = g.constant(Tensor::full(&[2, 8, size, size], 0.5));
            let y = cpfe_level(&mut g, &pv, level, f, &cfg.head.cpfe).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 128, size, size]);
        }
        let zero = params.zeroed();
        let mut g = Graph::new();
        let pv = zero.bind(&mut g);
        let f = g.constant(Tensor::full(&[1, 8, 8, 8], 0.5));
        let y = cpfe_level(&mut g, &pv, 3, f, &cfg.head.cpfe).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_shape_order_and_ladder_check() {
        let cfg = small();
        let mut params = build_model(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let h3 = g.constant(Tensor::full(&[1, 8, 16, 16], 1.0));
        let h4 = g.constant(Tensor::full(&[1, 8, 8, 8], 1.0));
        let h5 = g.constant(Tensor::full(&[1, 8, 4, 4], 1.0));
        let y = cpfe_pyramid(&mut g, &pv, [h3, h4, h5], &cfg.head).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 384, 16, 16]);
        let bad = g.constant(Tensor::full(&[1, 8, 6, 6], 1.0));
        assert!(cpfe_pyramid(&mut g, &pv, [h3, bad, h5], &cfg.head).is_err());

        // Zeroing level 4 zeroes exactly channels 128..256.
        for name in params.names().map(str::to_owned).collect::<Vec<_>>() {
            if name.starts_with("cpfe.level4") {
                let t = params.get_mut(&name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let h3 = g.constant(Tensor::full(&[1, 8, 16, 16], 1.0));
        let h4 = g.constant(Tensor::full(&[1, 8, 8, 8], 1.0));
        let h5 = g.constant(Tensor::full(&[1, 8, 4, 4], 1.0));
        let y = cpfe_pyramid(&mut g, &pv, [h3, h4, h5], &cfg.head).unwrap();
        let out = g.value(y);
        assert!(out
            .channel_slice(128, 128)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(out
            .channel_slice(0, 128)
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
        assert!(out
            .channel_slice(256, 128)
            .unwrap()
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn channel_attention_zero_fc_is_half() {
        let cfg = small();
        let params = build_model(&cfg, 3).unwrap().zeroed();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let f = g.constant(Tensor::from_fn(&[2, 384, 2, 2], |i| i as f64 * 0.01));
        let (ca, weighted) = channel_attention(&mut g, &pv, f).unwrap();
        assert!(g.value(ca).data().iter().all(|&v| v == 0.5));
        let want = g.value(f).map(|v| 0.5 * v);
        assert_eq!(g.value(weighted), &want);
    }

    #[test]
    fn channel_attention_range_and_pool_linearity() {
        let cfg = small();
        let params = build_model(&cfg, 4).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let base = Tensor::from_fn(&[1, 384, 3, 3], |i| ((i * 31) % 17) as f64 - 8.0);
        let f = g.constant(base.clone());
        let (ca, _) = channel_attention(&mut g, &pv, f).unwrap();
        assert!(g.value(ca).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let f2 = g.constant(base.map(|v| 2.0 * v));
        let p1 = g.global_avg_pool(f).unwrap();
        let p2 = g.global_avg_pool(f2).unwrap();
        for (a, b) in g.value(p1).data().iter().zip(g.value(p2).data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_attention_shape_range_and_zero() {
        let cfg = small();
        let params = build_model(&cfg, 5).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let f = g.constant(Tensor::from_fn(&[2, 384, 8, 8], |i| {
            ((i % 13) as f64 - 6.0) * 0.1
        }));
        let sa = spatial_attention(&mut g, &pv, f, 5).unwrap();
        assert_eq!(g.value(sa).shape(), &[2, 1, 8, 8]);
        assert!(g.value(sa).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(spatial_attention(&mut g, &pv, f, 4).is_err());

        let zero = params.zeroed();
        let mut g = Graph::new();
        let pv = zero.bind(&mut g);
        let f = g.constant(Tensor::ones(&[1, 384, 4, 4]));
        let sa = spatial_attention(&mut g, &pv, f, 5).unwrap();
        assert!(g.value(sa).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn low_level_combine_shapes() {
        let cfg = ModelConfig {
            backbone: BackboneConfig::desk(),
            ..ModelConfig::default()
        };
        let params = build_model(&cfg, 6).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let l1 = g.constant(Tensor::full(&[1, 8, 16, 16], 0.2));
        let l2 = g.constant(Tensor::full(&[1, 16, 8, 8], 0.2));
        let y = low_level_combine(&mut g, &pv, l1, l2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64, 16, 16]);
        let bad = g.constant(Tensor::full(&[1, 16, 4, 4], 0.2));
        assert!(low_level_combine(&mut g, &pv, l1, bad).is_err());

        let zero = params.zeroed();
        let mut g = Graph::new();
        let pv = zero.bind(&mut g);
        let l1 = g.constant(Tensor::zeros(&[1, 8, 16, 16]));
        let l2 = g.constant(Tensor::zeros(&[1, 16, 8, 8]));
        let y = low_level_combine(&mut g, &pv, l1, l2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_forward_contract() {
        let cfg = small();
        let params = build_model(&cfg, 7).unwrap();
        let p = predict(&cfg, &params, &image(2, 32)).unwrap();
        assert_eq!(p.saliency.shape(), &[2, 1, 32, 32]);
        assert!(p.saliency.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p.attention.ca.unwrap().shape(), &[2, 384]);
        assert_eq!(p.attention.sa.unwrap().shape(), &[2, 1, 8, 8]);

        let zero = predict(&cfg, &params.zeroed(), &image(1, 32)).unwrap();
        assert!(zero.saliency.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let cfg = small();
        let params = build_model(&cfg, 8).unwrap();
        let a = predict(&cfg, &params, &image(1, 32)).unwrap();
        let b = predict(&cfg, &params, &image(1, 32)).unwrap();
        assert_eq!(a.saliency, b.saliency);
    }

    #[test]
    fn zeroed_gates_zero_their_targets() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 + 1.0));
        let ca = g.constant(Tensor::new(vec![1, 3], vec![0.3, 0.0, 0.9]).unwrap());
        let y = g.broadcast_mul(f, ca).unwrap();
        let out = g.value(y);
        assert!(out
            .channel_slice(1, 1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(out
            .channel_slice(0, 1)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v != 0.0));

        let sa = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.5, 0.0, 0.5, 0.5]).unwrap());
        let y = g.broadcast_mul(f, sa).unwrap();
        let out = g.value(y).data();
        for c in 0..3 {
            assert_eq!(out[c * 4 + 1], 0.0);
            assert_ne!(out[c * 4], 0.0);
        }
    }

    #[test]
    fn ablation_variants_run() {
        let variants = [
            Components {
                cpfe: false,
                channel_attention: false,
                low_level: false,
                spatial_attention: false,
            },
            Components {
                cpfe: true,
                channel_attention: false,
                low_level: false,
                spatial_attention: false,
            },
            Components {
                cpfe: true,
                channel_attention: true,
                low_level: true,
                spatial_attention: false,
            },
            Components {
                cpfe: false,
                channel_attention: false,
                low_level: true,
                spatial_attention: false,
            },
        ];
        for comps in variants {
            let mut cfg = small();
            cfg.head.components = comps;
            let params = build_model(&cfg, 9).unwrap();
            let p = predict(&cfg, &params, &image(1, 32)).unwrap();
            assert_eq!(p.saliency.shape(), &[1, 1, 32, 32]);
            assert_eq!(p.attention.ca.is_some(), comps.channel_attention);
        }
        let mut cfg = small();
        cfg.head.components.low_level = false;
        assert!(build_model(&cfg, 0).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let cfg = small();
        let params: ModelParams = build_model(&cfg, 10).unwrap();
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let x = g.constant(image(1, 32));
        let out = pfa_forward(&mut g, &cfg, &pv, x).unwrap();
        let l = g.sum(out.saliency);
        let grads = g.backward(l).unwrap().named();
        assert_eq!(grads.len(), params.len());
        for (name, grad) in &grads {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "{name} has zero gradient"
            );
        }
    }
}
