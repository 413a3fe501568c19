//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Unknown
//! or repeated keys are errors. Relative paths resolve against the directory of
//! the configuration file. [`RunConfig::render`] prints every key with its
//! current value, which for [`RunConfig::default`] documents the defaults.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::autodiff::Reduction;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory (`images/`, `masks/`) used for training.
    pub train_dir: Option<PathBuf>,
    /// Held-out dataset evaluated after every epoch.
    pub val_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let mut model = ModelConfig::default();
        model.backbone.input_size = train.image_size;
        Self {
            model,
            train,
            train_dir: None,
            val_dir: None,
        }
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("{p:?} is not a count"))
        })
        .collect()
}

fn parse_five(v: &str) -> std::result::Result<[usize; 5], String> {
    parse_list(v)?
        .try_into()
        .map_err(|l: Vec<usize>| format!("expected 5 comma-separated values, got {}", l.len()))
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| {
        format!(
            "cannot parse {v:?} as {}",
            std::any::type_name::<T>()
                .rsplit("::")
                .next()
                .unwrap_or("value")
        )
    })
}

fn parse_size(v: &str) -> std::result::Result<(usize, usize), String> {
    match v.split_once('x') {
        Some((h, w)) => Ok((parse(h.trim())?, parse(w.trim())?)),
        None => {
            let s = parse(v)?;
            Ok((s, s))
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Augmentation keys may come in any order relative to `augment.enabled`.
#[derive(Default)]
struct Parser {
    augment: AugmentConfig,
    augment_enabled: bool,
}

impl Parser {
    fn set(
        &mut self,
        cfg: &mut RunConfig,
        key: &str,
        value: &str,
        base: &Path,
    ) -> std::result::Result<(), String> {
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        let a = &mut self.augment;
        match key {
            "seed" => t.seed = parse(value)?,
            "image_size" => {
                t.image_size = parse_size(value)?;
                m.backbone.input_size = t.image_size;
            }
            "train_dir" => cfg.train_dir = Some(base.join(value)),
            "val_dir" => cfg.val_dir = Some(base.join(value)),
            "backbone.stage_channels" => m.backbone.stage_channels = parse_five(value)?,
            "backbone.convs_per_stage" => m.backbone.convs_per_stage = parse_five(value)?,
            "cpfe.dilations" => m.head.cpfe.dilations = parse_list(value)?,
            "cpfe.branch_channels" => m.head.cpfe.branch_channels = parse(value)?,
            "head.ca_reduction" => m.head.ca_reduction = parse(value)?,
            "head.sa_kernel" => m.head.sa_kernel = parse(value)?,
            "head.low_channels" => m.head.low_channels = parse(value)?,
            "head.fuse_channels" => m.head.fuse_channels = parse(value)?,
            "head.cpfe" => m.head.components.cpfe = parse(value)?,
            "head.channel_attention" => m.head.components.channel_attention = parse(value)?,
            "head.spatial_attention" => m.head.components.spatial_attention = parse(value)?,
            "head.low_level" => m.head.components.low_level = parse(value)?,
            "loss.alpha_s" => t.alpha_s = parse(value)?,
            "loss.clamp_eps" => t.clamp_eps = parse(value)?,
            "loss.mode" => {
                t.loss_mode = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(format!("loss.mode must be mean or sum, got {value:?}")),
                }
            }
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.momentum" => t.momentum = parse(value)?,
            "train.max_grad_norm" => {
                t.max_grad_norm = match value {
                    "none" => None,
                    v => Some(parse(v)?),
                }
            }
            "phase1.alpha" => t.phase1.alpha = parse(value)?,
            "phase1.lr" => t.phase1.lr = parse(value)?,
            "phase1.epochs" => t.phase1.epochs = parse(value)?,
            "phase2.alpha" => t.phase2.alpha = parse(value)?,
            "phase2.lr" => t.phase2.lr = parse(value)?,
            "phase2.epochs" => t.phase2.epochs = parse(value)?,
            "augment.enabled" => self.augment_enabled = parse(value)?,
            "augment.rotate_max_deg" => a.rotate_max_deg = parse(value)?,
            "augment.crop_fraction" => a.crop_fraction = parse(value)?,
            "augment.brightness" => a.brightness = parse(value)?,
            "augment.saturation" => a.saturation = parse(value)?,
            "augment.contrast" => a.contrast = parse(value)?,
            "augment.hflip_prob" => a.hflip_prob = parse(value)?,
            "augment.seed" => a.seed = parse(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn finish(self, cfg: &mut RunConfig) {
        cfg.train.augment = self.augment_enabled.then_some(self.augment);
    }
}

impl RunConfig {
    /// Parses configuration text. `origin` names the source in errors and its
    /// parent directory anchors relative paths.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let base = origin.parent().unwrap_or(Path::new(""));
        let mut cfg = RunConfig::default();
        let mut parser = Parser::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine {
                path: origin.display().to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key {key:?} given twice")));
            }
            parser.set(&mut cfg, key, value, base).map_err(err)?;
        }
        parser.finish(&mut cfg);
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    /// Every key with its current value, one per line.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let aug = t.augment.clone().unwrap_or_default();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![
            ("seed", t.seed.to_string()),
            (
                "image_size",
                format!("{}x{}", t.image_size.0, t.image_size.1),
            ),
        ];
        if let Some(p) = path(&self.train_dir) {
            lines.push(("train_dir", p));
        }
        if let Some(p) = path(&self.val_dir) {
            lines.push(("val_dir", p));
        }
        lines.extend([
            ("backbone.stage_channels", join(&m.backbone.stage_channels)),
            (
                "backbone.convs_per_stage",
                join(&m.backbone.convs_per_stage),
            ),
            ("cpfe.dilations", join(&m.head.cpfe.dilations)),
            (
                "cpfe.branch_channels",
                m.head.cpfe.branch_channels.to_string(),
            ),
            ("head.ca_reduction", m.head.ca_reduction.to_string()),
            ("head.sa_kernel", m.head.sa_kernel.to_string()),
            ("head.low_channels", m.head.low_channels.to_string()),
            ("head.fuse_channels", m.head.fuse_channels.to_string()),
            ("head.cpfe", m.head.components.cpfe.to_string()),
            (
                "head.channel_attention",
                m.head.components.channel_attention.to_string(),
            ),
            (
                "head.spatial_attention",
                m.head.components.spatial_attention.to_string(),
            ),
            ("head.low_level", m.head.components.low_level.to_string()),
            ("loss.alpha_s", format!("{:?}", t.alpha_s)),
            ("loss.clamp_eps", format!("{:?}", t.clamp_eps)),
            (
                "loss.mode",
                match t.loss_mode {
                    Reduction::Mean => "mean".into(),
                    Reduction::Sum => "sum".into(),
                },
            ),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.momentum", format!("{:?}", t.momentum)),
            (
                "train.max_grad_norm",
                t.max_grad_norm
                    .map_or_else(|| "none".into(), |m| format!("{m:?}")),
            ),
            ("phase1.alpha", format!("{:?}", t.phase1.alpha)),
            ("phase1.lr", format!("{:?}", t.phase1.lr)),
            ("phase1.epochs", t.phase1.epochs.to_string()),
            ("phase2.alpha", format!("{:?}", t.phase2.alpha)),
            ("phase2.lr", format!("{:?}", t.phase2.lr)),
            ("phase2.epochs", t.phase2.epochs.to_string()),
            ("augment.enabled", t.augment.is_some().to_string()),
            (
                "augment.rotate_max_deg",
                format!("{:?}", aug.rotate_max_deg),
            ),
            ("augment.crop_fraction", format!("{:?}", aug.crop_fraction)),
            ("augment.brightness", format!("{:?}", aug.brightness)),
            ("augment.saturation", format!("{:?}", aug.saturation)),
            ("augment.contrast", format!("{:?}", aug.contrast)),
            ("augment.hflip_prob", format!("{:?}", aug.hflip_prob)),
            ("augment.seed", aug.seed.to_string()),
        ]);
        lines
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
