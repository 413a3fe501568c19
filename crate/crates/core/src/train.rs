//! SGD with momentum and the two-phase training schedule.

use std::io::Write;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Reduction};
use crate::data::{augment, batch, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossConfig, DEFAULT_ALPHA_S, DEFAULT_CLAMP_EPS};
use crate::metrics::evaluate_dataset;
use crate::model::{build_model, pfa_forward, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ModelParams,
}

impl SgdState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            velocity: params.zeroed(),
        }
    }
}

/// In place: `v ← momentum·v + g`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &IndexMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::Parameter {
            name: name.to_string(),
            msg: "no gradient for trainable parameter".into(),
        })?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::Parameter {
                name: name.to_string(),
                msg: "no momentum buffer".into(),
            })?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Parameter {
                name: name.to_string(),
                msg: format!(
                    "gradient {:?} / velocity {:?} do not match parameter {:?}",
                    g.shape(),
                    v.shape(),
                    p.shape()
                ),
            });
        }
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Scales every gradient by `max_norm / ‖g‖` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase1: Phase,
    pub phase2: Phase,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global L2 cap on the gradient before each update; `None` disables it.
    /// The edge term's gradient grows like `1/|lap P|` where the prediction is
    /// flat across a true boundary, and unclipped spikes derail phase 2.
    pub max_grad_norm: Option<f64>,
    pub image_size: (usize, usize),
    /// Seeds initialization and the per-epoch shuffles.
    pub seed: u64,
    pub loss_mode: Reduction,
    pub alpha_s: f64,
    pub clamp_eps: f64,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: Phase {
                alpha: 1.0,
                lr: 1e-2,
                epochs: 30,
            },
            phase2: Phase {
                alpha: 0.7,
                lr: 1e-3,
                epochs: 10,
            },
            batch_size: 8,
            momentum: 0.9,
            max_grad_norm: Some(1.0),
            image_size: (64, 64),
            seed: 0,
            loss_mode: Reduction::Mean,
            alpha_s: DEFAULT_ALPHA_S,
            clamp_eps: DEFAULT_CLAMP_EPS,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in [self.phase1, self.phase2].iter().enumerate() {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("phase{} lr must be positive", i + 1)));
            }
            self.loss_config(p).validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {m}"
                )));
            }
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be positive and divisible by 16"
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn loss_config(&self, phase: &Phase) -> LossConfig {
        LossConfig {
            alpha_s: self.alpha_s,
            alpha: phase.alpha,
            clamp_eps: self.clamp_eps,
            reduction: self.loss_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Global, starting at 1.
    pub step: usize,
    pub phase: usize,
    /// Within the phase, starting at 1.
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mae: Option<f64>,
    pub val_max_f: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Duration,
}

/// Wall time is excluded so identical runs compare equal.
impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.epochs == other.epochs
    }
}

impl TrainLog {
    /// `step,epoch,phase,loss`; losses use the shortest exact decimal form.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,epoch,phase,loss")?;
        for r in &self.steps {
            writeln!(out, "{},{},{},{:?}", r.step, r.epoch, r.phase, r.loss)?;
        }
        Ok(())
    }

    /// `phase,epoch,mean_loss,val_mae,val_max_f` with empty cells when no validation ran.
    pub fn write_epoch_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "phase,epoch,mean_loss,val_mae,val_max_f")?;
        let cell = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{:?},{},{}",
                r.phase,
                r.epoch,
                r.mean_loss,
                cell(r.val_mae),
                cell(r.val_max_f)
            )?;
        }
        Ok(())
    }

    /// Mean epoch losses in order, across both phases.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// One `[1, H, W]` saliency map per sample (the mask layout), computed in batches.
pub fn predict_samples(
    model: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = batch(&refs)?;
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let x = g.constant(images);
        let out = pfa_forward(&mut g, model, &pv, x)?;
        let sal = g.value(out.saliency);
        let (h, w) = (sal.shape()[2], sal.shape()[3]);
        for i in 0..chunk.len() {
            maps.push(sal.batch_item(i)?.reshape(&[1, h, w])?);
        }
    }
    Ok(maps)
}

/// Training state that can be advanced one phase at a time. Cloning after
/// phase 1 lets several phase-2 variants share the same starting point.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    model: ModelConfig,
    config: TrainConfig,
    train_set: &'a [Sample],
    validation: &'a [Sample],
    params: ModelParams,
    log: TrainLog,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &ModelConfig,
        config: &TrainConfig,
        train_set: &'a [Sample],
        validation: &'a [Sample],
    ) -> Result<Self> {
        let params = build_model(model, config.seed)?;
        Self::from_params(model, config, train_set, validation, params)
    }

    pub fn from_params(
        model: &ModelConfig,
        config: &TrainConfig,
        train_set: &'a [Sample],
        validation: &'a [Sample],
        params: ModelParams,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if model.backbone.input_size != config.image_size {
            return Err(Error::Config(format!(
                "model input size {:?} differs from training image size {:?}",
                model.backbone.input_size, config.image_size
            )));
        }
        for s in train_set.iter().chain(validation) {
            if s.size() != config.image_size {
                return Err(Error::Config(format!(
                    "sample {} is {:?}, expected {:?}",
                    s.id,
                    s.size(),
                    config.image_size
                )));
            }
        }
        Ok(Self {
            model: model.clone(),
            config: config.clone(),
            train_set,
            validation,
            params,
            log: TrainLog::default(),
            step: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Runs one phase from a fresh momentum buffer. Shuffles are keyed by
    /// `(seed, phase, epoch)`, so a phase replays identically after cloning.
    pub fn run_phase(&mut self, phase_no: usize, phase: &Phase) -> Result<()> {
        let started = Instant::now();
        let loss_cfg = self.config.loss_config(phase);
        let mut state = SgdState::new(&self.params);
        let n = self.train_set.len();
        for epoch in 1..=phase.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(((phase_no as u64) << 32) | epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);

            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size) {
                let augmented: Vec<Sample>;
                let refs: Vec<&Sample> = match &self.config.augment {
                    Some(aug) => {
                        // Fresh draws every epoch and phase.
                        let offset = ((phase_no - 1) * 100_000 + epoch) * n;
                        augmented = chunk
                            .iter()
                            .map(|&i| augment(&self.train_set[i], aug, offset + i))
                            .collect();
                        augmented.iter().collect()
                    }
                    None => chunk.iter().map(|&i| &self.train_set[i]).collect(),
                };
                let (images, masks) = batch(&refs)?;
                self.step += 1;
                let loss = self.train_step(
                    &images, &masks, &loss_cfg, phase, &mut state, phase_no, epoch,
                )?;
                self.log.steps.push(StepRecord {
                    step: self.step,
                    phase: phase_no,
                    epoch,
                    loss,
                });
                epoch_loss += loss;
                batches += 1;
            }

            let (val_mae, val_max_f) = if self.validation.is_empty() {
                (None, None)
            } else {
                let maps = predict_samples(
                    &self.model,
                    &self.params,
                    self.validation,
                    self.config.batch_size,
                )?;
                let pairs: Vec<(Tensor, Tensor)> = maps
                    .into_iter()
                    .zip(self.validation)
                    .map(|(p, s)| (p, s.mask.clone()))
                    .collect();
                let report = evaluate_dataset(&pairs)?;
                (Some(report.mae), Some(report.max_f))
            };
            self.log.epochs.push(EpochRecord {
                phase: phase_no,
                epoch,
                mean_loss: epoch_loss / batches as f64,
                val_mae,
                val_max_f,
            });
        }
        self.log.wall_time += started.elapsed();
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        images: &Tensor,
        masks: &Tensor,
        loss_cfg: &LossConfig,
        phase: &Phase,
        state: &mut SgdState,
        phase_no: usize,
        epoch: usize,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g);
        let x = g.constant(images.clone());
        let out = pfa_forward(&mut g, &self.model, &pv, x)?;
        let terms = total_loss(&mut g, out.saliency, masks, loss_cfg)?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                phase: phase_no,
                epoch,
                value: loss,
            });
        }
        let mut grads = g.backward(terms.total)?.named();
        if let Some(max) = self.config.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        sgd_step(
            &mut self.params,
            &grads,
            phase.lr,
            self.config.momentum,
            state,
        )?;
        Ok(loss)
    }

    pub fn finish(self) -> (ModelParams, TrainLog) {
        (self.params, self.log)
    }
}

/// Phase 1 then phase 2, as configured.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    train_set: &[Sample],
    validation: &[Sample],
) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(model, config, train_set, validation)?;
    trainer.run_phase(1, &config.phase1)?;
    trainer.run_phase(2, &config.phase2)?;
    Ok(trainer.finish())
}
