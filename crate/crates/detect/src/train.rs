//! Plain SGD over the synthetic scenes.

use std::collections::BTreeMap;

use dsa_core::{FeatureMap, Tensor};
use dsa_scenes::Scene;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{GammaMode, LossConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::loss::{build_targets, loss_nodes, ImageTargets, LossBreakdown};
use crate::model::Detector;

/// Learning rate for a zero-based epoch: ×0.1 once `ceil(0.75·E)` epochs are
/// done and again after all `E`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let first = (cfg.epochs * 3).div_ceil(4);
    let mut lr = cfg.lr;
    if epoch >= first {
        lr *= 0.1;
    }
    if epoch >= cfg.epochs {
        lr *= 0.1;
    }
    lr
}

/// Zero-based epochs after which the rate drops.
pub fn decay_epochs(cfg: &TrainConfig) -> [usize; 2] {
    [(cfg.epochs * 3).div_ceil(4), cfg.epochs]
}

pub fn is_frozen(model: &Detector, name: &str) -> bool {
    model.config().gamma_mode == GammaMode::Fixed && name.starts_with("dsa.") && name.ends_with(".gamma")
}

/// Loss and parameter gradients for one image, by parameter name.
pub fn image_gradients(
    model: &Detector,
    image: &FeatureMap,
    targets: &ImageTargets,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut fwd = model.build(image)?;
    let nodes = loss_nodes(&mut fwd.graph, &fwd.levels, targets, loss_cfg)?;
    let breakdown = nodes.breakdown(&fwd.graph);
    if !breakdown.is_finite() {
        return Ok((breakdown, BTreeMap::new()));
    }
    let mut grads = fwd.graph.backprop(nodes.total, &Tensor::scalar(1.0))?;
    let by_name = fwd.params.iter().map(|(n, &id)| (n.clone(), grads.take(id))).collect();
    Ok((breakdown, by_name))
}

/// Loss of one image without gradients.
pub fn image_loss(model: &Detector, image: &FeatureMap, targets: &ImageTargets, loss_cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut fwd = model.build(image)?;
    let nodes = loss_nodes(&mut fwd.graph, &fwd.levels, targets, loss_cfg)?;
    Ok(nodes.breakdown(&fwd.graph))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub steps: Vec<StepRecord>,
}

impl LossTrace {
    /// SHA-256 over the little-endian bytes of every step's four loss values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.steps {
            for v in [s.loss.focal, s.loss.box_loss, s.loss.confidence, s.loss.total] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.epoch == epoch)
    }

    pub fn epoch_mean(&self, epoch: usize) -> LossBreakdown {
        let v: Vec<_> = self.epoch(epoch).map(|s| s.loss).collect();
        LossBreakdown::mean(&v)
    }

    /// Mean total over the first `n` steps.
    pub fn initial_total(&self, n: usize) -> f64 {
        let v: Vec<_> = self.steps.iter().take(n).map(|s| s.loss).collect();
        LossBreakdown::mean(&v).total
    }

    /// Mean total over the last recorded epoch.
    pub fn final_total(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| self.epoch_mean(s.epoch).total)
    }
}

/// SGD state over one model and a fixed training set.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    targets: Vec<ImageTargets>,
    velocity: BTreeMap<String, Vec<f64>>,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(model: &Detector, scenes: &[Scene], cfg: TrainConfig, loss_cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        if scenes.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let targets = scenes
            .iter()
            .map(|s| {
                let (_, h, w) = s.image.dims();
                build_targets(&model.anchors(h, w), &s.gts, model.config().classes, &loss_cfg)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            loss_cfg,
            targets,
            velocity: BTreeMap::new(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn targets(&self) -> &[ImageTargets] {
        &self.targets
    }

    /// Visiting order for an epoch, drawn from the run seed.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut idx: Vec<usize> = (0..self.targets.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// One SGD update on the given images. Gradients are summed in the given
    /// order and divided by the batch length.
    pub fn step(&mut self, model: &mut Detector, scenes: &[Scene], batch: &[usize], lr: f64) -> Result<LossBreakdown> {
        let mut sum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let (loss, grads) = image_gradients(model, &scenes[i].image, &self.targets[i], &self.loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    step: self.step,
                    image: scenes[i].index,
                    loss: loss.total,
                });
            }
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g.into_data());
                    }
                }
            }
            losses.push(loss);
        }
        let scale = 1.0 / batch.len() as f64;
        let (momentum, decay) = (self.cfg.momentum, self.cfg.weight_decay);
        let frozen: Vec<String> = model
            .params()
            .names()
            .filter(|n| is_frozen(model, n))
            .cloned()
            .collect();
        for (name, p) in model.params_mut().iter_mut() {
            if frozen.contains(name) {
                continue;
            }
            let g = &sum[name];
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi * scale + decay * *w;
                *vi = momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(LossBreakdown::mean(&losses))
    }

    /// Runs the next epoch and appends its steps to `trace`.
    pub fn train_epoch(&mut self, model: &mut Detector, scenes: &[Scene], trace: &mut LossTrace) -> Result<LossBreakdown> {
        if scenes.len() != self.targets.len() {
            return Err(Error::invalid("scene count differs from the prepared targets"));
        }
        let lr = lr_at(&self.cfg, self.epoch);
        let order = self.order(self.epoch);
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(self.cfg.batch_size) {
            let loss = self.step(model, scenes, batch, lr)?;
            trace.steps.push(StepRecord {
                epoch: self.epoch,
                step: self.step - 1,
                lr,
                loss,
            });
            epoch_losses.push(loss);
        }
        self.epoch += 1;
        Ok(LossBreakdown::mean(&epoch_losses))
    }
}

/// Trains for the configured number of epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut Detector,
    scenes: &[Scene],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mut on_epoch: impl FnMut(usize, &Detector, &LossBreakdown) -> Result<()>,
) -> Result<LossTrace> {
    let mut trainer = Trainer::new(model, scenes, cfg.clone(), loss_cfg.clone())?;
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let mean = trainer.train_epoch(model, scenes, &mut trace)?;
        on_epoch(epoch, model, &mean)?;
    }
    Ok(trace)
}
