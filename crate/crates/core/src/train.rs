//! Epoch loop over a fixed set of examples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AutrModel;
use crate::numeric::AdamW;
use crate::objective::{batch_step, Example, TrainOptions};

/// Learning-rate schedule over all updates of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` down to 0 at the last update.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown lr_schedule {s:?}"))),
        }
    }

    /// Rate for update `step` of `total`.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let progress = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch example order.
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 5e-4,
            epochs: 50,
            batch_size: 8,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean matched cost over the epoch's examples.
    pub mean_loss: f64,
    pub steps: usize,
}

/// Trains `model` for `cfg.epochs` epochs, calling `on_epoch` after each;
/// an error from the callback stops training.
/// The example order is reshuffled every epoch from `cfg.shuffle_seed`.
pub fn fit(
    model: &mut AutrModel,
    examples: &[Example],
    cfg: &TrainConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochStats, &AutrModel) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    opts.weights.validate()?;
    if examples.is_empty() {
        return Err(Error::contract("no training examples"));
    }
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let updates = cfg.epochs * examples.len().div_ceil(cfg.batch_size);
    let mut update = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i]).collect();
            optimizer.lr = cfg.lr_schedule.rate(cfg.lr, update, updates);
            update += 1;
            total += batch_step(model, &mut optimizer, &batch, opts)?
                .iter()
                .map(|l| l.loss)
                .sum::<f64>();
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / examples.len() as f64,
            steps,
        };
        on_epoch(&stats, model)?;
        history.push(stats);
    }
    Ok(history)
}
