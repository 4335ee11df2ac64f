//! Mini-batch SGD training on slice groups with the dice loss.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::T2DNet;
use crate::optim::{lr_schedule, OptimizerState};
use crate::tensor::Real;
use crate::volume::{pad_or_crop, Axis, Kind, SliceGroupBatch, Volume};

/// Additive smoothing in the dice loss; keeps empty-mask groups finite.
pub const DSC_SMOOTH: Real = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
    pub seed: u64,
    /// Axis the slice groups are drawn along.
    pub axis: Axis,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 8,
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            seed: 0,
            axis: Axis::Axial,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iteration: usize,
    pub lr: Real,
    pub loss: Real,
}

/// Draws slice groups uniformly over every (volume, start) pair, with a
/// seeded reshuffle at each epoch boundary.
pub struct GroupSampler<'a> {
    cases: &'a [(Volume, Volume)],
    axis: Axis,
    k: usize,
    s: usize,
    rng: ChaCha8Rng,
    order: Vec<(usize, usize)>,
    cursor: usize,
}

impl<'a> GroupSampler<'a> {
    /// `cases` pairs each intensity volume with its mask.
    pub fn new(
        cases: &'a [(Volume, Volume)],
        axis: Axis,
        k: usize,
        s: usize,
        seed: u64,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("sampler needs at least one volume".into()));
        }
        let mut order = Vec::new();
        for (ci, (img, mask)) in cases.iter().enumerate() {
            if img.dims() != mask.dims() {
                return Err(Error::Shape(format!(
                    "case {ci}: image dims {:?} do not match mask dims {:?}",
                    img.dims(),
                    mask.dims()
                )));
            }
            if mask.kind != Kind::Mask {
                return Err(Error::Config(format!("case {ci}: label is not a mask")));
            }
            let extent = img.axis_extent(axis);
            if extent < k {
                return Err(Error::Shape(format!(
                    "case {ci}: {extent} slices along {} cannot host thickness {k}",
                    axis.name()
                )));
            }
            for start in 1..=extent - k + 1 {
                order.push((ci, start));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sampler"));
        order.shuffle(&mut rng);
        Ok(GroupSampler {
            cases,
            axis,
            k,
            s,
            rng,
            order,
            cursor: 0,
        })
    }

    /// Number of distinct (volume, start) pairs in one epoch.
    pub fn epoch_len(&self) -> usize {
        self.order.len()
    }

    pub fn next_batch(&mut self, size: usize) -> Result<SliceGroupBatch> {
        let mut starts = Vec::with_capacity(size);
        let mut data = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let (ci, start) = self.order[self.cursor];
            self.cursor += 1;
            let (img, mask) = &self.cases[ci];
            let (x, _) = pad_or_crop(&img.extract_group(self.axis, start, self.k)?, self.s, self.s)?;
            let (y, _) = pad_or_crop(&mask.extract_group(self.axis, start, self.k)?, self.s, self.s)?;
            starts.push(start);
            data.push(x);
            labels.push(y);
        }
        Ok(SliceGroupBatch {
            axis: self.axis,
            starts,
            k: self.k,
            data,
            labels: Some(labels),
        })
    }
}

/// Runs the training loop: one tape per batch, mean dice loss over the
/// batch, SGD with the step-decay schedule. `next_batch` is called once per
/// iteration; `on_iter` sees the updated network after every step.
///
/// A non-finite loss aborts immediately rather than training onwards.
pub fn train<S, C>(
    net: &mut T2DNet,
    mut next_batch: S,
    cfg: &TrainConfig,
    mut on_iter: C,
) -> Result<Vec<LossPoint>>
where
    S: FnMut(usize) -> Result<SliceGroupBatch>,
    C: FnMut(&T2DNet, &LossPoint) -> Result<()>,
{
    cfg.validate()?;
    let mut opt = OptimizerState::new(net.tensors(), cfg.momentum, cfg.weight_decay, cfg.base_lr);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let lr = lr_schedule(iteration, cfg.iterations, cfg.base_lr);
        let batch = next_batch(iteration)?;
        batch.validate()?;
        if batch.is_empty() {
            return Err(Error::Config(format!("iteration {iteration}: empty batch")));
        }
        if batch.k != net.config.k {
            return Err(Error::Shape(format!(
                "batch thickness {} does not match network thickness {}",
                batch.k, net.config.k
            )));
        }
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("training batch has no labels".into()))?;

        let mut tape = Tape::new();
        let params = net.leaf_params(&mut tape, true);
        let mut sum: Option<Var> = None;
        for (x, y) in batch.data.iter().zip(labels) {
            let xv = tape.leaf(x.clone());
            let yv = tape.leaf(y.clone());
            let out = net.forward_with(&mut tape, &params, xv)?;
            let li = tape.dsc_loss(out, yv, DSC_SMOOTH)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, li)?,
                None => li,
            });
        }
        let loss_var = tape.scale(sum.expect("batch is non-empty"), 1.0 / batch.len() as Real)?;
        let loss = tape.value(loss_var).data[0];
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at iteration {iteration}; \
                 lower base_lr (currently {}) or weight_decay (currently {})",
                cfg.base_lr, cfg.weight_decay
            )));
        }
        tape.backward(loss_var)?;
        net.pull_grads(&tape, &params)?;
        opt.step(net.tensors_mut(), lr)?;

        let point = LossPoint {
            iteration,
            lr,
            loss,
        };
        on_iter(net, &point)?;
        curve.push(point);
    }
    Ok(curve)
}

/// [`train`] fed by a [`GroupSampler`] over `cases`, no per-iteration hook.
pub fn train_sampled(
    net: &mut T2DNet,
    cases: &[(Volume, Volume)],
    cfg: &TrainConfig,
) -> Result<Vec<LossPoint>> {
    let mut sampler = GroupSampler::new(cases, cfg.axis, net.config.k, net.config.input_size, cfg.seed)?;
    train(net, |_| sampler.next_batch(cfg.batch_size), cfg, |_, _| Ok(()))
}
