//! Training with projected weights.
//!
//! Each step projects the full-precision weights, runs forward and backward
//! with the projections, applies the update to the full-precision weights,
//! and clips them to their per-layer bounds. Biases and batch-norm
//! parameters are updated but never projected or clipped.

mod clip;
mod optim;

pub use clip::{clip_weights, prox_linf_ball, ClipPolicy};
pub use optim::{adam_update, sgd_update, AdamParams, AdamState, OptState, OptimizerKind};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness;
use crate::io::Dataset;
use crate::nn::{self, Mode, Network};
use crate::projections::{project_layers, ProjectionSpec, Use};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub step: u64,
    pub factor: f64,
}

pub(crate) fn validate_schedule(schedule: &[Milestone], what: &str) -> Result<()> {
    if schedule.windows(2).any(|w| w[0].step >= w[1].step) {
        return Err(Error::config(format!(
            "{what} milestones must be strictly increasing"
        )));
    }
    if schedule
        .iter()
        .any(|m| !(m.factor > 0.0 && m.factor.is_finite()))
    {
        return Err(Error::config(format!("{what} factors must be positive")));
    }
    Ok(())
}

fn default_lr() -> f64 {
    0.003
}
fn default_batch() -> usize {
    50
}
fn default_eval_every() -> usize {
    2
}
fn default_projection() -> ProjectionSpec {
    ProjectionSpec::None
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: Vec<Milestone>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_projection")]
    pub projection: ProjectionSpec,
    #[serde(default)]
    pub clip: ClipPolicy,
    /// Supplied by the enclosing experiment config.
    #[serde(skip)]
    pub seed: u64,
    /// When off, evaluation specs may be scored concurrently. Results do not
    /// change: every draw is keyed by seed, not by scheduling.
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: default_lr(),
            lr_schedule: Vec::new(),
            batch_size: default_batch(),
            epochs: 0,
            projection: ProjectionSpec::None,
            clip: ClipPolicy::default(),
            seed: 0,
            deterministic: true,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.projection
            .validate()
            .map_err(|e| Error::config(e.to_string()))?;
        validate_schedule(&self.lr_schedule, "learning-rate schedule")?;
        self.clip.validate()
    }

    /// Learning rate during iteration `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|m| m.step <= step)
            .fold(self.learning_rate, |lr, m| lr * m.factor)
    }

    /// Warning text when the training projection is a test-only distortion.
    pub fn projection_warning(&self) -> Option<String> {
        (self.projection.intended_use() == Use::Test).then(|| {
            format!(
                "projection `{}` is intended for testing, not training",
                self.projection
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub epoch: u64,
    pub iteration: u64,
    /// Mean training loss over the most recent epoch.
    pub loss: f64,
    /// Test error per evaluation spec, in the order of `TrainHistory::specs`.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainHistory {
    pub specs: Vec<ProjectionSpec>,
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    /// Error for `spec` at the last evaluation point.
    pub fn last_error(&self, spec: &ProjectionSpec) -> Option<f64> {
        let i = self.specs.iter().position(|s| s == spec)?;
        self.records.last().map(|r| r.errors[i])
    }
}

/// Mutable training state: network, optimizer moments and counters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub opt: OptState,
    /// Completed iterations.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    clip_bounds: Vec<f64>,
}

fn group_sizes(net: &Network) -> Vec<usize> {
    net.weights
        .iter()
        .chain(&net.biases)
        .map(Tensor::len)
        .chain(net.bn.iter().map(|s| s.gamma.len()))
        .chain(net.bn.iter().map(|s| s.beta.len()))
        .collect()
}

impl Trainer {
    /// Fresh trainer at iteration 0. Initial weights outside `[-c_k, c_k]`
    /// are clipped so the bound holds before the first projection.
    pub fn new(mut net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        let clip_bounds = config.clip.bounds_at(&net.init_std, 0);
        for (w, &c) in net.weights.iter_mut().zip(&clip_bounds) {
            clip::clip_in_place(w.data_mut(), c);
        }
        let opt = OptState::new(config.optimizer, &group_sizes(&net));
        Ok(Self {
            net,
            config,
            opt,
            step: 0,
            epoch: 0,
            clip_bounds,
        })
    }

    /// Resumes from saved state.
    pub fn resume(
        net: Network,
        config: TrainConfig,
        opt: OptState,
        step: u64,
        epoch: u64,
    ) -> Result<Self> {
        config.validate()?;
        net.validate()?;
        if opt.kind() != config.optimizer {
            return Err(Error::config(
                "saved optimizer state does not match configured optimizer",
            ));
        }
        if let OptState::Adam(s) = &opt {
            let sizes = group_sizes(&net);
            let ok = s.m.len() == sizes.len()
                && s.v.len() == sizes.len()
                && s.m
                    .iter()
                    .zip(&s.v)
                    .zip(&sizes)
                    .all(|((m, v), &n)| m.len() == n && v.len() == n);
            if !ok {
                return Err(Error::config(
                    "saved optimizer moments do not match the network",
                ));
            }
        }
        // milestones strictly before `step` have already been applied
        let clip_bounds = match step.checked_sub(1) {
            Some(prev) => config.clip.bounds_at(&net.init_std, prev),
            None => config.clip.bounds_at(&net.init_std, 0),
        };
        Ok(Self {
            net,
            config,
            opt,
            step,
            epoch,
            clip_bounds,
        })
    }

    pub fn clip_bounds(&self) -> &[f64] {
        &self.clip_bounds
    }

    /// One iteration on a minibatch; returns the loss.
    pub fn train_step(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        if self.step > 0 {
            if let Some(m) = self
                .config
                .clip
                .schedule
                .iter()
                .find(|m| m.step == self.step)
            {
                self.clip_bounds.iter_mut().for_each(|c| *c *= m.factor);
            }
        }
        let lr = self.config.learning_rate_at(self.step);

        let projected = project_layers(
            &self.net.weights,
            &self.config.projection,
            self.config.seed,
            self.step,
        )?;
        let (logits, cache) = nn::forward(&self.net, &projected, batch, Mode::Train)?;
        let targets = nn::one_vs_rest(labels, logits.shape()[1])?;
        if labels.len() != logits.shape()[0] {
            return Err(Error::config("label count does not match batch size"));
        }
        let (loss, dloss) = nn::square_hinge_loss(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                layer: self.net.layers.len(),
                detail: format!("non-finite loss at iteration {}", self.step),
            });
        }
        // gradients are taken at the projected weights
        let grads = nn::backward(&self.net, &cache, &dloss)?;
        self.net.apply_batch_stats(&cache)?;

        let grad_groups: Vec<&[f64]> = grads
            .weights
            .iter()
            .chain(&grads.biases)
            .map(Tensor::data)
            .chain(grads.bn_gamma.iter().map(Vec::as_slice))
            .chain(grads.bn_beta.iter().map(Vec::as_slice))
            .collect();
        let deltas = self.opt.deltas(&grad_groups, lr);

        let net = &mut self.net;
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(deltas.len());
        params.extend(net.weights.iter_mut().map(Tensor::data_mut));
        params.extend(net.biases.iter_mut().map(Tensor::data_mut));
        let (gammas, betas): (Vec<_>, Vec<_>) = net
            .bn
            .iter_mut()
            .map(|s| (s.gamma.as_mut_slice(), s.beta.as_mut_slice()))
            .unzip();
        params.extend(gammas);
        params.extend(betas);
        for (p, d) in params.into_iter().zip(&deltas) {
            for (p, d) in p.iter_mut().zip(d) {
                *p += d;
            }
        }

        for (w, &c) in self.net.weights.iter_mut().zip(&self.clip_bounds) {
            clip::clip_in_place(w.data_mut(), c);
        }
        self.step += 1;
        Ok(loss)
    }

    /// One pass of shuffled minibatches; returns the mean loss. A trailing
    /// partial batch is dropped when at least one full batch exists.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        let n = data.len();
        if n == 0 {
            return Err(Error::input("training set is empty"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(
            self.config.seed,
            Domain::Shuffle,
            self.epoch,
            0,
        ));
        let bs = self.config.batch_size.min(n);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(bs).filter(|c| c.len() == bs) {
            let batch = data.images.gather_outer(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            total += self.train_step(&batch, &labels)?;
            count += 1;
        }
        self.epoch += 1;
        Ok(total / count as f64)
    }

    /// Trains until `config.epochs` epochs are complete, evaluating every
    /// `eval_every` epochs and after the final one.
    pub fn fit(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        eval_specs: &[ProjectionSpec],
    ) -> Result<TrainHistory> {
        self.fit_with(train, test, eval_specs, |_| Ok(()))
    }

    /// [`Trainer::fit`] calling `after_epoch` once each epoch is complete
    /// and evaluated.
    pub fn fit_with(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        eval_specs: &[ProjectionSpec],
        mut after_epoch: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<TrainHistory> {
        let mut history = TrainHistory {
            specs: eval_specs.to_vec(),
            records: Vec::new(),
        };
        let target = self.config.epochs as u64;
        while self.epoch < target {
            let loss = self.run_epoch(train)?;
            let every = self.config.eval_every as u64;
            let due = every > 0 && (self.epoch.is_multiple_of(every) || self.epoch == target);
            if due && !eval_specs.is_empty() {
                let errors = self.evaluate_all(train, test, eval_specs)?;
                history.records.push(EvalRecord {
                    epoch: self.epoch,
                    iteration: self.step,
                    loss,
                    errors,
                });
            }
            after_epoch(self)?;
        }
        Ok(history)
    }

    fn evaluate_all(
        &self,
        train: &Dataset,
        test: &Dataset,
        specs: &[ProjectionSpec],
    ) -> Result<Vec<f64>> {
        let eval = |i: usize| {
            harness::evaluate(
                &self.net,
                &specs[i],
                train,
                test,
                eval_seed(self.config.seed, self.epoch, i),
            )
        };
        if self.config.deterministic {
            (0..specs.len()).map(eval).collect()
        } else {
            use rayon::prelude::*;
            (0..specs.len()).into_par_iter().map(eval).collect()
        }
    }
}

/// Distortion seed for the `index`-th evaluation spec after `epoch` epochs.
pub fn eval_seed(seed: u64, epoch: u64, index: usize) -> u64 {
    rng::stream(seed, Domain::Evaluation, epoch, index as u64).random::<u64>()
}

/// Trains `net` under `cfg` and returns the final network and its history.
pub fn train(
    net: Network,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    eval_specs: &[ProjectionSpec],
) -> Result<(Network, TrainHistory)> {
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let history = trainer.fit(train, test, eval_specs)?;
    Ok((trainer.net, history))
}
