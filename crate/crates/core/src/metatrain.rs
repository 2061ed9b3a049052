//! Meta-training: per-task stochastic gradient descent on the summed negative
//! log marginal likelihood of the meta-tasks.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gp::{lml_gradient_for, log_marginal_likelihood, GpPrior, ParamGroups};
use crate::linalg::DenseMatrix;
use crate::scalar::{c, Scalar};
use crate::tasks::RegressionTask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub trainable: ParamGroups,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Rescales any per-task gradient whose L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            trainable: ParamGroups::ALL,
            seed: 0,
            shuffle_each_epoch: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.trainable.is_empty() {
            return Err(Error::Config("no trainable parameter group".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::Config(format!("gradient clip {clip}")));
            }
        }
        Ok(())
    }
}

/// Meta-loss per epoch: the sum of the per-task losses met during the epoch,
/// each evaluated just before that task's update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub per_epoch: Vec<f64>,
}

impl LossTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,meta_loss")?;
        for (i, v) in self.per_epoch.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, v)?;
        }
        Ok(())
    }
}

fn observations<T: Scalar>(tasks: &[RegressionTask<T>]) -> Result<Vec<(DenseMatrix<T>, Vec<T>)>> {
    if tasks.is_empty() {
        return Err(Error::Config("no meta-tasks".into()));
    }
    Ok(tasks.iter().map(|t| t.all_observations()).collect())
}

/// `Σᵢ −log p(yᵢ | xᵢ)` over the context and test points of every task.
pub fn meta_loss<T: Scalar>(p: &GpPrior<T>, tasks: &[RegressionTask<T>]) -> Result<T> {
    let mut total = T::zero();
    for (index, (x, y)) in observations(tasks)?.iter().enumerate() {
        total -= log_marginal_likelihood(p, x, y).map_err(|e| in_task(index, e))?;
    }
    Ok(total)
}

fn in_task(index: usize, e: Error) -> Error {
    Error::InTask {
        index,
        source: Box::new(e),
    }
}

pub fn meta_train<T: Scalar>(
    p0: &GpPrior<T>,
    tasks: &[RegressionTask<T>],
    cfg: &TrainConfig,
) -> Result<(GpPrior<T>, LossTrace)> {
    meta_train_with(p0, tasks, cfg, |_, _, _| Ok(()))
}

/// As [`meta_train`], calling `after_epoch(epoch, prior, loss)` at the end of
/// each epoch (epochs counted from 1).
pub fn meta_train_with<T: Scalar>(
    p0: &GpPrior<T>,
    tasks: &[RegressionTask<T>],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(usize, &GpPrior<T>, f64) -> Result<()>,
) -> Result<(GpPrior<T>, LossTrace)> {
    cfg.validate()?;
    let data = observations(tasks)?;
    let mut prior = p0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let step = c::<T>(cfg.learning_rate);
    let mut trace = LossTrace::default();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle_each_epoch {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for &i in &order {
            let (x, y) = &data[i];
            let eval = lml_gradient_for(&prior, x, y, cfg.trainable).map_err(|e| in_task(i, e))?;
            total -= eval.value.to_real();
            let mut g = eval.gradient;
            g.mask(cfg.trainable);
            if !g.is_finite() {
                return Err(Error::Diverged { epoch, what: "gradient" });
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = g.norm().to_real();
                if norm > clip {
                    g.scale(c(clip / norm));
                }
            }
            // Ascent on the LML is descent on the loss.
            prior.apply_step(&g, step);
            if !prior.is_finite() {
                return Err(Error::Diverged { epoch, what: "parameters" });
            }
        }
        if !total.is_finite() {
            return Err(Error::Diverged { epoch, what: "loss" });
        }
        trace.per_epoch.push(total);
        after_epoch(epoch, &prior, total)?;
    }
    Ok((prior, trace))
}
