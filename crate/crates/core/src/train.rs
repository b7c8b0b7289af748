//! Generic minibatch training loop shared by teacher training, sub-task
//! distillation and ensemble fine-tuning, plus plain supervised training
//! of a single ViT.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{ordered_batches, shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, clip_grad_norm, cosine_multiplier, AdamWHyper, AdamWState};
use crate::rng::splitmix64;
use crate::tensor::Tensor;
use crate::vit::{vit_forward, ViTModel};

/// Per-stage optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: f32,
    pub min_learning_rate: f32,
    pub batch_size: usize,
    pub weight_decay: f32,
    pub rho1: f32,
    pub rho2: f32,
    pub eps: f32,
    /// Optimiser steps (`I_max`).
    pub steps: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub max_grad_norm: f32,
    /// Validate every this many steps; `0` validates only at the end.
    pub eval_every: u64,
    /// Stop after this many validations without improvement; `0` never stops early.
    pub patience: u32,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            batch_size: 32,
            weight_decay: 0.05,
            rho1: 0.9,
            rho2: 0.999,
            eps: 1e-8,
            steps: 300,
            max_grad_norm: 1.0,
            eval_every: 25,
            patience: 0,
        }
    }
}

impl TrainSettings {
    /// `weight_decay` is per unit learning rate, so `λ = learning_rate · weight_decay`.
    pub fn hyper(&self) -> AdamWHyper {
        let lambda = self.learning_rate * self.weight_decay;
        AdamWHyper { mu: self.learning_rate, rho1: self.rho1, rho2: self.rho2, lambda, eps: self.eps }
    }

    /// Multiplier relative to `learning_rate`: the decoupled decay `λθ` is
    /// applied with the same schedule as the adaptive step.
    pub fn schedule(&self, t: u64) -> f32 {
        let floor = if self.learning_rate > 0.0 { self.min_learning_rate / self.learning_rate } else { 0.0 };
        cosine_multiplier(t, self.steps, floor.clamp(0.0, 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.rho1) || !(0.0..1.0).contains(&self.rho2) {
            return Err(Error::config("rho1 and rho2 must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One curve record. Validation fields are present on evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvePoint {
    pub step: u64,
    pub loss_pred: f64,
    pub loss_feat: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Loss terms of one step: the scalar to minimise and its reported parts.
pub struct StepLoss {
    pub total: Var,
    pub pred: f64,
    pub feat: f64,
}

#[derive(Clone, Debug)]
pub struct Validation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    /// Parameters at the best validation loss.
    pub model: M,
    pub curve: Vec<CurvePoint>,
    pub best_step: u64,
    pub best_val: Option<Validation>,
    pub steps_run: u64,
    pub stopped_early: bool,
}

/// Anything with an ordered list of trainable tensors.
pub trait Trainable: Clone {
    fn trainable(&mut self) -> Vec<&mut Tensor>;
}

impl Trainable for ViTModel {
    fn trainable(&mut self) -> Vec<&mut Tensor> {
        self.params_mut()
    }
}

/// Runs `settings.steps` AdamW steps over seeded epoch shuffles of `train`.
///
/// `step_loss` records the forward pass of one batch on a fresh tape and
/// returns the loss together with the tape handles of the trainable tensors
/// (in [`Trainable::trainable`] order); handles may repeat a tensor count but
/// not its order. `validate` scores the current parameters; the lowest
/// validation loss wins and is returned.
pub fn fit<M, F, V>(
    mut model: M,
    train: &[usize],
    settings: &TrainSettings,
    seed: u64,
    mut step_loss: F,
    mut validate: V,
) -> Result<TrainOutcome<M>>
where
    M: Trainable,
    F: FnMut(&M, &mut Tape, &[usize], u64) -> Result<(StepLoss, Vec<Var>)>,
    V: FnMut(&M) -> Result<Validation>,
{
    settings.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let hyper = settings.hyper();
    let mut state = AdamWState::for_params(&model.trainable());
    let mut curve = Vec::new();
    let mut best: Option<(Validation, M, u64)> = None;
    let mut stale = 0u32;
    let mut epoch = 0u64;
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut stopped_early = false;
    let mut t = 0u64;

    while t < settings.steps {
        if queue.is_empty() {
            queue = shuffled_batches(train, settings.batch_size, splitmix64(seed ^ splitmix64(epoch)));
            queue.reverse();
            epoch += 1;
        }
        let batch = queue.pop().expect("nonempty");
        let mut tape = Tape::new();
        let (loss, vars) = step_loss(&model, &mut tape, &batch, t)?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() || !loss.pred.is_finite() || !loss.feat.is_finite() {
            return Err(Error::Divergence(format!(
                "loss became non-finite at step {t} (pred {}, feat {}, total {total})",
                loss.pred, loss.feat
            )));
        }
        tape.backward(loss.total)?;
        let mut params = model.trainable();
        if params.len() != vars.len() {
            return Err(Error::contract(format!("{} trainable tensors but {} tape handles", params.len(), vars.len())));
        }
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&params)
            .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        let norm = clip_grad_norm(&mut grads, settings.max_grad_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm became non-finite at step {t}")));
        }
        let g: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        adamw_step(&mut params, &g, &mut state, &hyper, settings.schedule(t))?;
        t += 1;

        let mut point = CurvePoint { step: t, loss_pred: loss.pred, loss_feat: loss.feat, total, val_loss: None, val_accuracy: None };
        let due = (settings.eval_every > 0 && t % settings.eval_every == 0) || t == settings.steps;
        if due {
            let v = validate(&model)?;
            if !v.loss.is_finite() {
                return Err(Error::Divergence(format!("validation loss became non-finite at step {t}")));
            }
            point.val_loss = Some(v.loss);
            point.val_accuracy = Some(v.accuracy);
            let improved = best.as_ref().is_none_or(|(b, _, _)| v.loss < b.loss);
            if improved {
                best = Some((v, model.clone(), t));
                stale = 0;
            } else {
                stale += 1;
            }
            curve.push(point);
            if settings.patience > 0 && stale >= settings.patience {
                stopped_early = true;
                break;
            }
        } else {
            curve.push(point);
        }
    }

    let steps_run = t;
    Ok(match best {
        Some((v, m, s)) => TrainOutcome { model: m, curve, best_step: s, best_val: Some(v), steps_run, stopped_early },
        None => TrainOutcome { model, curve, best_step: steps_run, best_val: None, steps_run, stopped_early },
    })
}

/// Argmax of a logit row; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted labels for every row of a `[B, K]` logit matrix.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits.data().chunks(k).map(argmax).collect()
}

/// Mean CE and accuracy of a ViT on `idx`.
pub fn evaluate(model: &ViTModel, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Validation> {
    if idx.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for batch in ordered_batches(idx, batch_size) {
        let mut tape = Tape::new();
        let cap = model.forward(&mut tape, &data.images(&batch)?)?;
        let labels = data.labels_of(&batch);
        let ce = tape.cross_entropy(cap.logits, &labels)?;
        loss += tape.scalar(ce) * batch.len() as f64;
        let pred = argmax_rows(tape.value(cap.logits));
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(Validation { loss: loss / idx.len() as f64, accuracy: correct as f64 / idx.len() as f64 })
}

pub fn accuracy(model: &ViTModel, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<f64> {
    Ok(evaluate(model, data, idx, batch_size)?.accuracy)
}

/// Cross-entropy training against ground-truth labels, validated on `val`
/// (or on `train` when `val` is empty).
pub fn train_supervised(
    model: ViTModel,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome<ViTModel>> {
    let val_idx = if val.is_empty() { train } else { val };
    let bs = settings.batch_size;
    fit(
        model,
        train,
        settings,
        seed,
        |m, tape, batch, _| {
            let bound = m.bind(tape, true);
            let cap = vit_forward(&m.config, &bound, tape, &data.images(batch)?)?;
            let ce = tape.cross_entropy(cap.logits, &data.labels_of(batch))?;
            let pred = tape.scalar(ce);
            Ok((StepLoss { total: ce, pred, feat: 0.0 }, bound.vars))
        },
        |m| evaluate(m, data, val_idx, bs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::vit::ViTConfig;

    fn tiny() -> (ViTConfig, Dataset) {
        let cfg = ViTConfig {
            image_side: 8,
            patch_size: 4,
            channels: 1,
            layers: 1,
            embed_dim: 8,
            heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            head_dim: None,
        };
        let d = synthesize(&SyntheticSpec { num_classes: 3, per_class: 20, side: 8, ..Default::default() }).unwrap();
        (cfg, d)
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[5.0, 5.0]), 0);
    }

    #[test]
    fn supervised_training_reduces_loss_and_is_reproducible() {
        let (cfg, d) = tiny();
        let s = d.split();
        let settings = TrainSettings { steps: 60, batch_size: 16, learning_rate: 3e-3, eval_every: 20, ..Default::default() };
        let run = || train_supervised(ViTModel::init(&cfg, 1).unwrap(), &d, &s.train, &s.val, &settings, 9).unwrap();
        let a = run();
        let first: f64 = a.curve[..5].iter().map(|p| p.total).sum::<f64>() / 5.0;
        let last: f64 = a.curve[a.curve.len() - 5..].iter().map(|p| p.total).sum::<f64>() / 5.0;
        assert!(last < first, "{last} !< {first}");
        assert_eq!(a.curve.len(), 60);
        let b = run();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (cfg, d) = tiny();
        let s = d.split();
        let settings =
            TrainSettings { steps: 50, learning_rate: 1e30, min_learning_rate: 1e30, max_grad_norm: 0.0, weight_decay: 0.0, ..Default::default() };
        let r = train_supervised(ViTModel::init(&cfg, 1).unwrap(), &d, &s.train, &s.val, &settings, 1);
        assert!(matches!(r, Err(Error::Divergence(_))), "{r:?}");
    }

    #[test]
    fn patience_stops_early_and_keeps_best() {
        let (cfg, d) = tiny();
        let s = d.split();
        // zero learning rate: validation never improves after the first check
        let settings = TrainSettings { steps: 100, learning_rate: 0.0, min_learning_rate: 0.0, weight_decay: 0.0, eval_every: 5, patience: 2, ..Default::default() };
        let init = ViTModel::init(&cfg, 1).unwrap();
        let r = train_supervised(init.clone(), &d, &s.train, &s.val, &settings, 1).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.steps_run, 15);
        assert_eq!(r.best_step, 5);
        assert_eq!(r.model, init);
    }
}
