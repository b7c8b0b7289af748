//! Fusion of the small models' class tokens with an activation-free
//! two-layer affine module, ensemble training against the full-data teacher,
//! and the prediction path shared with the simulator.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{ordered_batches, Dataset};
use crate::distill::{hard_decision, prediction_loss};
use crate::error::{Error, Result};
use crate::rng::{rng_from, truncated_normal};
use crate::tensor::Tensor;
use crate::train::{argmax_rows, fit, StepLoss, TrainOutcome, TrainSettings, Trainable, Validation};
use crate::vit::{vit_forward, ViTModel, INIT_STD};

/// `X ↦ (X·W₁ + b₁)·W₂ + b₂` over concatenated class tokens, the task head,
/// and the training-only map `G` into the teacher's token space.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatorFA {
    /// `[N·D_s, D_t]`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[D_t, N·D_s]`.
    pub w2: Tensor,
    pub b2: Tensor,
    /// `[N·D_s, N_class]`.
    pub head_w: Tensor,
    pub head_b: Tensor,
    /// `[N·D_s, D_teacher]`.
    pub g: Option<Tensor>,
}

pub const FA_PARAM_NAMES: [&str; 6] = ["fa.w1", "fa.b1", "fa.w2", "fa.b2", "head.weight", "head.bias"];

fn lecun(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let d = Normal::new(0.0f32, (1.0 / rows as f32).sqrt()).expect("normal");
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| d.sample(rng)).collect()).expect("shape")
}

impl AggregatorFA {
    /// Fan-in scaled normal affine maps, zero biases, std-0.02 truncated
    /// normal head. `teacher_dim = None` omits `G`.
    pub fn init(fused: usize, hidden: usize, classes: usize, teacher_dim: Option<usize>, seed: u64) -> Result<Self> {
        if fused == 0 || hidden == 0 || classes == 0 || teacher_dim == Some(0) {
            return Err(Error::config("aggregator dimensions must be positive"));
        }
        let mut rng = rng_from(seed);
        let w1 = lecun(&mut rng, fused, hidden);
        let w2 = lecun(&mut rng, hidden, fused);
        let head_w = Tensor::new(&[fused, classes], truncated_normal(&mut rng, fused * classes, INIT_STD))?;
        let g = teacher_dim.map(|t| lecun(&mut rng, fused, t));
        Ok(AggregatorFA {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[fused]),
            head_w,
            head_b: Tensor::zeros(&[classes]),
            g,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.head_w.shape()[1]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = FA_PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip([&self.w1, &self.b1, &self.w2, &self.b2, &self.head_w, &self.head_b])
            .collect();
        if let Some(g) = &self.g {
            v.push(("token_map.g".to_string(), g));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.head_w, &mut self.head_b];
        if let Some(g) = &mut self.g {
            v.push(g);
        }
        v
    }

    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Shape check of every tensor against `w1`.
    pub fn validate(&self) -> Result<()> {
        let (f, h, k) = (self.fused_dim(), self.hidden_dim(), self.num_classes());
        let ok = self.b1.shape() == [h]
            && self.w2.shape() == [h, f]
            && self.b2.shape() == [f]
            && self.head_w.shape() == [f, k]
            && self.head_b.shape() == [k]
            && self.g.as_ref().is_none_or(|g| g.rank() == 2 && g.shape()[0] == f);
        if ok {
            Ok(())
        } else {
            Err(Error::format("aggregator tensors have inconsistent shapes"))
        }
    }
}

/// Handles of an [`AggregatorFA`] bound to a tape.
pub struct BoundFA {
    pub vars: Vec<Var>,
}

impl BoundFA {
    pub fn bind(fa: &AggregatorFA, tape: &mut Tape, requires_grad: bool) -> Self {
        BoundFA { vars: fa.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect() }
    }

    pub fn g(&self) -> Option<Var> {
        self.vars.get(6).copied()
    }
}

/// Aggregation on the tape: concatenate, then two affine maps with no activation.
pub fn feature_aggregate(tape: &mut Tape, tokens: &[Var], fa: &BoundFA) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::shape("feature_aggregate needs at least one token block"));
    }
    let x = tape.concat_cols(tokens)?;
    let v = &fa.vars;
    let h = tape.matmul(x, v[0])?;
    let h = tape.add_bias(h, v[1])?;
    let y = tape.matmul(h, v[2])?;
    tape.add_bias(y, v[3])
}

/// Value-level aggregation of `[B, N·D_s]`.
pub fn aggregate_values(fa: &AggregatorFA, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let b = BoundFA::bind(fa, &mut tape, false);
    let y = feature_aggregate(&mut tape, &[xv], &b)?;
    Ok(tape.value(y).clone())
}

/// `MSE(fused·G, Z_t)` with the teacher token held constant.
pub fn token_loss(tape: &mut Tape, fused: Var, g: Var, teacher_token: &Tensor) -> Result<Var> {
    let z = tape.matmul(fused, g)?;
    tape.mse(z, teacher_token)
}

/// `N` small models and their aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub smalls: Vec<ViTModel>,
    pub fa: AggregatorFA,
}

/// Tape handles and outputs of one ensemble forward pass.
pub struct EnsembleForward {
    pub small_vars: Vec<Vec<Var>>,
    pub fa: BoundFA,
    pub fused: Var,
    pub logits: Var,
}

impl Ensemble {
    pub fn new(smalls: Vec<ViTModel>, fa: AggregatorFA) -> Result<Self> {
        let e = Ensemble { smalls, fa };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.smalls.first().ok_or_else(|| Error::contract("ensemble has no small models"))?;
        let c = &first.config;
        for s in &self.smalls {
            let o = &s.config;
            if (o.image_side, o.patch_size, o.channels, o.embed_dim) != (c.image_side, c.patch_size, c.channels, c.embed_dim)
            {
                return Err(Error::shape("small models must share input geometry and width"));
            }
        }
        self.fa.validate()?;
        let want = self.smalls.len() * c.embed_dim;
        if self.fa.fused_dim() != want {
            return Err(Error::shape(format!(
                "aggregator expects {} fused features, {} models of width {} give {want}",
                self.fa.fused_dim(),
                self.smalls.len(),
                c.embed_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self, with_token_map: bool) -> u64 {
        let g = if with_token_map { 0 } else { self.fa.g.as_ref().map_or(0, |g| g.numel() as u64) };
        self.smalls.iter().map(ViTModel::param_count).sum::<u64>() + self.fa.param_count() - g
    }

    pub fn forward(&self, tape: &mut Tape, images: &Tensor, requires_grad: bool) -> Result<EnsembleForward> {
        let mut tokens = Vec::with_capacity(self.smalls.len());
        let mut small_vars = Vec::with_capacity(self.smalls.len());
        for s in &self.smalls {
            let b = s.bind(tape, requires_grad);
            let cap = vit_forward(&s.config, &b, tape, images)?;
            tokens.push(cap.class_token);
            small_vars.push(b.vars);
        }
        let fa = BoundFA::bind(&self.fa, tape, requires_grad);
        let fused = feature_aggregate(tape, &tokens, &fa)?;
        let l = tape.matmul(fused, fa.vars[4])?;
        let logits = tape.add_bias(l, fa.vars[5])?;
        Ok(EnsembleForward { small_vars, fa, fused, logits })
    }

    /// Inference logits `[B, N_class]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, images, false)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Predicted class per image.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

/// Predicted classes for `idx`, in order.
pub fn ensemble_predict(ens: &Ensemble, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for b in ordered_batches(idx, batch_size) {
        out.extend(ens.predict(&data.images(&b)?)?);
    }
    Ok(out)
}

/// Mean CE and top-1 accuracy of the ensemble on `idx`.
pub fn evaluate_ensemble(ens: &Ensemble, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Validation> {
    if idx.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for b in ordered_batches(idx, batch_size) {
        let mut tape = Tape::new();
        let f = ens.forward(&mut tape, &data.images(&b)?, false)?;
        let labels = data.labels_of(&b);
        let ce = tape.cross_entropy(f.logits, &labels)?;
        loss += tape.scalar(ce) * b.len() as f64;
        correct += argmax_rows(tape.value(f.logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(Validation { loss: loss / idx.len() as f64, accuracy: correct as f64 / idx.len() as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    /// Weight of the token loss.
    pub gamma: f64,
    /// FA hidden width; `None` uses the teacher's embedding width.
    pub hidden_dim: Option<usize>,
    /// Train only FA, head and `G`.
    pub freeze_smalls: bool,
    pub train: TrainSettings,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec { gamma: 1.0, hidden_dim: None, freeze_smalls: false, train: TrainSettings::default() }
    }
}

#[derive(Clone)]
struct Trainee {
    ens: Ensemble,
    freeze: bool,
}

impl Trainable for Trainee {
    fn trainable(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        if !self.freeze {
            for s in &mut self.ens.smalls {
                v.extend(s.params_mut());
            }
        }
        v.extend(self.ens.fa.params_mut());
        v
    }
}

/// Minimises `L_pred + γ·L_token` over the full label set, with the
/// teacher's hard decisions and class tokens as targets. Validation is the
/// GT cross entropy on `val` (or `train` when `val` is empty).
#[allow(clippy::too_many_arguments)]
pub fn train_ensemble(
    ens: Ensemble,
    teacher: &ViTModel,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    spec: &EnsembleSpec,
    seed: u64,
) -> Result<TrainOutcome<Ensemble>> {
    ens.validate()?;
    if ens.fa.num_classes() != teacher.config.num_classes || data.num_classes != teacher.config.num_classes {
        return Err(Error::contract("ensemble head, teacher and dataset must share the label set"));
    }
    if spec.gamma != 0.0 {
        match &ens.fa.g {
            Some(g) if g.shape()[1] == teacher.config.embed_dim => {}
            _ => return Err(Error::contract("token loss needs G mapping into the teacher token width")),
        }
    }
    let val_idx = if val.is_empty() { train } else { val };
    let bs = spec.train.batch_size;
    let freeze = spec.freeze_smalls;
    let out = fit(
        Trainee { ens, freeze },
        train,
        &spec.train,
        seed,
        |m, tape, batch, _| {
            let images = data.images(batch)?;
            let mut tt = Tape::new();
            let tcap = teacher.forward(&mut tt, &images)?;
            let y_t = hard_decision(tt.value(tcap.logits));
            let z_t = tt.value(tcap.class_token).clone();
            let f = m.ens.forward(tape, &images, true)?;
            let pred = prediction_loss(tape, f.logits, &data.labels_of(batch), &y_t)?;
            let pv = tape.scalar(pred);
            let mut vars: Vec<Var> = if freeze { Vec::new() } else { f.small_vars.concat() };
            vars.extend(f.fa.vars.iter().copied());
            if spec.gamma == 0.0 {
                return Ok((StepLoss { total: pred, pred: pv, feat: 0.0 }, vars));
            }
            let tl = token_loss(tape, f.fused, f.fa.g().expect("checked"), &z_t)?;
            let tv = tape.scalar(tl);
            let w = tape.scale(tl, spec.gamma as f32);
            let total = tape.add(pred, w)?;
            Ok((StepLoss { total, pred: pv, feat: tv }, vars))
        },
        |m| evaluate_ensemble(&m.ens, data, val_idx, bs),
    )?;
    Ok(TrainOutcome {
        model: out.model.ens,
        curve: out.curve,
        best_step: out.best_step,
        best_val: out.best_val,
        steps_run: out.steps_run,
        stopped_early: out.stopped_early,
    })
}
