//! Class partitioning, head and neuron importance, and structural shrinking
//! of a trained ViT into a smaller one.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{ordered_batches, Dataset};
use crate::error::{Error, Result};
use crate::rng::{rng_from, sample_without_replacement};
use crate::tensor::Tensor;
use crate::vit::{EncoderLayer, ViTConfig, ViTModel};

/// Assignment of classes to `N` partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub num_partitions: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Sorted global class ids per partition. The position of a class in its
    /// list is its local label.
    pub classes: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    /// Partition index of every class.
    pub fn assignment(&self) -> Vec<usize> {
        let mut a = vec![usize::MAX; self.num_classes];
        for (p, cs) in self.classes.iter().enumerate() {
            for &c in cs {
                a[c] = p;
            }
        }
        a
    }

    /// `(partition, local label)` of a global class.
    pub fn locate(&self, class: usize) -> Option<(usize, usize)> {
        self.classes
            .iter()
            .enumerate()
            .find_map(|(p, cs)| cs.binary_search(&class).ok().map(|j| (p, j)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.num_partitions {
            return Err(Error::format("partition plan: list count differs from num_partitions"));
        }
        let want = partition_counts(self.num_classes, self.num_partitions)?;
        if self.counts() != want {
            return Err(Error::format(format!("partition counts {:?}, expected {want:?}", self.counts())));
        }
        let mut seen = vec![false; self.num_classes];
        for c in self.classes.iter().flatten() {
            if *c >= self.num_classes || seen[*c] {
                return Err(Error::format(format!("class {c} is out of range or assigned twice")));
            }
            seen[*c] = true;
        }
        Ok(())
    }
}

/// Classes per partition: the first `N_class mod N` partitions get one extra.
pub fn partition_counts(num_classes: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > num_classes {
        return Err(Error::config(format!(
            "cannot split {num_classes} classes into {n} partitions (need 1 <= N <= N_class)"
        )));
    }
    let (q, r) = (num_classes / n, num_classes % n);
    Ok((0..n).map(|i| if i < r { q + 1 } else { q }).collect())
}

/// Random class partition: a seeded draw without replacement, cut into
/// consecutive runs of [`partition_counts`] sizes.
pub fn partition_dataset(num_classes: usize, n: usize, seed: u64) -> Result<PartitionPlan> {
    let counts = partition_counts(num_classes, n)?;
    let mut rng = rng_from(seed);
    let order = sample_without_replacement(&mut rng, num_classes, num_classes);
    let mut classes = Vec::with_capacity(n);
    let mut at = 0;
    for c in counts {
        let mut part = order[at..at + c].to_vec();
        part.sort_unstable();
        classes.push(part);
        at += c;
    }
    Ok(PartitionPlan { num_partitions: n, num_classes, seed, classes })
}

/// First-order importance of every head and MLP neuron of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceScores {
    /// Identifies the evaluation set the scores came from.
    pub eval_set: String,
    pub samples: usize,
    /// `[layer][head]`.
    pub heads: Vec<Vec<f64>>,
    /// `[layer][neuron]`.
    pub neurons: Vec<Vec<f64>>,
}

fn signed_scores(
    model: &ViTModel,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if idx.is_empty() {
        return Err(Error::contract("importance needs a nonempty evaluation set"));
    }
    let cfg = &model.config;
    let (h, dh, dm) = (cfg.heads, cfg.head_dim(), cfg.mlp_dim);
    let mut heads = vec![vec![0.0f64; h]; cfg.layers];
    let mut neurons = vec![vec![0.0f64; dm]; cfg.layers];
    let total = idx.len() as f32;
    for batch in ordered_batches(idx, batch_size) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let cap = crate::vit::vit_forward(cfg, &bound, &mut tape, &data.images(&batch)?)?;
        // batch mean rescaled so the summed loss is the mean over the whole set
        let ce = tape.cross_entropy(cap.logits, &data.labels_of(&batch))?;
        let loss = tape.scale(ce, batch.len() as f32 / total);
        tape.backward(loss)?;
        for (li, lc) in cap.layers.iter().enumerate() {
            let (o, g) = (tape.value(lc.heads_out).data(), tape.adjoint(lc.heads_out));
            if let Some(g) = g {
                let width = h * dh;
                for (row_o, row_g) in o.chunks(width).zip(g.chunks(width)) {
                    for hi in 0..h {
                        let s: f64 = (hi * dh..(hi + 1) * dh).map(|j| row_o[j] as f64 * row_g[j] as f64).sum();
                        heads[li][hi] += s;
                    }
                }
            }
            let (a, g) = (tape.value(lc.mlp_hidden).data(), tape.adjoint(lc.mlp_hidden));
            if let Some(g) = g {
                for (row_a, row_g) in a.chunks(dm).zip(g.chunks(dm)) {
                    for j in 0..dm {
                        neurons[li][j] += row_a[j] as f64 * row_g[j] as f64;
                    }
                }
            }
        }
    }
    Ok((heads, neurons))
}

/// Scores every head by `|Σ ∂L/∂O_h ⊙ O_h|` and every MLP neuron by
/// `|Σ ∂L/∂a ⊙ a|`, where `O_h` is the head's output before the output
/// projection, `a` the neuron's post-GELU activation, and `L` the mean
/// cross entropy over `idx`. Batches are visited in a fixed order.
pub fn importance(
    model: &ViTModel,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
    eval_set: &str,
) -> Result<ImportanceScores> {
    let (heads, neurons) = signed_scores(model, data, idx, batch_size)?;
    let abs = |v: Vec<Vec<f64>>| v.into_iter().map(|l| l.into_iter().map(f64::abs).collect()).collect();
    Ok(ImportanceScores { eval_set: eval_set.to_string(), samples: idx.len(), heads: abs(heads), neurons: abs(neurons) })
}

pub fn head_importance(model: &ViTModel, data: &Dataset, idx: &[usize], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    Ok(importance(model, data, idx, batch_size, "")?.heads)
}

pub fn neuron_importance(
    model: &ViTModel,
    data: &Dataset,
    idx: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    Ok(importance(model, data, idx, batch_size, "")?.neurons)
}

/// Which encoder layers survive depth reduction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    #[default]
    First,
    Last,
    /// Evenly spaced, starting at layer 0.
    Stride,
}

/// How the residual width follows the head count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedReduction {
    /// Residual width becomes `Dh·h_s`; embeddings, LayerNorms, MLP inputs and
    /// the head keep their first `Dh·h_s` coordinates.
    #[default]
    HeadAligned,
    /// Residual width stays `D`; only the attention narrows to `Dh·h_s`.
    Keep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShrinkOptions {
    /// Percentage of heads and neurons removed per layer, `0 <= sigma < 100`.
    pub sigma: f64,
    /// Target depth `L_s`; `None` keeps every layer.
    pub layers: Option<usize>,
    pub selection: LayerSelection,
    pub embed: EmbedReduction,
}

impl Default for ShrinkOptions {
    fn default() -> Self {
        ShrinkOptions { sigma: 50.0, layers: None, selection: LayerSelection::First, embed: EmbedReduction::HeadAligned }
    }
}

/// What [`shrink`] kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkPlan {
    pub sigma: f64,
    pub embed: EmbedReduction,
    /// Source layer indices, in order.
    pub kept_layers: Vec<usize>,
    /// Retained source head indices per kept layer, ascending.
    pub heads: Vec<Vec<usize>>,
    /// Retained source neuron indices per kept layer, ascending.
    pub neurons: Vec<Vec<usize>>,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub num_heads: usize,
}

/// `ceil((1 − σ/100)·n)`.
pub fn retained_count(n: usize, sigma: f64) -> Result<usize> {
    if !(0.0..100.0).contains(&sigma) {
        return Err(Error::config(format!("sigma must be in [0, 100), got {sigma}")));
    }
    // the epsilon absorbs representation error in (1 - sigma/100)*n
    let k = ((1.0 - sigma / 100.0) * n as f64 - 1e-9).ceil().max(0.0) as usize;
    if k == 0 {
        return Err(Error::config(format!("sigma {sigma} removes all {n} units")));
    }
    Ok(k)
}

/// Indices of the `k` best scores (ties go to the lower index), ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k.min(order.len())].to_vec();
    keep.sort_unstable();
    keep
}

pub fn select_layers(total: usize, keep: usize, how: LayerSelection) -> Result<Vec<usize>> {
    if keep == 0 || keep > total {
        return Err(Error::config(format!("cannot keep {keep} of {total} encoder layers")));
    }
    Ok(match how {
        LayerSelection::First => (0..keep).collect(),
        LayerSelection::Last => (total - keep..total).collect(),
        LayerSelection::Stride => (0..keep).map(|j| j * total / keep).collect(),
    })
}

/// Build the retained-structure plan from scores.
pub fn plan_shrink(cfg: &ViTConfig, scores: &ImportanceScores, opts: &ShrinkOptions) -> Result<ShrinkPlan> {
    if scores.heads.len() != cfg.layers || scores.neurons.len() != cfg.layers {
        return Err(Error::contract(format!(
            "scores cover {}/{} layers, model has {}",
            scores.heads.len(),
            scores.neurons.len(),
            cfg.layers
        )));
    }
    let kept_layers = select_layers(cfg.layers, opts.layers.unwrap_or(cfg.layers), opts.selection)?;
    let hs = retained_count(cfg.heads, opts.sigma)?;
    let ds = retained_count(cfg.mlp_dim, opts.sigma)?;
    let mut heads = Vec::new();
    let mut neurons = Vec::new();
    for &l in &kept_layers {
        if scores.heads[l].len() != cfg.heads || scores.neurons[l].len() != cfg.mlp_dim {
            return Err(Error::contract(format!("layer {l} scores do not match the model width")));
        }
        heads.push(top_k(&scores.heads[l], hs));
        neurons.push(top_k(&scores.neurons[l], ds));
    }
    let embed_dim = match opts.embed {
        EmbedReduction::HeadAligned => cfg.head_dim() * hs,
        EmbedReduction::Keep => cfg.embed_dim,
    };
    Ok(ShrinkPlan { sigma: opts.sigma, embed: opts.embed, kept_layers, heads, neurons, embed_dim, mlp_dim: ds, num_heads: hs })
}

impl ShrinkPlan {
    pub fn small_config(&self, source: &ViTConfig) -> ViTConfig {
        let dh = source.head_dim();
        ViTConfig {
            layers: self.kept_layers.len(),
            embed_dim: self.embed_dim,
            heads: self.num_heads,
            mlp_dim: self.mlp_dim,
            head_dim: if self.embed_dim == dh * self.num_heads { None } else { Some(dh) },
            ..source.clone()
        }
    }
}

fn prefix(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn head_columns(heads: &[usize], dh: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * dh..(h + 1) * dh).collect()
}

/// Apply a plan by row/column selection of the source weights.
pub fn apply_shrink(model: &ViTModel, plan: &ShrinkPlan) -> Result<ViTModel> {
    let src = &model.config;
    let cfg = plan.small_config(src);
    cfg.validate()?;
    let dh = src.head_dim();
    let res = prefix(plan.embed_dim);
    let mut layers = Vec::with_capacity(plan.kept_layers.len());
    for (j, &l) in plan.kept_layers.iter().enumerate() {
        let s = model
            .layers
            .get(l)
            .ok_or_else(|| Error::contract(format!("plan keeps layer {l}, model has {}", src.layers)))?;
        let hc = head_columns(&plan.heads[j], dh);
        let nc = &plan.neurons[j];
        let qkv = |w: &Tensor| -> Result<Tensor> { w.select_rows(&res)?.select_cols(&hc) };
        layers.push(EncoderLayer {
            ln1_g: s.ln1_g.select(&res)?,
            ln1_b: s.ln1_b.select(&res)?,
            wq: qkv(&s.wq)?,
            bq: s.bq.select(&hc)?,
            wk: qkv(&s.wk)?,
            bk: s.bk.select(&hc)?,
            wv: qkv(&s.wv)?,
            bv: s.bv.select(&hc)?,
            wo: s.wo.select_rows(&hc)?.select_cols(&res)?,
            bo: s.bo.select(&res)?,
            ln2_g: s.ln2_g.select(&res)?,
            ln2_b: s.ln2_b.select(&res)?,
            w1: s.w1.select_rows(&res)?.select_cols(nc)?,
            b1: s.b1.select(nc)?,
            w2: s.w2.select_rows(nc)?.select_cols(&res)?,
            b2: s.b2.select(&res)?,
        });
    }
    Ok(ViTModel {
        config: cfg,
        patch_w: model.patch_w.select_cols(&res)?,
        patch_b: model.patch_b.select(&res)?,
        cls: model.cls.select(&res)?,
        pos: model.pos.select_cols(&res)?,
        layers,
        head_w: model.head_w.select_rows(&res)?,
        head_b: model.head_b.clone(),
    })
}

/// Plan and apply in one step.
pub fn shrink(model: &ViTModel, scores: &ImportanceScores, opts: &ShrinkOptions) -> Result<(ViTModel, ShrinkPlan)> {
    let plan = plan_shrink(&model.config, scores, opts)?;
    Ok((apply_shrink(model, &plan)?, plan))
}

/// Copy of `model` whose head predicts only `classes`, in the given order.
/// Logit `j` of the result equals logit `classes[j]` of the original.
pub fn slice_head(model: &ViTModel, classes: &[usize]) -> Result<ViTModel> {
    let k = model.config.num_classes;
    if classes.is_empty() || classes.iter().any(|&c| c >= k) {
        return Err(Error::contract(format!("class list {classes:?} invalid for {k} classes")));
    }
    let mut m = model.clone();
    m.head_w = model.head_w.select_cols(classes)?;
    m.head_b = model.head_b.select(classes)?;
    m.config.num_classes = classes.len();
    Ok(m)
}
