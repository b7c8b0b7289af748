//! Sub-task distillation: hard-decision prediction loss plus relation-map
//! matching of per-layer Q/K/V features between a student and its teacher.
//!
//! For one image, a Q (or K, V) capture is the `h × T × Dh` array of head
//! features. It is unfolded along each of its three axes, the Gram matrix
//! `XXᵀ` of the unfolding is scaled by `1/√cols` and turned into row
//! distributions with a softmax. The student's maps are pulled towards the
//! teacher's with `KL(teacher ‖ student)` averaged over rows, axes and images.
//! When the teacher is larger than the student along an axis, a seeded
//! sorted subset of teacher rows is drawn so both maps are square of the
//! student's size.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{for_each_unfold, softmax_axis, unfold_dims, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_from, sample_without_replacement};
use crate::tensor::{gemm_nt, Tensor};
use crate::train::{argmax_rows, evaluate, fit, StepLoss, TrainOutcome, TrainSettings};
use crate::vit::{vit_forward, ForwardCapture, ViTModel};

/// Weights and layer pairing of the distillation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSpec {
    /// Weight of the feature term against the prediction term.
    pub beta: f64,
    /// Weights of the Q, K and V terms.
    pub alpha: [f64; 3],
    /// Teacher layer (1-based) for each student layer; `None` uses [`layer_map`].
    pub layer_map: Option<Vec<usize>>,
    pub train: TrainSettings,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec { beta: 1.0, alpha: [1.0; 3], layer_map: None, train: TrainSettings::default() }
    }
}

impl DistillSpec {
    /// 0-based teacher layer for each student layer.
    pub fn resolved_map(&self, student_layers: usize, teacher_layers: usize) -> Result<Vec<usize>> {
        let map = match &self.layer_map {
            Some(m) => m.clone(),
            None => layer_map(student_layers, teacher_layers),
        };
        if map.len() != student_layers {
            return Err(Error::config(format!("layer map has {} entries for {student_layers} student layers", map.len())));
        }
        if map.iter().any(|&k| k == 0 || k > teacher_layers) || map.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config(format!(
                "layer map {map:?} must be nondecreasing within 1..={teacher_layers}"
            )));
        }
        Ok(map.into_iter().map(|k| k - 1).collect())
    }
}

/// `g(j) = round(j·L_t/L_s)` for `j = 1..=L_s`, clamped to `1..=L_t` (1-based).
pub fn layer_map(student_layers: usize, teacher_layers: usize) -> Vec<usize> {
    (1..=student_layers)
        .map(|j| {
            let k = (j as f64 * teacher_layers as f64 / student_layers as f64).round() as usize;
            k.clamp(1, teacher_layers.max(1))
        })
        .collect()
}

/// Mode-`axis` unfolding of an `a × b × c` tensor (axis in 1..=3).
pub fn matricize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (a, b, c) = match x.shape()[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(Error::shape(format!("matricize expects a 3-D tensor, got {:?}", x.shape()))),
    };
    let (rows, cols) = unfold_dims(a, b, c, axis)?;
    let mut out = vec![0.0; x.numel()];
    for_each_unfold(a, b, c, axis, |s, d| out[d] = x.data()[s]);
    Tensor::new(&[rows, cols], out)
}

/// Inverse of [`matricize`] for the given original dims.
pub fn refold(m: &Tensor, dims: [usize; 3], axis: usize) -> Result<Tensor> {
    let [a, b, c] = dims;
    let (rows, cols) = unfold_dims(a, b, c, axis)?;
    if m.shape() != [rows, cols] {
        return Err(Error::shape(format!("refold: {:?} is not the axis-{axis} unfolding of {dims:?}", m.shape())));
    }
    let mut out = vec![0.0; m.numel()];
    for_each_unfold(a, b, c, axis, |s, d| out[s] = m.data()[d]);
    Tensor::new(&dims, out)
}

/// Row-stochastic relation map of one unfolding.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMap {
    pub axis: usize,
    /// `XXᵀ` before normalisation.
    pub gram: Tensor,
    /// `softmax_rows(XXᵀ/√cols)`.
    pub probs: Tensor,
}

/// Gram matrix `XXᵀ` of a `[rows, cols]` matrix.
pub fn gram(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    let mut out = vec![0.0; r * r];
    gemm_nt(x.data(), x.data(), &mut out, r, c, r);
    Tensor::new(&[r, r], out)
}

/// Optionally keep `sample_rows` rows (uniform without replacement, in
/// ascending index order), then build the normalised Gram map.
pub fn relation_map(xm: &Tensor, axis: usize, sample_rows: Option<usize>, rng: &mut ChaCha8Rng) -> Result<RelationMap> {
    let (rows, cols) = xm.dims2()?;
    let x = match sample_rows {
        Some(k) if k > rows => {
            return Err(Error::shape(format!("cannot sample {k} rows from a {rows}-row matrix")));
        }
        Some(k) => {
            let mut pick = sample_without_replacement(rng, rows, k);
            pick.sort_unstable();
            xm.select_rows(&pick)?
        }
        None => xm.clone(),
    };
    let g = gram(&x)?;
    let r = g.shape()[0];
    let scale = 1.0 / (cols as f32).sqrt();
    let mut p: Vec<f32> = g.data().iter().map(|v| v * scale).collect();
    softmax_axis(&mut p, r, r, 1);
    Ok(RelationMap { axis, gram: g, probs: Tensor::new(&[r, r], p)? })
}

/// One image's `h × T × Dh` slice of a `[B·h, T, Dh]` capture.
fn image_block(x: &Tensor, image: usize, heads: usize) -> Result<Tensor> {
    let (t, dh) = match x.shape()[..] {
        [_, t, dh] => (t, dh),
        _ => return Err(Error::shape(format!("capture must be [B*h, T, Dh], got {:?}", x.shape()))),
    };
    let n = heads * t * dh;
    Tensor::new(&[heads, t, dh], x.data()[image * n..(image + 1) * n].to_vec())
}

/// Teacher relation maps for `[B·h_t, T, Dh_t]` features given the student's
/// per-image extents: `[B, rows_s, rows_s]` probabilities per axis.
pub fn teacher_maps(
    x: &Tensor,
    batch: usize,
    heads: usize,
    student_dims: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<[Tensor; 3]> {
    let mut out: Vec<Tensor> = Vec::with_capacity(3);
    let teacher_dims = [heads, x.shape()[1], x.shape()[2]];
    // one row subset per batch and axis, shared by the batch's images
    let mut picks: Vec<Option<Vec<usize>>> = Vec::with_capacity(3);
    for axis in 1..=3 {
        let (ts, ss) = (teacher_dims[axis - 1], student_dims[axis - 1]);
        if ts < ss {
            return Err(Error::shape(format!(
                "teacher extent {ts} is smaller than student extent {ss} along axis {axis}"
            )));
        }
        picks.push(if ts > ss {
            let mut p = sample_without_replacement(rng, ts, ss);
            p.sort_unstable();
            Some(p)
        } else {
            None
        });
    }
    for axis in 1..=3 {
        let r = student_dims[axis - 1];
        let mut data = Vec::with_capacity(batch * r * r);
        for b in 0..batch {
            let m = matricize(&image_block(x, b, heads)?, axis)?;
            let m = match &picks[axis - 1] {
                Some(p) => m.select_rows(p)?,
                None => m,
            };
            let mut fixed = rng_from(0);
            data.extend_from_slice(relation_map(&m, axis, None, &mut fixed)?.probs.data());
        }
        out.push(Tensor::new(&[batch, r, r], data)?);
    }
    Ok(out.try_into().expect("three axes"))
}

/// Mean over the three axes of row-averaged `KL(teacher ‖ student)` for one
/// student Q/K/V capture `[B·h_s, T, Dh_s]` on the tape.
pub fn feature_kl(tape: &mut Tape, student: Var, batch: usize, heads: usize, teacher: &[Tensor; 3]) -> Result<Var> {
    let (t, dh) = match tape.value(student).shape()[..] {
        [_, t, dh] => (t, dh),
        _ => return Err(Error::shape("student capture must be [B*h, T, Dh]")),
    };
    let x = tape.reshape(student, &[batch, heads, t, dh])?;
    let mut terms = Vec::with_capacity(3);
    for axis in 1..=3 {
        let (_, cols) = unfold_dims(heads, t, dh, axis)?;
        let m = tape.matricize(x, axis)?;
        let g = tape.batch_matmul(m, m, true)?;
        let s = tape.scale(g, 1.0 / (cols as f32).sqrt());
        let lp = tape.log_softmax(s)?;
        terms.push(tape.kl_div(lp, &teacher[axis - 1])?);
    }
    let a = tape.add(terms[0], terms[1])?;
    let a = tape.add(a, terms[2])?;
    Ok(tape.scale(a, 1.0 / 3.0))
}

/// `(1/(3·l)) Σ_j Σ_i α_i · KL_i(j)` over the student's `l` layers, with the
/// teacher capture values detached.
pub fn feature_match_loss(
    tape: &mut Tape,
    student: &ForwardCapture,
    student_heads: usize,
    teacher_tape: &Tape,
    teacher: &ForwardCapture,
    teacher_heads: usize,
    spec: &DistillSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (ls, lt) = (student.layers.len(), teacher.layers.len());
    let map = spec.resolved_map(ls, lt)?;
    let batch = student.batch;
    let mut acc: Option<Var> = None;
    for (j, &k) in map.iter().enumerate() {
        let sc = &student.layers[j];
        let tc = &teacher.layers[k];
        for (i, (sv, tv)) in [(sc.q, tc.q), (sc.k, tc.k), (sc.v, tc.v)].into_iter().enumerate() {
            let shape = tape.value(sv).shape().to_vec();
            let dims = [student_heads, shape[1], shape[2]];
            let maps = teacher_maps(teacher_tape.value(tv), batch, teacher_heads, dims, rng)?;
            let kl = feature_kl(tape, sv, batch, student_heads, &maps)?;
            let w = tape.scale(kl, (spec.alpha[i] / (3.0 * ls as f64)) as f32);
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
    }
    acc.ok_or_else(|| Error::contract("student has no layers"))
}

/// Teacher label per row: argmax, lowest index on ties.
pub fn hard_decision(teacher_logits: &Tensor) -> Vec<usize> {
    argmax_rows(teacher_logits)
}

/// `½·CE(y) + ½·CE(y_t)` of the student logits.
pub fn prediction_loss(tape: &mut Tape, logits: Var, y: &[usize], y_teacher: &[usize]) -> Result<Var> {
    let a = tape.cross_entropy(logits, y)?;
    let b = tape.cross_entropy(logits, y_teacher)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Distills `teacher` (already specialised to the partition's classes) into
/// `student` on a partition dataset, validating on the GT cross entropy of
/// `val`. `β = 0` is plain hard-label + GT training.
pub fn train_subtask(
    student: ViTModel,
    teacher: &ViTModel,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    spec: &DistillSpec,
    seed: u64,
) -> Result<TrainOutcome<ViTModel>> {
    if student.config.num_classes != teacher.config.num_classes {
        return Err(Error::contract(format!(
            "student predicts {} classes, teacher {}",
            student.config.num_classes, teacher.config.num_classes
        )));
    }
    spec.resolved_map(student.config.layers, teacher.config.layers)?;
    let val_idx = if val.is_empty() { train } else { val };
    let bs = spec.train.batch_size;
    let mut rng = rng_from(seed ^ 0x5EED_F00D);
    fit(
        student,
        train,
        &spec.train,
        seed,
        |m, tape, batch, _| {
            let images = data.images(batch)?;
            let mut tt = Tape::new();
            let tcap = teacher.forward(&mut tt, &images)?;
            let y_t = hard_decision(tt.value(tcap.logits));
            let bound = m.bind(tape, true);
            let cap = vit_forward(&m.config, &bound, tape, &images)?;
            let pred = prediction_loss(tape, cap.logits, &data.labels_of(batch), &y_t)?;
            let pv = tape.scalar(pred);
            if spec.beta == 0.0 {
                return Ok((StepLoss { total: pred, pred: pv, feat: 0.0 }, bound.vars));
            }
            let feat = feature_match_loss(tape, &cap, m.config.heads, &tt, &tcap, teacher.config.heads, spec, &mut rng)?;
            let fv = tape.scalar(feat);
            let fw = tape.scale(feat, spec.beta as f32);
            let total = tape.add(pred, fw)?;
            Ok((StepLoss { total, pred: pv, feat: fv }, bound.vars))
        },
        |m| evaluate(m, data, val_idx, bs),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::data::{synthesize, SyntheticSpec};
    use crate::vit::ViTConfig;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matricize_shapes_zero_and_roundtrip() {
        let mut rng = rng_from(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let shapes: Vec<Vec<usize>> = (1..=3).map(|a| matricize(&x, a).unwrap().shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 12], vec![3, 8], vec![4, 6]]);
        let z = matricize(&Tensor::zeros(&[2, 3, 4]), 2).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0) && z.shape() == [3, 8]);
        for a in 1..=3 {
            assert_eq!(refold(&matricize(&x, a).unwrap(), [2, 3, 4], a).unwrap(), x);
        }
        assert!(matricize(&x, 4).is_err());
        assert!(matricize(&x, 0).is_err());
        // axis 2, row j: columns run over (i, k) with i major
        let m = matricize(&x, 2).unwrap();
        assert_eq!(m.at2(1, 4 + 2), x.data()[(1 * 3 + 1) * 4 + 2]);
    }

    #[test]
    fn identity_relation_map() {
        let mut rng = rng_from(0);
        let r = relation_map(&Tensor::identity(2), 1, None, &mut rng).unwrap();
        assert_eq!(r.gram, Tensor::identity(2));
        let s = 1.0f64 / 2f64.sqrt();
        let p0 = s.exp() / (s.exp() + 1.0);
        let p = r.probs.data();
        assert!((p[0] as f64 - p0).abs() < 1e-6 && (p[1] as f64 - (1.0 - p0)).abs() < 1e-6);
        assert!((p[3] as f64 - p0).abs() < 1e-6);
    }

    #[test]
    fn gram_is_symmetric_psd_and_rows_normalise() {
        let mut rng = rng_from(2);
        for trial in 0..100 {
            let rows = 1 + trial % 6;
            let cols = 1 + (trial * 7) % 9;
            let x = rand_tensor(&mut rng, &[rows, cols]);
            let r = relation_map(&x, 1, None, &mut rng).unwrap();
            let g = &r.gram;
            for i in 0..rows {
                assert!(g.at2(i, i) >= 0.0);
                for j in 0..rows {
                    assert_eq!(g.at2(i, j), g.at2(j, i));
                }
                let s: f32 = (0..rows).map(|j| r.probs.at2(i, j)).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
            // vᵀGv = |Xᵀv|² ≥ 0 for a random v
            let v: Vec<f32> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: f64 = (0..rows)
                .flat_map(|i| (0..rows).map(move |j| (i, j)))
                .map(|(i, j)| v[i] as f64 * g.at2(i, j) as f64 * v[j] as f64)
                .sum();
            assert!(q >= -1e-5, "{q}");
        }
    }

    #[test]
    fn full_row_sampling_matches_no_sampling() {
        let mut rng = rng_from(3);
        let x = rand_tensor(&mut rng, &[5, 7]);
        let a = relation_map(&x, 2, None, &mut rng).unwrap();
        let b = relation_map(&x, 2, Some(5), &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(relation_map(&x, 2, Some(6), &mut rng).is_err());
        assert_eq!(relation_map(&x, 2, Some(3), &mut rng).unwrap().probs.shape(), &[3, 3]);
    }

    #[test]
    fn hard_decision_rules() {
        let t = Tensor::new(&[3, 3], vec![0.1, 2.0, -1.0, 5.0, 5.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(hard_decision(&t), vec![1, 0, 2]);
        let shifted = Tensor::new(&[3, 3], t.data().iter().map(|v| v + 7.5).collect()).unwrap();
        assert_eq!(hard_decision(&shifted), hard_decision(&t));
    }

    #[test]
    fn prediction_loss_values() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        let v = prediction_loss(&mut tape, l, &[0, 1], &[2, 3]).unwrap();
        assert!((tape.scalar(v) - 4f64.ln()).abs() < 1e-6);

        let l = tape.constant(Tensor::new(&[1, 3], vec![100.0, -100.0, -100.0]).unwrap());
        let v = prediction_loss(&mut tape, l, &[0], &[0]).unwrap();
        assert!(tape.scalar(v) < 1e-6);
        let v = prediction_loss(&mut tape, l, &[0], &[1]).unwrap();
        let got = tape.scalar(v);
        assert!(got.is_finite());
        assert!((got - 0.5 * -(1e-12f64).ln()).abs() < 1e-6, "{got}");

        let l = tape.constant(Tensor::new(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let a = prediction_loss(&mut tape, l, &[1], &[2]).unwrap();
        let l2 = tape.constant(Tensor::new(&[1, 3], vec![10.3, 9.0, 12.0]).unwrap());
        let b = prediction_loss(&mut tape, l2, &[1], &[2]).unwrap();
        assert!((tape.scalar(a) - tape.scalar(b)).abs() < 1e-5);
        assert!(prediction_loss(&mut tape, l, &[3], &[0]).is_err());
    }

    #[test]
    fn layer_map_is_uniform_stride() {
        assert_eq!(layer_map(2, 4), vec![2, 4]);
        assert_eq!(layer_map(12, 24), (1..=12).map(|j| 2 * j).collect::<Vec<_>>());
        assert_eq!(layer_map(3, 3), vec![1, 2, 3]);
        let spec = DistillSpec { layer_map: Some(vec![3, 1]), ..Default::default() };
        assert!(spec.resolved_map(2, 4).is_err());
        let spec = DistillSpec { layer_map: Some(vec![1, 5]), ..Default::default() };
        assert!(spec.resolved_map(2, 4).is_err());
    }

    fn toy_pair() -> (ViTModel, ViTModel, Dataset) {
        // teacher h=4, Dh=8; student h=2, Dh=8; T=5
        let base = ViTConfig {
            image_side: 8,
            patch_size: 4,
            channels: 1,
            layers: 4,
            embed_dim: 32,
            heads: 4,
            mlp_dim: 32,
            num_classes: 3,
            head_dim: None,
        };
        let student = ViTConfig { layers: 2, embed_dim: 16, heads: 2, mlp_dim: 16, ..base.clone() };
        let d = synthesize(&SyntheticSpec { num_classes: 3, per_class: 20, side: 8, ..Default::default() }).unwrap();
        (ViTModel::init(&student, 1).unwrap(), ViTModel::init(&base, 2).unwrap(), d)
    }

    // second implementation: plain nested loops over [image][head][token][d]
    fn unfold_naive(x: &[Vec<Vec<f64>>], axis: usize) -> Vec<Vec<f64>> {
        let (a, b, c) = (x.len(), x[0].len(), x[0][0].len());
        match axis {
            1 => (0..a).map(|i| (0..b).flat_map(|j| (0..c).map(move |k| (j, k))).map(|(j, k)| x[i][j][k]).collect()).collect(),
            2 => (0..b).map(|j| (0..a).flat_map(|i| (0..c).map(move |k| (i, k))).map(|(i, k)| x[i][j][k]).collect()).collect(),
            _ => (0..c).map(|k| (0..a).flat_map(|i| (0..b).map(move |j| (i, j))).map(|(i, j)| x[i][j][k]).collect()).collect(),
        }
    }

    fn map_naive(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let cols = rows[0].len() as f64;
        rows.iter()
            .map(|ri| {
                let z: Vec<f64> = rows.iter().map(|rj| ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() / cols.sqrt()).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn kl_naive(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
        // KL(teacher q ‖ student p), averaged over rows
        let mut s = 0.0;
        for (pr, qr) in p.iter().zip(q) {
            for (a, b) in pr.iter().zip(qr) {
                s += b * (b / a).ln();
            }
        }
        s / p.len() as f64
    }

    fn blocks(x: &Tensor, batch: usize, heads: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
        let (t, dh) = (x.shape()[1], x.shape()[2]);
        (0..batch)
            .map(|b| {
                (0..heads)
                    .map(|h| {
                        (0..t)
                            .map(|ti| (0..dh).map(|d| x.data()[(((b * heads + h) * t) + ti) * dh + d] as f64).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn feature_loss_matches_second_implementation() {
        let (student, teacher, d) = toy_pair();
        let idx = [0usize, 5, 9];
        let images = d.images(&idx).unwrap();
        let spec = DistillSpec::default();
        let mut st = Tape::new();
        let scap = student.forward(&mut st, &images).unwrap();
        let mut tt = Tape::new();
        let tcap = teacher.forward(&mut tt, &images).unwrap();
        let mut rng = rng_from(42);
        let loss = feature_match_loss(&mut st, &scap, 2, &tt, &tcap, 4, &spec, &mut rng).unwrap();
        let got = st.scalar(loss);

        // replay the same head draws: one sorted subset per (layer, P, axis) when the teacher is larger
        let mut rng = rng_from(42);
        let map = layer_map(2, 4);
        let mut want = 0.0;
        for (j, &k) in map.iter().enumerate() {
            let (sl, tl) = (&scap.layers[j], &tcap.layers[k - 1]);
            for (sv, tv) in [(sl.q, tl.q), (sl.k, tl.k), (sl.v, tl.v)] {
                let sb = blocks(st.value(sv), 3, 2);
                let tb = blocks(tt.value(tv), 3, 4);
                let (sd, td) = ([2usize, 5, 8], [4usize, 5, 8]);
                let picks: Vec<Option<Vec<usize>>> = (0..3)
                    .map(|a| {
                        (td[a] > sd[a]).then(|| {
                            let mut p = sample_without_replacement(&mut rng, td[a], sd[a]);
                            p.sort_unstable();
                            p
                        })
                    })
                    .collect();
                let mut per_p = 0.0;
                for axis in 1..=3 {
                    let mut acc = 0.0;
                    for b in 0..3 {
                        let ps = map_naive(&unfold_naive(&sb[b], axis));
                        let mut tu = unfold_naive(&tb[b], axis);
                        if let Some(p) = &picks[axis - 1] {
                            tu = p.iter().map(|&r| tu[r].clone()).collect();
                        }
                        acc += kl_naive(&ps, &map_naive(&tu));
                    }
                    per_p += acc / 3.0;
                }
                want += per_p / 3.0 / (3.0 * 2.0);
            }
        }
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn identical_captures_give_zero_and_perturbation_does_not() {
        let (_, teacher, d) = toy_pair();
        let images = d.images(&[1, 2]).unwrap();
        let spec = DistillSpec::default();
        let mut tt = Tape::new();
        let tcap = teacher.forward(&mut tt, &images).unwrap();
        let mut st = Tape::new();
        let scap = teacher.forward(&mut st, &images).unwrap();
        let mut rng = rng_from(1);
        let same = DistillSpec { layer_map: Some(vec![1, 2, 3, 4]), ..spec.clone() };
        let l = feature_match_loss(&mut st, &scap, 4, &tt, &tcap, 4, &same, &mut rng).unwrap();
        assert!(st.scalar(l).abs() < 1e-6, "{}", st.scalar(l));

        let mut other = teacher.clone();
        let mut prng = rng_from(9);
        for x in other.layers[2].wk.data_mut() {
            *x += prng.random_range(-0.05..0.05);
        }
        let mut st = Tape::new();
        let scap = other.forward(&mut st, &images).unwrap();
        let l = feature_match_loss(&mut st, &scap, 4, &tt, &tcap, 4, &same, &mut rng).unwrap();
        let v = st.scalar(l);
        assert!(v > 0.0 && v.is_finite(), "{v}");
    }

    #[test]
    fn feature_loss_gradient_check() {
        let (student, teacher, d) = toy_pair();
        let images = d.images(&[3, 4]).unwrap();
        let spec = DistillSpec::default();
        let eval = |m: &ViTModel, grad: bool| -> (f64, Option<Vec<f32>>) {
            let mut tt = Tape::new();
            let tcap = teacher.forward(&mut tt, &images).unwrap();
            let mut st = Tape::new();
            let bound = m.bind(&mut st, grad);
            let cap = vit_forward(&m.config, &bound, &mut st, &images).unwrap();
            let mut rng = rng_from(5);
            let l = feature_match_loss(&mut st, &cap, 2, &tt, &tcap, 4, &spec, &mut rng).unwrap();
            let v = st.scalar(l);
            if grad {
                st.backward(l).unwrap();
                // layers.0.attn.wq
                (v, Some(st.grad(bound.vars[4 + 2]).unwrap().to_vec()))
            } else {
                (v, None)
            }
        };
        let mut m = student.clone();
        for x in m.layers[0].wq.data_mut() {
            *x *= 20.0;
        }
        let (_, g) = eval(&m, true);
        let g = g.unwrap();
        let h = 1e-3f32;
        let mut diff = 0.0f64;
        let mut norm_a = 0.0f64;
        let mut norm_n = 0.0f64;
        for i in (0..g.len()).step_by(7) {
            let mut p = m.clone();
            p.layers[0].wq.data_mut()[i] += h;
            let mut q = m.clone();
            q.layers[0].wq.data_mut()[i] -= h;
            let n = (eval(&p, false).0 - eval(&q, false).0) / (2.0 * h as f64);
            diff += (g[i] as f64 - n).powi(2);
            norm_a += (g[i] as f64).powi(2);
            norm_n += n * n;
        }
        let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt());
        assert!(rel <= 1e-3, "{rel}");
    }

    #[test]
    fn subtask_training_is_reproducible_and_beta_zero_skips_features() {
        let (student, teacher, d) = toy_pair();
        let s = d.split();
        let train = TrainSettings { steps: 8, batch_size: 8, eval_every: 4, ..Default::default() };
        let spec = DistillSpec { train, ..Default::default() };
        let a = train_subtask(student.clone(), &teacher, &d, &s.train, &s.val, &spec, 3).unwrap();
        let b = train_subtask(student.clone(), &teacher, &d, &s.train, &s.val, &spec, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve, b.curve);
        assert!(a.curve.iter().all(|p| p.loss_feat > 0.0));
        let z = DistillSpec { beta: 0.0, ..spec };
        let c = train_subtask(student, &teacher, &d, &s.train, &s.val, &z, 3).unwrap();
        assert!(c.curve.iter().all(|p| p.loss_feat == 0.0 && p.total == p.loss_pred));
    }

    #[test]
    fn copied_teacher_has_zero_initial_feature_loss() {
        let (_, teacher, d) = toy_pair();
        let s = d.split();
        let train = TrainSettings { steps: 1, batch_size: 8, learning_rate: 0.0, min_learning_rate: 0.0, ..Default::default() };
        let spec = DistillSpec { train, layer_map: Some(vec![1, 2, 3, 4]), ..Default::default() };
        let r = train_subtask(teacher.clone(), &teacher, &d, &s.train, &s.val, &spec, 3).unwrap();
        assert!(r.curve[0].loss_feat.abs() < 1e-6);
    }
}
