//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`], so
//! nodes are stored in topological order by construction. [`Tape::backward`]
//! walks the tape in reverse, computes the adjoint of every node reachable from
//! the loss and adds the adjoints of `requires_grad` leaves into their gradient
//! buffers. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
//!
//! Broadcasting is limited to adding a bias vector over the last axis; every
//! other shape disagreement is a [`Error::Shape`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Probability floor used by [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu(Var),
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    Reshape(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    Matricize { x: Var, axis: usize },
    AssembleTokens { patches: Var, cls: Var, pos: Var, batch: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32>, clipped: Vec<bool> },
    KlDiv { logp: Var, target: Tensor },
    Mse { x: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Full-precision value of scalar reductions.
    scalar64: Option<f64>,
}

/// Computation tape. Confined to one thread; values are immutable once recorded.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    adjoints: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push64(value, op, requires_grad, None)
    }

    fn push64(&mut self, value: Tensor, op: Op, requires_grad: bool, s: Option<f64>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, scalar64: s });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Leaves with `requires_grad` receive gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a scalar node, at full precision when the node is a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar64.unwrap_or(n.value.data()[0] as f64)
    }

    /// Accumulated gradient of a leaf, present after a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Adjoint of any node (leaf or intermediate) from the most recent backward pass.
    pub fn adjoint(&self, v: Var) -> Option<&[f32]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Clear accumulated leaf gradients and stored adjoints.
    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
        self.adjoints.clear();
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[g, m, k]` with `[g, k, n]`, or with `[g, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let bad = || Error::shape(format!("batch_matmul shapes {sa:?} x {sb:?} (transpose_b={transpose_b})"));
        let (g, m, k) = match sa[..] {
            [g, m, k] => (g, m, k),
            _ => return Err(bad()),
        };
        let (g2, kb, n) = match (&sb[..], transpose_b) {
            (&[g2, kb, n], false) => (g2, kb, n),
            (&[g2, n, kb], true) => (g2, kb, n),
            _ => return Err(bad()),
        };
        if g != g2 || k != kb {
            return Err(bad());
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            let (aa, oo) = (&ad[i * m * k..(i + 1) * m * k], &mut out[i * m * n..(i + 1) * m * n]);
            let bb = &bd[i * k * n..(i + 1) * k * n];
            if transpose_b {
                gemm_nt(aa, bb, oo, m, k, n);
            } else {
                gemm(aa, bb, oo, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(&[g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    /// `x + bias` with `bias` repeated over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let n = *xs.last().unwrap();
        if self.value(bias).numel() != n {
            return Err(Error::shape(format!(
                "bias of shape {:?} does not match last extent of {xs:?}",
                self.value(bias).shape()
            )));
        }
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bd) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&xs, out)?, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.value(a).shape(), out)?;
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let out: Vec<f32> = v.data().iter().map(|&e| e * c).collect();
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis)?;
        let mut out = v.data().to_vec();
        softmax_axis(&mut out, outer, len, inner);
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|&e| ((e - max) as f64).exp()).sum::<f64>().ln() as f32 + max;
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// LayerNorm over the last axis with biased variance and `eps` inside the root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let n = *v.shape().last().unwrap();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(format!(
                "layer_norm affine params {:?}/{:?} do not match last extent of {:?}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                v.shape()
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = v.numel() / n;
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&e| e as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&e| (e as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<f32> = v.data().iter().map(|&e| gelu(e)).collect();
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// `[batch·tokens, heads·dh]` → `[batch·heads, tokens, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if r != batch * tokens || c % heads != 0 {
            return Err(Error::shape(format!(
                "split_heads: {:?} is not ({batch}·{tokens}) x ({heads}·dh)",
                v.shape()
            )));
        }
        let dh = c / heads;
        let mut out = vec![0.0; v.numel()];
        permute_heads(v.data(), &mut out, batch, tokens, heads, dh, true);
        let t = Tensor::new(&[batch * heads, tokens, dh], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SplitHeads { x, batch, tokens, heads }, rg))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let v = self.value(x);
        let dh = match v.shape()[..] {
            [g, t, dh] if g == batch * heads && t == tokens => dh,
            _ => {
                return Err(Error::shape(format!(
                    "merge_heads: {:?} is not ({batch}·{heads}) x {tokens} x dh",
                    v.shape()
                )))
            }
        };
        let mut out = vec![0.0; v.numel()];
        permute_heads(v.data(), &mut out, batch, tokens, heads, dh, false);
        let t = Tensor::new(&[batch * tokens, heads * dh], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MergeHeads { x, batch, tokens, heads }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Gather rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(rows)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero matrices"));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: row counts {rows} and {r} differ")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(&[rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Batched mode-`axis` unfolding of `[g, a, b, c]` into `[g, rows, cols]`.
    ///
    /// Axis 1 gives `a × (b·c)`, axis 2 `b × (a·c)`, axis 3 `c × (a·b)`; the
    /// remaining axes index the columns in ascending order, row-major.
    pub fn matricize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (g, a, b, c) = match v.shape()[..] {
            [g, a, b, c] => (g, a, b, c),
            _ => return Err(Error::shape(format!("matricize expects [g,a,b,c], got {:?}", v.shape()))),
        };
        let (rows, cols) = unfold_dims(a, b, c, axis)?;
        let mut out = vec![0.0; v.numel()];
        let per = a * b * c;
        for gi in 0..g {
            let src = &v.data()[gi * per..(gi + 1) * per];
            let dst = &mut out[gi * per..(gi + 1) * per];
            for_each_unfold(a, b, c, axis, |s, d| dst[d] = src[s]);
        }
        let t = Tensor::new(&[g, rows, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Matricize { x, axis }, rg))
    }

    /// Prepend the class token to every image's patch embeddings and add
    /// position embeddings. `patches` is `[batch·m, d]`, `cls` has `d`
    /// entries and `pos` is `[m+1, d]`; the result is `[batch·(m+1), d]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (pr, d) = self.value(patches).dims2()?;
        let (t, d2) = self.value(pos).dims2()?;
        if pr != batch * (t - 1) || d2 != d || self.value(cls).numel() != d {
            return Err(Error::shape(format!(
                "assemble_tokens: patches {:?}, cls {:?}, pos {:?}, batch {batch}",
                self.value(patches).shape(),
                self.value(cls).shape(),
                self.value(pos).shape()
            )));
        }
        let m = t - 1;
        let (pd, cd, posd) = (self.value(patches).data(), self.value(cls).data(), self.value(pos).data());
        let mut out = vec![0.0; batch * t * d];
        for bi in 0..batch {
            for ti in 0..t {
                let dst = &mut out[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let src = if ti == 0 { cd } else { &pd[(bi * m + ti - 1) * d..(bi * m + ti) * d] };
                let p = &posd[ti * d..(ti + 1) * d];
                for j in 0..d {
                    dst[j] = src[j] + p[j];
                }
            }
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        let tt = Tensor::new(&[batch * t, d], out)?;
        Ok(self.push(tt, Op::AssembleTokens { patches, cls, pos, batch }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&e| e as f64).sum();
        let rg = self.rg(x);
        self.push64(Tensor::scalar(s as f32), Op::Sum(x), rg, Some(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().map(|&e| e as f64).sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push64(Tensor::scalar(s as f32), Op::Mean(x), rg, Some(s))
    }

    /// Mean cross entropy of `softmax(logits)` against integer targets, with
    /// each probability floored at [`PROB_FLOOR`]. Floored terms contribute no gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (b, k) = v.dims2()?;
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for {b} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = v.data().to_vec();
        softmax_axis(&mut probs, b, k, 1);
        let mut total = 0.0f64;
        let mut clipped = vec![false; b];
        for (i, &t) in targets.iter().enumerate() {
            let row = &v.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = row.iter().map(|&e| (e as f64 - max).exp()).sum::<f64>().ln() + max;
            let logp = row[t] as f64 - lse;
            if logp < PROB_FLOOR.ln() {
                clipped[i] = true;
                total -= PROB_FLOOR.ln();
            } else {
                total -= logp;
            }
        }
        let loss = total / b as f64;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, clipped };
        Ok(self.push64(Tensor::scalar(loss as f32), op, rg, Some(loss)))
    }

    /// `mean_rows Σ q·(ln q − logp)` over the last axis, where `logp` holds
    /// log-probabilities and `target` the reference distribution `q`.
    pub fn kl_div(&mut self, logp: Var, target: &Tensor) -> Result<Var> {
        let v = self.value(logp);
        if v.shape() != target.shape() {
            return Err(Error::shape(format!(
                "kl_div: log-probs {:?} vs target {:?}",
                v.shape(),
                target.shape()
            )));
        }
        let n = *v.shape().last().unwrap();
        let rows = v.numel() / n;
        let mut total = 0.0f64;
        for (&lp, &q) in v.data().iter().zip(target.data()) {
            if q > 0.0 {
                total += q as f64 * ((q as f64).ln() - lp as f64);
            }
        }
        let loss = total / rows as f64;
        let rg = self.rg(logp);
        Ok(self.push64(Tensor::scalar(loss as f32), Op::KlDiv { logp, target: target.clone() }, rg, Some(loss)))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let v = self.value(x);
        if v.shape() != target.shape() {
            return Err(Error::shape(format!("mse: {:?} vs target {:?}", v.shape(), target.shape())));
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / v.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push64(Tensor::scalar(s as f32), Op::Mse { x, target: target.clone() }, rg, Some(s)))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagate from a scalar loss and accumulate leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = adj[i].take() else { continue };
            self.propagate(i, &dy, &mut adj);
            adj[i] = Some(dy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; node.value.numel()]);
            if let Some(a) = &adj[i] {
                for (x, y) in g.iter_mut().zip(a) {
                    *x += y;
                }
            }
        }
        self.adjoints = adj;
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.rg(*a) {
                    gemm_nt(dy, self.value(*b).data(), slot(adj, *a, m * k), m, n, k);
                }
                if self.rg(*b) {
                    gemm_tn(self.value(*a).data(), dy, slot(adj, *b, k * n), k, m, n);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.value(*a).shape();
                let (g, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = slot(adj, *a, g * m * k);
                    for gi in 0..g {
                        let dd = &dy[gi * m * n..(gi + 1) * m * n];
                        let bb = &bd[gi * k * n..(gi + 1) * k * n];
                        let o = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *transpose_b {
                            gemm(dd, bb, o, m, n, k);
                        } else {
                            gemm_nt(dd, bb, o, m, n, k);
                        }
                    }
                }
                if self.rg(*b) {
                    let db = slot(adj, *b, g * k * n);
                    for gi in 0..g {
                        let dd = &dy[gi * m * n..(gi + 1) * m * n];
                        let aa = &ad[gi * m * k..(gi + 1) * m * k];
                        let o = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *transpose_b {
                            gemm_tn(dd, aa, o, n, m, k);
                        } else {
                            gemm_tn(aa, dd, o, k, m, n);
                        }
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    add_into(slot(adj, *x, dy.len()), dy);
                }
                if self.rg(*b) {
                    let n = self.value(*b).numel();
                    let db = slot(adj, *b, n);
                    for row in dy.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(slot(adj, *v, dy.len()), dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(slot(adj, *a, dy.len()), dy);
                }
                if self.rg(*b) {
                    for (o, d) in slot(adj, *b, dy.len()).iter_mut().zip(dy) {
                        *o -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    for ((o, d), y) in slot(adj, *a, dy.len()).iter_mut().zip(dy).zip(bd) {
                        *o += d * y;
                    }
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    for ((o, d), x) in slot(adj, *b, dy.len()).iter_mut().zip(dy).zip(ad) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, d) in slot(adj, *x, dy.len()).iter_mut().zip(dy) {
                    *o += d * c;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).unwrap();
                let y = out.data();
                let dx = slot(adj, *x, dy.len());
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let dot: f32 = (0..len).map(|l| dy[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] += y[at(l)] * (dy[at(l)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *out.shape().last().unwrap();
                let dx = slot(adj, *x, dy.len());
                for ((drow, yrow), orow) in dy.chunks(n).zip(out.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f32 = drow.iter().sum();
                    for ((o, d), y) in orow.iter_mut().zip(drow).zip(yrow) {
                        *o += d - y.exp() * s;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.value(*gamma).numel();
                let g = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let dg = slot(adj, *gamma, n);
                    for (drow, hrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, d), h) in dg.iter_mut().zip(drow).zip(hrow) {
                            *o += d * h;
                        }
                    }
                }
                if self.rg(*beta) {
                    let db = slot(adj, *beta, n);
                    for drow in dy.chunks(n) {
                        add_into(db, drow);
                    }
                }
                if self.rg(*x) {
                    let dx = slot(adj, *x, dy.len());
                    for (r, ((drow, hrow), orow)) in
                        dy.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate()
                    {
                        let dh: Vec<f32> = drow.iter().zip(g).map(|(d, g)| d * g).collect();
                        let m1 = dh.iter().sum::<f32>() / n as f32;
                        let m2 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                        for j in 0..n {
                            orow[j] += rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                for ((o, d), &e) in slot(adj, *x, dy.len()).iter_mut().zip(dy).zip(xd) {
                    *o += d * gelu_grad(e);
                }
            }
            Op::SplitHeads { x, batch, tokens, heads } => {
                let dh = out.shape()[2];
                let mut tmp = vec![0.0; dy.len()];
                permute_heads(dy, &mut tmp, *batch, *tokens, *heads, dh, false);
                add_into(slot(adj, *x, dy.len()), &tmp);
            }
            Op::MergeHeads { x, batch, tokens, heads } => {
                let dh = out.shape()[1] / heads;
                let mut tmp = vec![0.0; dy.len()];
                permute_heads(dy, &mut tmp, *batch, *tokens, *heads, dh, true);
                add_into(slot(adj, *x, dy.len()), &tmp);
            }
            Op::Reshape(x) => add_into(slot(adj, *x, dy.len()), dy),
            Op::GatherRows { x, rows } => {
                let c = out.shape()[1];
                let dx = slot(adj, *x, self.value(*x).numel());
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut dx[r * c..(r + 1) * c], &dy[k * c..(k + 1) * c]);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let dp = slot(adj, p, rows * w);
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &dy[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Matricize { x, axis } => {
                let s = self.value(*x).shape();
                let (g, a, b, c) = (s[0], s[1], s[2], s[3]);
                let per = a * b * c;
                let dx = slot(adj, *x, g * per);
                for gi in 0..g {
                    let src = &dy[gi * per..(gi + 1) * per];
                    let dst = &mut dx[gi * per..(gi + 1) * per];
                    for_each_unfold(a, b, c, *axis, |s, d| dst[s] += src[d]);
                }
            }
            Op::AssembleTokens { patches, cls, pos, batch } => {
                let (t, d) = self.value(*pos).dims2().unwrap();
                let m = t - 1;
                if self.rg(*pos) {
                    let dp = slot(adj, *pos, t * d);
                    for bi in 0..*batch {
                        add_into(dp, &dy[bi * t * d..(bi + 1) * t * d]);
                    }
                }
                if self.rg(*cls) {
                    let dc = slot(adj, *cls, d);
                    for bi in 0..*batch {
                        add_into(dc, &dy[bi * t * d..bi * t * d + d]);
                    }
                }
                if self.rg(*patches) {
                    let dp = slot(adj, *patches, batch * m * d);
                    for bi in 0..*batch {
                        for mi in 0..m {
                            let src = &dy[(bi * t + mi + 1) * d..(bi * t + mi + 2) * d];
                            add_into(&mut dp[(bi * m + mi) * d..(bi * m + mi + 1) * d], src);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                for o in slot(adj, *x, n) {
                    *o += dy[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = dy[0] / n as f32;
                for o in slot(adj, *x, n) {
                    *o += g;
                }
            }
            Op::CrossEntropy { logits, targets, probs, clipped } => {
                let b = targets.len();
                let k = probs.len() / b;
                let scale = dy[0] / b as f32;
                let dx = slot(adj, *logits, b * k);
                for (r, &t) in targets.iter().enumerate() {
                    if clipped[r] {
                        continue;
                    }
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dx[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::KlDiv { logp, target } => {
                let n = *target.shape().last().unwrap();
                let rows = target.numel() / n;
                let scale = dy[0] / rows as f32;
                for (o, &q) in slot(adj, *logp, target.numel()).iter_mut().zip(target.data()) {
                    *o -= scale * q;
                }
            }
            Op::Mse { x, target } => {
                let n = target.numel();
                let xd = self.value(*x).data();
                let scale = 2.0 * dy[0] / n as f32;
                for ((o, &a), &b) in slot(adj, *x, n).iter_mut().zip(xd).zip(target.data()) {
                    *o += scale * (a - b);
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Vec<f32>>], v: Var, n: usize) -> &mut Vec<f32> {
    adj[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_axis(data: &mut [f32], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let at = |l: usize| (o * len + l) * inner + j;
            let max = (0..len).map(|l| data[at(l)]).fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for l in 0..len {
                let e = ((data[at(l)] - max) as f64).exp();
                data[at(l)] = e as f32;
                total += e;
            }
            for l in 0..len {
                data[at(l)] = (data[at(l)] as f64 / total) as f32;
            }
        }
    }
}

/// Row/column counts of the mode-`axis` unfolding of an `a × b × c` array.
pub fn unfold_dims(a: usize, b: usize, c: usize, axis: usize) -> Result<(usize, usize)> {
    match axis {
        1 => Ok((a, b * c)),
        2 => Ok((b, a * c)),
        3 => Ok((c, a * b)),
        _ => Err(Error::shape(format!("matricization axis must be 1, 2 or 3, got {axis}"))),
    }
}

/// Visit `(source flat index, unfolded flat index)` pairs for one `a × b × c` block.
pub(crate) fn for_each_unfold(a: usize, b: usize, c: usize, axis: usize, mut f: impl FnMut(usize, usize)) {
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = (i * b + j) * c + k;
                let d = match axis {
                    1 => i * (b * c) + j * c + k,
                    2 => j * (a * c) + i * c + k,
                    _ => k * (a * b) + i * b + j,
                };
                f(s, d);
            }
        }
    }
}

fn permute_heads(src: &[f32], dst: &mut [f32], batch: usize, tokens: usize, heads: usize, dh: usize, split: bool) {
    let d = heads * dh;
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                let merged = (b * tokens + t) * d + h * dh;
                let sp = ((b * heads + h) * tokens + t) * dh;
                let (from, to) = if split { (merged, sp) } else { (sp, merged) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference gradient of `f` at `x` with step `h`.
    fn numeric_grad(x: &Tensor, h: f32, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h as f64)
            })
            .collect()
    }

    /// Norm-wise relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`. Per-entry ratios
    /// are dominated by f32 round-off on entries near zero.
    fn assert_close(analytic: &[f32], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        let diff: f64 = analytic.iter().zip(numeric).map(|(&a, &n)| (a as f64 - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let rel = if denom == 0.0 { 0.0 } else { diff / denom };
        assert!(rel <= tol, "relative error {rel:e} > {tol:e}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    /// Weighted sum of every output entry, so that all gradients are informative.
    fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Var {
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_gradient_matches_closed_form_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.leaf(b.clone(), true);
        let c = tape.matmul(av, bv).unwrap();
        let l = tape.sum(c);
        tape.backward(l).unwrap();

        let closed = Tensor::ones(&[3, 2]).matmul(&b.transpose2().unwrap()).unwrap();
        let got = tape.grad(av).unwrap();
        for (g, w) in got.iter().zip(closed.data()) {
            assert!((g - w).abs() < 1e-6);
        }
        let num = numeric_grad(&a, 1e-3, |x| {
            x.matmul(&b).unwrap().data().iter().map(|&v| v as f64).sum()
        });
        assert_close(got, &num, 1e-3);
    }

    #[test]
    fn softmax_basic_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&mut rng, &[3, 4, 5]);
        for axis in 0..3 {
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let y = tape.softmax(x, axis).unwrap();
            let (outer, len, inner) = axis_split(t.shape(), axis).unwrap();
            let d = tape.value(y).data();
            for o in 0..outer {
                for j in 0..inner {
                    let s: f32 = (0..len).map(|l| d[(o * len + l) * inner + j]).sum();
                    assert!((s - 1.0).abs() <= 1e-6, "axis {axis}: {s}");
                }
            }
        }
    }

    #[test]
    fn softmax_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[5]);
        let w = rand_tensor(&mut rng, &[5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let y = tape.softmax(xv, 0).unwrap();
        let l = weighted(&mut tape, y, &w);
        tape.backward(l).unwrap();
        let num = numeric_grad(&x, 1e-3, |x| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = t.softmax(xv, 0).unwrap();
            let l = weighted(&mut t, y, &w);
            t.scalar(l)
        });
        assert_close(tape.grad(xv).unwrap(), &num, 1e-3);
    }

    #[test]
    fn layer_norm_properties() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[1, 4], 3.0));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let g2 = tape.constant(Tensor::ones(&[2]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = tape.layer_norm(x, g2, b2, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g8 = tape.constant(Tensor::ones(&[8]));
        let b8 = tape.constant(Tensor::zeros(&[8]));
        let x = tape.constant(rand_tensor(&mut rng, &[2, 8]));
        let y = tape.layer_norm(x, g8, b8, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(8) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-5 && (var - 1.0).abs() <= 1e-5, "{mean} {var}");
        }
    }

    #[test]
    fn layer_norm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[3, 6]);
        let gm = rand_tensor(&mut rng, &[6]);
        let bt = rand_tensor(&mut rng, &[6]);
        let w = rand_tensor(&mut rng, &[3, 6]);
        let eval = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            let mut t = Tape::new();
            let (xv, gv, bv) = (t.constant(x.clone()), t.constant(gm.clone()), t.constant(bt.clone()));
            let y = t.layer_norm(xv, gv, bv, 1e-5).unwrap();
            let l = weighted(&mut t, y, &w);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(x.clone(), true), tape.leaf(gm.clone(), true), tape.leaf(bt.clone(), true));
        let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
        let l = weighted(&mut tape, y, &w);
        tape.backward(l).unwrap();
        assert_close(tape.grad(xv).unwrap(), &numeric_grad(&x, 1e-3, |x| eval(x, &gm, &bt)), 1e-3);
        assert_close(tape.grad(gv).unwrap(), &numeric_grad(&gm, 1e-3, |g| eval(&x, g, &bt)), 1e-3);
        assert_close(tape.grad(bv).unwrap(), &numeric_grad(&bt, 1e-3, |b| eval(&x, &gm, b)), 1e-3);
    }

    #[test]
    fn gelu_values_and_gradient() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-5);
        assert!(gelu(-10.0).abs() < 1e-5);
        let grid: Vec<f32> = (-40..=40).map(|i| i as f32 * 0.1).collect();
        for w in grid.windows(2).filter(|w| w[0] >= -0.75) {
            assert!(gelu(w[1]) > gelu(w[0]));
        }
        for &x in &[-2.0f32, -0.5, 0.5, 2.0] {
            let h = 1e-3f32;
            let num = (gelu(x + h) as f64 - gelu(x - h) as f64) / (2.0 * h as f64);
            let a = gelu_grad(x) as f64;
            assert!((a - num).abs() / a.abs().max(num.abs()) <= 1e-3, "x={x}: {a} vs {num}");
        }
    }

    #[test]
    fn backward_simple_losses() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let l = tape.sum(xv);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let sq = tape.mul(xv, xv).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_until_reset() {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = tape.mul(xv, xv).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        let first = tape.grad(xv).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice: Vec<f32> = first.iter().map(|g| 2.0 * g).collect();
        assert_eq!(tape.grad(xv).unwrap(), &twice[..]);
        tape.zero_grad();
        assert!(tape.grad(xv).is_none());
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &first[..]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2]), true);
        let b = tape.leaf(Tensor::ones(&[3]), true);
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn head_split_merge_round_trip_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2 * 3, 4 * 2]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let s = tape.split_heads(xv, 2, 3, 4).unwrap();
        assert_eq!(tape.value(s).shape(), &[8, 3, 2]);
        // head 1 of image 0, token 2 = columns 2..4 of row 2
        let row = &x.data()[2 * 8 + 2..2 * 8 + 4];
        assert_eq!(&tape.value(s).data()[(3 + 2) * 2..(3 + 2) * 2 + 2], row);
        let m = tape.merge_heads(s, 2, 3, 4).unwrap();
        assert_eq!(tape.value(m), &x);
        let w = rand_tensor(&mut rng, &[6, 8]);
        let l = weighted(&mut tape, m, &w);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), w.data());
    }

    #[test]
    fn batch_matmul_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 5, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 5]);
        let eval = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.batch_matmul(av, bv, true).unwrap();
            let l = weighted(&mut t, c, &w);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
        let c = tape.batch_matmul(av, bv, true).unwrap();
        let l = weighted(&mut tape, c, &w);
        tape.backward(l).unwrap();
        assert_close(tape.grad(av).unwrap(), &numeric_grad(&a, 1e-3, |a| eval(a, &b)), 1e-3);
        assert_close(tape.grad(bv).unwrap(), &numeric_grad(&b, 1e-3, |b| eval(&a, b)), 1e-3);

        // untransposed path: b as [g, k, n]
        let b2 = rand_tensor(&mut rng, &[2, 4, 5]);
        let eval2 = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let c = t.batch_matmul(av, bv, false).unwrap();
            let l = weighted(&mut t, c, &w);
            t.scalar(l)
        };
        let mut tape = Tape::new();
        let (av, bv) = (tape.leaf(a.clone(), true), tape.leaf(b2.clone(), true));
        let c = tape.batch_matmul(av, bv, false).unwrap();
        let l = weighted(&mut tape, c, &w);
        tape.backward(l).unwrap();
        assert_close(tape.grad(av).unwrap(), &numeric_grad(&a, 1e-3, |a| eval2(a, &b2)), 1e-3);
        assert_close(tape.grad(bv).unwrap(), &numeric_grad(&b2, 1e-3, |b| eval2(&a, b)), 1e-3);
    }

    #[test]
    fn loss_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = rand_tensor(&mut rng, &[4, 3]);
        let targets = [0usize, 2, 1, 2];
        let mut tape = Tape::new();
        let lv = tape.leaf(logits.clone(), true);
        let l = tape.cross_entropy(lv, &targets).unwrap();
        tape.backward(l).unwrap();
        let num = numeric_grad(&logits, 1e-3, |x| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let l = t.cross_entropy(v, &targets).unwrap();
            t.scalar(l)
        });
        assert_close(tape.grad(lv).unwrap(), &num, 1e-3);

        // KL through log-softmax against a fixed distribution
        let q = {
            let mut t = Tape::new();
            let v = t.constant(rand_tensor(&mut rng, &[2, 5]));
            let s = t.softmax(v, 1).unwrap();
            t.value(s).clone()
        };
        let x = rand_tensor(&mut rng, &[2, 5]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let lp = tape.log_softmax(xv).unwrap();
        let l = tape.kl_div(lp, &q).unwrap();
        tape.backward(l).unwrap();
        let num = numeric_grad(&x, 1e-3, |x| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let lp = t.log_softmax(v).unwrap();
            let l = t.kl_div(lp, &q).unwrap();
            t.scalar(l)
        });
        assert_close(tape.grad(xv).unwrap(), &num, 1e-3);
    }

    #[test]
    fn matricize_and_tokens_gradients_are_adjoint_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 4]);
        for axis in 1..=3 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let m = tape.matricize(xv, axis).unwrap();
            let w = rand_tensor(&mut rng, tape.value(m).shape());
            let l = weighted(&mut tape, m, &w);
            tape.backward(l).unwrap();
            // gradient of <w, P x> is Pᵀ w; check by re-applying P
            let g = Tensor::new(x.shape(), tape.grad(xv).unwrap().to_vec()).unwrap();
            let mut t2 = Tape::new();
            let gv = t2.constant(g);
            let pg = t2.matricize(gv, axis).unwrap();
            assert_eq!(t2.value(pg), &w);
        }

        let patches = rand_tensor(&mut rng, &[2 * 3, 4]);
        let cls = rand_tensor(&mut rng, &[4]);
        let pos = rand_tensor(&mut rng, &[4, 4]);
        let w = rand_tensor(&mut rng, &[8, 4]);
        let mut tape = Tape::new();
        let (p, c, q) = (tape.leaf(patches, true), tape.leaf(cls, true), tape.leaf(pos, true));
        let t = tape.assemble_tokens(p, c, q, 2).unwrap();
        let l = weighted(&mut tape, t, &w);
        tape.backward(l).unwrap();
        let want_cls: Vec<f32> = (0..4).map(|j| w.data()[j] + w.data()[16 + j]).collect();
        assert_eq!(tape.grad(c).unwrap(), &want_cls[..]);
        assert_eq!(&tape.grad(p).unwrap()[..4], &w.data()[4..8]);
    }

    #[test]
    fn cross_entropy_floor_keeps_loss_finite() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(&[1, 2], vec![100.0, -100.0]).unwrap(), true);
        let l = tape.cross_entropy(v, &[1]).unwrap();
        assert!((tape.scalar(l) - (-PROB_FLOOR.ln())).abs() < 1e-9);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[0.0, 0.0]);
        assert!(matches!(tape.cross_entropy(v, &[2]), Err(Error::Contract(_))));
    }
}
