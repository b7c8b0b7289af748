//! Plain ViT backbone: linear patch embedding, `[class]` token, learned
//! position embeddings, pre-norm encoder layers (LN → MSA → residual,
//! LN → MLP → residual) and a single linear classification head.
//!
//! There is no LayerNorm after the last encoder, so the allocated parameter
//! set is exactly the one counted by [`count_params`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{rng_from, truncated_normal};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;
pub const INIT_STD: f32 = 0.02;

/// Human-readable statement of what [`count_flops`] counts.
pub const FLOP_ACCOUNTING: &str = "flops = 2 * MACs; MACs = M*(P^2*C)*D [patch embedding] \
+ L*( 3*T*D*D [Q,K,V projections] + T*D*D [output projection] + h*T*T*Dh [scores] \
+ h*T*T*Dh [weighted sum] + 2*T*D*d [MLP] ) + D*N_class [head], with T = M+1 (D*D becomes D*h*Dh when the attention width is narrower); \
biases, LayerNorm, softmax and GELU are not counted";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Per-head width when attention is narrower than the residual stream;
    /// `None` means `embed_dim / heads`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
}

impl ViTConfig {
    /// ViT-L/16 at 224×224 for 1000 classes.
    pub fn vit_l16() -> Self {
        ViTConfig {
            image_side: 224,
            patch_size: 16,
            channels: 3,
            layers: 24,
            embed_dim: 1024,
            heads: 16,
            mlp_dim: 4096,
            num_classes: 1000,
            head_dim: None,
        }
    }

    /// DeiT-B geometry (plain ViT backbone, no distillation token).
    pub fn deit_b() -> Self {
        ViTConfig { layers: 12, embed_dim: 768, heads: 12, mlp_dim: 3072, ..Self::vit_l16() }
    }

    /// The decomposed small model used with both large backbones: 12 layers,
    /// width 192, MLP 768, 3 heads.
    pub fn decomposed_small() -> Self {
        ViTConfig { layers: 12, embed_dim: 192, heads: 3, mlp_dim: 768, ..Self::vit_l16() }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.embed_dim / self.heads)
    }

    /// Width of the concatenated head outputs, `h·Dh`.
    pub fn attn_dim(&self) -> usize {
        self.heads * self.head_dim()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// True when the head width is the 64 used by the reference backbones.
    pub fn has_standard_head_dim(&self) -> bool {
        self.head_dim() == 64
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_side", self.image_side),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("ViT {name} must be positive")));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image side {} is not a multiple of patch size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.head_dim == Some(0) {
            return Err(Error::config("ViT head_dim must be positive"));
        }
        if self.head_dim.is_none() && self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Closed-form parameter count:
/// `(P²C+M+3)D + L(4D²+4D+2Dd+D+d+4D) + (D+1)·N_class`.
///
/// With an explicit narrower attention width `A = h·Dh` the attention term
/// `4D²+4D` becomes `4DA+3A+D`.
pub fn count_params(cfg: &ViTConfig) -> u64 {
    let (p, c, m) = (cfg.patch_size as u64, cfg.channels as u64, cfg.num_patches() as u64);
    let (l, d, mlp, k) = (cfg.layers as u64, cfg.embed_dim as u64, cfg.mlp_dim as u64, cfg.num_classes as u64);
    let a = cfg.attn_dim() as u64;
    (p * p * c + m + 3) * d + l * (4 * d * a + 3 * a + d + 2 * d * mlp + d + mlp + 4 * d) + (d + 1) * k
}

/// Per-layer MAC count, see [`FLOP_ACCOUNTING`].
pub fn layer_macs(cfg: &ViTConfig) -> u64 {
    let t = cfg.tokens() as u64;
    let (d, h, dh, mlp) = (cfg.embed_dim as u64, cfg.heads as u64, cfg.head_dim() as u64, cfg.mlp_dim as u64);
    let a = h * dh;
    3 * t * d * a + t * a * d + 2 * h * t * t * dh + 2 * t * d * mlp
}

/// Forward-pass FLOPs (two per multiply-accumulate), see [`FLOP_ACCOUNTING`].
pub fn count_flops(cfg: &ViTConfig) -> u64 {
    let m = cfg.num_patches() as u64;
    let d = cfg.embed_dim as u64;
    let embed = m * cfg.patch_dim() as u64 * d;
    let head = d * cfg.num_classes as u64;
    2 * (embed + cfg.layers as u64 * layer_macs(cfg) + head)
}

/// One pre-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const LAYER_PARAM_NAMES: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

impl EncoderLayer {
    fn init(d: usize, a: usize, mlp: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let w = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
            Tensor::new(&[r, c], truncated_normal(rng, r * c, INIT_STD)).expect("shape")
        };
        EncoderLayer {
            ln1_g: Tensor::ones(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: w(rng, d, a),
            bq: Tensor::zeros(&[a]),
            wk: w(rng, d, a),
            bk: Tensor::zeros(&[a]),
            wv: w(rng, d, a),
            bv: Tensor::zeros(&[a]),
            wo: w(rng, a, d),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::ones(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: w(rng, d, mlp),
            b1: Tensor::zeros(&[mlp]),
            w2: w(rng, mlp, d),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn params(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo,
            &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk,
            &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b,
            &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    /// `[P²C, D]`; patch features are ordered channel, row, column.
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    /// `[M+1, D]`, row 0 belongs to the class token.
    pub pos: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViTModel {
    /// Truncated-normal (std 0.02) weights; zero biases and class token; unit LN gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed);
        let (d, k) = (config.embed_dim, config.num_classes);
        let pd = config.patch_dim();
        let patch_w = Tensor::new(&[pd, d], truncated_normal(&mut rng, pd * d, INIT_STD))?;
        let t = config.tokens();
        let pos = Tensor::new(&[t, d], truncated_normal(&mut rng, t * d, INIT_STD))?;
        let layers = (0..config.layers).map(|_| EncoderLayer::init(d, config.attn_dim(), config.mlp_dim, &mut rng)).collect();
        let head_w = Tensor::new(&[d, k], truncated_normal(&mut rng, d * k, INIT_STD))?;
        Ok(ViTModel {
            config: config.clone(),
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::zeros(&[d]),
            pos,
            layers,
            head_w,
            head_b: Tensor::zeros(&[k]),
        })
    }

    /// Parameters with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch.weight".to_string(), &self.patch_w),
            ("patch.bias".to_string(), &self.patch_b),
            ("cls_token".to_string(), &self.cls),
            ("pos_embed".to_string(), &self.pos),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in LAYER_PARAM_NAMES.iter().zip(layer.params()) {
                out.push((format!("layers.{i}.{name}"), p));
            }
        }
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Runtime enumeration of every allocated parameter.
    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Rebuild from named tensors (checkpoint loading); shapes are checked.
    pub fn from_named(config: &ViTConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut model = ViTModel::zeros(config)?;
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = lookup(name).ok_or_else(|| Error::format(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// All-zero parameters with the right shapes.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        let mut m = ViTModel::init(config, 0)?;
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundViT {
        BoundViT {
            vars: self.named_params().into_iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect(),
            layers: self.config.layers,
        }
    }

    /// Bind as constants and run forward.
    pub fn forward(&self, tape: &mut Tape, images: &Tensor) -> Result<ForwardCapture> {
        let bound = self.bind(tape, false);
        vit_forward(&self.config, &bound, tape, images)
    }

    /// Logits for a batch, computed on a scratch tape.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let cap = self.forward(&mut tape, images)?;
        Ok(tape.value(cap.logits).clone())
    }
}

/// Tape handles for a bound [`ViTModel`], in [`ViTModel::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundViT {
    pub vars: Vec<Var>,
    layers: usize,
}

impl BoundViT {
    fn layer(&self, i: usize) -> &[Var] {
        &self.vars[4 + 16 * i..4 + 16 * (i + 1)]
    }

    fn head(&self) -> (Var, Var) {
        let n = 4 + 16 * self.layers;
        (self.vars[n], self.vars[n + 1])
    }
}

/// Per-layer tape handles recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct LayerCapture {
    /// `[B·h, T, Dh]` each.
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// Attention probabilities `[B·h, T, T]`.
    pub attn: Var,
    /// Concatenated head outputs before the output projection, `[B·T, D]`.
    pub heads_out: Var,
    /// MLP hidden activations after GELU, `[B·T, d]`.
    pub mlp_hidden: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardCapture {
    pub batch: usize,
    pub layers: Vec<LayerCapture>,
    /// Final `[class]` token per image, `[B, D]`.
    pub class_token: Var,
    /// `[B, N_class]`.
    pub logits: Var,
}

/// Cut `[B, C, S, S]` images into `[B·M, P²C]` flattened patches.
pub fn patchify(cfg: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    let (b, c, side) = match s[..] {
        [b, c, h, w] if h == w => (b, c, h),
        _ => return Err(Error::shape(format!("images must be [B, C, S, S], got {s:?}"))),
    };
    if c != cfg.channels || side != cfg.image_side {
        return Err(Error::shape(format!(
            "image geometry {c}x{side}x{side} does not match config {}x{}x{}",
            cfg.channels, cfg.image_side, cfg.image_side
        )));
    }
    let (p, g) = (cfg.patch_size, cfg.grid());
    let pd = cfg.patch_dim();
    let src = images.data();
    let mut out = vec![0.0; b * g * g * pd];
    for bi in 0..b {
        for py in 0..g {
            for px in 0..g {
                let row = (bi * g * g + py * g + px) * pd;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = py * p + dy;
                            let x = px * p + dx;
                            out[row + (ch * p + dy) * p + dx] = src[((bi * c + ch) * side + y) * side + x];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b * g * g, pd], out)
}

/// Batched multi-head attention core: `softmax(Q·Kᵀ/√Dh)·V` over `[G, T, Dh]`.
/// Returns `(output, probabilities)`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *tape.value(q).shape().last().unwrap();
    let scores = tape.batch_matmul(q, k, true)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f32).sqrt());
    let probs = tape.softmax(scaled, 2)?;
    let out = tape.batch_matmul(probs, v, false)?;
    Ok((out, probs))
}

/// Single-head self-attention on `[T, Dh]` matrices.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let lift = |tape: &mut Tape, x: Var| -> Result<Var> {
        let (t, d) = tape.value(x).dims2()?;
        tape.reshape(x, &[1, t, d])
    };
    let (qt, kt) = (tape.value(q).dims2()?, tape.value(k).dims2()?);
    let vt = tape.value(v).dims2()?;
    if qt.1 != kt.1 || kt.0 != vt.0 {
        return Err(Error::shape(format!("self_attention: Q {qt:?}, K {kt:?}, V {vt:?}")));
    }
    let (q3, k3, v3) = (lift(tape, q)?, lift(tape, k)?, lift(tape, v)?);
    let (o, _) = attention(tape, q3, k3, v3)?;
    tape.reshape(o, &[qt.0, vt.1])
}

/// Full forward pass over `[B, C, S, S]` images.
pub fn vit_forward(cfg: &ViTConfig, bound: &BoundViT, tape: &mut Tape, images: &Tensor) -> Result<ForwardCapture> {
    let batch = images.shape()[0];
    let patches = tape.constant(patchify(cfg, images)?);
    let (t, h) = (cfg.tokens(), cfg.heads);
    let v = &bound.vars;
    let emb = tape.matmul(patches, v[0])?;
    let emb = tape.add_bias(emb, v[1])?;
    let mut x = tape.assemble_tokens(emb, v[2], v[3], batch)?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for li in 0..cfg.layers {
        let p = bound.layer(li);
        let n1 = tape.layer_norm(x, p[0], p[1], LN_EPS)?;
        let proj = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
            let y = tape.matmul(n1, w)?;
            let y = tape.add_bias(y, b)?;
            tape.split_heads(y, batch, t, h)
        };
        let q = proj(tape, p[2], p[3])?;
        let k = proj(tape, p[4], p[5])?;
        let vv = proj(tape, p[6], p[7])?;
        let (o, attn) = attention(tape, q, k, vv)?;
        let heads_out = tape.merge_heads(o, batch, t, h)?;
        let a = tape.matmul(heads_out, p[8])?;
        let a = tape.add_bias(a, p[9])?;
        x = tape.add(x, a)?;

        let n2 = tape.layer_norm(x, p[10], p[11], LN_EPS)?;
        let hdn = tape.matmul(n2, p[12])?;
        let hdn = tape.add_bias(hdn, p[13])?;
        let act = tape.gelu(hdn);
        let m = tape.matmul(act, p[14])?;
        let m = tape.add_bias(m, p[15])?;
        x = tape.add(x, m)?;
        layers.push(LayerCapture { q, k, v: vv, attn, heads_out, mlp_hidden: act });
    }

    let rows: Vec<usize> = (0..batch).map(|b| b * t).collect();
    let class_token = tape.gather_rows(x, &rows)?;
    let (hw, hb) = bound.head();
    let logits = tape.matmul(class_token, hw)?;
    let logits = tape.add_bias(logits, hb)?;
    Ok(ForwardCapture { batch, layers, class_token, logits })
}
