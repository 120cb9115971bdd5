//! Transformer building blocks: linear layers, multi-head self-attention,
//! post-norm encoder layers, and sinusoidal position encodings.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything with named trainable parameters. Traversal order is fixed by the
/// structure, so checkpoints and checksums are stable across runs.
pub trait Module {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor));

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_parameters("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    fn count_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::numel).sum()
    }

    fn set_trainable(&self, trainable: bool) {
        for p in self.parameters() {
            p.set_requires_grad(trainable);
        }
    }

    /// SHA-256 over name-sorted parameter bytes; detects any drift in frozen
    /// weights.
    fn checksum(&self) -> String {
        let mut named = self.named_parameters();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let mut hasher = Sha256::new();
        for (name, t) in named {
            hasher.update(name.as_bytes());
            hasher.update((t.numel() as u64).to_le_bytes());
            t.with_data(|d| {
                for v in d {
                    hasher.update(v.to_le_bytes());
                }
            });
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x @ weight + bias` with weight shape `[in_dim, out_dim]`.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and bias drawn from U(-1/sqrt(in_dim), 1/sqrt(in_dim)).
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Linear> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidShape {
                op: "linear",
                detail: format!("dims must be positive, got {in_dim}x{out_dim}"),
            });
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Linear {
            weight: Tensor::param(weight, &[in_dim, out_dim])?,
            bias: Tensor::param(bias, &[out_dim])?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl Module for Linear {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        visit(join(prefix, "weight"), &self.weight);
        visit(join(prefix, "bias"), &self.bias);
    }
}

/// Layer normalization over the trailing feature axis with learned affine.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: Tensor::param(vec![1.0; dim], &[dim])?,
            beta: Tensor::param(vec![0.0; dim], &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        visit(join(prefix, "gamma"), &self.gamma);
        visit(join(prefix, "beta"), &self.beta);
    }
}

/// Additive attention mask value for disallowed positions. Finite so the
/// stabilized softmax stays NaN-free, yet large enough that masked weights
/// underflow to exactly zero.
pub const MASKED: f64 = -1e30;

/// Strictly-upper-triangular additive mask so position i attends only to
/// positions <= i.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = MASKED;
        }
    }
    Tensor::new(data, &[len, len]).expect("square mask")
}

/// Per-row additive mask `[batch, heads, tokens, tokens]` that blocks
/// attention to padded key positions. `pad` is row-major `[batch, tokens]`,
/// true where the slot is padding.
pub fn key_padding_mask(pad: &[bool], batch: usize, tokens: usize, heads: usize) -> Result<Tensor> {
    if pad.len() != batch * tokens {
        return Err(Error::InvalidShape {
            op: "key_padding_mask",
            detail: format!("{} flags for {batch} x {tokens} slots", pad.len()),
        });
    }
    let mut data = vec![0.0; batch * heads * tokens * tokens];
    for b in 0..batch {
        for k in 0..tokens {
            if pad[b * tokens + k] {
                for h in 0..heads {
                    for q in 0..tokens {
                        data[((b * heads + h) * tokens + q) * tokens + k] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(data, &[batch, heads, tokens, tokens])
}

/// Scaled dot-product multi-head self-attention with output projection.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, num_heads: usize, causal: bool, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                detail: format!("d_model {d_model} not divisible into {num_heads} heads"),
            });
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(d_model, d_model, rng)?,
            wk: Linear::new(d_model, d_model, rng)?,
            wv: Linear::new(d_model, d_model, rng)?,
            wo: Linear::new(d_model, d_model, rng)?,
            num_heads,
            head_dim: d_model / num_heads,
            causal,
        })
    }

    /// `x` is `[batch, tokens, d_model]`; `extra_mask` (if any) is added to
    /// the attention scores and must broadcast onto
    /// `[batch, heads, tokens, tokens]`.
    pub fn forward(&self, x: &Tensor, extra_mask: Option<&Tensor>) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 3 {
            return Err(Error::InvalidShape {
                op: "attention",
                detail: format!("expected [batch, tokens, d_model], got {shape:?}"),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, hd) = (self.num_heads, self.head_dim);
        if d != h * hd {
            return Err(Error::InvalidShape {
                op: "attention",
                detail: format!("input dim {d} does not match {h} heads x {hd}"),
            });
        }

        let split = |proj: &Linear| -> Result<Tensor> {
            proj.forward(x)?.reshape(&[b, t, h, hd])?.swap_axes(1, 2)
        };
        let q = split(&self.wq)?;
        let k = split(&self.wk)?;
        let v = split(&self.wv)?;

        let mut scores = q
            .matmul(&k.swap_axes(2, 3)?)?
            .scale(1.0 / (hd as f64).sqrt());
        if self.causal {
            scores = scores.add(&causal_mask(t))?;
        }
        if let Some(m) = extra_mask {
            scores = scores.add(m)?;
        }
        let attn = scores.softmax(3)?;
        let ctx = attn.matmul(&v)?.swap_axes(1, 2)?.reshape(&[b, t, d])?;
        self.wo.forward(&ctx)
    }
}

impl Module for MultiHeadAttention {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit_parameters(&join(prefix, "wq"), visit);
        self.wk.visit_parameters(&join(prefix, "wk"), visit);
        self.wv.visit_parameters(&join(prefix, "wv"), visit);
        self.wo.visit_parameters(&join(prefix, "wo"), visit);
    }
}

/// Position-wise feed-forward block. Depth 1 is a single ReLU-activated
/// d_model -> d_model map (the hidden width is unused); depth 2 is the
/// standard d_model -> hidden -> d_model form.
pub enum FeedForward {
    Single(Linear),
    Double { w1: Linear, w2: Linear },
}

impl FeedForward {
    pub fn new(d_model: usize, hidden: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        match depth {
            1 => Ok(FeedForward::Single(Linear::new(d_model, d_model, rng)?)),
            2 => Ok(FeedForward::Double {
                w1: Linear::new(d_model, hidden, rng)?,
                w2: Linear::new(hidden, d_model, rng)?,
            }),
            other => Err(Error::Config(format!(
                "feed-forward depth must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            FeedForward::Single(w) => Ok(w.forward(x)?.relu()),
            FeedForward::Double { w1, w2 } => w2.forward(&w1.forward(x)?.relu()),
        }
    }
}

impl Module for FeedForward {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        match self {
            FeedForward::Single(w) => w.visit_parameters(&join(prefix, "ff"), visit),
            FeedForward::Double { w1, w2 } => {
                w1.visit_parameters(&join(prefix, "ff1"), visit);
                w2.visit_parameters(&join(prefix, "ff2"), visit);
            }
        }
    }
}

/// Post-norm transformer encoder layer:
/// `y = Norm(x + Attn(x)); out = Norm(y + FF(y))`.
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        d_model: usize,
        num_heads: usize,
        hidden: usize,
        ff_depth: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(d_model, num_heads, causal, rng)?,
            ff: FeedForward::new(d_model, hidden, ff_depth, rng)?,
            norm1: LayerNorm::new(d_model)?,
            norm2: LayerNorm::new(d_model)?,
        })
    }

    pub fn forward(&self, x: &Tensor, extra_mask: Option<&Tensor>) -> Result<Tensor> {
        let y = self.norm1.forward(&x.add(&self.attn.forward(x, extra_mask)?)?)?;
        self.norm2.forward(&y.add(&self.ff.forward(&y)?)?)
    }
}

impl Module for EncoderLayer {
    fn visit_parameters(&self, prefix: &str, visit: &mut dyn FnMut(String, &Tensor)) {
        self.attn.visit_parameters(&join(prefix, "attn"), visit);
        self.ff.visit_parameters(prefix, visit);
        self.norm1.visit_parameters(&join(prefix, "norm1"), visit);
        self.norm2.visit_parameters(&join(prefix, "norm2"), visit);
    }
}

/// Fixed sinusoidal position table `[len, dim]`:
/// `pe[p, 2i] = sin(p / 10000^(2i/dim))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        let mut i = 0;
        while i < dim {
            let rate = 1.0 / 10000f64.powf(i as f64 / dim as f64);
            data[p * dim + i] = (p as f64 * rate).sin();
            if i + 1 < dim {
                data[p * dim + i + 1] = (p as f64 * rate).cos();
            }
            i += 2;
        }
    }
    Tensor::new(data, &[len, dim]).expect("position table")
}
