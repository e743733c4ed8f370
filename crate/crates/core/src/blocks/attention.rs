//! Interpatch multi-head self-attention and the transformer layer around it.
//!
//! Input is a `(B, P, N, d)` patch grid. Attention runs over the `N` patch
//! tokens independently for every batch item and intra-patch offset `p`.

use super::layers::{Builder, Ctx, LayerNorm, Linear};
use super::patches::PatchGrid;
use crate::error::{config_err, Result};
use crate::substrate::{Graph, Tensor4, Var};

/// Scaled dot-product attention on already projected `q`, `k`, `v` of shape `(B, P, N, d)`.
///
/// Returns the per-head context merged back to `(B, P, N, d)` and the
/// attention probabilities `(B·P, heads, N, N)`.
pub fn attention_core(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let [b, p, n, d] = g.shape(q);
    if heads == 0 || d % heads != 0 {
        return Err(config_err!("attention width {d} is not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let split = |g: &mut Graph, t: Var| -> Result<Var> {
        let r = g.reshape(t, [b * p, n, heads, dh])?;
        g.permute(r, [0, 2, 1, 3])
    };
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.matmul(qh, kh, true)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = g.softmax(scores);
    let ctx = g.matmul(probs, vh, false)?;
    let ctx = g.permute(ctx, [0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, [b, p, n, d])?;
    Ok((ctx, probs))
}

/// Explicit projection weights for calling attention outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    /// `(1, 1, d, d)` projections and `(1, 1, 1, d)` biases, in q, k, v, out order.
    pub weights: [Tensor4; 4],
    pub biases: [Tensor4; 4],
}

impl AttentionWeights {
    pub fn identity(dim: usize, heads: usize) -> Self {
        let mut eye = Tensor4::zeros([1, 1, dim, dim]);
        for i in 0..dim {
            eye.set(0, 0, i, i, 1.0);
        }
        let zero = Tensor4::zeros([1, 1, 1, dim]);
        Self {
            heads,
            weights: [eye.clone(), eye.clone(), eye.clone(), eye],
            biases: [zero.clone(), zero.clone(), zero.clone(), zero],
        }
    }
}

/// Projects, attends over patches, and projects out.
pub fn attention_nodes(g: &mut Graph, x: Var, w: [Var; 4], b: [Var; 4], heads: usize) -> Result<Var> {
    let q = g.linear(x, w[0], Some(b[0]))?;
    let k = g.linear(x, w[1], Some(b[1]))?;
    let v = g.linear(x, w[2], Some(b[2]))?;
    let (ctx, _) = attention_core(g, q, k, v, heads)?;
    g.linear(ctx, w[3], Some(b[3]))
}

/// Interpatch attention on a standalone patch grid; output has the same layout.
pub fn interpatch_attention(xp: &PatchGrid, weights: &AttentionWeights) -> Result<PatchGrid> {
    let mut g = Graph::eval();
    let x = g.input(xp.data.clone());
    let w = weights.weights.clone().map(|t| g.input(t));
    let b = weights.biases.clone().map(|t| g.input(t));
    let y = attention_nodes(&mut g, x, w, b, weights.heads)?;
    Ok(PatchGrid { data: g.value(y).clone(), ..xp.clone() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpatchAttention {
    pub heads: usize,
    pub proj: [Linear; 4],
}

impl InterpatchAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{name}: width {dim} is not divisible by {heads} heads"));
        }
        let proj = [
            Linear::new(b, &format!("{name}.q"), dim, dim)?,
            Linear::new(b, &format!("{name}.k"), dim, dim)?,
            Linear::new(b, &format!("{name}.v"), dim, dim)?,
            Linear::new(b, &format!("{name}.out"), dim, dim)?,
        ];
        Ok(Self { heads, proj })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut w = [x; 4];
        let mut bias = [x; 4];
        for (i, l) in self.proj.iter().enumerate() {
            w[i] = cx.param(&format!("{}.weight", l.name))?;
            bias[i] = cx.param(&format!("{}.bias", l.name))?;
        }
        attention_nodes(cx.g, x, w, bias, self.heads)
    }
}

/// Pre-norm transformer layer: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub attn: InterpatchAttention,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(b, &format!("{name}.ln_attn"), dim)?,
            attn: InterpatchAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(b, &format!("{name}.ln_ffn"), dim)?,
            ffn_in: Linear::new(b, &format!("{name}.ffn_in"), dim, ffn_dim)?,
            ffn_out: Linear::new(b, &format!("{name}.ffn_out"), ffn_dim, dim)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(cx, x)?;
        let h = self.attn.forward(cx, h)?;
        let x = cx.g.add(x, h)?;
        let h = self.ln_ffn.forward(cx, x)?;
        let h = self.ffn_in.forward(cx, h)?;
        let h = cx.g.silu(h);
        let h = self.ffn_out.forward(cx, h)?;
        cx.g.add(x, h)
    }
}
