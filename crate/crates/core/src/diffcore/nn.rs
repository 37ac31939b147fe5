//! Layer-level building blocks composed from graph operators.

use super::{AttnMaps, Graph, Real, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// `x·w + b`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Chain of affine layers with `activation` between them; the last layer is linear.
pub fn mlp_forward<T: Real>(g: &mut Graph<T>, x: Var, layers: &[(Var, Var)], activation: Activation) -> Result<Var> {
    let mut h = x;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = linear(g, h, *w, Some(*b))?;
        if i + 1 < layers.len() {
            h = activation.apply(g, h);
        }
    }
    Ok(h)
}

/// Projection weights of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
}

pub struct AttentionOutput<T> {
    pub tokens: Var,
    pub attn: AttnMaps<T>,
}

/// Transform applied to the projected value tokens after the attention
/// probabilities have been fixed.
pub type ValueHook<'a, T> = &'a dyn Fn(&mut Graph<T>, Var) -> Result<Var>;

/// Multi-head attention with projections.
///
/// Probabilities come from the projected queries and keys only. The value
/// hook, when given, replaces `V` by `hook(V)` before the weighted sum, so
/// `attn` is the same for any hook.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &AttentionWeights,
    groups: usize,
    heads: usize,
    key_bias: Option<&[T]>,
    value_hook: Option<ValueHook<'_, T>>,
) -> Result<AttentionOutput<T>> {
    let q = g.matmul(q_in, w.wq)?;
    let k = g.matmul(k_in, w.wk)?;
    let mut v = g.matmul(v_in, w.wv)?;
    if let Some(hook) = value_hook {
        v = hook(g, v)?;
    }
    let (a, attn) = g.attention(q, k, v, groups, heads, key_bias)?;
    let tokens = linear(g, a, w.wo, w.bo)?;
    Ok(AttentionOutput { tokens, attn })
}
