//! Multi-head viewport attention and the factored spatio-temporal block.

use serde::{Deserialize, Serialize};

use super::{Bound, Instrument, ModelConfig, Result};
use crate::tensor::{Graph, Var};

/// Which token pairs a block attends over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScheme {
    /// One attention over all F * T tokens.
    Joint,
    /// Per-frame attention across viewports only.
    VsaOnly,
    /// Per-viewport temporal attention, then per-frame spatial attention.
    #[default]
    Vsta,
}

impl AttentionScheme {
    pub const ALL: [AttentionScheme; 3] = [Self::Joint, Self::VsaOnly, Self::Vsta];

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::VsaOnly => "vsa_only",
            Self::Vsta => "vsta",
        }
    }

    /// Attention sub-layers of one block, by parameter prefix.
    pub(crate) fn stages(self) -> &'static [&'static str] {
        match self {
            Self::Joint => &["joint"],
            Self::VsaOnly => &["spatial"],
            Self::Vsta => &["temporal", "spatial"],
        }
    }
}

/// Closed-form (query, key) pairs evaluated by one block.
pub fn attention_pair_count(frames: usize, planes: usize, scheme: AttentionScheme) -> u64 {
    let (f, t) = (frames as u64, planes as u64);
    match scheme {
        AttentionScheme::Joint => (f * t) * (f * t),
        AttentionScheme::VsaOnly => f * t * t,
        AttentionScheme::Vsta => t * f * f + f * t * t,
    }
}

fn linear3(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let din = shape[shape.len() - 1];
    let rows = g.value(x).numel() / din;
    let flat = g.reshape(x, &[rows, din])?;
    let y = g.linear(flat, w, Some(b))?;
    let dout = g.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = dout;
    Ok(g.reshape(y, &out_shape)?)
}

fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let &[n, l, d] = g.shape(x) else { unreachable!() };
    let r = g.reshape(x, &[n, l, heads, d / heads])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[n * heads, l, d / heads])?)
}

fn merge_heads(g: &mut Graph, x: Var, groups: usize, heads: usize) -> Result<Var> {
    let &[_, l, dh] = g.shape(x) else { unreachable!() };
    let r = g.reshape(x, &[groups, heads, l, dh])?;
    let p = g.permute(r, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[groups, l, heads * dh])?)
}

/// Pre-norm residual self-attention over the middle axis of `x`
/// (groups, L, D). `positions` enables rotary embedding of Q and K.
pub(crate) fn self_attention(
    g: &mut Graph,
    b: &Bound<'_>,
    prefix: &str,
    x: Var,
    cfg: &ModelConfig,
    positions: Option<&[usize]>,
    instr: &mut Instrument,
) -> Result<Var> {
    let &[groups, l, d] = g.shape(x) else { unreachable!() };
    let p = |n: &str| b.get(&format!("{prefix}.{n}"));
    let xn = g.layer_norm_affine(x, p("ln.gamma"), p("ln.beta"), cfg.ln_eps)?;
    let q = linear3(g, xn, p("wq"), p("bq"))?;
    let k = linear3(g, xn, p("wk"), p("bk"))?;
    let v = linear3(g, xn, p("wv"), p("bv"))?;
    let mut q = split_heads(g, q, cfg.heads)?;
    let mut k = split_heads(g, k, cfg.heads)?;
    let v = split_heads(g, v, cfg.heads)?;
    if let Some(pos) = positions {
        q = g.rotary(q, pos, cfg.rotary_base)?;
        k = g.rotary(k, pos, cfg.rotary_base)?;
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.mul_scalar(scores, 1.0 / ((d / cfg.heads) as f64).sqrt());
    let attn = g.softmax(scores)?;
    instr.pairs += (groups * l * l) as u64;
    if instr.record_attention {
        instr.attention.push(attn);
    }
    let o = g.matmul(attn, v)?;
    let o = merge_heads(g, o, groups, cfg.heads)?;
    let o = linear3(g, o, p("wo"), p("bo"))?;
    Ok(g.add(x, o)?)
}

fn mlp(g: &mut Graph, b: &Bound<'_>, prefix: &str, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let p = |n: &str| b.get(&format!("{prefix}.{n}"));
    let xn = g.layer_norm_affine(x, p("ln.gamma"), p("ln.beta"), cfg.ln_eps)?;
    let h = linear3(g, xn, p("w1"), p("b1"))?;
    let h = g.gelu(h);
    let o = linear3(g, h, p("w2"), p("b2"))?;
    Ok(g.add(x, o)?)
}

/// One block over tokens (F, T, D).
pub(crate) fn block(
    g: &mut Graph,
    b: &Bound<'_>,
    index: usize,
    x: Var,
    cfg: &ModelConfig,
    instr: &mut Instrument,
) -> Result<Var> {
    let &[f, t, d] = g.shape(x) else { unreachable!() };
    let pre = format!("blocks.{index}");
    let frame_pos: Vec<usize> = (0..f).collect();
    let mut x = x;
    for &stage in cfg.scheme.stages() {
        let name = format!("{pre}.{stage}");
        x = match stage {
            "temporal" => {
                let tx = g.permute(x, &[1, 0, 2])?;
                let pos = cfg.rotary.then_some(frame_pos.as_slice());
                let y = self_attention(g, b, &name, tx, cfg, pos, instr)?;
                g.permute(y, &[1, 0, 2])?
            }
            "spatial" => self_attention(g, b, &name, x, cfg, None, instr)?,
            _ => {
                let flat = g.reshape(x, &[1, f * t, d])?;
                let pos: Vec<usize> = (0..f * t).map(|i| i / t).collect();
                let pos = cfg.rotary.then_some(pos.as_slice());
                let y = self_attention(g, b, &name, flat, cfg, pos, instr)?;
                g.reshape(y, &[f, t, d])?
            }
        };
    }
    mlp(g, b, &format!("{pre}.mlp"), x, cfg)
}
