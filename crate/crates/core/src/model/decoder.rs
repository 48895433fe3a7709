//! Per-plane saliency decoder.

use super::{Bound, ModelConfig, Result};
use crate::tensor::{Graph, Var};

/// Doubling stages from `feat_hw` to `decoder_out`.
pub const UPSAMPLE_STAGES: usize = 3;

/// Channel widths D, D/2, D/4, D/8 through the doubling stages.
pub(crate) fn widths(cfg: &ModelConfig) -> [usize; UPSAMPLE_STAGES + 1] {
    [cfg.dim, cfg.dim / 2, cfg.dim / 4, cfg.dim / 8]
}

/// Normalises each (plane, channel) map over its pixels.
fn instance_norm(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    let &[t, c, h, w] = g.shape(x) else { unreachable!() };
    let flat = g.reshape(x, &[t * c, h * w])?;
    let n = g.layer_norm(flat, eps)?;
    Ok(g.reshape(n, &[t, c, h, w])?)
}

/// `token` (T, D) is broadcast over the skip map (T, D, fh, fh); output is
/// (T, decoder_out, decoder_out), non-negative. No op mixes planes.
pub(crate) fn decode(g: &mut Graph, b: &Bound<'_>, cfg: &ModelConfig, token: Var, skip: Var) -> Result<Var> {
    let &[t, d] = g.shape(token) else { unreachable!() };
    let tok = g.reshape(token, &[t, d, 1, 1])?;
    let mut x = g.add(skip, tok)?;
    for s in 0..=UPSAMPLE_STAGES {
        if s < UPSAMPLE_STAGES {
            x = g.upsample2x(x)?;
        }
        let w = b.get(&format!("decoder.{s}.weight"));
        let bias = b.get(&format!("decoder.{s}.bias"));
        x = g.conv2d(x, w, Some(bias), 1)?;
        x = instance_norm(g, x, cfg.ln_eps)?;
        x = g.relu(x);
    }
    let x = g.conv2d(x, b.get("decoder.out.weight"), Some(b.get("decoder.out.bias")), 0)?;
    let y = g.softplus(x);
    Ok(g.reshape(y, &[t, cfg.decoder_out, cfg.decoder_out])?)
}
