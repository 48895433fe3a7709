//! Supervised saliency loss and the viewport-augmentation consistency
//! (VAC) regulariser, both as differentiable graph builders.
//!
//! Maps are passed as graph [`Var`]s holding flattened (or any-shaped)
//! ERP rasters; weights, fixations and masks are constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::InverseGrid;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_EPS: f64 = 1e-7;
pub const DEFAULT_ALPHA: f64 = 0.005;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("maps have different shapes: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("{0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("{0} has zero norm")]
    ZeroNorm(&'static str),
    #[error("fixation map is empty")]
    NoFixations,
    #[error("weights must be non-negative")]
    NegativeWeights,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape(g.shape(a).to_vec(), g.shape(b).to_vec()));
    }
    Ok(())
}

/// `sum target * log(eps + target / (pred + eps)) [* w]`.
fn kl_term(g: &mut Graph, target: Var, pred: Var, weights: Option<Var>, eps: f64) -> Result<Var> {
    same_shape(g, target, pred)?;
    let denom = g.add_scalar(pred, eps);
    let ratio = g.div(target, denom)?;
    let shifted = g.add_scalar(ratio, eps);
    let log = g.log(shifted);
    let mut term = g.mul(target, log)?;
    if let Some(w) = weights {
        term = g.mul(term, w)?;
    }
    Ok(g.sum(term))
}

/// Saliency KL divergence of prediction `pred` from ground truth `target`:
/// `sum Q log(eps + Q / (P + eps))`.
pub fn kld_loss(g: &mut Graph, pred: Var, target: Var, eps: f64) -> Result<Var> {
    kl_term(g, target, pred, None, eps)
}

fn centered(g: &mut Graph, x: Var) -> Var {
    let m = g.mean(x);
    g.sub(x, m).expect("scalar broadcast")
}

/// Pearson correlation of two maps as a graph scalar.
pub fn pearson(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b)?;
    let ca = centered(g, a);
    let cb = centered(g, b);
    let ab = g.mul(ca, cb)?;
    let num = g.sum(ab);
    let aa = g.square(ca);
    let saa = g.sum(aa);
    let bb = g.square(cb);
    let sbb = g.sum(bb);
    if g.value(saa).item() == 0.0 {
        return Err(LossError::ZeroVariance("first map"));
    }
    if g.value(sbb).item() == 0.0 {
        return Err(LossError::ZeroVariance("second map"));
    }
    let prod = g.mul(saa, sbb)?;
    let den = g.sqrt(prod)?;
    Ok(g.div(num, den)?)
}

/// `1 - Pearson(P, Q)`.
pub fn cc_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let r = pearson(g, pred, target)?;
    let neg = g.neg(r);
    Ok(g.add_scalar(neg, 1.0))
}

fn max_normalized(g: &mut Graph, x: Var, what: &'static str) -> Result<Var> {
    let m = g.max_all(x)?;
    if g.value(m).item() <= 0.0 {
        return Err(LossError::ZeroNorm(what));
    }
    Ok(g.div(x, m)?)
}

/// Selective MSE: mean over fixation pixels of the squared difference of
/// the max-normalised prediction and density.
pub fn smse_loss(g: &mut Graph, pred: Var, density: Var, fixations: &Tensor) -> Result<Var> {
    same_shape(g, pred, density)?;
    if fixations.shape() != g.shape(pred) {
        return Err(LossError::Shape(fixations.shape().to_vec(), g.shape(pred).to_vec()));
    }
    let count = fixations.data().iter().filter(|&&f| f > 0.0).count();
    if count == 0 {
        return Err(LossError::NoFixations);
    }
    let mask = Tensor::from_fn(fixations.shape(), |i| f64::from(fixations.data()[i] > 0.0));
    let p = max_normalized(g, pred, "prediction")?;
    let q = max_normalized(g, density, "density")?;
    let d = g.sub(p, q)?;
    let sq = g.square(d);
    let mask = g.constant(mask);
    let masked = g.mul(sq, mask)?;
    let s = g.sum(masked);
    Ok(g.mul_scalar(s, 1.0 / count as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
        }
    }
}

/// The graph scalars making up the supervised loss.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedTerms {
    pub kld: Var,
    pub cc: Var,
    pub smse: Var,
    pub total: Var,
}

/// `kld + cc + alpha * smse`.
pub fn supervised_loss(
    g: &mut Graph,
    pred: Var,
    density: Var,
    fixations: &Tensor,
    cfg: SupervisedConfig,
) -> Result<SupervisedTerms> {
    let kld = kld_loss(g, pred, density, cfg.eps)?;
    let cc = cc_loss(g, pred, density)?;
    let smse = smse_loss(g, pred, density, fixations)?;
    let sum = g.add(kld, cc)?;
    let scaled = g.mul_scalar(smse, cfg.alpha);
    let total = g.add(sum, scaled)?;
    Ok(SupervisedTerms {
        kld,
        cc,
        smse,
        total,
    })
}

fn check_weights(g: &Graph, w: Var) -> Result<()> {
    if g.value(w).data().iter().any(|&v| v < 0.0) {
        return Err(LossError::NegativeWeights);
    }
    Ok(())
}

/// `sum P log(eps + P / (P' + eps)) * w`, differentiable in both maps.
pub fn weighted_kld(g: &mut Graph, p: Var, p_aug: Var, w: Var, eps: f64) -> Result<Var> {
    check_weights(g, w)?;
    kl_term(g, p, p_aug, Some(w), eps)
}

/// Denominator of the weighted CC term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcMode {
    /// `1 - sum(P P' w) / sqrt(sum(P P w) sum(P' P' w))`; zero when P = P'.
    #[default]
    Cosine,
    /// `1 - sum(P P' w) / (sum(P P) sum(P' P'))`, the unnormalised form
    /// whose value at P = P' is not zero.
    Literal,
}

pub fn weighted_cc(g: &mut Graph, p: Var, p_aug: Var, w: Var, mode: CcMode) -> Result<Var> {
    same_shape(g, p, p_aug)?;
    check_weights(g, w)?;
    let pq = g.mul(p, p_aug)?;
    let pqw = g.mul(pq, w)?;
    let num = g.sum(pqw);
    let pp = g.square(p);
    let qq = g.square(p_aug);
    let (spp, sqq) = match mode {
        CcMode::Cosine => {
            let ppw = g.mul(pp, w)?;
            let qqw = g.mul(qq, w)?;
            (g.sum(ppw), g.sum(qqw))
        }
        CcMode::Literal => (g.sum(pp), g.sum(qq)),
    };
    if g.value(spp).item() == 0.0 {
        return Err(LossError::ZeroNorm("P"));
    }
    if g.value(sqq).item() == 0.0 {
        return Err(LossError::ZeroNorm("P'"));
    }
    let prod = g.mul(spp, sqq)?;
    let den = match mode {
        CcMode::Cosine => g.sqrt(prod)?,
        CcMode::Literal => prod,
    };
    let r = g.div(num, den)?;
    let neg = g.neg(r);
    Ok(g.add_scalar(neg, 1.0))
}

/// Unweighted cosine form of the consistency CC term:
/// `1 - sum(P P') / sqrt(sum(P P) sum(P' P'))`.
pub fn cosine_cc_loss(g: &mut Graph, p: Var, p_aug: Var) -> Result<Var> {
    let ones = g.constant(Tensor::ones(g.shape(p)));
    weighted_cc(g, p, p_aug, ones, CcMode::Cosine)
}

/// Which per-pixel weighting the consistency loss uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// All ones.
    None,
    /// 1 where two or more planes overlap, else 0.
    Binary,
    /// Covering-plane count divided by the maximum count.
    #[default]
    Count,
    /// Normalised blend weight of the dominant plane subtracted from 1; zero
    /// where a single plane covers the pixel.
    Blend,
}

/// Per-pixel VAC weights for the original layout's inverse grid, values in
/// [0, 1], flattened (H * W).
pub fn vac_mask(inv: &InverseGrid, mode: MaskMode) -> Tensor {
    let counts = inv.overlap_counts();
    let n = counts.len();
    let data: Vec<f64> = match mode {
        MaskMode::None => vec![1.0; n],
        MaskMode::Binary => counts.iter().map(|&c| f64::from(c >= 2)).collect(),
        MaskMode::Count => {
            let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
            counts.iter().map(|&c| c as f64 / max).collect()
        }
        MaskMode::Blend => (0..n)
            .map(|px| {
                let e = inv.entries_at(px);
                let total: f64 = e.iter().map(|e| e.raw_weight).sum();
                if e.len() < 2 || total <= 0.0 {
                    0.0
                } else {
                    let max = e.iter().map(|e| e.raw_weight).fold(0.0, f64::max);
                    1.0 - max / total
                }
            })
            .collect(),
    };
    Tensor::new(vec![n], data).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VacConfig {
    pub enabled: bool,
    pub lambda: f64,
    pub mask: MaskMode,
    pub cc_mode: CcMode,
    pub eps: f64,
}

impl Default for VacConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda: 1.0,
            mask: MaskMode::default(),
            cc_mode: CcMode::default(),
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VacTerms {
    pub kld: Var,
    pub cc: Var,
    pub total: Var,
}

/// `weighted_kld(P, P', w) + weighted_cc(P, P', w)`.
pub fn vac_loss(g: &mut Graph, p: Var, p_aug: Var, w: Var, cfg: &VacConfig) -> Result<VacTerms> {
    let kld = weighted_kld(g, p, p_aug, w, cfg.eps)?;
    let cc = weighted_cc(g, p, p_aug, w, cfg.cc_mode)?;
    let total = g.add(kld, cc)?;
    Ok(VacTerms { kld, cc, total })
}

/// Evaluates a graph-built scalar on constant inputs.
#[cfg(test)]
pub(crate) fn eval_scalar(
    a: &[f64],
    b: &[f64],
    f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(Tensor::new(vec![a.len()], a.to_vec())?);
    let vb = g.constant(Tensor::new(vec![b.len()], b.to_vec())?);
    let out = f(&mut g, va, vb)?;
    Ok(g.value(out).item())
}
