use super::{ModelError, Result, TangentSet};
use crate::geom::sample_entries;
use crate::tensor::Tensor;

/// Pointwise product of two saliency maps, renormalised to sum 1.
pub fn late_fuse(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(ModelError::Fusion(format!("map sizes {} and {}", p.len(), q.len())));
    }
    let prod: Vec<f64> = p.iter().zip(q).map(|(a, b)| a * b).collect();
    let s: f64 = prod.iter().sum();
    if !(s > 0.0) {
        return Err(ModelError::Fusion("product of the maps is zero everywhere".into()));
    }
    Ok(prod.into_iter().map(|v| v / s).collect())
}

/// Weighted average of consecutive per-frame maps, oldest first, with
/// weights proportional to `decay^(F-1-i)`; output sums to 1.
pub fn ema_baseline(maps: &[Vec<f64>], decay: f64) -> Result<Vec<f64>> {
    let first = maps.first().ok_or_else(|| ModelError::Fusion("no maps to average".into()))?;
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(ModelError::Fusion(format!("decay {decay} outside (0, 1]")));
    }
    if maps.iter().any(|m| m.len() != first.len()) {
        return Err(ModelError::Fusion("maps differ in size".into()));
    }
    let f = maps.len();
    let raw: Vec<f64> = (0..f).map(|i| decay.powi((f - 1 - i) as i32)).collect();
    let z: f64 = raw.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (m, w) in maps.iter().zip(&raw) {
        for (o, v) in out.iter_mut().zip(m) {
            *o += v * w / z;
        }
    }
    let s: f64 = out.iter().sum();
    if !(s > 0.0) {
        return Err(ModelError::Fusion("averaged map has zero mass".into()));
    }
    Ok(out.into_iter().map(|v| v / s).collect())
}

/// Shannon entropy in nats of a normalised map.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Disagreement between planes where their footprints overlap: for every
/// ERP pixel covered by two or more planes, the mean absolute pairwise
/// difference of the planes' values, averaged over those pixels.
///
/// Values are scaled by the ERP normaliser and the covered pixel count so
/// the statistic is unitless (a uniform prediction has per-pixel value 1).
pub fn seam_discrepancy(tangent: &Tensor, set: &TangentSet) -> Result<f64> {
    let inv = &set.inverse;
    let samples = sample_entries(tangent, inv)?;
    let w = set.weights.values();
    let mut z = 0.0;
    let mut covered = 0usize;
    for px in 0..inv.pixel_count() {
        let r = inv.entry_range(px);
        if !r.is_empty() {
            covered += 1;
        }
        z += r.map(|k| w[k] * samples[k]).sum::<f64>();
    }
    if !(z > 0.0) {
        return Err(ModelError::Fusion("prediction has zero mass".into()));
    }
    let scale = covered as f64 / z;
    let (mut acc, mut n) = (0.0, 0usize);
    for px in 0..inv.pixel_count() {
        let v = &samples[inv.entry_range(px)];
        if v.len() < 2 {
            continue;
        }
        let mut d = 0.0;
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                d += (v[a] - v[b]).abs();
            }
        }
        acc += d / (v.len() * (v.len() - 1) / 2) as f64;
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(acc / n as f64 * scale)
}
