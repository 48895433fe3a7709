use std::f64::consts::PI;

use crate::raster::{check_erp_dims, erp_position, erp_taps, patch_taps, pixel_center, ErpImage};
use crate::tensor::{SparseMatrix, Tensor};

use super::{gnomonic_inverse, AngularCoord, GeomError, TangentLayout};

/// Per-plane constants for footprint tests.
struct PlaneFrame {
    sin_phi: f64,
    cos_phi: f64,
    theta: f64,
    half_extent: f64,
    half_angle: f64,
    patch: f64,
}

impl PlaneFrame {
    fn new(center: AngularCoord, layout: &TangentLayout) -> Self {
        let (sin_phi, cos_phi) = center.phi.sin_cos();
        Self {
            sin_phi,
            cos_phi,
            theta: center.theta,
            half_extent: layout.half_extent(),
            half_angle: layout.fov_deg().to_radians() / 2.0,
            patch: layout.patch_px() as f64,
        }
    }

    /// Fractional patch (u, v) and raw raised-cosine weight of a point, or
    /// `None` outside the plane's footprint (angular distance >= fov / 2).
    #[inline]
    fn hit(&self, sin_p: f64, cos_p: f64, theta: f64) -> Option<(f64, f64, f64)> {
        let (sd, cd) = (theta - self.theta).sin_cos();
        let cos_c = self.sin_phi * sin_p + self.cos_phi * cos_p * cd;
        let alpha = cos_c.clamp(-1.0, 1.0).acos();
        if alpha >= self.half_angle {
            return None;
        }
        let x = cos_p * sd / cos_c;
        let y = (self.cos_phi * sin_p - self.sin_phi * cos_p * cd) / cos_c;
        let u = (x / self.half_extent + 1.0) * self.patch / 2.0 - 0.5;
        let v = (1.0 - y / self.half_extent) * self.patch / 2.0 - 0.5;
        let w = (PI * alpha / (2.0 * self.half_angle)).cos().powi(2);
        Some((u, v, w))
    }
}

/// Tangent-plane coordinates of the centre of patch pixel (u, v).
#[inline]
fn plane_xy(u: usize, v: usize, patch: usize, half_extent: f64) -> (f64, f64) {
    let p = patch as f64;
    let x = (2.0 * (u as f64 + 0.5) / p - 1.0) * half_extent;
    let y = (1.0 - 2.0 * (v as f64 + 0.5) / p) * half_extent;
    (x, y)
}

/// ERP -> tangent resampling table: for every (plane, row, col) of every
/// patch, its angular coordinate and fractional ERP source position.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardGrid {
    pub(crate) planes: usize,
    pub(crate) patch: usize,
    pub(crate) erp_h: usize,
    pub(crate) erp_w: usize,
    pub(crate) coords: Vec<AngularCoord>,
    pub(crate) sources: Vec<(f64, f64)>,
}

impl ForwardGrid {
    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn erp_dims(&self) -> (usize, usize) {
        (self.erp_h, self.erp_w)
    }

    fn index(&self, t: usize, v: usize, u: usize) -> usize {
        (t * self.patch + v) * self.patch + u
    }

    pub fn coord(&self, t: usize, v: usize, u: usize) -> AngularCoord {
        self.coords[self.index(t, v, u)]
    }

    /// Fractional ERP (row, col) source of patch pixel (u, v) on plane t.
    pub fn source(&self, t: usize, v: usize, u: usize) -> (f64, f64) {
        self.sources[self.index(t, v, u)]
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub fn build_forward_grid(layout: &TangentLayout, erp_h: usize, erp_w: usize) -> Result<ForwardGrid, GeomError> {
    check_erp_dims(erp_h, erp_w)?;
    let p = layout.patch_px();
    let half = layout.half_extent();
    let n = layout.planes() * p * p;
    let mut coords = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for &center in layout.centers() {
        for v in 0..p {
            for u in 0..p {
                let (x, y) = plane_xy(u, v, p, half);
                let c = gnomonic_inverse(center, x, y);
                let (row, col) = erp_position(c, erp_h, erp_w);
                coords.push(c);
                sources.push((
                    row.clamp(0.0, (erp_h - 1) as f64),
                    col.rem_euclid(erp_w as f64),
                ));
            }
        }
    }
    Ok(ForwardGrid {
        planes: layout.planes(),
        patch: p,
        erp_h,
        erp_w,
        coords,
        sources,
    })
}

/// Per-plane angular coordinate maps, shape (T, 2, p, p) with channel 0
/// latitude and channel 1 longitude.
pub fn angular_coordinate_maps(layout: &TangentLayout) -> Tensor {
    let p = layout.patch_px();
    let half = layout.half_extent();
    let t = layout.planes();
    let mut data = vec![0.0; t * 2 * p * p];
    for (k, &center) in layout.centers().iter().enumerate() {
        for v in 0..p {
            for u in 0..p {
                let (x, y) = plane_xy(u, v, p, half);
                let c = gnomonic_inverse(center, x, y);
                data[((k * 2) * p + v) * p + u] = c.phi;
                data[((k * 2 + 1) * p + v) * p + u] = c.theta;
            }
        }
    }
    Tensor::new(vec![t, 2, p, p], data).expect("shape")
}

/// One tangent plane covering one ERP pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseEntry {
    pub plane: u32,
    /// Fractional patch column.
    pub u: f64,
    /// Fractional patch row.
    pub v: f64,
    /// Raised-cosine falloff: 1 at the plane centre, 0 at fov / 2.
    pub raw_weight: f64,
}

/// Tangent -> ERP table, stored sparsely: each ERP pixel lists only the
/// planes whose footprint contains it.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseGrid {
    pub(crate) planes: usize,
    pub(crate) patch: usize,
    pub(crate) erp_h: usize,
    pub(crate) erp_w: usize,
    pub(crate) pixel_ptr: Vec<usize>,
    pub(crate) entries: Vec<InverseEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    Normalized,
    Raw,
}

/// Blend weights aligned with an [`InverseGrid`]'s entries.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapWeights {
    normalized: bool,
    erp_w: usize,
    pixel_ptr: Vec<usize>,
    planes: Vec<u32>,
    values: Vec<f64>,
}

impl OverlapWeights {
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Weight of plane `t` at ERP pixel (i, j); zero outside its footprint.
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        let px = i * self.erp_w + j;
        (self.pixel_ptr[px]..self.pixel_ptr[px + 1])
            .find(|&k| self.planes[k] as usize == t)
            .map_or(0.0, |k| self.values[k])
    }

    /// Sum over planes at ERP pixel (i, j).
    pub fn pixel_sum(&self, i: usize, j: usize) -> f64 {
        let px = i * self.erp_w + j;
        self.values[self.pixel_ptr[px]..self.pixel_ptr[px + 1]].iter().sum()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub covered: usize,
    pub total: usize,
    pub max_overlap: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        self.covered as f64 / self.total as f64
    }

    pub fn is_full(&self) -> bool {
        self.covered == self.total
    }
}

impl InverseGrid {
    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn erp_dims(&self) -> (usize, usize) {
        (self.erp_h, self.erp_w)
    }

    pub fn pixel_count(&self) -> usize {
        self.erp_h * self.erp_w
    }

    /// Planes covering flattened ERP pixel `px`.
    pub fn entries_at(&self, px: usize) -> &[InverseEntry] {
        &self.entries[self.pixel_ptr[px]..self.pixel_ptr[px + 1]]
    }

    /// Index range of pixel `px`'s entries within [`InverseGrid::entries`].
    pub fn entry_range(&self, px: usize) -> std::ops::Range<usize> {
        self.pixel_ptr[px]..self.pixel_ptr[px + 1]
    }

    pub fn entries(&self) -> &[InverseEntry] {
        &self.entries
    }

    pub fn overlap_counts(&self) -> Vec<usize> {
        self.pixel_ptr.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn covered_mask(&self) -> Vec<bool> {
        self.pixel_ptr.windows(2).map(|w| w[1] > w[0]).collect()
    }

    pub fn coverage(&self) -> Coverage {
        let counts = self.overlap_counts();
        Coverage {
            covered: counts.iter().filter(|&&c| c > 0).count(),
            total: counts.len(),
            max_overlap: counts.iter().copied().max().unwrap_or(0),
        }
    }

    pub fn weights(&self, mode: WeightMode) -> OverlapWeights {
        let mut values: Vec<f64> = self.entries.iter().map(|e| e.raw_weight).collect();
        if mode == WeightMode::Normalized {
            for w in self.pixel_ptr.windows(2) {
                let span = &mut values[w[0]..w[1]];
                let s: f64 = span.iter().sum();
                if s > 0.0 {
                    span.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        OverlapWeights {
            normalized: mode == WeightMode::Normalized,
            erp_w: self.erp_w,
            pixel_ptr: self.pixel_ptr.clone(),
            planes: self.entries.iter().map(|e| e.plane).collect(),
            values,
        }
    }
}

/// Builds the inverse table and its normalized blend weights.
pub fn build_inverse_grid(
    layout: &TangentLayout,
    erp_h: usize,
    erp_w: usize,
) -> Result<(InverseGrid, OverlapWeights), GeomError> {
    check_erp_dims(erp_h, erp_w)?;
    let frames: Vec<PlaneFrame> = layout
        .centers()
        .iter()
        .map(|&c| PlaneFrame::new(c, layout))
        .collect();
    let mut pixel_ptr = Vec::with_capacity(erp_h * erp_w + 1);
    let mut entries = Vec::new();
    pixel_ptr.push(0);
    for i in 0..erp_h {
        for j in 0..erp_w {
            let c = pixel_center(i, j, erp_h, erp_w);
            let (sp, cp) = c.phi.sin_cos();
            for (t, f) in frames.iter().enumerate() {
                if let Some((u, v, raw_weight)) = f.hit(sp, cp, c.theta) {
                    entries.push(InverseEntry {
                        plane: t as u32,
                        u,
                        v,
                        raw_weight,
                    });
                }
            }
            pixel_ptr.push(entries.len());
        }
    }
    let grid = InverseGrid {
        planes: layout.planes(),
        patch: layout.patch_px(),
        erp_h,
        erp_w,
        pixel_ptr,
        entries,
    };
    let weights = grid.weights(WeightMode::Normalized);
    Ok((grid, weights))
}

/// Counts covered ERP pixels without materialising the inverse table.
/// Uses the same footprint test as [`build_inverse_grid`].
pub fn coverage_scan(layout: &TangentLayout, erp_h: usize, erp_w: usize) -> Result<Coverage, GeomError> {
    check_erp_dims(erp_h, erp_w)?;
    let frames: Vec<PlaneFrame> = layout
        .centers()
        .iter()
        .map(|&c| PlaneFrame::new(c, layout))
        .collect();
    let mut cov = Coverage {
        covered: 0,
        total: erp_h * erp_w,
        max_overlap: 0,
    };
    for i in 0..erp_h {
        for j in 0..erp_w {
            let c = pixel_center(i, j, erp_h, erp_w);
            let (sp, cp) = c.phi.sin_cos();
            let n = frames.iter().filter(|f| f.hit(sp, cp, c.theta).is_some()).count();
            if n > 0 {
                cov.covered += 1;
            }
            cov.max_overlap = cov.max_overlap.max(n);
        }
    }
    Ok(cov)
}

/// Bilinear ERP -> tangent resampling; output shape (T, C, p, p).
pub fn project_erp_to_tangent(erp: &ErpImage, grid: &ForwardGrid) -> Result<Tensor, GeomError> {
    if (erp.height(), erp.width()) != grid.erp_dims() {
        return Err(GeomError::DimensionMismatch(format!(
            "grid built for {:?}, image is {}x{}",
            grid.erp_dims(),
            erp.height(),
            erp.width()
        )));
    }
    let (t, c, p) = (grid.planes, erp.channels(), grid.patch);
    let mut out = vec![0.0; t * c * p * p];
    for k in 0..t {
        for ch in 0..c {
            let plane = erp.channel(ch);
            let dst = &mut out[(k * c + ch) * p * p..(k * c + ch + 1) * p * p];
            for (px, d) in dst.iter_mut().enumerate() {
                let (row, col) = grid.sources[k * p * p + px];
                let [(i0, i1, fr), (j0, j1, fc)] = erp_taps(row, col, grid.erp_h, grid.erp_w);
                let w = grid.erp_w;
                let top = plane[i0 * w + j0] * (1.0 - fc) + plane[i0 * w + j1] * fc;
                let bot = plane[i1 * w + j0] * (1.0 - fc) + plane[i1 * w + j1] * fc;
                *d = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    Ok(Tensor::new(vec![t, c, p, p], out).expect("shape"))
}

fn check_backprojection(inv: &InverseGrid, weights: &OverlapWeights) -> Result<(), GeomError> {
    if !weights.is_normalized() {
        return Err(GeomError::Unnormalized);
    }
    if weights.values.len() != inv.entries.len() {
        return Err(GeomError::DimensionMismatch(
            "weights were built for a different grid".into(),
        ));
    }
    Ok(())
}

/// The backprojection as a linear map from a flattened (T, p, p) stack to
/// the flattened (H, W) ERP raster.
pub fn backprojection_matrix(inv: &InverseGrid, weights: &OverlapWeights) -> Result<SparseMatrix, GeomError> {
    check_backprojection(inv, weights)?;
    let p = inv.patch;
    let rows: Vec<Vec<(usize, f64)>> = (0..inv.pixel_count())
        .map(|px| {
            let span = inv.pixel_ptr[px]..inv.pixel_ptr[px + 1];
            let mut row = Vec::with_capacity(4 * span.len());
            for k in span {
                let e = inv.entries[k];
                let base = e.plane as usize * p * p;
                for (idx, coef) in patch_taps(e.u, e.v, p) {
                    if coef != 0.0 {
                        row.push((base + idx, coef * weights.values[k]));
                    }
                }
            }
            row
        })
        .collect();
    SparseMatrix::from_rows(inv.planes * p * p, &rows)
        .map_err(|e| GeomError::DimensionMismatch(e.to_string()))
}

/// Bilinear value of each plane at each covered ERP pixel, aligned with
/// [`InverseGrid::entries`]. `stack` is (T, p, p).
pub fn sample_entries(stack: &Tensor, inv: &InverseGrid) -> Result<Vec<f64>, GeomError> {
    let p = inv.patch;
    if stack.shape() != [inv.planes, p, p] {
        return Err(GeomError::DimensionMismatch(format!(
            "stack {:?} vs {} planes of {p}x{p}",
            stack.shape(),
            inv.planes
        )));
    }
    let sd = stack.data();
    Ok(inv
        .entries
        .iter()
        .map(|e| {
            let base = e.plane as usize * p * p;
            patch_taps(e.u, e.v, p)
                .iter()
                .map(|&(idx, coef)| coef * sd[base + idx])
                .sum()
        })
        .collect())
}

/// Blends tangent patches back onto the sphere. `stack` is (T, C, p, p) or
/// (T, p, p); uncovered ERP pixels are 0.
pub fn backproject_tangent_to_erp(
    stack: &Tensor,
    inv: &InverseGrid,
    weights: &OverlapWeights,
) -> Result<ErpImage, GeomError> {
    check_backprojection(inv, weights)?;
    let p = inv.patch;
    let channels = match stack.shape() {
        &[t, c, a, b] if t == inv.planes && a == p && b == p => c,
        &[t, a, b] if t == inv.planes && a == p && b == p => 1,
        s => {
            return Err(GeomError::DimensionMismatch(format!(
                "stack {s:?} vs {} planes of {p}x{p}",
                inv.planes
            )))
        }
    };
    let sd = stack.data();
    let npx = inv.pixel_count();
    let mut out = vec![0.0; channels * npx];
    for px in 0..npx {
        for k in inv.pixel_ptr[px]..inv.pixel_ptr[px + 1] {
            let e = inv.entries[k];
            let w = weights.values[k];
            let taps = patch_taps(e.u, e.v, p);
            for c in 0..channels {
                let base = (e.plane as usize * channels + c) * p * p;
                let s: f64 = taps.iter().map(|&(idx, coef)| coef * sd[base + idx]).sum();
                out[c * npx + px] += w * s;
            }
        }
    }
    ErpImage::new(channels, inv.erp_h, inv.erp_w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{make_layout, LayoutKind};

    fn front(fov: f64, p: usize) -> TangentLayout {
        make_layout(LayoutKind::Explicit, 1, fov, p).unwrap()
    }

    #[test]
    fn center_pixel_samples_erp_center() {
        let l = front(90.0, 3);
        let g = build_forward_grid(&l, 4, 8).unwrap();
        let c = g.coord(0, 1, 1);
        assert!(c.phi.abs() < 1e-15 && c.theta.abs() < 1e-15);
        // (phi, theta) = (0, 0) sits between rows 1, 2 and columns 3, 4
        let (r, col) = g.source(0, 1, 1);
        assert!((r - 1.5).abs() < 1e-12 && (col - 3.5).abs() < 1e-12);
    }

    #[test]
    fn forward_grid_rejects_bad_aspect() {
        assert!(matches!(
            build_forward_grid(&front(90.0, 3), 4, 9),
            Err(GeomError::Aspect { .. })
        ));
    }

    #[test]
    fn ring_grid_shape_and_validity() {
        let l = make_layout(LayoutKind::Ring, 10, 120.0, 8).unwrap();
        let g = build_forward_grid(&l, 16, 32).unwrap();
        assert_eq!(g.len(), 10 * 8 * 8);
        for &(r, c) in &g.sources {
            assert!((0.0..=15.0).contains(&r) && (0.0..32.0).contains(&c));
        }
    }

    #[test]
    fn pole_plane_spans_all_longitudes() {
        let l = TangentLayout::explicit(
            vec![AngularCoord::new(std::f64::consts::FRAC_PI_2, 0.0).unwrap()],
            90.0,
            16,
        )
        .unwrap();
        let g = build_forward_grid(&l, 16, 32).unwrap();
        // bin the source longitudes into 8 sectors: every sector is hit
        let mut sectors = [false; 8];
        for c in &g.coords {
            let s = ((c.theta + PI) / (2.0 * PI) * 8.0) as usize;
            sectors[s.min(7)] = true;
        }
        assert!(sectors.iter().all(|&s| s), "{sectors:?}");
    }

    #[test]
    fn angular_maps_match_forward_grid() {
        let l = make_layout(LayoutKind::Icosahedral, 20, 80.0, 6).unwrap();
        let maps = angular_coordinate_maps(&l);
        let g = build_forward_grid(&l, 8, 16).unwrap();
        let p = 6;
        for t in 0..20 {
            for v in 0..p {
                for u in 0..p {
                    let c = g.coord(t, v, u);
                    assert_eq!(maps.data()[((t * 2) * p + v) * p + u], c.phi);
                    assert_eq!(maps.data()[((t * 2 + 1) * p + v) * p + u], c.theta);
                }
            }
        }
        assert!(maps.data().iter().step_by(1).all(|v| v.is_finite()));
    }

    #[test]
    fn single_plane_footprint_and_weight() {
        let l = front(90.0, 8);
        let (inv, w) = build_inverse_grid(&l, 32, 64).unwrap();
        let center = AngularCoord::new(0.0, 0.0).unwrap();
        for i in 0..32 {
            for j in 0..64 {
                let d = pixel_center(i, j, 32, 64).angular_distance(center);
                let covered = !inv.entries_at(i * 64 + j).is_empty();
                assert_eq!(covered, d < std::f64::consts::FRAC_PI_4, "({i},{j}) d={d}");
                if covered {
                    assert_eq!(w.get(i, j, 0), 1.0);
                } else {
                    assert_eq!(w.pixel_sum(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn identical_planes_split_weight() {
        let c = AngularCoord::new(0.2, 0.3).unwrap();
        let c2 = AngularCoord::new(0.2, 0.3 + 1e-7).unwrap();
        let l = TangentLayout::explicit(vec![c, c2], 90.0, 8).unwrap();
        let (inv, w) = build_inverse_grid(&l, 16, 32).unwrap();
        let mut seen = 0;
        for i in 0..16 {
            for j in 0..32 {
                let inner = pixel_center(i, j, 16, 32).angular_distance(c) < 0.6;
                if inv.entries_at(i * 32 + j).len() == 2 && inner {
                    assert!((w.get(i, j, 0) - 0.5).abs() < 1e-6);
                    assert!((w.get(i, j, 1) - 0.5).abs() < 1e-6);
                    seen += 1;
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn raw_weights_rejected_for_backprojection() {
        let l = front(90.0, 4);
        let (inv, _) = build_inverse_grid(&l, 8, 16).unwrap();
        let raw = inv.weights(WeightMode::Raw);
        let stack = Tensor::ones(&[1, 4, 4]);
        assert!(matches!(
            backproject_tangent_to_erp(&stack, &inv, &raw),
            Err(GeomError::Unnormalized)
        ));
        assert!(backprojection_matrix(&inv, &raw).is_err());
    }

    #[test]
    fn conflicting_constants_average() {
        let c = AngularCoord::new(0.0, 0.0).unwrap();
        let c2 = AngularCoord::new(0.0, 1e-6).unwrap();
        let l = TangentLayout::explicit(vec![c, c2], 90.0, 4).unwrap();
        let (inv, w) = build_inverse_grid(&l, 8, 16).unwrap();
        let mut data = vec![2.0; 16];
        data.extend(vec![6.0; 16]);
        let stack = Tensor::new(vec![2, 4, 4], data).unwrap();
        let erp = backproject_tangent_to_erp(&stack, &inv, &w).unwrap();
        // pixel (3, 7) sits next to the centre, almost equidistant from both
        let px = 3 * 16 + 7;
        assert_eq!(inv.entries_at(px).len(), 2);
        assert!((erp.data()[px] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn matrix_and_direct_backprojection_agree() {
        let l = make_layout(LayoutKind::Ring, 10, 120.0, 6).unwrap();
        let (inv, w) = build_inverse_grid(&l, 12, 24).unwrap();
        let stack = Tensor::from_fn(&[10, 6, 6], |i| ((i * 7919) % 101) as f64 / 101.0);
        let direct = backproject_tangent_to_erp(&stack, &inv, &w).unwrap();
        let m = backprojection_matrix(&inv, &w).unwrap();
        let via = m.apply(stack.data());
        for (a, b) in direct.data().iter().zip(&via) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
