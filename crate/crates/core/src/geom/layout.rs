use serde::{Deserialize, Serialize};

use super::{AngularCoord, GeomError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Icosahedral,
    Ring,
    Explicit,
}

/// A viewport configuration: tangent-plane centres, field of view and
/// patch resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayoutFile", into = "LayoutFile")]
pub struct TangentLayout {
    kind: LayoutKind,
    centers: Vec<AngularCoord>,
    fov_deg: f64,
    patch_px: usize,
}

/// On-disk form, with centres in degrees.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayoutFile {
    kind: LayoutKind,
    centers: Vec<CenterDeg>,
    fov_deg: f64,
    patch_px: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct CenterDeg {
    lat: f64,
    lon: f64,
}

impl TryFrom<LayoutFile> for TangentLayout {
    type Error = GeomError;

    fn try_from(f: LayoutFile) -> Result<Self, GeomError> {
        let centers = f
            .centers
            .iter()
            .map(|c| AngularCoord::from_degrees(c.lat, c.lon))
            .collect::<Result<Vec<_>, _>>()?;
        TangentLayout::with_kind(f.kind, centers, f.fov_deg, f.patch_px)
    }
}

impl From<TangentLayout> for LayoutFile {
    fn from(l: TangentLayout) -> Self {
        LayoutFile {
            kind: l.kind,
            centers: l
                .centers
                .iter()
                .map(|c| {
                    let (lat, lon) = c.to_degrees();
                    CenterDeg { lat, lon }
                })
                .collect(),
            fov_deg: l.fov_deg,
            patch_px: l.patch_px,
        }
    }
}

impl TangentLayout {
    pub fn explicit(centers: Vec<AngularCoord>, fov_deg: f64, patch_px: usize) -> Result<Self, GeomError> {
        Self::with_kind(LayoutKind::Explicit, centers, fov_deg, patch_px)
    }

    fn with_kind(
        kind: LayoutKind,
        centers: Vec<AngularCoord>,
        fov_deg: f64,
        patch_px: usize,
    ) -> Result<Self, GeomError> {
        if centers.is_empty() {
            return Err(GeomError::Layout("a layout needs at least one plane".into()));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeomError::Layout(format!("fov {fov_deg} outside (0, 180)")));
        }
        if patch_px < 2 {
            return Err(GeomError::Layout(format!("patch size {patch_px} < 2")));
        }
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                if a.angular_distance(*b) < 1e-9 {
                    return Err(GeomError::Layout(format!("duplicate centre {a:?}")));
                }
            }
        }
        Ok(Self {
            kind,
            centers,
            fov_deg,
            patch_px,
        })
    }

    pub fn kind(&self) -> LayoutKind {
        self.kind
    }

    pub fn centers(&self) -> &[AngularCoord] {
        &self.centers
    }

    pub fn planes(&self) -> usize {
        self.centers.len()
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov_deg
    }

    pub fn patch_px(&self) -> usize {
        self.patch_px
    }

    /// Half-width of the tangent plane, `tan(fov / 2)`.
    pub fn half_extent(&self) -> f64 {
        (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Same viewports sampled at a different patch resolution.
    pub fn with_patch(&self, patch_px: usize) -> Result<Self, GeomError> {
        Self::with_kind(self.kind, self.centers.clone(), self.fov_deg, patch_px)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GeomError> {
        serde_json::from_str(s).map_err(|e| GeomError::Layout(e.to_string()))
    }
}

/// Builds one of the standard layouts.
///
/// * `Icosahedral`: the 20 face centres of a regular icosahedron (vertices
///   at cyclic permutations of `(0, ±1, ±golden)`), ordered by latitude
///   descending then longitude ascending; `planes < 20` keeps the first
///   `planes` of that order.
/// * `Ring`: `planes - 2` centres on latitude rings plus both poles. Up to
///   eight non-polar centres form one equatorial ring at even spacing
///   starting at longitude 0; more are split over `ceil(n / 8)` rings at
///   evenly spaced latitudes, alternate rings offset by half a step.
///   `planes = 1` is the front view and `planes = 2` two opposite
///   equatorial views.
/// * `Explicit`: only `planes = 1` (the front view); other explicit layouts
///   come from [`TangentLayout::explicit`].
pub fn make_layout(
    kind: LayoutKind,
    planes: usize,
    fov_deg: f64,
    patch_px: usize,
) -> Result<TangentLayout, GeomError> {
    if !(1..=64).contains(&planes) {
        return Err(GeomError::Layout(format!("plane count {planes} outside [1, 64]")));
    }
    let centers = match kind {
        LayoutKind::Icosahedral => {
            if planes > 20 {
                return Err(GeomError::Layout(format!(
                    "icosahedral layout has 20 faces, asked for {planes}"
                )));
            }
            let mut faces = icosahedron_face_centers();
            faces.truncate(planes);
            faces
        }
        LayoutKind::Ring => ring_centers(planes)?,
        LayoutKind::Explicit => {
            if planes != 1 {
                return Err(GeomError::Layout(
                    "explicit layouts with more than one plane need listed centres".into(),
                ));
            }
            vec![AngularCoord::new(0.0, 0.0)?]
        }
    };
    TangentLayout::with_kind(kind, centers, fov_deg, patch_px)
}

fn ring_centers(planes: usize) -> Result<Vec<AngularCoord>, GeomError> {
    let deg = AngularCoord::from_degrees;
    match planes {
        1 => return Ok(vec![deg(0.0, 0.0)?]),
        2 => return Ok(vec![deg(0.0, 0.0)?, deg(0.0, 180.0)?]),
        _ => {}
    }
    let n = planes - 2;
    let rings = n.div_ceil(8);
    let mut centers = vec![deg(90.0, 0.0)?];
    for r in 0..rings {
        let lat = -90.0 + 180.0 * (r + 1) as f64 / (rings + 1) as f64;
        let count = n / rings + usize::from(r < n % rings);
        let step = 360.0 / count as f64;
        let offset = if r % 2 == 1 { step / 2.0 } else { 0.0 };
        for k in 0..count {
            centers.push(deg(lat, offset + k as f64 * step)?);
        }
    }
    centers.push(deg(-90.0, 0.0)?);
    Ok(centers)
}

fn icosahedron_face_centers() -> Vec<AngularCoord> {
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts = Vec::with_capacity(12);
    for &a in &[-1.0, 1.0] {
        for &b in &[-g, g] {
            verts.push([0.0, a, b]);
            verts.push([a, b, 0.0]);
            verts.push([b, 0.0, a]);
        }
    }
    let dist2 = |p: [f64; 3], q: [f64; 3]| {
        (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)
    };
    let is_edge = |i: usize, j: usize| (dist2(verts[i], verts[j]) - 4.0).abs() < 1e-9;
    let mut faces = Vec::with_capacity(20);
    for i in 0..12 {
        for j in i + 1..12 {
            for k in j + 1..12 {
                if is_edge(i, j) && is_edge(j, k) && is_edge(i, k) {
                    let s = [
                        verts[i][0] + verts[j][0] + verts[k][0],
                        verts[i][1] + verts[j][1] + verts[k][1],
                        verts[i][2] + verts[j][2] + verts[k][2],
                    ];
                    faces.push(AngularCoord::from_unit(s));
                }
            }
        }
    }
    debug_assert_eq!(faces.len(), 20);
    faces.sort_by(|a, b| {
        b.phi
            .total_cmp(&a.phi)
            .then_with(|| a.theta.total_cmp(&b.theta))
    });
    faces
}

/// A second viewport configuration derived from a layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Augmentation {
    /// Rotate every centre's longitude by this many degrees.
    Shift { deg: f64 },
    /// Widen the field of view by this many degrees.
    EnlargeFov { deg: f64 },
    /// Rebuild the same layout family with a different plane count.
    Recount { planes: usize },
}

pub fn augment_layout(layout: &TangentLayout, aug: Augmentation) -> Result<TangentLayout, GeomError> {
    match aug {
        Augmentation::Shift { deg } => {
            let shift = deg.to_radians();
            let centers = layout
                .centers
                .iter()
                .map(|c| AngularCoord::new(c.phi, c.theta + shift))
                .collect::<Result<Vec<_>, _>>()?;
            TangentLayout::with_kind(layout.kind, centers, layout.fov_deg, layout.patch_px)
        }
        Augmentation::EnlargeFov { deg } => {
            let fov = layout.fov_deg + deg;
            if fov >= 180.0 {
                return Err(GeomError::Layout(format!("enlarged fov {fov} >= 180")));
            }
            TangentLayout::with_kind(layout.kind, layout.centers.clone(), fov, layout.patch_px)
        }
        Augmentation::Recount { planes } => {
            if layout.kind == LayoutKind::Explicit {
                return Err(GeomError::Layout("cannot recount an explicit layout".into()));
            }
            make_layout(layout.kind, planes, layout.fov_deg, layout.patch_px)
        }
    }
}
