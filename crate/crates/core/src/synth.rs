//! Synthetic spherical saliency clips: drifting Gaussian sources on the
//! sphere, scored by great-circle distance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::AngularCoord;
use crate::io::{self, ClipData, ClipManifest, IoError, Manifest};
use crate::raster::ErpImage;

pub const DEFAULT_FIXATIONS: usize = 31;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene needs at least one source")]
    NoSources,
    #[error("source {0}: {1}")]
    Source(usize, String),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSource {
    pub center: AngularCoord,
    /// Rotation axis of the drift (need not be unit length).
    pub drift_axis: [f64; 3],
    /// Drift in radians per frame.
    pub drift_rate: f64,
    /// Angular std in radians, in (0, pi/4].
    pub sigma: f64,
    pub amplitude: f64,
    /// Frame colour of the source.
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub sources: Vec<GaussianSource>,
    pub fixations: usize,
    pub background: f64,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// Random scene with `n` sources drawn uniformly on the sphere.
    pub fn random(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sources = (0..n)
            .map(|_| {
                let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                let axis: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(&mut rng));
                GaussianSource {
                    center: AngularCoord::from_unit(v),
                    drift_axis: axis,
                    drift_rate: rng.random_range(0.0..0.08),
                    sigma: rng.random_range(0.2..0.45),
                    amplitude: rng.random_range(0.5..1.0),
                    color: [0; 3].map(|_| rng.random_range(0.5..1.0)),
                }
            })
            .collect();
        Self {
            sources,
            fixations: DEFAULT_FIXATIONS,
            background: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(SynthError::NoSources);
        }
        for (i, s) in self.sources.iter().enumerate() {
            if !(s.sigma > 0.0 && s.sigma <= std::f64::consts::FRAC_PI_4) {
                return Err(SynthError::Source(i, format!("sigma {} outside (0, pi/4]", s.sigma)));
            }
            if !(s.amplitude > 0.0) {
                return Err(SynthError::Source(i, "amplitude must be positive".into()));
            }
            let n = s.drift_axis.iter().map(|v| v * v).sum::<f64>();
            if s.drift_rate != 0.0 && n == 0.0 {
                return Err(SynthError::Source(i, "drift axis is zero".into()));
            }
        }
        Ok(())
    }
}

/// Rodrigues rotation of `v` about `axis` by `angle`.
fn rotate(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let n = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 || angle == 0.0 {
        return v;
    }
    let k = axis.map(|a| a / n);
    let (s, c) = angle.sin_cos();
    let dot = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    let cross = [
        k[1] * v[2] - k[2] * v[1],
        k[2] * v[0] - k[0] * v[2],
        k[0] * v[1] - k[1] * v[0],
    ];
    [0, 1, 2].map(|i| v[i] * c + cross[i] * s + k[i] * dot * (1.0 - c))
}

impl GaussianSource {
    pub fn center_at(&self, frame: usize) -> AngularCoord {
        let v = rotate(self.center.to_unit(), self.drift_axis, self.drift_rate * frame as f64);
        AngularCoord::from_unit(v)
    }

    fn eval(&self, center: AngularCoord, p: AngularCoord) -> f64 {
        let d = center.angular_distance(p);
        self.amplitude * (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Sum-normalised density of `spec` at `frame` on an H x W raster.
pub fn density_at(spec: &SyntheticSceneSpec, frame: usize, h: usize, w: usize) -> Result<ErpImage> {
    spec.validate()?;
    let centers: Vec<AngularCoord> = spec.sources.iter().map(|s| s.center_at(frame)).collect();
    let mut img = ErpImage::from_fn(1, h, w, |_, p| {
        spec.sources.iter().zip(&centers).map(|(s, &c)| s.eval(c, p)).sum()
    })?;
    let total: f64 = img.data().iter().sum();
    img.data_mut().iter_mut().for_each(|v| *v /= total);
    Ok(img)
}

fn frame_at(spec: &SyntheticSceneSpec, frame: usize, h: usize, w: usize) -> Result<ErpImage> {
    let centers: Vec<AngularCoord> = spec.sources.iter().map(|s| s.center_at(frame)).collect();
    let bg = spec.background;
    let img = ErpImage::from_fn(3, h, w, |c, p| {
        let phase = c as f64 * 2.1 + spec.seed as f64 * 0.37;
        let base = bg * (1.0 + 0.5 * (p.theta + phase).cos() * p.phi.cos());
        let fg: f64 = spec
            .sources
            .iter()
            .zip(&centers)
            .map(|(s, &ctr)| s.eval(ctr, p) * s.color[c])
            .sum();
        (base + fg).min(1.0)
    })?;
    Ok(img)
}

/// Draws `n` pixel indices from a normalised density by inverse CDF.
pub fn sample_fixations(density: &[f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(density.len());
    let mut acc = 0.0;
    for &d in density {
        acc += d;
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(density.len() - 1)
        })
        .collect()
}

/// Renders `frames` frames of `spec`: RGB frames, densities and binary
/// fixation maps. Fully determined by the spec's seed.
pub fn generate_synthetic_clip(
    spec: &SyntheticSceneSpec,
    name: &str,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<ClipData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f1c5);
    let mut clip = ClipData {
        name: name.to_string(),
        frames: Vec::with_capacity(frames),
        density: Vec::with_capacity(frames),
        fixations: Vec::with_capacity(frames),
    };
    for f in 0..frames {
        let d = density_at(spec, f, h, w)?;
        let mut fix = vec![0.0; h * w];
        for px in sample_fixations(d.data(), spec.fixations.max(1), &mut rng) {
            fix[px] = 1.0;
        }
        clip.frames.push(frame_at(spec, f, h, w)?);
        clip.fixations.push(ErpImage::new(1, h, w, fix)?);
        clip.density.push(d);
    }
    Ok(clip)
}

/// Writes a clip under `root/name/{frames,density,fixations}` and returns
/// its manifest entry with paths relative to `root`.
pub fn write_clip(root: &Path, clip: &ClipData, fps: f64) -> Result<ClipManifest> {
    let mut entry = ClipManifest {
        name: clip.name.clone(),
        fps,
        frames: Vec::new(),
        density: Vec::new(),
        fixations: Vec::new(),
    };
    for i in 0..clip.len() {
        let rel = |sub: &str, ext: &str| Path::new(&clip.name).join(sub).join(format!("{i:04}.{ext}"));
        let (fr, de, fx) = (rel("frames", "png"), rel("density", "pfm"), rel("fixations", "pgm"));
        io::write_png(&root.join(&fr), &clip.frames[i])?;
        io::write_pfm(&root.join(&de), &clip.density[i])?;
        io::write_pgm(&root.join(&fx), &clip.fixations[i])?;
        entry.frames.push(fr);
        entry.density.push(de);
        entry.fixations.push(fx);
    }
    Ok(entry)
}

/// Generates `clips` random clips into `root` and writes `manifest.json`.
pub fn write_dataset(
    root: &Path,
    clips: usize,
    frames: usize,
    h: usize,
    w: usize,
    sources: usize,
    seed: u64,
) -> Result<Manifest> {
    let mut m = Manifest {
        clips: Vec::with_capacity(clips),
        root: root.to_path_buf(),
    };
    for c in 0..clips {
        let spec = SyntheticSceneSpec::random(seed.wrapping_mul(1000).wrapping_add(c as u64), sources);
        let clip = generate_synthetic_clip(&spec, &format!("clip{c:03}"), frames, h, w)?;
        m.clips.push(write_clip(root, &clip, 16.0)?);
    }
    m.save(&root.join("manifest.json"))?;
    Ok(m)
}
