//! Frame and map file formats, clip manifests and window sampling.
//!
//! Frames are 8-bit PNG or binary PGM decoded to [0, 1]; float maps are
//! little-endian PFM. A clip directory holds `frames/`, `density/` and
//! `fixations/` with files named `NNNN.ext`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::GeomError;
use crate::raster::ErpImage;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Geometry { path: PathBuf, source: GeomError },
    #[error("{path}: expected {expected:?}, found {found:?}")]
    Dimensions {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("unsupported file extension: {0}")]
    Extension(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("window of {window} frames exceeds clip length {len}")]
    Window { window: usize, len: usize },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IoError>;

fn format_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn to_erp(path: &Path, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<ErpImage> {
    ErpImage::new(c, h, w, data).map_err(|source| IoError::Geometry {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn header_tokens<R: BufRead>(r: &mut R, n: usize) -> std::io::Result<Vec<String>> {
    let mut out = Vec::with_capacity(n);
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    let mut comment = false;
    while out.len() < n {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let b = byte[0];
        if comment {
            comment = b != b'\n';
            continue;
        }
        if b == b'#' && cur.is_empty() {
            comment = true;
        } else if b.is_ascii_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(b as char);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn parse_dim(path: &Path, s: &str) -> Result<usize> {
    s.parse()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| format_err(path, format!("bad dimension {s:?}")))
}

/// Reads a PFM map; `Pf` gives one channel, `PF` three.
pub fn read_pfm(path: &Path) -> Result<ErpImage> {
    let (c, h, w, data) = read_pfm_planar(path)?;
    to_erp(path, c, h, w, data)
}

/// Reads a PFM of any aspect as `(channels, height, width, planar data)`.
pub fn read_pfm_planar(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let f = fs::File::open(path).map_err(file_err(path))?;
    let mut r = BufReader::new(f);
    let tok = header_tokens(&mut r, 4).map_err(file_err(path))?;
    if tok.len() < 4 {
        return Err(format_err(path, "truncated PFM header"));
    }
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format_err(path, format!("bad PFM magic {m:?}"))),
    };
    let w = parse_dim(path, &tok[1])?;
    let h = parse_dim(path, &tok[2])?;
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| format_err(path, format!("bad PFM scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, "PFM scale must be nonzero"));
    }
    let little = scale < 0.0;
    let n = channels * h * w;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|_| format_err(path, "truncated PFM payload"))?;
    let mut data = vec![0.0; n];
    // rows are stored bottom to top, channels interleaved
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let c = k % channels;
        let px = k / channels;
        let (row, col) = (h - 1 - px / w, px % w);
        data[(c * h + row) * w + col] = f64::from(v);
    }
    Ok((channels, h, w, data))
}

/// Writes a 1- or 3-channel image as little-endian PFM (values rounded
/// to f32).
pub fn write_pfm(path: &Path, img: &ErpImage) -> Result<()> {
    write_pfm_planar(path, img.channels(), img.height(), img.width(), img.data())
}

/// Writes planar (C, H, W) data of any aspect as PFM.
pub fn write_pfm_planar(path: &Path, c: usize, h: usize, w: usize, data: &[f64]) -> Result<()> {
    if data.len() != c * h * w {
        return Err(format_err(path, format!("{} values for a {c}x{h}x{w} map", data.len())));
    }
    let magic = match c {
        1 => "Pf",
        3 => "PF",
        _ => return Err(format_err(path, format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(c * h * w * 4);
    for row in (0..h).rev() {
        for col in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(data[(ch * h + row) * w + col] as f32).to_le_bytes());
            }
        }
    }
    write_atomic(path, &out)
}

/// Reads a binary (P5) PGM scaled to [0, 1] by its max value.
pub fn read_pgm(path: &Path) -> Result<ErpImage> {
    let f = fs::File::open(path).map_err(file_err(path))?;
    let mut r = BufReader::new(f);
    let tok = header_tokens(&mut r, 4).map_err(file_err(path))?;
    if tok.len() < 4 || tok[0] != "P5" {
        return Err(format_err(path, "not a binary PGM"));
    }
    let w = parse_dim(path, &tok[1])?;
    let h = parse_dim(path, &tok[2])?;
    let max = parse_dim(path, &tok[3])?;
    if max > 65535 {
        return Err(format_err(path, "PGM max value above 65535"));
    }
    let wide = max > 255;
    let mut raw = vec![0u8; h * w * if wide { 2 } else { 1 }];
    r.read_exact(&mut raw)
        .map_err(|_| format_err(path, "truncated PGM payload"))?;
    let max = max as f64;
    let data = if wide {
        raw.chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / max)
            .collect()
    } else {
        raw.iter().map(|&b| f64::from(b) / max).collect()
    };
    to_erp(path, 1, h, w, data)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes channel 0 as an 8-bit P5 PGM.
pub fn write_pgm(path: &Path, img: &ErpImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.channel(0).iter().map(|&v| quantize(v)));
    write_atomic(path, &out)
}

/// Reads a PNG as grey (1 channel) or RGB (3 channels) in [0, 1].
pub fn read_png(path: &Path) -> Result<ErpImage> {
    let img = image::open(path).map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grey = matches!(img.color().channel_count(), 1 | 2);
    let (c, interleaved) = if grey {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let mut data = vec![0.0; c * h * w];
    for (k, &b) in interleaved.iter().enumerate() {
        data[(k % c) * h * w + k / c] = f64::from(b) / 255.0;
    }
    to_erp(path, c, h, w, data)
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn write_png(path: &Path, img: &ErpImage) -> Result<()> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let n = h * w;
    ensure_parent(path)?;
    let save = |r: image::ImageResult<()>| {
        r.map_err(|source| IoError::Image {
            path: path.to_path_buf(),
            source,
        })
    };
    match c {
        1 => {
            let buf: Vec<u8> = img.channel(0).iter().map(|&v| quantize(v)).collect();
            let im = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("sized");
            save(im.save_with_format(path, image::ImageFormat::Png))
        }
        3 => {
            let d = img.data();
            let buf: Vec<u8> = (0..n * 3).map(|k| quantize(d[(k % 3) * n + k / 3])).collect();
            let im = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("sized");
            save(im.save_with_format(path, image::ImageFormat::Png))
        }
        _ => Err(format_err(path, format!("PNG writer takes 1 or 3 channels, got {c}"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Reads a frame or map, dispatching on the file extension.
pub fn read_frame(path: &Path) -> Result<ErpImage> {
    match extension(path).as_str() {
        "png" => read_png(path),
        "pgm" => read_pgm(path),
        "pfm" => read_pfm(path),
        _ => Err(IoError::Extension(path.to_path_buf())),
    }
}

pub fn write_frame(path: &Path, img: &ErpImage) -> Result<()> {
    match extension(path).as_str() {
        "png" => write_png(path, img),
        "pgm" => write_pgm(path, img),
        "pfm" => write_pfm(path, img),
        _ => Err(IoError::Extension(path.to_path_buf())),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    Ok(())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(file_err(path))?;
    f.write_all(bytes).map_err(file_err(path))
}

const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.478, 0.821, 0.318],
    [0.993, 0.906, 0.144],
];

/// Viridis-like colour for `t` in [0, 1].
pub fn viridis(t: f64) -> [f64; 3] {
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// Writes channel 0 as a max-normalised colour heatmap PNG.
pub fn write_heatmap(path: &Path, map: &ErpImage) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let plane = map.channel(0);
    let max = plane.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (k, &v) in plane.iter().enumerate() {
        let rgb = viridis(v * scale);
        for c in 0..3 {
            data[c * n + k] = rgb[c];
        }
    }
    let img = to_erp(path, 3, h, w, data)?;
    write_png(path, &img)
}

/// One clip: ordered frame, density and fixation files, paths relative to
/// the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub name: String,
    pub fps: f64,
    pub frames: Vec<PathBuf>,
    pub density: Vec<PathBuf>,
    pub fixations: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub clips: Vec<ClipManifest>,
    /// Directory paths are resolved against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Decoded clip contents.
#[derive(Clone, Debug)]
pub struct ClipData {
    pub name: String,
    pub frames: Vec<ErpImage>,
    pub density: Vec<ErpImage>,
    pub fixations: Vec<ErpImage>,
}

impl ClipData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames
            .first()
            .map(|f| (f.height(), f.width()))
            .unwrap_or((0, 0))
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn clip(&self, name: &str) -> Option<&ClipManifest> {
        self.clips.iter().find(|c| c.name == name)
    }

    /// Decodes one clip and checks that every file exists and shares the
    /// first frame's dimensions.
    pub fn load_clip(&self, clip: &ClipManifest) -> Result<ClipData> {
        if clip.frames.is_empty() {
            return Err(IoError::Manifest(format!("clip {} has no frames", clip.name)));
        }
        if clip.density.len() != clip.frames.len() || clip.fixations.len() != clip.frames.len() {
            return Err(IoError::Manifest(format!(
                "clip {}: {} frames, {} density maps, {} fixation maps",
                clip.name,
                clip.frames.len(),
                clip.density.len(),
                clip.fixations.len()
            )));
        }
        let mut dims = None;
        let mut load = |p: &PathBuf| -> Result<ErpImage> {
            let path = self.resolve(p);
            let img = read_frame(&path)?;
            let found = (img.height(), img.width());
            match dims {
                None => dims = Some(found),
                Some(expected) if expected != found => {
                    return Err(IoError::Dimensions { path, expected, found })
                }
                _ => {}
            }
            Ok(img)
        };
        let frames = clip.frames.iter().map(&mut load).collect::<Result<_>>()?;
        let density = clip.density.iter().map(&mut load).collect::<Result<_>>()?;
        let fixations = clip.fixations.iter().map(&mut load).collect::<Result<_>>()?;
        Ok(ClipData {
            name: clip.name.clone(),
            frames,
            density,
            fixations,
        })
    }
}

/// Sliding `window`-frame ranges over a clip of `len` frames; a final
/// window ending on the last frame is added when the stride skips it.
pub fn clip_windows(len: usize, window: usize, stride: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 || window > len {
        return Err(IoError::Window { window, len });
    }
    let stride = stride.max(1);
    let mut out: Vec<Range<usize>> = (0..=len - window)
        .step_by(stride)
        .map(|s| s..s + window)
        .collect();
    if out.last().map(|r| r.end) != Some(len) {
        out.push(len - window..len);
    }
    Ok(out)
}

/// `(clip index, frame range)` for every window across a manifest.
pub fn clip_sampler(manifest: &Manifest, window: usize, stride: usize) -> Result<Vec<(usize, Range<usize>)>> {
    let mut out = Vec::new();
    for (i, clip) in manifest.clips.iter().enumerate() {
        for r in clip_windows(clip.frames.len(), window, stride)? {
            out.push((i, r));
        }
    }
    Ok(out)
}
