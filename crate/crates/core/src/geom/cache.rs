//! On-disk cache of resampling grids keyed by a content hash of the layout
//! and raster size.
//!
//! File layout: `magic[8] | version u32 | kind u8 | payload_len u64 |
//! payload | sha256(payload)[32]`. Any mismatch on read is treated as a
//! miss and the grid is rebuilt and rewritten.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::grid::{build_forward_grid, build_inverse_grid, ForwardGrid, InverseEntry, InverseGrid};
use super::{AngularCoord, GeomError, TangentLayout};

const MAGIC: &[u8; 8] = b"SVGRID\0\0";
const VERSION: u32 = 1;
const KIND_FORWARD: u8 = 1;
const KIND_INVERSE: u8 = 2;

pub struct GridCache {
    dir: PathBuf,
}

impl GridCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GeomError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn key(layout: &TangentLayout, erp_h: usize, erp_w: usize, kind: u8) -> String {
        let mut h = Sha256::new();
        h.update(MAGIC);
        h.update(VERSION.to_le_bytes());
        h.update([kind]);
        h.update(serde_json::to_vec(layout).expect("layout serializes"));
        h.update((erp_h as u64).to_le_bytes());
        h.update((erp_w as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str, kind: u8) -> PathBuf {
        let ext = if kind == KIND_FORWARD { "fwd" } else { "inv" };
        self.dir.join(format!("{key}.{ext}"))
    }

    pub fn forward(&self, layout: &TangentLayout, erp_h: usize, erp_w: usize) -> Result<ForwardGrid, GeomError> {
        let path = self.path(&Self::key(layout, erp_h, erp_w, KIND_FORWARD), KIND_FORWARD);
        if let Some(g) = read_blob(&path, KIND_FORWARD).and_then(|p| decode_forward(&p)) {
            return Ok(g);
        }
        let g = build_forward_grid(layout, erp_h, erp_w)?;
        write_blob(&path, KIND_FORWARD, &encode_forward(&g))?;
        Ok(g)
    }

    pub fn inverse(&self, layout: &TangentLayout, erp_h: usize, erp_w: usize) -> Result<InverseGrid, GeomError> {
        let path = self.path(&Self::key(layout, erp_h, erp_w, KIND_INVERSE), KIND_INVERSE);
        if let Some(g) = read_blob(&path, KIND_INVERSE).and_then(|p| decode_inverse(&p)) {
            return Ok(g);
        }
        let (g, _) = build_inverse_grid(layout, erp_h, erp_w)?;
        write_blob(&path, KIND_INVERSE, &encode_inverse(&g))?;
        Ok(g)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn write_blob(path: &Path, kind: u8, payload: &[u8]) -> Result<(), GeomError> {
    let mut out = Vec::with_capacity(payload.len() + 53);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&Sha256::digest(payload));
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn read_blob(path: &Path, kind: u8) -> Option<Vec<u8>> {
    let bytes = fs::read(path).ok()?;
    let header = 8 + 4 + 1 + 8;
    if bytes.len() < header + 32 || &bytes[..8] != MAGIC {
        log::warn!("grid cache {} unreadable, rebuilding", path.display());
        return None;
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().ok()?);
    let len = u64::from_le_bytes(bytes[13..21].try_into().ok()?) as usize;
    if version != VERSION || bytes[12] != kind || bytes.len() != header + len + 32 {
        log::warn!("grid cache {} stale, rebuilding", path.display());
        return None;
    }
    let payload = &bytes[header..header + len];
    if Sha256::digest(payload).as_slice() != &bytes[header + len..] {
        log::warn!("grid cache {} corrupt, rebuilding", path.display());
        return None;
    }
    Some(payload.to_vec())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.buf.get(self.pos..self.pos + N)?;
        self.pos += N;
        s.try_into().ok()
    }

    fn u64(&mut self) -> Option<usize> {
        self.take::<8>().map(|b| u64::from_le_bytes(b) as usize)
    }

    fn f64(&mut self) -> Option<f64> {
        self.take::<8>().map(f64::from_le_bytes)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_forward(g: &ForwardGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + g.coords.len() * 32);
    for v in [g.planes, g.patch, g.erp_h, g.erp_w] {
        put_u64(&mut out, v);
    }
    for (c, s) in g.coords.iter().zip(&g.sources) {
        put_f64(&mut out, c.phi);
        put_f64(&mut out, c.theta);
        put_f64(&mut out, s.0);
        put_f64(&mut out, s.1);
    }
    out
}

fn decode_forward(buf: &[u8]) -> Option<ForwardGrid> {
    let mut r = Reader { buf, pos: 0 };
    let (planes, patch, erp_h, erp_w) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let n = planes.checked_mul(patch)?.checked_mul(patch)?;
    if buf.len() != 32 + n * 32 {
        return None;
    }
    let mut coords = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push(AngularCoord {
            phi: r.f64()?,
            theta: r.f64()?,
        });
        sources.push((r.f64()?, r.f64()?));
    }
    Some(ForwardGrid {
        planes,
        patch,
        erp_h,
        erp_w,
        coords,
        sources,
    })
}

fn encode_inverse(g: &InverseGrid) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [g.planes, g.patch, g.erp_h, g.erp_w, g.entries.len()] {
        put_u64(&mut out, v);
    }
    for &p in &g.pixel_ptr {
        put_u64(&mut out, p);
    }
    for e in &g.entries {
        out.extend_from_slice(&e.plane.to_le_bytes());
        put_f64(&mut out, e.u);
        put_f64(&mut out, e.v);
        put_f64(&mut out, e.raw_weight);
    }
    out
}

fn decode_inverse(buf: &[u8]) -> Option<InverseGrid> {
    let mut r = Reader { buf, pos: 0 };
    let (planes, patch, erp_h, erp_w, n) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let npx = erp_h.checked_mul(erp_w)?;
    let pixel_ptr = (0..=npx).map(|_| r.u64()).collect::<Option<Vec<_>>>()?;
    if pixel_ptr.last() != Some(&n) || pixel_ptr.windows(2).any(|w| w[0] > w[1]) {
        return None;
    }
    let entries = (0..n)
        .map(|_| {
            Some(InverseEntry {
                plane: r.u32()?,
                u: r.f64()?,
                v: r.f64()?,
                raw_weight: r.f64()?,
            })
        })
        .collect::<Option<Vec<_>>>()?;
    if r.pos != buf.len() || entries.iter().any(|e| e.plane as usize >= planes) {
        return None;
    }
    Some(InverseGrid {
        planes,
        patch,
        erp_h,
        erp_w,
        pixel_ptr,
        entries,
    })
}
