//! Equirectangular rasters and the pixel-centre convention shared by every
//! resampling path.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::geom::{AngularCoord, GeomError};

/// A channel-planar (C, H, W) equirectangular image with `W = 2H`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErpImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ErpImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, GeomError> {
        check_erp_dims(height, width)?;
        if channels == 0 || data.len() != channels * height * width {
            return Err(GeomError::DimensionMismatch(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self, GeomError> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds an image by evaluating `f(channel, coord)` at every pixel centre.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, AngularCoord) -> f64,
    ) -> Result<Self, GeomError> {
        check_erp_dims(height, width)?;
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, pixel_center(i, j, height, width)));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// Bilinear sample at fractional (row, col); columns wrap around in
    /// longitude, rows clamp at the poles.
    pub fn sample(&self, c: usize, row: f64, col: f64) -> f64 {
        let plane = self.channel(c);
        let [(i0, i1, fr), (j0, j1, fc)] = erp_taps(row, col, self.height, self.width);
        let w = self.width;
        let top = plane[i0 * w + j0] * (1.0 - fc) + plane[i0 * w + j1] * fc;
        let bot = plane[i1 * w + j0] * (1.0 - fc) + plane[i1 * w + j1] * fc;
        top * (1.0 - fr) + bot * fr
    }

    /// Rolls every row by `k` pixels towards increasing longitude.
    pub fn roll_longitude(&self, k: usize) -> Self {
        let mut out = self.clone();
        let w = self.width;
        for (src, dst) in self.data.chunks(w).zip(out.data.chunks_mut(w)) {
            for j in 0..w {
                dst[(j + k) % w] = src[j];
            }
        }
        out
    }
}

pub(crate) fn check_erp_dims(height: usize, width: usize) -> Result<(), GeomError> {
    if height == 0 || width != 2 * height {
        return Err(GeomError::Aspect { height, width });
    }
    Ok(())
}

/// Angular coordinate of the centre of ERP pixel (i, j).
pub fn pixel_center(i: usize, j: usize, height: usize, width: usize) -> AngularCoord {
    let phi = FRAC_PI_2 - (i as f64 + 0.5) * PI / height as f64;
    let theta = (j as f64 + 0.5) * TAU / width as f64 - PI;
    AngularCoord::new(phi, theta).expect("pixel centres are in range")
}

/// Fractional ERP (row, col) of an angular coordinate, inverse of
/// [`pixel_center`]. Column lies in [-0.5, W - 0.5).
pub fn erp_position(coord: AngularCoord, height: usize, width: usize) -> (f64, f64) {
    let row = (FRAC_PI_2 - coord.phi) / PI * height as f64 - 0.5;
    let col = (coord.theta + PI) / TAU * width as f64 - 0.5;
    (row, col)
}

/// Bilinear taps `[(row0, row1, frac), (col0, col1, frac)]` with pole
/// clamping on rows and wrap-around on columns.
#[inline]
pub(crate) fn erp_taps(row: f64, col: f64, height: usize, width: usize) -> [(usize, usize, f64); 2] {
    let r = row.clamp(0.0, (height - 1) as f64);
    let i0 = r.floor() as usize;
    let i1 = (i0 + 1).min(height - 1);
    let fr = r - i0 as f64;
    let cf = col.floor();
    let fc = col - cf;
    let j0 = (cf as i64).rem_euclid(width as i64) as usize;
    let j1 = (j0 + 1) % width;
    [(i0, i1, fr), (j0, j1, fc)]
}

/// Bilinear taps on a square patch with edge clamping.
#[inline]
pub(crate) fn patch_taps(u: f64, v: f64, size: usize) -> [(usize, f64); 4] {
    let max = (size - 1) as f64;
    let (u, v) = (u.clamp(0.0, max), v.clamp(0.0, max));
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (u1, v1) = ((u0 + 1).min(size - 1), (v0 + 1).min(size - 1));
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    [
        (v0 * size + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * size + u1, fu * (1.0 - fv)),
        (v1 * size + u0, (1.0 - fu) * fv),
        (v1 * size + u1, fu * fv),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_position_roundtrip() {
        let (h, w) = (8, 16);
        for i in 0..h {
            for j in 0..w {
                let (r, c) = erp_position(pixel_center(i, j, h, w), h, w);
                assert!((r - i as f64).abs() < 1e-12);
                assert!((c - j as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_wraps_longitude() {
        let img = ErpImage::from_fn(1, 4, 8, |_, c| c.theta).unwrap();
        // halfway between last and first column mixes both
        let v = img.sample(0, 1.0, 7.5);
        assert!((v - 0.5 * (img.get(0, 1, 7) + img.get(0, 1, 0))).abs() < 1e-12);
        assert_eq!(img.sample(0, 1.0, 3.0), img.get(0, 1, 3));
    }

    #[test]
    fn rejects_non_2_to_1() {
        assert!(matches!(
            ErpImage::filled(1, 4, 4, 0.0),
            Err(GeomError::Aspect { .. })
        ));
    }
}
