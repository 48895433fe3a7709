//! Forward and backward kernels shared by the autodiff graph and by
//! callers that only need inference (the frozen encoder).

use super::{invalid, Result, Tensor, TensorError};

/// Shape of a 2-D convolution's output, or an error when the kernel does
/// not fit the padded input.
pub fn conv2d_out_hw(h: usize, w: usize, k: usize, pad: usize) -> Result<(usize, usize)> {
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(invalid(
            "conv2d",
            format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
        ));
    }
    Ok((h + 2 * pad + 1 - k, w + 2 * pad + 1 - k))
}

/// Valid output-column range for kernel column `kx`: those `ox` with
/// `0 <= ox + kx - pad < w`.
#[inline]
fn col_range(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

/// Stride-1 square-kernel convolution. `x`: (N, Cin, H, W), `weight`:
/// (Cout, Cin, K, K), `bias`: (Cout).
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Result<Tensor> {
    let [n, cin, h, w] = dims4("conv2d", x)?;
    let [cout, wcin, k, k2] = dims4("conv2d", weight)?;
    if wcin != cin || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    if n == 0 || cin == 0 || h == 0 || w == 0 || cout == 0 {
        return Err(invalid("conv2d", "zero-size dimension"));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (ho, wo) = conv2d_out_hw(h, w, k, pad)?;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; n * cout * ho * wo];
    for b in 0..n {
        for co in 0..cout {
            let plane = &mut out[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[co]);
            }
            for ci in 0..cin {
                let src = &xd[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((co * cin + ci) * k + ky) * k + kx];
                        let (lo, hi) = col_range(kx, pad, w, wo);
                        for oy in 0..ho {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let srow = &src[(iy - pad) * w..(iy - pad + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in lo..hi {
                                orow[ox] += wv * srow[ox + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    pad: usize,
    gout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, cin, h, w] = dims4("conv2d", x).expect("checked in forward");
    let [cout, _, k, _] = dims4("conv2d", weight).expect("checked in forward");
    let ho = gout.shape()[2];
    let wo = gout.shape()[3];
    let xd = x.data();
    let wd = weight.data();
    let gd = gout.data();
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; cout];
    for b in 0..n {
        for co in 0..cout {
            let g = &gd[(b * cout + co) * ho * wo..(b * cout + co + 1) * ho * wo];
            gb[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (b * cin + ci) * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = wd[widx];
                        let (lo, hi) = col_range(kx, pad, w, wo);
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let row = base + (iy - pad) * w;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for ox in lo..hi {
                                let xi = row + ox + kx - pad;
                                acc += xd[xi] * grow[ox];
                                gx[xi] += wv * grow[ox];
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(weight.shape().to_vec(), gw).expect("shape"),
        Tensor::new(vec![cout], gb).expect("shape"),
    )
}

/// 2x2 average pooling with stride 2 over the last two dims of (N, C, H, W).
pub fn avg_pool2d(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("avg_pool2d", x)?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("avg_pool2d", format!("spatial size {h}x{w} must be even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * wo + ox] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn avg_pool2d_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let planes = in_shape[0] * in_shape[1];
    let gd = gout.data();
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * gd[(p * ho + oy) * wo + ox];
                let i = p * h * w + 2 * oy * w + 2 * ox;
                gx[i] += g;
                gx[i + 1] += g;
                gx[i + w] += g;
                gx[i + w + 1] += g;
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("shape")
}

/// Nearest-neighbour x2 upsampling of (N, C, H, W).
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("upsample2d", x)?;
    if h == 0 || w == 0 {
        return Err(invalid("upsample2d", "zero-size dimension"));
    }
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                out[(p * ho + oy) * wo + ox] = xd[(p * h + oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample_nearest2x_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let planes = in_shape[0] * in_shape[1];
    let gd = gout.data();
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[(p * h + oy / 2) * w + ox / 2] += gd[(p * ho + oy) * wo + ox];
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("shape")
}

/// Batched matrix product. Accepts (M, K) x (K, N) or (B, M, K) x (B, K, N).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![0.0; batch * m * n];
    matmul_into(a.data(), b.data(), &mut out, batch, m, k, n, false, false);
    let shape = if a.ndim() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Tensor::new(shape, out)
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => Ok((*ba, *m, *k, *n)),
        _ => Err(mismatch()),
    }
}

/// Accumulates `op(A) * op(B)` into `out` for each batch, where `op`
/// optionally transposes the last two dims. Shapes are those of the
/// un-transposed product: out is (M, N) and the inner dim is K.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    for bi in 0..batch {
        let a = &a[bi * m * k..(bi + 1) * m * k];
        let b = &b[bi * k * n..(bi + 1) * k * n];
        let out = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if trans_a { a[p * m + i] } else { a[i * k + p] };
                if av == 0.0 {
                    continue;
                }
                if trans_b {
                    for j in 0..n {
                        orow[j] += av * b[j * k + p];
                    }
                } else {
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
    }
}

/// General axis permutation: output dim `i` is input dim `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(invalid("permute", format!("invalid axes {axes:?} for rank {nd}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let xd = x.data();
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(xd[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Numerically stable softmax over the last dim.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let d = last_dim("softmax", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Normalises each last-dim row to zero mean and unit variance. Returns the
/// normalised values and the per-row inverse standard deviations.
pub fn layer_norm_last(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let d = last_dim("layer_norm", x)?;
    let mut out = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(out.len() / d);
    for row in out.chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv_std))
}

/// Rotary embedding over the last dim, with positions indexed along the
/// second-to-last dim. Dimension pairs are interleaved (2i, 2i+1) and
/// rotated by angle `pos * base^(-2i/d)`. `sign = -1` applies the inverse.
pub fn rotary(x: &Tensor, positions: &[usize], base: f64, sign: f64) -> Result<Tensor> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(invalid("rotary", "needs rank >= 2"));
    }
    let d = x.shape()[nd - 1];
    let l = x.shape()[nd - 2];
    if d % 2 != 0 {
        return Err(invalid("rotary", format!("last dim {d} must be even")));
    }
    if positions.len() != l {
        return Err(invalid(
            "rotary",
            format!("{} positions for sequence length {l}", positions.len()),
        ));
    }
    let half = d / 2;
    let table: Vec<(f64, f64)> = positions
        .iter()
        .flat_map(|&p| {
            (0..half).map(move |i| {
                let angle = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
                let (s, c) = angle.sin_cos();
                (s * sign, c)
            })
        })
        .collect();
    let mut out = x.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        let pos = r % l;
        for i in 0..half {
            let (s, c) = table[pos * half + i];
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let inner = K * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dims4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(invalid(op, format!("expected rank-4 tensor, got {s:?}"))),
    }
}

fn last_dim(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(invalid(op, "needs a non-empty last dim")),
    }
}
