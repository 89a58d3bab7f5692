//! Forward and backward kernels for the closed layer set.

use super::gemm::{gemm, Trans};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − 1` is in bounds.
#[inline]
fn valid_cols(w: usize, wo: usize, stride: usize, kx: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx <= w { ((w - kx) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold one sample into `col`, whose rows are `ld` apart (`ld ≥ ho·wo`).
fn im2col(
    x: &[f32],
    (ci, h, w): (usize, usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
    col: &mut [f32],
    ld: usize,
) {
    let hwo = ho * wo;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * ld..][..hwo];
                let (lo, hi) = valid_cols(w, wo, stride, kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + kx - 1..hi + kx - 1]);
                    } else {
                        for (ox, d) in (lo..hi).zip(&mut dst[lo..hi]) {
                            *d = src[ox * stride + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f32],
    (ci, h, w): (usize, usize, usize),
    stride: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f32],
    ld: usize,
) {
    let hwo = ho * wo;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 3 + ky) * 3 + kx) * ld..][..hwo];
                let (lo, hi) = valid_cols(w, wo, stride, kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    if stride == 1 {
                        for (d, s) in dst[lo + kx - 1..hi + kx - 1].iter_mut().zip(&src[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * stride + kx - 1] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Channels that are nonzero somewhere in the batch, if at most half are.
fn sparse_channels(x: &Tensor) -> Option<Vec<usize>> {
    let [bs, ci, h, w] = x.dims4().ok()?;
    if ci < 8 {
        return None;
    }
    let hw = h * w;
    let active: Vec<usize> = (0..ci)
        .filter(|&c| (0..bs).any(|n| x.data()[(n * ci + c) * hw..][..hw].iter().any(|&v| v != 0.0)))
        .collect();
    (2 * active.len() <= ci).then_some(active)
}

fn restrict_channels(x: &Tensor, w: &Tensor, active: &[usize]) -> (Tensor, Tensor) {
    let [bs, ci, h, wd] = x.dims4().expect("4-d input");
    let co = w.shape()[0];
    let hw = h * wd;
    let mut xs = Vec::with_capacity(bs * active.len() * hw);
    for n in 0..bs {
        for &c in active {
            xs.extend_from_slice(&x.data()[(n * ci + c) * hw..][..hw]);
        }
    }
    let mut ws = Vec::with_capacity(co * active.len() * 9);
    for o in 0..co {
        for &c in active {
            ws.extend_from_slice(&w.data()[(o * ci + c) * 9..][..9]);
        }
    }
    (
        Tensor::new(&[bs, active.len(), h, wd], xs).expect("sized above"),
        Tensor::new(&[co, active.len(), 3, 3], ws).expect("sized above"),
    )
}

/// Samples whose unfolded columns share one GEMM, keeping the buffer near 16 MB.
fn samples_per_chunk(k: usize, hwo: usize, bs: usize) -> usize {
    ((1 << 22) / (k * hwo).max(1)).clamp(1, bs.max(1))
}

/// 3×3 convolution with zero padding 1. `w` is `(Co, Ci, 3, 3)`, `b` is `(Co)`.
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let [bs, ci, h, wd] = x.dims4()?;
    let [co, wci, kh, kw] = w.dims4()?;
    if wci != ci || kh != 3 || kw != 3 || b.len() != co {
        return Err(Error::invalid(format!(
            "conv weight {:?} / bias {:?} incompatible with input {:?}",
            w.shape(),
            b.shape(),
            x.shape()
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid(format!("unsupported stride {stride}")));
    }
    if let Some(active) = sparse_channels(x) {
        let (xs, ws) = restrict_channels(x, w, &active);
        return conv2d_forward(&xs, &ws, b, stride);
    }
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(wd, stride));
    let hwo = ho * wo;
    let k = ci * 9;
    let in_len = ci * h * wd;
    let nb = samples_per_chunk(k, hwo, bs);
    let mut out = Tensor::zeros(&[bs, co, ho, wo]);
    if k == 0 {
        for (i, chunk) in out.data_mut().chunks_exact_mut(hwo).enumerate() {
            chunk.fill(b.data()[i % co]);
        }
        return Ok(out);
    }
    let mut col = vec![0.0f32; k * nb * hwo];
    let mut prod = vec![0.0f32; co * nb * hwo];
    for start in (0..bs).step_by(nb) {
        let m = nb.min(bs - start);
        let ld = m * hwo;
        let col = &mut col[..k * ld];
        for j in 0..m {
            let n = start + j;
            im2col(&x.data()[n * in_len..(n + 1) * in_len], (ci, h, wd), stride, (ho, wo), &mut col[j * hwo..], ld);
        }
        let prod = &mut prod[..co * ld];
        gemm(co, k, ld, 1.0, w.data(), Trans::No, col, Trans::No, 0.0, prod);
        for j in 0..m {
            let dst = &mut out.data_mut()[(start + j) * co * hwo..][..co * hwo];
            for (o, chunk) in dst.chunks_exact_mut(hwo).enumerate() {
                let bias = b.data()[o];
                for (d, p) in chunk.iter_mut().zip(&prod[o * ld + j * hwo..][..hwo]) {
                    *d = p + bias;
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let [bs, ci, h, wd] = x.dims4().expect("checked in forward");
    let co = w.shape()[0];
    if !need_dx {
        if let Some(active) = sparse_channels(x) {
            let (xs, ws) = restrict_channels(x, w, &active);
            let (_, dws, db) = conv2d_backward(&xs, &ws, dout, stride, false);
            let mut dw = vec![0.0f32; w.len()];
            for o in 0..co {
                for (j, &c) in active.iter().enumerate() {
                    let src = &dws[(o * active.len() + j) * 9..][..9];
                    dw[(o * ci + c) * 9..][..9].copy_from_slice(src);
                }
            }
            return (None, dw, db);
        }
    }
    let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(wd, stride));
    let hwo = ho * wo;
    let k = ci * 9;
    let in_len = ci * h * wd;
    let nb = samples_per_chunk(k, hwo, bs);
    let mut dw = vec![0.0f32; co * k];
    let mut db = vec![0.0f32; co];
    let mut dx = need_dx.then(|| vec![0.0f32; x.len()]);
    let mut col = vec![0.0f32; k * nb * hwo];
    let mut dcol = if need_dx { vec![0.0f32; k * nb * hwo] } else { Vec::new() };
    let mut gbuf = vec![0.0f32; co * nb * hwo];
    for start in (0..bs).step_by(nb) {
        let m = nb.min(bs - start);
        let ld = m * hwo;
        if k == 0 {
            for n in start..start + m {
                for (o, chunk) in dout.data()[n * co * hwo..(n + 1) * co * hwo].chunks_exact(hwo).enumerate() {
                    db[o] += chunk.iter().sum::<f32>();
                }
            }
            continue;
        }
        let col = &mut col[..k * ld];
        let gm = &mut gbuf[..co * ld];
        for j in 0..m {
            let n = start + j;
            let g = &dout.data()[n * co * hwo..(n + 1) * co * hwo];
            for (o, chunk) in g.chunks_exact(hwo).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
                gm[o * ld + j * hwo..][..hwo].copy_from_slice(chunk);
            }
            im2col(&x.data()[n * in_len..(n + 1) * in_len], (ci, h, wd), stride, (ho, wo), &mut col[j * hwo..], ld);
        }
        // dW += dout · colᵀ
        gemm(co, ld, k, 1.0, gm, Trans::No, col, Trans::Yes, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dout
            let dcol = &mut dcol[..k * ld];
            gemm(k, co, ld, 1.0, w.data(), Trans::Yes, gm, Trans::No, 0.0, dcol);
            for j in 0..m {
                let n = start + j;
                col2im(&dcol[j * hwo..], (ci, h, wd), stride, (ho, wo), &mut dx[n * in_len..(n + 1) * in_len], ld);
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, h2, w2]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2x_backward(x_shape: &[usize], dout: &[f32]) -> Vec<f32> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![0.0f32; b * c * h * w];
    for p in 0..b * c {
        let g = &dout[p * h2 * w2..(p + 1) * h2 * w2];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[(y / 2) * w + xx / 2] += g[y * w2 + xx];
            }
        }
    }
    dx
}

pub(crate) fn avgpool2_forward(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "2x2 average pool needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                d[y * wo + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
            }
        }
    }
    Ok(out)
}

pub(crate) fn avgpool2_backward(x_shape: &[usize], dout: &[f32]) -> Vec<f32> {
    let (b, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0f32; b * c * h * w];
    for p in 0..b * c {
        let g = &dout[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                d[y * w + xx] = 0.25 * g[(y / 2) * wo + xx / 2];
            }
        }
    }
    dx
}

pub(crate) fn global_avgpool_forward(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4()?;
    let hw = h * w;
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().sum::<f32>() / hw as f32)
        .collect();
    Tensor::new(&[b, c], data)
}

pub(crate) fn global_avgpool_backward(x_shape: &[usize], dout: &[f32]) -> Vec<f32> {
    let hw = x_shape[2] * x_shape[3];
    let mut dx = Vec::with_capacity(dout.len() * hw);
    for &g in dout {
        dx.extend(std::iter::repeat(g / hw as f32).take(hw));
    }
    dx
}

/// `y = x · Wᵀ + b` with `x: (B, I)`, `W: (O, I)`, `b: (O)`.
pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [bs, i] = x.dims2()?;
    let [o, wi] = w.dims2()?;
    if wi != i || b.len() != o {
        return Err(Error::invalid(format!(
            "linear weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[bs, o]);
    for r in out.data_mut().chunks_exact_mut(o) {
        r.copy_from_slice(b.data());
    }
    gemm(bs, i, o, 1.0, x.data(), Trans::No, w.data(), Trans::Yes, 1.0, out.data_mut());
    Ok(out)
}

pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, dout: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let [bs, i] = x.dims2().expect("checked in forward");
    let o = w.shape()[0];
    let mut dx = vec![0.0f32; bs * i];
    let mut dw = vec![0.0f32; o * i];
    let mut db = vec![0.0f32; o];
    gemm(bs, o, i, 1.0, dout, Trans::No, w.data(), Trans::No, 0.0, &mut dx);
    gemm(o, bs, i, 1.0, dout, Trans::Yes, x.data(), Trans::No, 0.0, &mut dw);
    for r in dout.chunks_exact(o) {
        for (d, g) in db.iter_mut().zip(r) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Mean absolute difference.
pub(crate) fn l1_forward(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "l1 loss shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum();
    Ok((s / a.len() as f64) as f32)
}

/// Gradient of the mean absolute difference with respect to `a`
/// (the gradient for `b` is its negation).
pub(crate) fn l1_backward(a: &Tensor, b: &Tensor, g: f32) -> Vec<f32> {
    let scale = g / a.len() as f32;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::SplitMix64;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| (r.unit() * 2.0 - 1.0) as f32).collect()).unwrap()
    }

    fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f32> {
        let [bs, ci, h, wd] = x.dims4().unwrap();
        let co = w.shape()[0];
        let (ho, wo) = (conv_out_dim(h, stride), conv_out_dim(wd, stride));
        let mut out = vec![0.0f32; bs * co * ho * wo];
        for n in 0..bs {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o] as f64;
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((o * ci + c) * 3 + ky) * 3 + kx];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((n * co + o) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for (h, w, stride) in [(5, 7, 1), (6, 6, 2), (1, 1, 1), (2, 3, 2), (1, 2, 2)] {
            let x = rand(&[2, 3, h, w], 1);
            let k = rand(&[4, 3, 3, 3], 2);
            let b = rand(&[4], 3);
            let got = conv2d_forward(&x, &k, &b, stride).unwrap();
            let want = direct_conv(&x, &k, &b, stride);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-5, "{h}x{w}/{stride}");
            }
        }
    }

    #[test]
    fn zero_channel_shortcut_matches_dense() {
        let mut x = rand(&[2, 16, 4, 4], 7);
        for n in 0..2 {
            for c in (0..16).filter(|c| c % 5 != 0) {
                x.data_mut()[(n * 16 + c) * 16..][..16].fill(0.0);
            }
        }
        assert_eq!(sparse_channels(&x).unwrap(), vec![0, 5, 10, 15]);
        let k = rand(&[3, 16, 3, 3], 8);
        let b = rand(&[3], 9);
        let got = conv2d_forward(&x, &k, &b, 1).unwrap();
        let want = direct_conv(&x, &k, &b, 1);
        assert!(got.data().iter().zip(&want).all(|(g, w)| (g - w).abs() < 1e-5));
        let g = rand(got.shape(), 10);
        let (_, dw_sparse, db_sparse) = conv2d_backward(&x, &k, &g, 1, false);
        let (_, dw_dense, db_dense) = conv2d_backward(&x, &k, &g, 1, true);
        assert!(dw_sparse.iter().zip(&dw_dense).all(|(a, b)| (a - b).abs() < 1e-5));
        assert_eq!(db_sparse, db_dense);
    }

    #[test]
    fn conv_input_gradient_is_adjoint() {
        // <conv(x) - b, y> == <x, dx(y)> for the linear part
        for (h, w, stride) in [(5, 7, 1), (6, 6, 2), (3, 5, 2)] {
            let x = rand(&[1, 2, h, w], 4);
            let k = rand(&[3, 2, 3, 3], 5);
            let zero = Tensor::zeros(&[3]);
            let y = conv2d_forward(&x, &k, &zero, stride).unwrap();
            let g = rand(y.shape(), 6);
            let (dx, _, _) = conv2d_backward(&x, &k, &g, stride, true);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| (a * b) as f64).sum();
            let rhs: f64 = x.data().iter().zip(dx.unwrap()).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }
}
