//! Forward and backward kernels for the heavier primitives (conv, batch norm).

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<R: Real>(x: &Tensor<R>, w: &Tensor<R>, geom: ConvGeom) -> Result<ConvDims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape(
            "conv2d",
            format!("input {xs:?} vs weight {ws:?} (expected [N,Cin,H,W] and [Cout,Cin,kh,kw])"),
        ));
    }
    let ho = out_dim(xs[2], ws[2], geom.stride, geom.pad);
    let wo = out_dim(xs[3], ws[3], geom.stride, geom.pad);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok(ConvDims {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho,
            wo,
        }),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "spatial {}x{} with pad {} smaller than kernel {}x{}",
                xs[2], xs[3], geom.pad, ws[2], ws[3]
            ),
        )),
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies inside `0..w`.
fn valid_cols(wo: usize, w: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if w + pad > k {
        ((w + pad - k - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<R: Real>(img: &[R], d: &ConvDims, geom: ConvGeom, col: &mut [R]) {
    let l = d.ho * d.wo;
    let (s, pad) = (geom.stride, geom.pad);
    let mut row = 0;
    for c in 0..d.cin {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(d.wo, d.w, s, kj, pad);
                for oy in 0..d.ho {
                    let iy = (oy * s + ki) as isize - pad as isize;
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(R::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out[..lo].fill(R::zero());
                    out[hi..].fill(R::zero());
                    if lo < hi {
                        let first = lo * s + kj - pad;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (i, v) in out[lo..hi].iter_mut().enumerate() {
                                *v = src[first + i * s];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<R: Real>(col: &[R], d: &ConvDims, geom: ConvGeom, img: &mut [R]) {
    let l = d.ho * d.wo;
    let (s, pad) = (geom.stride, geom.pad);
    let mut row = 0;
    for c in 0..d.cin {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let srcrow = &col[row * l..(row + 1) * l];
                let (lo, hi) = valid_cols(d.wo, d.w, s, kj, pad);
                for oy in 0..d.ho {
                    let iy = (oy * s + ki) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &srcrow[oy * d.wo + lo..oy * d.wo + hi];
                    let first = lo * s + kj - pad;
                    if s == 1 {
                        for (a, &b) in dst[first..first + (hi - lo)].iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    } else {
                        for (i, &b) in src.iter().enumerate() {
                            let a = &mut dst[first + i * s];
                            *a = *a + b;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn is_pointwise(d: &ConvDims, geom: ConvGeom) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.pad == 0
}

/// Cross-correlation of `x` `[N, Cin, H, W]` with `w` `[Cout, Cin, kh, kw]`, no bias.
pub fn conv2d_forward<R: Real>(x: &Tensor<R>, w: &Tensor<R>, geom: ConvGeom) -> Result<Tensor<R>> {
    let d = conv_dims(x, w, geom)?;
    let k = d.cin * d.kh * d.kw;
    let l = d.ho * d.wo;
    let mut out = vec![R::zero(); d.n * d.cout * l];
    let mut col = vec![R::zero(); if is_pointwise(&d, geom) { 0 } else { k * l }];
    let in_len = d.cin * d.h * d.w;
    for s in 0..d.n {
        let img = &x.data()[s * in_len..(s + 1) * in_len];
        let b: &[R] = if is_pointwise(&d, geom) {
            img
        } else {
            im2col(img, &d, geom, &mut col);
            &col
        };
        let dst = &mut out[s * d.cout * l..(s + 1) * d.cout * l];
        R::gemm(
            d.cout,
            k,
            l,
            R::one(),
            w.data(),
            k as isize,
            1,
            b,
            l as isize,
            1,
            R::zero(),
            dst,
            l as isize,
            1,
        );
    }
    Tensor::new(&[d.n, d.cout, d.ho, d.wo], out)
}

/// Returns `(dx, dw)`; either may be skipped.
pub fn conv2d_backward<R: Real>(
    x: &Tensor<R>,
    w: &Tensor<R>,
    geom: ConvGeom,
    dy: &Tensor<R>,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<R>>, Option<Tensor<R>>)> {
    let d = conv_dims(x, w, geom)?;
    let k = d.cin * d.kh * d.kw;
    let l = d.ho * d.wo;
    if dy.shape() != [d.n, d.cout, d.ho, d.wo] {
        return Err(Error::shape("conv2d backward", format!("{:?}", dy.shape())));
    }
    let pointwise = is_pointwise(&d, geom);
    let in_len = d.cin * d.h * d.w;
    let mut dx = need_dx.then(|| vec![R::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![R::zero(); w.numel()]);
    let mut col = vec![R::zero(); if pointwise { 0 } else { k * l }];
    let mut dcol = vec![R::zero(); if need_dx && !pointwise { k * l } else { 0 }];
    for s in 0..d.n {
        let g = &dy.data()[s * d.cout * l..(s + 1) * d.cout * l];
        let img = &x.data()[s * in_len..(s + 1) * in_len];
        if let Some(dw) = dw.as_mut() {
            let b: &[R] = if pointwise {
                img
            } else {
                im2col(img, &d, geom, &mut col);
                &col
            };
            // dw (cout x k) += g (cout x l) * col^T (l x k)
            R::gemm(
                d.cout,
                l,
                k,
                R::one(),
                g,
                l as isize,
                1,
                b,
                1,
                l as isize,
                R::one(),
                dw,
                k as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                R::gemm(
                    k,
                    d.cout,
                    l,
                    R::one(),
                    w.data(),
                    1,
                    k as isize,
                    g,
                    l as isize,
                    1,
                    R::one(),
                    dst,
                    l as isize,
                    1,
                );
            } else {
                R::gemm(
                    k,
                    d.cout,
                    l,
                    R::one(),
                    w.data(),
                    1,
                    k as isize,
                    g,
                    l as isize,
                    1,
                    R::zero(),
                    &mut dcol,
                    l as isize,
                    1,
                );
                col2im(&dcol, &d, geom, dst);
            }
        }
    }
    Ok((
        dx.map(|v| Tensor::new(x.shape(), v)).transpose()?,
        dw.map(|v| Tensor::new(w.shape(), v)).transpose()?,
    ))
}

/// Channel axis layout shared by 2-D (`[N, C]`) and 4-D (`[N, C, H, W]`) inputs.
pub(crate) fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        _ => Err(Error::shape("batch_norm", format!("{shape:?}"))),
    }
}

/// Per-channel batch statistics: `(mean, biased variance)`.
pub fn channel_moments<R: Real>(x: &Tensor<R>) -> Result<(Vec<R>, Vec<R>)> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let count = R::from_usize(n * hw).unwrap_or(R::one());
    let mut mean = vec![R::zero(); c];
    let mut var = vec![R::zero(); c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            let off = (s * c + ch) * hw;
            acc += x.data()[off..off + hw]
                .iter()
                .map(|v| v.to_f64().unwrap_or(0.0))
                .sum::<f64>();
        }
        let m = R::lit(acc) / count;
        let mut sq = R::zero();
        for s in 0..n {
            let off = (s * c + ch) * hw;
            for &v in &x.data()[off..off + hw] {
                sq = sq + (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    Ok((mean, var))
}

/// `x_hat = (x - mean) * inv_std` per channel.
pub fn normalize<R: Real>(x: &Tensor<R>, mean: &[R], inv_std: &[R]) -> Result<Tensor<R>> {
    let (n, c, hw) = channel_layout(x.shape())?;
    let mut out = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for v in &mut out.data_mut()[off..off + hw] {
                *v = (*v - mean[ch]) * inv_std[ch];
            }
        }
    }
    Ok(out)
}

/// `y = gamma * x_hat + beta` per channel.
pub fn affine<R: Real>(x_hat: &Tensor<R>, gamma: &[R], beta: &[R]) -> Result<Tensor<R>> {
    let (n, c, hw) = channel_layout(x_hat.shape())?;
    let mut out = x_hat.clone();
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for v in &mut out.data_mut()[off..off + hw] {
                *v = gamma[ch] * *v + beta[ch];
            }
        }
    }
    Ok(out)
}

/// Per-channel sums of `dy` and `dy * x_hat`.
pub(crate) fn channel_sums<R: Real>(dy: &Tensor<R>, x_hat: &[R]) -> Result<(Vec<R>, Vec<R>)> {
    let (n, c, hw) = channel_layout(dy.shape())?;
    let mut s1 = vec![R::zero(); c];
    let mut s2 = vec![R::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            let g = &dy.data()[off..off + hw];
            let xh = &x_hat[off..off + hw];
            for (a, b) in g.iter().zip(xh) {
                s1[ch] = s1[ch] + *a;
                s2[ch] = s2[ch] + *a * *b;
            }
        }
    }
    Ok((s1, s2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        let y = conv2d_forward(&x, &w, ConvGeom { stride: 1, pad: 1 }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_small_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let err = conv2d_forward(&x, &w, ConvGeom { stride: 1, pad: 0 }).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn conv_stride_two_sums_window() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d_forward(&x, &w, ConvGeom { stride: 2, pad: 0 }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_f64_vec(), vec![10., 18., 42., 50.]);
    }
}
