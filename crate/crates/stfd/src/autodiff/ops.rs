//! Differentiable operations. Every op allocates a fresh output node;
//! the captured closure maps the output gradient to parent gradients,
//! returning `None` for parents that do not need one.

use super::tensor::any_requires;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

// ---------------------------------------------------------------------------
// elementwise / reductions
// ---------------------------------------------------------------------------

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<T> = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x + *y).collect()));
    let req = any_requires(&[a, b]);
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            vec![
                ra.then(|| g.to_vec()),
                rb.then(|| g.to_vec()),
            ]
        }) as _
    });
    Ok(Tensor::make(a.shape(), out, req, vec![a.clone(), b.clone()], backward))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mul: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out: Vec<T> = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x * *y).collect()));
    let req = any_requires(&[a, b]);
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    let (ac, bc) = (a.clone(), b.clone());
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let ga = ra.then(|| bc.with_data(|bd| g.iter().zip(bd).map(|(gi, y)| *gi * *y).collect()));
            let gb = rb.then(|| ac.with_data(|ad| g.iter().zip(ad).map(|(gi, x)| *gi * *x).collect()));
            vec![ga, gb]
        }) as _
    });
    Ok(Tensor::make(a.shape(), out, req, vec![a.clone(), b.clone()], backward))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let out: Vec<T> = a.with_data(|ad| ad.iter().map(|x| *x * c).collect());
    let req = a.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| vec![Some(g.iter().map(|gi| *gi * c).collect())]) as _
    });
    Tensor::make(a.shape(), out, req, vec![a.clone()], backward)
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.with_data(|ad| ad.iter().fold(T::zero(), |acc, x| acc + *x));
    let n = a.numel();
    let req = a.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| vec![Some(vec![g[0]; n])]) as _
    });
    Tensor::make(vec![], vec![total], req, vec![a.clone()], backward)
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel();
    let inv = T::one() / s::<T>(n as f64);
    let total = a.with_data(|ad| ad.iter().fold(T::zero(), |acc, x| acc + *x)) * inv;
    let req = a.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| vec![Some(vec![g[0] * inv; n])]) as _
    });
    Tensor::make(vec![], vec![total], req, vec![a.clone()], backward)
}

pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if n != a.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} ({} elems) -> {:?} ({} elems)",
            a.shape(),
            a.numel(),
            shape,
            n
        )));
    }
    let req = a.requires_grad();
    let backward = req.then(|| Box::new(move |g: &[T]| vec![Some(g.to_vec())]) as _);
    Ok(Tensor::make(shape, a.to_vec(), req, vec![a.clone()], backward))
}

/// Concatenate along axis 0; trailing dimensions must match.
pub fn concat0<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Usage("concat0 of zero tensors".into()));
    }
    let first = parts[0].shape();
    if first.is_empty() {
        return Err(Error::Shape("concat0 needs rank >= 1".into()));
    }
    let trailing = &first[1..];
    let mut c0 = 0usize;
    for p in parts {
        let sh = p.shape();
        if sh.is_empty() || &sh[1..] != trailing {
            return Err(Error::Shape(format!(
                "concat0: incompatible shapes {:?} vs {:?}",
                first,
                p.shape()
            )));
        }
        c0 += sh[0];
    }
    let mut shape = vec![c0];
    shape.extend_from_slice(trailing);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        p.with_data(|d| data.extend_from_slice(d));
    }
    let req = any_requires(parts);
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let reqs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut off = 0usize;
            for (sz, r) in sizes.iter().zip(&reqs) {
                out.push(r.then(|| g[off..off + sz].to_vec()));
                off += sz;
            }
            out
        }) as _
    });
    Ok(Tensor::make(
        shape,
        data,
        req,
        parts.iter().map(|p| (*p).clone()).collect(),
        backward,
    ))
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out: Vec<T> = a.with_data(|ad| ad.iter().map(|x| x.max(T::zero())).collect());
    let req = a.requires_grad();
    let ac = a.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            vec![Some(ac.with_data(|ad| {
                g.iter()
                    .zip(ad)
                    .map(|(gi, x)| if *x > T::zero() { *gi } else { T::zero() })
                    .collect()
            }))]
        }) as _
    });
    Tensor::make(a.shape(), out, req, vec![a.clone()], backward)
}

pub fn leaky_relu<T: Scalar>(a: &Tensor<T>, slope: f64) -> Tensor<T> {
    let k = s::<T>(slope);
    let out: Vec<T> = a.with_data(|ad| {
        ad.iter()
            .map(|x| if *x > T::zero() { *x } else { *x * k })
            .collect()
    });
    let req = a.requires_grad();
    let ac = a.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            vec![Some(ac.with_data(|ad| {
                g.iter()
                    .zip(ad)
                    .map(|(gi, x)| if *x > T::zero() { *gi } else { *gi * k })
                    .collect()
            }))]
        }) as _
    });
    Tensor::make(a.shape(), out, req, vec![a.clone()], backward)
}

/// Probability clamp applied after every sigmoid, keeping log terms finite.
pub const SIGMOID_EPS: f64 = 1e-7;

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let lo = s::<T>(SIGMOID_EPS);
    let hi = T::one() - lo;
    let out: Vec<T> = a.with_data(|ad| {
        ad.iter()
            .map(|x| {
                let v = T::one() / (T::one() + (-*x).exp());
                v.max(lo).min(hi)
            })
            .collect()
    });
    let req = a.requires_grad();
    let oc = out.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            vec![Some(
                g.iter()
                    .zip(&oc)
                    .map(|(gi, v)| *gi * *v * (T::one() - *v))
                    .collect(),
            )]
        }) as _
    });
    Tensor::make(a.shape(), out, req, vec![a.clone()], backward)
}

// ---------------------------------------------------------------------------
// linear / conv
// ---------------------------------------------------------------------------

/// x: (N, F_in), w: (F_out, F_in), b: (F_out) -> (N, F_out)
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    let bs = b.shape();
    if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
        return Err(Error::Shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            xs, ws, bs
        )));
    }
    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
    let mut out = vec![T::zero(); n * fout];
    x.with_data(|xd| {
        w.with_data(|wd| {
            b.with_data(|bd| {
                for i in 0..n {
                    let xr = &xd[i * fin..(i + 1) * fin];
                    for o in 0..fout {
                        let wr = &wd[o * fin..(o + 1) * fin];
                        let mut acc = bd[o];
                        for (xi, wi) in xr.iter().zip(wr) {
                            acc += *xi * *wi;
                        }
                        out[i * fout + o] = acc;
                    }
                }
            })
        })
    });
    let req = any_requires(&[x, w, b]);
    let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    let (xc, wc) = (x.clone(), w.clone());
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let gx = rx.then(|| {
                wc.with_data(|wd| {
                    let mut gx = vec![T::zero(); n * fin];
                    for i in 0..n {
                        for o in 0..fout {
                            let gi = g[i * fout + o];
                            let wr = &wd[o * fin..(o + 1) * fin];
                            let gxr = &mut gx[i * fin..(i + 1) * fin];
                            for (gxi, wi) in gxr.iter_mut().zip(wr) {
                                *gxi += gi * *wi;
                            }
                        }
                    }
                    gx
                })
            });
            let gw = rw.then(|| {
                xc.with_data(|xd| {
                    let mut gw = vec![T::zero(); fout * fin];
                    for i in 0..n {
                        let xr = &xd[i * fin..(i + 1) * fin];
                        for o in 0..fout {
                            let gi = g[i * fout + o];
                            let gwr = &mut gw[o * fin..(o + 1) * fin];
                            for (gwi, xi) in gwr.iter_mut().zip(xr) {
                                *gwi += gi * *xi;
                            }
                        }
                    }
                    gw
                })
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); fout];
                for i in 0..n {
                    for o in 0..fout {
                        gb[o] += g[i * fout + o];
                    }
                }
                gb
            });
            vec![gx, gw, gb]
        }) as _
    });
    Ok(Tensor::make(
        vec![n, fout],
        out,
        req,
        vec![x.clone(), w.clone(), b.clone()],
        backward,
    ))
}

/// x: (C_in, L), w: (C_out, C_in, K), b: (C_out) -> (C_out, L_out)
/// Cross-correlation with zero padding.
pub fn conv1d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 3 || b.shape() != vec![ws[0]] || xs[0] != ws[1] || stride == 0 {
        return Err(Error::Shape(format!(
            "conv1d: x {:?}, w {:?}, b {:?}, stride {}",
            xs,
            ws,
            b.shape(),
            stride
        )));
    }
    let (c_in, l) = (xs[0], xs[1]);
    let (c_out, k) = (ws[0], ws[2]);
    if l + 2 * pad < k {
        return Err(Error::Shape(format!(
            "conv1d: input length {} + 2*{} shorter than kernel {}",
            l, pad, k
        )));
    }
    let l_out = 1 + (l + 2 * pad - k) / stride;
    let mut out = vec![T::zero(); c_out * l_out];
    x.with_data(|xd| {
        w.with_data(|wd| {
            b.with_data(|bd| {
                for oc in 0..c_out {
                    for ol in 0..l_out {
                        let start = (ol * stride) as isize - pad as isize;
                        let k_lo = (-start).max(0) as usize;
                        let k_hi = k.min((l as isize - start).max(0) as usize);
                        let mut acc = bd[oc];
                        for ic in 0..c_in {
                            let xr = &xd[ic * l..(ic + 1) * l];
                            let wr = &wd[(oc * c_in + ic) * k..(oc * c_in + ic + 1) * k];
                            let base = start + k_lo as isize;
                            let xs_ = &xr[base as usize..base as usize + (k_hi - k_lo)];
                            let ws_ = &wr[k_lo..k_hi];
                            for (xi, wi) in xs_.iter().zip(ws_) {
                                acc += *xi * *wi;
                            }
                        }
                        out[oc * l_out + ol] = acc;
                    }
                }
            })
        })
    });
    let req = any_requires(&[x, w, b]);
    let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    let (xc, wc) = (x.clone(), w.clone());
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut gx = rx.then(|| vec![T::zero(); c_in * l]);
            let mut gw = rw.then(|| vec![T::zero(); c_out * c_in * k]);
            let mut gb = rb.then(|| vec![T::zero(); c_out]);
            xc.with_data(|xd| {
                wc.with_data(|wd| {
                    for oc in 0..c_out {
                        for ol in 0..l_out {
                            let gi = g[oc * l_out + ol];
                            if let Some(gb) = gb.as_mut() {
                                gb[oc] += gi;
                            }
                            let start = (ol * stride) as isize - pad as isize;
                            let k_lo = (-start).max(0) as usize;
                            let k_hi = k.min((l as isize - start).max(0) as usize);
                            let base = (start + k_lo as isize) as usize;
                            for ic in 0..c_in {
                                let woff = (oc * c_in + ic) * k;
                                if let Some(gx) = gx.as_mut() {
                                    let wr = &wd[woff + k_lo..woff + k_hi];
                                    let gxr = &mut gx[ic * l + base..ic * l + base + (k_hi - k_lo)];
                                    for (gxi, wi) in gxr.iter_mut().zip(wr) {
                                        *gxi += gi * *wi;
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xr = &xd[ic * l + base..ic * l + base + (k_hi - k_lo)];
                                    let gwr = &mut gw[woff + k_lo..woff + k_hi];
                                    for (gwi, xi) in gwr.iter_mut().zip(xr) {
                                        *gwi += gi * *xi;
                                    }
                                }
                            }
                        }
                    }
                })
            });
            vec![gx, gw, gb]
        }) as _
    });
    Ok(Tensor::make(
        vec![c_out, l_out],
        out,
        req,
        vec![x.clone(), w.clone(), b.clone()],
        backward,
    ))
}

/// x: (C_in, H, W), w: (C_out, C_in/groups, Kh, Kw), b: (C_out).
/// Grouped cross-correlation with zero padding; groups == C_in gives a
/// depthwise convolution.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 4 || b.shape() != vec![ws[0]] {
        return Err(Error::Shape(format!(
            "conv2d: x {:?}, w {:?}, b {:?}",
            xs,
            ws,
            b.shape()
        )));
    }
    let (c_in, h, wd_) = (xs[0], xs[1], xs[2]);
    let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if groups == 0
        || c_in % groups != 0
        || c_out % groups != 0
        || cg != c_in / groups
        || stride.0 == 0
        || stride.1 == 0
    {
        return Err(Error::Shape(format!(
            "conv2d: c_in {}, c_out {}, groups {}, w {:?}",
            c_in, c_out, groups, ws
        )));
    }
    if h + 2 * pad.0 < kh || wd_ + 2 * pad.1 < kw {
        return Err(Error::Shape(format!(
            "conv2d: spatial ({}, {}) too small for kernel ({}, {})",
            h, wd_, kh, kw
        )));
    }
    let h_out = 1 + (h + 2 * pad.0 - kh) / stride.0;
    let w_out = 1 + (wd_ + 2 * pad.1 - kw) / stride.1;
    let ocg = c_out / groups;
    let mut out = vec![T::zero(); c_out * h_out * w_out];

    let pointwise = kh == 1 && kw == 1 && pad == (0, 0) && stride == (1, 1);
    x.with_data(|xd| {
        w.with_data(|wv| {
            b.with_data(|bd| {
                if pointwise {
                    let hw = h * wd_;
                    for oc in 0..c_out {
                        let grp = oc / ocg;
                        let or = &mut out[oc * hw..(oc + 1) * hw];
                        or.fill(bd[oc]);
                        for icg in 0..cg {
                            let ic = grp * cg + icg;
                            let wv_ = wv[(oc * cg + icg) * kh * kw];
                            let xr = &xd[ic * hw..(ic + 1) * hw];
                            for (o, xi) in or.iter_mut().zip(xr) {
                                *o += wv_ * *xi;
                            }
                        }
                    }
                } else {
                    for oc in 0..c_out {
                        let grp = oc / ocg;
                        for oh in 0..h_out {
                            let ih0 = (oh * stride.0) as isize - pad.0 as isize;
                            let kh_lo = (-ih0).max(0) as usize;
                            let kh_hi = kh.min((h as isize - ih0).max(0) as usize);
                            for ow in 0..w_out {
                                let iw0 = (ow * stride.1) as isize - pad.1 as isize;
                                let kw_lo = (-iw0).max(0) as usize;
                                let kw_hi = kw.min((wd_ as isize - iw0).max(0) as usize);
                                let mut acc = bd[oc];
                                for icg in 0..cg {
                                    let ic = grp * cg + icg;
                                    let woff = (oc * cg + icg) * kh * kw;
                                    for kh_ in kh_lo..kh_hi {
                                        let ih = (ih0 + kh_ as isize) as usize;
                                        let xrow = &xd[(ic * h + ih) * wd_..];
                                        let wrow = &wv[woff + kh_ * kw..];
                                        for kw_ in kw_lo..kw_hi {
                                            let iw = (iw0 + kw_ as isize) as usize;
                                            acc += xrow[iw] * wrow[kw_];
                                        }
                                    }
                                }
                                out[(oc * h_out + oh) * w_out + ow] = acc;
                            }
                        }
                    }
                }
            })
        })
    });

    let req = any_requires(&[x, w, b]);
    let (rx, rw, rb) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    let (xc, wc) = (x.clone(), w.clone());
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut gx = rx.then(|| vec![T::zero(); c_in * h * wd_]);
            let mut gw = rw.then(|| vec![T::zero(); c_out * cg * kh * kw]);
            let mut gb = rb.then(|| vec![T::zero(); c_out]);
            xc.with_data(|xd| {
                wc.with_data(|wv| {
                    if pointwise {
                        let hw = h * wd_;
                        for oc in 0..c_out {
                            let grp = oc / ocg;
                            let gr = &g[oc * hw..(oc + 1) * hw];
                            if let Some(gb) = gb.as_mut() {
                                gb[oc] += gr.iter().fold(T::zero(), |a, v| a + *v);
                            }
                            for icg in 0..cg {
                                let ic = grp * cg + icg;
                                let widx = (oc * cg + icg) * kh * kw;
                                if let Some(gx) = gx.as_mut() {
                                    let wv_ = wv[widx];
                                    let gxr = &mut gx[ic * hw..(ic + 1) * hw];
                                    for (gxi, gi) in gxr.iter_mut().zip(gr) {
                                        *gxi += wv_ * *gi;
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    let xr = &xd[ic * hw..(ic + 1) * hw];
                                    let mut acc = T::zero();
                                    for (xi, gi) in xr.iter().zip(gr) {
                                        acc += *xi * *gi;
                                    }
                                    gw[widx] += acc;
                                }
                            }
                        }
                    } else {
                        for oc in 0..c_out {
                            let grp = oc / ocg;
                            for oh in 0..h_out {
                                let ih0 = (oh * stride.0) as isize - pad.0 as isize;
                                let kh_lo = (-ih0).max(0) as usize;
                                let kh_hi = kh.min((h as isize - ih0).max(0) as usize);
                                for ow in 0..w_out {
                                    let gi = g[(oc * h_out + oh) * w_out + ow];
                                    if let Some(gb) = gb.as_mut() {
                                        gb[oc] += gi;
                                    }
                                    let iw0 = (ow * stride.1) as isize - pad.1 as isize;
                                    let kw_lo = (-iw0).max(0) as usize;
                                    let kw_hi = kw.min((wd_ as isize - iw0).max(0) as usize);
                                    for icg in 0..cg {
                                        let ic = grp * cg + icg;
                                        let woff = (oc * cg + icg) * kh * kw;
                                        for kh_ in kh_lo..kh_hi {
                                            let ih = (ih0 + kh_ as isize) as usize;
                                            for kw_ in kw_lo..kw_hi {
                                                let iw = (iw0 + kw_ as isize) as usize;
                                                if let Some(gx) = gx.as_mut() {
                                                    gx[(ic * h + ih) * wd_ + iw] +=
                                                        gi * wv[woff + kh_ * kw + kw_];
                                                }
                                                if let Some(gw) = gw.as_mut() {
                                                    gw[woff + kh_ * kw + kw_] +=
                                                        gi * xd[(ic * h + ih) * wd_ + iw];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                })
            });
            vec![gx, gw, gb]
        }) as _
    });
    Ok(Tensor::make(
        vec![c_out, h_out, w_out],
        out,
        req,
        vec![x.clone(), w.clone(), b.clone()],
        backward,
    ))
}

// ---------------------------------------------------------------------------
// normalization / pooling
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-5;

/// Normalize over the channel axis (axis 0) independently at every
/// trailing position. x: (C, ...), gamma/beta: (C).
pub fn layer_norm_ch<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.is_empty() || gamma.shape() != vec![xs[0]] || beta.shape() != vec![xs[0]] {
        return Err(Error::Shape(format!(
            "layer_norm_ch: x {:?}, gamma {:?}, beta {:?}",
            xs,
            gamma.shape(),
            beta.shape()
        )));
    }
    let c = xs[0];
    let m: usize = xs[1..].iter().product();
    let eps = s::<T>(NORM_EPS);
    let inv_c = T::one() / s::<T>(c as f64);
    let mut xhat = vec![T::zero(); c * m];
    let mut inv_std = vec![T::zero(); m];
    let mut out = vec![T::zero(); c * m];
    x.with_data(|xd| {
        gamma.with_data(|gd| {
            beta.with_data(|bd| {
                for j in 0..m {
                    let mut mu = T::zero();
                    for i in 0..c {
                        mu += xd[i * m + j];
                    }
                    mu *= inv_c;
                    let mut var = T::zero();
                    for i in 0..c {
                        let d = xd[i * m + j] - mu;
                        var += d * d;
                    }
                    var *= inv_c;
                    let is = T::one() / (var + eps).sqrt();
                    inv_std[j] = is;
                    for i in 0..c {
                        let xh = (xd[i * m + j] - mu) * is;
                        xhat[i * m + j] = xh;
                        out[i * m + j] = gd[i] * xh + bd[i];
                    }
                }
            })
        })
    });
    let req = any_requires(&[x, gamma, beta]);
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    let gc = gamma.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let gx = rx.then(|| {
                gc.with_data(|gd| {
                    let mut gx = vec![T::zero(); c * m];
                    for j in 0..m {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for i in 0..c {
                            let dxh = g[i * m + j] * gd[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i * m + j];
                        }
                        mean_dxh *= inv_c;
                        mean_dxh_xh *= inv_c;
                        for i in 0..c {
                            let dxh = g[i * m + j] * gd[i];
                            gx[i * m + j] =
                                inv_std[j] * (dxh - mean_dxh - xhat[i * m + j] * mean_dxh_xh);
                        }
                    }
                    gx
                })
            });
            let gg = rg.then(|| {
                let mut gg = vec![T::zero(); c];
                for i in 0..c {
                    for j in 0..m {
                        gg[i] += g[i * m + j] * xhat[i * m + j];
                    }
                }
                gg
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); c];
                for i in 0..c {
                    for j in 0..m {
                        gb[i] += g[i * m + j];
                    }
                }
                gb
            });
            vec![gx, gg, gb]
        }) as _
    });
    Ok(Tensor::make(
        xs,
        out,
        req,
        vec![x.clone(), gamma.clone(), beta.clone()],
        backward,
    ))
}

/// Per-channel batch normalization over all trailing axes of a single
/// item. In train mode the item's statistics are used and the running
/// statistics are updated in place (momentum update); in eval mode the
/// running statistics are used.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    momentum: f64,
    training: bool,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(Error::Shape("batch_norm: rank >= 1 required".into()));
    }
    let c = xs[0];
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != vec![c] {
            return Err(Error::Shape(format!(
                "batch_norm: {} has shape {:?}, expected [{}]",
                name,
                t.shape(),
                c
            )));
        }
    }
    let m: usize = xs[1..].iter().product();
    let eps = s::<T>(NORM_EPS);
    let inv_m = T::one() / s::<T>(m as f64);
    let mut xhat = vec![T::zero(); c * m];
    let mut inv_std = vec![T::zero(); c];
    let mut out = vec![T::zero(); c * m];

    if training {
        let mut mu = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        x.with_data(|xd| {
            for i in 0..c {
                let row = &xd[i * m..(i + 1) * m];
                let mut s0 = T::zero();
                for v in row {
                    s0 += *v;
                }
                mu[i] = s0 * inv_m;
                let mut s1 = T::zero();
                for v in row {
                    let d = *v - mu[i];
                    s1 += d * d;
                }
                var[i] = s1 * inv_m;
            }
        });
        let mom = s::<T>(momentum);
        let keep = T::one() - mom;
        let new_rm: Vec<T> = running_mean
            .to_vec()
            .iter()
            .zip(&mu)
            .map(|(r, b)| *r * keep + *b * mom)
            .collect();
        let new_rv: Vec<T> = running_var
            .to_vec()
            .iter()
            .zip(&var)
            .map(|(r, b)| *r * keep + *b * mom)
            .collect();
        running_mean.set_data(new_rm)?;
        running_var.set_data(new_rv)?;
        x.with_data(|xd| {
            gamma.with_data(|gd| {
                beta.with_data(|bd| {
                    for i in 0..c {
                        let is = T::one() / (var[i] + eps).sqrt();
                        inv_std[i] = is;
                        for j in 0..m {
                            let xh = (xd[i * m + j] - mu[i]) * is;
                            xhat[i * m + j] = xh;
                            out[i * m + j] = gd[i] * xh + bd[i];
                        }
                    }
                })
            })
        });
    } else {
        x.with_data(|xd| {
            gamma.with_data(|gd| {
                beta.with_data(|bd| {
                    running_mean.with_data(|rm| {
                        running_var.with_data(|rv| {
                            for i in 0..c {
                                let is = T::one() / (rv[i] + eps).sqrt();
                                inv_std[i] = is;
                                for j in 0..m {
                                    let xh = (xd[i * m + j] - rm[i]) * is;
                                    xhat[i * m + j] = xh;
                                    out[i * m + j] = gd[i] * xh + bd[i];
                                }
                            }
                        })
                    })
                })
            })
        });
    }

    let req = any_requires(&[x, gamma, beta]);
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    let gc = gamma.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let gx = rx.then(|| {
                gc.with_data(|gd| {
                    let mut gx = vec![T::zero(); c * m];
                    if training {
                        for i in 0..c {
                            let mut mean_dxh = T::zero();
                            let mut mean_dxh_xh = T::zero();
                            for j in 0..m {
                                let dxh = g[i * m + j] * gd[i];
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xhat[i * m + j];
                            }
                            mean_dxh *= inv_m;
                            mean_dxh_xh *= inv_m;
                            for j in 0..m {
                                let dxh = g[i * m + j] * gd[i];
                                gx[i * m + j] = inv_std[i]
                                    * (dxh - mean_dxh - xhat[i * m + j] * mean_dxh_xh);
                            }
                        }
                    } else {
                        for i in 0..c {
                            let k = gd[i] * inv_std[i];
                            for j in 0..m {
                                gx[i * m + j] = g[i * m + j] * k;
                            }
                        }
                    }
                    gx
                })
            });
            let gg = rg.then(|| {
                let mut gg = vec![T::zero(); c];
                for i in 0..c {
                    for j in 0..m {
                        gg[i] += g[i * m + j] * xhat[i * m + j];
                    }
                }
                gg
            });
            let gb = rb.then(|| {
                let mut gb = vec![T::zero(); c];
                for i in 0..c {
                    for j in 0..m {
                        gb[i] += g[i * m + j];
                    }
                }
                gb
            });
            vec![gx, gg, gb]
        }) as _
    });
    Ok(Tensor::make(
        xs,
        out,
        req,
        vec![x.clone(), gamma.clone(), beta.clone()],
        backward,
    ))
}

/// Concatenate same-channel tensors along their flattened trailing
/// axes: inputs (C, ...) with per-item trailing sizes m_k become one
/// (C, Σm_k) tensor whose channel rows are the items' rows laid side by
/// side. Together with `slice_trailing` this lets per-channel
/// normalization see joint statistics across a whole batch.
pub fn concat_trailing<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::Usage("concat_trailing: empty input list".into()));
    }
    let c = xs[0].shape().first().copied().unwrap_or(0);
    if c == 0 {
        return Err(Error::Shape(format!("concat_trailing: x0 {:?}", xs[0].shape())));
    }
    let mut ms = Vec::with_capacity(xs.len());
    for x in xs {
        let shape = x.shape();
        if shape.first() != Some(&c) {
            return Err(Error::Shape(format!(
                "concat_trailing: {:?} does not share leading channel {}",
                shape, c
            )));
        }
        ms.push(shape[1..].iter().product::<usize>());
    }
    let total: usize = ms.iter().sum();
    let mut out = vec![T::zero(); c * total];
    let mut off = 0;
    for (x, &m) in xs.iter().zip(&ms) {
        x.with_data(|xd| {
            for i in 0..c {
                out[i * total + off..i * total + off + m]
                    .copy_from_slice(&xd[i * m..(i + 1) * m]);
            }
        });
        off += m;
    }
    let req = xs.iter().any(|x| x.requires_grad());
    let reqs: Vec<bool> = xs.iter().map(|x| x.requires_grad()).collect();
    let ms_bw = ms.clone();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut out = Vec::with_capacity(ms_bw.len());
            let mut off = 0;
            for (&m, &r) in ms_bw.iter().zip(&reqs) {
                out.push(r.then(|| {
                    let mut gx = vec![T::zero(); c * m];
                    for i in 0..c {
                        gx[i * m..(i + 1) * m]
                            .copy_from_slice(&g[i * total + off..i * total + off + m]);
                    }
                    gx
                }));
                off += m;
            }
            out
        }) as _
    });
    Ok(Tensor::make(
        vec![c, total],
        out,
        req,
        xs.iter().map(|x| (*x).clone()).collect(),
        backward,
    ))
}

/// Inverse of one `concat_trailing` strip: carve trailing elements
/// [offset, offset + m) of every channel row out of x = (C, M) and
/// reshape them to `shape` (whose leading dimension must be C).
pub fn slice_trailing<T: Scalar>(
    x: &Tensor<T>,
    offset: usize,
    shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::Shape(format!("slice_trailing: x {:?}", xs)));
    }
    let (c, total) = (xs[0], xs[1]);
    let m: usize = shape[1..].iter().product();
    if shape.first() != Some(&c) || offset + m > total {
        return Err(Error::Shape(format!(
            "slice_trailing: {:?} at offset {} does not fit in {:?}",
            shape, offset, xs
        )));
    }
    let mut out = vec![T::zero(); c * m];
    x.with_data(|xd| {
        for i in 0..c {
            out[i * m..(i + 1) * m]
                .copy_from_slice(&xd[i * total + offset..i * total + offset + m]);
        }
    });
    let req = x.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); c * total];
            for i in 0..c {
                gx[i * total + offset..i * total + offset + m]
                    .copy_from_slice(&g[i * m..(i + 1) * m]);
            }
            vec![Some(gx)]
        }) as _
    });
    Ok(Tensor::make(shape, out, req, vec![x.clone()], backward))
}

/// x: (C, ...) -> (C), mean over all trailing axes.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(Error::Shape(format!("global_avg_pool: x {:?}", xs)));
    }
    let c = xs[0];
    let m: usize = xs[1..].iter().product();
    let inv_m = T::one() / s::<T>(m as f64);
    let out: Vec<T> = x.with_data(|xd| {
        (0..c)
            .map(|i| {
                let mut acc = T::zero();
                for v in &xd[i * m..(i + 1) * m] {
                    acc += *v;
                }
                acc * inv_m
            })
            .collect()
    });
    let req = x.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); c * m];
            for i in 0..c {
                let gi = g[i] * inv_m;
                for v in &mut gx[i * m..(i + 1) * m] {
                    *v = gi;
                }
            }
            vec![Some(gx)]
        }) as _
    });
    Ok(Tensor::make(vec![c], out, req, vec![x.clone()], backward))
}

/// (C, H, W) -> (W, C*H): one flattened feature row per frame, used by
/// the frame-wise head.
pub fn flatten_frames<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::Shape(format!("flatten_frames: x {:?}", xs)));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let mut out = vec![T::zero(); c * h * w];
    x.with_data(|xd| {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[wi * (c * h) + ci * h + hi] = xd[(ci * h + hi) * w + wi];
                }
            }
        }
    });
    let req = x.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let mut gx = vec![T::zero(); c * h * w];
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        gx[(ci * h + hi) * w + wi] = g[wi * (c * h) + ci * h + hi];
                    }
                }
            }
            vec![Some(gx)]
        }) as _
    });
    Ok(Tensor::make(vec![w, c * h], out, req, vec![x.clone()], backward))
}

// ---------------------------------------------------------------------------
// losses (analytic backward; verified by finite differences)
// ---------------------------------------------------------------------------

/// Binary cross-entropy of a scalar probability against a (possibly
/// soft) target. `p` must already be clamped away from {0, 1}, which
/// [`sigmoid`] guarantees.
pub fn bce_loss<T: Scalar>(p: &Tensor<T>, y: f64) -> Result<Tensor<T>> {
    if p.numel() != 1 {
        return Err(Error::Shape(format!(
            "bce_loss: expected scalar probability, got {:?}",
            p.shape()
        )));
    }
    let yv = s::<T>(y);
    let eps = s::<T>(SIGMOID_EPS);
    let pv = p.item().max(eps).min(T::one() - eps);
    let loss = -(yv * pv.ln() + (T::one() - yv) * (T::one() - pv).ln());
    let req = p.requires_grad();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let dp = -(yv / pv) + (T::one() - yv) / (T::one() - pv);
            vec![Some(vec![g[0] * dp])]
        }) as _
    });
    Ok(Tensor::make(vec![], vec![loss], req, vec![p.clone()], backward))
}

/// Mean squared error between frame probabilities and real-valued frame
/// targets.
pub fn mse_loss<T: Scalar>(p: &Tensor<T>, y: &[T]) -> Result<Tensor<T>> {
    if p.numel() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "mse_loss: {} predictions vs {} targets",
            p.numel(),
            y.len()
        )));
    }
    let n = y.len();
    let inv_n = T::one() / s::<T>(n as f64);
    let loss = p.with_data(|pd| {
        let mut acc = T::zero();
        for (pi, yi) in pd.iter().zip(y) {
            let d = *pi - *yi;
            acc += d * d;
        }
        acc * inv_n
    });
    let req = p.requires_grad();
    let pc = p.clone();
    let yv = y.to_vec();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let two = s::<T>(2.0);
            vec![Some(pc.with_data(|pd| {
                pd.iter()
                    .zip(&yv)
                    .map(|(pi, yi)| g[0] * two * (*pi - *yi) * inv_n)
                    .collect()
            }))]
        }) as _
    });
    Ok(Tensor::make(vec![], vec![loss], req, vec![p.clone()], backward))
}

/// Smoothing constant of the soft-IoU loss.
pub const IOU_SMOOTH: f64 = 1e-6;

/// 1 - (intersection + s) / (union + s) over frame probabilities and a
/// real-valued frame mask; differentiable in `p`.
pub fn soft_iou_loss<T: Scalar>(p: &Tensor<T>, y: &[T]) -> Result<Tensor<T>> {
    if p.numel() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!(
            "soft_iou_loss: {} predictions vs {} targets",
            p.numel(),
            y.len()
        )));
    }
    let sm = s::<T>(IOU_SMOOTH);
    let (inter, sum_p, sum_y) = p.with_data(|pd| {
        let mut inter = T::zero();
        let mut sp = T::zero();
        let mut sy = T::zero();
        for (pi, yi) in pd.iter().zip(y) {
            inter += *pi * *yi;
            sp += *pi;
            sy += *yi;
        }
        (inter, sp, sy)
    });
    let union = sum_p + sum_y - inter;
    let loss = T::one() - (inter + sm) / (union + sm);
    let req = p.requires_grad();
    let yv = y.to_vec();
    let backward = req.then(|| {
        Box::new(move |g: &[T]| {
            let denom = (union + sm) * (union + sm);
            vec![Some(
                yv.iter()
                    .map(|yi| {
                        // d inter/dp = y, d union/dp = 1 - y
                        let d = -(*yi * (union + sm) - (inter + sm) * (T::one() - *yi)) / denom;
                        g[0] * d
                    })
                    .collect(),
            )]
        }) as _
    });
    Ok(Tensor::make(vec![], vec![loss], req, vec![p.clone()], backward))
}
