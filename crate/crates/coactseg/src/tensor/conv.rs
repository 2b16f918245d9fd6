//! Direct-loop 3D convolution kernels and their backward passes.
//!
//! Loop order is fixed so repeated runs produce bit-identical results.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv3dDims {
    pub fn check(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let [n, c, d, h, w] = five(input, "conv3d input")?;
        let [k, wc, kd, kh, kw] = five(weight, "conv3d weight")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv3d: input has {c} channels but weight expects {wc}"
            )));
        }
        if bias != [k] {
            return Err(Error::Shape(format!(
                "conv3d: bias shape {bias:?} does not match {k} output channels"
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Invalid("conv3d: stride must be >= 1".into()));
        }
        let ext = |i: usize, k: usize, ax: usize| -> Result<usize> {
            let padded = i + 2 * padding[ax];
            if k > padded {
                return Err(Error::Shape(format!(
                    "conv3d: kernel extent {k} exceeds padded input extent {padded} on axis {ax}"
                )));
            }
            Ok((padded - k) / stride[ax] + 1)
        };
        Ok(Conv3dDims {
            n,
            c_in: c,
            c_out: k,
            d,
            h,
            w,
            kd,
            kh,
            kw,
            stride,
            padding,
            od: ext(d, kd, 0)?,
            oh: ext(h, kh, 1)?,
            ow: ext(w, kw, 2)?,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.od, self.oh, self.ow]
    }
}

pub fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], dm: &Conv3dDims) -> Vec<f64> {
    let mut out = vec![0.0; dm.n * dm.c_out * dm.od * dm.oh * dm.ow];
    let [sd, sh, sw] = dm.stride;
    let [pd, ph, pw] = dm.padding;
    let mut oi = 0;
    for n in 0..dm.n {
        for k in 0..dm.c_out {
            for od in 0..dm.od {
                for oh in 0..dm.oh {
                    for ow_ in 0..dm.ow {
                        let mut acc = b[k];
                        for c in 0..dm.c_in {
                            let xc = ((n * dm.c_in + c) * dm.d) * dm.h * dm.w;
                            let wk = ((k * dm.c_in + c) * dm.kd) * dm.kh * dm.kw;
                            for kd in 0..dm.kd {
                                let id = (od * sd + kd).wrapping_sub(pd);
                                if id >= dm.d {
                                    continue;
                                }
                                for kh in 0..dm.kh {
                                    let ih = (oh * sh + kh).wrapping_sub(ph);
                                    if ih >= dm.h {
                                        continue;
                                    }
                                    let xrow = xc + (id * dm.h + ih) * dm.w;
                                    let wrow = wk + (kd * dm.kh + kh) * dm.kw;
                                    for kw in 0..dm.kw {
                                        let iw = (ow_ * sw + kw).wrapping_sub(pw);
                                        if iw >= dm.w {
                                            continue;
                                        }
                                        acc += x[xrow + iw] * w[wrow + kw];
                                    }
                                }
                            }
                        }
                        out[oi] = acc;
                        oi += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dm: &Conv3dDims,
    gin: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let [sd, sh, sw] = dm.stride;
    let [pd, ph, pw] = dm.padding;
    let mut oi = 0;
    for n in 0..dm.n {
        for k in 0..dm.c_out {
            for od in 0..dm.od {
                for oh in 0..dm.oh {
                    for ow_ in 0..dm.ow {
                        let g = gout[oi];
                        oi += 1;
                        if g == 0.0 {
                            continue;
                        }
                        gb[k] += g;
                        for c in 0..dm.c_in {
                            let xc = ((n * dm.c_in + c) * dm.d) * dm.h * dm.w;
                            let wk = ((k * dm.c_in + c) * dm.kd) * dm.kh * dm.kw;
                            for kd in 0..dm.kd {
                                let id = (od * sd + kd).wrapping_sub(pd);
                                if id >= dm.d {
                                    continue;
                                }
                                for kh in 0..dm.kh {
                                    let ih = (oh * sh + kh).wrapping_sub(ph);
                                    if ih >= dm.h {
                                        continue;
                                    }
                                    let xrow = xc + (id * dm.h + ih) * dm.w;
                                    let wrow = wk + (kd * dm.kh + kh) * dm.kw;
                                    for kw in 0..dm.kw {
                                        let iw = (ow_ * sw + kw).wrapping_sub(pw);
                                        if iw >= dm.w {
                                            continue;
                                        }
                                        gin[xrow + iw] += w[wrow + kw] * g;
                                        gw[wrow + kw] += x[xrow + iw] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose3dDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvTranspose3dDims {
    pub fn check(
        input: &[usize],
        weight: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let [n, c, d, h, w] = five(input, "conv3d_transposed input")?;
        let [wc, k, kd, kh, kw] = five(weight, "conv3d_transposed weight")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv3d_transposed: input has {c} channels but weight expects {wc}"
            )));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Invalid("conv3d_transposed: stride must be >= 1".into()));
        }
        let ext = |i: usize, k: usize, ax: usize| -> Result<usize> {
            let full = (i - 1) * stride[ax] + k;
            if full < 2 * padding[ax] + 1 {
                return Err(Error::Shape(format!(
                    "conv3d_transposed: padding {} too large for extent {full} on axis {ax}",
                    padding[ax]
                )));
            }
            Ok(full - 2 * padding[ax])
        };
        Ok(ConvTranspose3dDims {
            n,
            c_in: c,
            c_out: k,
            d,
            h,
            w,
            kd,
            kh,
            kw,
            stride,
            padding,
            od: ext(d, kd, 0)?,
            oh: ext(h, kh, 1)?,
            ow: ext(w, kw, 2)?,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.od, self.oh, self.ow]
    }
}

pub fn conv3d_transposed_forward(x: &[f64], w: &[f64], dm: &ConvTranspose3dDims) -> Vec<f64> {
    let mut out = vec![0.0; dm.n * dm.c_out * dm.od * dm.oh * dm.ow];
    let [sd, sh, sw] = dm.stride;
    let [pd, ph, pw] = dm.padding;
    let mut xi = 0;
    for n in 0..dm.n {
        for c in 0..dm.c_in {
            for d in 0..dm.d {
                for h in 0..dm.h {
                    for w_ in 0..dm.w {
                        let xv = x[xi];
                        xi += 1;
                        if xv == 0.0 {
                            continue;
                        }
                        for k in 0..dm.c_out {
                            let oc = ((n * dm.c_out + k) * dm.od) * dm.oh * dm.ow;
                            let wk = ((c * dm.c_out + k) * dm.kd) * dm.kh * dm.kw;
                            for kd in 0..dm.kd {
                                let od = (d * sd + kd).wrapping_sub(pd);
                                if od >= dm.od {
                                    continue;
                                }
                                for kh in 0..dm.kh {
                                    let oh = (h * sh + kh).wrapping_sub(ph);
                                    if oh >= dm.oh {
                                        continue;
                                    }
                                    let orow = oc + (od * dm.oh + oh) * dm.ow;
                                    let wrow = wk + (kd * dm.kh + kh) * dm.kw;
                                    for kw in 0..dm.kw {
                                        let ow_ = (w_ * sw + kw).wrapping_sub(pw);
                                        if ow_ >= dm.ow {
                                            continue;
                                        }
                                        out[orow + ow_] += xv * w[wrow + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv3d_transposed_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    dm: &ConvTranspose3dDims,
    gin: &mut [f64],
    gw: &mut [f64],
) {
    let [sd, sh, sw] = dm.stride;
    let [pd, ph, pw] = dm.padding;
    let mut xi = 0;
    for n in 0..dm.n {
        for c in 0..dm.c_in {
            for d in 0..dm.d {
                for h in 0..dm.h {
                    for w_ in 0..dm.w {
                        let xv = x[xi];
                        let mut gx = 0.0;
                        for k in 0..dm.c_out {
                            let oc = ((n * dm.c_out + k) * dm.od) * dm.oh * dm.ow;
                            let wk = ((c * dm.c_out + k) * dm.kd) * dm.kh * dm.kw;
                            for kd in 0..dm.kd {
                                let od = (d * sd + kd).wrapping_sub(pd);
                                if od >= dm.od {
                                    continue;
                                }
                                for kh in 0..dm.kh {
                                    let oh = (h * sh + kh).wrapping_sub(ph);
                                    if oh >= dm.oh {
                                        continue;
                                    }
                                    let orow = oc + (od * dm.oh + oh) * dm.ow;
                                    let wrow = wk + (kd * dm.kh + kh) * dm.kw;
                                    for kw in 0..dm.kw {
                                        let ow_ = (w_ * sw + kw).wrapping_sub(pw);
                                        if ow_ >= dm.ow {
                                            continue;
                                        }
                                        let g = gout[orow + ow_];
                                        gx += w[wrow + kw] * g;
                                        gw[wrow + kw] += xv * g;
                                    }
                                }
                            }
                        }
                        gin[xi] += gx;
                        xi += 1;
                    }
                }
            }
        }
    }
}

fn five(shape: &[usize], what: &str) -> Result<[usize; 5]> {
    match shape {
        &[a, b, c, d, e] => Ok([a, b, c, d, e]),
        other => Err(Error::Shape(format!(
            "{what} must be rank 5, got shape {other:?}"
        ))),
    }
}
