//! Numeric kernels behind the tape primitives.
//!
//! Parallelism is over disjoint output slices only (batch for forward and
//! input-grad, filter for kernel-grad), so every element is produced by one
//! sequential loop and results do not depend on the thread count.

use crate::scalar::Scalar;
use rayon::prelude::*;

#[derive(Clone, Copy)]
pub struct ConvGeo {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Valid output-column range for kernel column `kx`: every ox with
/// 0 <= ox*stride + kx - padding < w. Returns (ox_lo, ox_hi).
fn ox_range(g: &ConvGeo, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.padding as isize;
    let lo = if off < 0 { ((-off) as usize).div_ceil(g.stride) } else { 0 };
    let hi_excl = (g.w as isize - off + g.stride as isize - 1) / g.stride as isize;
    let hi = hi_excl.clamp(0, g.ow as isize) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d_forward<S: Scalar>(x: &[S], k: &[S], g: &ConvGeo) -> Vec<S> {
    let g = *g;
    let mut out = vec![S::zero(); g.n * g.f * g.oh * g.ow];
    out.par_chunks_mut(g.f * g.oh * g.ow).enumerate().for_each(|(i, oslice)| {
        let xi = &x[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
        for fo in 0..g.f {
            let kf = &k[fo * g.c * g.kh * g.kw..(fo + 1) * g.c * g.kh * g.kw];
            let out_f = &mut oslice[fo * g.oh * g.ow..(fo + 1) * g.oh * g.ow];
            for ci in 0..g.c {
                let xc = &xi[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kval = kf[(ci * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = ox_range(&g, kx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let xoff = kx as isize - g.padding as isize;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                            let orow = &mut out_f[oy * g.ow..(oy + 1) * g.ow];
                            if g.stride == 1 {
                                let xs = (ox0 as isize + xoff) as usize;
                                let xr = &xrow[xs..xs + (ox1 - ox0)];
                                for (o, &xv) in orow[ox0..ox1].iter_mut().zip(xr) {
                                    *o += kval * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = (ox * g.stride) as isize + xoff;
                                    orow[ox] += kval * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input<S: Scalar>(gout: &[S], k: &[S], g: &ConvGeo) -> Vec<S> {
    let g = *g;
    let mut dx = vec![S::zero(); g.n * g.c * g.h * g.w];
    dx.par_chunks_mut(g.c * g.h * g.w).enumerate().for_each(|(i, dxi)| {
        let gi = &gout[i * g.f * g.oh * g.ow..(i + 1) * g.f * g.oh * g.ow];
        for fo in 0..g.f {
            let kf = &k[fo * g.c * g.kh * g.kw..(fo + 1) * g.c * g.kh * g.kw];
            let gf = &gi[fo * g.oh * g.ow..(fo + 1) * g.oh * g.ow];
            for ci in 0..g.c {
                let dxc = &mut dxi[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kval = kf[(ci * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = ox_range(&g, kx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let xoff = kx as isize - g.padding as isize;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let grow = &gf[oy * g.ow..(oy + 1) * g.ow];
                            let dxrow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                            if g.stride == 1 {
                                let xs = (ox0 as isize + xoff) as usize;
                                for (d, &gv) in
                                    dxrow[xs..xs + (ox1 - ox0)].iter_mut().zip(&grow[ox0..ox1])
                                {
                                    *d += kval * gv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = (ox * g.stride) as isize + xoff;
                                    dxrow[ix as usize] += kval * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_backward_kernel<S: Scalar>(gout: &[S], x: &[S], g: &ConvGeo) -> Vec<S> {
    let g = *g;
    let mut dk = vec![S::zero(); g.f * g.c * g.kh * g.kw];
    dk.par_chunks_mut(g.c * g.kh * g.kw).enumerate().for_each(|(fo, dkf)| {
        for i in 0..g.n {
            let xi = &x[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
            let gf = &gout
                [(i * g.f + fo) * g.oh * g.ow..(i * g.f + fo + 1) * g.oh * g.ow];
            for ci in 0..g.c {
                let xc = &xi[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (ox0, ox1) = ox_range(&g, kx);
                        if ox1 <= ox0 {
                            continue;
                        }
                        let xoff = kx as isize - g.padding as isize;
                        let mut acc = S::zero();
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let grow = &gf[oy * g.ow..(oy + 1) * g.ow];
                            let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                            if g.stride == 1 {
                                let xs = (ox0 as isize + xoff) as usize;
                                for (&gv, &xv) in
                                    grow[ox0..ox1].iter().zip(&xrow[xs..xs + (ox1 - ox0)])
                                {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = (ox * g.stride) as isize + xoff;
                                    acc += grow[ox] * xrow[ix as usize];
                                }
                            }
                        }
                        dkf[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dk
}

#[derive(Clone, Copy)]
pub struct PoolGeo {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

fn window(oy: usize, ox: usize, g: &PoolGeo) -> (usize, usize, usize, usize, usize) {
    let y0 = (oy * g.stride) as isize - 1;
    let x0 = (ox * g.stride) as isize - 1;
    let ylo = y0.max(0) as usize;
    let yhi = ((y0 + 3).min(g.h as isize)) as usize;
    let xlo = x0.max(0) as usize;
    let xhi = ((x0 + 3).min(g.w as isize)) as usize;
    let count = (yhi - ylo) * (xhi - xlo);
    (ylo, yhi, xlo, xhi, count)
}

pub fn avg_pool3x3_forward<S: Scalar>(x: &[S], g: &PoolGeo) -> Vec<S> {
    let g = *g;
    let mut out = vec![S::zero(); g.n * g.c * g.oh * g.ow];
    out.par_chunks_mut(g.c * g.oh * g.ow).enumerate().for_each(|(i, oslice)| {
        let xi = &x[i * g.c * g.h * g.w..(i + 1) * g.c * g.h * g.w];
        for ci in 0..g.c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let (ylo, yhi, xlo, xhi, count) = window(oy, ox, &g);
                    let mut acc = S::zero();
                    for iy in ylo..yhi {
                        for ix in xlo..xhi {
                            acc += xi[(ci * g.h + iy) * g.w + ix];
                        }
                    }
                    oslice[(ci * g.oh + oy) * g.ow + ox] = acc / S::from_f64(count as f64);
                }
            }
        }
    });
    out
}

pub fn avg_pool3x3_backward<S: Scalar>(gout: &[S], g: &PoolGeo) -> Vec<S> {
    let g = *g;
    let mut dx = vec![S::zero(); g.n * g.c * g.h * g.w];
    dx.par_chunks_mut(g.c * g.h * g.w).enumerate().for_each(|(i, dxi)| {
        let gi = &gout[i * g.c * g.oh * g.ow..(i + 1) * g.c * g.oh * g.ow];
        for ci in 0..g.c {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let (ylo, yhi, xlo, xhi, count) = window(oy, ox, &g);
                    let gv = gi[(ci * g.oh + oy) * g.ow + ox] / S::from_f64(count as f64);
                    for iy in ylo..yhi {
                        for ix in xlo..xhi {
                            dxi[(ci * g.h + iy) * g.w + ix] += gv;
                        }
                    }
                }
            }
        }
    });
    dx
}
