//! Raw loops behind the tape ops. Nothing here records gradients.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_a_bt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    n: usize,
    k: usize,
) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
pub(crate) fn gemm_at_b_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output side `floor((in + 2p - k) / s) + 1`, or `None` if it would be < 1.
    pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<'a, T: Scalar>(img: &'a [T], g: &ConvGeom) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(img);
    }
    let p = g.positions();
    let mut col = vec![T::zero(); g.patch() * p];
    for ci in 0..g.c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(col)
}

fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    if g.is_pointwise() {
        for (d, &s) in img.iter_mut().zip(col) {
            *d += s;
        }
        return;
    }
    let p = g.positions();
    for ci in 0..g.c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation, `x[b,c,h,w] ⋆ w[oc,c,kh,kw] (+ bias[oc])`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.positions();
    let in_sz = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.b * g.oc * p];
    out.par_chunks_mut(g.oc * p)
        .zip(x.par_chunks(in_sz))
        .for_each(|(o, img)| {
            if let Some(bias) = bias {
                for (oc, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bias[oc]);
                }
            }
            let col = im2col(img, g);
            gemm_acc(w, &col, o, g.oc, g.patch(), p);
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_dbias: bool,
) -> ConvGrads<T> {
    let p = g.positions();
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.oc * p;
    let patch = g.patch();

    // (dweight, dbias) contributions of each image.
    type Partial<T> = (Option<Vec<T>>, Option<Vec<T>>);
    let per_image: Vec<Partial<T>> = x
        .par_chunks(in_sz)
        .zip(gout.par_chunks(out_sz))
        .map(|(img, go)| {
            let dw = need_dw.then(|| {
                let col = im2col(img, g);
                let mut dw = vec![T::zero(); g.oc * patch];
                gemm_a_bt_acc(go, &col, &mut dw, g.oc, p, patch);
                dw
            });
            let dx = need_dx.then(|| {
                let mut dcol = vec![T::zero(); patch * p];
                gemm_at_b_acc(w, go, &mut dcol, g.oc, patch, p);
                let mut dx = vec![T::zero(); in_sz];
                col2im_acc(&dcol, g, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(g.b * in_sz);
        for (d, _) in &per_image {
            dx.extend_from_slice(d.as_ref().expect("dx computed"));
        }
        dx
    });
    // Summed in batch order so results do not depend on thread scheduling.
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); g.oc * patch];
        for (_, d) in &per_image {
            for (acc, &v) in dw.iter_mut().zip(d.as_ref().expect("dw computed")) {
                *acc += v;
            }
        }
        dw
    });
    let dbias = need_dbias.then(|| {
        let mut db = vec![T::zero(); g.oc];
        for go in gout.chunks(out_sz) {
            for (oc, row) in go.chunks(p).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, dbias }
}

/// Non-overlapping `k×k` average pooling; trailing rows/cols that do not fill a window are dropped.
pub(crate) fn avg_pool_forward<T: Scalar>(
    x: &[T],
    bc: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut out = vec![T::zero(); bc * oh * ow];
    for plane in 0..bc {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = s * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    gout: &[T],
    bc: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::of((k * k) as f64);
    let mut dx = vec![T::zero(); bc * h * w];
    for plane in 0..bc {
        let src = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * norm;
                for dy in 0..k {
                    for dxx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dxx] = v;
                    }
                }
            }
        }
    }
    dx
}
