//! Raw forward/backward loops over flat row-major buffers.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += dot(grow, brow);
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_b(g: &[f64], a: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in dbrow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Valid output range along one axis for kernel tap `t` with "same" padding.
    fn range(&self, t: usize, len: usize) -> (usize, usize) {
        let pad = self.k / 2;
        let lo = pad.saturating_sub(t);
        let hi = (len + pad).saturating_sub(t).min(len);
        (lo, hi)
    }
}

/// Grouped cross-correlation with zero "same" padding.
pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let pad = g.k / 2;
    let mut out = vec![0.0; g.c_out * hw];
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    for oc in 0..g.c_out {
        let group = oc / cout_g;
        let dst = &mut out[oc * hw..(oc + 1) * hw];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[oc]);
        }
        for icl in 0..cin_g {
            let ic = group * cin_g + icl;
            let src = &x[ic * hw..(ic + 1) * hw];
            for ky in 0..g.k {
                let (ylo, yhi) = g.range(ky, g.h);
                for kx in 0..g.k {
                    let wv = weight[((oc * cin_g + icl) * g.k + ky) * g.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = g.range(kx, g.w);
                    for y in ylo..yhi {
                        let sy = y + ky - pad;
                        let drow = &mut dst[y * g.w + xlo..y * g.w + xhi];
                        let srow = &src[sy * g.w + xlo + kx - pad..sy * g.w + xhi + kx - pad];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients for input, weight and bias of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad: &[f64],
    g: ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    let pad = g.k / 2;
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    if let Some(db) = db {
        for oc in 0..g.c_out {
            db[oc] += grad[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
        }
    }
    for oc in 0..g.c_out {
        let group = oc / cout_g;
        let gsrc = &grad[oc * hw..(oc + 1) * hw];
        for icl in 0..cin_g {
            let ic = group * cin_g + icl;
            for ky in 0..g.k {
                let (ylo, yhi) = g.range(ky, g.h);
                for kx in 0..g.k {
                    let widx = ((oc * cin_g + icl) * g.k + ky) * g.k + kx;
                    let (xlo, xhi) = g.range(kx, g.w);
                    if let Some(dw) = dw.as_deref_mut() {
                        let xs = &x[ic * hw..(ic + 1) * hw];
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let sy = y + ky - pad;
                            acc += dot(
                                &gsrc[y * g.w + xlo..y * g.w + xhi],
                                &xs[sy * g.w + xlo + kx - pad..sy * g.w + xhi + kx - pad],
                            );
                        }
                        dw[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = weight[widx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dxs = &mut dx[ic * hw..(ic + 1) * hw];
                        for y in ylo..yhi {
                            let sy = y + ky - pad;
                            let drow = &mut dxs[sy * g.w + xlo + kx - pad..sy * g.w + xhi + kx - pad];
                            let grow = &gsrc[y * g.w + xlo..y * g.w + xhi];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn avg_pool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * xx;
                out[(ci * oh + y) * ow + xx] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(g: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let gv = 0.25 * g[(ci * oh + y) * ow + xx];
                let base = ci * h * w + 2 * y * w + 2 * xx;
                dx[base] += gv;
                dx[base + 1] += gv;
                dx[base + w] += gv;
                dx[base + w + 1] += gv;
            }
        }
    }
}

/// Source taps `(i0, i1, frac)` for each output coordinate, align-corners = false.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out[(ci * oh + y) * ow + xx] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn resize_backward(g: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) {
    if oh == h && ow == w {
        for (d, gv) in dx.iter_mut().zip(g) {
            *d += gv;
        }
        return;
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = g[(ci * oh + y) * ow + xx];
                dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                dst[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the input flat index under axis permutation `perm`.
pub(crate) fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        idx.push(src);
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}
