//! Fused neural-network kernels with hand-written backward passes.

use crate::linalg::gemm;
use crate::tensor::Tensor;

fn last_dim(t: &Tensor) -> (usize, usize) {
    let v = *t.shape().last().expect("op needs at least 1-D input");
    (t.numel() / v.max(1), v)
}

impl Tensor {
    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let (rows, v) = last_dim(self);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * v..(r + 1) * v];
            let yr = &mut y[r * v..(r + 1) * v];
            let mx = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &xi) in yr.iter_mut().zip(xr) {
                *o = (xi - mx).exp();
                s += *o;
            }
            for o in yr.iter_mut() {
                *o /= s;
            }
        }
        let y = std::sync::Arc::new(y);
        let yv = y.clone();
        Tensor::from_op_arc(self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let yr = &yv[r * v..(r + 1) * v];
                let gr = &g[r * v..(r + 1) * v];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yi), &gi) in gx[r * v..(r + 1) * v].iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax_last(&self) -> Tensor {
        let (rows, v) = last_dim(self);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let xr = &x[r * v..(r + 1) * v];
            let mx = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xr.iter().map(|&xi| (xi - mx).exp()).sum::<f64>().ln();
            for (o, &xi) in y[r * v..(r + 1) * v].iter_mut().zip(xr) {
                *o = xi - lse;
            }
        }
        let y = std::sync::Arc::new(y);
        let yv = y.clone();
        Tensor::from_op_arc(self.shape().to_vec(), y, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g[r * v..(r + 1) * v];
                let gs: f64 = gr.iter().sum();
                for ((o, &yi), &gi) in gx[r * v..(r + 1) * v].iter_mut().zip(&yv[r * v..]).zip(gr) {
                    *o = gi - yi.exp() * gs;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (rows, v) = last_dim(self);
        assert_eq!(gamma.numel(), v, "layer_norm gamma size");
        assert_eq!(beta.numel(), v, "layer_norm beta size");
        let x = self.data();
        let (gm, bt) = (gamma.data(), beta.data());
        let mut y = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * v..(r + 1) * v];
            let mean = xr.iter().sum::<f64>() / v as f64;
            let var = xr.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / v as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..v {
                let h = (xr[i] - mean) * is;
                xhat[r * v + i] = h;
                y[r * v + i] = h * gm[i] + bt[i];
            }
        }
        let gv = gamma.data_arc();
        Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; g.len()]);
                let mut gg = needs[1].then(|| vec![0.0; v]);
                let mut gb = needs[2].then(|| vec![0.0; v]);
                for r in 0..rows {
                    let gr = &g[r * v..(r + 1) * v];
                    let hr = &xhat[r * v..(r + 1) * v];
                    if let Some(gg) = gg.as_mut() {
                        for i in 0..v {
                            gg[i] += gr[i] * hr[i];
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for i in 0..v {
                            gb[i] += gr[i];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..v {
                            let d = gr[i] * gv[i];
                            m1 += d;
                            m2 += d * hr[i];
                        }
                        m1 /= v as f64;
                        m2 /= v as f64;
                        for i in 0..v {
                            let d = gr[i] * gv[i];
                            gx[r * v + i] = inv_std[r] * (d - m1 - hr[i] * m2);
                        }
                    }
                }
                vec![gx, gg, gb]
            },
        )
    }
}

/// Geometry shared by convolution kernels.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow }
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image `[c, h, w]` into `[c*kh*kw, oh*ow]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < g.h && (jj as usize) < g.w {
                            x[(c * g.h + ii as usize) * g.w + jj as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into an image.
fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            x[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D convolution. `self` is `[b, c, h, w]`, `weight` is `[o, c, kh, kw]`,
    /// `bias` is `[o]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW");
        assert_eq!(weight.rank(), 4, "conv2d weight must be OCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch {:?} vs {:?}", self.shape(), weight.shape());
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, pad);
        let (kr, n) = (geom.col_rows(), geom.col_cols());
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; b * o * n];
        let mut cols_all = vec![0.0; b * kr * n];
        for bi in 0..b {
            let cols = &mut cols_all[bi * kr * n..(bi + 1) * kr * n];
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &geom, cols);
            gemm(o, kr, n, wd, false, cols, false, &mut out[bi * o * n..(bi + 1) * o * n], false);
        }
        if let Some(bias) = bias {
            let bd = bias.data();
            assert_eq!(bd.len(), o, "conv2d bias size");
            for bi in 0..b {
                for oc in 0..o {
                    let base = (bi * o + oc) * n;
                    out[base..base + n].iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let wv = weight.data_arc();
        let has_bias = bias.is_some();
        Tensor::from_op(vec![b, o, geom.oh, geom.ow], out, parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; b * c * h * w]);
            let mut gw = needs[1].then(|| vec![0.0; o * kr]);
            let mut dcols = vec![0.0; kr * n];
            for bi in 0..b {
                let gb = &g[bi * o * n..(bi + 1) * o * n];
                if let Some(gw) = gw.as_mut() {
                    gemm(o, n, kr, gb, false, &cols_all[bi * kr * n..], true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(kr, o, n, &wv, true, gb, false, &mut dcols, false);
                    col2im(&dcols, &geom, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut gbias = vec![0.0; o];
                    for bi in 0..b {
                        for (oc, gbv) in gbias.iter_mut().enumerate() {
                            let base = (bi * o + oc) * n;
                            *gbv += g[base..base + n].iter().sum::<f64>();
                        }
                    }
                    gbias
                }));
            }
            res
        })
    }

    /// Transposed 2-D convolution. `self` is `[b, cin, h, w]`, `weight` is
    /// `[cin, cout, kh, kw]`; output side is `(h-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "conv_transpose2d input must be NCHW");
        let (b, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (wcin, cout, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        // the output plays the role of a conv input with geometry `geom`
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad);
        assert_eq!((geom.oh, geom.ow), (h, w), "conv_transpose2d geometry");
        let (kr, n) = (geom.col_rows(), geom.col_cols());
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; b * cout * oh * ow];
        let mut cols = vec![0.0; kr * n];
        for bi in 0..b {
            // cols = Wᵀ (kr × cin) · x_b (cin × n)
            gemm(kr, cin, n, wd, true, &x[bi * cin * n..], false, &mut cols, false);
            col2im(&cols, &geom, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        if let Some(bias) = bias {
            let bd = bias.data();
            assert_eq!(bd.len(), cout, "conv_transpose2d bias size");
            let plane = oh * ow;
            for bi in 0..b {
                for oc in 0..cout {
                    let base = (bi * cout + oc) * plane;
                    out[base..base + plane].iter_mut().for_each(|v| *v += bd[oc]);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let (xv, wv) = (self.data_arc(), weight.data_arc());
        let has_bias = bias.is_some();
        Tensor::from_op(vec![b, cout, oh, ow], out, parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; b * cin * n]);
            let mut gw = needs[1].then(|| vec![0.0; cin * kr]);
            let mut gcols = vec![0.0; kr * n];
            let plane = oh * ow;
            for bi in 0..b {
                im2col(&g[bi * cout * plane..(bi + 1) * cout * plane], &geom, &mut gcols);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, kr, n, &wv, false, &gcols, false, &mut gx[bi * cin * n..(bi + 1) * cin * n], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, n, kr, &xv[bi * cin * n..], false, &gcols, true, gw, true);
                }
            }
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut gbias = vec![0.0; cout];
                    for bi in 0..b {
                        for (oc, gbv) in gbias.iter_mut().enumerate() {
                            let base = (bi * cout + oc) * plane;
                            *gbv += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    gbias
                }));
            }
            res
        })
    }

    /// Max pooling over `k×k` windows (padding counts as -inf).
    pub fn max_pool2d(&self, k: usize, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "max_pool2d input must be NCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let geom = ConvGeom::new(1, h, w, k, k, stride, pad);
        let (oh, ow) = (geom.oh, geom.ow);
        let x = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for ki in 0..k {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            let idx = ii as usize * w + jj as usize;
                            if src[idx] > best || at == usize::MAX {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * oh + oi) * ow + oj;
                    out[o] = best;
                    arg[o] = p * h * w + at;
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(vec![b, c, oh, ow], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (o, &a) in arg.iter().enumerate() {
                gx[a] += g[o];
            }
            vec![Some(gx)]
        })
    }

    /// Average pooling over `k×k` windows. With `count_pad` the divisor is
    /// always `k*k`; otherwise only in-bounds cells are counted.
    pub fn avg_pool2d(&self, k: usize, stride: usize, pad: usize, count_pad: bool) -> Tensor {
        assert_eq!(self.rank(), 4, "avg_pool2d input must be NCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let geom = ConvGeom::new(1, h, w, k, k, stride, pad);
        let (oh, ow) = (geom.oh, geom.ow);
        let x = self.data();
        let mut out = vec![0.0; b * c * oh * ow];
        // (window cells, divisor) per output position, shared across planes
        let mut windows: Vec<(Vec<usize>, f64)> = Vec::with_capacity(oh * ow);
        for oi in 0..oh {
            for oj in 0..ow {
                let mut cells = Vec::with_capacity(k * k);
                for ki in 0..k {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    for kj in 0..k {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            cells.push(ii as usize * w + jj as usize);
                        }
                    }
                }
                let div = if count_pad { (k * k) as f64 } else { cells.len() as f64 };
                windows.push((cells, div));
            }
        }
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (q, (cells, div)) in windows.iter().enumerate() {
                out[p * oh * ow + q] = cells.iter().map(|&i| src[i]).sum::<f64>() / div;
            }
        }
        let n = self.numel();
        Tensor::from_op(vec![b, c, oh, ow], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for p in 0..b * c {
                for (q, (cells, div)) in windows.iter().enumerate() {
                    let go = g[p * oh * ow + q] / div;
                    for &i in cells {
                        gx[p * h * w + i] += go;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
