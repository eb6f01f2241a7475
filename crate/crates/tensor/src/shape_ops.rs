//! Reductions, reshapes, permutes, slicing, concatenation and gathers.

use crate::elementwise::for_each_broadcast;
use crate::tensor::{numel_of, Tensor};

/// Splits `shape` around `axis` into (outer, n, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &x[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    gx[(o * n + k) * inner..(o * n + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    /// Shares storage; the element count must not change.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op_arc(shape.to_vec(), self.data_arc(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// General axis permutation (copies).
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let nd = self.rank();
        assert_eq!(perm.len(), nd, "permute rank mismatch");
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        // stride in the input for each output axis
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let gather = permute_index(&out_shape, &src_strides);
        let x = self.data();
        let out: Vec<f64> = gather.iter().map(|&i| x[i]).collect();
        let n = self.numel();
        Tensor::from_op(out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (o, &i) in gather.iter().enumerate() {
                gx[i] = g[o];
            }
            vec![Some(gx)]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Tensor {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, n, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= n, "narrow out of range");
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                gx[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "cat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "cat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
        }
        let outer = numel_of(&first[..axis]);
        let inner = numel_of(&first[axis + 1..]);
        let sizes: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &s) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Tensor::from_op(shape, out, parts.to_vec(), move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = sizes
                .iter()
                .zip(needs)
                .map(|(&s, &need)| need.then(|| Vec::with_capacity(outer * s * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &s) in grads.iter_mut().zip(&sizes) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g[off..off + s * inner]);
                    }
                    off += s * inner;
                }
            }
            grads
        })
    }

    pub fn stack(parts: &[Tensor], axis: usize) -> Tensor {
        let expanded: Vec<Tensor> = parts
            .iter()
            .map(|p| {
                let mut s = p.shape().to_vec();
                s.insert(axis, 1);
                p.reshape(&s)
            })
            .collect();
        Tensor::cat(&expanded, axis)
    }

    /// Explicit broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let x = self.data();
        let mut out = vec![0.0; numel_of(shape)];
        for_each_broadcast(shape, self.shape(), self.shape(), |o, i, _| out[o] = x[i]);
        let (os, is) = (shape.to_vec(), self.shape().to_vec());
        let n = self.numel();
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for_each_broadcast(&os, &is, &is, |o, i, _| gx[i] += g[o]);
            vec![Some(gx)]
        })
    }

    /// Row lookup on a 2-D table: `out[i] = self[idx[i]]`.
    pub fn index_select_rows(&self, idx: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "index_select_rows needs a 2-D table");
        let (rows, cols) = (self.dim(0), self.dim(1));
        let x = self.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            assert!(r < rows, "row index {r} out of range {rows}");
            out.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        }
        let idx = idx.to_vec();
        Tensor::from_op(vec![idx.len(), cols], out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; rows * cols];
            for (i, &r) in idx.iter().enumerate() {
                gx[r * cols..(r + 1) * cols]
                    .iter_mut()
                    .zip(&g[i * cols..(i + 1) * cols])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        })
    }

    /// Picks one entry per row along the last axis.
    pub fn gather_last(&self, idx: &[usize]) -> Tensor {
        let v = *self.shape().last().expect("gather_last on scalar");
        let rows = self.numel() / v;
        assert_eq!(idx.len(), rows, "gather_last index count");
        let x = self.data();
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| {
                assert!(i < v, "gather index {i} out of range {v}");
                x[r * v + i]
            })
            .collect();
        let shape = self.shape()[..self.rank() - 1].to_vec();
        let idx = idx.to_vec();
        Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; rows * v];
            for (r, &i) in idx.iter().enumerate() {
                gx[r * v + i] = g[r];
            }
            vec![Some(gx)]
        })
    }
}

/// Linear source offsets for a strided walk over `shape`.
fn permute_index(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = numel_of(shape);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let nd = shape.len();
    if nd == 0 {
        out.push(0);
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let inner = shape[nd - 1];
    let is = strides[nd - 1];
    for _ in 0..total / inner {
        for j in 0..inner {
            out.push(off + j * is);
        }
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}
