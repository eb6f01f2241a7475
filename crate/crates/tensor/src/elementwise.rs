//! Broadcasting binary ops and pointwise unary ops.

use crate::tensor::{numel_of, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast {a:?} with {b:?}"),
        };
    }
    out
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching input offsets.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel_of(out);
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let outer = total / inner;
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia, ob + j * ib);
        }
        // advance the multi-index over the leading axes
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    let out_shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        broadcast_shape(a.shape(), b.shape())
    };
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0; numel_of(&out_shape)];
    let apply = |x: f64, y: f64| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    if a.shape() == b.shape() {
        for ((o, &x), &y) in data.iter_mut().zip(ad).zip(bd) {
            *o = apply(x, y);
        }
    } else {
        for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, i, j| {
            data[o] = apply(ad[i], bd[j]);
        });
    }
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let (av, bv) = (a.data_arc(), b.data_arc());
    let os = out_shape.clone();
    Tensor::from_op(out_shape, data, vec![a.clone(), b.clone()], move |g, needs| {
        let mut ga = needs[0].then(|| vec![0.0; av.len()]);
        let mut gb = needs[1].then(|| vec![0.0; bv.len()]);
        for_each_broadcast(&os, &sa, &sb, |o, i, j| {
            let go = g[o];
            let (x, y) = (av[i], bv[j]);
            let (da, db) = match op {
                BinOp::Add => (go, go),
                BinOp::Sub => (go, -go),
                BinOp::Mul => (go * y, go * x),
                BinOp::Div => (go / y, -go * x / (y * y)),
            };
            if let Some(ga) = ga.as_mut() {
                ga[i] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[j] += db;
            }
        });
        vec![ga, gb]
    })
}

/// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
pub(crate) fn unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xv = x.data_arc();
    let out = std::sync::Arc::new(data);
    let yv = out.clone();
    Tensor::from_op_arc(x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
        let gx = g
            .iter()
            .zip(xv.iter().zip(yv.iter()))
            .map(|(&go, (&xi, &yi))| go * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tensor {
    pub fn add(&self, o: &Tensor) -> Tensor {
        binary(self, o, BinOp::Add)
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        binary(self, o, BinOp::Sub)
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        binary(self, o, BinOp::Mul)
    }

    pub fn div(&self, o: &Tensor) -> Tensor {
        binary(self, o, BinOp::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary(self, |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    /// Clamp with a pass-through gradient inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }
}
