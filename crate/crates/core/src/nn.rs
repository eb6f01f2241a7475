//! Parameterized layers on top of the tensor engine.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound to tensors once per forward pass via [`Vars`].

use slotgen_tensor::{ParamId, ParamStore, Tensor, Vars};

use crate::rng::RandomSource;

/// Registers named parameters under a dotted prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut RandomSource,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut RandomSource, prefix: &str) -> Self {
        Init {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = self.join(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn join(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        let full = self.join(name);
        self.store.add(full, shape, data)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.range_f64(-bound, bound)).collect();
        self.param(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        self.param(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.param(name, shape, vec![v; shape.iter().product()])
    }
}

/// Per-call forward state: dropout switch and the RNG that feeds it.
pub struct Fwd<'a> {
    pub training: bool,
    pub rng: &'a mut RandomSource,
}

impl<'a> Fwd<'a> {
    pub fn eval(rng: &'a mut RandomSource) -> Self {
        Fwd { training: false, rng }
    }

    pub fn train(rng: &'a mut RandomSource) -> Self {
        Fwd { training: true, rng }
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Tensor {
        if !self.training || p <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if self.rng.uniform() < p { 0.0 } else { keep })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let mut s = init.sub(name);
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = s.uniform("weight", &[d_in, d_out], bound);
        let b = bias.then(|| s.constant("bias", &[d_out], 0.0));
        Linear { w, b, d_in, d_out }
    }

    /// `x` is `[..., d_in]` with rank ≥ 2.
    pub fn forward(&self, v: &Vars, x: &Tensor) -> Tensor {
        let y = x.matmul(&v[self.w]);
        match self.b {
            Some(b) => y.add(&v[b]),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        let mut s = init.sub(name);
        LayerNorm {
            gamma: s.constant("gamma", &[dim], 1.0),
            beta: s.constant("beta", &[dim], 0.0),
        }
    }

    pub fn forward(&self, v: &Vars, x: &Tensor) -> Tensor {
        x.layer_norm(&v[self.gamma], &v[self.beta], Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let mut s = init.sub(name);
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Conv2d {
            w: s.uniform("weight", &[c_out, c_in, k, k], bound),
            b: s.constant("bias", &[c_out], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, v: &Vars, x: &Tensor) -> Tensor {
        x.conv2d(&v[self.w], Some(&v[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let mut s = init.sub(name);
        // each output pixel receives (k/stride)² taps per input channel
        let taps = (k * k / (stride * stride)).max(1);
        let bound = (6.0 / (c_in * taps) as f64).sqrt();
        ConvTranspose2d {
            w: s.uniform("weight", &[c_in, c_out, k, k], bound),
            b: s.constant("bias", &[c_out], 0.0),
            stride,
            pad,
        }
    }

    pub fn forward(&self, v: &Vars, x: &Tensor) -> Tensor {
        x.conv_transpose2d(&v[self.w], Some(&v[self.b]), self.stride, self.pad)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        let mut s = init.sub(name);
        Mlp {
            l1: Linear::new(&mut s, "fc1", d_in, hidden, true),
            l2: Linear::new(&mut s, "fc2", hidden, d_out, true),
        }
    }

    pub fn forward(&self, v: &Vars, x: &Tensor) -> Tensor {
        self.l2.forward(v, &self.l1.forward(v, x).relu())
    }
}

/// Gated recurrent unit cell (reset gate applied after the hidden
/// projection).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub ih: Linear,
    pub hh: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new(init: &mut Init, name: &str, d_in: usize, dim: usize) -> Self {
        let mut s = init.sub(name);
        GruCell {
            ih: Linear::new(&mut s, "ih", d_in, 3 * dim, true),
            hh: Linear::new(&mut s, "hh", dim, 3 * dim, true),
            dim,
        }
    }

    /// `x`: `[B, d_in]`, `h`: `[B, dim]` → `[B, dim]`.
    pub fn forward(&self, v: &Vars, x: &Tensor, h: &Tensor) -> Tensor {
        let d = self.dim;
        let gi = self.ih.forward(v, x);
        let gh = self.hh.forward(v, h);
        let r = gi.narrow(1, 0, d).add(&gh.narrow(1, 0, d)).sigmoid();
        let z = gi.narrow(1, d, d).add(&gh.narrow(1, d, d)).sigmoid();
        let n = gi.narrow(1, 2 * d, d).add(&r.mul(&gh.narrow(1, 2 * d, d))).tanh();
        // (1 - z) * n + z * h  ==  n + z * (h - n)
        n.add(&z.mul(&h.sub(&n)))
    }
}

/// `[B, L, H*dh]` → `[B, H, L, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, l, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// `[B, H, L, dh]` → `[B, L, H*dh]`.
pub fn merge_heads(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (b, h, l, dh) = (s[0], s[1], s[2], s[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[b, l, h * dh])
}

/// Scaled dot-product attention over `[B, H, L, dh]` tensors. `mask` is
/// added to the scaled scores and broadcasts against `[B, H, Lq, Lk]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>, dropout: f64, fwd: &mut Fwd) -> Tensor {
    let dh = q.dim(q.rank() - 1);
    let mut scores = q.matmul_nt(k).mul_scalar(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m);
    }
    let probs = fwd.dropout(&scores.softmax_last(), dropout);
    probs.matmul(v)
}

/// Additive causal mask `[L, L]`: 0 on and below the diagonal, -inf above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            m[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_vec(m, &[len, len])
}

/// Parameter names in `store` starting with `prefix.`.
pub fn params_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    let p = format!("{prefix}.");
    store
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.name.starts_with(&p))
        .map(|(i, _)| ParamId(i))
        .collect()
}
