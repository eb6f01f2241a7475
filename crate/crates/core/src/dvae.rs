//! Discrete VAE over non-overlapping K×K patches.
//!
//! The encoder is a stack of stride-matched convolutions, so each output
//! cell sees exactly one patch. The decoder mirrors it with transposed
//! convolutions starting from a V-channel code map.

use serde::{Deserialize, Serialize};
use slotgen_tensor::{Tensor, Vars};

use crate::config::{DvaeConfig, TemperatureSchedule};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Init};
use crate::rng::RandomSource;

/// Raster-order token sequence for one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid(pub Vec<usize>);

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab) {
            Some(t) => invalid(format!("token {t} outside vocabulary of {vocab}")),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Sample,
    Argmax,
}

/// Prime factors of the patch size; one stride-f convolution per factor.
pub fn stride_factors(mut k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut f = 2;
    while k > 1 {
        while k % f == 0 {
            out.push(f);
            k /= f;
        }
        f += 1;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Dvae {
    pub cfg: DvaeConfig,
    enc: Vec<Conv2d>,
    enc_mix: Conv2d,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mix: Conv2d,
    dec_up: Vec<ConvTranspose2d>,
    dec_out: Conv2d,
}

impl Dvae {
    pub fn new(init: &mut Init, cfg: &DvaeConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let factors = stride_factors(cfg.patch_size);
        let mut enc = Vec::new();
        let mut c_in = 3;
        for (i, &f) in factors.iter().enumerate() {
            enc.push(Conv2d::new(init, &format!("enc{i}"), c_in, c, f, f, 0));
            c_in = c;
        }
        let enc_mix = Conv2d::new(init, "enc_mix", c_in, c, 1, 1, 0);
        let enc_out = Conv2d::new(init, "enc_out", c, cfg.vocab_size, 1, 1, 0);
        let dec_in = Conv2d::new(init, "dec_in", cfg.vocab_size, c, 1, 1, 0);
        let dec_mix = Conv2d::new(init, "dec_mix", c, c, 1, 1, 0);
        let dec_up = factors
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &f)| ConvTranspose2d::new(init, &format!("dec_up{i}"), c, c, f, f, 0))
            .collect();
        let dec_out = Conv2d::new(init, "dec_out", c, 3, 1, 1, 0);
        Ok(Dvae {
            cfg: cfg.clone(),
            enc,
            enc_mix,
            enc_out,
            dec_in,
            dec_mix,
            dec_up,
            dec_out,
        })
    }

    /// `[B, 3, H, W]` → per-patch logits `[B, T, V]` in raster order.
    pub fn encode_logits(&self, v: &Vars, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return shape_err(format!("expected [B,3,H,W] images, got {s:?}"));
        }
        let size = self.cfg.image_size;
        if s[2] != size || s[3] != size {
            return shape_err(format!("image {}x{}, tokenizer expects {size}x{size}", s[2], s[3]));
        }
        let mut h = images.clone();
        for conv in &self.enc {
            h = conv.forward(v, &h).relu();
        }
        h = self.enc_mix.forward(v, &h).relu();
        let o = self.enc_out.forward(v, &h);
        let (b, vv, gh, gw) = (o.dim(0), o.dim(1), o.dim(2), o.dim(3));
        Ok(o.permute(&[0, 2, 3, 1]).reshape(&[b, gh * gw, vv]))
    }

    /// Unclamped decoder output for codes `[B, T, V]` on a `gh×gw` grid.
    /// Training uses this form so that saturated pixels keep a gradient.
    pub fn decode_raw(&self, v: &Vars, codes: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
        let s = codes.shape();
        if s.len() != 3 || s[1] != gh * gw || s[2] != self.cfg.vocab_size {
            return shape_err(format!(
                "codes {s:?} do not match a {gh}x{gw} grid over {} symbols",
                self.cfg.vocab_size
            ));
        }
        let b = s[0];
        let mut h = codes.reshape(&[b, gh, gw, s[2]]).permute(&[0, 3, 1, 2]);
        h = self.dec_in.forward(v, &h).relu();
        h = self.dec_mix.forward(v, &h).relu();
        for up in &self.dec_up {
            h = up.forward(v, &h).relu();
        }
        Ok(self.dec_out.forward(v, &h))
    }

    /// Decoded image `[B, 3, H, W]` with values clamped to [0, 1]. The grid
    /// is the configured one when T matches it, otherwise square.
    pub fn decode_patches(&self, v: &Vars, codes: &Tensor) -> Result<Tensor> {
        let t = codes.dim(1);
        let g = (t as f64).sqrt().round() as usize;
        if g * g != t {
            return shape_err(format!("{t} codes do not form a square grid"));
        }
        Ok(self.decode_raw(v, codes, g, g)?.clamp(0.0, 1.0))
    }
}

/// Relaxed one-hot codes `softmax((logits + g) / tau)`; `g` is Gumbel noise,
/// or zero when `rng` is `None`.
pub fn sample_relaxed(logits: &Tensor, tau: f64, rng: Option<&mut RandomSource>) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = match rng {
        Some(rng) => {
            let noise: Vec<f64> = (0..logits.numel()).map(|_| rng.gumbel()).collect();
            logits.add(&Tensor::from_vec(noise, logits.shape()))
        }
        None => logits.clone(),
    };
    Ok(perturbed.mul_scalar(1.0 / tau).softmax_last())
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Draws from `Categorical(softmax(row))` by inverse CDF.
pub fn sample_row(row: &[f64], rng: &mut RandomSource) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // rounding left u just above the final bucket
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// One token per row of `logits` (`[..., V]`), grouped per leading batch
/// entry when the tensor is `[B, T, V]`.
pub fn hard_tokens(logits: &Tensor, mode: TokenMode, rng: &mut RandomSource) -> Vec<TokenGrid> {
    let s = logits.shape();
    let v = s[s.len() - 1];
    let t = if s.len() >= 2 { s[s.len() - 2] } else { 1 };
    let flat: Vec<usize> = logits
        .data()
        .chunks(v)
        .map(|row| match mode {
            TokenMode::Argmax => argmax_row(row),
            TokenMode::Sample => sample_row(row, rng),
        })
        .collect();
    flat.chunks(t).map(|c| TokenGrid(c.to_vec())).collect()
}

/// `[B, T, V]` one-hot encoding.
pub fn one_hot(tokens: &[TokenGrid], vocab: usize) -> Result<Tensor> {
    let t = tokens.first().map(|g| g.len()).unwrap_or(0);
    let mut data = vec![0.0; tokens.len() * t * vocab];
    for (b, g) in tokens.iter().enumerate() {
        if g.len() != t {
            return shape_err("token grids of different lengths");
        }
        g.validate(vocab)?;
        for (i, &z) in g.0.iter().enumerate() {
            data[(b * t + i) * vocab + z] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, &[tokens.len(), t, vocab]))
}

/// Sum of squared pixel differences per image, averaged over the batch.
pub fn dvae_loss(images: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if images.shape() != recon.shape() || images.rank() == 0 {
        return shape_err(format!("loss between {:?} and {:?}", images.shape(), recon.shape()));
    }
    let b = images.dim(0) as f64;
    Ok(recon.sub(images).square().sum_all().mul_scalar(1.0 / b))
}

/// Linear decay from `start` to `end` over `steps`, constant afterwards.
pub fn temperature_at(step: u64, s: &TemperatureSchedule) -> f64 {
    if step >= s.steps {
        return s.end;
    }
    let frac = step as f64 / s.steps as f64;
    s.start + (s.end - s.start) * frac
}
