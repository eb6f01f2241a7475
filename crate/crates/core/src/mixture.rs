//! Pixel-mixture baseline: slot attention over CNN features, a spatial
//! broadcast decoder per slot, and per-pixel softmax compositing.

use slotgen_tensor::{no_grad, ParamStore, Tensor, Vars};

use crate::config::MixtureConfig;
use crate::error::{shape_err, Error, Result};
use crate::image::{batch_tensor, images_from_tensor, Image};
use crate::nn::{Conv2d, Init, LayerNorm, Linear, Mlp};
use crate::rng::RandomSource;
use crate::slot_attention::{SlotAttention, SlotSet};

pub const SECTIONS: &[&str] = &["mixture"];

const ENC_LAYERS: usize = 4;

#[derive(Clone, Debug)]
pub struct MixtureModel {
    pub cfg: MixtureConfig,
    pub store: ParamStore,
    enc: Vec<Conv2d>,
    enc_pos: Linear,
    enc_norm: LayerNorm,
    enc_mlp: Mlp,
    pub slot_attention: SlotAttention,
    dec_slot: Linear,
    dec_coord: Linear,
    dec_convs: Vec<Conv2d>,
}

/// Per-slot decoder outputs: `rgb` `[B, N, 3, H, W]` and mask logits
/// `[B, N, H, W]`.
pub struct Components {
    pub rgb: Tensor,
    pub mask_logits: Tensor,
}

pub struct MixtureOutput {
    pub recon: Tensor,
    /// Mixture weights `[B, N, H, W]`.
    pub weights: Tensor,
    pub components: Components,
    pub slots: SlotSet,
}

/// `[H*W, C]` coordinate features. With `four` the channels are
/// `(x, y, 1-x, 1-y)` in [0, 1], otherwise `(x, y)` in [-1, 1].
fn coord_grid(size: usize, four: bool) -> Tensor {
    let mut data = Vec::new();
    let lin = |i: usize| if size > 1 { i as f64 / (size - 1) as f64 } else { 0.5 };
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (lin(x), lin(y));
            if four {
                data.extend([fx, fy, 1.0 - fx, 1.0 - fy]);
            } else {
                data.extend([2.0 * fx - 1.0, 2.0 * fy - 1.0]);
            }
        }
    }
    let c = if four { 4 } else { 2 };
    Tensor::from_vec(data, &[size * size, c])
}

impl MixtureModel {
    pub fn new(cfg: &MixtureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RandomSource::seed(seed);
        let mut root = Init::new(&mut store, &mut rng, "mixture");
        let c = cfg.enc_channels;
        let enc = (0..ENC_LAYERS)
            .map(|i| Conv2d::new(&mut root, &format!("enc{i}"), if i == 0 { 3 } else { c }, c, 5, 1, 2))
            .collect();
        let enc_pos = Linear::new(&mut root, "enc_pos", 4, c, true);
        let enc_norm = LayerNorm::new(&mut root, "enc_norm", c);
        let enc_mlp = Mlp::new(&mut root, "enc_mlp", c, c, c);
        let slot_attention = SlotAttention::new(&mut root.sub("slot_attention"), &cfg.slots)?;
        let dc = cfg.dec_channels;
        let dec_slot = Linear::new(&mut root, "dec_slot", cfg.slots.slot_dim, dc, true);
        let dec_coord = Linear::new(&mut root, "dec_coord", 2, dc, false);
        let dec_convs = (0..cfg.dec_layers)
            .map(|i| {
                let out = if i + 1 == cfg.dec_layers { 4 } else { dc };
                Conv2d::new(&mut root, &format!("dec{i}"), dc, out, 3, 1, 1)
            })
            .collect();
        Ok(MixtureModel {
            cfg: cfg.clone(),
            store,
            enc,
            enc_pos,
            enc_norm,
            enc_mlp,
            slot_attention,
            dec_slot,
            dec_coord,
            dec_convs,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.cfg.slots.num_slots
    }

    pub fn slot_dim(&self) -> usize {
        self.cfg.slots.slot_dim
    }

    /// Encoder features `[B, H*W, C]`.
    pub fn features(&self, v: &Vars, images: &Tensor) -> Result<Tensor> {
        let s = self.cfg.image_size;
        if images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != s || images.dim(3) != s {
            return shape_err(format!("mixture model expects [B,3,{s},{s}], got {:?}", images.shape()));
        }
        let mut h = images.clone();
        for conv in &self.enc {
            h = conv.forward(v, &h).relu();
        }
        let (b, c) = (h.dim(0), h.dim(1));
        let flat = h.reshape(&[b, c, s * s]).permute(&[0, 2, 1]);
        let pos = self.enc_pos.forward(v, &coord_grid(s, true));
        let x = self.enc_norm.forward(v, &flat.add(&pos));
        Ok(self.enc_mlp.forward(v, &x))
    }

    /// Spatial broadcast decoding of slots `[B, N, D]`.
    pub fn broadcast_decode(&self, v: &Vars, slots: &Tensor) -> Components {
        let (b, n) = (slots.dim(0), slots.dim(1));
        let s = self.cfg.image_size;
        let dc = self.cfg.dec_channels;
        // first layer: 1x1 conv over [tiled slot ; coordinates] split into
        // a per-slot term and a per-pixel term
        let per_slot = self.dec_slot.forward(v, slots).reshape(&[b * n, 1, dc]);
        let per_pixel = self.dec_coord.forward(v, &coord_grid(s, false));
        let mut h = per_slot.add(&per_pixel).relu().permute(&[0, 2, 1]).reshape(&[b * n, dc, s, s]);
        for (i, conv) in self.dec_convs.iter().enumerate() {
            h = conv.forward(v, &h);
            if i + 1 < self.dec_convs.len() {
                h = h.relu();
            }
        }
        let rgb = h.narrow(1, 0, 3).reshape(&[b, n, 3, s, s]);
        let mask_logits = h.narrow(1, 3, 1).reshape(&[b, n, s, s]);
        Components { rgb, mask_logits }
    }

    pub fn forward(&self, v: &Vars, images: &Tensor, rng: &mut RandomSource) -> Result<MixtureOutput> {
        let feats = self.features(v, images)?;
        let slots = self.slot_attention.encode(v, &feats, rng)?;
        let components = self.broadcast_decode(v, &slots.slots);
        let (recon, weights) = compose(&components)?;
        Ok(MixtureOutput {
            recon,
            weights,
            components,
            slots,
        })
    }

    /// Per-image sum of squared errors, averaged over the batch.
    pub fn loss(&self, v: &Vars, images: &Tensor, rng: &mut RandomSource) -> Result<(Tensor, MixtureOutput)> {
        let out = self.forward(v, images, rng)?;
        let loss = out
            .recon
            .sub(images)
            .square()
            .sum_all()
            .mul_scalar(1.0 / images.dim(0) as f64);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite(format!("mixture loss {}", loss.item())));
        }
        Ok((loss, out))
    }

    pub fn encode_images(&self, images: &[Image], rng: &mut RandomSource) -> Result<SlotSet> {
        let x = batch_tensor(images)?;
        let v = self.store.bind_frozen();
        no_grad(|| {
            let feats = self.features(&v, &x)?;
            self.slot_attention.encode(&v, &feats, rng)
        })
    }

    /// Composited images from slot prompts.
    pub fn render(&self, prompts: &[Vec<Vec<f64>>]) -> Result<Vec<Image>> {
        let (n, d) = (self.num_slots(), self.slot_dim());
        let mut data = Vec::new();
        for p in prompts {
            if p.len() != n || p.iter().any(|s| s.len() != d) {
                return shape_err(format!("prompt must hold {n} slots of width {d}"));
            }
            data.extend(p.iter().flatten());
        }
        let slots = Tensor::from_vec(data, &[prompts.len(), n, d]);
        let v = self.store.bind_frozen();
        no_grad(|| {
            let (recon, _) = compose(&self.broadcast_decode(&v, &slots))?;
            Ok(images_from_tensor(&recon))
        })
    }

    pub fn reconstruct(&self, images: &[Image], rng: &mut RandomSource) -> Result<Vec<Image>> {
        let x = batch_tensor(images)?;
        let v = self.store.bind_frozen();
        no_grad(|| Ok(images_from_tensor(&self.forward(&v, &x, rng)?.recon)))
    }
}

/// Softmax over slots of the mask logits, then the weighted sum of the
/// per-slot RGB maps. Returns the image `[B, 3, H, W]` and the weights
/// `[B, N, H, W]`.
pub fn compose(c: &Components) -> Result<(Tensor, Tensor)> {
    let s = c.rgb.shape();
    if s.len() != 5 || s[2] != 3 || c.mask_logits.shape() != [s[0], s[1], s[3], s[4]] {
        return shape_err(format!("components rgb {s:?} / masks {:?}", c.mask_logits.shape()));
    }
    let (b, n, h, w) = (s[0], s[1], s[3], s[4]);
    let weights = c
        .mask_logits
        .reshape(&[b, n, h * w])
        .permute(&[0, 2, 1])
        .softmax_last()
        .permute(&[0, 2, 1]);
    let rgb = c.rgb.reshape(&[b, n, 3, h * w]);
    let mixed = rgb.mul(&weights.reshape(&[b, n, 1, h * w])).sum_axis(1, false);
    Ok((mixed.reshape(&[b, 3, h, w]), weights.reshape(&[b, n, h, w])))
}
