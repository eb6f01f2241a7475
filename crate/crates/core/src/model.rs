//! The full slot-to-sequence model: DVAE tokenizer, token embeddings, slot
//! encoder and autoregressive decoder in one parameter store.
//!
//! Parameter names are prefixed by section: `dvae.`, `embed.`,
//! `slot_attention.` and `decoder.`.

use slotgen_tensor::{no_grad, ParamStore, Tensor, Vars};

use crate::config::Slot2SeqConfig;
use crate::decoder::{ce_loss, Sampling, Slot2SeqDecoder};
use crate::dvae::{dvae_loss, hard_tokens, one_hot, sample_relaxed, Dvae, TokenGrid, TokenMode};
use crate::error::{shape_err, Error, Result};
use crate::image::{batch_tensor, images_from_tensor, Image};
use crate::nn::{Fwd, Init};
use crate::rng::RandomSource;
use crate::slot_attention::{EmbeddingTable, SlotAttention, SlotSet};

pub const SECTIONS: &[&str] = &["dvae", "embed", "slot_attention", "decoder"];

#[derive(Clone, Debug)]
pub struct Slot2Seq {
    pub cfg: Slot2SeqConfig,
    pub store: ParamStore,
    pub dvae: Dvae,
    pub embed: EmbeddingTable,
    pub slot_attention: SlotAttention,
    pub decoder: Slot2SeqDecoder,
}

/// Loss terms of one batch plus the intermediate results they came from.
pub struct LossParts {
    pub total: Tensor,
    pub st: Tensor,
    pub dvae: Tensor,
    pub tokens: Vec<TokenGrid>,
    pub slots: SlotSet,
}

impl Slot2Seq {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &Slot2SeqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = RandomSource::seed(seed);
        let mut root = Init::new(&mut store, &mut rng, "");
        let dvae = Dvae::new(&mut root.sub("dvae"), &cfg.dvae)?;
        let d = cfg.decoder.hidden_dim;
        let embed = EmbeddingTable::new(&mut root.sub("embed"), cfg.dvae.vocab_size, cfg.dvae.num_tokens(), d);
        let slot_attention = SlotAttention::new(&mut root.sub("slot_attention"), &cfg.slots)?;
        let decoder = Slot2SeqDecoder::new(
            &mut root.sub("decoder"),
            &cfg.decoder,
            cfg.slots.slot_dim,
            cfg.dvae.vocab_size,
            cfg.dvae.num_tokens(),
        )?;
        Ok(Slot2Seq {
            cfg: cfg.clone(),
            store,
            dvae,
            embed,
            slot_attention,
            decoder,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.cfg.slots.num_slots
    }

    pub fn slot_dim(&self) -> usize {
        self.cfg.slots.slot_dim
    }

    pub fn image_size(&self) -> usize {
        self.cfg.dvae.image_size
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.cfg.dvae.image_size;
        if images.rank() != 4 || images.dim(2) != s || images.dim(3) != s {
            return shape_err(format!("model expects [B,3,{s},{s}] images, got {:?}", images.shape()));
        }
        Ok(())
    }

    /// `st_weight * L_ST + L_DVAE` for a batch `[B, 3, H, W]`. Tokens that
    /// enter the embedding table are integers, so no gradient from `L_ST`
    /// reaches the DVAE. With `fwd.training` the relaxed codes get Gumbel
    /// noise, tokens are sampled and dropout is active; otherwise
    /// everything except slot initialization is deterministic.
    pub fn total_loss(&self, v: &Vars, images: &Tensor, tau: f64, st_weight: f64, fwd: &mut Fwd) -> Result<LossParts> {
        self.check_images(images)?;
        let g = self.cfg.dvae.grid();
        let logits = self.dvae.encode_logits(v, images)?;
        let training = fwd.training;
        let soft = sample_relaxed(&logits, tau, if training { Some(&mut *fwd.rng) } else { None })?;
        let recon = self.dvae.decode_raw(v, &soft, g, g)?;
        let l_dvae = dvae_loss(images, &recon)?;
        let mode = if training { TokenMode::Sample } else { TokenMode::Argmax };
        let tokens = hard_tokens(&logits, mode, fwd.rng);
        let u = self.embed.embed(v, &tokens, self.cfg.decoder.dropout, fwd)?;
        let slots = self.slot_attention.encode(v, &u, fwd.rng)?;
        let tf = self.decoder.teacher_forced_logits(v, &u, &slots.slots, fwd)?;
        let l_st = ce_loss(&tf, &tokens)?;
        let total = l_st.mul_scalar(st_weight).add(&l_dvae);
        let (a, b) = (l_st.item(), l_dvae.item());
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(format!("L_ST = {a}, L_DVAE = {b} at tau {tau}")));
        }
        Ok(LossParts {
            total,
            st: l_st,
            dvae: l_dvae,
            tokens,
            slots,
        })
    }

    /// Argmax tokens for a batch of images.
    pub fn tokenize(&self, images: &[Image]) -> Result<Vec<TokenGrid>> {
        let x = batch_tensor(images)?;
        self.check_images(&x)?;
        let v = self.store.bind_frozen();
        no_grad(|| {
            let logits = self.dvae.encode_logits(&v, &x)?;
            Ok(hard_tokens(&logits, TokenMode::Argmax, &mut RandomSource::seed(0)))
        })
    }

    /// Slots for already-tokenized images (no dropout).
    pub fn encode_tokens(&self, tokens: &[TokenGrid], rng: &mut RandomSource) -> Result<SlotSet> {
        let v = self.store.bind_frozen();
        no_grad(|| {
            let u = self.embed.embed(&v, tokens, 0.0, &mut Fwd::eval(&mut RandomSource::seed(0)))?;
            self.slot_attention.encode(&v, &u, rng)
        })
    }

    /// Argmax tokens and slots for a batch of images.
    pub fn encode_images(&self, images: &[Image], rng: &mut RandomSource) -> Result<(Vec<TokenGrid>, SlotSet)> {
        let tokens = self.tokenize(images)?;
        let slots = self.encode_tokens(&tokens, rng)?;
        Ok((tokens, slots))
    }

    /// Token sequences generated from slots `[B, N, D]`.
    pub fn generate(&self, slots: &Tensor, mode: Sampling, rng: &mut RandomSource) -> Result<Vec<TokenGrid>> {
        let v = self.store.bind_frozen();
        self.decoder.generate(&v, &self.embed, slots, mode, rng)
    }

    /// Images decoded from token grids.
    pub fn decode_tokens(&self, tokens: &[TokenGrid]) -> Result<Vec<Image>> {
        let v = self.store.bind_frozen();
        no_grad(|| {
            let codes = one_hot(tokens, self.cfg.dvae.vocab_size)?;
            Ok(images_from_tensor(&self.dvae.decode_patches(&v, &codes)?))
        })
    }

    /// Images rendered from slot prompts; each prompt holds `N` slot vectors.
    pub fn render(&self, prompts: &[Vec<Vec<f64>>], mode: Sampling, rng: &mut RandomSource) -> Result<Vec<Image>> {
        let slots = self.prompt_tensor(prompts)?;
        let tokens = self.generate(&slots, mode, rng)?;
        self.decode_tokens(&tokens)
    }

    pub fn prompt_tensor(&self, prompts: &[Vec<Vec<f64>>]) -> Result<Tensor> {
        let (n, d) = (self.num_slots(), self.slot_dim());
        let mut data = Vec::with_capacity(prompts.len() * n * d);
        for p in prompts {
            if p.len() != n {
                return shape_err(format!("prompt has {} slots, decoder expects {n}", p.len()));
            }
            for s in p {
                if s.len() != d {
                    return shape_err(format!("slot of width {} (expected {d})", s.len()));
                }
                data.extend_from_slice(s);
            }
        }
        Ok(Tensor::from_vec(data, &[prompts.len(), n, d]))
    }

    /// Encode, generate greedily and decode.
    pub fn reconstruct(&self, images: &[Image], rng: &mut RandomSource) -> Result<Vec<Image>> {
        let (_, slots) = self.encode_images(images, rng)?;
        let tokens = self.generate(&slots.slots, Sampling::Greedy, rng)?;
        self.decode_tokens(&tokens)
    }

    /// DVAE-only round trip through argmax tokens.
    pub fn dvae_reconstruct(&self, images: &[Image]) -> Result<Vec<Image>> {
        let tokens = self.tokenize(images)?;
        self.decode_tokens(&tokens)
    }
}
