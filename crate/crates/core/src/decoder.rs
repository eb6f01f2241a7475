//! Slot-conditioned autoregressive transformer over DVAE tokens.
//!
//! Each layer runs causal self-attention, cross-attention to the projected
//! slots and a feed-forward block, all pre-normalized with residuals. Slots
//! carry no positional encoding, so the output is invariant to slot order.

use slotgen_tensor::{no_grad, ParamId, Tensor, Vars};

use crate::config::DecoderConfig;
use crate::dvae::{argmax_row, sample_row, TokenGrid};
use crate::error::{shape_err, Result};
use crate::nn::{attention, causal_mask, merge_heads, split_heads, Fwd, Init, LayerNorm, Linear};
use crate::rng::RandomSource;
use crate::slot_attention::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
}

#[derive(Clone, Debug)]
struct Layer {
    ln_self: LayerNorm,
    qkv: Linear,
    self_out: Linear,
    ln_cross: LayerNorm,
    cross_q: Linear,
    cross_kv: Linear,
    cross_out: Linear,
    ln_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
pub struct Slot2SeqDecoder {
    pub cfg: DecoderConfig,
    pub vocab: usize,
    pub seq_len: usize,
    pub start: ParamId,
    slot_norm: LayerNorm,
    slot_proj: Linear,
    layers: Vec<Layer>,
    final_norm: LayerNorm,
    head: Linear,
}

/// Per-layer self-attention cache for incremental decoding.
struct Cache {
    keys: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
}

impl Slot2SeqDecoder {
    pub fn new(init: &mut Init, cfg: &DecoderConfig, slot_dim: usize, vocab: usize, seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut s = init.sub(&format!("layer{i}"));
                Layer {
                    ln_self: LayerNorm::new(&mut s, "ln_self", d),
                    qkv: Linear::new(&mut s, "qkv", d, 3 * d, true),
                    self_out: Linear::new(&mut s, "self_out", d, d, true),
                    ln_cross: LayerNorm::new(&mut s, "ln_cross", d),
                    cross_q: Linear::new(&mut s, "cross_q", d, d, true),
                    cross_kv: Linear::new(&mut s, "cross_kv", d, 2 * d, true),
                    cross_out: Linear::new(&mut s, "cross_out", d, d, true),
                    ln_ff: LayerNorm::new(&mut s, "ln_ff", d),
                    ff1: Linear::new(&mut s, "ff1", d, 4 * d, true),
                    ff2: Linear::new(&mut s, "ff2", 4 * d, d, true),
                }
            })
            .collect();
        Ok(Slot2SeqDecoder {
            cfg: cfg.clone(),
            vocab,
            seq_len,
            start: init.normal("start", &[1, 1, d], 0.02),
            slot_norm: LayerNorm::new(init, "slot_norm", slot_dim),
            slot_proj: Linear::new(init, "slot_proj", slot_dim, d, true),
            layers,
            final_norm: LayerNorm::new(init, "final_norm", d),
            head: Linear::new(init, "head", d, vocab, true),
        })
    }

    /// Cross-attention keys and values per layer, `[B, H, N, dh]` each.
    fn memory(&self, v: &Vars, slots: &Tensor) -> Vec<(Tensor, Tensor)> {
        let d = self.cfg.hidden_dim;
        let mem = self.slot_proj.forward(v, &self.slot_norm.forward(v, slots));
        self.layers
            .iter()
            .map(|l| {
                let kv = l.cross_kv.forward(v, &mem);
                (
                    split_heads(&kv.narrow(2, 0, d), self.cfg.heads),
                    split_heads(&kv.narrow(2, d, d), self.cfg.heads),
                )
            })
            .collect()
    }

    /// Runs the layer stack on inputs `x` (`[B, L, D]`). With a cache the
    /// rows are appended after the cached prefix; otherwise `mask` applies.
    fn stack(
        &self,
        v: &Vars,
        mut x: Tensor,
        memory: &[(Tensor, Tensor)],
        mask: Option<&Tensor>,
        mut cache: Option<&mut Cache>,
        fwd: &mut Fwd,
    ) -> Tensor {
        let d = self.cfg.hidden_dim;
        let h = self.cfg.heads;
        let p = self.cfg.dropout;
        for (i, l) in self.layers.iter().enumerate() {
            let qkv = l.qkv.forward(v, &l.ln_self.forward(v, &x));
            let q = split_heads(&qkv.narrow(2, 0, d), h);
            let mut k = split_heads(&qkv.narrow(2, d, d), h);
            let mut vals = split_heads(&qkv.narrow(2, 2 * d, d), h);
            if let Some(c) = cache.as_deref_mut() {
                if let (Some(pk), Some(pv)) = (&c.keys[i], &c.values[i]) {
                    k = Tensor::cat(&[pk.clone(), k], 2);
                    vals = Tensor::cat(&[pv.clone(), vals], 2);
                }
                c.keys[i] = Some(k.clone());
                c.values[i] = Some(vals.clone());
            }
            let a = attention(&q, &k, &vals, mask, p, fwd);
            x = x.add(&l.self_out.forward(v, &merge_heads(&a)));

            let q = split_heads(&l.cross_q.forward(v, &l.ln_cross.forward(v, &x)), h);
            let (mk, mv) = &memory[i];
            let a = attention(&q, mk, mv, None, p, fwd);
            x = x.add(&l.cross_out.forward(v, &merge_heads(&a)));

            let f = l.ff2.forward(v, &l.ff1.forward(v, &l.ln_ff.forward(v, &x)).gelu());
            x = x.add(&f);
        }
        self.head.forward(v, &self.final_norm.forward(v, &x))
    }

    /// Logits `[B, T, V]` where position `i` sees the start token, the
    /// embeddings before `i` and all slots.
    pub fn teacher_forced_logits(&self, v: &Vars, embeddings: &Tensor, slots: &Tensor, fwd: &mut Fwd) -> Result<Tensor> {
        let s = embeddings.shape();
        if s.len() != 3 || s[2] != self.cfg.hidden_dim || slots.rank() != 3 || slots.dim(0) != s[0] {
            return shape_err(format!("embeddings {s:?} with slots {:?}", slots.shape()));
        }
        let (b, t) = (s[0], s[1]);
        let start = v[self.start].broadcast_to(&[b, 1, self.cfg.hidden_dim]);
        let x = if t > 1 {
            Tensor::cat(&[start, embeddings.narrow(1, 0, t - 1)], 1)
        } else {
            start
        };
        let memory = self.memory(v, slots);
        let mask = causal_mask(t);
        Ok(self.stack(v, x, &memory, Some(&mask), None, fwd))
    }

    /// Left-to-right generation with a key/value cache. Each step's logits
    /// are bitwise equal to the teacher-forced logits on the same prefix.
    pub fn generate(
        &self,
        v: &Vars,
        embed: &EmbeddingTable,
        slots: &Tensor,
        mode: Sampling,
        rng: &mut RandomSource,
    ) -> Result<Vec<TokenGrid>> {
        Ok(self.generate_with_logits(v, embed, slots, mode, rng)?.0)
    }

    /// Like [`Slot2SeqDecoder::generate`], also returning the per-step
    /// logits `[B, T, V]`.
    pub fn generate_with_logits(
        &self,
        v: &Vars,
        embed: &EmbeddingTable,
        slots: &Tensor,
        mode: Sampling,
        rng: &mut RandomSource,
    ) -> Result<(Vec<TokenGrid>, Tensor)> {
        if slots.rank() != 3 {
            return shape_err(format!("slots {:?}, expected [B,N,D]", slots.shape()));
        }
        if let Sampling::Sample { temperature } = mode {
            if !(temperature > 0.0) {
                return Err(crate::Error::Invalid(format!("sampling temperature {temperature}")));
            }
        }
        no_grad(|| {
            let b = slots.dim(0);
            let d = self.cfg.hidden_dim;
            let memory = self.memory(v, slots);
            let mut cache = Cache {
                keys: vec![None; self.layers.len()],
                values: vec![None; self.layers.len()],
            };
            let mut scratch = RandomSource::seed(0);
            let mut fwd = Fwd::eval(&mut scratch);
            let mut tokens = vec![Vec::with_capacity(self.seq_len); b];
            let mut all_logits = Vec::with_capacity(self.seq_len);
            for step in 0..self.seq_len {
                let x = if step == 0 {
                    v[self.start].broadcast_to(&[b, 1, d])
                } else {
                    let prev: Vec<usize> = tokens.iter().map(|t: &Vec<usize>| t[step - 1]).collect();
                    embed.embed_at(v, &prev, step - 1)
                };
                let logits = self.stack(v, x, &memory, None, Some(&mut cache), &mut fwd);
                for (bi, row) in logits.data().chunks(self.vocab).enumerate() {
                    let z = match mode {
                        Sampling::Greedy => argmax_row(row),
                        Sampling::Sample { temperature } => {
                            let scaled: Vec<f64> = row.iter().map(|x| x / temperature).collect();
                            sample_row(&scaled, rng)
                        }
                    };
                    tokens[bi].push(z);
                }
                all_logits.push(logits);
            }
            let logits = Tensor::cat(&all_logits, 1);
            Ok((tokens.into_iter().map(TokenGrid).collect(), logits))
        })
    }
}

/// Cross-entropy summed over positions, averaged over the batch.
pub fn ce_loss(logits: &Tensor, targets: &[TokenGrid]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != targets.len() {
        return shape_err(format!("logits {s:?} for {} targets", targets.len()));
    }
    let mut idx = Vec::with_capacity(s[0] * s[1]);
    for g in targets {
        if g.len() != s[1] {
            return shape_err(format!("target length {} vs {} positions", g.len(), s[1]));
        }
        g.validate(s[2])?;
        idx.extend_from_slice(&g.0);
    }
    let picked = logits.log_softmax_last().gather_last(&idx);
    Ok(picked.sum_all().mul_scalar(-1.0 / s[0] as f64))
}
