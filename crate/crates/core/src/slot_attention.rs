//! Multi-headed slot attention over a set of input cells.

use slotgen_tensor::{ParamId, Tensor, Vars};

use crate::config::SlotAttentionConfig;
use crate::dvae::TokenGrid;
use crate::error::{shape_err, Error, Result};
use crate::nn::{merge_heads, split_heads, Fwd, GruCell, Init, LayerNorm, Linear, Mlp};
use crate::rng::RandomSource;

/// Added to the per-(slot, head) attention mass before renormalizing over
/// cells.
pub const ATTENTION_EPS: f64 = 1e-8;

/// Learned token dictionary and positional table.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub dictionary: ParamId,
    pub positions: ParamId,
    pub vocab: usize,
    pub len: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(init: &mut Init, vocab: usize, len: usize, dim: usize) -> Self {
        EmbeddingTable {
            dictionary: init.normal("dictionary", &[vocab, dim], 0.02),
            positions: init.normal("positions", &[len, dim], 0.02),
            vocab,
            len,
            dim,
        }
    }

    /// `u_i = dictionary[z_i] + positions[i]` followed by dropout, as
    /// `[B, T, D]`.
    pub fn embed(&self, v: &Vars, tokens: &[TokenGrid], dropout: f64, fwd: &mut Fwd) -> Result<Tensor> {
        let mut idx = Vec::with_capacity(tokens.len() * self.len);
        for g in tokens {
            if g.len() != self.len {
                return shape_err(format!("token grid of length {} for a table of {}", g.len(), self.len));
            }
            g.validate(self.vocab)?;
            idx.extend_from_slice(&g.0);
        }
        let b = tokens.len();
        let u = v[self.dictionary]
            .index_select_rows(&idx)
            .reshape(&[b, self.len, self.dim])
            .add(&v[self.positions]);
        Ok(fwd.dropout(&u, dropout))
    }

    /// Embedding of a single token at position `pos` for each batch entry,
    /// `[B, 1, D]` (no dropout; used during generation).
    pub fn embed_at(&self, v: &Vars, tokens: &[usize], pos: usize) -> Tensor {
        let b = tokens.len();
        let rows = v[self.dictionary].index_select_rows(tokens);
        let p = v[self.positions].index_select_rows(&[pos]);
        rows.add(&p).reshape(&[b, 1, self.dim])
    }
}

/// Encoder output: slots `[B, N, D]`, per-head attention `[B, N, M, T]`
/// (jointly normalized over slots and heads per cell) and the head-summed
/// maps `[B, N, T]`.
#[derive(Clone, Debug)]
pub struct SlotSet {
    pub slots: Tensor,
    pub attention: Tensor,
    pub attention_sum: Tensor,
}

impl SlotSet {
    pub fn batch(&self) -> usize {
        self.slots.dim(0)
    }

    /// Head-summed attention for one image, `N` rows of `T` weights.
    pub fn maps(&self, b: usize) -> Vec<Vec<f64>> {
        let s = self.attention_sum.shape();
        let (n, t) = (s[1], s[2]);
        let d = self.attention_sum.data();
        (0..n).map(|i| d[(b * n + i) * t..(b * n + i + 1) * t].to_vec()).collect()
    }

    /// Slot vectors for one image.
    pub fn vectors(&self, b: usize) -> Vec<Vec<f64>> {
        let s = self.slots.shape();
        let (n, dim) = (s[1], s[2]);
        let d = self.slots.data();
        (0..n).map(|i| d[(b * n + i) * dim..(b * n + i + 1) * dim].to_vec()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SlotAttention {
    pub cfg: SlotAttentionConfig,
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    out: Linear,
    gru: GruCell,
    norm_mlp: LayerNorm,
    mlp: Mlp,
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

impl SlotAttention {
    pub fn new(init: &mut Init, cfg: &SlotAttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.slot_dim;
        let proj = cfg.key_dim() * cfg.num_heads;
        let bound = (6.0 / (2 * d) as f64).sqrt();
        Ok(SlotAttention {
            cfg: cfg.clone(),
            norm_inputs: LayerNorm::new(init, "norm_inputs", cfg.input_dim),
            norm_slots: LayerNorm::new(init, "norm_slots", d),
            to_q: Linear::new(init, "to_q", d, proj, false),
            to_k: Linear::new(init, "to_k", cfg.input_dim, proj, false),
            to_v: Linear::new(init, "to_v", cfg.input_dim, proj, false),
            out: Linear::new(init, "out", proj, d, false),
            gru: GruCell::new(init, "gru", d, d),
            norm_mlp: LayerNorm::new(init, "norm_mlp", d),
            mlp: Mlp::new(init, "mlp", d, cfg.mlp_hidden, d),
            mu: init.uniform("slot_mu", &[1, 1, d], bound),
            log_sigma: init.uniform("slot_log_sigma", &[1, 1, d], bound),
        })
    }

    /// `slots = mu + exp(log_sigma) * eps` with `eps ~ N(0, I)`, `[B, N, D]`.
    pub fn init_slots(&self, v: &Vars, batch: usize, rng: &mut RandomSource) -> Tensor {
        let (n, d) = (self.cfg.num_slots, self.cfg.slot_dim);
        let eps: Vec<f64> = (0..batch * n * d).map(|_| rng.normal()).collect();
        let eps = Tensor::from_vec(eps, &[batch, n, d]);
        v[self.mu].add(&v[self.log_sigma].exp().mul(&eps))
    }

    /// Projected keys and values `[B, M, T, D_K]` for normalized inputs.
    fn keys_values(&self, v: &Vars, inputs: &Tensor) -> (Tensor, Tensor) {
        let x = self.norm_inputs.forward(v, inputs);
        let m = self.cfg.num_heads;
        (split_heads(&self.to_k.forward(v, &x), m), split_heads(&self.to_v.forward(v, &x), m))
    }

    /// One refinement step. Returns the updated slots and the attention
    /// `[B, N, M, T]` computed in this step.
    pub fn iteration(&self, v: &Vars, slots: &Tensor, inputs: &Tensor) -> (Tensor, Tensor) {
        let (k, vals) = self.keys_values(v, inputs);
        self.iterate_with(v, slots, &k, &vals)
    }

    fn iterate_with(&self, v: &Vars, slots: &Tensor, k: &Tensor, vals: &Tensor) -> (Tensor, Tensor) {
        let (b, n, d) = (slots.dim(0), slots.dim(1), slots.dim(2));
        let m = self.cfg.num_heads;
        let t = k.dim(2);
        let q = split_heads(&self.to_q.forward(v, &self.norm_slots.forward(v, slots)), m);
        let scale = 1.0 / (self.cfg.key_dim() as f64).sqrt();
        // [B, M, N, T] logits; softmax jointly over (M, N) for every cell
        let logits = q.matmul_nt(k).mul_scalar(scale);
        let joint = logits
            .permute(&[0, 3, 1, 2])
            .reshape(&[b, t, m * n])
            .softmax_last()
            .reshape(&[b, t, m, n])
            .permute(&[0, 2, 3, 1]);
        let mass = joint.sum_axis(3, true).add_scalar(ATTENTION_EPS);
        let weights = joint.div(&mass);
        let updates = self.out.forward(v, &merge_heads(&weights.matmul(vals)));
        let prev = slots.reshape(&[b * n, d]);
        let next = self.gru.forward(v, &updates.reshape(&[b * n, d]), &prev).reshape(&[b, n, d]);
        let next = next.add(&self.mlp.forward(v, &self.norm_mlp.forward(v, &next)));
        (next, joint.permute(&[0, 2, 1, 3]))
    }

    /// Runs `iterations` refinement steps from freshly sampled slots.
    pub fn encode(&self, v: &Vars, inputs: &Tensor, rng: &mut RandomSource) -> Result<SlotSet> {
        let init = self.init_slots(v, inputs.dim(0), rng);
        self.encode_from(v, inputs, init)
    }

    /// Same as [`SlotAttention::encode`] with caller-provided initial slots.
    pub fn encode_from(&self, v: &Vars, inputs: &Tensor, init: Tensor) -> Result<SlotSet> {
        let s = inputs.shape();
        if s.len() != 3 || s[2] != self.cfg.input_dim {
            return shape_err(format!("slot encoder inputs {s:?}, expected [B,T,{}]", self.cfg.input_dim));
        }
        let (k, vals) = self.keys_values(v, inputs);
        let mut slots = init;
        let mut attn = None;
        for _ in 0..self.cfg.iterations {
            let (next, a) = self.iterate_with(v, &slots, &k, &vals);
            slots = next;
            attn = Some(a);
        }
        let attention = attn.expect("iterations ≥ 1");
        if slots.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("slot attention produced non-finite slots".into()));
        }
        let attention_sum = attention.sum_axis(2, false);
        Ok(SlotSet {
            slots,
            attention,
            attention_sum,
        })
    }
}
