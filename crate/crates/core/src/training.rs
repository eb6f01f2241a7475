//! Joint optimization: schedules, plateau policy, parameter groups and the
//! seeded training loop.

use serde::{Deserialize, Serialize};
use slotgen_tensor::{no_grad, Adam, ParamId, ParamStore, Tensor, Vars};

use crate::config::{DecoderKind, PlateauPolicy, RunConfig, TrainConfig};
use crate::dvae::temperature_at;
use crate::decoder::Sampling;
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::mixture::MixtureModel;
use crate::model::Slot2Seq;
use crate::nn::Fwd;
use crate::rng::{RandomSource, RngState};
use crate::slot_attention::SlotSet;

/// Group A: slot attention, transformer and embeddings (warmup + plateau).
/// Group B: the DVAE (constant rate).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    A,
    B,
}

pub fn group_of(param_name: &str) -> Group {
    if param_name.starts_with("dvae.") {
        Group::B
    } else {
        Group::A
    }
}

/// Learning rate for `group` at `step` after `reductions` plateau cuts.
pub fn lr_at(step: u64, group: Group, cfg: &TrainConfig, reductions: u32) -> f64 {
    match group {
        Group::B => cfg.dvae_lr,
        Group::A => {
            if step < cfg.warmup_steps {
                cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
            } else {
                cfg.peak_lr * cfg.plateau.factor.powi(reductions as i32)
            }
        }
    }
}

/// Running state of the plateau policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub reductions: u32,
}

impl PlateauState {
    /// Records one epoch's validation loss; returns true when it triggered
    /// a reduction.
    pub fn observe(&mut self, loss: f64, policy: &PlateauPolicy) -> bool {
        match self.best {
            Some(b) if loss >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= policy.patience {
                    self.reductions += 1;
                    self.bad_epochs = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        false
    }
}

/// Number of reductions the policy makes over a validation history.
pub fn plateau_update(history: &[f64], policy: &PlateauPolicy) -> u32 {
    let mut s = PlateauState::default();
    for &l in history {
        s.observe(l, policy);
    }
    s.reductions
}

/// Either decoder family behind one training interface.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Slot2Seq(Slot2Seq),
    Mixture(MixtureModel),
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub st: Option<f64>,
    pub dvae: Option<f64>,
    pub mix: Option<f64>,
}

impl AnyModel {
    pub fn build(run: &RunConfig) -> Result<AnyModel> {
        Ok(match run.decoder {
            DecoderKind::Slot2seq => AnyModel::Slot2Seq(Slot2Seq::new(&run.slot2seq(), run.seed)?),
            DecoderKind::Mixture => AnyModel::Mixture(MixtureModel::new(&run.mixture(), run.seed)?),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            AnyModel::Slot2Seq(_) => DecoderKind::Slot2seq,
            AnyModel::Mixture(_) => DecoderKind::Mixture,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Slot2Seq(m) => &m.store,
            AnyModel::Mixture(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Slot2Seq(m) => &mut m.store,
            AnyModel::Mixture(m) => &mut m.store,
        }
    }

    pub fn num_slots(&self) -> usize {
        match self {
            AnyModel::Slot2Seq(m) => m.num_slots(),
            AnyModel::Mixture(m) => m.num_slots(),
        }
    }

    pub fn slot_dim(&self) -> usize {
        match self {
            AnyModel::Slot2Seq(m) => m.slot_dim(),
            AnyModel::Mixture(m) => m.slot_dim(),
        }
    }

    /// Slots and attention for `images` (no gradient tape).
    pub fn encode(&self, images: &[Image], rng: &mut RandomSource) -> Result<SlotSet> {
        no_grad(|| match self {
            AnyModel::Slot2Seq(m) => m.encode_images(images, rng).map(|(_, s)| s),
            AnyModel::Mixture(m) => m.encode_images(images, rng),
        })
    }

    /// Images from slot prompts; the autoregressive decoder samples greedily.
    pub fn render(&self, prompts: &[Vec<Vec<f64>>], rng: &mut RandomSource) -> Result<Vec<Image>> {
        no_grad(|| match self {
            AnyModel::Slot2Seq(m) => m.render(prompts, Sampling::Greedy, rng),
            AnyModel::Mixture(m) => m.render(prompts),
        })
    }

    pub fn reconstruct(&self, images: &[Image], rng: &mut RandomSource) -> Result<Vec<Image>> {
        no_grad(|| match self {
            AnyModel::Slot2Seq(m) => m.reconstruct(images, rng),
            AnyModel::Mixture(m) => m.reconstruct(images, rng),
        })
    }

    /// Differentiable batch loss and its components.
    pub fn batch_loss(&self, v: &Vars, images: &Tensor, tau: f64, fwd: &mut Fwd) -> Result<(Tensor, LossValues)> {
        match self {
            AnyModel::Slot2Seq(m) => {
                let p = m.total_loss(v, images, tau, 1.0, fwd)?;
                let vals = LossValues {
                    total: p.total.item(),
                    st: Some(p.st.item()),
                    dvae: Some(p.dvae.item()),
                    mix: None,
                };
                Ok((p.total, vals))
            }
            AnyModel::Mixture(m) => {
                let (loss, _) = m.loss(v, images, fwd.rng)?;
                let x = loss.item();
                Ok((
                    loss,
                    LossValues {
                        total: x,
                        st: None,
                        dvae: None,
                        mix: Some(x),
                    },
                ))
            }
        }
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Train {
        step: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        l_st: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        l_dvae: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        l_mix: Option<f64>,
        lr_a: f64,
        lr_b: f64,
        tau: f64,
    },
    Val {
        step: u64,
        epoch: u64,
        loss: f64,
        reductions: u32,
    },
}

/// Everything besides parameters and optimizer moments that a resumed run
/// needs to continue bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Position inside the current epoch's permutation.
    pub cursor: usize,
    pub plateau: PlateauState,
    pub rng: RngState,
    pub val_history: Vec<f64>,
}

/// Stream ids for the independent random sources of a run.
const STREAM_STEP: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_ORDER: u64 = 1 << 32;

pub struct Trainer {
    pub run: RunConfig,
    pub cfg: TrainConfig,
    pub model: AnyModel,
    pub opt: Adam,
    pub state: TrainState,
    groups: Vec<Group>,
    rng: RandomSource,
}

impl Trainer {
    pub fn new(run: &RunConfig) -> Result<Trainer> {
        run.validate()?;
        let model = AnyModel::build(run)?;
        let rng = RandomSource::stream(run.seed, STREAM_STEP);
        let opt = Adam::new(model.store());
        Self::assemble(run, model, opt, TrainState {
            step: 0,
            epoch: 0,
            cursor: 0,
            plateau: PlateauState::default(),
            rng: rng.state(),
            val_history: Vec::new(),
        })
    }

    /// Rebuilds a trainer from saved parts.
    pub fn assemble(run: &RunConfig, model: AnyModel, opt: Adam, state: TrainState) -> Result<Trainer> {
        let groups: Vec<Group> = model.store().entries().iter().map(|e| group_of(&e.name)).collect();
        // every parameter belongs to exactly one group by construction; the
        // mixture model has no DVAE and therefore no group B
        if model.kind() == DecoderKind::Mixture && groups.contains(&Group::B) {
            return Err(Error::Invalid("mixture model exposes DVAE parameters".into()));
        }
        if opt.m.len() != groups.len() {
            return Err(Error::Mismatch("optimizer state does not match the parameter list".into()));
        }
        Ok(Trainer {
            run: run.clone(),
            cfg: run.train(),
            rng: RandomSource::from_state(&state.rng),
            model,
            opt,
            state,
            groups,
        })
    }

    pub fn lr(&self, group: Group) -> f64 {
        lr_at(self.state.step, group, &self.cfg, self.state.plateau.reductions)
    }

    pub fn tau(&self) -> f64 {
        temperature_at(self.state.step, &self.cfg.temperature)
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        RandomSource::stream(self.run.seed, STREAM_ORDER + self.state.epoch).shuffle(&mut idx);
        idx
    }

    /// One optimizer step on the next batch of `train`. At the end of an
    /// epoch the validation loss is computed and fed to the plateau policy
    /// (after warmup); the returned records include it.
    pub fn step(&mut self, train: &[Image], val: &[Image]) -> Result<Vec<MetricRecord>> {
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let order = self.epoch_order(train.len());
        let end = (self.state.cursor + self.cfg.batch_size).min(train.len());
        let batch: Vec<Image> = order[self.state.cursor..end].iter().map(|&i| train[i].clone()).collect();
        let x = batch_tensor(&batch)?;
        let tau = self.tau();
        let (lr_a, lr_b) = (self.lr(Group::A), self.lr(Group::B));
        let vars = self.model.store().bind();
        let (loss, vals) = self.model.batch_loss(&vars, &x, tau, &mut Fwd::train(&mut self.rng))?;
        let grads = vars.grads(&loss.backward());
        drop(vars);
        let groups = &self.groups;
        self.opt.update(self.model.store_mut(), &grads, |id: ParamId| match groups[id.0] {
            Group::A => lr_a,
            Group::B => lr_b,
        });
        let mut records = vec![MetricRecord::Train {
            step: self.state.step,
            l_st: vals.st,
            l_dvae: vals.dvae,
            l_mix: vals.mix,
            lr_a,
            lr_b,
            tau,
        }];
        self.state.step += 1;
        self.state.cursor = end;
        if end == train.len() {
            if !val.is_empty() {
                let loss = self.validation_loss(val)?;
                self.state.val_history.push(loss);
                if self.state.step >= self.cfg.warmup_steps {
                    self.state.plateau.observe(loss, &self.cfg.plateau);
                }
                records.push(MetricRecord::Val {
                    step: self.state.step,
                    epoch: self.state.epoch,
                    loss,
                    reductions: self.state.plateau.reductions,
                });
            }
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
        self.state.rng = self.rng.state();
        Ok(records)
    }

    /// Mean evaluation-mode loss over `val` (no dropout or noise, argmax
    /// tokens, fixed slot-initialization stream).
    pub fn validation_loss(&self, val: &[Image]) -> Result<f64> {
        evaluation_loss(&self.model, val, self.cfg.batch_size, self.tau(), self.run.seed)
    }

    /// Runs `n` steps, handing each record to `sink`.
    pub fn run_steps(
        &mut self,
        n: u64,
        train: &[Image],
        val: &[Image],
        mut sink: impl FnMut(&MetricRecord),
    ) -> Result<()> {
        for _ in 0..n {
            for r in self.step(train, val)? {
                sink(&r);
            }
        }
        Ok(())
    }
}

/// Mean per-batch loss (weighted by batch size) in evaluation mode.
pub fn evaluation_loss(model: &AnyModel, images: &[Image], batch_size: usize, tau: f64, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut rng = RandomSource::stream(seed, STREAM_VAL);
    let vars = model.store().bind_frozen();
    let mut sum = 0.0;
    for chunk in images.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk)?;
        let (_, vals) = no_grad(|| model.batch_loss(&vars, &x, tau, &mut Fwd::eval(&mut rng)))?;
        sum += vals.total * chunk.len() as f64;
    }
    Ok(sum / images.len() as f64)
}

/// Mean teacher-forced `L_ST` on `images` in evaluation mode.
pub fn evaluation_st(model: &Slot2Seq, images: &[Image], batch_size: usize, tau: f64, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut rng = RandomSource::stream(seed, STREAM_VAL);
    let vars = model.store.bind_frozen();
    let mut sum = 0.0;
    for chunk in images.chunks(batch_size.max(1)) {
        let x = batch_tensor(chunk)?;
        let p = no_grad(|| model.total_loss(&vars, &x, tau, 1.0, &mut Fwd::eval(&mut rng)))?;
        sum += p.st.item() * chunk.len() as f64;
    }
    Ok(sum / images.len() as f64)
}
