//! Model, training and run configuration.
//!
//! Run configs are TOML `key = value` files. A file may name a `preset`
//! (default `3dshapes`); every other key overrides the preset value and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DvaeConfig {
    pub image_size: usize,
    /// Patch side K; the token grid is `(image_size / K)²`.
    pub patch_size: usize,
    pub vocab_size: usize,
    /// Width of the hidden convolution layers.
    pub channels: usize,
}

impl DvaeConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size < 2 || self.channels == 0 {
            return Err(Error::Config("vocab_size must be ≥ 2 and channels ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.1,
            steps: 30000,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > self.end && self.end > 0.0 && self.steps > 0) {
            return Err(Error::Config(format!("temperature schedule needs start > end > 0 and steps > 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttentionConfig {
    pub num_slots: usize,
    pub num_heads: usize,
    pub iterations: usize,
    pub slot_dim: usize,
    /// Width of the encoder inputs (token embedding or CNN feature size).
    pub input_dim: usize,
    pub mlp_hidden: usize,
}

impl SlotAttentionConfig {
    /// Per-head key width D_K.
    pub fn key_dim(&self) -> usize {
        self.slot_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || self.num_heads == 0 || self.iterations == 0 {
            return Err(Error::Config("num_slots, num_slot_heads and num_iterations must be ≥ 1".into()));
        }
        if self.slot_dim == 0 || self.slot_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "slot_dim {} must be divisible by num_slot_heads {}",
                self.slot_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Attention dropout and the dropout after token + position embedding.
    pub dropout: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_dec_heads {} (layers ≥ 1)",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot2SeqConfig {
    pub dvae: DvaeConfig,
    pub slots: SlotAttentionConfig,
    pub decoder: DecoderConfig,
}

impl Slot2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        self.dvae.validate()?;
        self.slots.validate()?;
        self.decoder.validate()?;
        if self.slots.input_dim != self.decoder.hidden_dim {
            return Err(Error::Config("slot encoder input width must equal hidden_dim".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub image_size: usize,
    pub slots: SlotAttentionConfig,
    /// CNN encoder width (also the slot-attention input width).
    pub enc_channels: usize,
    pub dec_channels: usize,
    /// Number of 3×3 convolutions after the broadcast layer.
    pub dec_layers: usize,
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        self.slots.validate()?;
        if self.slots.input_dim != self.enc_channels || self.enc_channels == 0 || self.dec_channels == 0 {
            return Err(Error::Config("mixture encoder width must equal the slot input width".into()));
        }
        if self.dec_layers == 0 || self.image_size == 0 {
            return Err(Error::Config("mixture_dec_layers and image_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauPolicy {
    pub patience: usize,
    pub factor: f64,
}

impl Default for PlateauPolicy {
    fn default() -> Self {
        PlateauPolicy {
            patience: 8,
            factor: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub dvae_lr: f64,
    pub plateau: PlateauPolicy,
    pub temperature: TemperatureSchedule,
    pub max_steps: u64,
    pub seed: u64,
}

/// Decoder family selected for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Slot2seq,
    Mixture,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot2seq" => Ok(DecoderKind::Slot2seq),
            "mixture" => Ok(DecoderKind::Mixture),
            _ => Err(Error::Config(format!("unknown decoder family {s:?} (slot2seq | mixture)"))),
        }
    }
}

/// Flat run configuration; see `RunConfig::KEYS` for the documented keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub decoder: DecoderKind,

    pub image_size: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub dvae_channels: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_steps: u64,

    pub num_slots: usize,
    pub num_slot_heads: usize,
    pub num_iterations: usize,
    pub slot_dim: usize,
    pub slot_mlp_hidden: usize,

    pub num_layers: usize,
    pub num_dec_heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,

    pub mixture_enc_channels: usize,
    pub mixture_dec_channels: usize,
    pub mixture_dec_layers: usize,

    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub dvae_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub max_steps: u64,
    pub checkpoint_every: u64,

    /// Image folder; empty when the dataset is supplied another way.
    pub dataset_root: String,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Use at most this many images (0 = all).
    pub max_images: usize,
    pub output_dir: String,
}

impl RunConfig {
    pub const PRESETS: &'static [&'static str] = &["3dshapes", "clevr", "shapestacks", "bitmoji", "desk", "tiny"];

    pub fn preset(name: &str) -> Result<RunConfig> {
        let base = RunConfig {
            preset: name.to_string(),
            seed: 0,
            decoder: DecoderKind::Slot2seq,
            image_size: 64,
            patch_size: 4,
            vocab_size: 1024,
            dvae_channels: 64,
            tau_start: 1.0,
            tau_end: 0.1,
            tau_steps: 30000,
            num_slots: 3,
            num_slot_heads: 1,
            num_iterations: 3,
            slot_dim: 192,
            slot_mlp_hidden: 384,
            num_layers: 4,
            num_dec_heads: 4,
            hidden_dim: 192,
            dropout: 0.1,
            mixture_enc_channels: 64,
            mixture_dec_channels: 64,
            mixture_dec_layers: 3,
            batch_size: 50,
            peak_lr: 1e-4,
            warmup_steps: 30000,
            dvae_lr: 3e-4,
            plateau_patience: 8,
            plateau_factor: 0.5,
            max_steps: 250_000,
            checkpoint_every: 5000,
            dataset_root: String::new(),
            train_fraction: 0.8,
            val_fraction: 0.1,
            max_images: 0,
            output_dir: "runs".into(),
        };
        let cfg = match name {
            "3dshapes" => base,
            "clevr" => RunConfig {
                image_size: 128,
                vocab_size: 4096,
                num_layers: 8,
                num_dec_heads: 8,
                num_slots: 12,
                num_iterations: 7,
                peak_lr: 3e-4,
                ..base
            },
            "shapestacks" => RunConfig {
                image_size: 96,
                vocab_size: 4096,
                num_layers: 8,
                num_dec_heads: 8,
                num_slots: 12,
                num_iterations: 7,
                peak_lr: 3e-4,
                ..base
            },
            "bitmoji" => RunConfig {
                image_size: 128,
                vocab_size: 4096,
                num_layers: 8,
                num_dec_heads: 8,
                num_slots: 8,
                num_slot_heads: 4,
                ..base
            },
            "desk" => RunConfig {
                vocab_size: 512,
                num_slots: 4,
                peak_lr: 3e-4,
                max_steps: 50_000,
                ..base
            },
            "tiny" => RunConfig {
                image_size: 16,
                patch_size: 4,
                vocab_size: 32,
                dvae_channels: 16,
                num_slots: 3,
                slot_dim: 32,
                slot_mlp_hidden: 64,
                num_layers: 1,
                num_dec_heads: 2,
                hidden_dim: 32,
                mixture_enc_channels: 16,
                mixture_dec_channels: 16,
                mixture_dec_layers: 2,
                batch_size: 4,
                peak_lr: 1e-3,
                warmup_steps: 100,
                tau_steps: 500,
                max_steps: 200,
                checkpoint_every: 100,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; available: {}",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a config document: preset values overlaid by the given keys.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match table.get("preset") {
            None => "3dshapes".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let base = Self::preset(&preset)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
            // integers are accepted where floats are expected
            let v = match (&merged[&k], v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            merged.insert(k, v);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.slot2seq().validate()?;
        self.mixture().validate()?;
        self.train().temperature.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_patience == 0 {
            return Err(Error::Config("plateau_factor must be in (0,1) and plateau_patience ≥ 1".into()));
        }
        let f = self.train_fraction + self.val_fraction;
        if self.train_fraction <= 0.0 || self.val_fraction < 0.0 || f > 1.0 + 1e-12 {
            return Err(Error::Config("split fractions must be nonnegative and sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn slot2seq(&self) -> Slot2SeqConfig {
        Slot2SeqConfig {
            dvae: DvaeConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                vocab_size: self.vocab_size,
                channels: self.dvae_channels,
            },
            slots: SlotAttentionConfig {
                num_slots: self.num_slots,
                num_heads: self.num_slot_heads,
                iterations: self.num_iterations,
                slot_dim: self.slot_dim,
                input_dim: self.hidden_dim,
                mlp_hidden: self.slot_mlp_hidden,
            },
            decoder: DecoderConfig {
                layers: self.num_layers,
                heads: self.num_dec_heads,
                hidden_dim: self.hidden_dim,
                dropout: self.dropout,
            },
        }
    }

    pub fn mixture(&self) -> MixtureConfig {
        MixtureConfig {
            image_size: self.image_size,
            slots: SlotAttentionConfig {
                num_slots: self.num_slots,
                num_heads: self.num_slot_heads,
                iterations: self.num_iterations,
                slot_dim: self.slot_dim,
                input_dim: self.mixture_enc_channels,
                mlp_hidden: self.slot_mlp_hidden,
            },
            enc_channels: self.mixture_enc_channels,
            dec_channels: self.mixture_dec_channels,
            dec_layers: self.mixture_dec_layers,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            dvae_lr: self.dvae_lr,
            plateau: PlateauPolicy {
                patience: self.plateau_patience,
                factor: self.plateau_factor,
            },
            temperature: TemperatureSchedule {
                start: self.tau_start,
                end: self.tau_end,
                steps: self.tau_steps,
            },
            max_steps: self.max_steps,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_six_presets() {
        let s = RunConfig::preset("3dshapes").unwrap();
        assert_eq!((s.image_size, s.vocab_size, s.num_layers, s.num_dec_heads, s.hidden_dim), (64, 1024, 4, 4, 192));
        assert_eq!((s.num_slots, s.num_iterations, s.num_slot_heads, s.slot_dim), (3, 3, 1, 192));
        assert_eq!(s.slot2seq().dvae.num_tokens(), 256);
        assert_eq!((s.peak_lr, s.dvae_lr, s.warmup_steps, s.batch_size), (1e-4, 3e-4, 30000, 50));
        let c = RunConfig::preset("clevr").unwrap();
        assert_eq!((c.image_size, c.vocab_size, c.num_slots, c.num_iterations, c.peak_lr), (128, 4096, 12, 7, 3e-4));
        assert_eq!(c.slot2seq().dvae.num_tokens(), 1024);
        let st = RunConfig::preset("shapestacks").unwrap();
        assert_eq!(st.slot2seq().dvae.num_tokens(), 576);
        let b = RunConfig::preset("bitmoji").unwrap();
        assert_eq!((b.num_slots, b.num_slot_heads, b.peak_lr), (8, 4, 1e-4));
        for p in RunConfig::PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn parse_overrides_and_rejects_unknown() {
        let c = RunConfig::parse("preset = \"tiny\"\nseed = 7\npeak_lr = 1\n").unwrap();
        assert_eq!((c.seed, c.image_size, c.peak_lr), (7, 16, 1.0));
        assert!(RunConfig::parse("bogus_key = 1").is_err());
        assert!(RunConfig::parse("slot_dim = 190\nnum_slot_heads = 4").is_err());
        let round = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(round, c);
    }
}
