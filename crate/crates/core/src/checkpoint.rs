//! Versioned, checksummed checkpoint files.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SLOTGEN\0" | version u32 | header length u64 | header JSON
//! | parameter values f64... | Adam m f64... | Adam v f64...
//! | SHA-256 of everything before
//! ```
//!
//! Optimizer moments are present only when the header carries optimizer
//! metadata. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotgen_tensor::{Adam, ParamStore};

use crate::config::{DecoderKind, RunConfig};
use crate::error::{Error, Result};
use crate::training::{AnyModel, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"SLOTGEN\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: DecoderKind,
    pub config: RunConfig,
    /// Architecture hyperparameters per parameter section.
    pub sections: BTreeMap<String, serde_json::Value>,
    pub params: Vec<TensorMeta>,
    pub optimizer: Option<OptimizerMeta>,
    pub train: Option<TrainState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: Vec<Vec<f64>>,
    pub moments: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

fn sections_for(run: &RunConfig, kind: DecoderKind) -> BTreeMap<String, serde_json::Value> {
    let mut s = BTreeMap::new();
    match kind {
        DecoderKind::Slot2seq => {
            let c = run.slot2seq();
            s.insert("dvae".into(), serde_json::to_value(&c.dvae).expect("serializable"));
            s.insert(
                "embed".into(),
                serde_json::json!({"vocab": c.dvae.vocab_size, "tokens": c.dvae.num_tokens(), "dim": c.decoder.hidden_dim}),
            );
            s.insert("slot_attention".into(), serde_json::to_value(&c.slots).expect("serializable"));
            s.insert("decoder".into(), serde_json::to_value(&c.decoder).expect("serializable"));
        }
        DecoderKind::Mixture => {
            s.insert("mixture".into(), serde_json::to_value(run.mixture()).expect("serializable"));
        }
    }
    s
}

impl Checkpoint {
    /// Parameters only (no optimizer or training state).
    pub fn of_model(run: &RunConfig, model: &AnyModel) -> Checkpoint {
        let mut run = run.clone();
        run.decoder = model.kind();
        Self::build(&run, model.store(), None, None)
    }

    pub fn of_trainer(t: &Trainer) -> Checkpoint {
        Self::build(&t.run, t.model.store(), Some(&t.opt), Some(t.state.clone()))
    }

    fn build(run: &RunConfig, store: &ParamStore, opt: Option<&Adam>, train: Option<TrainState>) -> Checkpoint {
        let params = store.entries().iter().map(|e| e.data.to_vec()).collect();
        let metas = store
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.shape.clone(),
            })
            .collect();
        Checkpoint {
            header: Header {
                kind: run.decoder,
                config: run.clone(),
                sections: sections_for(run, run.decoder),
                params: metas,
                optimizer: opt.map(|o| OptimizerMeta {
                    step: o.step,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                }),
                train,
            },
            params,
            moments: opt.map(|o| (o.m.clone(), o.v.clone())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |vs: &[Vec<f64>]| {
            for v in vs {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        };
        push(&self.params);
        if let Some((m, v)) = &self.moments {
            push(m);
            push(v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let min = MAGIC.len() + 4 + 8 + 32;
        if bytes.len() < min || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length out of range".into()))?;
        let header: Header = serde_json::from_slice(&body[20..hend])?;
        let mut payload = body[hend..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let sizes: Vec<usize> = header.params.iter().map(|m| m.shape.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let groups = if header.optimizer.is_some() { 3 } else { 1 };
        if (body.len() - hend) != total * groups * 8 {
            return Err(Error::Corrupt("payload size does not match the header".into()));
        }
        let mut take = || -> Vec<Vec<f64>> { sizes.iter().map(|&n| payload.by_ref().take(n).collect()).collect() };
        let params = take();
        let moments = header.optimizer.as_ref().map(|_| {
            let m = take();
            (m, take())
        });
        Ok(Checkpoint {
            header,
            params,
            moments,
        })
    }

    /// Atomic write: temporary file in the target directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and copies the stored parameters into it.
    pub fn model(&self) -> Result<AnyModel> {
        let mut run = self.header.config.clone();
        run.decoder = self.header.kind;
        let mut model = AnyModel::build(&run)?;
        let store = model.store_mut();
        if store.len() != self.header.params.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (i, (meta, data)) in self.header.params.iter().zip(&self.params).enumerate() {
            let e = &store.entries()[i];
            if e.name != meta.name || e.shape != meta.shape {
                return Err(Error::Mismatch(format!(
                    "tensor {i}: checkpoint {} {:?} vs model {} {:?}",
                    meta.name, meta.shape, e.name, e.shape
                )));
            }
            store.set(slotgen_tensor::ParamId(i), data.clone());
        }
        Ok(model)
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let (Some(meta), Some((m, v)), Some(state)) = (&self.header.optimizer, &self.moments, &self.header.train) else {
            return Err(Error::Invalid("checkpoint carries no training state".into()));
        };
        let opt = Adam {
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            step: meta.step,
            m: m.clone(),
            v: v.clone(),
        };
        Trainer::assemble(&self.header.config, model, opt, state.clone())
    }

    /// Hash of parameter names, shapes and values.
    pub fn model_hash(&self) -> String {
        hash_params(self.header.params.iter().map(|m| (&m.name[..], &m.shape[..])).zip(self.params.iter().map(|p| &p[..])))
    }
}

fn hash_params<'a>(items: impl Iterator<Item = ((&'a str, &'a [usize]), &'a [f64])>) -> String {
    let mut h = Sha256::new();
    for ((name, shape), data) in items {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in data {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Same value as [`Checkpoint::model_hash`] for a live parameter store.
pub fn store_hash(store: &ParamStore) -> String {
    hash_params(store.entries().iter().map(|e| ((&e.name[..], &e.shape[..]), &e.data[..])))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
