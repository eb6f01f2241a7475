use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

/// Named parameter storage. Insertion order is the canonical order for
/// checkpoints and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name} shape");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            data: Arc::new(data),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id.0].data)
    }

    /// Replaces the values of an existing parameter (shape must match).
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) {
        assert_eq!(self.entries[id.0].data.len(), data.len(), "set {} size", self.entries[id.0].name);
        self.entries[id.0].data = Arc::new(data);
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Leaf tensors that record gradients.
    pub fn bind(&self) -> Vars {
        Vars {
            tensors: self.entries.iter().map(|e| Tensor::leaf(e.data.clone(), &e.shape)).collect(),
        }
    }

    /// Constant tensors; no graph is built through them.
    pub fn bind_frozen(&self) -> Vars {
        Vars {
            tensors: self.entries.iter().map(|e| Tensor::from_arc(e.data.clone(), &e.shape)).collect(),
        }
    }
}

/// Tensors bound to a [`ParamStore`] for one forward pass.
pub struct Vars {
    tensors: Vec<Tensor>,
}

impl Vars {
    /// Per-parameter gradients, `None` where the parameter was unused.
    pub fn grads(&self, g: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.tensors.iter().map(|t| g.get(t).map(|s| s.to_vec())).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

impl Index<ParamId> for Vars {
    type Output = Tensor;
    fn index(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }
}
