use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Backward closure: receives the gradient of the node output and a mask of
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Dense row-major f64 tensor with an optional backward graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.0.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Arc::new(data), false, None)
    }

    pub fn from_arc(data: Arc<Vec<f64>>, shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), data, false, None)
    }

    /// Leaf tensor that accumulates a gradient during `backward`.
    pub fn leaf(data: Arc<Vec<f64>>, shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), data, true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(vec![0.0; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel_of(shape)], shape)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    /// Result of an operation. The backward closure is dropped when no parent
    /// needs a gradient or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, Arc::new(data), requires, grad_fn)
    }

    pub(crate) fn from_op_arc(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Self {
        let requires = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Self::build(shape, data, requires, grad_fn)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        self.0.data.clone()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same data, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Reverse-mode pass from this tensor. The seed gradient is all ones, so
    /// for a scalar loss this yields d(loss)/d(leaf).
    pub fn backward(&self) -> Gradients {
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        if !self.requires_grad() {
            return Gradients { map: grads };
        }
        let order = self.topo_order();
        grads.insert(self.id(), vec![1.0; self.numel()]);
        for node in order.iter().rev() {
            let Some(gf) = &node.0.grad_fn else { continue };
            let Some(g) = grads.remove(&node.id()) else { continue };
            let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = (gf.backward)(&g, &needs);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), p.numel());
                match grads.get_mut(&p.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(p.id(), pg);
                    }
                }
            }
        }
        Gradients { map: grads }
    }

    /// Post-order over nodes that require a gradient.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

/// Gradients keyed by leaf tensor identity.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f64>> {
        self.map.remove(&t.id())
    }
}
