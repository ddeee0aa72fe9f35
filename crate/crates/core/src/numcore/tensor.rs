use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use super::ops::Op;
use crate::error::{LabError, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _guard = GradModeGuard(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct Node {
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: RwLock<Option<Vec<f64>>>,
    requires_grad: bool,
    name: Option<String>,
    op: Mutex<Option<Op>>,
}

/// Dense row-major `f64` tensor with optional reverse-mode gradient tracking.
///
/// Cloning is cheap and shares storage: a clone is the same graph node.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        if let Some(name) = &self.0.name {
            s.field("name", name);
        }
        s.field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad);
        let data = self.0.data.read();
        if data.len() <= 8 {
            s.field("data", &*data);
        }
        s.finish()
    }
}

impl Tensor {
    fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        name: Option<String>,
        op: Option<Op>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            shape,
            data: RwLock::new(data),
            grad: RwLock::new(None),
            requires_grad,
            name,
            op: Mutex::new(op),
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len("new", &data, shape)?;
        Ok(Self::from_parts(data, shape.to_vec(), false, None, None))
    }

    /// Learnable leaf tensor. The name shows up in optimizer errors and checkpoints.
    pub fn param(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len("param", &data, shape)?;
        Ok(Self::from_parts(
            data,
            shape.to_vec(),
            true,
            Some(name.into()),
            None,
        ))
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::from_parts(values.to_vec(), vec![values.len()], false, None, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![value], vec![], false, None, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(vec![0.0; n], shape.to_vec(), false, None, None)
    }

    /// Result of a recorded op. The op is kept only if gradients are wanted.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        if track {
            Self::from_parts(data, shape, true, None, Some(op))
        } else {
            Self::from_parts(data, shape, false, None, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.read().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.0.data.read();
        assert_eq!(data.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.read().clone()
    }

    /// Sets every gradient entry to exactly 0.0 (allocating if absent).
    pub fn zero_grad(&self) {
        let mut g = self.0.grad.write();
        match g.as_mut() {
            Some(v) => v.iter_mut().for_each(|x| *x = 0.0),
            None => *g = Some(vec![0.0; self.numel()]),
        }
    }

    pub fn clear_grad(&self) {
        *self.0.grad.write() = None;
    }

    /// Overwrites the values in place, keeping graph identity.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        let mut data = self.0.data.write();
        if values.len() != data.len() {
            return Err(LabError::Shape {
                op: "assign",
                lhs: self.0.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.write());
    }

    /// Fresh constant leaf with the same values.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.to_vec(), self.0.shape.clone(), false, None, None)
    }

    /// Copy of this tensor as a named learnable leaf.
    pub fn to_param(&self, name: impl Into<String>) -> Tensor {
        Self::from_parts(
            self.to_vec(),
            self.0.shape.clone(),
            true,
            Some(name.into()),
            None,
        )
    }

    /// Copy of this tensor as a named constant leaf.
    pub fn to_frozen(&self, name: impl Into<String>) -> Tensor {
        Self::from_parts(
            self.to_vec(),
            self.0.shape.clone(),
            false,
            Some(name.into()),
            None,
        )
    }

    fn key(&self) -> *const Node {
        Arc::as_ptr(&self.0)
    }

    /// Reverse-mode pass from a scalar loss. Gradients are summed into the
    /// `grad` of every reachable learnable leaf; the recorded graph is
    /// released as it is traversed.
    pub fn backward(&self) -> Result<()> {
        if !self.0.shape.is_empty() {
            return Err(LabError::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            let op = node.0.op.lock().take();
            match op {
                None => {
                    let mut slot = node.0.grad.write();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    for (parent, pg) in op.backward(&g, &node.0.shape) {
                        match grads.get_mut(&parent.key()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.key(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked nodes: every parent precedes its children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashMap<*const Node, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if seen.insert(t.key(), ()).is_some() {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.0.op.lock().as_ref() {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains_key(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_len(op: &'static str, data: &[f64], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(LabError::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    Ok(())
}
