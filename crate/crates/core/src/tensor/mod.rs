//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Tensors are immutable once built. Differentiable operations record a
//! backward closure and their parent handles; [`Tensor::backward`] replays
//! the recorded operations in exact reverse execution order and returns the
//! accumulated gradients keyed by tensor identity. Training paths run at
//! `f32`, verification paths at `f64` through the same generic code.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

mod checkpoint;
pub mod fd;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::Adam;

/// Scalar element type of a tensor: `f32` for training, `f64` for checks.
pub trait Real:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward closure: maps (output data, upstream gradient) to per-parent
/// gradients, `None` for parents outside the gradient graph.
type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct BackOp<T: Real> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Option<BackOp<T>>,
}

/// A dense n-dimensional array handle. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor<T: Real = f32>(Arc<Node<T>>);

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            op: None,
        }))
    }

    fn from_op(shape: Vec<usize>, data: Vec<T>, op: BackOp<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = op.parents.iter().any(|p| p.requires_grad_flag());
        if requires_grad {
            Tensor(Arc::new(Node {
                id: fresh_id(),
                shape,
                data,
                requires_grad: true,
                op: Some(op),
            }))
        } else {
            // No gradient path: drop the recording so evaluation stays cheap.
            Tensor::leaf(shape, data, false)
        }
    }

    /// Build a tensor from explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![T::zero(); numel], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; numel], false)
    }

    pub fn scalar(value: T) -> Self {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Mark this tensor as a gradient leaf. Returns a new handle.
    pub fn requires_grad(&self) -> Self {
        Tensor(Arc::new(Node {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: true,
            op: None,
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn is_requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    fn requires_grad_flag(&self) -> bool {
        self.0.requires_grad
    }

    /// Detached copy: same values, outside any gradient graph.
    pub fn detach(&self) -> Self {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.data[0]
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.0.data.iter().any(|v| !v.is_finite()) {
            Err(Error::NonFinite(context.to_string()))
        } else {
            Ok(())
        }
    }

    /// Reverse-mode sweep from a scalar output. Records are replayed in
    /// exact reverse execution order; returns gradients for every reached
    /// leaf that requires grad.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward() requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        self.ensure_finite("backward() seed")?;

        // Collect the reachable subgraph.
        let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.0.id) || !t.0.requires_grad {
                continue;
            }
            if let Some(op) = &t.0.op {
                for p in &op.parents {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.0.id, t);
        }

        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.0.id, vec![T::one()]);

        for id in order {
            let node = &nodes[&id];
            let Some(op) = &node.0.op else { continue };
            let Some(d_out) = grads.get(&id).cloned() else {
                continue;
            };
            let parent_grads = (op.backward)(&node.0.data, &d_out);
            debug_assert_eq!(parent_grads.len(), op.parents.len());
            for (parent, pg) in op.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel(), "gradient shape mismatch");
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a = *a + *g;
                        }
                    }
                    None => {
                        grads.insert(parent.0.id, pg);
                    }
                }
            }
            // Interior gradients are no longer needed once consumed.
            if node.0.op.is_some() {
                grads.remove(&id);
            }
        }

        Ok(Gradients { map: grads })
    }
}

/// Gradients produced by one backward sweep, keyed by tensor identity.
pub struct Gradients<T: Real = f32> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.map.get(&tensor.id()).map(|v| v.as_slice())
    }

    pub fn param(&self, param: &Parameter<T>) -> Option<&[T]> {
        self.get(&param.tensor)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A named trainable tensor. Names are dotted paths, unique within a model.
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        let tensor = Tensor::from_vec(shape, data)?.requires_grad();
        Ok(Parameter {
            name: name.into(),
            tensor,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter {
            name: name.into(),
            tensor: Tensor::zeros(shape).requires_grad(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }

    /// Replace the stored values in place (same shape). Used by optimizers
    /// and checkpoint loading; the handle becomes a fresh gradient leaf.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.tensor.numel() {
            return Err(Error::InvalidArgument(format!(
                "parameter '{}': set_data length {} != {}",
                self.name,
                data.len(),
                self.tensor.numel()
            )));
        }
        self.tensor = Tensor::leaf(self.tensor.shape().to_vec(), data, true);
        Ok(())
    }
}

/// Validate that a parameter list has unique names.
pub fn check_unique_names<T: Real>(params: &[&Parameter<T>]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Validation(format!(
                "duplicate parameter name '{}'",
                p.name
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f32>::zeros(&[2, 2]).requires_grad();
        assert!(t.backward().is_err());
    }

    #[test]
    fn leaf_gradient_of_self_is_one() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let g = x.backward().unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad();
        let y = x.detach().mul(&x.detach()).unwrap();
        assert!(!y.is_requires_grad());
    }

    #[test]
    fn duplicate_names_rejected() {
        let a = Parameter::<f32>::zeros("w", &[1]);
        let b = Parameter::<f32>::zeros("w", &[1]);
        assert!(check_unique_names(&[&a, &b]).is_err());
    }
}
