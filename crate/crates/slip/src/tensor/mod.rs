//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Just enough numerics for small transformers and the two contrastive
//! losses: dense row-major tensors, a Wengert-list gradient tape, and a
//! finite-difference gradient checker. Training runs in `f32`; every op
//! is generic over [`Scalar`] so oracles and gradient checks can run the
//! identical code path in `f64`.
//!
//! A [`Tape`] is explicit and single-use: create one per training step,
//! attach leaves with [`Tape::leaf`], run the forward pass, call
//! [`Tensor::backward`] once, then drop (or [`Tape::reset`]) it.

mod gradcheck;
mod ops;
mod scalar;

pub use gradcheck::{grad_check, GradCheckReport, Precision, TensorFn};
pub use scalar::Scalar;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("index {index} out of range {bound} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("tape contract violated: {0}")]
    Contract(String),
    #[error("operands belong to different tapes")]
    DisjointTapes,
    #[error("gradient probe hit a non-finite value: {0}")]
    Probe(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule of one recorded op: maps the output gradient to
/// `(parent node id, parent gradient contribution)` pairs.
type BackFn<E> = Box<dyn Fn(&[E]) -> Vec<(usize, Vec<E>)>>;

struct Node<E: Scalar> {
    back: Option<BackFn<E>>,
    len: usize,
}

#[derive(PartialEq, Clone, Copy)]
enum TapeState {
    Recording,
    Consumed,
}

struct TapeInner<E: Scalar> {
    nodes: Vec<Node<E>>,
    state: TapeState,
}

/// Gradient tape recording the forward pass of one step.
pub struct Tape<E: Scalar = f32> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                state: TapeState::Recording,
            })),
        }
    }

    fn same_tape(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node<E>) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.state == TapeState::Consumed {
            return Err(TensorError::Contract(
                "recording on a consumed tape; call reset() first".into(),
            ));
        }
        inner.nodes.push(node);
        Ok(inner.nodes.len() - 1)
    }

    /// Registers `t` as a differentiable leaf and returns a tensor that
    /// shares its storage but participates in this tape.
    pub fn leaf(&self, t: &Tensor<E>) -> Result<Tensor<E>> {
        let id = self.push(Node {
            back: None,
            len: t.len(),
        })?;
        Ok(Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        })
    }

    /// Records a custom op. `back` receives the output gradient and must
    /// return one gradient per entry of `parents`, each matching that
    /// parent's length. Exposed so alternative objectives (and test
    /// fixtures) can extend the op set.
    pub fn custom_op(
        &self,
        parents: &[&Tensor<E>],
        out_shape: Vec<usize>,
        out_data: Vec<E>,
        back: impl Fn(&[E]) -> Vec<Vec<E>> + 'static,
    ) -> Result<Tensor<E>> {
        let ids: Vec<Option<usize>> = parents.iter().map(|p| p.node_id()).collect();
        for p in parents {
            if let Some(nr) = &p.node {
                if !self.same_tape(&nr.tape) {
                    return Err(TensorError::DisjointTapes);
                }
            }
        }
        let back_fn: BackFn<E> = Box::new(move |g: &[E]| {
            back(g)
                .into_iter()
                .zip(ids.iter())
                .filter_map(|(grad, id)| id.map(|i| (i, grad)))
                .collect()
        });
        let id = self.push(Node {
            back: Some(back_fn),
            len: out_data.len(),
        })?;
        Ok(Tensor {
            shape: out_shape,
            data: Arc::new(out_data),
            node: Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        })
    }

    /// Clears all recorded nodes and makes the tape recordable again.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.state = TapeState::Recording;
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct NodeRef<E: Scalar> {
    tape: Tape<E>,
    id: usize,
}

impl<E: Scalar> Clone for NodeRef<E> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

/// Dense row-major tensor. Immutable after creation; cloning shares the
/// underlying buffer.
pub struct Tensor<E: Scalar = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<NodeRef<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<E: Scalar> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", E::NAME, self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape,
                reason: "zero extent".into(),
            });
        }
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("data length {} does not match extent product", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![E::ZERO; n]),
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, v: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; n]),
            node: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, E::ONE)
    }

    /// N×N identity.
    pub fn eye(n: usize) -> Self {
        let mut d = vec![E::ZERO; n * n];
        for i in 0..n {
            d[i * n + i] = E::ONE;
        }
        Tensor {
            shape: vec![n, n],
            data: Arc::new(d),
            node: None,
        }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Re-types the element precision (used by oracles and grad checks).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.to_f64())).collect()),
            node: None,
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Drops the tape association; data is shared.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor<E>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Backpropagates from a scalar loss through the recorded tape.
    ///
    /// The tape is consumed: a second backward without [`Tape::reset`]
    /// is a contract error, as is calling this on a detached tensor or a
    /// non-scalar.
    pub fn backward(&self) -> Result<Gradients<E>> {
        let node = self.node.as_ref().ok_or_else(|| {
            TensorError::Contract("backward on a tensor detached from any tape".into())
        })?;
        if self.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape
            )));
        }
        let tape = node.tape.clone();
        let mut inner = tape.inner.borrow_mut();
        if inner.state == TapeState::Consumed {
            return Err(TensorError::Contract(
                "backward called twice on the same tape without reset".into(),
            ));
        }
        inner.state = TapeState::Consumed;

        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = (0..n).map(|_| None).collect();
        grads[node.id] = Some(vec![E::ONE]);

        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let is_leaf = inner.nodes[id].back.is_none();
            if is_leaf {
                grads[id] = Some(g);
                continue;
            }
            let back = inner.nodes[id].back.as_ref().unwrap();
            for (pid, contrib) in back(&g) {
                debug_assert!(pid < id, "tape order violated");
                debug_assert_eq!(contrib.len(), inner.nodes[pid].len);
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a = *a + c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Tensor<f32> {
    /// Convenience accessor mirroring [`Tensor::data`] under its common name.
    pub fn values(&self) -> &[f32] {
        &self.data
    }
}

/// Gradients keyed by tape node, produced by [`Tensor::backward`].
#[derive(Debug)]
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient with respect to `t`, which must be on the consumed tape.
    /// `None` when `t` was not reached from the loss.
    pub fn get(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let id = t.node_id()?;
        self.grads.get(id)?.as_ref().map(|g| Tensor {
            shape: t.shape.clone(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    /// Gradient of `t`, or a zero tensor of its shape when `t` did not
    /// participate in the loss.
    pub fn get_or_zero(&self, t: &Tensor<E>) -> Tensor<E> {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::<f32>::new();
        let w = tape
            .leaf(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let loss = w.sum().unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&w).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_backward_without_reset_errors() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = w.sum().unwrap();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn backward_on_detached_errors() {
        let t = Tensor::<f32>::scalar(3.0);
        assert!(matches!(t.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(w.backward(), Err(TensorError::Contract(_))));
    }

    #[test]
    fn reset_allows_reuse() {
        let tape = Tape::<f32>::new();
        let w = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        w.sum().unwrap().backward().unwrap();
        tape.reset();
        let w2 = tape.leaf(&Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        let g = w2.sum().unwrap().backward().unwrap().get(&w2).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let tape = Tape::<f32>::new();
        let used = tape.leaf(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = tape.leaf(&Tensor::from_vec(vec![2], vec![5.0, 6.0]).unwrap()).unwrap();
        let grads = used.sum().unwrap().backward().unwrap();
        assert!(grads.get(&unused).is_none());
        assert_eq!(grads.get_or_zero(&unused).data(), &[0.0, 0.0]);
    }
}
