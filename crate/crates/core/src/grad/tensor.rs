//! Tensor handles.
//!
//! A `Tensor` is a cheap handle to a value recorded on some [`Tape`]: the
//! node id plus a shared copy of the shape and data. Handles never mutate;
//! every operation produces a new node.

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Tensor {
    pub(crate) id: NodeId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a scalar (or one-element) tensor.
    ///
    /// Panics if the tensor holds more than one element; that is a
    /// programming error, not a data error.
    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Row-major element access for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }
}
