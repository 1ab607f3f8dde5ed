//! Named parameter collections.
//!
//! Model weights, gradients and optimizer moments all share this layout so
//! they can be zipped tensor by tensor.

use rand::Rng;

use crate::matrix::Matrix;
use crate::rng::truncated_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Looks up a parameter that the model layout guarantees to exist.
    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_assign(s));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Flat view over every scalar, in layout order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    /// Mutable access to the `k`-th scalar in layout order.
    pub fn scalar_mut(&mut self, mut k: usize) -> &mut f64 {
        for t in &mut self.tensors {
            if k < t.len() {
                return &mut t.data_mut()[k];
            }
            k -= t.len();
        }
        panic!("scalar index out of range");
    }

    /// Overwrites every entry with truncated-normal draws in `[-bound, bound]`.
    pub fn fill_truncated_normal<R: Rng + ?Sized>(&mut self, rng: &mut R, bound: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = truncated_normal(rng, bound);
            }
        }
    }
}
