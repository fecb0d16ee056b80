use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter registry in registration order.
///
/// Tensors are reference-counted so a forward pass can put them on a tape
/// without copying; [`ParamStore::get_mut`] copies on write only while a tape
/// still holds a reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter().map(|t| &**t))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        value.expect_shape(self.get(id).shape(), self.name(id))?;
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf; the result is indexed by [`ParamId`].
    pub fn load(&self, tape: &mut Tape<T>, requires_grad: bool) -> BoundParams {
        BoundParams(
            self.tensors
                .iter()
                .map(|t| tape.leaf_shared(Arc::clone(t), requires_grad))
                .collect(),
        )
    }

    /// Gradients for every parameter after `tape.backward`, zero-filled for
    /// parameters off the loss path.
    pub fn grads(&self, tape: &mut Tape<T>, bound: &BoundParams) -> Vec<Tensor<T>> {
        self.ids()
            .map(|id| {
                tape.take_grad(bound.var(id))
                    .unwrap_or_else(|| Tensor::zeros(self.get(id).shape()))
            })
            .collect()
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension("parameter layouts differ".into()))
        }
    }
}

/// Parameter leaves of one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// The parameter bound to `v`, if any.
    pub fn id_of(&self, v: Var) -> Option<ParamId> {
        self.0.iter().position(|&x| x == v).map(ParamId)
    }
}

/// Normal samples with the given std, redrawn until within two std.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
