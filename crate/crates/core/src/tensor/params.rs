use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.frozen.push(false);
        ParamId(self.names.len() - 1)
    }

    /// Normal(0, std) initialisation.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let data = (0..numel).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        Ok(self.add(name, Tensor::new(shape.to_vec(), data)?))
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.add(name, Tensor::full(shape, T::from_f64_lossy(value))?))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Replaces a tensor, checking that the shape is unchanged.
    pub fn replace(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "param replace",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Overwrites every tensor with the one of the same name in `src`.
    /// Both stores must hold exactly the same names and shapes.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = *src
                .index
                .get(name)
                .ok_or_else(|| TensorError::Invalid(format!("missing tensor {name}")))?;
            let (have, want) = (src.tensors[j].shape(), self.tensors[i].shape());
            if have != want {
                return Err(TensorError::Invalid(format!(
                    "shape mismatch for tensor {name}: stored {have:?}, expected {want:?}"
                )));
            }
        }
        if let Some(extra) = src.names.iter().find(|n| !self.index.contains_key(*n)) {
            return Err(TensorError::Invalid(format!("unexpected tensor {extra}")));
        }
        for (i, name) in self.names.iter().enumerate() {
            self.tensors[i] = src.tensors[src.index[name]].clone();
        }
        Ok(())
    }

    /// Copies every parameter onto `tape` as a leaf. Frozen parameters do
    /// not request gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings(
            self.tensors
                .iter()
                .zip(&self.frozen)
                .map(|(t, frozen)| tape.leaf(t.clone(), !frozen))
                .collect(),
        )
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Wraps tape handles that stand in for a store's parameters, in id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
