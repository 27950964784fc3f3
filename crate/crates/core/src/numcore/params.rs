//! Named parameter storage and binding onto a tape.

use std::ops::Index;

use crate::numcore::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(self.tensors.iter().map(|t| tape.var(t)).collect())
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(&t.clone().with_requires_grad(false)))
                .collect(),
        )
    }

    /// Adds the tape's gradients for `bound` into each parameter's grad.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound<'_>) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Overwrites values of same-named, same-shaped parameters from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| format!("missing parameter {name}"))?;
            if src.shape() != t.shape() {
                return Err(format!("parameter {name}: shape {:?} vs {:?}", src.shape(), t.shape()));
            }
            t.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t>(pub Vec<Var<'t>>);

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.0[id.0]
    }
}
